//! The image-pose dual-stream denoising network.
//!
//! A shared convolutional encoder with spatio-temporal attention feeds two
//! decoders: the image decoder and a slim, attention-free pose head at one
//! tenth of the width. Encoder features tapped after each attention layer
//! feed the geometry alignment adapter during training.

mod blocks;
mod unet;

pub use blocks::timestep_embedding;
pub use unet::{DualStreamModel, ModelOutput};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_base")]
    pub base_channels: usize,
    #[serde(default = "d_mults")]
    pub channel_multipliers: Vec<usize>,
    /// Levels carrying spatio-temporal attention (and encoder taps).
    #[serde(default = "d_attn")]
    pub attention_levels: Vec<usize>,
    /// Bundle sequence length T.
    #[serde(default = "d_t")]
    pub t: usize,
    #[serde(default = "d_latent")]
    pub latent_h: usize,
    #[serde(default = "d_latent")]
    pub latent_w: usize,
    #[serde(default = "d_cimg")]
    pub c_img: usize,
    #[serde(default = "d_time")]
    pub time_embed_dim: usize,
    #[serde(default = "d_anchor")]
    pub anchor_embed_dim: usize,
    #[serde(default = "d_adapter")]
    pub adapter_channels: usize,
    /// false = image-only ablation: no pose channels, no pose head.
    #[serde(default = "d_true")]
    pub dual_stream: bool,
    /// Upper bound on group-norm groups.
    #[serde(default = "d_groups")]
    pub norm_groups: usize,
}

fn d_base() -> usize {
    32
}
fn d_mults() -> Vec<usize> {
    vec![1, 2, 4]
}
fn d_attn() -> Vec<usize> {
    vec![0, 1, 2]
}
fn d_t() -> usize {
    8
}
fn d_latent() -> usize {
    16
}
fn d_cimg() -> usize {
    3
}
fn d_time() -> usize {
    128
}
fn d_anchor() -> usize {
    64
}
fn d_adapter() -> usize {
    32
}
fn d_true() -> bool {
    true
}
fn d_groups() -> usize {
    8
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: d_base(),
            channel_multipliers: d_mults(),
            attention_levels: d_attn(),
            t: d_t(),
            latent_h: d_latent(),
            latent_w: d_latent(),
            c_img: d_cimg(),
            time_embed_dim: d_time(),
            anchor_embed_dim: d_anchor(),
            adapter_channels: d_adapter(),
            dual_stream: d_true(),
            norm_groups: d_groups(),
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Pose decoding head base width: one tenth of the decoder, floored at 4.
    pub fn pose_head_base(&self) -> usize {
        (self.base_channels.div_ceil(10)).max(4)
    }

    pub fn pose_channels_at(&self, level: usize) -> usize {
        self.pose_head_base() * self.channel_multipliers[level]
    }

    /// Channels entering the encoder: noisy bundle plus masked conditioning.
    pub fn in_channels(&self) -> usize {
        if self.dual_stream {
            2 * (self.c_img + 6)
        } else {
            // Image-only noisy stream; conditioning keeps its pose channels.
            self.c_img + self.c_img + 6
        }
    }

    /// Channels of the noisy stream alone.
    pub fn noisy_channels(&self) -> usize {
        if self.dual_stream {
            self.c_img + 6
        } else {
            self.c_img
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels() < 2 {
            return Err(Error::config("need at least 2 resolution levels"));
        }
        let factor = 1usize << (self.levels() - 1);
        if self.latent_h % factor != 0 || self.latent_w % factor != 0 {
            return Err(Error::config(format!(
                "latent {}x{} not divisible by 2^(levels-1) = {}",
                self.latent_h, self.latent_w, factor
            )));
        }
        if self.pose_head_base() < 4 {
            return Err(Error::config("pose head base channels below 4"));
        }
        if self.attention_levels.iter().any(|&l| l >= self.levels()) {
            return Err(Error::config("attention level out of range"));
        }
        if self.t < 2 || self.c_img == 0 || self.base_channels < 4 {
            return Err(Error::config("degenerate model dimensions"));
        }
        if self.attention_levels.is_empty() {
            return Err(Error::config(
                "at least one attention level is required (the adapter taps them)",
            ));
        }
        Ok(())
    }
}
