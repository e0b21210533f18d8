//! Model assembly: encoder, image decoder, pose head, anchor encoder, and
//! the geometry alignment adapter, plus checkpoint serialization.

use super::blocks::*;
use super::ModelConfig;
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::nvcb::{NvcbContainer, NvcbEntry};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::params::ParamStore;
use crate::tensor::Tensor;
use std::cell::Cell;
use std::path::Path;

struct EncLevel {
    res: ResBlockP,
    attn: Option<AttnP>,
    down: Option<ConvP>,
}

struct DecLevel {
    upconv: ConvP,
    res: ResBlockP,
    attn: Option<AttnP>,
}

struct PoseLevel {
    upconv: ConvP,
    res: ResBlockP,
}

struct AdapterP {
    taps: Vec<ConvP>,
    res: ResBlockP,
    out: ConvP,
}

pub struct ModelOutput {
    pub eps_img: Var,
    pub eps_pose: Option<Var>,
    /// Encoder features captured after each attention layer.
    pub taps: Vec<Var>,
}

pub struct DualStreamModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    stem: ConvP,
    enc: Vec<EncLevel>,
    mid: ResBlockP,
    anchor_proj: LinP,
    dec: Vec<DecLevel>,
    out_norm: NormP,
    out_conv: ConvP,
    pose_proj: Option<ConvP>,
    pose_dec: Vec<PoseLevel>,
    pose_out_norm: Option<NormP>,
    pose_out_conv: Option<ConvP>,
    time_mlp: (LinP, LinP),
    ext_mlp: (LinP, LinP),
    anchor_convs: Vec<ConvP>,
    anchor_head: LinP,
    adapter: AdapterP,
    forwards: Cell<u64>,
}

impl DualStreamModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let levels = config.levels();
        let emb = config.time_embed_dim;

        let (stem, enc, mid) = {
            let mut init = Init::new(&mut store, seed, "enc");
            let stem = init.conv("stem", config.channels_at(0), config.in_channels(), 3);
            let mut enc = Vec::with_capacity(levels);
            for l in 0..levels {
                let c_in = if l == 0 {
                    config.channels_at(0)
                } else {
                    config.channels_at(l - 1)
                };
                let c = config.channels_at(l);
                enc.push(EncLevel {
                    res: init.resblock(&format!("l{l}.res"), c_in, c, emb),
                    attn: config
                        .attention_levels
                        .contains(&l)
                        .then(|| init.attention(&format!("l{l}.attn"), c)),
                    // Downsampling is bilinear halving followed by a conv,
                    // mirroring the upsampling path.
                    down: (l < levels - 1).then(|| init.conv(&format!("l{l}.down"), c, c, 3)),
                });
            }
            let c_top = config.channels_at(levels - 1);
            let mid = init.resblock("mid.res", c_top, c_top, emb);
            (stem, enc, mid)
        };

        let anchor_proj = Init::new(&mut store, seed, "anchor_proj").linear(
            "lin",
            config.channels_at(levels - 1),
            config.anchor_embed_dim,
        );

        let (dec, out_norm, out_conv) = {
            let mut init = Init::new(&mut store, seed, "dec");
            let mut dec = Vec::new();
            for l in (0..levels - 1).rev() {
                let c_hi = config.channels_at(l + 1);
                let c = config.channels_at(l);
                dec.push(DecLevel {
                    upconv: init.conv(&format!("l{l}.up"), c, c_hi, 3),
                    res: init.resblock(&format!("l{l}.res"), 2 * c, c, emb),
                    attn: config
                        .attention_levels
                        .contains(&l)
                        .then(|| init.attention(&format!("l{l}.attn"), c)),
                });
            }
            let out_norm = init.norm("out.norm", config.channels_at(0));
            let out_conv = init.conv_zero("out.conv", config.c_img, config.channels_at(0), 3);
            (dec, out_norm, out_conv)
        };

        let (pose_proj, pose_dec, pose_out_norm, pose_out_conv) = if config.dual_stream {
            let mut init = Init::new(&mut store, seed, "pose");
            let p_top = config.pose_channels_at(levels - 1);
            let proj = init.conv("proj", p_top, config.channels_at(levels - 1), 1);
            let mut pose_dec = Vec::new();
            for l in (0..levels - 1).rev() {
                let p_hi = config.pose_channels_at(l + 1);
                let p = config.pose_channels_at(l);
                let c_skip = config.channels_at(l);
                pose_dec.push(PoseLevel {
                    upconv: init.conv(&format!("l{l}.up"), p, p_hi, 3),
                    res: init.resblock(&format!("l{l}.res"), p + c_skip, p, emb),
                });
            }
            let pn = init.norm("out.norm", config.pose_channels_at(0));
            let pc = init.conv_zero("out.conv", 6, config.pose_channels_at(0), 3);
            (Some(proj), pose_dec, Some(pn), Some(pc))
        } else {
            (None, Vec::new(), None, None)
        };

        let time_mlp = {
            let mut init = Init::new(&mut store, seed, "time");
            (init.linear("l1", emb, emb), init.linear("l2", emb, emb))
        };
        let ext_mlp = {
            let mut init = Init::new(&mut store, seed, "ext");
            (init.linear("l1", emb, 12), init.linear("l2", emb, emb))
        };

        let (anchor_convs, anchor_head) = {
            let mut init = Init::new(&mut store, seed, "anchor_enc");
            let widths = [16usize, 32, 64];
            let mut convs = Vec::new();
            let mut c_in = config.c_img;
            for (i, &c) in widths.iter().enumerate() {
                convs.push(init.conv(&format!("c{i}"), c, c_in, 3));
                c_in = c;
            }
            let head = init.linear("head", config.anchor_embed_dim, c_in);
            (convs, head)
        };

        let adapter = {
            let mut init = Init::new(&mut store, seed, "adapter");
            let a = config.adapter_channels;
            let taps = config
                .attention_levels
                .iter()
                .map(|&l| init.conv(&format!("tap{l}"), a, config.channels_at(l), 1))
                .collect();
            let res = init.resblock("res", a, a, config.time_embed_dim);
            let out = init.conv_zero("out", 6, a, 3);
            AdapterP { taps, res, out }
        };

        Ok(DualStreamModel {
            config,
            store,
            stem,
            enc,
            mid,
            anchor_proj,
            dec,
            out_norm,
            out_conv,
            pose_proj,
            pose_dec,
            pose_out_norm,
            pose_out_conv,
            time_mlp,
            ext_mlp,
            anchor_convs,
            anchor_head,
            adapter,
            forwards: Cell::new(0),
        })
    }

    pub fn forward_count(&self) -> u64 {
        self.forwards.get()
    }

    /// Small strided conv stack with global average pooling; the learned
    /// stand-in for a pretrained image feature encoder.
    pub fn anchor_encode(&self, g: &mut Graph, anchor_image: &Tensor) -> Result<Var> {
        let shape = anchor_image.shape().to_vec();
        if shape.len() != 3 || shape[0] != self.config.c_img {
            return Err(Error::Dimension {
                op: "anchor_encode",
                lhs: shape,
                rhs: vec![self.config.c_img, 0, 0],
            });
        }
        let mut img = anchor_image.clone();
        img.requires_grad = false;
        let x0 = g.leaf(img);
        let mut x = g.reshape(x0, &[1, shape[0], shape[1], shape[2]])?;
        for conv in &self.anchor_convs {
            let s = g.shape(x).to_vec();
            x = g.bilinear_resize(x, (s[2] / 2).max(1), (s[3] / 2).max(1))?;
            x = apply_conv(g, &self.store, conv, x)?;
            x = g.silu(x);
        }
        // Global average pool via matmul with a constant 1/(h*w) vector.
        let s = g.shape(x).to_vec();
        let (c, hw) = (s[1], s[2] * s[3]);
        let flat = g.reshape(x, &[c, hw])?;
        let pool = g.constant(Tensor::full(&[hw, 1], 1.0 / hw as f64));
        let pooled = g.matmul(flat, pool)?;
        let row = g.reshape(pooled, &[1, c])?;
        apply_linear(g, &self.store, &self.anchor_head, row)
    }

    fn frame_embedding(
        &self,
        g: &mut Graph,
        k_step: usize,
        extrinsics: &[CameraPose],
        ext_mask: &[bool],
    ) -> Result<Var> {
        let emb_dim = self.config.time_embed_dim;
        let temb_in = g.constant(timestep_embedding(k_step, emb_dim));
        let mut temb = apply_linear(g, &self.store, &self.time_mlp.0, temb_in)?;
        temb = g.silu(temb);
        temb = apply_linear(g, &self.store, &self.time_mlp.1, temb)?;

        let t = extrinsics.len();
        let mut flat = Vec::with_capacity(t * 12);
        for pose in extrinsics {
            flat.extend_from_slice(&pose.to_flat12());
        }
        let ext_in = g.constant(Tensor::from_vec(&[t, 12], flat)?);
        let mut ext = apply_linear(g, &self.store, &self.ext_mlp.0, ext_in)?;
        ext = g.silu(ext);
        ext = apply_linear(g, &self.store, &self.ext_mlp.1, ext)?;
        // Zero the masked (condition-segment) rows.
        let mask_col = g.constant(Tensor::from_vec(
            &[t, 1],
            ext_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )?);
        let ext_masked = g.mul(ext, mask_col)?;
        g.add(temb, ext_masked)
    }

    /// One denoising forward pass.
    ///
    /// `noisy` is `[T, noisy_channels, h', w']`, `cond` is
    /// `[T, c_img + 6, h', w']`; both are concatenated channelwise at the
    /// stem. Returns per-stream noise predictions plus the encoder taps.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        noisy: Var,
        cond: Var,
        k_step: usize,
        extrinsics: &[CameraPose],
        ext_mask: &[bool],
        anchor_feat: Var,
    ) -> Result<ModelOutput> {
        self.forwards.set(self.forwards.get() + 1);
        let cfg = &self.config;
        let t = g.shape(noisy)[0];
        if g.shape(noisy)[1] != cfg.noisy_channels() || g.shape(cond)[1] != cfg.c_img + 6 {
            return Err(Error::Dimension {
                op: "forward(stem)",
                lhs: g.shape(noisy).to_vec(),
                rhs: g.shape(cond).to_vec(),
            });
        }
        if extrinsics.len() != t || ext_mask.len() != t {
            return Err(Error::contract("extrinsics length != T"));
        }
        let emb = self.frame_embedding(g, k_step, extrinsics, ext_mask)?;

        let input = g.concat(&[noisy, cond], 1)?;
        let mut x = apply_conv(g, &self.store, &self.stem, input)?;

        let mut taps = Vec::new();
        let mut skips = Vec::new();
        let levels = cfg.levels();
        for (l, level) in self.enc.iter().enumerate() {
            x = apply_resblock(g, &self.store, &level.res, cfg.norm_groups, x, emb)?;
            if let Some(attn) = &level.attn {
                x = apply_attention(g, &self.store, attn, cfg.norm_groups, x)?;
                taps.push(x);
            }
            if l < levels - 1 {
                skips.push(x);
            }
            if let Some(down) = &level.down {
                let s = g.shape(x).to_vec();
                x = g.bilinear_resize(x, s[2] / 2, s[3] / 2)?;
                x = apply_conv(g, &self.store, down, x)?;
            }
        }

        // Anchor feature added globally at the bottleneck.
        let anchor = apply_linear(g, &self.store, &self.anchor_proj, anchor_feat)?;
        let c_top = g.shape(anchor)[1];
        let anchor4 = g.reshape(anchor, &[1, c_top, 1, 1])?;
        x = g.add(x, anchor4)?;
        x = apply_resblock(g, &self.store, &self.mid, cfg.norm_groups, x, emb)?;
        let bottleneck = x;

        // Image decoder.
        let mut y = bottleneck;
        for (i, level) in self.dec.iter().enumerate() {
            let l = levels - 2 - i;
            let s = g.shape(y).to_vec();
            y = g.bilinear_resize(y, s[2] * 2, s[3] * 2)?;
            y = apply_conv(g, &self.store, &level.upconv, y)?;
            y = g.concat(&[y, skips[l]], 1)?;
            y = apply_resblock(g, &self.store, &level.res, cfg.norm_groups, y, emb)?;
            if let Some(attn) = &level.attn {
                y = apply_attention(g, &self.store, attn, cfg.norm_groups, y)?;
            }
        }
        y = apply_norm(g, &self.store, self.out_norm, cfg.norm_groups, y)?;
        y = g.silu(y);
        let eps_img = apply_conv(g, &self.store, &self.out_conv, y)?;

        // Pose head: same skips and embedding, fully convolutional, slim.
        let eps_pose = if let Some(proj) = &self.pose_proj {
            let mut p = apply_conv(g, &self.store, proj, bottleneck)?;
            for (i, level) in self.pose_dec.iter().enumerate() {
                let l = levels - 2 - i;
                let s = g.shape(p).to_vec();
                p = g.bilinear_resize(p, s[2] * 2, s[3] * 2)?;
                p = apply_conv(g, &self.store, &level.upconv, p)?;
                p = g.concat(&[p, skips[l]], 1)?;
                p = apply_resblock(g, &self.store, &level.res, cfg.norm_groups, p, emb)?;
            }
            p = apply_norm(
                g,
                &self.store,
                self.pose_out_norm.as_ref().copied().unwrap(),
                cfg.norm_groups,
                p,
            )?;
            p = g.silu(p);
            Some(apply_conv(
                g,
                &self.store,
                self.pose_out_conv.as_ref().unwrap(),
                p,
            )?)
        } else {
            None
        };

        Ok(ModelOutput {
            eps_img,
            eps_pose,
            taps,
        })
    }

    /// Geometry alignment adapter: taps -> `[T, 6, h', w']` point-map
    /// regression. All operations are per-frame (temporally independent).
    pub fn alignment_adapter(&self, g: &mut Graph, taps: &[Var], emb: Var) -> Result<Var> {
        if taps.len() != self.adapter.taps.len() {
            return Err(Error::contract(format!(
                "expected {} taps, got {}",
                self.adapter.taps.len(),
                taps.len()
            )));
        }
        let (h, w) = (self.config.latent_h, self.config.latent_w);
        let mut acc: Option<Var> = None;
        for (tap, conv) in taps.iter().zip(&self.adapter.taps) {
            let up = g.bilinear_resize(*tap, h, w)?;
            let proj = apply_conv(g, &self.store, conv, up)?;
            acc = Some(match acc {
                Some(a) => g.add(a, proj)?,
                None => proj,
            });
        }
        let summed = acc.expect("at least one tap");
        let r = apply_resblock(
            g,
            &self.store,
            &self.adapter.res,
            self.config.norm_groups,
            summed,
            emb,
        )?;
        apply_conv(g, &self.store, &self.adapter.out, r)
    }

    /// Embedding used by the adapter resblock; timestep only, so the adapter
    /// stays temporally independent.
    pub fn adapter_embedding(&self, g: &mut Graph, k_step: usize, t: usize) -> Result<Var> {
        let emb_dim = self.config.time_embed_dim;
        let temb_in = g.constant(timestep_embedding(k_step, emb_dim));
        let mut temb = apply_linear(g, &self.store, &self.time_mlp.0, temb_in)?;
        temb = g.silu(temb);
        temb = apply_linear(g, &self.store, &self.time_mlp.1, temb)?;
        // Broadcast to T rows.
        let ones = g.constant(Tensor::full(&[t, 1], 1.0));
        g.mul(temb, ones).and_then(|x| {
            let d = self.config.time_embed_dim;
            g.reshape(x, &[t, d])
        })
    }

    pub fn param_count(&self, prefix: &str) -> usize {
        self.store
            .iter()
            .filter(|p| p.name().starts_with(prefix))
            .map(|p| p.numel())
            .sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|p| p.name().to_string()).collect()
    }

    // ---- checkpoint io ----

    pub fn save_checkpoint(&self, path: &Path, step: u64) -> Result<()> {
        let mut c = NvcbContainer::new();
        let config_json = serde_json::to_string(&self.config)?;
        c.push(NvcbEntry::f32(
            "__config_json",
            &[config_json.len()],
            config_json.bytes().map(|b| b as f32).collect(),
        ))?;
        c.push(NvcbEntry::f64("__step", &[1], vec![step as f64]))?;
        for p in self.store.iter() {
            c.push(NvcbEntry::f64(p.name(), p.shape(), p.values().to_vec()))?;
            c.push(NvcbEntry::f64(
                format!("{}.__adam_m", p.name()),
                p.shape(),
                p.m.clone(),
            ))?;
            c.push(NvcbEntry::f64(
                format!("{}.__adam_v", p.name()),
                p.shape(),
                p.v.clone(),
            ))?;
        }
        c.write_file(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, u64)> {
        let c = NvcbContainer::read_file(path)?;
        let config_entry = c
            .get("__config_json")
            .ok_or_else(|| Error::Format("checkpoint missing __config_json".into()))?;
        let bytes: Vec<u8> = config_entry.data.to_f64().iter().map(|&v| v as u8).collect();
        let config: ModelConfig = serde_json::from_slice(&bytes)?;
        let step = c
            .get("__step")
            .ok_or_else(|| Error::Format("checkpoint missing __step".into()))?
            .data
            .to_f64()[0] as u64;
        let mut model = DualStreamModel::new(config, 0)?;
        for i in 0..model.store.len() {
            let (name, shape) = {
                let p = model.store.entry(i);
                (p.name().to_string(), p.shape().to_vec())
            };
            let entry = c
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing {name}")))?;
            if entry.dims != shape {
                return Err(Error::Format(format!(
                    "checkpoint {name}: dims {:?} != {:?}",
                    entry.dims, shape
                )));
            }
            let p = model.store.entry_mut(i);
            p.values_mut().copy_from_slice(&entry.data.to_f64());
            if let Some(m) = c.get(&format!("{name}.__adam_m")) {
                p.m.copy_from_slice(&m.data.to_f64());
            }
            if let Some(v) = c.get(&format!("{name}.__adam_v")) {
                p.v.copy_from_slice(&v.data.to_f64());
            }
        }
        Ok((model, step))
    }
}
