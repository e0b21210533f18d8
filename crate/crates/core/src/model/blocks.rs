//! Parameter bookkeeping and the reusable network blocks.

use crate::error::Result;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::params::ParamStore;
use crate::tensor::{randn, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Independent init stream per component so that ablation variants share
/// bitwise-identical weights on their common sub-networks.
pub fn component_rng(seed: u64, component: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    ChaCha20Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha20Rng,
    pub prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, component: &str) -> Self {
        Init {
            store,
            rng: component_rng(seed, component),
            prefix: component.to_string(),
        }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    pub fn conv(&mut self, suffix: &str, c_out: usize, c_in: usize, k: usize) -> ConvP {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let mut w = randn(&[c_out, c_in, k, k], &mut self.rng);
        for v in w.data_mut() {
            *v *= std;
        }
        ConvP {
            w: self.store.add(self.name(&format!("{suffix}.w")), &[c_out, c_in, k, k], w.into_data()),
            b: self.store.add(self.name(&format!("{suffix}.b")), &[c_out], vec![0.0; c_out]),
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn conv_zero(&mut self, suffix: &str, c_out: usize, c_in: usize, k: usize) -> ConvP {
        ConvP {
            w: self.store.add(
                self.name(&format!("{suffix}.w")),
                &[c_out, c_in, k, k],
                vec![0.0; c_out * c_in * k * k],
            ),
            b: self.store.add(self.name(&format!("{suffix}.b")), &[c_out], vec![0.0; c_out]),
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn linear(&mut self, suffix: &str, d_out: usize, d_in: usize) -> LinP {
        let std = (1.0 / d_in as f64).sqrt();
        let mut w = randn(&[d_in, d_out], &mut self.rng);
        for v in w.data_mut() {
            *v *= std;
        }
        LinP {
            w: self.store.add(self.name(&format!("{suffix}.w")), &[d_in, d_out], w.into_data()),
            b: self.store.add(self.name(&format!("{suffix}.b")), &[d_out], vec![0.0; d_out]),
        }
    }

    pub fn norm(&mut self, suffix: &str, c: usize) -> NormP {
        NormP {
            g: self.store.add(self.name(&format!("{suffix}.g")), &[c], vec![1.0; c]),
            b: self.store.add(self.name(&format!("{suffix}.b")), &[c], vec![0.0; c]),
            channels: c,
        }
    }

    pub fn resblock(&mut self, suffix: &str, c_in: usize, c_out: usize, emb_dim: usize) -> ResBlockP {
        ResBlockP {
            norm1: self.norm(&format!("{suffix}.norm1"), c_in),
            conv1: self.conv(&format!("{suffix}.conv1"), c_out, c_in, 3),
            emb: self.linear(&format!("{suffix}.emb"), c_out, emb_dim),
            norm2: self.norm(&format!("{suffix}.norm2"), c_out),
            conv2: self.conv_zero(&format!("{suffix}.conv2"), c_out, c_out, 3),
            skip: if c_in != c_out {
                Some(self.conv(&format!("{suffix}.skip"), c_out, c_in, 1))
            } else {
                None
            },
        }
    }

    pub fn attention(&mut self, suffix: &str, c: usize) -> AttnP {
        AttnP {
            norm: self.norm(&format!("{suffix}.norm"), c),
            q: self.linear(&format!("{suffix}.q"), c, c),
            k: self.linear(&format!("{suffix}.k"), c, c),
            v: self.linear(&format!("{suffix}.v"), c, c),
            out: self.linear(&format!("{suffix}.out"), c, c),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvP {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LinP {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct NormP {
    pub g: usize,
    pub b: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct ResBlockP {
    pub norm1: NormP,
    pub conv1: ConvP,
    pub emb: LinP,
    pub norm2: NormP,
    pub conv2: ConvP,
    pub skip: Option<ConvP>,
}

#[derive(Debug, Clone)]
pub struct AttnP {
    pub norm: NormP,
    pub q: LinP,
    pub k: LinP,
    pub v: LinP,
    pub out: LinP,
}

pub const NORM_EPS: f64 = 1e-5;

fn groups_for(channels: usize, cap: usize) -> usize {
    let mut g = cap.min(channels).max(1);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

pub fn apply_conv(g: &mut Graph, store: &ParamStore, p: &ConvP, x: Var) -> Result<Var> {
    let w = g.param(store, p.w);
    let b = g.param(store, p.b);
    let y = g.conv2d(x, w, p.stride, p.pad)?;
    let c_out = g.shape(y)[1];
    let b3 = g.reshape(b, &[c_out, 1, 1])?;
    g.add(y, b3)
}

/// Linear layer over the trailing dimension of a rank-2 input.
pub fn apply_linear(g: &mut Graph, store: &ParamStore, p: &LinP, x: Var) -> Result<Var> {
    let w = g.param(store, p.w);
    let b = g.param(store, p.b);
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn apply_norm(g: &mut Graph, store: &ParamStore, p: NormP, cap: usize, x: Var) -> Result<Var> {
    let gamma = g.param(store, p.g);
    let beta = g.param(store, p.b);
    let groups = groups_for(p.channels, cap);
    g.group_norm(x, gamma, beta, groups, NORM_EPS)
}

/// Standard diffusion residual block with per-frame embedding injection.
pub fn apply_resblock(
    g: &mut Graph,
    store: &ParamStore,
    p: &ResBlockP,
    cap: usize,
    x: Var,
    emb: Var,
) -> Result<Var> {
    let mut h = apply_norm(g, store, p.norm1, cap, x)?;
    h = g.silu(h);
    h = apply_conv(g, store, &p.conv1, h)?;
    // emb: [T, d] -> silu -> linear -> [T, C, 1, 1]
    let e = g.silu(emb);
    let e = apply_linear(g, store, &p.emb, e)?;
    let (t, c) = (g.shape(e)[0], g.shape(e)[1]);
    let e4 = g.reshape(e, &[t, c, 1, 1])?;
    h = g.add(h, e4)?;
    h = apply_norm(g, store, p.norm2, cap, h)?;
    h = g.silu(h);
    h = apply_conv(g, store, &p.conv2, h)?;
    let skip = match &p.skip {
        Some(sc) => apply_conv(g, store, sc, x)?,
        None => x,
    };
    g.add(skip, h)
}

/// Spatio-temporal self-attention: tokens flattened over (T, h, w), one head.
pub fn apply_attention(g: &mut Graph, store: &ParamStore, p: &AttnP, cap: usize, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (t, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hn = apply_norm(g, store, p.norm, cap, x)?;
    let moved = g.permute(hn, &[0, 2, 3, 1])?;
    let tokens = g.reshape(moved, &[t * h * w, c])?;
    let q = apply_linear(g, store, &p.q, tokens)?;
    let k = apply_linear(g, store, &p.k, tokens)?;
    let v = apply_linear(g, store, &p.v, tokens)?;
    let a = g.attention(q, k, v)?;
    let o = apply_linear(g, store, &p.out, a)?;
    let back = g.reshape(o, &[t, h, w, c])?;
    let y = g.permute(back, &[0, 3, 1, 2])?;
    g.add(x, y)
}

/// Sinusoidal embedding of a scalar step index, shape `[1, dim]`.
pub fn timestep_embedding(step: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
        let arg = step as f64 * freq;
        data[i] = arg.sin();
        data[half + i] = arg.cos();
    }
    Tensor::from_vec(&[1, dim], data).expect("embedding shape")
}
