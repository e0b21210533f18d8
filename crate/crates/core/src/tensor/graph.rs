//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] owns every intermediate tensor of one forward pass as an
//! append-only list of nodes, so node indices are already a topological
//! order. [`Graph::backward`] walks the tape once in reverse.

use super::kernels::{self, ConvDims};
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Neg,
    Silu,
    Exp,
    Log,
    Sqrt,
    Square,
}

enum OpRecord {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnKind,
        a: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        dims: ConvDims,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        softmax: Vec<f64>,
        scale: f64,
    },
    Bilinear {
        a: usize,
        planes: usize,
        h_in: usize,
        w_in: usize,
        h_out: usize,
        w_out: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Vec<f64>,
        istd: Vec<f64>,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Sum {
        a: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    param: Option<usize>,
    op: OpRecord,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A graph that records values only; backward is unavailable.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: OpRecord) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: rg,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf from a tensor; gradient tracking follows `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, rg, OpRecord::Leaf)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, OpRecord::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a parameter-store entry; gradients accumulate back into
    /// the store via [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let p = store.entry(index);
        let t = Tensor {
            shape: p.shape().to_vec(),
            data: p.values().to_vec(),
            requires_grad: true,
            grad: None,
        };
        let var = self.push(t, true, OpRecord::Leaf);
        self.nodes[var.0].param = Some(index);
        var
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clone out the value and, when present, its gradient.
    pub fn detach(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        t.grad = self.nodes[v.0].grad.clone();
        t
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnKind::Neg, a)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnKind::Silu, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnKind::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnKind::Log, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnKind::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnKind::Square, a)
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let s = self.constant_scalar(c);
        self.mul(a, s).expect("scalar broadcast always valid")
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb).ok_or(Error::Dimension {
            op: match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
                BinKind::Div => "div",
            },
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let f = match kind {
            BinKind::Add => |x: f64, y: f64| x + y,
            BinKind::Sub => |x: f64, y: f64| x - y,
            BinKind::Mul => |x: f64, y: f64| x * y,
            BinKind::Div => |x: f64, y: f64| x / y,
        };
        let data = broadcast_apply(
            self.nodes[a.0].value.data(),
            &sa,
            self.nodes[b.0].value.data(),
            &sb,
            &out_shape,
            f,
        );
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(
            Tensor::new(out_shape, data).expect("broadcast shape consistent"),
            rg,
            OpRecord::Binary { kind, a: a.0, b: b.0 },
        ))
    }

    fn unary(&mut self, kind: UnKind, a: Var) -> Var {
        let f = match kind {
            UnKind::Neg => |x: f64| -x,
            UnKind::Silu => |x: f64| x * sigmoid(x),
            UnKind::Exp => f64::exp,
            UnKind::Log => f64::ln,
            UnKind::Sqrt => f64::sqrt,
            UnKind::Square => |x: f64| x * x,
        };
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.nodes[a.0].requires_grad;
        self.push(t, rg, OpRecord::Unary { kind, a: a.0 })
    }

    // ---- structured ops ----

    /// Batched matrix product `[.., m, k] x [.., k, n]`. Leading dimensions
    /// must match exactly, or the right operand may be a plain rank-2 matrix
    /// shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let b_shared = sb.len() == 2 && sa.len() > 2;
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let batch_b: usize = sb[..sb.len() - 2].iter().product();
        let batches_ok = b_shared || sa[..sa.len() - 2] == sb[..sb.len() - 2];
        if ka != kb || !batches_ok {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let batch = batch_a.max(1);
        debug_assert!(b_shared || batch_b.max(1) == batch);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![0.0; batch * m * n];
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        for i in 0..batch {
            let bslice = if b_shared {
                bd
            } else {
                &bd[i * ka * n..(i + 1) * ka * n]
            };
            kernels::mm_nn(
                &ad[i * m * ka..(i + 1) * m * ka],
                bslice,
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                ka,
                n,
            );
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(
            Tensor::new(out_shape, out).expect("matmul shape"),
            rg,
            OpRecord::Matmul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k: ka,
                n,
                b_shared,
            },
        ))
    }

    /// 2-D convolution of `[frames, c_in, h, w]` with `[c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let (frames, c_in, h, w) = (si[0], si[1], si[2], si[3]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!(
                "conv2d kernel must be odd-sized, got {}x{}",
                kh, kw
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        let hn = h + 2 * pad;
        let wn = w + 2 * pad;
        if hn < kh || wn < kw || (hn - kh) % stride != 0 || (wn - kw) % stride != 0 {
            return Err(Error::config(format!(
                "conv2d output size is not integral for input {}x{}, kernel {}x{}, stride {}, pad {}",
                h, w, kh, kw, stride, pad
            )));
        }
        let h_out = (hn - kh) / stride + 1;
        let w_out = (wn - kw) / stride + 1;
        let dims = ConvDims {
            frames,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
        };
        let mut out = vec![0.0; frames * c_out * h_out * w_out];
        kernels::conv2d_forward(
            self.nodes[input.0].value.data(),
            self.nodes[kernel.0].value.data(),
            &dims,
            &mut out,
        );
        let rg = self.nodes[input.0].requires_grad || self.nodes[kernel.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![frames, c_out, h_out, w_out], out).expect("conv shape"),
            rg,
            OpRecord::Conv2d {
                input: input.0,
                kernel: kernel.0,
                dims,
            },
        ))
    }

    /// Scaled dot-product attention over `[L, d]` token matrices:
    /// `softmax(q kᵀ / sqrt(d)) v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let sv = self.shape(v).to_vec();
        if sq.len() != 2 || sq != sk || sq != sv {
            let rhs = if sq != sk { sk } else { sv };
            return Err(Error::Dimension {
                op: "attention",
                lhs: sq,
                rhs,
            });
        }
        let (l, d) = (sq[0], sq[1]);
        if d == 0 {
            return Err(Error::config("attention head dimension must be nonzero"));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut scores = vec![0.0; l * l];
        kernels::mm_nt(
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            &mut scores,
            l,
            d,
            l,
        );
        for s in scores.iter_mut() {
            *s *= scale;
        }
        kernels::softmax_rows(&mut scores, l, l);
        let mut out = vec![0.0; l * d];
        kernels::mm_nn(&scores, self.nodes[v.0].value.data(), &mut out, l, l, d);
        let rg = self.nodes[q.0].requires_grad
            || self.nodes[k.0].requires_grad
            || self.nodes[v.0].requires_grad;
        let saved = if rg { scores } else { Vec::new() };
        Ok(self.push(
            Tensor::new(vec![l, d], out).expect("attention shape"),
            rg,
            OpRecord::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                softmax: saved,
                scale,
            },
        ))
    }

    /// Bilinear resize (align_corners = false) of the trailing two dims.
    pub fn bilinear_resize(&mut self, a: Var, h_out: usize, w_out: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::Dimension {
                op: "bilinear_resize",
                lhs: sa,
                rhs: vec![h_out, w_out],
            });
        }
        if h_out == 0 || w_out == 0 {
            return Err(Error::config("bilinear_resize target must be >= 1"));
        }
        let (h_in, w_in) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let planes: usize = sa[..sa.len() - 2].iter().product::<usize>().max(1);
        let mut out = vec![0.0; planes * h_out * w_out];
        kernels::bilinear_forward(
            self.nodes[a.0].value.data(),
            planes,
            h_in,
            w_in,
            h_out,
            w_out,
            &mut out,
        );
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(h_out);
        out_shape.push(w_out);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Tensor::new(out_shape, out).expect("bilinear shape"),
            rg,
            OpRecord::Bilinear {
                a: a.0,
                planes,
                h_in,
                w_in,
                h_out,
                w_out,
            },
        ))
    }

    /// Group normalization over `[frames, c, h, w]`, statistics per frame and
    /// group, with per-channel affine parameters.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Dimension {
                op: "group_norm",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (frames, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {} channels not divisible by {} groups",
                c, groups
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension {
                op: "group_norm",
                lhs: self.shape(gamma).to_vec(),
                rhs: vec![c],
            });
        }
        let cpg = c / groups;
        let gsize = cpg * h * w;
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut out = vec![0.0; xd.len()];
        let mut means = vec![0.0; frames * groups];
        let mut istds = vec![0.0; frames * groups];
        for f in 0..frames {
            for g in 0..groups {
                let base = f * c * h * w + g * cpg * h * w;
                let chunk = &xd[base..base + gsize];
                let mean = chunk.iter().sum::<f64>() / gsize as f64;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
                    / gsize as f64;
                let istd = 1.0 / (var + eps).sqrt();
                means[f * groups + g] = mean;
                istds[f * groups + g] = istd;
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    let (ga, be) = (gd[ch], bd[ch]);
                    let o = base + ci * h * w;
                    for i in 0..h * w {
                        out[o + i] = (xd[o + i] - mean) * istd * ga + be;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        Ok(self.push(
            Tensor::new(sx, out).expect("group_norm shape"),
            rg,
            OpRecord::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                mean: means,
                istd: istds,
            },
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract(format!(
                "invalid permutation {:?} for rank {}",
                perm,
                sa.len()
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let in_strides = row_major_strides(&sa);
        let numel = self.nodes[a.0].value.numel();
        let mut out = vec![0.0; numel];
        let src = self.nodes[a.0].value.data();
        // Odometer over the output index space.
        let mut idx = vec![0usize; out_shape.len()];
        for slot in out.iter_mut() {
            let mut flat = 0;
            for (i, &d) in idx.iter().enumerate() {
                flat += d * in_strides[perm[i]];
            }
            *slot = src[flat];
            increment(&mut idx, &out_shape);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(
            Tensor::new(out_shape, out).expect("permute shape"),
            rg,
            OpRecord::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::new(shape.to_vec(), self.nodes[a.0].value.data().to_vec())
            .expect("reshape numel checked");
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(t, rg, OpRecord::Reshape { a: a.0 }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::contract(format!(
                "concat axis {} out of range for rank {}",
                axis,
                first.len()
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len()
                || sp
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: sp.to_vec(),
                });
            }
            axis_total += sp[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product::<usize>().max(1);
        let inner: usize = first[axis + 1..].iter().product::<usize>().max(1);
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let len_axis = self.shape(p)[axis];
            let src = self.nodes[p.0].value.data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * len_axis * inner;
                out[dst_base..dst_base + len_axis * inner]
                    .copy_from_slice(&src[src_base..src_base + len_axis * inner]);
            }
            offset += len_axis;
        }
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(
            Tensor::new(out_shape, out).expect("concat shape"),
            rg,
            OpRecord::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), rg, OpRecord::Sum { a: a.0 })
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Populates gradients of every
    /// gradient-tracking node reachable from `loss`; the graph is consumed
    /// (a second call is a contract error).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::contract("backward on an inference graph"));
        }
        if self.consumed {
            return Err(Error::contract("graph already consumed by backward"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn add_grad(&mut self, id: usize, delta: &[f64]) {
        let n = self.nodes[id].value.numel();
        debug_assert_eq!(delta.len(), n);
        let g = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn propagate(&mut self, id: usize) {
        let grad = self.nodes[id].grad.clone().expect("caller checked");
        // Taking the record out avoids aliasing node borrows during dispatch.
        let op = std::mem::replace(&mut self.nodes[id].op, OpRecord::Leaf);
        match &op {
            OpRecord::Leaf => {}
            OpRecord::Binary { kind, a, b } => self.backward_binary(*kind, *a, *b, id, &grad),
            OpRecord::Unary { kind, a } => {
                if self.needs(*a) {
                    let xd = self.nodes[*a].value.data();
                    let yd = self.nodes[id].value.data();
                    let delta: Vec<f64> = match kind {
                        UnKind::Neg => grad.iter().map(|g| -g).collect(),
                        UnKind::Silu => xd
                            .iter()
                            .zip(&grad)
                            .map(|(&x, g)| {
                                let s = sigmoid(x);
                                g * (s + x * s * (1.0 - s))
                            })
                            .collect(),
                        UnKind::Exp => yd.iter().zip(&grad).map(|(&y, g)| g * y).collect(),
                        UnKind::Log => xd.iter().zip(&grad).map(|(&x, g)| g / x).collect(),
                        UnKind::Sqrt => yd.iter().zip(&grad).map(|(&y, g)| g * 0.5 / y).collect(),
                        UnKind::Square => {
                            xd.iter().zip(&grad).map(|(&x, g)| g * 2.0 * x).collect()
                        }
                    };
                    self.add_grad(*a, &delta);
                }
            }
            OpRecord::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.needs(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    let bd = self.nodes[*b].value.data();
                    for i in 0..batch {
                        let bs = if *b_shared {
                            bd
                        } else {
                            &bd[i * k * n..(i + 1) * k * n]
                        };
                        kernels::mm_nt(
                            &grad[i * m * n..(i + 1) * m * n],
                            bs,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.add_grad(*a, &ga);
                }
                if self.needs(*b) {
                    let blen = if *b_shared { k * n } else { batch * k * n };
                    let mut gb = vec![0.0; blen];
                    let ad = self.nodes[*a].value.data();
                    for i in 0..batch {
                        let gslice = if *b_shared {
                            &mut gb[..]
                        } else {
                            &mut gb[i * k * n..(i + 1) * k * n]
                        };
                        kernels::mm_tn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &grad[i * m * n..(i + 1) * m * n],
                            gslice,
                            m,
                            k,
                            n,
                        );
                    }
                    self.add_grad(*b, &gb);
                }
            }
            OpRecord::Conv2d { input, kernel, dims } => {
                let need_i = self.needs(*input);
                let need_k = self.needs(*kernel);
                let mut gi = if need_i {
                    Some(vec![0.0; self.nodes[*input].value.numel()])
                } else {
                    None
                };
                let mut gk = if need_k {
                    Some(vec![0.0; self.nodes[*kernel].value.numel()])
                } else {
                    None
                };
                kernels::conv2d_backward(
                    self.nodes[*input].value.data(),
                    self.nodes[*kernel].value.data(),
                    &grad,
                    dims,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    self.add_grad(*input, &gi);
                }
                if let Some(gk) = gk {
                    self.add_grad(*kernel, &gk);
                }
            }
            OpRecord::Attention {
                q,
                k,
                v,
                softmax,
                scale,
            } => {
                let l = self.shape(Var(*q))[0];
                let d = self.shape(Var(*q))[1];
                // dV = Sᵀ g
                if self.needs(*v) {
                    let mut gv = vec![0.0; l * d];
                    kernels::mm_tn(softmax, &grad, &mut gv, l, l, d);
                    self.add_grad(*v, &gv);
                }
                if self.needs(*q) || self.needs(*k) {
                    // dS = g vᵀ ; dZ = S ∘ (dS - rowsum(dS ∘ S))
                    let vd = self.nodes[*v].value.data();
                    let mut ds = vec![0.0; l * l];
                    kernels::mm_nt(&grad, vd, &mut ds, l, d, l);
                    for row in 0..l {
                        let s_row = &softmax[row * l..(row + 1) * l];
                        let ds_row = &mut ds[row * l..(row + 1) * l];
                        let dot: f64 = s_row.iter().zip(ds_row.iter()).map(|(a, b)| a * b).sum();
                        for (dz, &s) in ds_row.iter_mut().zip(s_row) {
                            *dz = s * (*dz - dot) * scale;
                        }
                    }
                    if self.needs(*q) {
                        let kd = self.nodes[*k].value.data();
                        let mut gq = vec![0.0; l * d];
                        kernels::mm_nn(&ds, kd, &mut gq, l, l, d);
                        self.add_grad(*q, &gq);
                    }
                    if self.needs(*k) {
                        let qd = self.nodes[*q].value.data();
                        let mut gk = vec![0.0; l * d];
                        kernels::mm_tn(&ds, qd, &mut gk, l, l, d);
                        self.add_grad(*k, &gk);
                    }
                }
            }
            OpRecord::Bilinear {
                a,
                planes,
                h_in,
                w_in,
                h_out,
                w_out,
            } => {
                if self.needs(*a) {
                    let mut gi = vec![0.0; self.nodes[*a].value.numel()];
                    kernels::bilinear_backward(&grad, *planes, *h_in, *w_in, *h_out, *w_out, &mut gi);
                    self.add_grad(*a, &gi);
                }
            }
            OpRecord::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                istd,
            } => {
                let sx = self.shape(Var(*x)).to_vec();
                let (frames, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let cpg = c / groups;
                let gsize = cpg * h * w;
                let xd = self.nodes[*x].value.data();
                let gd = self.nodes[*gamma].value.data();
                let need_x = self.needs(*x);
                let need_g = self.needs(*gamma);
                let need_b = self.needs(*beta);
                let mut gx = vec![0.0; xd.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for f in 0..frames {
                    for g in 0..*groups {
                        let base = f * c * h * w + g * cpg * h * w;
                        let mu = mean[f * groups + g];
                        let is = istd[f * groups + g];
                        // h = grad ∘ gamma; backprop through normalization.
                        let mut sum_h = 0.0;
                        let mut sum_hx = 0.0;
                        for ci in 0..cpg {
                            let ch = g * cpg + ci;
                            let o = base + ci * h * w;
                            for i in 0..h * w {
                                let xhat = (xd[o + i] - mu) * is;
                                let gr = grad[o + i];
                                if need_g {
                                    gg[ch] += gr * xhat;
                                }
                                if need_b {
                                    gb[ch] += gr;
                                }
                                let hv = gr * gd[ch];
                                sum_h += hv;
                                sum_hx += hv * xhat;
                            }
                        }
                        if need_x {
                            let inv_m = 1.0 / gsize as f64;
                            for ci in 0..cpg {
                                let ch = g * cpg + ci;
                                let o = base + ci * h * w;
                                for i in 0..h * w {
                                    let xhat = (xd[o + i] - mu) * is;
                                    let hv = grad[o + i] * gd[ch];
                                    gx[o + i] =
                                        is * (hv - inv_m * sum_h - xhat * inv_m * sum_hx);
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.add_grad(*x, &gx);
                }
                if need_g {
                    self.add_grad(*gamma, &gg);
                }
                if need_b {
                    self.add_grad(*beta, &gb);
                }
            }
            OpRecord::Permute { a, perm } => {
                if self.needs(*a) {
                    let sa = self.shape(Var(*a)).to_vec();
                    let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
                    let in_strides = row_major_strides(&sa);
                    let mut gi = vec![0.0; self.nodes[*a].value.numel()];
                    let mut idx = vec![0usize; out_shape.len()];
                    for &g in grad.iter() {
                        let mut flat = 0;
                        for (i, &d) in idx.iter().enumerate() {
                            flat += d * in_strides[perm[i]];
                        }
                        gi[flat] += g;
                        increment(&mut idx, &out_shape);
                    }
                    self.add_grad(*a, &gi);
                }
            }
            OpRecord::Reshape { a } => {
                if self.needs(*a) {
                    self.add_grad(*a, &grad);
                }
            }
            OpRecord::Concat { parts, axis } => {
                let out_shape = self.shape(Var(id)).to_vec();
                let outer: usize = out_shape[..*axis].iter().product::<usize>().max(1);
                let inner: usize = out_shape[*axis + 1..].iter().product::<usize>().max(1);
                let axis_total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len_axis = self.shape(Var(p))[*axis];
                    if self.needs(p) {
                        let mut gp = vec![0.0; self.nodes[p].value.numel()];
                        for o in 0..outer {
                            let src_base = (o * axis_total + offset) * inner;
                            let dst_base = o * len_axis * inner;
                            gp[dst_base..dst_base + len_axis * inner]
                                .copy_from_slice(&grad[src_base..src_base + len_axis * inner]);
                        }
                        self.add_grad(p, &gp);
                    }
                    offset += len_axis;
                }
            }
            OpRecord::Sum { a } => {
                if self.needs(*a) {
                    let delta = vec![grad[0]; self.nodes[*a].value.numel()];
                    self.add_grad(*a, &delta);
                }
            }
        }
    }

    fn backward_binary(&mut self, kind: BinKind, a: usize, b: usize, out: usize, grad: &[f64]) {
        let sa = self.shape(Var(a)).to_vec();
        let sb = self.shape(Var(b)).to_vec();
        let so = self.shape(Var(out)).to_vec();
        match kind {
            BinKind::Add => {
                if self.needs(a) {
                    let d = reduce_to_shape(grad, &so, &sa);
                    self.add_grad(a, &d);
                }
                if self.needs(b) {
                    let d = reduce_to_shape(grad, &so, &sb);
                    self.add_grad(b, &d);
                }
            }
            BinKind::Sub => {
                if self.needs(a) {
                    let d = reduce_to_shape(grad, &so, &sa);
                    self.add_grad(a, &d);
                }
                if self.needs(b) {
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    let d = reduce_to_shape(&neg, &so, &sb);
                    self.add_grad(b, &d);
                }
            }
            BinKind::Mul => {
                if self.needs(a) {
                    let bd = self.nodes[b].value.data();
                    let prod = broadcast_apply(grad, &so, bd, &sb, &so, |g, y| g * y);
                    let d = reduce_to_shape(&prod, &so, &sa);
                    self.add_grad(a, &d);
                }
                if self.needs(b) {
                    let ad = self.nodes[a].value.data();
                    let prod = broadcast_apply(grad, &so, ad, &sa, &so, |g, x| g * x);
                    let d = reduce_to_shape(&prod, &so, &sb);
                    self.add_grad(b, &d);
                }
            }
            BinKind::Div => {
                let bd_shape = sb.clone();
                if self.needs(a) {
                    let bd = self.nodes[b].value.data();
                    let prod = broadcast_apply(grad, &so, bd, &bd_shape, &so, |g, y| g / y);
                    let d = reduce_to_shape(&prod, &so, &sa);
                    self.add_grad(a, &d);
                }
                if self.needs(b) {
                    let ad = self.nodes[a].value.data();
                    let bd = self.nodes[b].value.data();
                    // -g * a / b^2, evaluated against the broadcast output.
                    let ga = broadcast_apply(grad, &so, ad, &sa, &so, |g, x| g * x);
                    let full = broadcast_apply(&ga, &so, bd, &bd_shape, &so, |gx, y| -gx / (y * y));
                    let d = reduce_to_shape(&full, &so, &sb);
                    self.add_grad(b, &d);
                }
            }
        }
    }

    /// Fold gradients of parameter leaves back into the store (`+=`).
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(idx), Some(grad)) = (node.param, node.grad.as_ref()) {
                store.entry_mut(idx).accumulate_grad(grad);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return;
        }
        idx[i] = 0;
    }
}

/// Trailing-dimension broadcast of two shapes, if compatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Apply `f` over two broadcast operands into the given output shape.
fn broadcast_apply(
    a: &[f64],
    sa: &[usize],
    b: &[f64],
    sb: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    if sa == out_shape && sb == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if sb.iter().product::<usize>() == 1 {
        let y = b[0];
        if sa == out_shape {
            return a.iter().map(|&x| f(x, y)).collect();
        }
    }
    if sa.iter().product::<usize>() == 1 {
        let x = a[0];
        if sb == out_shape {
            return b.iter().map(|&y| f(x, y)).collect();
        }
    }
    let rank = out_shape.len();
    let stride_for = |s: &[usize]| -> Vec<usize> {
        let native = row_major_strides(s);
        let mut st = vec![0usize; rank];
        let off = rank - s.len();
        for i in 0..s.len() {
            st[off + i] = if s[i] == 1 { 0 } else { native[i] };
        }
        st
    };
    let st_a = stride_for(sa);
    let st_b = stride_for(sb);
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut fa = 0;
        let mut fb = 0;
        for i in 0..rank {
            fa += idx[i] * st_a[i];
            fb += idx[i] * st_b[i];
        }
        *slot = f(a[fa], b[fb]);
        increment(&mut idx, out_shape);
    }
    out
}

/// Sum a gradient over broadcast dimensions down to the operand shape.
fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if grad_shape == target {
        return grad.to_vec();
    }
    let rank = grad_shape.len();
    let off = rank - target.len();
    let t_strides = row_major_strides(target);
    let mut out = vec![0.0; target.iter().product::<usize>().max(1)];
    let mut idx = vec![0usize; rank];
    for &g in grad {
        let mut flat = 0;
        for i in off..rank {
            if target[i - off] != 1 {
                flat += idx[i] * t_strides[i - off];
            }
        }
        out[flat] += g;
        increment(&mut idx, grad_shape);
    }
    out
}
