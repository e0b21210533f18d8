//! Raw f64 kernels behind the graph ops. All routines are deterministic:
//! parallel loops write disjoint output ranges and keep per-element
//! accumulation order fixed.

use rayon::prelude::*;

const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// c += a(m,k) * b(k,n)
pub fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let body = |i: usize, crow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
}

/// c += a(m,n) * b(k,n)^T  -> (m,k)
pub fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let body = |i: usize, crow: &mut [f64]| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            *cv += acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(k).enumerate() {
            body(i, crow);
        }
    }
}

/// c += a(m,k)^T * b(m,n)  -> (k,n)
pub fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let body = |p: usize, crow: &mut [f64]| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, crow)| body(p, crow));
    } else {
        for (p, crow) in c.chunks_mut(n).enumerate() {
            body(p, crow);
        }
    }
}

/// Numerically stable in-place softmax over each row of an (rows, cols) matrix.
pub fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    let body = |row: &mut [f64]| {
        let mut mx = f64::NEG_INFINITY;
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    };
    if rows * cols >= PAR_FLOP_THRESHOLD && rows > 1 {
        x.par_chunks_mut(cols).for_each(body);
    } else {
        x.chunks_mut(cols).for_each(body);
    }
}

pub struct ConvDims {
    pub frames: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unpack one frame into a (c_in*kh*kw, h_out*w_out) patch matrix.
pub fn im2col(frame: &[f64], d: &ConvDims, col: &mut [f64]) {
    debug_assert_eq!(frame.len(), d.c_in * d.h * d.w);
    debug_assert_eq!(col.len(), d.col_rows() * d.col_cols());
    let cols = d.col_cols();
    let mut r = 0;
    for c in 0..d.c_in {
        let plane = &frame[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let out_row = &mut col[r * cols..(r + 1) * cols];
                let mut idx = 0;
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        for _ in 0..d.w_out {
                            out_row[idx] = 0.0;
                            idx += 1;
                        }
                        continue;
                    }
                    let row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.w_out {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        out_row[idx] = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            row[ix as usize]
                        };
                        idx += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Scatter a patch-matrix gradient back onto one input frame (accumulating).
pub fn col2im(col: &[f64], d: &ConvDims, frame: &mut [f64]) {
    let cols = d.col_cols();
    let mut r = 0;
    for c in 0..d.c_in {
        let plane = &mut frame[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let in_row = &col[r * cols..(r + 1) * cols];
                let mut idx = 0;
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        idx += d.w_out;
                        continue;
                    }
                    let row = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.w_out {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            row[ix as usize] += in_row[idx];
                        }
                        idx += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Forward conv over all frames: out[frames, c_out, h_out, w_out].
pub fn conv2d_forward(input: &[f64], kernel: &[f64], d: &ConvDims, out: &mut [f64]) {
    let frame_in = d.c_in * d.h * d.w;
    let frame_out = d.c_out * d.h_out * d.w_out;
    let col_len = d.col_rows() * d.col_cols();
    out.par_chunks_mut(frame_out)
        .enumerate()
        .for_each(|(f, out_frame)| {
            let mut col = vec![0.0; col_len];
            im2col(&input[f * frame_in..(f + 1) * frame_in], d, &mut col);
            mm_nn(
                kernel,
                &col,
                out_frame,
                d.c_out,
                d.col_rows(),
                d.col_cols(),
            );
        });
}

/// Backward conv: fills grad_input (same layout as input) and grad_kernel.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
) {
    let frame_in = d.c_in * d.h * d.w;
    let frame_out = d.c_out * d.h_out * d.w_out;
    let col_len = d.col_rows() * d.col_cols();

    if let Some(gk) = grad_kernel {
        // Per-frame partials, reduced in frame order.
        let partials: Vec<Vec<f64>> = (0..d.frames)
            .into_par_iter()
            .map(|f| {
                let mut col = vec![0.0; col_len];
                im2col(&input[f * frame_in..(f + 1) * frame_in], d, &mut col);
                let mut part = vec![0.0; d.c_out * d.col_rows()];
                mm_nt(
                    &grad_out[f * frame_out..(f + 1) * frame_out],
                    &col,
                    &mut part,
                    d.c_out,
                    d.col_cols(),
                    d.col_rows(),
                );
                part
            })
            .collect();
        for part in partials {
            for (g, p) in gk.iter_mut().zip(part) {
                *g += p;
            }
        }
    }

    if let Some(gi) = grad_input {
        gi.par_chunks_mut(frame_in).enumerate().for_each(|(f, gframe)| {
            let mut gcol = vec![0.0; col_len];
            mm_tn(
                kernel,
                &grad_out[f * frame_out..(f + 1) * frame_out],
                &mut gcol,
                d.c_out,
                d.col_rows(),
                d.col_cols(),
            );
            col2im(&gcol, d, gframe);
        });
    }
}

/// Bilinear resize (align_corners = false) of (planes, h_in, w_in) data.
pub fn bilinear_forward(
    input: &[f64],
    planes: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), planes * h_out * w_out);
    let weights_y = bilinear_weights(h_in, h_out);
    let weights_x = bilinear_weights(w_in, w_out);
    out.par_chunks_mut(h_out * w_out)
        .enumerate()
        .for_each(|(p, plane_out)| {
            let plane = &input[p * h_in * w_in..(p + 1) * h_in * w_in];
            for y in 0..h_out {
                let (y0, y1, fy) = weights_y[y];
                for x in 0..w_out {
                    let (x0, x1, fx) = weights_x[x];
                    let v00 = plane[y0 * w_in + x0];
                    let v01 = plane[y0 * w_in + x1];
                    let v10 = plane[y1 * w_in + x0];
                    let v11 = plane[y1 * w_in + x1];
                    plane_out[y * w_out + x] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        });
}

pub fn bilinear_backward(
    grad_out: &[f64],
    planes: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    grad_in: &mut [f64],
) {
    debug_assert_eq!(grad_in.len(), planes * h_in * w_in);
    let weights_y = bilinear_weights(h_in, h_out);
    let weights_x = bilinear_weights(w_in, w_out);
    grad_in
        .par_chunks_mut(h_in * w_in)
        .enumerate()
        .for_each(|(p, gplane)| {
            let gout = &grad_out[p * h_out * w_out..(p + 1) * h_out * w_out];
            for y in 0..h_out {
                let (y0, y1, fy) = weights_y[y];
                for x in 0..w_out {
                    let (x0, x1, fx) = weights_x[x];
                    let g = gout[y * w_out + x];
                    gplane[y0 * w_in + x0] += g * (1.0 - fy) * (1.0 - fx);
                    gplane[y0 * w_in + x1] += g * (1.0 - fy) * fx;
                    gplane[y1 * w_in + x0] += g * fy * (1.0 - fx);
                    gplane[y1 * w_in + x1] += g * fy * fx;
                }
            }
        });
}

/// (low index, high index, fractional weight of high) per output coordinate.
fn bilinear_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        mm_nn(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a * b == (b^T row-major) via mm_nt
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        mm_nt(&a, &bt, &mut c2, m, k, n);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀᵀ * b via mm_tn on transposed a
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        mm_tn(&at, &b, &mut c3, k, m, n);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0];
        softmax_rows(&mut x, 2, 3);
        for row in x.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let d = ConvDims {
            frames: 1,
            c_in: 2,
            h: 5,
            w: 4,
            c_out: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            h_out: (5 + 2 - 3) / 2 + 1,
            w_out: (4 + 2 - 3) / 2 + 1,
        };
        let x: Vec<f64> = (0..d.c_in * d.h * d.w).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..d.col_rows() * d.col_cols())
            .map(|_| rng.gen::<f64>() - 0.5)
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &d, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &d, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
