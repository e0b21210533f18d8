//! Central finite-difference verification of every registered backward rule.
//!
//! Each check builds a scalar loss `sum(w ∘ op(inputs))` with fixed random
//! weights, backpropagates it, and compares the analytic input gradients
//! against central differences with step 1e-4 in f64.

use super::graph::{Graph, Var};
use super::{randn, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const FD_STEP: f64 = 1e-4;
pub const OP_TOL: f64 = 1e-4;

type BuildFn = dyn Fn(&mut Graph, &[Var]) -> Var + Send + Sync;

pub struct GradCheck {
    pub name: String,
    pub tol: f64,
    inputs: Vec<Tensor>,
    weights: Vec<f64>,
    build: Box<BuildFn>,
    /// Test fixture: constant offset injected into the analytic gradient to
    /// emulate a broken backward rule. Zero in every real check.
    corrupt_analytic: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl GradCheck {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        rng: &mut ChaCha20Rng,
        build: impl Fn(&mut Graph, &[Var]) -> Var + Send + Sync + 'static,
    ) -> Self {
        // Output size is probed once so the weighting is independent of grads.
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        let n_out = g.value(out).numel();
        let weights = (0..n_out).map(|_| rng.gen_range(0.5..1.5)).collect();
        GradCheck {
            name: name.into(),
            tol: OP_TOL,
            inputs,
            weights,
            build: Box::new(build),
            corrupt_analytic: 0.0,
        }
    }

    /// A check that is guaranteed to fail, for exercising the failure path.
    pub fn corrupted_fixture(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut c = GradCheck::new(
            "corrupted_silu_fixture",
            vec![randn(&[5], &mut rng)],
            &mut rng,
            |g, v| g.silu(v[0]),
        );
        c.corrupt_analytic = 0.25;
        c
    }

    fn loss(&self, inputs: &[Tensor]) -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (self.build)(&mut g, &vars);
        g.value(out)
            .data()
            .iter()
            .zip(&self.weights)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn run(&self) -> GradCheckReport {
        // Analytic gradients.
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .map(|t| g.leaf(t.clone().with_grad()))
            .collect();
        let out = (self.build)(&mut g, &vars);
        let w = g.constant(
            Tensor::new(g.value(out).shape().to_vec(), self.weights.clone()).expect("weight shape"),
        );
        let prod = g.mul(out, w).expect("same shape");
        let loss = g.sum(prod);
        g.backward(loss).expect("scalar loss");

        let mut max_rel: f64 = 0.0;
        let mut probe = self.inputs.to_vec();
        for (ti, t) in self.inputs.iter().enumerate() {
            let analytic = g
                .grad(vars[ti])
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            for i in 0..t.numel() {
                let orig = probe[ti].data()[i];
                probe[ti].data_mut()[i] = orig + FD_STEP;
                let up = self.loss(&probe);
                probe[ti].data_mut()[i] = orig - FD_STEP;
                let down = self.loss(&probe);
                probe[ti].data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * FD_STEP);
                let a = analytic[i] + self.corrupt_analytic;
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
        GradCheckReport {
            name: self.name.clone(),
            max_rel_err: max_rel,
            tol: self.tol,
        }
    }
}

pub fn run_checks(checks: &[GradCheck]) -> Vec<GradCheckReport> {
    checks.iter().map(|c| c.run()).collect()
}

/// The full registry covering every differentiable operation.
pub fn builtin_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let r = &mut rng;
    let pos = |shape: &[usize], r: &mut ChaCha20Rng| {
        let mut t = randn(shape, r);
        for v in t.data_mut() {
            *v = v.abs() + 0.5;
        }
        t
    };

    checks.push(GradCheck::new(
        "add_broadcast",
        vec![randn(&[2, 3, 4], r), randn(&[3, 1], r)],
        r,
        |g, v| g.add(v[0], v[1]).unwrap(),
    ));
    checks.push(GradCheck::new(
        "sub",
        vec![randn(&[4, 5], r), randn(&[4, 5], r)],
        r,
        |g, v| g.sub(v[0], v[1]).unwrap(),
    ));
    checks.push(GradCheck::new(
        "mul_broadcast",
        vec![randn(&[2, 1, 4], r), randn(&[3, 4], r)],
        r,
        |g, v| g.mul(v[0], v[1]).unwrap(),
    ));
    checks.push(GradCheck::new(
        "div",
        vec![randn(&[3, 4], r), pos(&[3, 4], r)],
        r,
        |g, v| g.div(v[0], v[1]).unwrap(),
    ));
    checks.push(GradCheck::new("neg", vec![randn(&[7], r)], r, |g, v| {
        g.neg(v[0])
    }));
    checks.push(GradCheck::new("silu", vec![randn(&[9], r)], r, |g, v| {
        g.silu(v[0])
    }));
    checks.push(GradCheck::new("exp", vec![randn(&[6], r)], r, |g, v| {
        g.exp(v[0])
    }));
    checks.push(GradCheck::new("log", vec![pos(&[6], r)], r, |g, v| {
        g.log(v[0])
    }));
    checks.push(GradCheck::new("sqrt", vec![pos(&[6], r)], r, |g, v| {
        g.sqrt(v[0])
    }));
    checks.push(GradCheck::new("square", vec![randn(&[6], r)], r, |g, v| {
        g.square(v[0])
    }));
    checks.push(GradCheck::new(
        "matmul",
        vec![randn(&[3, 4], r), randn(&[4, 2], r)],
        r,
        |g, v| g.matmul(v[0], v[1]).unwrap(),
    ));
    checks.push(GradCheck::new(
        "matmul_batched_shared",
        vec![randn(&[2, 3, 4], r), randn(&[4, 2], r)],
        r,
        |g, v| g.matmul(v[0], v[1]).unwrap(),
    ));
    checks.push(GradCheck::new(
        "matmul_batched",
        vec![randn(&[2, 2, 3], r), randn(&[2, 3, 2], r)],
        r,
        |g, v| g.matmul(v[0], v[1]).unwrap(),
    ));
    checks.push(GradCheck::new(
        "conv2d_s1p1",
        vec![randn(&[2, 3, 5, 4], r), randn(&[2, 3, 3, 3], r)],
        r,
        |g, v| g.conv2d(v[0], v[1], 1, 1).unwrap(),
    ));
    checks.push(GradCheck::new(
        "conv2d_s2p1",
        vec![randn(&[1, 2, 5, 5], r), randn(&[3, 2, 3, 3], r)],
        r,
        |g, v| g.conv2d(v[0], v[1], 2, 1).unwrap(),
    ));
    checks.push(GradCheck::new(
        "conv2d_1x1",
        vec![randn(&[2, 4, 3, 3], r), randn(&[2, 4, 1, 1], r)],
        r,
        |g, v| g.conv2d(v[0], v[1], 1, 0).unwrap(),
    ));
    checks.push(GradCheck::new(
        "attention_l3d4",
        vec![randn(&[3, 4], r), randn(&[3, 4], r), randn(&[3, 4], r)],
        r,
        |g, v| g.attention(v[0], v[1], v[2]).unwrap(),
    ));
    checks.push(GradCheck::new(
        "attention_l6d2",
        vec![randn(&[6, 2], r), randn(&[6, 2], r), randn(&[6, 2], r)],
        r,
        |g, v| g.attention(v[0], v[1], v[2]).unwrap(),
    ));
    checks.push(GradCheck::new(
        "bilinear_up",
        vec![randn(&[1, 2, 3, 3], r)],
        r,
        |g, v| g.bilinear_resize(v[0], 5, 7).unwrap(),
    ));
    checks.push(GradCheck::new(
        "bilinear_down",
        vec![randn(&[1, 2, 6, 6], r)],
        r,
        |g, v| g.bilinear_resize(v[0], 3, 2).unwrap(),
    ));
    checks.push(GradCheck::new(
        "group_norm",
        vec![randn(&[2, 4, 3, 3], r), randn(&[4], r), randn(&[4], r)],
        r,
        |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5).unwrap(),
    ));
    checks.push(GradCheck::new(
        "permute",
        vec![randn(&[2, 3, 4], r)],
        r,
        |g, v| g.permute(v[0], &[2, 0, 1]).unwrap(),
    ));
    checks.push(GradCheck::new(
        "reshape",
        vec![randn(&[2, 6], r)],
        r,
        |g, v| g.reshape(v[0], &[3, 4]).unwrap(),
    ));
    checks.push(GradCheck::new(
        "concat_axis1",
        vec![randn(&[2, 2, 3], r), randn(&[2, 4, 3], r)],
        r,
        |g, v| g.concat(&[v[0], v[1]], 1).unwrap(),
    ));
    checks.push(GradCheck::new("sum", vec![randn(&[3, 3], r)], r, |g, v| {
        g.sum(v[0])
    }));
    checks.push(GradCheck::new(
        "mse_composite",
        vec![randn(&[2, 5], r), randn(&[2, 5], r)],
        r,
        |g, v| g.mse(v[0], v[1]).unwrap(),
    ));
    checks
}
