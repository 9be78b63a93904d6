//! Finite-difference verification of tape gradients.
//!
//! Each check rebuilds the graph from scratch around perturbed copies of one
//! input coordinate and compares the central difference against the analytic
//! gradient from [`Tape::backward`]. Coordinates are drawn from a seeded
//! stream so the suite is reproducible.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::math;
use crate::rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative error allowed between analytic and numeric gradients.
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor of the comparison. Coordinates whose gradients sit
/// below this are held to the absolute bar FD_TOL * FD_FLOOR, which is what
/// central differences at FD_STEP can actually resolve.
pub const FD_FLOOR: f64 = 1e-6;

/// Result of checking one scalar-valued graph.
#[derive(Clone, Debug)]
pub struct CheckReport {
    /// Total coordinates compared across all inputs.
    pub coords_checked: usize,
    /// Largest relative error seen.
    pub max_rel_err: f64,
    /// Input index, flat coordinate, analytic value, numeric value of the
    /// worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// One named entry of the operation suite.
pub struct OpCheck {
    pub name: &'static str,
    pub report: CheckReport,
}

/// Compare analytic gradients of `build(tape, leaf_ids)` against central
/// differences. Every tensor in `inputs` is inserted as a parameter leaf, in
/// order. Up to `coords_per_input` coordinates are sampled per input (all of
/// them when the tensor is smaller).
pub fn check_scalar_fn<F>(inputs: &[Tensor], seed: u64, coords_per_input: usize, build: F) -> CheckReport
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let eval = |tensors: &[Tensor]| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.param(t)).collect();
        let root = build(&mut tape, &ids);
        let value = tape.scalar(root);
        let grads = tape.backward(root);
        let per_input = ids
            .iter()
            .map(|&id| grads.get(id).map(|g| g.to_vec()))
            .collect();
        (value, per_input)
    };

    let (_, analytic) = eval(inputs);
    let mut rng = rng::seeded(seed);
    let mut report = CheckReport { coords_checked: 0, max_rel_err: 0.0, worst: None };

    for (idx, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= coords_per_input {
            (0..n).collect()
        } else {
            rng::sample_distinct(&mut rng, 0, (n - 1) as u32, coords_per_input)
                .into_iter()
                .map(|c| c as usize)
                .collect()
        };
        for &coord in &coords {
            let base = input.data()[coord];
            let mut working: Vec<Tensor> = inputs.to_vec();
            working[idx].data_mut()[coord] = base + FD_STEP;
            let (f_plus, _) = eval(&working);
            working[idx].data_mut()[coord] = base - FD_STEP;
            let (f_minus, _) = eval(&working);
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let exact = analytic[idx].as_ref().map_or(0.0, |g| g[coord]);
            let err = math::rel_err_with_floor(exact, numeric, FD_FLOOR);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((idx, coord, exact, numeric));
            }
        }
    }
    report
}

fn away_from_zero(rng: &mut rng::SeedRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mag = rng::uniform(rng, shape, lo, hi);
    let signs = rng::uniform(rng, shape, -1.0, 1.0);
    let data: Vec<f64> = mag
        .data()
        .iter()
        .zip(signs.data())
        .map(|(&m, &s)| if s >= 0.0 { m } else { -m })
        .collect();
    Tensor::new(shape, data).expect("finite by construction")
}

/// Run the per-operation suite: every differentiable tape operation, each
/// embedded in a small scalar graph with randomized inputs.
pub fn run_op_suite(seed: u64, coords_per_input: usize) -> Vec<OpCheck> {
    let mut checks: Vec<OpCheck> = Vec::new();
    let mut push = |name: &'static str, report: CheckReport| checks.push(OpCheck { name, report });
    let mut r = rng::seeded(seed);

    {
        let x = rng::uniform(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
        let k = rng::uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
        let b = rng::uniform(&mut r, &[4], -0.2, 0.2);
        push(
            "conv2d_s1",
            check_scalar_fn(&[x, k, b], seed ^ 1, coords_per_input, |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 1, 1);
                t.mean(y)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
        let k = rng::uniform(&mut r, &[4, 3, 5, 5], -0.5, 0.5);
        let b = rng::uniform(&mut r, &[4], -0.2, 0.2);
        push(
            "conv2d_s2",
            check_scalar_fn(&[x, k, b], seed ^ 2, coords_per_input, |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 2, 2);
                t.mean(y)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[2, 4, 3, 3], -1.0, 1.0);
        let k = rng::uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
        let b = rng::uniform(&mut r, &[3], -0.2, 0.2);
        push(
            "tconv2d_s2",
            check_scalar_fn(&[x, k, b], seed ^ 3, coords_per_input, |t, ids| {
                let y = t.tconv2d(ids[0], ids[1], ids[2], 2, 1, 1);
                t.mean(y)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[2, 4, 4, 4], -1.0, 1.0);
        let k = rng::uniform(&mut r, &[4, 2, 1, 1], -0.5, 0.5);
        let b = rng::uniform(&mut r, &[2], -0.2, 0.2);
        push(
            "tconv2d_s1_k1",
            check_scalar_fn(&[x, k, b], seed ^ 4, coords_per_input, |t, ids| {
                let y = t.tconv2d(ids[0], ids[1], ids[2], 1, 0, 0);
                t.mean(y)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[3, 5], -1.0, 1.0);
        let w = rng::uniform(&mut r, &[4, 5], -0.5, 0.5);
        let b = rng::uniform(&mut r, &[4], -0.2, 0.2);
        push(
            "dense",
            check_scalar_fn(&[x, w, b], seed ^ 5, coords_per_input, |t, ids| {
                let y = t.dense(ids[0], ids[1], ids[2]);
                t.mean(y)
            }),
        );
    }
    {
        let x = away_from_zero(&mut r, &[3, 17], 0.2, 1.5);
        push(
            "relu",
            check_scalar_fn(&[x], seed ^ 6, coords_per_input, |t, ids| {
                let y = t.relu(ids[0]);
                t.sum(y)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[3, 17], -3.0, 3.0);
        push(
            "sigmoid",
            check_scalar_fn(&[x], seed ^ 7, coords_per_input, |t, ids| {
                let y = t.sigmoid(ids[0]);
                t.sum(y)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[3, 17], -2.0, 2.0);
        push(
            "tanh",
            check_scalar_fn(&[x], seed ^ 8, coords_per_input, |t, ids| {
                let y = t.tanh(ids[0]);
                t.sum(y)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[3, 17], -3.0, 3.0);
        push(
            "softplus",
            check_scalar_fn(&[x], seed ^ 9, coords_per_input, |t, ids| {
                let y = t.softplus(ids[0]);
                t.sum(y)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[3, 17], 0.3, 2.0);
        push(
            "ln",
            check_scalar_fn(&[x], seed ^ 10, coords_per_input, |t, ids| {
                let y = t.ln(ids[0]);
                t.sum(y)
            }),
        );
    }
    {
        let a = rng::uniform(&mut r, &[4, 9], -1.0, 1.0);
        let b = rng::uniform(&mut r, &[4, 9], -1.0, 1.0);
        push(
            "add",
            check_scalar_fn(&[a, b], seed ^ 11, coords_per_input, |t, ids| {
                let y = t.add(ids[0], ids[1]);
                let sq = t.mul(y, y);
                t.mean(sq)
            }),
        );
    }
    {
        let a = rng::uniform(&mut r, &[4, 9], -1.0, 1.0);
        let b = rng::uniform(&mut r, &[4, 9], -1.0, 1.0);
        push(
            "sub",
            check_scalar_fn(&[a, b], seed ^ 12, coords_per_input, |t, ids| {
                let y = t.sub(ids[0], ids[1]);
                let sq = t.mul(y, y);
                t.mean(sq)
            }),
        );
    }
    {
        let a = rng::uniform(&mut r, &[4, 9], -1.0, 1.0);
        let b = rng::uniform(&mut r, &[4, 9], -1.0, 1.0);
        push(
            "mul",
            check_scalar_fn(&[a, b], seed ^ 13, coords_per_input, |t, ids| {
                let y = t.mul(ids[0], ids[1]);
                t.sum(y)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[4, 9], -1.0, 1.0);
        push(
            "add_scalar",
            check_scalar_fn(&[x], seed ^ 14, coords_per_input, |t, ids| {
                let y = t.add_scalar(ids[0], 0.5);
                let sq = t.mul(y, y);
                t.sum(sq)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[4, 9], -1.0, 1.0);
        push(
            "mul_scalar",
            check_scalar_fn(&[x], seed ^ 15, coords_per_input, |t, ids| {
                let y = t.mul_scalar(ids[0], -1.75);
                let sq = t.mul(y, y);
                t.sum(sq)
            }),
        );
    }
    {
        let x = away_from_zero(&mut r, &[4, 9], 0.2, 1.5);
        push(
            "clamp_min",
            check_scalar_fn(&[x], seed ^ 16, coords_per_input, |t, ids| {
                let y = t.clamp_min(ids[0], 0.0);
                let sq = t.mul(y, y);
                t.sum(sq)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[2, 5], -1.0, 1.0);
        push(
            "broadcast_spatial",
            check_scalar_fn(&[x], seed ^ 17, coords_per_input, |t, ids| {
                let y = t.broadcast_spatial(ids[0], 3, 4);
                let sq = t.mul(y, y);
                t.mean(sq)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[3, 7], -1.0, 1.0);
        push(
            "sum",
            check_scalar_fn(&[x], seed ^ 18, coords_per_input, |t, ids| {
                let sq = t.mul(ids[0], ids[0]);
                t.sum(sq)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[3, 7], -1.0, 1.0);
        push(
            "mean",
            check_scalar_fn(&[x], seed ^ 19, coords_per_input, |t, ids| {
                let sq = t.mul(ids[0], ids[0]);
                t.mean(sq)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
        push(
            "reshape",
            check_scalar_fn(&[x], seed ^ 20, coords_per_input, |t, ids| {
                let y = t.reshape(ids[0], &[6, 4]);
                let sq = t.mul(y, y);
                t.sum(sq)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[2, 3, 2, 2, 1], -2.0, 2.0);
        let h = rng::uniform(&mut r, &[3, 3, 1], -1.5, 1.5);
        let b = rng::uniform(&mut r, &[3, 3], -0.5, 0.5);
        push(
            "density_affine",
            check_scalar_fn(&[x, h, b], seed ^ 21, coords_per_input, |t, ids| {
                let y = t.density_affine(ids[0], ids[1], ids[2]);
                let sq = t.mul(y, y);
                t.mean(sq)
            }),
        );
    }
    {
        let x = rng::uniform(&mut r, &[2, 3, 2, 2, 3], -2.0, 2.0);
        let a = rng::uniform(&mut r, &[3, 3], -1.0, 1.0);
        push(
            "density_gate",
            check_scalar_fn(&[x, a], seed ^ 22, coords_per_input, |t, ids| {
                let y = t.density_gate(ids[0], ids[1]);
                let sq = t.mul(y, y);
                t.mean(sq)
            }),
        );
    }

    checks
}

/// Render one suite entry as a stable single line.
pub fn format_check(check: &OpCheck, tol: f64) -> String {
    let status = if check.report.passes(tol) { "ok" } else { "FAIL" };
    format!(
        "{:<18} {:>4} coords  max rel err {:.3e}  {}",
        check.name, check.report.coords_checked, check.report.max_rel_err, status
    )
}
