//! Lambda-domain rate-distortion modeling.
//!
//! The R-lambda law lambda = alpha(exp(beta R) - 1) and its companion
//! D-lambda law D = ln(1 + alpha/lambda)/(alpha beta) are mutually
//! consistent through lambda = -dR/dD. This module evaluates the pair, fits
//! the coefficients to measured sweep points by damped Gauss-Newton with
//! multi-starts, drives bitrate control from the fitted model, and computes
//! BD-rate between R-D curves.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::math;

/// Coefficients reported for the MSE-domain fit.
pub const PRESET_MSE: (f64, f64) = (39.301, 1.296);
/// Coefficients reported for the MS-SSIM-domain fit (D = 1 - MS-SSIM).
pub const PRESET_MSSSIM: (f64, f64) = (89.072, 1.225);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mse,
    MsSsim,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::MsSsim => "msssim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mse" => Some(Metric::Mse),
            "msssim" => Some(Metric::MsSsim),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RdError {
    /// Coefficients must satisfy alpha > 0, beta > 0.
    BadCoefficients,
    /// Negative rate or lambda fed to an evaluator.
    NegativeInput,
    /// D-lambda evaluation needs lambda > 0.
    NonPositiveLambda,
    TooFewSamples { got: usize, need: usize },
    DuplicateLambda,
    MixedMetrics,
    /// Every start diverged; carries the best cost seen.
    FitDiverged { best_cost: f64 },
    TargetOutOfRange { target: f64, min: f64, max: f64 },
    /// Achieved bpp is not monotone in lambda where the search needs it.
    NonMonotoneBracket { detail: String },
    NoOverlap,
}

impl core::fmt::Display for RdError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RdError::BadCoefficients => write!(f, "model coefficients must be positive"),
            RdError::NegativeInput => write!(f, "rate and lambda arguments must be nonnegative"),
            RdError::NonPositiveLambda => write!(f, "lambda must be positive"),
            RdError::TooFewSamples { got, need } => {
                write!(f, "need at least {need} samples, got {got}")
            }
            RdError::DuplicateLambda => write!(f, "sample lambdas must be distinct"),
            RdError::MixedMetrics => write!(f, "samples mix distortion metrics"),
            RdError::FitDiverged { best_cost } => {
                write!(f, "no fit start converged (best cost {best_cost:.3e})")
            }
            RdError::TargetOutOfRange { target, min, max } => {
                write!(f, "target {target:.4} bpp outside achievable [{min:.4}, {max:.4}]")
            }
            RdError::NonMonotoneBracket { detail } => {
                write!(f, "bpp not monotone in lambda: {detail}")
            }
            RdError::NoOverlap => write!(f, "curves share no quality range"),
        }
    }
}

impl core::error::Error for RdError {}

/// One measured operating point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdSample {
    pub lambda: f64,
    pub bpp: f64,
    pub distortion: f64,
    pub metric: Metric,
}

/// Fitted coefficients plus diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdModelParams {
    pub alpha: f64,
    pub beta: f64,
    pub metric: Metric,
    /// Root-mean-square residual in the fitted space.
    pub residual: f64,
    pub r2: f64,
}

fn check_coeffs(alpha: f64, beta: f64) -> Result<(), RdError> {
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(RdError::BadCoefficients);
    }
    Ok(())
}

/// lambda = alpha (exp(beta R) - 1).
pub fn eval_lambda_of_r(r: f64, alpha: f64, beta: f64) -> Result<f64, RdError> {
    check_coeffs(alpha, beta)?;
    if !(r >= 0.0) {
        return Err(RdError::NegativeInput);
    }
    Ok(alpha * libm::expm1(beta * r))
}

/// R = ln(1 + lambda/alpha) / beta, the exact inverse of
/// [`eval_lambda_of_r`].
pub fn eval_r_of_lambda(lambda: f64, alpha: f64, beta: f64) -> Result<f64, RdError> {
    check_coeffs(alpha, beta)?;
    if !(lambda >= 0.0) {
        return Err(RdError::NegativeInput);
    }
    Ok(libm::log1p(lambda / alpha) / beta)
}

/// D = ln(1 + alpha/lambda) / (alpha beta).
pub fn eval_d_of_lambda(lambda: f64, alpha: f64, beta: f64) -> Result<f64, RdError> {
    check_coeffs(alpha, beta)?;
    if !(lambda > 0.0) {
        return Err(RdError::NonPositiveLambda);
    }
    Ok(libm::log1p(alpha / lambda) / (alpha * beta))
}

/// Verify lambda = -dR/dD numerically through the parametric pair
/// (R(lambda), D(lambda)). Central differences with step `rel_step *
/// lambda`; returns the largest relative deviation over the grid.
pub fn consistency_check(alpha: f64, beta: f64, lambdas: &[f64], rel_step: f64) -> f64 {
    assert!(rel_step > 0.0 && rel_step < 0.5, "rel_step out of range");
    let mut worst: f64 = 0.0;
    for &l in lambdas {
        assert!(l > 0.0, "grid lambdas must be positive");
        let h = l * rel_step;
        let r_hi = eval_r_of_lambda(l + h, alpha, beta).expect("valid grid");
        let r_lo = eval_r_of_lambda(l - h, alpha, beta).expect("valid grid");
        let d_hi = eval_d_of_lambda(l + h, alpha, beta).expect("valid grid");
        let d_lo = eval_d_of_lambda(l - h, alpha, beta).expect("valid grid");
        let slope = (r_hi - r_lo) / (d_hi - d_lo);
        let dev = math::abs(-slope - l) / l;
        if dev > worst {
            worst = dev;
        }
    }
    worst
}

/// Which parametric form the fit minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitModel {
    /// Least squares of D(lambda) against measured distortion.
    DOfLambda,
    /// Least squares of lambda(R) against measured lambda.
    LambdaOfR,
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub model: FitModel,
    /// Compare in log space instead of raw values; equalizes relative error
    /// across decades.
    pub log_domain: bool,
    pub starts: usize,
    pub max_iters: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { model: FitModel::DOfLambda, log_domain: false, starts: 16, max_iters: 200 }
    }
}

/// (predicted value, d/dalpha, d/dbeta) of the chosen model at one sample.
fn model_eval(model: FitModel, s: &RdSample, alpha: f64, beta: f64) -> (f64, f64, f64, f64) {
    match model {
        FitModel::DOfLambda => {
            let l = s.lambda;
            let d = libm::log1p(alpha / l) / (alpha * beta);
            let dda = 1.0 / (alpha * beta * (l + alpha)) - d / alpha;
            let ddb = -d / beta;
            (d, dda, ddb, s.distortion)
        }
        FitModel::LambdaOfR => {
            let r = s.bpp;
            let e = math::exp(beta * r);
            let pred = alpha * (e - 1.0);
            let dda = e - 1.0;
            let ddb = alpha * r * e;
            (pred, dda, ddb, s.lambda)
        }
    }
}

struct CostEval {
    cost: f64,
    jtj: [[f64; 2]; 2],
    jtr: [f64; 2],
}

/// Residuals and normal-equation blocks at (ln alpha, ln beta).
fn eval_point(samples: &[RdSample], opts: &FitOptions, ln_a: f64, ln_b: f64) -> Option<CostEval> {
    let alpha = math::exp(ln_a);
    let beta = math::exp(ln_b);
    if !alpha.is_finite() || !beta.is_finite() || alpha <= 0.0 || beta <= 0.0 {
        return None;
    }
    let mut cost = 0.0;
    let mut jtj = [[0.0; 2]; 2];
    let mut jtr = [0.0; 2];
    for s in samples {
        let (pred, dda, ddb, obs) = model_eval(opts.model, s, alpha, beta);
        if !pred.is_finite() {
            return None;
        }
        let (resid, scale) = if opts.log_domain {
            if pred <= 0.0 || obs <= 0.0 {
                return None;
            }
            (math::ln(pred) - math::ln(obs), 1.0 / pred)
        } else {
            (pred - obs, 1.0)
        };
        // Differentiate with respect to ln alpha, ln beta.
        let j = [scale * dda * alpha, scale * ddb * beta];
        cost += resid * resid;
        for (row, &jv) in j.iter().enumerate() {
            jtr[row] += jv * resid;
            for (col, &jw) in j.iter().enumerate() {
                jtj[row][col] += jv * jw;
            }
        }
    }
    cost.is_finite().then_some(CostEval { cost, jtj, jtr })
}

fn solve2(m: [[f64; 2]; 2], b: [f64; 2]) -> Option<[f64; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([
        (b[0] * m[1][1] - b[1] * m[0][1]) / det,
        (b[1] * m[0][0] - b[0] * m[1][0]) / det,
    ])
}

fn run_start(samples: &[RdSample], opts: &FitOptions, ln_a0: f64, ln_b0: f64) -> Option<(f64, f64, f64)> {
    let mut p = [ln_a0, ln_b0];
    let mut cur = eval_point(samples, opts, p[0], p[1])?;
    let mut mu = 1e-3;
    for _ in 0..opts.max_iters {
        let mut accepted = false;
        let mut step = [0.0; 2];
        for _ in 0..24 {
            let damped = [
                [cur.jtj[0][0] * (1.0 + mu), cur.jtj[0][1]],
                [cur.jtj[1][0], cur.jtj[1][1] * (1.0 + mu)],
            ];
            let Some(delta) = solve2(damped, [-cur.jtr[0], -cur.jtr[1]]) else {
                mu *= 10.0;
                continue;
            };
            let cand = [p[0] + delta[0], p[1] + delta[1]];
            match eval_point(samples, opts, cand[0], cand[1]) {
                Some(next) if next.cost <= cur.cost => {
                    p = cand;
                    cur = next;
                    mu = (mu / 3.0).max(1e-12);
                    step = delta;
                    accepted = true;
                    break;
                }
                _ => mu *= 10.0,
            }
        }
        if !accepted {
            break;
        }
        if math::abs(step[0]) < 1e-13 && math::abs(step[1]) < 1e-13 {
            break;
        }
    }
    Some((math::exp(p[0]), math::exp(p[1]), cur.cost))
}

/// Fit coefficients by damped Gauss-Newton over a log-spaced grid of starts
/// (alpha in [1e-2, 1e4], beta in [1e-2, 1e2]).
pub fn fit(samples: &[RdSample], opts: FitOptions) -> Result<RdModelParams, RdError> {
    if samples.len() < 3 {
        return Err(RdError::TooFewSamples { got: samples.len(), need: 3 });
    }
    let metric = samples[0].metric;
    if samples.iter().any(|s| s.metric != metric) {
        return Err(RdError::MixedMetrics);
    }
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            if a.lambda == b.lambda {
                return Err(RdError::DuplicateLambda);
            }
        }
    }
    let side = {
        // At least `starts` grid points, laid out as a near-square lattice.
        let mut n = 1;
        while n * n < opts.starts {
            n += 1;
        }
        n
    };
    let mut best: Option<(f64, f64, f64)> = None;
    for ai in 0..side {
        for bi in 0..side {
            let t_a = ai as f64 / (side - 1).max(1) as f64;
            let t_b = bi as f64 / (side - 1).max(1) as f64;
            let ln_a = math::ln(1e-2) + t_a * (math::ln(1e4) - math::ln(1e-2));
            let ln_b = math::ln(1e-2) + t_b * (math::ln(1e2) - math::ln(1e-2));
            if let Some(cand) = run_start(samples, &opts, ln_a, ln_b) {
                if best.map_or(true, |b| cand.2 < b.2) {
                    best = Some(cand);
                }
            }
        }
    }
    let (alpha, beta, cost) = best.ok_or(RdError::FitDiverged { best_cost: f64::INFINITY })?;
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(RdError::FitDiverged { best_cost: cost });
    }

    // R^2 in the fitted space.
    let observed: Vec<f64> = samples
        .iter()
        .map(|s| {
            let (_, _, _, obs) = model_eval(opts.model, s, alpha, beta);
            if opts.log_domain {
                math::ln(obs)
            } else {
                obs
            }
        })
        .collect();
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|&y| (y - mean) * (y - mean)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - cost / ss_tot } else if cost == 0.0 { 1.0 } else { 0.0 };
    Ok(RdModelParams {
        alpha,
        beta,
        metric,
        residual: math::sqrt(cost / samples.len() as f64),
        r2,
    })
}

/// Result of a rate-control run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateControlOutcome {
    pub lambda: f64,
    pub achieved_bpp: f64,
    /// |achieved - target| / target.
    pub bre: f64,
    /// Number of encoder invocations consumed.
    pub encodes: usize,
}

/// Drive the encoder toward `target_bpp`. Two probe encodes at the lambda
/// range ends establish the achievable window, the model picks the one-shot
/// lambda, and up to `refine` bisection steps in ln-lambda space tighten the
/// result. Every encode seen is a candidate; the lowest-BRE one wins.
pub fn rate_control(
    target_bpp: f64,
    model: &RdModelParams,
    lambda_range: (f64, f64),
    refine: usize,
    encode_at: &mut dyn FnMut(f64) -> f64,
) -> Result<RateControlOutcome, RdError> {
    assert!(target_bpp > 0.0, "target bpp must be positive");
    let (l_min, l_max) = lambda_range;
    assert!(l_min > 0.0 && l_max > l_min, "bad lambda range");

    let mut encodes = 0;
    let mut best: Option<RateControlOutcome> = None;
    let consider = |lambda: f64, bpp: f64, best: &mut Option<RateControlOutcome>| {
        let bre = math::abs(bpp - target_bpp) / target_bpp;
        if best.as_ref().map_or(true, |b| bre < b.bre) {
            *best = Some(RateControlOutcome { lambda, achieved_bpp: bpp, bre, encodes: 0 });
        }
    };

    let bpp_lo = encode_at(l_min);
    encodes += 1;
    consider(l_min, bpp_lo, &mut best);
    let bpp_hi = encode_at(l_max);
    encodes += 1;
    consider(l_max, bpp_hi, &mut best);
    if bpp_lo > bpp_hi {
        return Err(RdError::NonMonotoneBracket {
            detail: format!("bpp({l_min}) = {bpp_lo:.4} exceeds bpp({l_max}) = {bpp_hi:.4}"),
        });
    }
    if target_bpp < bpp_lo || target_bpp > bpp_hi {
        return Err(RdError::TargetOutOfRange { target: target_bpp, min: bpp_lo, max: bpp_hi });
    }

    let one_shot = eval_lambda_of_r(target_bpp, model.alpha, model.beta)?.clamp(l_min, l_max);
    let achieved = encode_at(one_shot);
    encodes += 1;
    consider(one_shot, achieved, &mut best);

    let (mut lo, mut hi) = (l_min, l_max);
    let (mut lo_bpp, mut hi_bpp) = (bpp_lo, bpp_hi);
    if achieved <= target_bpp {
        lo = one_shot;
        lo_bpp = achieved;
    } else {
        hi = one_shot;
        hi_bpp = achieved;
    }
    for _ in 0..refine {
        if lo >= hi {
            break;
        }
        let mid = math::exp(0.5 * (math::ln(lo) + math::ln(hi)));
        let bpp = encode_at(mid);
        encodes += 1;
        consider(mid, bpp, &mut best);
        if bpp < lo_bpp - 1e-12 || bpp > hi_bpp + 1e-12 {
            return Err(RdError::NonMonotoneBracket {
                detail: format!(
                    "bpp({mid:.4}) = {bpp:.4} outside bracket [{lo_bpp:.4}, {hi_bpp:.4}]"
                ),
            });
        }
        if bpp <= target_bpp {
            lo = mid;
            lo_bpp = bpp;
        } else {
            hi = mid;
            hi_bpp = bpp;
        }
    }
    let mut out = best.expect("at least one encode happened");
    out.encodes = encodes;
    Ok(out)
}

/// Least-squares cubic fit y(x), lowest degree coefficient first.
fn polyfit3(xs: &[f64], ys: &[f64]) -> [f64; 4] {
    let mut a = [[0.0f64; 4]; 4];
    let mut b = [0.0f64; 4];
    for (&x, &y) in xs.iter().zip(ys) {
        let powers = [1.0, x, x * x, x * x * x];
        for i in 0..4 {
            b[i] += y * powers[i];
            for j in 0..4 {
                a[i][j] += powers[i] * powers[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting.
    let mut idx = [0usize, 1, 2, 3];
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&r1, &r2| {
                math::abs(a[idx[r1]][col])
                    .partial_cmp(&math::abs(a[idx[r2]][col]))
                    .expect("finite")
            })
            .expect("non-empty");
        idx.swap(col, pivot);
        let p = idx[col];
        for &r in idx[col + 1..].iter() {
            let factor = a[r][col] / a[p][col];
            for c in col..4 {
                a[r][c] -= factor * a[p][c];
            }
            b[r] -= factor * b[p];
        }
    }
    let mut out = [0.0f64; 4];
    for col in (0..4).rev() {
        let r = idx[col];
        let mut acc = b[r];
        for c in col + 1..4 {
            acc -= a[r][c] * out[c];
        }
        out[col] = acc / a[r][col];
    }
    out
}

fn poly_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let eval = |x: f64| {
        c[0] * x + c[1] * x * x / 2.0 + c[2] * x * x * x / 3.0 + c[3] * x * x * x * x / 4.0
    };
    eval(hi) - eval(lo)
}

/// Bjontegaard delta rate between two (rate, quality-dB) curves: the average
/// rate difference of B against A over the overlapping quality interval, in
/// percent (positive means B spends more bits).
pub fn bd_rate(curve_a: &[(f64, f64)], curve_b: &[(f64, f64)]) -> Result<f64, RdError> {
    for c in [curve_a, curve_b] {
        if c.len() < 4 {
            return Err(RdError::TooFewSamples { got: c.len(), need: 4 });
        }
    }
    let prep = |curve: &[(f64, f64)]| -> ([f64; 4], f64, f64) {
        let qs: Vec<f64> = curve.iter().map(|&(_, q)| q).collect();
        let log_rates: Vec<f64> = curve.iter().map(|&(r, _)| math::log10(r)).collect();
        let lo = qs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (polyfit3(&qs, &log_rates), lo, hi)
    };
    let (pa, lo_a, hi_a) = prep(curve_a);
    let (pb, lo_b, hi_b) = prep(curve_b);
    let lo = lo_a.max(lo_b);
    let hi = hi_a.min(hi_b);
    if hi <= lo {
        return Err(RdError::NoOverlap);
    }
    let avg_diff = (poly_integral(&pb, lo, hi) - poly_integral(&pa, lo, hi)) / (hi - lo);
    Ok((math::powf(10.0, avg_diff) - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    const PAPER_LAMBDAS: [f64; 7] = [1.0, 4.0, 8.0, 16.0, 32.0, 64.0, 100.0];

    #[test]
    fn lambda_of_r_reference_values() {
        let (a, b) = PRESET_MSE;
        assert_eq!(eval_lambda_of_r(0.0, a, b).unwrap(), 0.0);
        // Frozen high-precision evaluation at R = 1.
        let l = eval_lambda_of_r(1.0, a, b).unwrap();
        assert!(math::rel_err(l, 104.330352340322850) < 1e-12, "{l}");
    }

    #[test]
    fn lambda_r_round_trip() {
        let (a, b) = PRESET_MSE;
        for &r in &[0.0, 0.1, 0.5, 1.0, 2.5, 6.0] {
            let l = eval_lambda_of_r(r, a, b).unwrap();
            let back = eval_r_of_lambda(l, a, b).unwrap();
            assert!(math::abs(back - r) <= 1e-12, "r={r} back={back}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(eval_lambda_of_r(-0.1, 1.0, 1.0), Err(RdError::NegativeInput));
        assert_eq!(eval_r_of_lambda(-1.0, 1.0, 1.0), Err(RdError::NegativeInput));
        assert_eq!(eval_d_of_lambda(0.0, 1.0, 1.0), Err(RdError::NonPositiveLambda));
        assert_eq!(eval_lambda_of_r(1.0, 0.0, 1.0), Err(RdError::BadCoefficients));
        assert_eq!(eval_lambda_of_r(1.0, 1.0, -2.0), Err(RdError::BadCoefficients));
    }

    #[test]
    fn d_of_lambda_reference_values() {
        let (a, b) = PRESET_MSE;
        // D(alpha) = ln 2 / (alpha beta), frozen.
        let d = eval_d_of_lambda(a, a, b).unwrap();
        assert!(math::rel_err(d, 0.01360870683873422) < 1e-12, "{d}");
        assert!(eval_d_of_lambda(1e9, a, b).unwrap() < 1e-9);
    }

    #[test]
    fn monotonicity_on_grid() {
        let (a, b) = PRESET_MSE;
        let mut prev_d = f64::INFINITY;
        let mut prev_r = -1.0;
        for i in 0..=255 {
            let l = 1.0 + i as f64;
            let d = eval_d_of_lambda(l, a, b).unwrap();
            let r = eval_r_of_lambda(l, a, b).unwrap();
            assert!(d < prev_d, "D not decreasing at lambda={l}");
            assert!(r > prev_r, "R not increasing at lambda={l}");
            prev_d = d;
            prev_r = r;
        }
    }

    #[test]
    fn consistency_identity_holds() {
        let grid: Vec<f64> = (0..=255).map(|i| 1.0 + i as f64).collect();
        for &(a, b) in &[PRESET_MSE, PRESET_MSSSIM, (0.7, 4.0), (500.0, 0.05)] {
            let dev = consistency_check(a, b, &grid, 1e-4);
            assert!(dev <= 1e-3, "alpha={a} beta={b}: {dev}");
        }
    }

    #[test]
    fn consistency_deviation_second_order() {
        let grid = [2.0, 16.0, 128.0];
        let (a, b) = PRESET_MSE;
        let coarse = consistency_check(a, b, &grid, 2e-2);
        let fine = consistency_check(a, b, &grid, 1e-2);
        let ratio = coarse / fine;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio} (coarse {coarse}, fine {fine})");
    }

    fn synthetic_samples(alpha: f64, beta: f64, noise: Option<(&mut rng::SeedRng, f64)>) -> Vec<RdSample> {
        let mut noise = noise;
        PAPER_LAMBDAS
            .iter()
            .map(|&l| {
                let mut d = eval_d_of_lambda(l, alpha, beta).unwrap();
                if let Some((r, mag)) = noise.as_mut() {
                    d *= 1.0 + *mag * (2.0 * r.random::<f64>() - 1.0);
                }
                RdSample {
                    lambda: l,
                    bpp: eval_r_of_lambda(l, alpha, beta).unwrap(),
                    distortion: d,
                    metric: Metric::Mse,
                }
            })
            .collect()
    }

    #[test]
    fn fit_recovers_exact_coefficients() {
        let (a, b) = PRESET_MSE;
        let samples = synthetic_samples(a, b, None);
        let fitted = fit(&samples, FitOptions::default()).unwrap();
        assert!(math::rel_err(fitted.alpha, a) < 0.01, "alpha {}", fitted.alpha);
        assert!(math::rel_err(fitted.beta, b) < 0.01, "beta {}", fitted.beta);
        assert!(fitted.r2 > 0.9999);
        assert!(fitted.residual < 1e-8);
        assert_eq!(fitted.metric, Metric::Mse);
    }

    #[test]
    fn fit_recovers_lambda_of_r_model() {
        let (a, b) = PRESET_MSSSIM;
        let samples: Vec<RdSample> = PAPER_LAMBDAS
            .iter()
            .map(|&l| RdSample {
                lambda: l,
                bpp: eval_r_of_lambda(l, a, b).unwrap(),
                distortion: 0.0,
                metric: Metric::MsSsim,
            })
            .collect();
        let opts = FitOptions { model: FitModel::LambdaOfR, ..FitOptions::default() };
        let fitted = fit(&samples, opts).unwrap();
        assert!(math::rel_err(fitted.alpha, a) < 0.01);
        assert!(math::rel_err(fitted.beta, b) < 0.01);
    }

    #[test]
    fn fit_with_noise_stays_close() {
        let (a, b) = PRESET_MSE;
        let mut r = rng::seeded(80);
        let samples = synthetic_samples(a, b, Some((&mut r, 0.01)));
        let fitted = fit(&samples, FitOptions::default()).unwrap();
        assert!(math::rel_err(fitted.alpha, a) < 0.10, "alpha {}", fitted.alpha);
        assert!(math::rel_err(fitted.beta, b) < 0.10, "beta {}", fitted.beta);
        assert!(fitted.r2 >= 0.99, "r2 {}", fitted.r2);
    }

    #[test]
    fn fit_rejects_bad_sample_sets() {
        let (a, b) = PRESET_MSE;
        let samples = synthetic_samples(a, b, None);
        assert_eq!(
            fit(&samples[..2], FitOptions::default()),
            Err(RdError::TooFewSamples { got: 2, need: 3 })
        );
        let mut dup = samples.clone();
        dup[1].lambda = dup[0].lambda;
        assert_eq!(fit(&dup, FitOptions::default()), Err(RdError::DuplicateLambda));
        let mut mixed = samples;
        mixed[2].metric = Metric::MsSsim;
        assert_eq!(fit(&mixed, FitOptions::default()), Err(RdError::MixedMetrics));
    }

    #[test]
    fn fit_scale_stability() {
        // Scaling D by c rescales the product alpha*beta by 1/c while the
        // lambda axis is preserved.
        let (a, b) = PRESET_MSE;
        let base = synthetic_samples(a, b, None);
        let scaled: Vec<RdSample> = base
            .iter()
            .map(|s| RdSample { distortion: s.distortion * 4.0, ..*s })
            .collect();
        let f1 = fit(&base, FitOptions::default()).unwrap();
        let f2 = fit(&scaled, FitOptions::default()).unwrap();
        assert!(math::rel_err(f1.alpha * f1.beta, 4.0 * f2.alpha * f2.beta) < 1e-3);
        for &l in &PAPER_LAMBDAS {
            let d1 = eval_d_of_lambda(l, f1.alpha, f1.beta).unwrap();
            let d2 = eval_d_of_lambda(l, f2.alpha, f2.beta).unwrap();
            assert!(math::rel_err(d2, 4.0 * d1) < 1e-3, "lambda {l}");
        }
    }

    fn model_for_control() -> RdModelParams {
        let (alpha, beta) = (20.0, 1.1);
        RdModelParams { alpha, beta, metric: Metric::Mse, residual: 0.0, r2: 1.0 }
    }

    #[test]
    fn rate_control_one_shot_exact_when_model_true() {
        let m = model_for_control();
        let mut encode = |l: f64| eval_r_of_lambda(l, m.alpha, m.beta).unwrap();
        let target = eval_r_of_lambda(40.0, m.alpha, m.beta).unwrap();
        let out = rate_control(target, &m, (1.0, 256.0), 0, &mut encode).unwrap();
        assert!(out.bre < 1e-9, "bre {}", out.bre);
        assert!(math::rel_err(out.lambda, 40.0) < 1e-9);
        assert_eq!(out.encodes, 3);
    }

    #[test]
    fn rate_control_refines_a_biased_encoder() {
        // The encoder achieves 25% more rate than the model predicts, so the
        // one-shot lands low and bisection walks toward the target.
        let m = model_for_control();
        let mut encode = |l: f64| 1.25 * eval_r_of_lambda(l, m.alpha, m.beta).unwrap();
        let target = 1.25 * eval_r_of_lambda(40.0, m.alpha, m.beta).unwrap();
        let zero = rate_control(target, &m, (1.0, 256.0), 0, &mut |l| {
            1.25 * eval_r_of_lambda(l, m.alpha, m.beta).unwrap()
        })
        .unwrap();
        let refined = rate_control(target, &m, (1.0, 256.0), 6, &mut encode).unwrap();
        assert!(refined.bre < zero.bre);
        assert!(refined.bre < 0.05, "bre {}", refined.bre);
    }

    #[test]
    fn rate_control_rejects_unreachable_target() {
        let m = model_for_control();
        let mut encode = |l: f64| eval_r_of_lambda(l, m.alpha, m.beta).unwrap();
        let max = eval_r_of_lambda(256.0, m.alpha, m.beta).unwrap();
        match rate_control(10.0 * max, &m, (1.0, 256.0), 2, &mut encode) {
            Err(RdError::TargetOutOfRange { .. }) => {}
            other => panic!("expected range rejection, got {other:?}"),
        }
    }

    #[test]
    fn rate_control_rejects_decreasing_encoder() {
        let m = model_for_control();
        let mut encode = |l: f64| 2.0 - eval_r_of_lambda(l, m.alpha, m.beta).unwrap() * 0.3;
        match rate_control(1.0, &m, (1.0, 256.0), 2, &mut encode) {
            Err(RdError::NonMonotoneBracket { .. }) => {}
            other => panic!("expected bracket rejection, got {other:?}"),
        }
    }

    fn reference_curve() -> Vec<(f64, f64)> {
        vec![(0.25, 30.0), (0.5, 33.5), (1.0, 37.0), (2.0, 40.0), (3.0, 41.5)]
    }

    #[test]
    fn bd_rate_identical_curves_zero() {
        let a = reference_curve();
        let v = bd_rate(&a, &a).unwrap();
        assert!(math::abs(v) < 1e-9, "{v}");
    }

    #[test]
    fn bd_rate_ten_percent_shift() {
        let a = reference_curve();
        let b: Vec<(f64, f64)> = a.iter().map(|&(r, q)| (r * 1.10, q)).collect();
        let v = bd_rate(&a, &b).unwrap();
        assert!(math::abs(v - 10.0) < 1e-6, "{v}");
    }

    #[test]
    fn bd_rate_roughly_antisymmetric() {
        let a = reference_curve();
        let b = vec![(0.30, 30.5), (0.55, 34.0), (1.15, 37.2), (2.2, 40.1), (3.2, 41.4)];
        let fwd = bd_rate(&a, &b).unwrap();
        let rev = bd_rate(&b, &a).unwrap();
        assert!(math::abs(fwd + rev) <= 1.0, "fwd {fwd} rev {rev}");
    }

    #[test]
    fn bd_rate_rejects_degenerate_inputs() {
        let a = reference_curve();
        assert_eq!(bd_rate(&a[..3], &a), Err(RdError::TooFewSamples { got: 3, need: 4 }));
        let far: Vec<(f64, f64)> = a.iter().map(|&(r, q)| (r, q + 100.0)).collect();
        assert_eq!(bd_rate(&a, &far), Err(RdError::NoOverlap));
    }
}
