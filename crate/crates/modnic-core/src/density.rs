//! Per-channel monotone cumulative-density network and bit-rate estimation.
//!
//! Each latent channel owns a tiny stack of affine stages with
//! softplus-positive weights, tanh-bounded gates, and a final sigmoid, so the
//! modeled CDF is nondecreasing and lies in (0,1) by construction. Interval
//! probabilities price latents during training; quantized cumulative tables
//! feed the range coder at inference.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::{self, SeedRng};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::transforms::LATENT_BOUND;

/// Probability floor inside [`rate_bits_on`], 2^-15.
pub const P_FLOOR: f64 = 1.0 / 32768.0;

/// Default cumulative-frequency precision in bits.
pub const TABLE_PRECISION: u32 = 16;

/// One affine stage. `hhat` is [C,r_out,r_in] (softplus gives the effective
/// weight), `bias` is [C,r_out], `gate` is [C,r_out] on every stage except
/// the last.
#[derive(Clone, Debug)]
pub struct DensityStage {
    pub hhat: Tensor,
    pub bias: Tensor,
    pub gate: Option<Tensor>,
}

/// Parameters of the factorized prior: one monotone network per channel.
#[derive(Clone, Debug)]
pub struct DensityParams {
    pub channels: usize,
    pub stages: Vec<DensityStage>,
}

impl DensityParams {
    /// Default shape: four stages with hidden width three.
    pub fn init(channels: usize, rng: &mut SeedRng) -> Self {
        Self::with_widths(channels, &[3, 3, 3], rng)
    }

    /// Stages mapping widths 1 -> hidden[0] -> ... -> 1. Weights start at
    /// softplus_inv(1/(scale*r_out)) with scale = 10^(1/K), biases uniform in
    /// (-0.5, 0.5), gates zero, which spreads the initial CDF over a few
    /// units around the origin.
    pub fn with_widths(channels: usize, hidden: &[usize], rng: &mut SeedRng) -> Self {
        let mut dims = vec![1usize];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let k = dims.len() - 1;
        let scale = math::powf(10.0, 1.0 / k as f64);
        let mut stages = Vec::with_capacity(k);
        for i in 0..k {
            let (rin, rout) = (dims[i], dims[i + 1]);
            let w0 = math::softplus_inv(1.0 / (scale * rout as f64));
            stages.push(DensityStage {
                hhat: Tensor::full(&[channels, rout, rin], w0),
                bias: rng::uniform(rng, &[channels, rout], -0.5, 0.5),
                gate: (i + 1 < k).then(|| Tensor::zeros(&[channels, rout])),
            });
        }
        DensityParams { channels, stages }
    }

    /// All parameter tensors in the fixed order shared with
    /// [`DensityIds::ids`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in self.stages.iter_mut() {
            out.push(&mut s.hhat);
            out.push(&mut s.bias);
            if let Some(g) = s.gate.as_mut() {
                out.push(g);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for s in self.stages.iter() {
            out.push(&s.hhat);
            out.push(&s.bias);
            if let Some(g) = s.gate.as_ref() {
                out.push(g);
            }
        }
        out
    }

    /// CDF at a single point. Compile first when evaluating many points.
    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        CompiledDensity::compile(self).cdf(channel, x)
    }

    /// Interval probability cdf(v+0.5) - cdf(v-0.5).
    pub fn pmf(&self, channel: usize, v: i32) -> f64 {
        let c = CompiledDensity::compile(self);
        c.cdf(channel, v as f64 + 0.5) - c.cdf(channel, v as f64 - 0.5)
    }
}

/// Effective (softplus/tanh applied) weights for fast repeated evaluation.
pub struct CompiledDensity {
    channels: usize,
    stages: Vec<CompiledStage>,
}

struct CompiledStage {
    rin: usize,
    rout: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    gate: Option<Vec<f64>>,
}

impl CompiledDensity {
    pub fn compile(params: &DensityParams) -> Self {
        let stages = params
            .stages
            .iter()
            .map(|s| {
                let hs = s.hhat.shape();
                CompiledStage {
                    rin: hs[2],
                    rout: hs[1],
                    weight: s.hhat.data().iter().map(|&v| math::softplus(v)).collect(),
                    bias: s.bias.data().to_vec(),
                    gate: s.gate.as_ref().map(|g| g.data().iter().map(|&v| math::tanh(v)).collect()),
                }
            })
            .collect();
        CompiledDensity { channels: params.channels, stages }
    }

    /// Pre-sigmoid output of the stage stack.
    pub fn logits(&self, channel: usize, x: f64) -> f64 {
        assert!(channel < self.channels, "channel {channel} out of range");
        let mut v = vec![x];
        for s in &self.stages {
            let mut u = vec![0.0; s.rout];
            for j in 0..s.rout {
                let mut acc = s.bias[channel * s.rout + j];
                for i in 0..s.rin {
                    acc += s.weight[(channel * s.rout + j) * s.rin + i] * v[i];
                }
                if let Some(g) = &s.gate {
                    acc += g[channel * s.rout + j] * math::tanh(acc);
                }
                u[j] = acc;
            }
            v = u;
        }
        v[0]
    }

    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        math::sigmoid(self.logits(channel, x))
    }

    /// Interval probability with the tails folded into the edge symbols, the
    /// distribution actually coded after clamping.
    pub fn coded_pmf(&self, channel: usize, v: i32) -> f64 {
        if v <= -LATENT_BOUND {
            self.cdf(channel, -(LATENT_BOUND as f64) + 0.5)
        } else if v >= LATENT_BOUND {
            1.0 - self.cdf(channel, LATENT_BOUND as f64 - 0.5)
        } else {
            self.cdf(channel, v as f64 + 0.5) - self.cdf(channel, v as f64 - 0.5)
        }
    }
}

/// Handles to density parameters inserted on a tape.
pub struct DensityIds {
    stages: Vec<(TensorId, TensorId, Option<TensorId>)>,
}

impl DensityIds {
    pub fn insert(tape: &mut Tape, params: &DensityParams, trainable: bool) -> Self {
        let stages = params
            .stages
            .iter()
            .map(|s| {
                (
                    tape.leaf(&s.hhat, trainable),
                    tape.leaf(&s.bias, trainable),
                    s.gate.as_ref().map(|g| tape.leaf(g, trainable)),
                )
            })
            .collect();
        DensityIds { stages }
    }

    /// Parameter ids in the order of [`DensityParams::params_mut`].
    pub fn ids(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for &(h, b, g) in &self.stages {
            out.push(h);
            out.push(b);
            if let Some(g) = g {
                out.push(g);
            }
        }
        out
    }
}

/// Stage stack as a tape subgraph. Input and output are [B,C,H,W,r].
fn logits_on(tape: &mut Tape, ids: &DensityIds, x: TensorId) -> TensorId {
    let mut cur = x;
    for &(h, b, g) in &ids.stages {
        cur = tape.density_affine(cur, h, b);
        if let Some(g) = g {
            cur = tape.density_gate(cur, g);
        }
    }
    cur
}

/// Estimated total bits of a latent tensor [B,C,H,W]:
/// sum of -log2 max(cdf(y+0.5) - cdf(y-0.5), P_FLOOR).
pub fn rate_bits_on(tape: &mut Tape, ids: &DensityIds, y: TensorId) -> TensorId {
    let s = tape.shape(y).to_vec();
    assert_eq!(s.len(), 4, "rate_bits input must be [B,C,H,W], got {s:?}");
    let y5 = tape.reshape(y, &[s[0], s[1], s[2], s[3], 1]);
    let hi_in = tape.add_scalar(y5, 0.5);
    let lo_in = tape.add_scalar(y5, -0.5);
    let hi_logit = logits_on(tape, ids, hi_in);
    let lo_logit = logits_on(tape, ids, lo_in);
    let hi = tape.sigmoid(hi_logit);
    let lo = tape.sigmoid(lo_logit);
    let p = tape.sub(hi, lo);
    let p = tape.clamp_min(p, P_FLOOR);
    let lnp = tape.ln(p);
    let bits = tape.mul_scalar(lnp, -1.0 / math::LN_2);
    tape.sum(bits)
}

/// [`rate_bits_on`] without keeping a graph around. Bit-identical to the
/// graph value because it runs the same ops in the same order.
pub fn rate_bits_plain(params: &DensityParams, y: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let ids = DensityIds::insert(&mut tape, params, false);
    let yid = tape.constant(y);
    let root = rate_bits_on(&mut tape, &ids, yid);
    tape.scalar(root)
}

/// Integer cumulative frequencies for one channel over symbols
/// [-LATENT_BOUND, LATENT_BOUND]: `cum` has 2L+2 entries, cum[0] = 0,
/// cum[last] = 2^precision, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdfTable {
    pub cum: Vec<u32>,
}

impl QuantizedCdfTable {
    pub fn symbol_count(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn freq(&self, symbol: usize) -> u32 {
        self.cum[symbol + 1] - self.cum[symbol]
    }
}

/// Tables for all channels at one precision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTables {
    pub precision: u32,
    pub per_channel: Vec<QuantizedCdfTable>,
}

/// Round a probability vector to integer frequencies that are each at least
/// one and sum exactly to 2^precision. The residual after rounding lands on
/// the largest bins, so high-probability symbols absorb the quantization
/// error.
pub fn quantize_pmf(pmf: &[f64], precision: u32) -> Vec<u32> {
    assert!((1..=30).contains(&precision), "precision out of range");
    let total: u64 = 1u64 << precision;
    assert!(
        (pmf.len() as u64) <= total,
        "{} symbols cannot each get mass at precision {precision}",
        pmf.len()
    );
    let mut freq: Vec<u64> = pmf
        .iter()
        .map(|&p| {
            let p = if p < 0.0 { 0.0 } else { p };
            let f = math::round(p * total as f64) as u64;
            f.max(1)
        })
        .collect();
    let mut have: i64 = freq.iter().map(|&f| f as i64).sum();
    while have != total as i64 {
        let mut largest = 0usize;
        for (i, &f) in freq.iter().enumerate() {
            if f > freq[largest] {
                largest = i;
            }
        }
        let diff = total as i64 - have;
        if diff > 0 {
            freq[largest] += diff as u64;
            have += diff;
        } else {
            let room = freq[largest] as i64 - 1;
            let cut = room.min(-diff);
            assert!(cut > 0, "cannot normalize pmf: no mass left to remove");
            freq[largest] -= cut as u64;
            have -= cut;
        }
    }
    freq.into_iter().map(|f| f as u32).collect()
}

/// Deterministically build per-channel tables from the density parameters.
/// Tail mass beyond the support is folded into the edge symbols, matching
/// the clamped symbol distribution.
pub fn build_tables(params: &DensityParams, precision: u32) -> CdfTables {
    let compiled = CompiledDensity::compile(params);
    let nsym = (2 * LATENT_BOUND + 1) as usize;
    let per_channel = (0..params.channels)
        .map(|c| {
            let pmf: Vec<f64> = (-LATENT_BOUND..=LATENT_BOUND)
                .map(|v| compiled.coded_pmf(c, v))
                .collect();
            debug_assert_eq!(pmf.len(), nsym);
            let freq = quantize_pmf(&pmf, precision);
            let mut cum = Vec::with_capacity(nsym + 1);
            let mut acc = 0u32;
            cum.push(0);
            for f in freq {
                acc += f;
                cum.push(acc);
            }
            QuantizedCdfTable { cum }
        })
        .collect();
    CdfTables { precision, per_channel }
}
