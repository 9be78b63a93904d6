//! Lambda-conditioned modulation network.
//!
//! A stack of eight 1x1 convolutions over the latent features is interleaved
//! with seven binary modulators. Each modulator is a three-layer FCN that
//! maps the scaled lambda to a vector in (0,1)^M, broadcast spatially and
//! multiplied into the features. The final sigmoid yields a per-element mask
//! over the latents, so one frozen base codec serves a continuum of rates.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::kernels;
use crate::math;
use crate::rng::{self, SeedRng};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Top of the supported lambda range; masks are defined for [1, LAMBDA_MAX].
pub const LAMBDA_MAX: f64 = 256.0;

/// Conditioning input: ln(lambda) / ln(LAMBDA_MAX), in [0,1].
pub fn lambda_scaled(lambda: f64) -> f64 {
    math::ln(lambda) / math::ln(LAMBDA_MAX)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModNetError {
    LambdaOutOfRange { lambda_milli: i64 },
    BadShape { expected: String, got: String },
}

impl core::fmt::Display for ModNetError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModNetError::LambdaOutOfRange { lambda_milli } => {
                write!(
                    f,
                    "lambda {} outside [1, {LAMBDA_MAX}]",
                    *lambda_milli as f64 / 1000.0
                )
            }
            ModNetError::BadShape { expected, got } => {
                write!(f, "bad input shape: expected {expected}, got {got}")
            }
        }
    }
}

impl core::error::Error for ModNetError {}

fn check_lambda(lambda: f64) -> Result<(), ModNetError> {
    if !(1.0..=LAMBDA_MAX).contains(&lambda) {
        return Err(ModNetError::LambdaOutOfRange {
            lambda_milli: (lambda * 1000.0) as i64,
        });
    }
    Ok(())
}

/// Three affine stages mapping the scaled lambda to a vector in (0,1)^M:
/// f1 = ReLU(H1 x + b1), f2 = ReLU(H2 f1 + b2), bm = 1 - sigmoid(H3 f2 + b3).
#[derive(Clone, Debug)]
pub struct BinaryModulatorParams {
    pub h1: Tensor,
    pub b1: Tensor,
    pub h2: Tensor,
    pub b2: Tensor,
    pub h3: Tensor,
    pub b3: Tensor,
}

impl BinaryModulatorParams {
    /// ReLU-stage biases start small and positive so every modulator unit is
    /// alive across the whole lambda range; the output stage starts at zero,
    /// putting the initial bm values near 0.5.
    pub fn init(width: usize, rng: &mut SeedRng) -> Self {
        let m = width;
        BinaryModulatorParams {
            h1: rng::normal(rng, &[m, 1], math::sqrt(2.0)),
            b1: rng::uniform(rng, &[m], 0.05, 0.5),
            h2: rng::normal(rng, &[m, m], math::sqrt(2.0 / m as f64)),
            b2: rng::uniform(rng, &[m], 0.05, 0.5),
            h3: rng::normal(rng, &[m, m], math::sqrt(1.0 / m as f64)),
            b3: Tensor::zeros(&[m]),
        }
    }

    pub fn width(&self) -> usize {
        self.h1.shape()[0]
    }
}

/// One 1x1 convolution of the modulated stack.
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    /// [Cout, Cin, 1, 1]
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Eight 1x1 convolutions (N -> M, six M -> M, M -> N) and seven modulators.
#[derive(Clone, Debug)]
pub struct ModNetParams {
    pub convs: Vec<Conv1x1>,
    pub modulators: Vec<BinaryModulatorParams>,
    pub latent_channels: usize,
    pub width: usize,
}

impl ModNetParams {
    pub fn init(latent_channels: usize, width: usize, rng: &mut SeedRng) -> Self {
        let (n, m) = (latent_channels, width);
        let mut dims = Vec::with_capacity(9);
        dims.push(n);
        for _ in 0..7 {
            dims.push(m);
        }
        dims.push(n);
        let convs = (0..8)
            .map(|i| {
                let (cin, cout) = (dims[i], dims[i + 1]);
                Conv1x1 {
                    kernel: rng::normal(rng, &[cout, cin, 1, 1], math::sqrt(2.0 / cin as f64)),
                    bias: Tensor::zeros(&[cout]),
                }
            })
            .collect();
        let modulators = (0..7).map(|_| BinaryModulatorParams::init(m, rng)).collect();
        ModNetParams { convs, modulators, latent_channels, width }
    }

    /// All parameter tensors in the fixed order shared with
    /// [`ModNetIds::ids`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in self.convs.iter_mut() {
            out.push(&mut c.kernel);
            out.push(&mut c.bias);
        }
        for b in self.modulators.iter_mut() {
            out.push(&mut b.h1);
            out.push(&mut b.b1);
            out.push(&mut b.h2);
            out.push(&mut b.b2);
            out.push(&mut b.h3);
            out.push(&mut b.b3);
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for c in self.convs.iter() {
            out.push(&c.kernel);
            out.push(&c.bias);
        }
        for b in self.modulators.iter() {
            out.push(&b.h1);
            out.push(&b.b1);
            out.push(&b.h2);
            out.push(&b.b2);
            out.push(&b.h3);
            out.push(&b.b3);
        }
        out
    }
}

fn dense_plain(weight: &Tensor, bias: &Tensor, input: &[f64]) -> Vec<f64> {
    let ws = weight.shape();
    kernels::dense_forward(input, weight.data(), bias.data(), 1, ws[1], ws[0])
}

/// Evaluate one modulator at a scaled lambda.
pub fn bm_forward(params: &BinaryModulatorParams, lambda_scaled: f64) -> Vec<f64> {
    let mut f1 = dense_plain(&params.h1, &params.b1, &[lambda_scaled]);
    for v in f1.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mut f2 = dense_plain(&params.h2, &params.b2, &f1);
    for v in f2.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mut out = dense_plain(&params.h3, &params.b3, &f2);
    for v in out.iter_mut() {
        *v = 1.0 - math::sigmoid(*v);
    }
    out
}

/// Produce the mask for latents y at the given lambda, without a tape.
pub fn modnet_forward(params: &ModNetParams, y: &Tensor, lambda: f64) -> Result<Tensor, ModNetError> {
    check_lambda(lambda)?;
    let s = y.shape();
    if s.len() != 4 || s[1] != params.latent_channels {
        return Err(ModNetError::BadShape {
            expected: format!("[B,{},H_f,W_f]", params.latent_channels),
            got: format!("{s:?}"),
        });
    }
    let scaled = lambda_scaled(lambda);
    let (b, h, w) = (s[0], s[2], s[3]);
    let mut cur = y.clone();
    for (i, conv) in params.convs.iter().enumerate() {
        let cs = cur.shape().to_vec();
        let ks = conv.kernel.shape();
        let data = kernels::conv2d_forward(
            cur.data(), conv.kernel.data(), conv.bias.data(),
            cs[0], cs[1], cs[2], cs[3], ks[0], 1, 1, 0,
        );
        cur = Tensor::new(&[b, ks[0], h, w], data).expect("1x1 conv output is well formed");
        if let Some(bm) = params.modulators.get(i) {
            let vec = bm_forward(bm, scaled);
            let data = cur.data_mut();
            let plane = h * w;
            for bi in 0..b {
                for (m, &g) in vec.iter().enumerate() {
                    let base = (bi * vec.len() + m) * plane;
                    for p in 0..plane {
                        data[base + p] *= g;
                    }
                }
            }
        }
    }
    let data: Vec<f64> = cur.data().iter().map(|&v| math::sigmoid(v)).collect();
    Ok(Tensor::new(cur.shape(), data).expect("mask values are finite"))
}

/// How masked latents are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// y * mask.
    Soft,
    /// y * [mask >= 0.5].
    Hard,
}

/// Apply a mask to latents.
pub fn apply_mask(y: &Tensor, mask: &Tensor, mode: MaskMode) -> Tensor {
    assert_eq!(y.shape(), mask.shape(), "mask must match latent shape");
    let data: Vec<f64> = y
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| match mode {
            MaskMode::Soft => v * m,
            MaskMode::Hard => {
                if m >= 0.5 {
                    v
                } else {
                    0.0
                }
            }
        })
        .collect();
    Tensor::new(y.shape(), data).expect("masked latents are finite")
}

/// Handles to ModNet parameters inserted on a tape.
pub struct ModNetIds {
    pub convs: Vec<(TensorId, TensorId)>,
    pub modulators: Vec<BmIds>,
}

pub struct BmIds {
    pub h1: TensorId,
    pub b1: TensorId,
    pub h2: TensorId,
    pub b2: TensorId,
    pub h3: TensorId,
    pub b3: TensorId,
}

impl ModNetIds {
    pub fn insert(tape: &mut Tape, params: &ModNetParams, trainable: bool) -> Self {
        let convs = params
            .convs
            .iter()
            .map(|c| (tape.leaf(&c.kernel, trainable), tape.leaf(&c.bias, trainable)))
            .collect();
        let modulators = params
            .modulators
            .iter()
            .map(|b| BmIds {
                h1: tape.leaf(&b.h1, trainable),
                b1: tape.leaf(&b.b1, trainable),
                h2: tape.leaf(&b.h2, trainable),
                b2: tape.leaf(&b.b2, trainable),
                h3: tape.leaf(&b.h3, trainable),
                b3: tape.leaf(&b.b3, trainable),
            })
            .collect();
        ModNetIds { convs, modulators }
    }

    /// Parameter ids in the order of [`ModNetParams::params_mut`].
    pub fn ids(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for &(k, b) in &self.convs {
            out.push(k);
            out.push(b);
        }
        for m in &self.modulators {
            out.push(m.h1);
            out.push(m.b1);
            out.push(m.h2);
            out.push(m.b2);
            out.push(m.h3);
            out.push(m.b3);
        }
        out
    }
}

/// One modulator as a tape subgraph. `scaled` is a [1,1] node.
pub fn bm_forward_on(tape: &mut Tape, ids: &BmIds, scaled: TensorId) -> TensorId {
    let z1 = tape.dense(scaled, ids.h1, ids.b1);
    let f1 = tape.relu(z1);
    let z2 = tape.dense(f1, ids.h2, ids.b2);
    let f2 = tape.relu(z2);
    let z3 = tape.dense(f2, ids.h3, ids.b3);
    let s = tape.sigmoid(z3);
    let neg = tape.mul_scalar(s, -1.0);
    tape.add_scalar(neg, 1.0)
}

/// Mask subgraph for a single image (B = 1); VBR training builds one
/// subgraph per sample because each carries its own lambda.
pub fn modnet_forward_on(
    tape: &mut Tape,
    ids: &ModNetIds,
    y: TensorId,
    lambda: f64,
) -> Result<TensorId, ModNetError> {
    check_lambda(lambda)?;
    let s = tape.shape(y).to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(ModNetError::BadShape {
            expected: String::from("[1,N,H_f,W_f]"),
            got: format!("{s:?}"),
        });
    }
    let (h, w) = (s[2], s[3]);
    let scaled_leaf = {
        let t = Tensor::new(&[1, 1], alloc::vec![lambda_scaled(lambda)]).expect("lambda is finite");
        tape.constant(&t)
    };
    let mut cur = y;
    for (i, &(kid, bid)) in ids.convs.iter().enumerate() {
        cur = tape.conv2d(cur, kid, bid, 1, 0);
        if let Some(bm) = ids.modulators.get(i) {
            let vec = bm_forward_on(tape, bm, scaled_leaf);
            let grid = tape.broadcast_spatial(vec, h, w);
            cur = tape.mul(cur, grid);
        }
    }
    Ok(tape.sigmoid(cur))
}
