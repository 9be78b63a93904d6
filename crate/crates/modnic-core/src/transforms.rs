//! Analysis/synthesis transforms and the two quantizers.
//!
//! The analysis transform g_a maps an image to a latent tensor through a
//! stack of strided convolutions; the synthesis transform g_s mirrors the
//! geometry with transposed convolutions. Training perturbs latents with
//! additive uniform noise; inference rounds them to integer symbols.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::kernels;
use crate::math;
use crate::rng::{self, SeedRng};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Largest coded symbol magnitude; symbols live in [-LATENT_BOUND, LATENT_BOUND].
pub const LATENT_BOUND: i32 = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransformError {
    /// Input shape does not match what the transform expects.
    BadShape { expected: String, got: String },
    /// Spatial size not divisible by the downsampling factor.
    NotDivisible { len: usize, factor: usize },
    /// Synthesis layer list is not the reverse geometry of analysis.
    NotMirrored { detail: String },
}

impl core::fmt::Display for TransformError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TransformError::BadShape { expected, got } => {
                write!(f, "bad input shape: expected {expected}, got {got}")
            }
            TransformError::NotDivisible { len, factor } => {
                write!(f, "spatial size {len} is not divisible by downsampling factor {factor}")
            }
            TransformError::NotMirrored { detail } => {
                write!(f, "synthesis does not mirror analysis: {detail}")
            }
        }
    }
}

impl core::error::Error for TransformError {}

/// One convolution layer. Analysis layers hold kernels as [Cout,Cin,k,k];
/// synthesis layers are transposed convolutions with kernels [Cin,Cout,k,k].
#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub relu: bool,
}

/// Parameters of the g_a / g_s pair.
#[derive(Clone, Debug)]
pub struct TransformParams {
    pub analysis: Vec<ConvSpec>,
    pub synthesis: Vec<ConvSpec>,
    pub latent_channels: usize,
}

/// Handles to transform parameters inserted on a tape. Layer order matches
/// the `TransformParams` field order; `ids()` and `params_mut()` enumerate
/// tensors in the same sequence.
pub struct TransformIds {
    pub analysis: Vec<(TensorId, TensorId)>,
    pub synthesis: Vec<(TensorId, TensorId)>,
}

impl TransformParams {
    /// Small four-layer pair: g_a kernels 5,3,3,3, all stride 2 with ReLU
    /// between layers and a linear head; g_s mirrors it with out_pad 1 so
    /// every stage exactly doubles the spatial size. He-style init.
    pub fn toy(latent_channels: usize, rng: &mut SeedRng) -> Self {
        let n = latent_channels;
        let mut analysis = Vec::new();
        let geom = [(3usize, n, 5usize), (n, n, 3), (n, n, 3), (n, n, 3)];
        for (li, &(cin, cout, k)) in geom.iter().enumerate() {
            let std = math::sqrt(2.0 / (cin * k * k) as f64);
            analysis.push(ConvSpec {
                kernel: rng::normal(rng, &[cout, cin, k, k], std),
                bias: Tensor::zeros(&[cout]),
                stride: 2,
                pad: k / 2,
                out_pad: 0,
                relu: li + 1 < geom.len(),
            });
        }
        let mut synthesis = Vec::new();
        for (li, spec) in analysis.iter().rev().enumerate() {
            let ks = spec.kernel.shape();
            let (cout_a, cin_a, k) = (ks[0], ks[1], ks[2]);
            let std = math::sqrt(2.0 / (cout_a * k * k) as f64);
            synthesis.push(ConvSpec {
                kernel: rng::normal(rng, &[cout_a, cin_a, k, k], std),
                bias: Tensor::zeros(&[cin_a]),
                stride: spec.stride,
                pad: spec.pad,
                out_pad: spec.stride - 1,
                relu: li + 1 < analysis.len(),
            });
        }
        TransformParams { analysis, synthesis, latent_channels }
    }

    /// Product of analysis strides.
    pub fn downsample_factor(&self) -> usize {
        self.analysis.iter().map(|l| l.stride).product()
    }

    /// Check the mirror invariant between g_s and g_a.
    pub fn validate(&self) -> Result<(), TransformError> {
        if self.synthesis.len() != self.analysis.len() {
            return Err(TransformError::NotMirrored {
                detail: format!(
                    "{} synthesis layers vs {} analysis layers",
                    self.synthesis.len(),
                    self.analysis.len()
                ),
            });
        }
        for (i, syn) in self.synthesis.iter().enumerate() {
            let ana = &self.analysis[self.analysis.len() - 1 - i];
            let (aks, sks) = (ana.kernel.shape(), syn.kernel.shape());
            let ok = aks == sks
                && ana.stride == syn.stride
                && ana.pad == syn.pad
                && syn.out_pad == syn.stride - 1;
            if !ok {
                return Err(TransformError::NotMirrored {
                    detail: format!(
                        "synthesis layer {i}: kernel {:?} stride {} pad {} out_pad {} vs analysis {:?} stride {} pad {}",
                        sks, syn.stride, syn.pad, syn.out_pad, aks, ana.stride, ana.pad
                    ),
                });
            }
        }
        Ok(())
    }

    /// All parameter tensors in the fixed order shared with
    /// [`TransformIds::ids`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.analysis.iter_mut().chain(self.synthesis.iter_mut()) {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.analysis.iter().chain(self.synthesis.iter()) {
            out.push(&l.kernel);
            out.push(&l.bias);
        }
        out
    }
}

impl TransformIds {
    /// Insert every kernel and bias as tape leaves.
    pub fn insert(tape: &mut Tape, params: &TransformParams, trainable: bool) -> Self {
        let push = |tape: &mut Tape, layers: &[ConvSpec]| -> Vec<(TensorId, TensorId)> {
            layers
                .iter()
                .map(|l| (tape.leaf(&l.kernel, trainable), tape.leaf(&l.bias, trainable)))
                .collect()
        };
        TransformIds {
            analysis: push(tape, &params.analysis),
            synthesis: push(tape, &params.synthesis),
        }
    }

    /// Parameter ids in the order of [`TransformParams::params_mut`].
    pub fn ids(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for &(k, b) in self.analysis.iter().chain(self.synthesis.iter()) {
            out.push(k);
            out.push(b);
        }
        out
    }
}

fn expect_image(params: &TransformParams, x: &Tensor) -> Result<(), TransformError> {
    let s = x.shape();
    let cin = params.analysis.first().map_or(3, |l| l.kernel.shape()[1]);
    if s.len() != 4 || s[1] != cin {
        return Err(TransformError::BadShape {
            expected: format!("[B,{cin},H,W]"),
            got: format!("{s:?}"),
        });
    }
    let factor = params.downsample_factor();
    for &len in &s[2..4] {
        if len % factor != 0 {
            return Err(TransformError::NotDivisible { len, factor });
        }
    }
    Ok(())
}

/// Run g_a without a tape.
pub fn analyze(params: &TransformParams, x: &Tensor) -> Result<Tensor, TransformError> {
    expect_image(params, x)?;
    let mut cur = x.clone();
    for l in &params.analysis {
        let s = cur.shape().to_vec();
        let ks = l.kernel.shape();
        let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
        let (cout, k) = (ks[0], ks[2]);
        let oh = kernels::conv_out_dim(h, k, l.stride, l.pad).expect("validated geometry");
        let ow = kernels::conv_out_dim(w, k, l.stride, l.pad).expect("validated geometry");
        let mut data = kernels::conv2d_forward(
            cur.data(), l.kernel.data(), l.bias.data(),
            b, cin, h, w, cout, k, l.stride, l.pad,
        );
        if l.relu {
            for v in data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        cur = Tensor::new(&[b, cout, oh, ow], data).expect("conv output is well formed");
    }
    Ok(cur)
}

/// Run g_s without a tape. Output is the raw linear head; clamp to [0,1]
/// with [`clamp01`] for display or metrics, never inside a loss.
pub fn synthesize(params: &TransformParams, y: &Tensor) -> Result<Tensor, TransformError> {
    let s = y.shape();
    if s.len() != 4 || s[1] != params.latent_channels {
        return Err(TransformError::BadShape {
            expected: format!("[B,{},H_f,W_f]", params.latent_channels),
            got: format!("{s:?}"),
        });
    }
    let mut cur = y.clone();
    for l in &params.synthesis {
        let s = cur.shape().to_vec();
        let ks = l.kernel.shape();
        let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
        let (cout, k) = (ks[1], ks[2]);
        let oh = kernels::tconv_out_dim(h, k, l.stride, l.pad, l.out_pad).expect("validated geometry");
        let ow = kernels::tconv_out_dim(w, k, l.stride, l.pad, l.out_pad).expect("validated geometry");
        let mut data = kernels::tconv2d_forward(
            cur.data(), l.kernel.data(), l.bias.data(),
            b, cin, h, w, cout, k, l.stride, l.pad, l.out_pad,
        );
        if l.relu {
            for v in data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        cur = Tensor::new(&[b, cout, oh, ow], data).expect("tconv output is well formed");
    }
    Ok(cur)
}

/// g_a as a tape subgraph, for training.
pub fn analyze_on(tape: &mut Tape, params: &TransformParams, ids: &TransformIds, x: TensorId) -> TensorId {
    let mut cur = x;
    for (l, &(kid, bid)) in params.analysis.iter().zip(&ids.analysis) {
        cur = tape.conv2d(cur, kid, bid, l.stride, l.pad);
        if l.relu {
            cur = tape.relu(cur);
        }
    }
    cur
}

/// g_s as a tape subgraph, for training.
pub fn synthesize_on(tape: &mut Tape, params: &TransformParams, ids: &TransformIds, y: TensorId) -> TensorId {
    let mut cur = y;
    for (l, &(kid, bid)) in params.synthesis.iter().zip(&ids.synthesis) {
        cur = tape.tconv2d(cur, kid, bid, l.stride, l.pad, l.out_pad);
        if l.relu {
            cur = tape.relu(cur);
        }
    }
    cur
}

/// Clamp an image tensor into [0,1] for evaluation.
pub fn clamp01(t: &Tensor) -> Tensor {
    let data: Vec<f64> = t
        .data()
        .iter()
        .map(|&v| if v < 0.0 { 0.0 } else if v > 1.0 { 1.0 } else { v })
        .collect();
    Tensor::new(t.shape(), data).expect("clamp keeps values finite")
}

/// Training quantizer: y plus i.i.d. Uniform(-0.5, 0.5) noise.
pub fn quantize_train(y: &Tensor, rng: &mut SeedRng) -> Tensor {
    let noise = rng::uniform_noise(rng, y.shape());
    let data: Vec<f64> = y.data().iter().zip(noise.data()).map(|(&a, &b)| a + b).collect();
    Tensor::new(y.shape(), data).expect("noisy latents are finite")
}

/// Inference quantizer: round half away from zero, then clamp into
/// [-LATENT_BOUND, LATENT_BOUND]. Returns the symbols and how many were
/// clamped.
pub fn quantize_infer(y: &Tensor) -> (Vec<i32>, usize) {
    let mut clamped = 0usize;
    let symbols = y
        .data()
        .iter()
        .map(|&v| {
            let r = math::round(v);
            if r > LATENT_BOUND as f64 {
                clamped += 1;
                LATENT_BOUND
            } else if r < -LATENT_BOUND as f64 {
                clamped += 1;
                -LATENT_BOUND
            } else {
                r as i32
            }
        })
        .collect();
    (symbols, clamped)
}

/// Integer symbols of one image's latents plus the shapes needed to invert
/// them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentCode {
    /// Channel-major, then row-major within each channel.
    pub symbols: Vec<i32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl LatentCode {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Symbols as a float tensor [1,C,H_f,W_f] ready for g_s.
    pub fn dequantize(&self) -> Tensor {
        let data: Vec<f64> = self.symbols.iter().map(|&s| s as f64).collect();
        Tensor::new(&[1, self.channels, self.height, self.width], data)
            .expect("symbols are finite")
    }
}
