//! End-to-end codec paths: image to payload, payload to reconstruction,
//! and the quality report used by evaluation and sweeps.
//!
//! Encoder and decoder share one reconstruction routine, so the decoder
//! output is bit-identical to the encoder-side reconstruction. The decoder
//! never sees the lambda mask: it decodes the already-modulated symbols.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::coder::{self, CoderError};
use crate::density::{self, CdfTables};
use crate::metrics::{self, MetricsError, QualityReport};
use crate::modnet::{self, MaskMode, ModNetError};
use crate::tensor::Tensor;
use crate::trainer::Checkpoint;
use crate::transforms::{self, LatentCode, TransformError};

#[derive(Clone, Debug, PartialEq)]
pub enum CodecError {
    Transform(TransformError),
    Coder(CoderError),
    ModNet(ModNetError),
    Metrics(MetricsError),
    /// Lambda modulation requested but the checkpoint has no ModNet.
    MissingModNet,
    BadImage(String),
}

impl core::fmt::Display for CodecError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CodecError::Transform(e) => write!(f, "transform: {e}"),
            CodecError::Coder(e) => write!(f, "entropy coder: {e}"),
            CodecError::ModNet(e) => write!(f, "modulation: {e}"),
            CodecError::Metrics(e) => write!(f, "metrics: {e}"),
            CodecError::MissingModNet => {
                write!(f, "checkpoint carries no modulation network; encode without lambda")
            }
            CodecError::BadImage(detail) => write!(f, "bad image: {detail}"),
        }
    }
}

impl core::error::Error for CodecError {}

impl From<TransformError> for CodecError {
    fn from(e: TransformError) -> Self {
        CodecError::Transform(e)
    }
}

impl From<CoderError> for CodecError {
    fn from(e: CoderError) -> Self {
        CodecError::Coder(e)
    }
}

impl From<ModNetError> for CodecError {
    fn from(e: ModNetError) -> Self {
        CodecError::ModNet(e)
    }
}

impl From<MetricsError> for CodecError {
    fn from(e: MetricsError) -> Self {
        CodecError::Metrics(e)
    }
}

#[derive(Clone, Debug)]
pub struct EncodeResult {
    pub payload: Vec<u8>,
    pub latent: LatentCode,
    /// Latents that fell outside the coder support and were clamped.
    pub clamp_events: usize,
    /// Clamped-to-[0,1] reconstruction, identical to what [`decode`] yields.
    pub reconstruction: Tensor,
}

fn batchify(image: &Tensor) -> Result<Tensor, CodecError> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CodecError::BadImage(format!("expected [3,H,W], got {s:?}")));
    }
    if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CodecError::BadImage(String::from("pixel values must lie in [0,1]")));
    }
    Tensor::new(&[1, s[0], s[1], s[2]], image.data().to_vec())
        .map_err(|e| CodecError::BadImage(format!("{e:?}")))
}

fn unbatch(x: Tensor) -> Tensor {
    let s = x.shape().to_vec();
    Tensor::new(&[s[1], s[2], s[3]], x.data().to_vec()).expect("reshape keeps data")
}

/// Quantized CDF tables for a checkpoint's density, as used on both ends.
pub fn tables_for(ck: &Checkpoint) -> CdfTables {
    density::build_tables(&ck.density, density::TABLE_PRECISION)
}

/// Analyze, optionally modulate at `lambda`, and quantize to symbols.
pub fn encode_latents(
    ck: &Checkpoint,
    image: &Tensor,
    lambda: Option<f64>,
    mode: MaskMode,
) -> Result<(LatentCode, usize), CodecError> {
    let x = batchify(image)?;
    let y = transforms::analyze(&ck.transforms, &x)?;
    let y = match lambda {
        None => y,
        Some(l) => {
            let m = ck.modnet.as_ref().ok_or(CodecError::MissingModNet)?;
            let mask = modnet::modnet_forward(m, &y, l)?;
            modnet::apply_mask(&y, &mask, mode)
        }
    };
    let (symbols, clamp_events) = transforms::quantize_infer(&y);
    let s = y.shape();
    let latent = LatentCode {
        symbols,
        channels: s[1],
        height: s[2],
        width: s[3],
        image_height: image.shape()[1],
        image_width: image.shape()[2],
    };
    Ok((latent, clamp_events))
}

pub fn encode(
    ck: &Checkpoint,
    image: &Tensor,
    lambda: Option<f64>,
    mode: MaskMode,
) -> Result<EncodeResult, CodecError> {
    let (latent, clamp_events) = encode_latents(ck, image, lambda, mode)?;
    let tables = tables_for(ck);
    let payload = coder::encode_symbols(&latent, &tables)?;
    let reconstruction = reconstruct(ck, &latent)?;
    Ok(EncodeResult { payload, latent, clamp_events, reconstruction })
}

/// Synthesize a [3,H,W] image from coded symbols, clamped to [0,1].
pub fn reconstruct(ck: &Checkpoint, latent: &LatentCode) -> Result<Tensor, CodecError> {
    let y = latent.dequantize();
    let x = transforms::synthesize(&ck.transforms, &y)?;
    Ok(unbatch(transforms::clamp01(&x)))
}

pub fn decode(
    ck: &Checkpoint,
    payload: &[u8],
    latent_shape: (usize, usize, usize),
    image_size: (usize, usize),
) -> Result<(LatentCode, Tensor), CodecError> {
    let (channels, height, width) = latent_shape;
    let tables = tables_for(ck);
    let symbols = coder::decode_symbols(payload, channels, height, width, &tables)?;
    let latent = LatentCode {
        symbols,
        channels,
        height,
        width,
        image_height: image_size.0,
        image_width: image_size.1,
    };
    let recon = reconstruct(ck, &latent)?;
    Ok((latent, recon))
}

/// Encode and score one image. `header_bytes` counts toward bpp so the
/// report reflects the full file size.
pub fn evaluate(
    ck: &Checkpoint,
    image: &Tensor,
    lambda: Option<f64>,
    mode: MaskMode,
    header_bytes: usize,
) -> Result<(EncodeResult, QualityReport), CodecError> {
    let enc = encode(ck, image, lambda, mode)?;
    let pixels = (image.shape()[1] * image.shape()[2]) as f64;
    let bpp = ((enc.payload.len() + header_bytes) * 8) as f64 / pixels;
    let x = batchify(image)?;
    let xh = {
        let s = enc.reconstruction.shape().to_vec();
        Tensor::new(&[1, s[0], s[1], s[2]], enc.reconstruction.data().to_vec())
            .expect("reconstruction is a valid image")
    };
    let report = metrics::quality(&x, &xh, Some(bpp))?;
    Ok((enc, report))
}
