//! File-level encode, decode, and evaluation.
//!
//! Images of arbitrary size are edge-padded to the transform's downsampling
//! factor before encoding; the header records the source dimensions so the
//! decoder can crop back. Rate is charged on the full file (header plus
//! payload) over the source pixels, and quality compares the source against
//! the cropped reconstruction.

use anyhow::{anyhow, bail, Result};

use modnic_core::codec;
use modnic_core::metrics::{self, QualityReport};
use modnic_core::modnet::MaskMode;
use modnic_core::trainer::Checkpoint;
use modnic_core::Tensor;

use crate::bitstream::{self, Header, FLAG_HARD_MASK, FLAG_MODULATED};
use crate::checkpoint;
use crate::ppm;

#[derive(Clone, Debug)]
pub struct Encoded {
    /// Complete bitstream file: header plus payload.
    pub file_bytes: Vec<u8>,
    pub header: Header,
    /// [3,H,W] reconstruction at the source dimensions, clamped to [0,1].
    pub reconstruction: Tensor,
    pub clamp_events: usize,
}

impl Encoded {
    pub fn bpp(&self) -> f64 {
        bpp_of(self.file_bytes.len(), self.header.width as usize, self.header.height as usize)
    }
}

/// Total file bytes x 8 over source pixels.
pub fn bpp_of(file_bytes: usize, width: usize, height: usize) -> f64 {
    (file_bytes * 8) as f64 / (width * height) as f64
}

fn batch4(image: &Tensor) -> Tensor {
    let s = image.shape();
    Tensor::new(&[1, s[0], s[1], s[2]], image.data().to_vec()).expect("valid image tensor")
}

pub fn encode_image(
    ck: &Checkpoint,
    image: &Tensor,
    lambda: Option<f64>,
    hard_mask: bool,
) -> Result<Encoded> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        bail!("expected a [3,H,W] image, got {:?}", s);
    }
    let (h, w) = (s[1], s[2]);
    if h > u16::MAX as usize || w > u16::MAX as usize || h == 0 || w == 0 {
        bail!("image dimensions {w}x{h} outside the supported range");
    }
    let factor = ck.transforms.downsample_factor();
    let padded = ppm::pad_replicate(image, factor);
    let mode = if hard_mask { MaskMode::Hard } else { MaskMode::Soft };
    let enc = codec::encode(ck, &padded, lambda, mode).map_err(|e| anyhow!("encode: {e}"))?;

    let mut flags = 0u8;
    if lambda.is_some() {
        flags |= FLAG_MODULATED;
        if hard_mask {
            flags |= FLAG_HARD_MASK;
        }
    }
    let channels = enc.latent.channels;
    if channels > u8::MAX as usize {
        bail!("latent channel count {channels} does not fit the header");
    }
    let header = Header {
        flags,
        width: w as u16,
        height: h as u16,
        channels: channels as u8,
        lambda: lambda.unwrap_or(0.0) as f32,
        model_hash: checkpoint::model_hash(ck),
        payload_len: enc.payload.len() as u32,
    };
    Ok(Encoded {
        file_bytes: bitstream::write(&header, &enc.payload),
        header,
        reconstruction: ppm::crop(&enc.reconstruction, h, w),
        clamp_events: enc.clamp_events,
    })
}

/// Decode a bitstream file against `ck`, returning the header and the
/// [3,H,W] reconstruction at the source dimensions.
pub fn decode_bytes(ck: &Checkpoint, bytes: &[u8]) -> Result<(Header, Tensor)> {
    let (header, payload) = bitstream::read(bytes)?;
    let expected = checkpoint::model_hash(ck);
    if header.model_hash != expected {
        bail!(
            "bitstream was produced under model {:08x}, checkpoint is {expected:08x}",
            header.model_hash
        );
    }
    let factor = ck.transforms.downsample_factor();
    let (h, w) = (header.height as usize, header.width as usize);
    let (ph, pw) = (h.div_ceil(factor) * factor, w.div_ceil(factor) * factor);
    let latent_shape = (header.channels as usize, ph / factor, pw / factor);
    let (_, recon) = codec::decode(ck, payload, latent_shape, (ph, pw))
        .map_err(|e| anyhow!("decode: {e}"))?;
    Ok((header, ppm::crop(&recon, h, w)))
}

/// Encode and score one image; the report's bpp covers the whole file.
pub fn eval_image(
    ck: &Checkpoint,
    image: &Tensor,
    lambda: Option<f64>,
    hard_mask: bool,
) -> Result<(Encoded, QualityReport)> {
    let enc = encode_image(ck, image, lambda, hard_mask)?;
    let report = metrics::quality(&batch4(image), &batch4(&enc.reconstruction), Some(enc.bpp()))
        .map_err(|e| anyhow!("quality: {e:?}"))?;
    Ok((enc, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use modnic_core::density::DensityParams;
    use modnic_core::modnet::ModNetParams;
    use modnic_core::rng;
    use modnic_core::trainer::TrainConfig;
    use modnic_core::transforms::TransformParams;

    fn toy_checkpoint() -> Checkpoint {
        let mut r = rng::seeded(31);
        let mut config = TrainConfig::toy();
        config.latent_channels = 4;
        config.modulator_width = 3;
        Checkpoint {
            transforms: TransformParams::toy(4, &mut r),
            density: DensityParams::init(4, &mut r),
            modnet: Some(ModNetParams::init(4, 3, &mut r)),
            config,
            step: 1,
        }
    }

    #[test]
    fn file_round_trip_at_odd_size() {
        let ck = toy_checkpoint();
        let mut r = rng::seeded(5);
        let image = rng::uniform(&mut r, &[3, 21, 35], 0.02, 0.98);
        let enc = encode_image(&ck, &image, Some(16.0), false).unwrap();
        assert_eq!(enc.header.width, 35);
        assert_eq!(enc.header.height, 21);
        assert!(enc.header.modulated());
        let (header, recon) = decode_bytes(&ck, &enc.file_bytes).unwrap();
        assert_eq!(header, enc.header);
        assert_eq!(recon.shape(), &[3, 21, 35]);
        let same = recon
            .data()
            .iter()
            .zip(enc.reconstruction.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "decoder disagrees with encoder-side reconstruction");
    }

    #[test]
    fn eval_bpp_matches_file_size() {
        let ck = toy_checkpoint();
        let mut r = rng::seeded(6);
        let image = rng::uniform(&mut r, &[3, 32, 32], 0.0, 1.0);
        let (enc, report) = eval_image(&ck, &image, None, false).unwrap();
        assert!(!enc.header.modulated());
        let expected = (enc.file_bytes.len() * 8) as f64 / (32.0 * 32.0);
        assert!((report.bpp.unwrap() - expected).abs() < 1e-9);
        assert!(report.bpp.unwrap() >= bpp_of(bitstream::HEADER_BYTES, 32, 32));
    }

    #[test]
    fn decode_rejects_foreign_model() {
        let ck = toy_checkpoint();
        let mut r = rng::seeded(7);
        let image = rng::uniform(&mut r, &[3, 16, 16], 0.1, 0.9);
        let enc = encode_image(&ck, &image, None, false).unwrap();
        let mut other = ck.clone();
        other.transforms.analysis[0].kernel.data_mut()[0] += 0.5;
        let err = decode_bytes(&other, &enc.file_bytes).unwrap_err();
        assert!(err.to_string().contains("model"));
    }

    #[test]
    fn missing_modnet_is_reported() {
        let mut ck = toy_checkpoint();
        ck.modnet = None;
        let mut r = rng::seeded(8);
        let image = rng::uniform(&mut r, &[3, 16, 16], 0.1, 0.9);
        assert!(encode_image(&ck, &image, Some(4.0), false).is_err());
        assert!(encode_image(&ck, &image, None, false).is_ok());
    }
}
