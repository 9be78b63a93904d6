//! Frozen artifacts pin the version-1 file formats: a checkpoint, a
//! bitstream encoded with it, and the reconstruction it must decode to.
//! These bytes may never change while the containers stay at version 1;
//! regenerate them only alongside a version bump, via the ignored test.

use std::path::PathBuf;

use modnic::{bitstream, checkpoint, gendata, pipeline, ppm::Ppm};
use modnic_core::density::DensityParams;
use modnic_core::modnet::ModNetParams;
use modnic_core::rng;
use modnic_core::tensor::Tensor;
use modnic_core::trainer::{Checkpoint, TrainConfig};
use modnic_core::transforms::TransformParams;

const GOLDEN_HASH: u32 = 0xb7cf_0f17;
const GOLDEN_LAMBDA: f32 = 16.0;

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn golden_checkpoint() -> Checkpoint {
    let mut r = rng::substream(123, 0);
    let mut config = TrainConfig::toy();
    config.latent_channels = 4;
    config.modulator_width = 3;
    Checkpoint {
        transforms: TransformParams::toy(4, &mut r),
        density: DensityParams::init(4, &mut r),
        modnet: Some(ModNetParams::init(4, 3, &mut r)),
        config,
        step: 42,
    }
}

fn golden_image() -> Tensor {
    gendata::generate(gendata::Kind::Gradients, 32, 99, 0).to_tensor()
}

#[test]
fn golden_checkpoint_loads_bit_exactly() {
    let raw = std::fs::read(golden("tiny.mnck")).expect("golden checkpoint present");
    let ck = checkpoint::from_bytes(&raw).expect("version 1 checkpoint loads");
    assert_eq!(ck.step, 42);
    assert_eq!(ck.config.latent_channels, 4);
    assert_eq!(ck.config.modulator_width, 3);
    assert!(ck.modnet.is_some());
    assert_eq!(checkpoint::to_bytes(&ck), raw, "reserialization must be bit-identical");
    assert_eq!(checkpoint::model_hash(&ck), GOLDEN_HASH, "hash algorithm drifted");
}

#[test]
fn golden_bitstream_decodes_bit_exactly() {
    let ck = checkpoint::load(&golden("tiny.mnck")).expect("golden checkpoint present");
    let stream = std::fs::read(golden("gradient.mnic")).expect("golden bitstream present");
    let (header, recon) = pipeline::decode_bytes(&ck, &stream).expect("version 1 bitstream decodes");
    assert_eq!((header.width, header.height), (32, 32));
    assert_eq!(header.lambda, GOLDEN_LAMBDA);
    assert_eq!(header.model_hash, GOLDEN_HASH);
    assert!(header.modulated());
    assert!(!header.hard_mask());

    let want = std::fs::read(golden("gradient_recon.ppm")).expect("golden reconstruction present");
    assert_eq!(Ppm::from_tensor(&recon).unwrap().to_bytes(), want, "reconstruction drifted");
}

#[test]
fn golden_encoder_is_still_reproducible() {
    let ck = golden_checkpoint();
    let enc = pipeline::encode_image(&ck, &golden_image(), Some(GOLDEN_LAMBDA as f64), false)
        .expect("encode");
    let stream = std::fs::read(golden("gradient.mnic")).expect("golden bitstream present");
    assert_eq!(enc.file_bytes, stream, "encoder output drifted from the frozen bitstream");
}

#[test]
fn golden_header_layout_is_frozen() {
    let stream = std::fs::read(golden("gradient.mnic")).expect("golden bitstream present");
    assert_eq!(&stream[..4], bitstream::MAGIC);
    assert_eq!(stream[4], bitstream::VERSION);
    let (header, payload) = bitstream::read(&stream).unwrap();
    assert_eq!(stream.len(), bitstream::HEADER_BYTES + payload.len());
    assert_eq!(header.payload_len as usize, payload.len());
}

#[test]
#[ignore = "rewrites the frozen artifacts; run only with a format version bump"]
fn regenerate_golden_files() {
    let dir = golden("");
    std::fs::create_dir_all(&dir).unwrap();
    let ck = golden_checkpoint();
    checkpoint::save(&ck, &golden("tiny.mnck")).unwrap();
    let enc = pipeline::encode_image(&ck, &golden_image(), Some(GOLDEN_LAMBDA as f64), false)
        .expect("encode");
    std::fs::write(golden("gradient.mnic"), &enc.file_bytes).unwrap();
    std::fs::write(
        golden("gradient_recon.ppm"),
        Ppm::from_tensor(&enc.reconstruction).unwrap().to_bytes(),
    )
    .unwrap();
    println!("model_hash = {:#010x}", checkpoint::model_hash(&ck));
}
