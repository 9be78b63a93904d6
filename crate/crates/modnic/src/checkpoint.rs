//! The `MNCK` checkpoint container.
//!
//! Layout: magic `MNCK`, version u8, tensor count u32 BE, then per tensor a
//! name (u16 BE length + UTF-8), rank u8, dims u32 BE, dtype u8 (0 = f64),
//! and the values as little-endian f64. A config echo (u32 BE length +
//! UTF-8 `key = value` text) closes the file. Loading rebuilds the network
//! skeleton from the echoed config, then fills tensors by canonical name so
//! a round trip is bit-identical.

use anyhow::{anyhow, bail, Context, Result};

use modnic_core::density::DensityParams;
use modnic_core::modnet::ModNetParams;
use modnic_core::rng;
use modnic_core::tensor::Tensor;
use modnic_core::trainer::{Checkpoint, TrainConfig};
use modnic_core::transforms::TransformParams;

pub const MAGIC: [u8; 4] = *b"MNCK";
pub const VERSION: u8 = 1;
const DTYPE_F64: u8 = 0;
pub const STEP_TENSOR: &str = "meta.step";

fn transform_names(p: &TransformParams) -> Vec<String> {
    let mut out = Vec::new();
    for (prefix, layers) in [("analysis", &p.analysis), ("synthesis", &p.synthesis)] {
        for i in 0..layers.len() {
            out.push(format!("{prefix}.{i}.kernel"));
            out.push(format!("{prefix}.{i}.bias"));
        }
    }
    out
}

fn density_names(p: &DensityParams) -> Vec<String> {
    let mut out = Vec::new();
    for (i, stage) in p.stages.iter().enumerate() {
        out.push(format!("density.stage{i}.hhat"));
        out.push(format!("density.stage{i}.bias"));
        if stage.gate.is_some() {
            out.push(format!("density.stage{i}.gate"));
        }
    }
    out
}

fn modnet_names(p: &ModNetParams) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..p.convs.len() {
        out.push(format!("modnet.conv{i}.kernel"));
        out.push(format!("modnet.conv{i}.bias"));
    }
    for i in 0..p.modulators.len() {
        for field in ["h1", "b1", "h2", "b2", "h3", "b3"] {
            out.push(format!("modnet.bm{i}.{field}"));
        }
    }
    out
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_be_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.push(DTYPE_F64);
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut names = transform_names(&ck.transforms);
    names.extend(density_names(&ck.density));
    let mut tensors: Vec<&Tensor> = ck.transforms.params();
    tensors.extend(ck.density.params());
    if let Some(m) = &ck.modnet {
        names.extend(modnet_names(m));
        tensors.extend(m.params());
    }
    assert_eq!(names.len(), tensors.len(), "name list out of sync with params");

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&((names.len() + 1) as u32).to_be_bytes());
    for (name, tensor) in names.iter().zip(tensors.iter()) {
        push_tensor(&mut out, name, tensor.shape(), tensor.data());
    }
    push_tensor(&mut out, STEP_TENSOR, &[1], &[ck.step as f64]);
    let echo = ck.config.echo();
    out.extend_from_slice(&(echo.len() as u32).to_be_bytes());
    out.extend_from_slice(echo.as_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!("checkpoint truncated at byte {}", self.pos);
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        bail!("bad checkpoint magic");
    }
    if cur.u8()? != VERSION {
        bail!("unsupported checkpoint version");
    }
    let count = cur.u32()? as usize;
    let mut entries: Vec<(String, Entry)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .context("tensor name is not UTF-8")?
            .to_string();
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        if cur.u8()? != DTYPE_F64 {
            bail!("tensor {name}: unsupported dtype");
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if entries.iter().any(|(n, _)| *n == name) {
            bail!("duplicate tensor {name}");
        }
        entries.push((name, Entry { shape, data }));
    }
    let echo_len = cur.u32()? as usize;
    let echo = std::str::from_utf8(cur.take(echo_len)?).context("config echo is not UTF-8")?;
    if cur.pos != bytes.len() {
        bail!("{} trailing bytes after config echo", bytes.len() - cur.pos);
    }
    let config = TrainConfig::parse(echo).map_err(|e| anyhow!("config echo: {e}"))?;

    // Values below are overwritten; the seed only feeds throwaway init noise.
    let mut r = rng::seeded(0);
    let mut transforms = TransformParams::toy(config.latent_channels, &mut r);
    let mut density = DensityParams::init(config.latent_channels, &mut r);
    let has_modnet = entries.iter().any(|(n, _)| n.starts_with("modnet."));
    let mut modnet =
        has_modnet.then(|| ModNetParams::init(config.latent_channels, config.modulator_width, &mut r));

    let mut names = transform_names(&transforms);
    names.extend(density_names(&density));
    let mut slots: Vec<&mut Tensor> = transforms.params_mut();
    slots.extend(density.params_mut());
    if let Some(m) = &mut modnet {
        names.extend(modnet_names(m));
        slots.extend(m.params_mut());
    }
    if count != names.len() + 1 {
        bail!("expected {} tensors, found {count}", names.len() + 1);
    }

    let lookup = |name: &str| -> Result<&Entry> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| anyhow!("missing tensor {name}"))
    };
    for (name, slot) in names.iter().zip(slots.into_iter()) {
        let entry = lookup(name)?;
        if entry.shape != slot.shape() {
            bail!("tensor {name}: shape {:?} does not match expected {:?}", entry.shape, slot.shape());
        }
        slot.data_mut().copy_from_slice(&entry.data);
    }
    let step_entry = lookup(STEP_TENSOR)?;
    if step_entry.shape != [1] {
        bail!("tensor {STEP_TENSOR}: expected a single value");
    }
    let step = step_entry.data[0] as u64;

    Ok(Checkpoint { transforms, density, modnet, config, step })
}

pub fn save(ck: &Checkpoint, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, to_bytes(ck)).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Hash of the serialized model, embedded in bitstreams so a decoder can
/// refuse payloads produced under a different checkpoint.
pub fn model_hash(ck: &Checkpoint) -> u32 {
    crate::bitstream::fnv1a(&to_bytes(ck))
}
