//! Synthetic training and evaluation images.
//!
//! Four families with different rate behavior: smooth `gradients`, piecewise
//! `blobs`, two-color `checker`, and `bandnoise` (sinusoid mixes around mid
//! gray). Image `i` of a run draws from an rng substream keyed on the seed,
//! the kind, and `i`, so datasets are reproducible file for file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::Rng;

use modnic_core::rng::{self, SeedRng};
use modnic_core::Tensor;

use crate::ppm::Ppm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Blobs,
    Gradients,
    Checker,
    Bandnoise,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Blobs, Kind::Gradients, Kind::Checker, Kind::Bandnoise];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Blobs => "blobs",
            Kind::Gradients => "gradients",
            Kind::Checker => "checker",
            Kind::Bandnoise => "bandnoise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Kind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    fn stream_tag(self) -> u64 {
        match self {
            Kind::Blobs => 1,
            Kind::Gradients => 2,
            Kind::Checker => 3,
            Kind::Bandnoise => 4,
        }
    }
}

fn image_rng(kind: Kind, seed: u64, index: usize) -> SeedRng {
    rng::substream(seed, kind.stream_tag() << 32 | index as u64)
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn blobs(r: &mut SeedRng, size: usize) -> Vec<u8> {
    let background: [f64; 3] = std::array::from_fn(|_| r.random_range(40.0..216.0));
    struct Blob {
        cx: f64,
        cy: f64,
        radius: f64,
        color: [f64; 3],
    }
    let blobs: Vec<Blob> = (0..r.random_range(3..=6))
        .map(|_| Blob {
            cx: r.random_range(0.0..size as f64),
            cy: r.random_range(0.0..size as f64),
            radius: r.random_range(size as f64 * 0.12..size as f64 * 0.35),
            color: std::array::from_fn(|_| r.random_range(0.0..256.0)),
        })
        .collect();
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let mut px = background;
            for b in &blobs {
                let d2 = (x as f64 - b.cx).powi(2) + (y as f64 - b.cy).powi(2);
                let w = (-d2 / (b.radius * b.radius)).exp();
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - w) + b.color[c] * w;
                }
            }
            out.extend(px.map(to_byte));
        }
    }
    out
}

fn gradients(r: &mut SeedRng, size: usize) -> Vec<u8> {
    let theta: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let ends: [(f64, f64); 3] =
        std::array::from_fn(|_| (r.random_range(0.0..256.0), r.random_range(0.0..256.0)));
    let span = size as f64 - 1.0;
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            // Projection onto the gradient axis, normalized to [0,1].
            let t = ((x as f64 * dx + y as f64 * dy) / (span * (dx.abs() + dy.abs()))) + 0.5;
            for (lo, hi) in ends {
                out.push(to_byte(lo + (hi - lo) * t.clamp(0.0, 1.0)));
            }
        }
    }
    out
}

fn checker(r: &mut SeedRng, size: usize) -> Vec<u8> {
    let cell = [2usize, 4, 8][r.random_range(0..3)];
    let a: [u8; 3] = std::array::from_fn(|_| r.random_range(0..=255));
    let b = a.map(|v| 255 - v);
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let flip = (x / cell + y / cell) % 2 == 0;
            out.extend(if flip { a } else { b });
        }
    }
    out
}

fn bandnoise(r: &mut SeedRng, size: usize) -> Vec<u8> {
    struct Band {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: f64,
    }
    // Whole-period frequencies keep each band zero-mean over the image, and
    // the amplitude budget (3*33 + 9 < 127) rules out clipping bias.
    let per_channel: Vec<Vec<Band>> = (0..3)
        .map(|_| {
            (0..3)
                .map(|_| Band {
                    fx: r.random_range(1..=4) as f64,
                    fy: r.random_range(1..=4) as f64,
                    phase: r.random_range(0.0..std::f64::consts::TAU),
                    amp: r.random_range(10.0..33.0),
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(size * size * 3);
    let inv = std::f64::consts::TAU / size as f64;
    for y in 0..size {
        for x in 0..size {
            for bands in &per_channel {
                let mut v = 128.0;
                for b in bands {
                    v += b.amp * (inv * (b.fx * x as f64 + b.fy * y as f64) + b.phase).sin();
                }
                v += r.random_range(-9.0..9.0);
                out.push(to_byte(v));
            }
        }
    }
    out
}

/// Image `index` of the (kind, seed) stream as an RGB raster.
pub fn generate(kind: Kind, size: usize, seed: u64, index: usize) -> Ppm {
    assert!(size % 16 == 0, "size must be divisible by 16");
    let mut r = image_rng(kind, seed, index);
    let samples = match kind {
        Kind::Blobs => blobs(&mut r, size),
        Kind::Gradients => gradients(&mut r, size),
        Kind::Checker => checker(&mut r, size),
        Kind::Bandnoise => bandnoise(&mut r, size),
    };
    Ppm { gray: false, width: size, height: size, samples }
}

/// Write `count` images into `dir`, named `<kind>_<index>.ppm`.
pub fn write_dataset(kind: Kind, count: usize, size: usize, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    if size == 0 || size % 16 != 0 {
        bail!("size must be a positive multiple of 16, got {size}");
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(format!("{}_{i:04}.ppm", kind.as_str()));
        generate(kind, size, seed, i).save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Load every `.ppm`/`.pgm` under `dir` (sorted by file name) as [3,H,W]
/// tensors in [0,1].
pub fn load_dataset(dir: &Path) -> Result<Vec<Tensor>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(p.extension().and_then(|e| e.to_str()), Some("ppm") | Some("pgm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .ppm or .pgm files in {}", dir.display());
    }
    files.iter().map(|p| Ok(Ppm::load(p)?.to_tensor())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_seed_is_byte_identical() {
        for kind in Kind::ALL {
            let a = generate(kind, 32, 5, 3).to_bytes();
            let b = generate(kind, 32, 5, 3).to_bytes();
            assert_eq!(a, b, "{}", kind.as_str());
            let c = generate(kind, 32, 6, 3).to_bytes();
            assert_ne!(a, c, "{} ignores the seed", kind.as_str());
        }
    }

    #[test]
    fn checker_has_exactly_two_colors() {
        for index in 0..8 {
            let img = generate(Kind::Checker, 32, 11, index);
            let colors: HashSet<[u8; 3]> =
                img.samples.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            assert_eq!(colors.len(), 2, "image {index}");
        }
    }

    #[test]
    fn bandnoise_mean_is_mid_gray() {
        let mut total = 0.0;
        let mut n = 0usize;
        for index in 0..100 {
            let img = generate(Kind::Bandnoise, 16, 2, index);
            total += img.samples.iter().map(|&v| v as f64).sum::<f64>();
            n += img.samples.len();
        }
        let mean = total / n as f64;
        assert!((mean - 128.0).abs() < 5.0, "mean={mean}");
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_dataset(Kind::Gradients, 3, 32, 9, dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let tensors = load_dataset(dir.path()).unwrap();
        assert_eq!(tensors.len(), 3);
        for t in &tensors {
            assert_eq!(t.shape(), &[3, 32, 32]);
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(Kind::Gradients, 3, 32, 9, dir2.path()).unwrap();
        for (a, b) in paths.iter().zip(load_dataset(dir2.path()).unwrap()) {
            let first = Ppm::load(a).unwrap();
            assert_eq!(first.to_tensor().data(), b.data());
        }
        assert!(write_dataset(Kind::Blobs, 1, 20, 0, dir.path()).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in Kind::ALL {
            assert_eq!(Kind::parse(kind.as_str()), Some(kind));
        }
        assert_eq!(Kind::parse("noise"), None);
    }
}
