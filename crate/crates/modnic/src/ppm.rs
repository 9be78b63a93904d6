//! Binary PPM (P6) and PGM (P5) with 8-bit samples.
//!
//! The writer emits the canonical form `P6\n<w> <h>\n255\n<raw>`; files it
//! writes load back byte-identically. The reader additionally accepts
//! whitespace variations and `#` comments in the header.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use modnic_core::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ppm {
    pub gray: bool,
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB for P6, one sample per pixel for P5.
    pub samples: Vec<u8>,
}

impl Ppm {
    pub fn channels(&self) -> usize {
        if self.gray {
            1
        } else {
            3
        }
    }

    /// [3,H,W] tensor in [0,1]; a gray image is replicated over channels.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0f64; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let s = if self.gray {
                        self.samples[y * w + x]
                    } else {
                        self.samples[(y * w + x) * 3 + c]
                    };
                    data[(c * h + y) * w + x] = s as f64 / 255.0;
                }
            }
        }
        Tensor::new(&[3, h, w], data).expect("8-bit samples are finite")
    }

    /// Color image from a [3,H,W] tensor in [0,1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            bail!("expected a [3,H,W] tensor, got {s:?}");
        }
        let (h, w) = (s[1], s[2]);
        let mut samples = vec![0u8; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = t.data()[(c * h + y) * w + x];
                    let q = modnic_core::math::round(v.clamp(0.0, 1.0) * 255.0);
                    samples[(y * w + x) * 3 + c] = q as u8;
                }
            }
        }
        Ok(Ppm { gray: false, width: w, height: h, samples })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = if self.gray { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let gray = match read_token(bytes, &mut pos).as_deref() {
            Some("P6") => false,
            Some("P5") => true,
            other => bail!("not a binary PPM/PGM (magic {other:?})"),
        };
        let width: usize = parse_header_number(bytes, &mut pos, "width")?;
        let height: usize = parse_header_number(bytes, &mut pos, "height")?;
        let maxval: usize = parse_header_number(bytes, &mut pos, "maxval")?;
        if maxval != 255 {
            bail!("only 8-bit images are supported (maxval {maxval})");
        }
        if width == 0 || height == 0 {
            bail!("degenerate image {width}x{height}");
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let count = width * height * if gray { 1 } else { 3 };
        let Some(samples) = bytes.get(pos..pos + count) else {
            bail!("truncated raster: need {count} bytes");
        };
        Ok(Ppm { gray, width, height, samples: samples.to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
    }
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b' ' | b'\t' | b'\r' | b'\n' => *pos += 1,
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = read_token(bytes, pos).with_context(|| format!("missing {what}"))?;
    tok.parse().with_context(|| format!("bad {what} {tok:?}"))
}

/// Extend a [3,H,W] tensor to side multiples of `multiple` by replicating
/// the last row and column.
pub fn pad_replicate(t: &Tensor, multiple: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return t.clone();
    }
    let mut data = vec![0.0f64; c * ph * pw];
    for ci in 0..c {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                let sx = x.min(w - 1);
                data[(ci * ph + y) * pw + x] = t.data()[(ci * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(&[c, ph, pw], data).expect("padding keeps values")
}

/// Cut the top-left `h` x `w` window out of a [3,PH,PW] tensor.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    let (c, ph, pw) = (s[0], s[1], s[2]);
    assert!(h <= ph && w <= pw, "crop {h}x{w} exceeds {ph}x{pw}");
    let mut data = vec![0.0f64; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(ci * h + y) * w + x] = t.data()[(ci * ph + y) * pw + x];
            }
        }
    }
    Tensor::new(&[c, h, w], data).expect("crop keeps values")
}
