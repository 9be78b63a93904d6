//! Carry-propagating range coder over quantized cumulative tables.
//!
//! Layout is pinned so the bitstream is implementation-independent: 64-bit
//! low accumulator with a 32-bit active window, 32-bit range starting at
//! 0xFFFF_FFFF, byte-at-a-time renormalization whenever range drops below
//! 2^24, and an 8-byte flush (four bytes of low, four zero pad bytes the
//! decoder may read while priming). A carry out of the low window increments
//! the already-emitted byte tail in place.

use alloc::vec::Vec;

use crate::density::CdfTables;
use crate::math;
use crate::transforms::{LatentCode, LATENT_BOUND};

const RENORM_LIMIT: u32 = 1 << 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CoderError {
    /// Decoder needed another byte at this input position.
    TruncatedStream { position: usize },
    /// A symbol fell outside the table support; upstream clamping failed.
    SymbolOutOfSupport { value: i64 },
    /// Table does not cover the requested channel.
    MissingChannel { channel: usize },
}

impl core::fmt::Display for CoderError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CoderError::TruncatedStream { position } => {
                write!(f, "bitstream truncated at byte {position}")
            }
            CoderError::SymbolOutOfSupport { value } => {
                write!(f, "symbol {value} outside coder support")
            }
            CoderError::MissingChannel { channel } => {
                write!(f, "no cdf table for channel {channel}")
            }
        }
    }
}

impl core::error::Error for CoderError {}

/// Streaming encoder. Call [`RangeEncoder::encode`] per symbol, then
/// [`RangeEncoder::finish`].
pub struct RangeEncoder {
    low: u64,
    range: u32,
    bytes: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, bytes: Vec::new() }
    }

    /// Narrow the interval to [cum_lo, cum_hi) out of 2^precision. The top
    /// symbol (cum_hi == 2^precision) takes the whole division remainder, so
    /// it never loses probability mass to truncation.
    pub fn encode(&mut self, cum_lo: u32, cum_hi: u32, precision: u32) {
        debug_assert!(cum_lo < cum_hi && cum_hi <= 1 << precision);
        let r = self.range >> precision;
        self.low += r as u64 * cum_lo as u64;
        if cum_hi == 1 << precision {
            self.range -= r * cum_lo;
        } else {
            self.range = r * (cum_hi - cum_lo);
        }
        if self.low > u32::MAX as u64 {
            self.propagate_carry();
            self.low &= u32::MAX as u64;
        }
        while self.range < RENORM_LIMIT {
            self.bytes.push((self.low >> 24) as u8);
            self.low = (self.low << 8) & u32::MAX as u64;
            self.range <<= 8;
        }
    }

    fn propagate_carry(&mut self) {
        for b in self.bytes.iter_mut().rev() {
            if *b == 0xFF {
                *b = 0;
            } else {
                *b += 1;
                return;
            }
        }
        unreachable!("carry cannot escape the emitted prefix");
    }

    /// Flush and return the payload bytes.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.bytes.push((self.low >> 24) as u8);
            self.low = (self.low << 8) & u32::MAX as u64;
        }
        self.bytes.extend_from_slice(&[0, 0, 0, 0]);
        self.bytes
    }
}

/// Streaming decoder over a byte slice.
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self, CoderError> {
        let mut dec = RangeDecoder { code: 0, range: u32::MAX, bytes, pos: 0 };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, CoderError> {
        let b = self
            .bytes
            .get(self.pos)
            .copied()
            .ok_or(CoderError::TruncatedStream { position: self.pos })?;
        self.pos += 1;
        Ok(b)
    }

    /// Decode one symbol index against a cumulative table with the given
    /// precision. Mirrors [`RangeEncoder::encode`] exactly.
    pub fn decode(&mut self, cum: &[u32], precision: u32) -> Result<usize, CoderError> {
        let total: u32 = 1 << precision;
        let r = self.range >> precision;
        let val = (self.code / r).min(total - 1);
        // cum is strictly increasing with cum[0] = 0, so the partition point
        // of `cum[s+1] <= val` is the decoded symbol.
        let symbol = cum[1..].partition_point(|&c| c <= val);
        let (lo, hi) = (cum[symbol], cum[symbol + 1]);
        self.code -= r * lo;
        if hi == total {
            self.range -= r * lo;
        } else {
            self.range = r * (hi - lo);
        }
        while self.range < RENORM_LIMIT {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

fn support_index(symbol: i32) -> Result<usize, CoderError> {
    if !(-LATENT_BOUND..=LATENT_BOUND).contains(&symbol) {
        return Err(CoderError::SymbolOutOfSupport { value: symbol as i64 });
    }
    Ok((symbol + LATENT_BOUND) as usize)
}

/// Encode a latent code channel-major, row-major within each channel (the
/// order the symbols are already stored in).
pub fn encode_symbols(code: &LatentCode, tables: &CdfTables) -> Result<Vec<u8>, CoderError> {
    let plane = code.height * code.width;
    let mut enc = RangeEncoder::new();
    for (i, &sym) in code.symbols.iter().enumerate() {
        let channel = i / plane;
        let table = tables
            .per_channel
            .get(channel)
            .ok_or(CoderError::MissingChannel { channel })?;
        let s = support_index(sym)?;
        enc.encode(table.cum[s], table.cum[s + 1], tables.precision);
    }
    Ok(enc.finish())
}

/// Decode `channels * height * width` symbols written by [`encode_symbols`].
pub fn decode_symbols(
    bytes: &[u8],
    channels: usize,
    height: usize,
    width: usize,
    tables: &CdfTables,
) -> Result<Vec<i32>, CoderError> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        let table = tables
            .per_channel
            .get(c)
            .ok_or(CoderError::MissingChannel { channel: c })?;
        for _ in 0..height * width {
            let s = dec.decode(&table.cum, tables.precision)?;
            out.push(s as i32 - LATENT_BOUND);
        }
    }
    Ok(out)
}

/// Information content of the symbols under the quantized tables, in bits.
pub fn ideal_bits(code: &LatentCode, tables: &CdfTables) -> f64 {
    let plane = code.height * code.width;
    let total = (1u64 << tables.precision) as f64;
    code.symbols
        .iter()
        .enumerate()
        .map(|(i, &sym)| {
            let table = &tables.per_channel[i / plane];
            let s = (sym + LATENT_BOUND) as usize;
            -math::log2(table.freq(s) as f64 / total)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::QuantizedCdfTable;
    use crate::density;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn table_from_freqs(freqs: &[u32]) -> QuantizedCdfTable {
        let mut cum = alloc::vec![0u32];
        let mut acc = 0;
        for &f in freqs {
            acc += f;
            cum.push(acc);
        }
        assert_eq!(acc, 1 << 16);
        QuantizedCdfTable { cum }
    }

    fn roundtrip_raw(freqs: &[u32], symbols: &[usize]) -> Vec<u8> {
        let table = table_from_freqs(freqs);
        let mut enc = RangeEncoder::new();
        for &s in symbols {
            enc.encode(table.cum[s], table.cum[s + 1], 16);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for (i, &s) in symbols.iter().enumerate() {
            assert_eq!(dec.decode(&table.cum, 16).unwrap(), s, "symbol {i}");
        }
        bytes
    }

    #[test]
    fn empty_stream_is_flush_only() {
        let bytes = RangeEncoder::new().finish();
        assert_eq!(bytes.len(), 8);
        assert!(RangeDecoder::new(&bytes).is_ok());
    }

    #[test]
    fn half_probability_symbols_near_ideal() {
        // 1000 coin-flip symbols at exactly p = 1/2: ideal 125 bytes.
        let freqs = [1u32 << 15, 1 << 15];
        let mut r = rng::seeded(41);
        let symbols: Vec<usize> = (0..1000).map(|_| (r.random::<u32>() & 1) as usize).collect();
        let bytes = roundtrip_raw(&freqs, &symbols);
        assert!(bytes.len() >= 125, "{} below entropy", bytes.len());
        assert!(bytes.len() <= 125 + 16, "{} too large", bytes.len());
    }

    #[test]
    fn degenerate_peaked_table_roundtrips() {
        // One symbol holds nearly all mass, everything else floored to 1.
        let mut freqs = alloc::vec![1u32; 129];
        freqs[64] = (1 << 16) - 128;
        let mut symbols = alloc::vec![64usize; 500];
        symbols[17] = 0;
        symbols[400] = 128;
        roundtrip_raw(&freqs, &symbols);
    }

    #[test]
    fn carry_propagation_survives_ff_runs() {
        // A top-heavy two-symbol table drives low toward the interval top,
        // which exercises the carry path over long encodes.
        let freqs = [1u32, (1 << 16) - 1];
        let symbols = alloc::vec![1usize; 50_000];
        roundtrip_raw(&freqs, &symbols);
    }

    #[test]
    fn truncated_stream_reports_position() {
        let freqs = [1u32 << 14, 3 << 14];
        let symbols: Vec<usize> = (0..64).map(|i| i % 2).collect();
        let table = table_from_freqs(&freqs);
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            enc.encode(table.cum[s], table.cum[s + 1], 16);
        }
        let bytes = enc.finish();
        let cut = &bytes[..4];
        let mut dec = RangeDecoder::new(cut).unwrap();
        let mut err = None;
        for _ in 0..symbols.len() {
            match dec.decode(&table.cum, 16) {
                Ok(_) => {}
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        assert_eq!(err, Some(CoderError::TruncatedStream { position: 4 }));
    }

    #[test]
    fn latent_roundtrip_with_density_tables() {
        let mut r = rng::seeded(42);
        let params = density::DensityParams::init(4, &mut r);
        let tables = density::build_tables(&params, 16);
        let mut symbols = Vec::new();
        for _ in 0..4 * 3 * 3 {
            symbols.push((r.random::<u32>() % 11) as i32 - 5);
        }
        let code = LatentCode {
            symbols: symbols.clone(),
            channels: 4,
            height: 3,
            width: 3,
            image_height: 48,
            image_width: 48,
        };
        let bytes = encode_symbols(&code, &tables).unwrap();
        let back = decode_symbols(&bytes, 4, 3, 3, &tables).unwrap();
        assert_eq!(back, symbols);
        let ideal = ideal_bits(&code, &tables);
        assert!((bytes.len() * 8) as f64 <= ideal * 1.002 + 128.0);
    }

    #[test]
    fn out_of_support_symbol_rejected() {
        let mut r = rng::seeded(43);
        let params = density::DensityParams::init(1, &mut r);
        let tables = density::build_tables(&params, 16);
        let code = LatentCode {
            symbols: alloc::vec![LATENT_BOUND + 1],
            channels: 1,
            height: 1,
            width: 1,
            image_height: 16,
            image_width: 16,
        };
        assert_eq!(
            encode_symbols(&code, &tables),
            Err(CoderError::SymbolOutOfSupport { value: (LATENT_BOUND + 1) as i64 })
        );
    }

    #[test]
    fn encoding_is_pure() {
        let freqs = [9000u32, 40000, (1 << 16) - 49000];
        let symbols = [0usize, 2, 1, 1, 0, 2, 2, 2, 1];
        let a = roundtrip_raw(&freqs, &symbols);
        let b = roundtrip_raw(&freqs, &symbols);
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn roundtrip_random_tables(seed in 0u64..10_000, nsym in 1usize..40, count in 0usize..3000) {
            let mut r = rng::seeded(seed);
            // Random pmf through the production quantizer, so every symbol
            // keeps nonzero mass.
            let raw = rng::uniform(&mut r, &[nsym], 0.0, 1.0);
            let total: f64 = raw.data().iter().sum();
            let pmf: Vec<f64> = raw.data().iter().map(|&v| v / total).collect();
            let freqs = density::quantize_pmf(&pmf, 16);
            let table = table_from_freqs(&freqs);
            let symbols: Vec<usize> = (0..count).map(|_| (r.random::<u64>() as usize) % nsym).collect();
            let mut enc = RangeEncoder::new();
            for &s in &symbols {
                enc.encode(table.cum[s], table.cum[s + 1], 16);
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes).unwrap();
            for &s in &symbols {
                prop_assert_eq!(dec.decode(&table.cum, 16).unwrap(), s);
            }
        }
    }
}
