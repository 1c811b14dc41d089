//! Byte-oriented range coder over 16-bit quantized CDFs.
//!
//! State is a 64-bit `low`/`range` pair. `range` is renormalized back above
//! 2^56 one byte at a time, so the per-symbol truncation of `range >> 16`
//! costs at most about 2^-40 bits. Carries out of `low` are propagated into
//! the bytes already written. `finish` writes exactly two bytes, and the
//! decoder reads exactly six implicit zero bytes past the end of a well-formed
//! stream; any other count is reported as corruption.

use crate::bitstream::cdf::{CdfTable, PROB_BITS, PROB_TOTAL};
use crate::error::{Error, Result};

const TOP: u64 = 1 << 56;
const MASK64: u128 = (1u128 << 64) - 1;
const FLUSH_BYTES: usize = 2;
const PRELOAD_BYTES: usize = 8;
const EXPECTED_PADDING: usize = PRELOAD_BYTES - FLUSH_BYTES;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u128,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u64::MAX, out: Vec::new() }
    }

    /// Encodes the interval `[cum, cum + freq)` out of `2^16`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low += r as u128 * cum as u128;
        self.range = r * freq as u64;
        if self.low > MASK64 {
            self.low &= MASK64;
            self.propagate_carry();
        }
        while self.range < TOP {
            self.out.push((self.low >> 56) as u8);
            self.low = (self.low << 8) & MASK64;
            self.range <<= 8;
        }
    }

    pub fn encode_symbol(&mut self, index: usize, table: &CdfTable) -> Result<()> {
        let (cum, freq) = table.interval(index).ok_or_else(|| {
            Error::Contract(format!("symbol index {index} outside a {}-symbol table", table.symbol_count()))
        })?;
        self.encode(cum, freq);
        Ok(())
    }

    fn propagate_carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            if *b == 0xFF {
                *b = 0;
            } else {
                *b += 1;
                return;
            }
        }
        unreachable!("carry out of the first byte: code value exceeded 1");
    }

    /// Emits the shortest value inside the final interval that has only its
    /// top 16 bits set.
    pub fn finish(mut self) -> Vec<u8> {
        let step: u128 = 1 << 48;
        let mut v = (self.low + step - 1) & !(step - 1);
        if v > MASK64 {
            v &= MASK64;
            self.propagate_carry();
        }
        self.out.push((v >> 56) as u8);
        self.out.push((v >> 48) as u8);
        self.out
    }

    /// Bytes emitted so far, excluding the flush.
    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    padding: usize,
    value: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < FLUSH_BYTES {
            return Err(Error::corrupt(0, format!("range-coded stream of {} bytes is truncated", data.len())));
        }
        let mut d = Self { data, pos: 0, padding: 0, value: 0, range: u64::MAX };
        for _ in 0..PRELOAD_BYTES {
            d.value = (d.value << 8) | d.next_byte()? as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        if let Some(&b) = self.data.get(self.pos) {
            self.pos += 1;
            Ok(b)
        } else {
            self.padding += 1;
            if self.padding > EXPECTED_PADDING {
                return Err(Error::corrupt(0, "range-coded stream ended early"));
            }
            Ok(0)
        }
    }

    /// Decodes one symbol index against `table`.
    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<usize> {
        let r = self.range >> PROB_BITS;
        let target = self.value / r;
        if target >= PROB_TOTAL as u64 {
            return Err(Error::corrupt(0, "decoder state outside the coding interval"));
        }
        let index = table.find(target as u32);
        let (cum, freq) = table.interval(index).expect("find returns a valid index");
        self.value -= r * cum as u64;
        self.range = r * freq as u64;
        if self.value >= self.range {
            return Err(Error::corrupt(0, "decoder state outside the coding interval"));
        }
        while self.range < TOP {
            self.value = (self.value << 8) | self.next_byte()? as u64;
            self.range <<= 8;
        }
        Ok(index)
    }

    /// Verifies the stream was consumed exactly.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() || self.padding != EXPECTED_PADDING {
            return Err(Error::corrupt(
                0,
                format!(
                    "stream length mismatch: consumed {} of {} bytes with {} padding bytes",
                    self.pos,
                    self.data.len(),
                    self.padding
                ),
            ));
        }
        Ok(())
    }
}

/// Encodes symbol indices, one table per symbol.
pub fn range_encode(symbols: &[usize], cdfs: &[CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(Error::Contract(format!("{} symbols but {} tables", symbols.len(), cdfs.len())));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(cdfs) {
        enc.encode_symbol(s, t)?;
    }
    Ok(enc.finish())
}

pub fn range_decode(bytes: &[u8], cdfs: &[CdfTable]) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let out = cdfs.iter().map(|t| dec.decode_symbol(t)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
