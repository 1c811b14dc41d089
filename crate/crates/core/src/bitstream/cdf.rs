//! 16-bit quantized cumulative frequency tables.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

/// Cumulative frequencies `c[0] = 0 < c[1] < ... < c[n] = 2^16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
}

impl CdfTable {
    pub fn from_cdf(cdf: Vec<u32>) -> Result<Self> {
        if cdf.len() < 2 || cdf[0] != 0 || *cdf.last().unwrap() != PROB_TOTAL {
            return Err(Error::Parameter("cdf must start at 0 and end at 65536".into()));
        }
        if cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter("cdf must be strictly increasing".into()));
        }
        Ok(Self { cdf })
    }

    /// Table proportional to positive integer weights.
    pub fn from_weights(weights: &[u32]) -> Result<Self> {
        let total: f64 = weights.iter().map(|&w| w as f64).sum();
        let masses: Vec<f64> = weights.iter().map(|&w| w as f64 / total).collect();
        build_cdf(&masses)
    }

    pub fn symbol_count(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cdf
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }

    pub fn interval(&self, index: usize) -> Option<(u32, u32)> {
        (index < self.symbol_count()).then(|| (self.cdf[index], self.freq(index)))
    }

    /// Quantized probability of `index`.
    pub fn probability(&self, index: usize) -> f64 {
        self.freq(index) as f64 / PROB_TOTAL as f64
    }

    /// `-log2 q` for the quantized probability of `index`.
    pub fn bits(&self, index: usize) -> f64 {
        -self.probability(index).log2()
    }

    /// Index `s` with `cdf[s] <= target < cdf[s + 1]`.
    pub fn find(&self, target: u32) -> usize {
        debug_assert!(target < PROB_TOTAL);
        self.cdf.partition_point(|&c| c <= target) - 1
    }
}

/// Quantizes a probability mass vector to a 16-bit CDF.
///
/// Counts are the largest-remainder rounding of `p * 2^16`, so each is within
/// one of its exact value; symbols left at zero then take one count from the
/// most probable symbol. Only integer arithmetic follows the initial scaling,
/// so tables are identical on every platform given identical masses.
pub fn build_cdf(masses: &[f64]) -> Result<CdfTable> {
    let n = masses.len();
    if n == 0 || n > PROB_TOTAL as usize / 2 {
        return Err(Error::Range(format!("cannot quantize a {n}-symbol distribution to 16 bits")));
    }
    if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(Error::Parameter("masses must be finite and non-negative".into()));
    }
    // Largest-remainder rounding of the normalized masses to 2^16 counts.
    let sum: f64 = masses.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Parameter("masses sum to zero".into()));
    }
    let scaled: Vec<f64> = masses.iter().map(|&m| m / sum * PROB_TOTAL as f64).collect();
    let mut freq: Vec<i64> = scaled.iter().map(|v| v.floor() as i64).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| (scaled[b] - freq[b] as f64).total_cmp(&(scaled[a] - freq[a] as f64)).then(a.cmp(&b)));
    let short = PROB_TOTAL as i64 - freq.iter().sum::<i64>();
    for &i in order.iter().take(short.max(0) as usize) {
        freq[i] += 1;
    }
    // Zero-count symbols get one count each, stolen from the argmax.
    for i in 0..n {
        if freq[i] == 0 {
            let arg = (0..n).max_by(|&a, &b| freq[a].cmp(&freq[b]).then(b.cmp(&a))).unwrap();
            if freq[arg] <= 1 {
                return Err(Error::Range("too many symbols for 16-bit precision".into()));
            }
            freq[arg] -= 1;
            freq[i] = 1;
        }
    }
    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for f in freq {
        acc += f as u32;
        cdf.push(acc);
    }
    Ok(CdfTable { cdf })
}
