//! Range coding and the frame container.

pub mod cdf;
pub mod range_coder;

pub use cdf::{build_cdf, CdfTable, PROB_BITS, PROB_TOTAL};
pub use range_coder::{range_decode, range_encode, RangeDecoder, RangeEncoder};
pub mod codec;
pub mod container;
pub mod intra;
