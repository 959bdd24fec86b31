//! Lossless coding of integer residuals under discretized Laplace models and
//! the on-disk bitstream container.

mod bitstream;
mod cdf;
mod range_coder;

pub use bitstream::{pack_bitstream, unpack_bitstream, BitstreamFile, BitstreamHeader, BITSTREAM_MAGIC, BITSTREAM_VERSION, HEADER_LEN};
pub use cdf::{build_cdf, cdf_bank, scale_level, scale_level_value, CdfBank, CdfTable, PROB_BITS, PROB_TOTAL, SCALE_LEVELS, SCALE_MAX, SCALE_MIN};
pub use range_coder::{decode_symbols, encode_symbols, ideal_bits, RangeDecoder, RangeEncoder};

/// Largest residual magnitude representable by the escape code.
pub const RESIDUAL_MAX: i32 = (1 << 15) - 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EntropyError {
    #[error("unknown scale level {0}")]
    UnknownLevel(usize),
    #[error("residual {0} exceeds the escape range")]
    ResidualOutOfRange(i32),
    #[error("stream truncated after {0} bytes")]
    Truncated(usize),
    #[error("corrupt stream: {0}")]
    Corrupt(&'static str),
    #[error("symbol count {symbols} does not match {tables} tables")]
    TableCountMismatch { symbols: usize, tables: usize },
    #[error("bad bitstream magic")]
    BadMagic,
    #[error("unsupported bitstream version {0}")]
    UnsupportedVersion(u16),
    #[error("bitstream length mismatch: header says {expected} payload bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },
}
