use std::sync::OnceLock;

use super::{EntropyError, RESIDUAL_MAX};
use crate::laplace;

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
pub const SCALE_LEVELS: usize = 64;
pub const SCALE_MIN: f64 = 0.11;
pub const SCALE_MAX: f64 = 256.0;

/// Tables never cover more than this many residual values on either side.
const MAX_SUPPORT: i32 = 2047;

fn log_step() -> f64 {
    (SCALE_MAX.ln() - SCALE_MIN.ln()) / (SCALE_LEVELS - 1) as f64
}

/// Scale represented by level `index` (log-spaced over `[SCALE_MIN, SCALE_MAX]`).
pub fn scale_level_value(index: usize) -> f64 {
    if index == 0 {
        SCALE_MIN
    } else if index == SCALE_LEVELS - 1 {
        SCALE_MAX
    } else {
        (SCALE_MIN.ln() + index as f64 * log_step()).exp()
    }
}

/// Nearest level in the log domain. Deterministic in the bits of `scale`.
pub fn scale_level(scale: f64) -> usize {
    if !(scale > SCALE_MIN) {
        return 0;
    }
    let idx = ((scale.ln() - SCALE_MIN.ln()) / log_step()).round();
    (idx as usize).min(SCALE_LEVELS - 1)
}

/// Integer frequency table over `[-support, support]` plus a trailing escape
/// symbol for residuals beyond the support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    symbol_offset: i32,
    cumulative: Vec<u32>,
}

impl CdfTable {
    pub fn symbol_offset(&self) -> i32 {
        self.symbol_offset
    }

    pub fn support(&self) -> i32 {
        -self.symbol_offset
    }

    pub fn cumulative_counts(&self) -> &[u32] {
        &self.cumulative
    }

    /// Number of symbols including the escape symbol.
    pub fn num_symbols(&self) -> usize {
        self.cumulative.len() - 1
    }

    pub fn escape_index(&self) -> usize {
        self.num_symbols() - 1
    }

    /// Symbol index of residual `r`, or `None` when it needs the escape.
    pub fn index_of(&self, r: i32) -> Option<usize> {
        (r.abs() <= self.support()).then(|| (r - self.symbol_offset) as usize)
    }

    pub fn residual_of(&self, index: usize) -> i32 {
        index as i32 + self.symbol_offset
    }

    pub fn cum(&self, index: usize) -> u32 {
        self.cumulative[index]
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cumulative[index + 1] - self.cumulative[index]
    }

    pub fn count_of(&self, r: i32) -> u32 {
        self.freq(self.index_of(r).unwrap_or(self.escape_index()))
    }

    /// Symbol whose cumulative interval contains `target`.
    pub fn lookup(&self, target: u32) -> usize {
        self.cumulative.partition_point(|&c| c <= target) - 1
    }

    /// Ideal code length of `r` in bits, including the raw escape payload.
    pub fn cost_bits(&self, r: i32) -> f64 {
        match self.index_of(r) {
            Some(i) => PROB_BITS as f64 - (self.freq(i) as f64).log2(),
            None => 2.0 * PROB_BITS as f64 - (self.freq(self.escape_index()) as f64).log2(),
        }
    }
}

fn support_for(scale: f64) -> i32 {
    // Tail mass beyond `support + 0.5` stays below 2^-16.
    let k = (scale * PROB_BITS as f64 * std::f64::consts::LN_2).ceil() as i32;
    k.clamp(1, MAX_SUPPORT.min(RESIDUAL_MAX))
}

/// Frequencies proportional to the Laplace bin masses, floor-rounded with a
/// minimum count of one; the rounding remainder goes to the zero bin so the
/// table stays symmetric and sums to exactly `PROB_TOTAL`.
pub fn build_cdf(level: usize) -> Result<CdfTable, EntropyError> {
    if level >= SCALE_LEVELS {
        return Err(EntropyError::UnknownLevel(level));
    }
    let scale = scale_level_value(level);
    let support = support_for(scale);
    let in_range = (2 * support + 1) as usize;
    let nsym = in_range + 1;
    let budget = (PROB_TOTAL as usize - nsym) as f64;
    let mut freqs = vec![0u32; nsym];
    for k in 0..=support {
        let mass = laplace::bin_mass(k as f64, scale);
        let f = 1 + (mass * budget).floor() as u32;
        freqs[(support + k) as usize] = f;
        freqs[(support - k) as usize] = f;
    }
    let tail = 2.0 * 0.5 * (-(support as f64 + 0.5) / scale).exp();
    freqs[in_range] = 1 + (tail * budget).floor() as u32;
    let used: u32 = freqs.iter().sum();
    freqs[support as usize] += PROB_TOTAL - used;
    let mut cumulative = Vec::with_capacity(nsym + 1);
    let mut acc = 0u32;
    cumulative.push(0);
    for f in freqs {
        acc += f;
        cumulative.push(acc);
    }
    debug_assert_eq!(acc, PROB_TOTAL);
    Ok(CdfTable {
        symbol_offset: -support,
        cumulative,
    })
}

/// All level tables, built once and shared read-only.
pub struct CdfBank {
    tables: Vec<CdfTable>,
}

impl CdfBank {
    pub fn table(&self, level: usize) -> Result<&CdfTable, EntropyError> {
        self.tables.get(level).ok_or(EntropyError::UnknownLevel(level))
    }

    /// Table for the level nearest to `scale`.
    pub fn for_scale(&self, scale: f64) -> &CdfTable {
        &self.tables[scale_level(scale)]
    }
}

pub fn cdf_bank() -> &'static CdfBank {
    static BANK: OnceLock<CdfBank> = OnceLock::new();
    BANK.get_or_init(|| CdfBank {
        tables: (0..SCALE_LEVELS).map(|l| build_cdf(l).expect("level in range")).collect(),
    })
}
