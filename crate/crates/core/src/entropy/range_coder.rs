//! 32-bit carry-less range coder (Subbotin style) over 16-bit frequencies.

use super::{CdfTable, EntropyError, PROB_BITS, RESIDUAL_MAX};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Encodes the interval `[cum, cum + freq)` of a `2^16` total.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << PROB_BITS);
        let r = self.range >> PROB_BITS;
        self.low = self.low.wrapping_add(cum * r);
        self.range = freq * r;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Residual `r` under `table`, escaping to a 16-bit sign-magnitude word.
    pub fn encode_residual(&mut self, r: i32, table: &CdfTable) -> Result<(), EntropyError> {
        match table.index_of(r) {
            Some(i) => self.encode(table.cum(i), table.freq(i)),
            None => {
                if r.abs() > RESIDUAL_MAX {
                    return Err(EntropyError::ResidualOutOfRange(r));
                }
                let esc = table.escape_index();
                self.encode(table.cum(esc), table.freq(esc));
                let word = ((r < 0) as u32) << 15 | r.unsigned_abs();
                self.encode(word, 1);
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, EntropyError> {
        let mut dec = Self {
            low: 0,
            range: u32::MAX,
            code: 0,
            data,
            pos: 0,
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8, EntropyError> {
        let b = *self.data.get(self.pos).ok_or(EntropyError::Truncated(self.data.len()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Target count in `[0, 2^16)` identifying the next symbol.
    fn target(&mut self) -> Result<u32, EntropyError> {
        self.range >>= PROB_BITS;
        let v = self.code.wrapping_sub(self.low) / self.range;
        if v >= 1 << PROB_BITS {
            return Err(EntropyError::Corrupt("target outside coding interval"));
        }
        Ok(v)
    }

    fn consume(&mut self, cum: u32, freq: u32) -> Result<(), EntropyError> {
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_residual(&mut self, table: &CdfTable) -> Result<i32, EntropyError> {
        let target = self.target()?;
        let idx = table.lookup(target);
        self.consume(table.cum(idx), table.freq(idx))?;
        if idx != table.escape_index() {
            return Ok(table.residual_of(idx));
        }
        let word = self.target()?;
        self.consume(word, 1)?;
        let mag = (word & 0x7fff) as i32;
        if mag <= table.support() {
            return Err(EntropyError::Corrupt("escape used for an in-range residual"));
        }
        Ok(if word & 0x8000 != 0 { -mag } else { mag })
    }

    pub fn bytes_consumed(&self) -> usize {
        self.pos
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// Encodes `symbols[i]` with `tables[i]`.
pub fn encode_symbols(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>, EntropyError> {
    if symbols.len() != tables.len() {
        return Err(EntropyError::TableCountMismatch {
            symbols: symbols.len(),
            tables: tables.len(),
        });
    }
    let mut enc = RangeEncoder::new();
    for (&r, table) in symbols.iter().zip(tables) {
        enc.encode_residual(r, table)?;
    }
    Ok(enc.finish())
}

/// Decodes `count` symbols; the stream must be consumed exactly.
pub fn decode_symbols(bytes: &[u8], tables: &[&CdfTable], count: usize) -> Result<Vec<i32>, EntropyError> {
    if count != tables.len() {
        return Err(EntropyError::TableCountMismatch {
            symbols: count,
            tables: tables.len(),
        });
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for table in tables {
        out.push(dec.decode_residual(table)?);
    }
    if !dec.is_exhausted() {
        return Err(EntropyError::Corrupt("trailing bytes after last symbol"));
    }
    Ok(out)
}

/// Sum of ideal code lengths under the integer tables, in bits.
pub fn ideal_bits(symbols: &[i32], tables: &[&CdfTable]) -> f64 {
    symbols.iter().zip(tables).map(|(&r, t)| t.cost_bits(r)).sum()
}
