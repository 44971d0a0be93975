//! Reference range coder over [`CdfTable`]s.
//!
//! Carry-propagating byte-oriented coder with a 32-bit range, renormalized
//! whenever the range drops below 2^24. The first output byte of this scheme
//! is always zero and is not stored; the final flush writes only as many
//! bytes as needed to identify a value inside the last interval, and the
//! decoder reads zeros past the end of the payload (at most four).

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::entropy_models::cdf::{tables_from_blob, CdfTable};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
/// Virtual zero bytes the decoder may read past the payload end.
const MAX_VIRTUAL: usize = 4;

/// Symbols together with the table each one is coded under.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolPlan {
    pub symbols: Vec<i32>,
    pub table_indexes: Vec<u32>,
}

impl SymbolPlan {
    pub fn new(symbols: Vec<i32>, table_indexes: Vec<u32>) -> Result<Self> {
        if symbols.len() != table_indexes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} symbols but {} table indexes",
                symbols.len(),
                table_indexes.len()
            )));
        }
        Ok(SymbolPlan { symbols, table_indexes })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn push(&mut self, symbol: i32, table: u32) {
        self.symbols.push(symbol);
        self.table_indexes.push(table);
    }

    /// Checks every symbol against its table's support.
    pub fn validate(&self, tables: &[CdfTable]) -> Result<()> {
        if self.symbols.len() != self.table_indexes.len() {
            return Err(Error::InvalidArgument("plan length mismatch".into()));
        }
        for (i, (&s, &t)) in self.symbols.iter().zip(&self.table_indexes).enumerate() {
            let table = tables
                .get(t as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("table index {t} at {i} out of range")))?;
            if s < table.offset || s > table.max_symbol() {
                return Err(Error::SymbolOutOfRange { index: i, symbol: s });
            }
        }
        Ok(())
    }
}

/// Streaming encoder.
#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    skip_first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            skip_first: true,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, b: u8) {
        if self.skip_first {
            self.skip_first = false;
        } else {
            self.out.push(b);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || self.low >> 32 != 0 {
            let carry = (self.low >> 32) as u8;
            let mut b = self.cache;
            loop {
                self.emit(b.wrapping_add(carry));
                b = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Encodes the symbol occupying `[cum, cum + freq)` out of `2^precision`.
    pub fn encode_raw(&mut self, cum: u32, freq: u32, precision: u8) {
        let r = self.range >> precision;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, symbol: i32, table: &CdfTable) -> Result<()> {
        let i = symbol as i64 - table.offset as i64;
        if i < 0 || i >= table.num_symbols() as i64 {
            return Err(Error::SymbolOutOfRange { index: 0, symbol });
        }
        let i = i as usize;
        self.encode_raw(table.cdf[i], table.freq(i), table.precision);
        Ok(())
    }

    /// Flushes with the shortest tail that still pins down the final interval.
    pub fn finish(mut self) -> Vec<u8> {
        let end = self.low + self.range as u64;
        let mut kept = 4;
        for k in 0..=4u32 {
            let shift = 32 - 8 * k;
            let unit = 1u64 << shift;
            let v = self.low.div_ceil(unit) * unit;
            if v < end {
                self.low = v;
                kept = k as usize;
                break;
            }
        }
        for _ in 0..5 {
            self.shift_low();
        }
        let n = self.out.len() - (4 - kept);
        self.out.truncate(n);
        self.out
    }
}

/// Streaming decoder.
#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        if self.pos > self.data.len() + MAX_VIRTUAL {
            return Err(Error::Truncated);
        }
        Ok(b)
    }

    /// Decodes one symbol position against a cumulative table.
    pub fn decode_raw(&mut self, cdf: &[u32], precision: u8) -> Result<usize> {
        let r = self.range >> precision;
        let total = 1u32 << precision;
        let value = (self.code / r).min(total - 1);
        // Last index with cdf[i] <= value.
        let i = cdf.partition_point(|&c| c <= value) - 1;
        let i = i.min(cdf.len() - 2);
        self.code = self.code.wrapping_sub(r * cdf[i]);
        self.range = r * (cdf[i + 1] - cdf[i]);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(i)
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32> {
        let i = self.decode_raw(&table.cdf, table.precision)?;
        Ok(table.offset + i as i32)
    }
}

/// Encodes a whole plan.
pub fn encode(plan: &SymbolPlan, tables: &[CdfTable]) -> Result<Vec<u8>> {
    plan.validate(tables)?;
    let mut enc = RangeEncoder::new();
    for (&s, &t) in plan.symbols.iter().zip(&plan.table_indexes) {
        enc.encode(s, &tables[t as usize])?;
    }
    Ok(enc.finish())
}

/// Decodes `indexes.len()` symbols.
pub fn decode(bytes: &[u8], indexes: &[u32], tables: &[CdfTable]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(indexes.len());
    for &t in indexes {
        let table = tables
            .get(t as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("table index {t} out of range")))?;
        out.push(dec.decode(table)?);
    }
    Ok(out)
}

/// Which implementation performs entropy coding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoderBackend {
    #[default]
    Reference,
    Accelerated,
}

impl FromStr for CoderBackend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(CoderBackend::Reference),
            "accelerated" => Ok(CoderBackend::Accelerated),
            other => Err(Error::Config(format!("unknown coder `{other}` (expected reference | accelerated)"))),
        }
    }
}

/// An entropy coder over flat buffers, the shape shared by every backend.
pub trait EntropyCoder: Send + Sync {
    fn name(&self) -> &'static str;
    fn encode(&self, plan: &SymbolPlan, tables: &[CdfTable]) -> Result<Vec<u8>>;
    fn decode(&self, bytes: &[u8], indexes: &[u32], tables: &[CdfTable]) -> Result<Vec<i32>>;

    /// Encodes from the serialized tables blob.
    fn encode_flat(&self, symbols: &[i32], indexes: &[u32], tables_blob: &[u8]) -> Result<Vec<u8>> {
        let tables = tables_from_blob(tables_blob)?;
        let plan = SymbolPlan::new(symbols.to_vec(), indexes.to_vec())?;
        self.encode(&plan, &tables)
    }

    fn decode_flat(&self, bytes: &[u8], indexes: &[u32], tables_blob: &[u8]) -> Result<Vec<i32>> {
        let tables = tables_from_blob(tables_blob)?;
        self.decode(bytes, indexes, &tables)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReferenceCoder;

impl EntropyCoder for ReferenceCoder {
    fn name(&self) -> &'static str {
        "reference"
    }
    fn encode(&self, plan: &SymbolPlan, tables: &[CdfTable]) -> Result<Vec<u8>> {
        encode(plan, tables)
    }
    fn decode(&self, bytes: &[u8], indexes: &[u32], tables: &[CdfTable]) -> Result<Vec<i32>> {
        decode(bytes, indexes, tables)
    }
}

/// Resolves a backend. The accelerated coder ships separately; without it
/// the selection fails instead of silently falling back.
pub fn coder_for(backend: CoderBackend) -> Result<Box<dyn EntropyCoder>> {
    match backend {
        CoderBackend::Reference => Ok(Box::new(ReferenceCoder)),
        CoderBackend::Accelerated => Err(Error::BackendUnavailable(
            "the accelerated coder is not linked into this build; use coder = \"reference\"".into(),
        )),
    }
}

/// Ideal code length `sum -log2 p_table(symbol)` of a plan, in bits.
pub fn table_cross_entropy(plan: &SymbolPlan, tables: &[CdfTable]) -> f64 {
    plan.symbols
        .iter()
        .zip(&plan.table_indexes)
        .map(|(&s, &t)| -tables[t as usize].probability(s).log2())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_models::cdf::tables_to_blob;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_plan_round_trips() {
        let t = CdfTable::uniform(0, 4, 16).unwrap();
        let bytes = encode(&SymbolPlan::default(), std::slice::from_ref(&t)).unwrap();
        assert!(bytes.len() <= 4);
        assert!(decode(&bytes, &[], &[t]).unwrap().is_empty());
    }

    #[test]
    fn uniform_bytes_cost_eight_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = CdfTable::uniform(0, 256, 16).unwrap();
        let n = 100_000;
        let plan = SymbolPlan::new((0..n).map(|_| rng.random_range(0..256)).collect(), vec![0; n]).unwrap();
        let bytes = encode(&plan, std::slice::from_ref(&t)).unwrap();
        assert!((bytes.len() as f64 - n as f64).abs() <= 0.01 * n as f64, "{}", bytes.len());
        assert_eq!(decode(&bytes, &plan.table_indexes, &[t]).unwrap(), plan.symbols);
    }

    #[test]
    fn certain_symbol_costs_nothing() {
        let t = CdfTable::from_pmf(7, &[1.0], 16).unwrap();
        for n in [1usize, 10, 100_000] {
            let plan = SymbolPlan::new(vec![7; n], vec![0; n]).unwrap();
            let bytes = encode(&plan, std::slice::from_ref(&t)).unwrap();
            assert!(bytes.len() <= 8);
            assert_eq!(decode(&bytes, &plan.table_indexes, std::slice::from_ref(&t)).unwrap(), plan.symbols);
        }
    }

    #[test]
    fn out_of_range_reports_index() {
        let t = CdfTable::uniform(-2, 4, 16).unwrap();
        let plan = SymbolPlan::new(vec![0, 1, 2], vec![0; 3]).unwrap();
        match encode(&plan, &[t]) {
            Err(Error::SymbolOutOfRange { index: 2, symbol: 2 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = CdfTable::uniform(0, 256, 16).unwrap();
        let plan = SymbolPlan::new((0..1000).map(|_| rng.random_range(0..256)).collect(), vec![0; 1000]).unwrap();
        let bytes = encode(&plan, std::slice::from_ref(&t)).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() / 2], &plan.table_indexes, &[t]),
            Err(Error::Truncated)
        ));
    }

    #[test]
    fn flat_interface_and_backend_selection() {
        let tables = vec![CdfTable::uniform(0, 3, 16).unwrap(), CdfTable::from_pmf(-1, &[0.2, 0.8], 16).unwrap()];
        let blob = tables_to_blob(&tables);
        let coder = coder_for(CoderBackend::Reference).unwrap();
        let bytes = coder.encode_flat(&[2, -1, 0, 0], &[0, 1, 1, 0], &blob).unwrap();
        assert_eq!(coder.decode_flat(&bytes, &[0, 1, 1, 0], &blob).unwrap(), vec![2, -1, 0, 0]);
        assert!(matches!(
            coder_for(CoderBackend::Accelerated),
            Err(Error::BackendUnavailable(_))
        ));
        assert_eq!("reference".parse::<CoderBackend>().unwrap(), CoderBackend::default());
        assert!("fast".parse::<CoderBackend>().is_err());
    }
}
