//! Integer cumulative tables driving the range coder.
//!
//! Serialized table: precision `u8`, symbol count `u32`, offset `i32`, then
//! `count + 1` cumulative values as `u32`, all little endian. A tables blob
//! is a `u32` table count followed by the serialized tables back to back.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

pub const PRECISION: u8 = 16;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CdfTable {
    pub precision: u8,
    /// Value of the first symbol.
    pub offset: i32,
    /// `num_symbols + 1` entries from 0 to `2^precision`.
    pub cdf: Vec<u32>,
}

impl CdfTable {
    /// Quantizes a probability vector to integer masses summing to
    /// `2^precision`, each at least 1, staying as close to the target masses
    /// as the constraints allow.
    pub fn from_pmf(offset: i32, pmf: &[f64], precision: u8) -> Result<Self> {
        let n = pmf.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty support".into()));
        }
        if !(1..=31).contains(&precision) {
            return Err(Error::InvalidArgument(format!("precision {precision}")));
        }
        let total = 1u64 << precision;
        if n as u64 > total {
            return Err(Error::InvalidArgument(format!("{n} symbols exceed precision {precision}")));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Numerical("probability table contains NaN or negative mass".into()));
        }
        let sum: f64 = pmf.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Numerical("probability table has zero mass".into()));
        }
        let target: Vec<f64> = pmf.iter().map(|p| p / sum * total as f64).collect();
        let mut freq: Vec<i64> = target.iter().map(|t| (t.round() as i64).max(1)).collect();
        let mut diff = total as i64 - freq.iter().sum::<i64>();
        // Adjust one unit at a time where the error grows least.
        if diff != 0 {
            let step = diff.signum();
            let cost = |f: i64, t: f64| ((f + step) as f64 - t).abs();
            let mut heap: BinaryHeap<Candidate> = (0..n)
                .filter(|&i| step > 0 || freq[i] > 1)
                .map(|i| Candidate(cost(freq[i], target[i]), i))
                .collect();
            while diff != 0 {
                let Candidate(_, i) = heap.pop().expect("a symbol with spare mass exists");
                freq[i] += step;
                diff -= step;
                if step > 0 || freq[i] > 1 {
                    heap.push(Candidate(cost(freq[i], target[i]), i));
                }
            }
        }
        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for f in freq {
            acc += f as u32;
            cdf.push(acc);
        }
        Ok(CdfTable { precision, offset, cdf })
    }

    pub fn uniform(offset: i32, n: usize, precision: u8) -> Result<Self> {
        Self::from_pmf(offset, &vec![1.0; n], precision)
    }

    pub fn num_symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    /// Largest symbol value covered by the table.
    pub fn max_symbol(&self) -> i32 {
        self.offset + self.num_symbols() as i32 - 1
    }

    /// Integer mass of the symbol at position `i`.
    pub fn freq(&self, i: usize) -> u32 {
        self.cdf[i + 1] - self.cdf[i]
    }

    /// Probability the table assigns to symbol value `s`.
    pub fn probability(&self, s: i32) -> f64 {
        let i = (s - self.offset) as usize;
        self.freq(i) as f64 / (1u64 << self.precision) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Bitstream(format!("invalid cdf table: {m}")));
        if !(1..=31).contains(&self.precision) {
            return bad("precision");
        }
        if self.cdf.len() < 2 {
            return bad("no symbols");
        }
        if self.cdf[0] != 0 || *self.cdf.last().unwrap() as u64 != 1u64 << self.precision {
            return bad("endpoints");
        }
        if self.cdf.windows(2).any(|w| w[1] <= w[0]) {
            return bad("zero-mass symbol");
        }
        Ok(())
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.push(self.precision);
        out.extend_from_slice(&(self.num_symbols() as u32).to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
        for &c in &self.cdf {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(9 + 4 * self.cdf.len());
        self.write_to(&mut v);
        v
    }

    /// Parses one table from the front of `bytes`; returns it and the bytes consumed.
    pub fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = || Error::Bitstream("truncated cdf table".into());
        if bytes.len() < 9 {
            return Err(short());
        }
        let precision = bytes[0];
        let n = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
        let offset = i32::from_le_bytes(bytes[5..9].try_into().unwrap());
        let need = n
            .checked_add(1)
            .and_then(|k| k.checked_mul(4))
            .and_then(|k| k.checked_add(9))
            .ok_or_else(short)?;
        if bytes.len() < need {
            return Err(short());
        }
        let cdf = bytes[9..need]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = CdfTable { precision, offset, cdf };
        t.validate()?;
        Ok((t, need))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::read_from(bytes)?;
        if used != bytes.len() {
            return Err(Error::Bitstream("trailing bytes after cdf table".into()));
        }
        Ok(t)
    }
}

/// Min-heap entry ordered by cost, then index.
struct Candidate(f64, usize);

impl PartialEq for Candidate {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Candidate {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

/// Count-prefixed concatenation of serialized tables.
pub fn tables_to_blob(tables: &[CdfTable]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tables.len() as u32).to_le_bytes());
    for t in tables {
        t.write_to(&mut out);
    }
    out
}

pub fn tables_from_blob(blob: &[u8]) -> Result<Vec<CdfTable>> {
    if blob.len() < 4 {
        return Err(Error::Bitstream("truncated tables blob".into()));
    }
    let count = u32::from_le_bytes(blob[..4].try_into().unwrap()) as usize;
    let mut pos = 4;
    let mut tables = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (t, used) = CdfTable::read_from(&blob[pos..])?;
        tables.push(t);
        pos += used;
    }
    if pos != blob.len() {
        return Err(Error::Bitstream("trailing bytes after tables blob".into()));
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_models::gaussian::{gmm_likelihood, gmm_support_pmf, GmmParams};

    #[test]
    fn uniform_quarters() {
        let t = CdfTable::uniform(0, 4, 16).unwrap();
        assert_eq!(t.cdf, vec![0, 16384, 32768, 49152, 65536]);
    }

    fn max_unit_error(sigma: f64) -> f64 {
        let g = GmmParams::single(0.0, sigma);
        let t = CdfTable::from_pmf(-8, &gmm_support_pmf(&g, 0.0, -8, 8), 16).unwrap();
        (-8..=8)
            .map(|s| (t.probability(s) - gmm_likelihood(s as f64, &g)).abs() * 65536.0)
            .fold(0.0, f64::max)
    }

    #[test]
    fn wide_normal_table_within_one_unit() {
        // Every symbol has real mass here, so rounding alone decides.
        let g = GmmParams::single(0.0, 3.0);
        let pmf = gmm_support_pmf(&g, 0.0, -8, 8);
        let t = CdfTable::from_pmf(-8, &pmf, 16).unwrap();
        for (i, p) in pmf.iter().enumerate() {
            assert!((t.probability(i as i32 - 8) - p).abs() * 65536.0 <= 1.0);
        }
    }

    /// With unit scale over [-8, 8], eight tail symbols carry almost no
    /// mass but must get one unit each. The only slack in the remaining
    /// nine symbols is their fractional parts, so some symbol must move by
    /// more than one unit; the fitted table is as close as that allows.
    #[test]
    fn unit_normal_table_error_is_minimal() {
        let g = GmmParams::single(0.0, 1.0);
        let target: Vec<f64> = gmm_support_pmf(&g, 0.0, -8, 8).iter().map(|p| p * 65536.0).collect();
        let forced: f64 = target.iter().filter(|t| **t < 1.0).map(|t| 1.0 - t).sum();
        let mut fracs: Vec<f64> = target.iter().filter(|t| **t >= 1.0).map(|t| t.fract()).collect();
        fracs.sort_by(f64::total_cmp);
        let slack: f64 = fracs.iter().sum();
        assert!(forced > slack);
        // Removing `extra` whole units beyond the floors costs 1 + frac on
        // each of the bins with the smallest fractional parts.
        let extra = (forced - slack).ceil() as usize;
        let bound = 1.0 + fracs[extra - 1];
        let err = max_unit_error(1.0);
        assert!(err <= bound + 1e-9, "{err} > {bound}");
    }

    #[test]
    fn tiny_and_dominant_masses_keep_every_symbol() {
        let mut pmf = vec![1e-12; 100];
        pmf[50] = 1.0;
        let t = CdfTable::from_pmf(-50, &pmf, 16).unwrap();
        t.validate().unwrap();
        assert_eq!(t.freq(0), 1);
        assert_eq!(t.freq(50), 65536 - 99);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(CdfTable::from_pmf(0, &[], 16).is_err());
        assert!(CdfTable::from_pmf(0, &[0.5, f64::NAN], 16).is_err());
    }

    #[test]
    fn blob_round_trip() {
        let a = CdfTable::uniform(-3, 7, 16).unwrap();
        let b = CdfTable::from_pmf(10, &[0.1, 0.7, 0.2], 16).unwrap();
        let blob = tables_to_blob(&[a.clone(), b.clone()]);
        assert_eq!(tables_from_blob(&blob).unwrap(), vec![a.clone(), b]);
        assert_eq!(CdfTable::from_bytes(&a.to_bytes()).unwrap(), a);
        assert!(tables_from_blob(&blob[..blob.len() - 2]).is_err());
    }
}
