//! JSON and binary serialization, both bit-exact.
//!
//! Binary layout (little endian): d, n, J, L as u64, then every block in angle
//! mode order, each row-major over (j, j'), as (re, im) f64 pairs.

use serde::{Deserialize, Serialize};

use super::{CMat, QPOperator};
use crate::error::{Error, Result};
use crate::lattice::{LatticeSpec, C64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorRecord {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "J")]
    pub j_max: i64,
    #[serde(rename = "L")]
    pub l_max: i64,
    /// One entry per angle mode; each a row-major list of [re, im] pairs.
    pub blocks: Vec<Vec<[f64; 2]>>,
}

impl QPOperator {
    pub fn to_record(&self) -> OperatorRecord {
        let s = self.spec();
        OperatorRecord {
            d: s.d,
            n: s.n,
            j_max: s.j_max,
            l_max: s.l_max,
            blocks: self
                .blocks()
                .iter()
                .map(|b| {
                    let mut out = Vec::with_capacity(b.len());
                    for r in 0..b.nrows() {
                        for c in 0..b.ncols() {
                            out.push([b[(r, c)].re, b[(r, c)].im]);
                        }
                    }
                    out
                })
                .collect(),
        }
    }

    pub fn from_record(rec: &OperatorRecord) -> Result<Self> {
        let spec = LatticeSpec::new(rec.d, rec.n, rec.j_max, rec.l_max)?;
        let dim = spec.spatial_count();
        let blocks = rec
            .blocks
            .iter()
            .map(|b| {
                if b.len() != dim * dim {
                    return Err(Error::SizeMismatch {
                        expected: dim * dim,
                        found: b.len(),
                    });
                }
                Ok(CMat::from_row_iterator(dim, dim, b.iter().map(|p| C64::new(p[0], p[1]))))
            })
            .collect::<Result<Vec<_>>>()?;
        QPOperator::from_blocks(spec, blocks)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_record())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_record(&serde_json::from_str(s)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.spec();
        let mut out = Vec::with_capacity(32 + 16 * self.blocks().len() * self.dim() * self.dim());
        for h in [s.d as u64, s.n as u64, s.j_max as u64, s.l_max as u64] {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for b in self.blocks() {
            for r in 0..b.nrows() {
                for c in 0..b.ncols() {
                    out.extend_from_slice(&b[(r, c)].re.to_le_bytes());
                    out.extend_from_slice(&b[(r, c)].im.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<[u8; 8]> {
            bytes
                .get(8 * i..8 * i + 8)
                .and_then(|s| s.try_into().ok())
                .ok_or(Error::SizeMismatch {
                    expected: 8 * (i + 1),
                    found: bytes.len(),
                })
        };
        let h: Vec<u64> = (0..4).map(|i| word(i).map(u64::from_le_bytes)).collect::<Result<_>>()?;
        let spec = LatticeSpec::new(h[0] as usize, h[1] as usize, h[2] as i64, h[3] as i64)?;
        let dim = spec.spatial_count();
        let expected = 32 + 16 * spec.angle_count() * dim * dim;
        if bytes.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: bytes.len(),
            });
        }
        let mut words = bytes[32..].chunks_exact(8).map(|w| f64::from_le_bytes(w.try_into().unwrap()));
        let blocks = (0..spec.angle_count())
            .map(|_| {
                CMat::from_row_iterator(
                    dim,
                    dim,
                    (0..dim * dim).map(|_| {
                        let re = words.next().unwrap();
                        let im = words.next().unwrap();
                        C64::new(re, im)
                    }),
                )
            })
            .collect();
        QPOperator::from_blocks(spec, blocks)
    }
}
