//! Bijections on `{0..n-1}` stored as gather maps.
//!
//! A permutation `p` acts on a sequence `x` by `out[j] = x[p.map()[j]]`.

use serde::{Deserialize, Serialize};

use crate::error::{AtaError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    /// Validates that `map` is a bijection on `{0..map.len()-1}`.
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        if n == 0 {
            return Err(AtaError::InvalidPermutation("empty map".into()));
        }
        let mut seen = vec![false; n];
        for &m in &map {
            if m >= n {
                return Err(AtaError::InvalidPermutation(format!(
                    "index {m} out of range for length {n}"
                )));
            }
            if seen[m] {
                return Err(AtaError::InvalidPermutation(format!("index {m} repeated")));
            }
            seen[m] = true;
        }
        Ok(Self { map })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (j, &m) in self.map.iter().enumerate() {
            inv[m] = j;
        }
        Self { map: inv }
    }

    /// Permutation equivalent to gathering by `self` and then by `next`.
    pub fn then(&self, next: &Permutation) -> Result<Self> {
        if next.len() != self.len() {
            return Err(AtaError::shape(
                "permutation.then",
                format!("lengths {} and {}", self.len(), next.len()),
            ));
        }
        Ok(Self {
            map: next.map.iter().map(|&j| self.map[j]).collect(),
        })
    }

    /// Gathers `rows` (each `width` long) into a new buffer.
    pub fn gather_rows<T: Copy>(&self, rows: &[T], width: usize) -> Result<Vec<T>> {
        if rows.len() != self.len() * width {
            return Err(AtaError::shape(
                "permutation.gather_rows",
                format!(
                    "{} values for {} rows of width {width}",
                    rows.len(),
                    self.len()
                ),
            ));
        }
        let mut out = Vec::with_capacity(rows.len());
        for &src in &self.map {
            out.extend_from_slice(&rows[src * width..(src + 1) * width]);
        }
        Ok(out)
    }

    /// Dense one-hot matrix `M` with `M[j][map[j]] = 1`, so that `M x` gathers `x`.
    pub fn to_matrix(&self) -> Vec<Vec<u8>> {
        let n = self.len();
        self.map
            .iter()
            .map(|&m| {
                let mut row = vec![0u8; n];
                row[m] = 1;
                row
            })
            .collect()
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = AtaError;

    fn try_from(map: Vec<usize>) -> Result<Self> {
        Self::new(map)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.map
    }
}
