use crate::error::{Error, Result};

/// Boolean `N x N` attention pattern; entry `(i, j)` is true when query
/// frame `i` may attend to key frame `j`. Stored as per-row key lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: Vec<Vec<usize>>,
}

impl AttentionMask {
    /// Causal pattern: frame `i` sees frames `0..=i`.
    pub fn target(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("target mask needs at least one frame".into()));
        }
        Ok(Self {
            rows: (0..n).map(|i| (0..=i).collect()).collect(),
        })
    }

    /// Kronecker-delta pattern: frame `i` sees only frame `i`.
    pub fn alignment(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("alignment mask needs at least one frame".into()));
        }
        Ok(Self {
            rows: (0..n).map(|i| vec![i]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    /// Sorted key indices visible from query `i`.
    pub fn allowed_keys(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn allowed_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        (0..n)
            .map(|i| (0..n).map(|j| self.allowed(i, j)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_mask_is_lower_triangular() {
        assert_eq!(AttentionMask::target(1).unwrap().to_dense(), vec![vec![true]]);
        let m = AttentionMask::target(3).unwrap();
        assert_eq!(m.allowed_count(), 6);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.allowed(i, j), j <= i);
            }
        }
        for n in 1..9 {
            assert_eq!(AttentionMask::target(n).unwrap().allowed_keys(0), &[0]);
        }
        assert!(AttentionMask::target(0).is_err());
    }

    #[test]
    fn alignment_mask_is_identity() {
        let m = AttentionMask::alignment(2).unwrap();
        assert_eq!(m.to_dense(), vec![vec![true, false], vec![false, true]]);
        let m = AttentionMask::alignment(7).unwrap();
        assert_eq!(m.allowed_count(), 7);
        let d = m.to_dense();
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(d[i][j], d[j][i]);
            }
        }
    }
}
