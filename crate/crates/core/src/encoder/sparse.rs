use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{LabError, Result};

/// Term-id → impact map, sorted by term id. Zero impacts are never stored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    entries: Vec<(u32, f64)>,
    pub source_len: usize,
}

impl SparseVector {
    /// Builds from arbitrary pairs; non-positive impacts are dropped and
    /// duplicate ids keep the last value.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, f64)>, source_len: usize) -> Self {
        let map: BTreeMap<u32, f64> = pairs.into_iter().collect();
        Self {
            entries: map.into_iter().filter(|&(_, w)| w > 0.0).collect(),
            source_len,
        }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn term_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(t, _)| t)
    }

    pub fn get(&self, term: u32) -> Option<f64> {
        self.entries
            .binary_search_by_key(&term, |&(t, _)| t)
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_impact(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w).fold(0.0, f64::max)
    }

    /// Keeps only the entries whose id passes `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(u32) -> bool) {
        self.entries.retain(|&(t, _)| keep(t));
    }

    pub fn densify(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for &(t, w) in &self.entries {
            out[t as usize] = w;
        }
        out
    }
}

/// `term_id:impact` pairs separated by spaces, ascending by term id.
impl fmt::Display for SparseVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (t, w)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}:{w}")?;
        }
        Ok(())
    }
}

impl FromStr for SparseVector {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for tok in s.split_whitespace() {
            let (t, w) = tok
                .split_once(':')
                .ok_or_else(|| LabError::Format(format!("bad sparse entry '{tok}'")))?;
            let t: u32 = t.parse().map_err(|_| LabError::Format(format!("bad term id '{t}'")))?;
            let w: f64 = w.parse().map_err(|_| LabError::Format(format!("bad impact '{w}'")))?;
            if !(w.is_finite() && w > 0.0) {
                return Err(LabError::Format(format!("impact must be positive and finite: {w}")));
            }
            pairs.push((t, w));
        }
        Ok(Self::from_pairs(pairs, 0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    pub values: Vec<f64>,
}

impl DenseVector {
    pub fn dot(&self, other: &DenseVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// One pooled dimension: the row that won the max and its raw logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct PooledDim {
    pub dim: u32,
    pub row: usize,
    pub logit: f64,
}

/// Per allowed column, the lowest-index row holding the maximum logit,
/// kept only when that logit is positive.
pub(crate) fn pool_argmax(logits: &Array2<f64>, mask: &[bool]) -> Vec<PooledDim> {
    let mut out = Vec::new();
    for (j, col) in logits.columns().into_iter().enumerate() {
        if !mask[j] {
            continue;
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &v) in col.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        if best.1 > 0.0 {
            out.push(PooledDim {
                dim: j as u32,
                row: best.0,
                logit: best.1,
            });
        }
    }
    out
}

/// Log-saturated max pooling over rows: `w_j = max_i ln(1 + relu(W[i, j]))`
/// for allowed columns; zero-valued dimensions are left out.
pub fn pool_sparse(logits: &Array2<f64>, mask: &[bool]) -> Result<SparseVector> {
    if mask.len() != logits.ncols() {
        return Err(LabError::DimensionMismatch {
            expected: logits.ncols(),
            got: mask.len(),
        });
    }
    let entries = pool_argmax(logits, mask)
        .into_iter()
        .map(|p| (p.dim, p.logit.ln_1p()))
        .filter(|&(_, w)| w > 0.0)
        .collect();
    Ok(SparseVector {
        entries,
        source_len: logits.nrows(),
    })
}

/// Inner product over shared dimensions.
pub fn score(q: &SparseVector, d: &SparseVector) -> f64 {
    let (a, b) = (&q.entries, &d.entries);
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pool_examples() {
        let w = Array2::from_shape_vec((2, 3), vec![2.0, -1.0, -5.0, 0.5, 3.0, -0.1]).unwrap();
        let v = pool_sparse(&w, &[true, true, true]).unwrap();
        assert_eq!(v.len(), 2);
        assert!((v.get(0).unwrap() - 3.0f64.ln()).abs() < 1e-15);
        assert!((v.get(1).unwrap() - 4.0f64.ln()).abs() < 1e-15);
        assert!((v.get(0).unwrap() - 1.0986).abs() < 1e-4);
        assert!((v.get(1).unwrap() - 1.3863).abs() < 1e-4);
        assert_eq!(v.get(2), None);

        let neg = Array2::from_elem((3, 4), -0.5);
        assert!(pool_sparse(&neg, &[true; 4]).unwrap().is_empty());

        let big = Array2::from_elem((2, 2), 10.0);
        let v = pool_sparse(&big, &[true, false]).unwrap();
        assert_eq!(v.term_ids().collect::<Vec<_>>(), vec![0]);

        assert!(pool_sparse(&big, &[true]).is_err());
    }

    #[test]
    fn saturation_is_exactly_log1p_of_max() {
        let w = Array2::from_shape_vec((2, 2), vec![10.0, 100.0, 1.0, 2.0]).unwrap();
        let v = pool_sparse(&w, &[true, true]).unwrap();
        assert_eq!(v.get(0), Some(10.0f64.ln_1p()));
        assert_eq!(v.get(1), Some(100.0f64.ln_1p()));
        assert!(v.get(1).unwrap() / v.get(0).unwrap() < 10.0);
    }

    #[test]
    fn argmax_ties_pick_lowest_row() {
        let w = Array2::from_shape_vec((3, 1), vec![1.0, 2.0, 2.0]).unwrap();
        assert_eq!(pool_argmax(&w, &[true])[0].row, 1);
    }

    #[test]
    fn score_examples() {
        let q = SparseVector::from_pairs([(0, 1.0), (1, 2.0)], 0);
        let d = SparseVector::from_pairs([(1, 0.5), (2, 4.0)], 0);
        assert_eq!(score(&q, &d), 1.0);
        let e = SparseVector::from_pairs([(7, 1.0)], 0);
        assert_eq!(score(&q, &e), 0.0);
    }

    #[test]
    fn text_form() {
        let v = SparseVector::from_pairs([(5, 0.25), (2, 1.5), (9, 0.0)], 3);
        assert_eq!(v.to_string(), "2:1.5 5:0.25");
        let back: SparseVector = v.to_string().parse().unwrap();
        assert_eq!(back.entries(), v.entries());
        assert!("1:-2".parse::<SparseVector>().is_err());
        assert!("x".parse::<SparseVector>().is_err());
    }

    fn sparse() -> impl Strategy<Value = SparseVector> {
        proptest::collection::vec((0u32..50, 0.001f64..10.0), 0..20).prop_map(|p| SparseVector::from_pairs(p, 0))
    }

    proptest! {
        #[test]
        fn score_is_symmetric_and_nonnegative(q in sparse(), d in sparse()) {
            let a = score(&q, &d);
            prop_assert_eq!(a, score(&d, &q));
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn raising_a_logit_never_lowers_pooled_weight(
            vals in proptest::collection::vec(-3.0f64..3.0, 12),
            idx in 0usize..12,
            bump in 0.0f64..2.0,
        ) {
            let w = Array2::from_shape_vec((4, 3), vals).unwrap();
            let mask = [true; 3];
            let before = pool_sparse(&w, &mask).unwrap();
            let mut w2 = w.clone();
            w2[(idx / 3, idx % 3)] += bump;
            let after = pool_sparse(&w2, &mask).unwrap();
            for j in 0..3u32 {
                prop_assert!(after.get(j).unwrap_or(0.0) >= before.get(j).unwrap_or(0.0));
            }
        }

        #[test]
        fn text_form_round_trips(v in sparse()) {
            let back: SparseVector = v.to_string().parse().unwrap();
            prop_assert_eq!(back.entries(), v.entries());
        }
    }
}
