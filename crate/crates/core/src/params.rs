//! Ordered collections of named tensors. Model weights, client deltas,
//! optimizer moments and gradients all share this representation, which keeps
//! the aggregators independent of the network layout.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            entries: other
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.entries.iter_mut().flat_map(|(_, t)| t.data_mut().iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt()
    }

    /// Checks names and shapes against `other`, reporting the first mismatch.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<(), TensorError> {
        if self.entries.len() != other.entries.len() {
            return Err(TensorError::ShapeMismatch {
                op: "param set",
                dim: "entry count",
                expected: self.entries.len(),
                got: other.entries.len(),
            });
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "param set",
                    dim: "parameter shape",
                    expected: ta.len(),
                    got: tb.len(),
                });
            }
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, alpha: f64) -> Result<(), TensorError> {
        self.check_compatible(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.values_mut() {
            *v *= alpha;
        }
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet, TensorError> {
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }

    /// Elementwise combination of two compatible sets.
    pub fn zip_map(&self, other: &ParamSet, mut f: impl FnMut(f64, f64) -> f64) -> Result<ParamSet, TensorError> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for ((_, a), (_, b)) in out.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = f(*x, y);
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(a: &[f64], b: &[f64]) -> ParamSet {
        ParamSet::new(vec![
            ("a".into(), Tensor::vector(a.to_vec()).unwrap()),
            ("b".into(), Tensor::vector(b.to_vec()).unwrap()),
        ])
    }

    #[test]
    fn arithmetic() {
        let mut x = set(&[1.0, 2.0], &[3.0]);
        let y = set(&[1.0, 1.0], &[1.0]);
        x.add_scaled(&y, 2.0).unwrap();
        assert_eq!(x, set(&[3.0, 4.0], &[5.0]));
        assert_eq!(x.sub(&y).unwrap(), set(&[2.0, 3.0], &[4.0]));
        assert!((set(&[3.0], &[4.0]).l2_norm() - 5.0).abs() < 1e-15);
        assert_eq!(x.num_values(), 3);
    }

    #[test]
    fn incompatible_sets_rejected() {
        let x = set(&[1.0, 2.0], &[3.0]);
        let y = set(&[1.0], &[3.0]);
        assert!(x.sub(&y).is_err());
    }
}
