//! Named parameter tensors.
//!
//! Every trainable piece of the model lives in a [`ParameterSet`]: an ordered
//! map from dotted names (`adapter.fc1.weight`) to flat row-major tensors.
//! Layers resolve their entries to positional indices once and then address
//! them by index, so two sets built by the same initializer can be zipped,
//! averaged or copied without name lookups.

use indexmap::IndexMap;
use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry and returns its positional index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.entries.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.entries.insert_full(name, tensor).0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index]
    }

    pub fn name(&self, index: usize) -> &str {
        self.entries.get_index(index).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn mat(&self, index: usize) -> ArrayView2<'_, f64> {
        let t = &self.entries[index];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("rank-2 parameter")
    }

    pub fn mat_mut(&mut self, index: usize) -> ArrayViewMut2<'_, f64> {
        let t = &mut self.entries[index];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data)
            .expect("rank-2 parameter")
    }

    pub fn vector(&self, index: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.entries[index].data[..])
    }

    pub fn vector_mut(&mut self, index: usize) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.entries[index].data[..])
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.entries.values_mut() {
            t.data.fill(value);
        }
    }

    /// Checks that both sets have identical names, order and shapes.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Incompatible(format!(
                "entry count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(other.entries.iter()) {
            if na != nb {
                return Err(Error::Incompatible(format!("name `{na}` vs `{nb}`")));
            }
            if ta.shape != tb.shape {
                return Err(Error::Incompatible(format!(
                    "`{na}` has shape {:?} vs {:?}",
                    ta.shape, tb.shape
                )));
            }
        }
        Ok(())
    }

    /// Entries whose names start with any of the given prefixes, in order.
    pub fn subset(&self, prefixes: &[&str]) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
        }
    }

    /// Overwrites the values of every entry named in `other`.
    pub fn assign_from(&mut self, other: &Self) -> Result<()> {
        for (name, src) in other.iter() {
            let dst = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Incompatible(format!("unknown entry `{name}`")))?;
            if dst.shape != src.shape {
                return Err(Error::Incompatible(format!(
                    "`{name}` has shape {:?} vs {:?}",
                    dst.shape, src.shape
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    /// Euclidean norm of the difference, over all entries.
    pub fn l2_distance(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        let sq: f64 = self
            .entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.data.iter().zip(b.data.iter()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(sq.sqrt())
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, entries matched by position.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            for (x, y) in a.data.iter_mut().zip(b.data.iter()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.entries.values_mut() {
            for x in t.data.iter_mut() {
                *x *= factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push("a.weight", Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        p.push("a.bias", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        p.push("b.weight", Tensor::zeros(vec![1, 2]));
        p
    }

    #[test]
    fn tensor_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn views_follow_row_major_layout() {
        let p = sample();
        let m = p.mat(0);
        assert_eq!(m[[1, 0]], 3.0);
        assert_eq!(p.vector(1)[2], 3.0);
    }

    #[test]
    fn compatibility_reports_first_mismatch() {
        let a = sample();
        let mut b = ParameterSet::new();
        b.push("a.weight", Tensor::zeros(vec![2, 3]));
        b.push("a.bias", Tensor::zeros(vec![4]));
        b.push("b.weight", Tensor::zeros(vec![1, 2]));
        let err = a.check_compatible(&b).unwrap_err().to_string();
        assert!(err.contains("a.bias"), "{err}");
    }

    #[test]
    fn subset_and_assign_round_trip() {
        let mut a = sample();
        let mut sub = a.subset(&["a."]);
        assert_eq!(sub.len(), 2);
        sub.fill(7.0);
        a.assign_from(&sub).unwrap();
        assert!(a.tensor(0).data().iter().all(|&v| v == 7.0));
        assert!(a.tensor(2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distance_to_self_is_zero() {
        let a = sample();
        assert_eq!(a.l2_distance(&a).unwrap(), 0.0);
        let mut b = a.clone();
        b.tensor_mut(2).data_mut()[0] = 3.0;
        b.tensor_mut(2).data_mut()[1] = 4.0;
        assert_eq!(a.l2_distance(&b).unwrap(), 5.0);
    }
}
