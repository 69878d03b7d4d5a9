//! Named, ordered weight collections shared by the models.
//!
//! Models keep their weights in a [`ParamStore`] and refer to them by index.
//! Binding a store onto a [`Graph`] yields one [`Var`] per weight in the same
//! order, which is also the order used by the optimizer, the EMA update and
//! the checkpoint format.

use crate::error::{Error, Result};
use crate::tensor::{AdamW, Graph, Tensor, Var};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a weight and returns its index. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Copies every weight onto the tape, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect()
    }

    /// Moves the weights onto the tape without copying.
    pub fn into_graph(self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .into_iter()
            .map(|t| g.leaf(t.with_requires_grad(trainable)))
            .collect()
    }

    /// Gradients of bound weights after `backward`; absent gradients read as zero.
    pub fn grads(&self, g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, v)| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    }

    pub fn adamw_step(&mut self, opt: &mut AdamW, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let mut refs: Vec<&mut Tensor> = self.tensors.iter_mut().collect();
        opt.step(&mut refs, grads, lr)
    }

    /// `self <- lambda * self + (1 - lambda) * other`, elementwise.
    pub fn ema_toward(&mut self, other: &ParamStore, lambda: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Validation("ema update between different layouts".into()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Parameter(format!("EMA factor must be in [0, 1], got {lambda}")));
        }
        for (t, s) in self.tensors.iter_mut().zip(&other.tensors) {
            for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = lambda * *a + (1.0 - lambda) * b;
            }
        }
        Ok(())
    }
}

/// Adds `src` into `dst` elementwise; used to sum per-sample gradients.
pub fn add_grads(dst: &mut [Vec<f64>], src: &[Vec<f64>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("w", Tensor::new(&[values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn ema_endpoints_and_midpoint() {
        let student = store(&[4.0]);
        let mut t = store(&[2.0]);
        t.ema_toward(&student, 1.0).unwrap();
        assert_eq!(t.tensor(0).data(), &[2.0]);
        t.ema_toward(&student, 0.5).unwrap();
        assert_eq!(t.tensor(0).data(), &[3.0]);
        t.ema_toward(&student, 0.0).unwrap();
        assert_eq!(t.tensor(0).data(), &[4.0]);
    }

    #[test]
    fn ema_rejects_layout_mismatch() {
        let mut a = store(&[1.0, 2.0]);
        let b = store(&[1.0]);
        assert!(a.ema_toward(&b, 0.5).is_err());
    }

    #[test]
    fn grads_default_to_zero_for_constants() {
        let s = store(&[1.0, 2.0]);
        let mut g = Graph::new();
        let vars = s.bind(&mut g, false);
        let total = g.sum(vars[0]);
        g.backward(total).unwrap();
        assert_eq!(s.grads(&g, &vars), vec![vec![0.0, 0.0]]);
    }
}
