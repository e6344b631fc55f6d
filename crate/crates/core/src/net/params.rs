use hazekit_tape::{Element, Graph, Tensor, Var};

use crate::error::{Error, Result};

/// Ordered named parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<E> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

impl<E> Default for ParamSet<E> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<E>) {
        self.names.push(name.into());
        self.tensors.push(tensor);
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

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// True when names and shapes agree position by position.
    pub fn same_layout<F: Element>(&self, other: &ParamSet<F>) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn check_layout<F: Element>(&self, other: &ParamSet<F>) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Config("parameter sets differ in names or shapes".into()))
        }
    }

    /// Flat copy in parameter order.
    pub fn to_vector(&self) -> Vec<E> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn to_f64_vector(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().map(|v| v.as_f64())).collect()
    }

    /// Overwrites every value from a flat vector in parameter order.
    pub fn assign_vector(&mut self, flat: &[E]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Dimension(format!("{} values for {} parameters", flat.len(), self.numel())));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn assign_f64(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Dimension(format!("{} values for {} parameters", flat.len(), self.numel())));
        }
        for (v, &x) in self.tensors.iter_mut().flat_map(|t| t.data_mut().iter_mut()).zip(flat) {
            *v = E::of(x);
        }
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Largest absolute elementwise difference; `None` for mismatched layouts.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if !self.same_layout(other) {
            return None;
        }
        Some(
            self.tensors
                .iter()
                .zip(&other.tensors)
                .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()))
                .fold(0.0, f64::max),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every parameter on `g`, as variables when `trainable`.
    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }
}
