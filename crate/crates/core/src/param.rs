//! Named learnable parameters with deterministic iteration order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::{kaiming_bound, SplitMix64};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// One learnable tensor with a unique dotted name.
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Registry of parameters. Iteration follows insertion order, which makes
/// checkpoints, optimizer sweeps and gradient checks reproducible.
#[derive(Default)]
pub struct ParameterStore<T: Real> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> std::fmt::Debug for ParameterStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut d = f.debug_map();
        for p in &self.params {
            d.entry(&p.name, &p.value.shape());
        }
        d.finish()
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a gradient-tracking leaf under `name`.
    pub fn register(&mut self, name: &str, shape: Vec<usize>, data: Vec<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let value = Tensor::variable(shape, data)?;
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
        });
        Ok(())
    }

    pub fn register_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        let n = shape.iter().product();
        self.register(name, shape, vec![T::zero(); n])
    }

    pub fn register_full(&mut self, name: &str, shape: Vec<usize>, v: f64) -> Result<()> {
        let n = shape.iter().product();
        self.register(name, shape, vec![T::from_f64(v); n])
    }

    /// Kaiming-uniform init: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn register_kaiming(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut SplitMix64,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let b = kaiming_bound(fan_in);
        let data = (0..n).map(|_| T::from_f64(rng.uniform(-b, b))).collect();
        self.register(name, shape, data)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Replace the value tensor under `name`, keeping its shape.
    pub fn set_data(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let shape = self.params[i].value.shape().to_vec();
        if data.len() != self.params[i].value.numel() {
            return Err(Error::BadShape {
                op: "set_data",
                shape,
                reason: format!("replacement has {} elements", data.len()),
            });
        }
        self.params[i].value = Tensor::variable(shape, data)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.value.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_preserved() {
        let mut s = ParameterStore::<f64>::new();
        s.register_zeros("b", vec![2]).unwrap();
        s.register_zeros("a", vec![3]).unwrap();
        s.register_zeros("m.w", vec![1]).unwrap();
        let names: Vec<&str> = s.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["b", "a", "m.w"]);
    }

    #[test]
    fn duplicate_and_unknown_names_error() {
        let mut s = ParameterStore::<f64>::new();
        s.register_zeros("w", vec![1]).unwrap();
        assert!(matches!(
            s.register_zeros("w", vec![1]),
            Err(Error::DuplicateParameter(_))
        ));
        assert!(matches!(s.get("nope"), Err(Error::UnknownParameter(_))));
    }

    #[test]
    fn set_data_keeps_shape_and_grad_flag() {
        let mut s = ParameterStore::<f64>::new();
        s.register_zeros("w", vec![2, 2]).unwrap();
        s.set_data("w", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = s.get("w").unwrap();
        assert_eq!(w.shape(), &[2, 2]);
        assert!(w.requires_grad());
        assert!(s.set_data("w", vec![1.0]).is_err());
    }

    #[test]
    fn kaiming_values_within_bound() {
        let mut rng = SplitMix64::new(3);
        let mut s = ParameterStore::<f64>::new();
        s.register_kaiming("w", vec![16, 9], 9, &mut rng).unwrap();
        let b = kaiming_bound(9);
        for &v in s.get("w").unwrap().data() {
            assert!(v.abs() <= b);
        }
        // not all identical
        let d = s.get("w").unwrap().data();
        assert!(d.iter().any(|&v| (v - d[0]).abs() > 1e-12));
    }
}
