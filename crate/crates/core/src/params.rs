//! Named parameter storage and its binding onto autodiff graphs.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

pub const INIT_STD: f64 = 0.02;

/// An ordered map from dotted parameter names to tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites entries with those of `other`; names must already exist
    /// with identical shapes.
    pub fn assign(&mut self, other: &ParamStore) -> Result<()> {
        self.check_isomorphic_subset(other)?;
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
        Ok(())
    }

    /// Checks that every entry of `other` exists here with the same shape.
    pub fn check_isomorphic_subset(&self, other: &ParamStore) -> Result<()> {
        for (k, v) in &other.map {
            let mine = self.get(k)?;
            if mine.shape() != v.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "param_tree",
                    lhs: mine.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Same names, shapes and bit patterns.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    /// Places every parameter on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter names resolved to graph nodes.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Invalid(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Rebinds every name in `other` to its node there.
    pub fn overlay(&mut self, other: &Bound) {
        for (k, v) in &other.vars {
            self.vars.insert(k.clone(), *v);
        }
    }
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Uniform draw helper used by tests and probes.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Builders for the common layer parameter groups.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, name: String, shape: &[usize]) {
        let t = trunc_normal(self.rng, shape, INIT_STD);
        self.store.insert(name, t);
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.normal(format!("{prefix}.weight"), &[fan_in, fan_out]);
        if bias {
            self.store.insert(format!("{prefix}.bias"), Tensor::zeros(vec![fan_out]));
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.store.insert(format!("{prefix}.gamma"), Tensor::full(vec![width], 1.0));
        self.store.insert(format!("{prefix}.beta"), Tensor::zeros(vec![width]));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = trunc_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.003);
    }

    #[test]
    fn assign_checks_shapes() {
        let mut a = ParamStore::new();
        a.insert("x", Tensor::zeros(vec![2]));
        let mut b = ParamStore::new();
        b.insert("x", Tensor::zeros(vec![3]));
        assert!(a.assign(&b).is_err());
        b.insert("x", Tensor::full(vec![2], 1.0));
        a.assign(&b).unwrap();
        assert_eq!(a.get("x").unwrap().data(), &[1.0, 1.0]);
    }
}
