//! Named parameters, their gradients, Adam, clipping and the LR schedule.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Parameters keyed by dot-separated path, each with its own Adam moments
/// and step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        let n = value.len();
        self.entries.insert(
            name,
            Entry {
                value,
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    /// Overwrites a parameter's value, keeping its optimizer state.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "set",
                format!("{:?} vs {:?}", entry.value.shape(), value.shape()),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    /// Number of Adam updates applied to a parameter.
    pub fn adam_steps(&self, name: &str) -> Option<u64> {
        self.entries.get(name).map(|e| e.step)
    }

    /// One bias-corrected Adam update.
    ///
    /// Only parameters the loss reached are touched; the rest keep their
    /// values, moments and step counters bit-for-bit.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::contract(format!("learning rate must be >= 0, got {lr}")));
        }
        for (name, entry) in self.entries.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("missing gradient for `{name}`")))?;
            if g.shape() != entry.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{name}`: {:?} vs {:?}", g.shape(), entry.value.shape()),
                ));
            }
            if !grads.reached(name) {
                continue;
            }
            entry.step += 1;
            let t = entry.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let w = entry.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                entry.m[i] = cfg.beta1 * entry.m[i] + (1.0 - cfg.beta1) * gi;
                entry.v[i] = cfg.beta2 * entry.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = entry.m[i] / c1;
                let v_hat = entry.v[i] / c2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Gradients for every parameter of a store, plus which ones the loss
/// actually reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
    reached: BTreeSet<String>,
}

impl Gradients {
    pub(crate) fn new(grads: BTreeMap<String, Tensor>, reached: BTreeSet<String>) -> Self {
        Self { grads, reached }
    }

    /// Gradients where every entry counts as reached.
    pub fn from_map(grads: BTreeMap<String, Tensor>) -> Self {
        let reached = grads.keys().cloned().collect();
        Self { grads, reached }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn reached(&self, name: &str) -> bool {
        self.reached.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    /// All gradients concatenated in parameter-name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grads.values().map(Tensor::len).sum());
        for g in self.grads.values() {
            out.extend_from_slice(g.data());
        }
        out
    }

    fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm observed before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::contract(format!("max_norm must be > 0, got {max_norm}")));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

/// `lr0 · (1 − step/total)`.
pub fn linear_anneal(lr0: f64, step: usize, total: usize) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::contract(format!("anneal step {step} outside 0..={total}")));
    }
    Ok(lr0 * (1.0 - step as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(pairs: &[(&str, Vec<f64>)]) -> Gradients {
        let map = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), Tensor::new(vec![v.len()], v.clone()).unwrap()))
            .collect();
        Gradients::from_map(map)
    }

    #[test]
    fn clip_scales_by_ratio() {
        let mut g = grads_of(&[("w", vec![3.0, 4.0])]);
        let norm = clip_global_norm(&mut g, 1.9).unwrap();
        assert_eq!(norm, 5.0);
        let d = g.get("w").unwrap().data();
        assert!((d[0] - 3.0 * 0.38).abs() < 1e-15);
        assert!((d[1] - 4.0 * 0.38).abs() < 1e-15);
        assert!(g.global_norm() <= 1.9 + 1e-12);
    }

    #[test]
    fn clip_below_max_and_zero_are_identity() {
        let mut g = grads_of(&[("w", vec![0.3, 0.4])]);
        assert_eq!(clip_global_norm(&mut g, 1.9).unwrap(), 0.5);
        assert_eq!(g.get("w").unwrap().data(), &[0.3, 0.4]);

        let mut z = grads_of(&[("w", vec![0.0, 0.0])]);
        assert_eq!(clip_global_norm(&mut z, 1.9).unwrap(), 0.0);
        assert_eq!(z.get("w").unwrap().data(), &[0.0, 0.0]);

        assert!(clip_global_norm(&mut z, 0.0).is_err());
    }

    #[test]
    fn adam_first_step_from_zero() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let g = grads_of(&[("w", vec![1.0])]);
        store.adam_step(&g, 0.1, &AdamConfig::default()).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = -0.1 / (1 + 1e-5)
        let w = store.get("w").unwrap().data()[0];
        assert!((w - (-0.1 / (1.0 + 1e-5))).abs() < 1e-15);
        assert!((w + 0.1).abs() < 1e-5);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![0.5, -0.25]).unwrap()).unwrap();
        let before = store.clone();
        let g = grads_of(&[("w", vec![0.0, 0.0])]);
        for _ in 0..5 {
            store.adam_step(&g, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(store.get("w"), before.get("w"));
    }

    #[test]
    fn adam_skips_unreached() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        store.insert("b", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap());
        map.insert("b".to_string(), Tensor::new(vec![1], vec![0.0]).unwrap());
        let reached = ["a".to_string()].into_iter().collect();
        let g = Gradients::new(map, reached);
        store.adam_step(&g, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(store.adam_steps("a"), Some(1));
        assert_eq!(store.adam_steps("b"), Some(0));
        assert_eq!(store.get("b").unwrap().data(), &[1.0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut store = ParamStore::new();
            store.insert("w", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
            for k in 0..10 {
                let g = grads_of(&[("w", vec![k as f64 * 0.1, -0.3, 0.7])]);
                store.adam_step(&g, 0.01, &AdamConfig::default()).unwrap();
            }
            store.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn anneal_schedule() {
        assert_eq!(linear_anneal(9e-4, 0, 100).unwrap(), 9e-4);
        assert_eq!(linear_anneal(9e-4, 100, 100).unwrap(), 0.0);
        assert!((linear_anneal(9e-4, 50, 100).unwrap() - 4.5e-4).abs() < 1e-18);
        assert!(linear_anneal(9e-4, 101, 100).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[1])).is_err());
    }
}
