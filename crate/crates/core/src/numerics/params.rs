use indexmap::IndexMap;

use super::array::Array;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Array,
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Named learnable arrays plus Adam moments. Iteration follows insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    slots: IndexMap<String, Slot>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<usize> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::Invariant(format!("duplicate parameter {name}")));
        }
        let n = value.len();
        let (idx, _) = self.slots.insert_full(
            name,
            Slot {
                value,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn by_index(&self, idx: usize) -> &Array {
        &self.slots[idx].value
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Array {
        &mut self.slots[idx].value
    }

    pub fn name_of(&self, idx: usize) -> &str {
        self.slots.get_index(idx).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    /// Moments for one parameter, in (first, second) order.
    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.slots.get(name).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    /// Installs one gradient buffer per parameter, indexed like the store.
    pub fn set_grads(&mut self, grads: Vec<Vec<f32>>) -> Result<()> {
        if grads.len() != self.slots.len() {
            return Err(Error::Invariant(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.slots.len()
            )));
        }
        for (slot, g) in self.slots.values_mut().zip(grads) {
            slot.value.set_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.values_mut() {
            slot.value.clear_grad();
        }
    }

    /// One bias-corrected Adam update. Gradients are consumed (cleared) afterwards.
    pub fn adam_step(&mut self, lr: f32, cfg: AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.slots.iter().find(|(_, s)| s.value.grad().is_none()) {
            return Err(Error::Invariant(format!("missing gradient for {name}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for slot in self.slots.values_mut() {
            let g = slot.value.grad().map(<[f32]>::to_vec).unwrap_or_default();
            let Slot { value, m, v } = slot;
            for (i, p) in value.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            value.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(vals: &[f32]) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Array::new(vec![vals.len()], vals.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParameterStore::new();
        s.insert("b", Array::scalar(1.0)).unwrap();
        s.insert("a", Array::scalar(2.0)).unwrap();
        assert!(s.insert("b", Array::scalar(3.0)).is_err());
        let names: Vec<_> = s.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["b", "a"]);
        let (m, v) = s.moments("a").unwrap();
        assert_eq!((m.len(), v.len()), (1, 1));
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = store_with(&[0.5, -1.5]);
        s.set_grads(vec![vec![0.0, 0.0]]).unwrap();
        s.adam_step(0.1, AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.5, -1.5]);
        assert_eq!(s.step(), 1);
        assert!(s.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with(&[1.0]);
        s.set_grads(vec![vec![3.7]]).unwrap();
        s.adam_step(0.01, AdamConfig::default()).unwrap();
        let moved = 1.0 - s.get("w").unwrap().data()[0];
        assert!((moved - 0.01).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store_with(&[1.0]);
        assert!(matches!(
            s.adam_step(0.01, AdamConfig::default()),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn quadratic_bowl_loss_decreases() {
        let mut s = store_with(&[2.0, -3.0]);
        let loss = |s: &ParameterStore| s.get("w").unwrap().data().iter().map(|x| x * x).sum::<f32>();
        let mut prev = loss(&s);
        for _ in 0..3 {
            let g: Vec<f32> = s.get("w").unwrap().data().iter().map(|x| 2.0 * x).collect();
            s.set_grads(vec![g]).unwrap();
            s.adam_step(0.1, AdamConfig::default()).unwrap();
            let cur = loss(&s);
            assert!(cur < prev);
            prev = cur;
        }
    }
}
