//! Named parameter containers shared by every model.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-norm running-statistic momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered map from hierarchical names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let tensor = if trainable { tensor.with_grad() } else { tensor };
        self.entries.insert(name, Entry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Entry> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Entry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Keeps only entries whose name satisfies `keep`, preserving order.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|k, _| keep(k));
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.tensor.zero_grad();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Folds batch-norm statistics recorded during a training forward pass
    /// into the running estimates. Updates for layers not in this store are
    /// ignored so a graph spanning several stores can be split between them.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for up in updates {
            let mean_key = format!("{}.running_mean", up.layer);
            let var_key = format!("{}.running_var", up.layer);
            let steps_key = format!("{}.num_batches", up.layer);
            if !self.contains(&mean_key) {
                continue;
            }
            for (key, batch) in [(&mean_key, &up.mean), (&var_key, &up.var)] {
                if let Some(e) = self.entries.get_mut(key.as_str()) {
                    for (r, b) in e.tensor.data_mut().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                }
            }
            if let Some(e) = self.entries.get_mut(&steps_key) {
                e.tensor.data_mut()[0] += 1.0;
            }
        }
    }
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A model made of one or more parameter stores.
pub trait Module {
    fn stores(&self) -> Vec<&ParamStore>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;

    fn zero_grads(&mut self) {
        for s in self.stores_mut() {
            s.zero_grads();
        }
    }

    fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for s in self.stores_mut() {
            s.apply_stat_updates(updates);
        }
    }

    fn find(&self, name: &str) -> Option<&Entry> {
        self.stores().into_iter().find_map(|s| s.get(name))
    }

    fn find_mut(&mut self, name: &str) -> Option<&mut Entry> {
        self.stores_mut().into_iter().find_map(|s| s.get_mut(name))
    }

    fn param_names(&self) -> Vec<String> {
        self.stores()
            .into_iter()
            .flat_map(|s| s.names().map(str::to_owned).collect::<Vec<_>>())
            .collect()
    }

    /// Total trainable scalar count.
    fn num_scalars(&self) -> usize {
        self.stores().into_iter().map(ParamStore::num_scalars).sum()
    }
}

impl Module for ParamStore {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![self]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self]
    }
}

/// 64-bit FNV-1a, used to derive stable per-name seeds.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the parameter `name` of a model built from `seed`. Independent of
/// every other parameter, so truncated or partially transferred models
/// initialize their fresh layers identically.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    mix64(seed ^ fnv1a(name.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[1]), true).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let mut s = ParamStore::new();
        s.insert("bn.running_mean", Tensor::zeros(&[2]), false).unwrap();
        s.insert("bn.running_var", Tensor::full(&[2], 1.0), false).unwrap();
        s.insert("bn.num_batches", Tensor::zeros(&[1]), false).unwrap();
        s.apply_stat_updates(&[StatUpdate {
            layer: "bn".into(),
            mean: vec![1.0, -1.0],
            var: vec![2.0, 0.0],
        }]);
        let m = s.tensor("bn.running_mean").unwrap().data();
        assert!((m[0] - 0.1).abs() < 1e-15 && (m[1] + 0.1).abs() < 1e-15);
        let v = s.tensor("bn.running_var").unwrap().data();
        assert!((v[0] - 1.1).abs() < 1e-15 && (v[1] - 0.9).abs() < 1e-15);
        assert_eq!(s.tensor("bn.num_batches").unwrap().item(), 1.0);
    }

    #[test]
    fn param_seed_depends_on_name() {
        assert_ne!(param_seed(1, "a"), param_seed(1, "b"));
        assert_eq!(param_seed(7, "stage5.x"), param_seed(7, "stage5.x"));
    }
}
