//! Named parameter storage, initialization and the Adam optimizer.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{CgnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix` followed by a dot.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| {
            let n = self.name(*id);
            n.len() > prefix.len() && n.starts_with(prefix) && n.as_bytes()[prefix.len()] == b'.'
        })
    }

    pub fn count_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Order-sensitive FNV-1a hash of every value, for change detection.
    pub fn fingerprint(&self, ids: &[ParamId]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in ids {
            for v in self.value(*id).data() {
                for byte in v.to_f64_lossy().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Checkpoint archive: one JSON object keyed by module name, each a map
    /// from parameter name to `{shape, data}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut modules: BTreeMap<String, BTreeMap<String, SavedTensor>> = BTreeMap::new();
        for id in self.ids() {
            let name = self.name(id);
            let (module, rest) = name.split_once('.').unwrap_or(("root", name));
            let t = self.value(id);
            modules.entry(module.to_string()).or_default().insert(
                rest.to_string(),
                SavedTensor {
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.to_f64_lossy()).collect(),
                },
            );
        }
        let text = serde_json::to_string(&modules).map_err(|e| CgnError::parse(path, e))?;
        std::fs::write(path, text).map_err(|e| CgnError::io(format!("writing {}", path.display()), e))
    }

    /// Overwrites every parameter of `self` from the archive at `path`.
    /// Names and shapes must match exactly.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CgnError::io(format!("reading checkpoint {}", path.display()), e))?;
        let modules: BTreeMap<String, BTreeMap<String, SavedTensor>> =
            serde_json::from_str(&text).map_err(|e| CgnError::parse(path, e))?;
        for i in 0..self.values.len() {
            let name = self.names[i].clone();
            let (module, rest) = name.split_once('.').unwrap_or(("root", &name));
            let saved = modules
                .get(module)
                .and_then(|m| m.get(rest))
                .ok_or_else(|| CgnError::parse(path, format!("missing parameter `{name}`")))?;
            if saved.shape != self.values[i].shape() {
                return Err(CgnError::parse(path, format!("shape mismatch for `{name}`")));
            }
            let data = saved.data.iter().map(|&v| T::from_f64_lossy(v)).collect();
            self.values[i] = Tensor::from_vec(&saved.shape, data)?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// He-normal initialization for a conv or linear weight with `fan_in` inputs.
pub fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let sd = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, sd).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam over a fixed subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>, ids: Vec<ParamId>) -> Self {
        let m = ids
            .iter()
            .map(|id| Tensor::zeros(store.value(*id).shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            config,
            ids,
            m,
            v,
            step: 0,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One update using the gradients of the optimizer's own parameters.
    /// Parameters outside the optimizer's subset are never touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let wd = T::from_f64_lossy(c.weight_decay);
        for (k, id) in self.ids.iter().enumerate() {
            let Some(g) = grads.param(*id) else { continue };
            let value = store.value_mut(*id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((p, &gr), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gr = gr + wd * *p;
                *mi = b1 * *mi + (one - b1) * gr;
                *vi = b2 * *vi + (one - b2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("m.x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store, vec![id]);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(x, x);
            let s = g.sum(sq);
            let grads = g.backward(s);
            adam.step(&mut store, &grads);
        }
        assert!(store.value(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut store = ParamStore::<f32>::new();
        store.insert("gen.w", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.5]).unwrap());
        store.insert("disc.b", Tensor::from_vec(&[1], vec![-0.25]).unwrap());
        store.save(&path).unwrap();
        let mut other = store.clone();
        other.value_mut(ParamId(0)).data_mut()[0] = 100.0;
        other.load_into(&path).unwrap();
        assert_eq!(other.value(ParamId(0)), store.value(ParamId(0)));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"gen\"") && text.contains("\"disc\""));
    }

    #[test]
    fn prefix_selection_respects_dot_boundary() {
        let mut store = ParamStore::<f32>::new();
        store.insert("disc.w", Tensor::zeros(&[1]));
        store.insert("discx.w", Tensor::zeros(&[1]));
        let ids: Vec<_> = store.ids_with_prefix("disc").collect();
        assert_eq!(ids, vec![ParamId(0)]);
    }
}
