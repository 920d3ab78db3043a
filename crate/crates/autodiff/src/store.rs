//! Named parameter storage and optimizers.
//!
//! Parameters are kept out of the tape between steps. Iteration order is
//! the key order of the underlying `BTreeMap`, so updates and
//! serialization are deterministic.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Array2<f64>>;

/// Named `f64` matrices with deterministic ordering.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Gaussian-initialized matrix parameter.
    pub fn insert_normal(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let value = Array2::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.insert(name, value);
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn insert_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::from_elem((rows, cols), 1.0));
    }
}

/// Serializable snapshot of a [`ParamStore`].
#[derive(Serialize, Deserialize)]
pub struct ParamSnapshot {
    params: BTreeMap<String, SerMatrix>,
}

#[derive(Serialize, Deserialize)]
struct SerMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&ParamStore> for ParamSnapshot {
    fn from(store: &ParamStore) -> Self {
        let params = store
            .map
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    SerMatrix {
                        rows: v.nrows(),
                        cols: v.ncols(),
                        data: v.iter().cloned().collect(),
                    },
                )
            })
            .collect();
        ParamSnapshot { params }
    }
}

impl TryFrom<ParamSnapshot> for ParamStore {
    type Error = String;

    fn try_from(snap: ParamSnapshot) -> Result<Self, String> {
        let mut map = BTreeMap::new();
        for (k, m) in snap.params {
            if m.rows * m.cols != m.data.len() {
                return Err(format!("parameter {k}: shape/data length mismatch"));
            }
            let arr = Array2::from_shape_vec((m.rows, m.cols), m.data)
                .map_err(|e| format!("parameter {k}: {e}"))?;
            map.insert(k, arr);
        }
        Ok(ParamStore { map })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter moment buffers.
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Parameters without a gradient entry are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *m = &*m * self.cfg.beta1 + g * (1.0 - self.cfg.beta1);
            *v = &*v * self.cfg.beta2 + &(g * g) * (1.0 - self.cfg.beta2);
            let mhat = &*m / bc1;
            let vhat = &*v / bc2;
            let update = mhat / (vhat.mapv(f64::sqrt) + self.cfg.eps) * self.cfg.lr;
            *p -= &update;
        }
    }
}

/// Plain gradient descent.
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step(&self, store: &mut ParamStore, grads: &GradMap) {
        for (name, g) in grads {
            let p = store.get_mut(name);
            *p -= &(g * self.lr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Array2::from_elem((1, 1), 5.0));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..300 {
            let x = store.get("x")[(0, 0)];
            let mut grads = GradMap::new();
            grads.insert("x".into(), Array2::from_elem((1, 1), 2.0 * x));
            adam.step(&mut store, &grads);
        }
        assert!(store.get("x")[(0, 0)].abs() < 1e-3);
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.insert_normal("w", 3, 3, 0.5, &mut rng);
        let before = store.get("w").clone();
        let mut grads = GradMap::new();
        grads.insert("w".into(), Array2::zeros((3, 3)));
        Sgd::new(0.1).step(&mut store, &grads);
        assert_eq!(store.get("w"), &before);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.insert_normal("a.w", 2, 3, 0.1, &mut rng);
        store.insert_ones("b.g", 1, 4);
        let snap = ParamSnapshot::from(&store);
        let text = serde_json::to_string(&snap).unwrap();
        let back: ParamSnapshot = serde_json::from_str(&text).unwrap();
        let restored = ParamStore::try_from(back).unwrap();
        assert_eq!(restored.get("a.w"), store.get("a.w"));
        assert_eq!(restored.get("b.g"), store.get("b.g"));
    }
}
