//! Parameter stores, seeded initializers and the Adam optimizer.
//!
//! Every trainable component owns one [`ParamStore`] with a unique prefix;
//! the optimizer's registry is the set of fully-qualified parameter names it
//! is allowed to touch, which makes frozen-module violations checkable by
//! set intersection.

use crate::tensor::{Arr, Tape, TensorId};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

pub fn seeded_normal(shape: &[usize], std: f64, seed: u64) -> Arr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("std must be finite");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(&mut rng))
}

#[derive(Clone)]
pub struct ParamStore {
    prefix: String,
    names: Vec<String>,
    vals: Vec<Arr>,
}

/// Tape bindings for one store's parameters, in insertion order.
pub struct Bound {
    pub ids: Vec<TensorId>,
}

impl ParamStore {
    pub fn new(prefix: &str) -> Self {
        ParamStore {
            prefix: prefix.to_string(),
            names: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn add(&mut self, name: &str, v: Arr) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.vals.push(v);
        self.vals.len() - 1
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Arr {
        &self.vals[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Arr {
        &mut self.vals[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn full_name(&self, idx: usize) -> String {
        format!("{}/{}", self.prefix, self.names[idx])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(|n| n.as_str()).zip(self.vals.iter())
    }

    /// Put every parameter on the tape. `trainable` controls whether
    /// gradients flow into them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let ids = self
            .vals
            .iter()
            .map(|v| tape.leaf(v.clone(), trainable))
            .collect();
        Bound { ids }
    }

    /// Content hash over (name, shape, little-endian bytes) in name order.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut order: Vec<usize> = (0..self.names.len()).collect();
        order.sort_by(|&a, &b| self.names[a].cmp(&self.names[b]));
        let mut h = Sha256::new();
        for idx in order {
            h.update(self.names[idx].as_bytes());
            for d in self.vals[idx].shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in self.vals[idx].iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn num_scalars(&self) -> usize {
        self.vals.iter().map(|v| v.len()).sum()
    }
}

/// Combined fingerprint over several stores, order-insensitive by prefix.
pub fn fingerprint_stores(stores: &[&ParamStore]) -> [u8; 32] {
    let mut order: Vec<usize> = (0..stores.len()).collect();
    order.sort_by(|&a, &b| stores[a].prefix.cmp(&stores[b].prefix));
    let mut h = Sha256::new();
    for i in order {
        h.update(stores[i].prefix.as_bytes());
        h.update(stores[i].fingerprint());
    }
    h.finalize().into()
}

/// Collect leaf gradients back into a name-keyed map.
pub fn collect_grads(
    pairs: &[(&ParamStore, &Bound)],
    grads: &[Option<Arr>],
) -> HashMap<String, Arr> {
    let mut out = HashMap::new();
    for (store, bound) in pairs {
        for (idx, id) in bound.ids.iter().enumerate() {
            if let Some(g) = &grads[id.0] {
                out.insert(store.full_name(idx), g.clone());
            }
        }
    }
    out
}

/// Adam with bias correction; no weight decay.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<String, Arr>,
    v: HashMap<String, Arr>,
    registry: Vec<String>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
            registry: Vec::new(),
        }
    }

    /// Declare a store as optimizable. Only registered names are updated.
    pub fn register(&mut self, store: &ParamStore) {
        for idx in 0..store.len() {
            self.registry.push(store.full_name(idx));
        }
    }

    pub fn registry(&self) -> &[String] {
        &self.registry
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update. Gradients for unregistered names are rejected: the
    /// optimizer must never touch a frozen module.
    pub fn step(
        &mut self,
        stores: &mut [&mut ParamStore],
        grads: &HashMap<String, Arr>,
    ) -> crate::Result<()> {
        for name in grads.keys() {
            if !self.registry.iter().any(|r| r == name) {
                return Err(crate::Error::FrozenViolation(format!(
                    "gradient produced for unregistered parameter {name}"
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for store in stores.iter_mut() {
            for idx in 0..store.len() {
                let full = store.full_name(idx);
                let Some(g) = grads.get(&full) else { continue };
                let m = self
                    .m
                    .entry(full.clone())
                    .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                let v = self
                    .v
                    .entry(full.clone())
                    .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                *m = &*m * self.beta1 + &(g * (1.0 - self.beta1));
                *v = &*v * self.beta2 + &(g.mapv(|x| x * x) * (1.0 - self.beta2));
                let p = store.get_mut(idx);
                for ((pv, mv), vv) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

impl Adam {
    /// Serialize first/second moments and the step counter into a
    /// checkpoint under the `optimizer/` section.
    pub fn export_into(&self, ck: &mut crate::checkpoint::Checkpoint) {
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            ck.add_tensor(&format!("optimizer/m/{name}"), self.m[name].clone());
            ck.add_tensor(&format!("optimizer/v/{name}"), self.v[name].clone());
        }
        ck.add_tensor(
            "optimizer/t",
            ArrayD::from_elem(IxDyn(&[1]), self.t as f64),
        );
    }

    /// Restore moments for registered parameters from a checkpoint.
    pub fn import_from(&mut self, ck: &crate::checkpoint::Checkpoint) {
        for name in self.registry.clone() {
            if let Some(m) = ck.get(&format!("optimizer/m/{name}")) {
                self.m.insert(name.clone(), m.clone());
            }
            if let Some(v) = ck.get(&format!("optimizer/v/{name}")) {
                self.v.insert(name.clone(), v.clone());
            }
        }
        if let Some(t) = ck.get("optimizer/t") {
            self.t = t[[0]] as u64;
        }
    }
}

/// He-style init for a conv weight `[Cout, Cin, kh, kw]`.
pub fn conv_init(shape: &[usize], seed: u64) -> Arr {
    let fan_in: usize = shape[1..].iter().product();
    seeded_normal(shape, (2.0 / fan_in as f64).sqrt(), seed)
}

/// Xavier-style init for a linear weight `[In, Out]`.
pub fn linear_init(shape: &[usize], seed: u64) -> Arr {
    let fan_in = shape[0];
    seeded_normal(shape, (1.0 / fan_in as f64).sqrt(), seed)
}

pub fn zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    ArrayD::ones(IxDyn(shape))
}
