//! Named parameter storage with per-group trainability flags.
//!
//! Every trainable tensor in the model lives here under a dotted name
//! (`enc_id.layer0.attn.wq`, `dec.tok_emb`, ...). Stages freeze or thaw
//! whole prefixes, and checksums over the store back the cache-staleness
//! and freeze-contract checks.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub trainable: bool,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = Array2::zeros(value.raw_dim());
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Gaussian init, std `scale`, drawn from the given stream.
    pub fn register_randn(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let mut value = Array2::zeros((rows, cols));
        for v in value.iter_mut() {
            // Box-Muller from two uniforms keeps us independent of
            // distribution-crate version churn.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            *v = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * scale;
        }
        self.register(name, value)
    }

    pub fn register_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.register(name, Array2::zeros((rows, cols)))
    }

    pub fn register_const(&mut self, name: &str, rows: usize, cols: usize, c: f64) -> ParamId {
        self.register(name, Array2::from_elem((rows, cols), c))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Array2<f64>) {
        let e = &mut self.entries[id.0];
        e.grad += g;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Freeze or thaw every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iterate in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Names sorted lexicographically (the canonical order for hashing and
    /// checkpoint layout).
    pub fn sorted_names(&self) -> Vec<String> {
        self.by_name.keys().cloned().collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// SHA-256 over (name, shape, values) in name order. Two stores with
    /// identical parameters hash identically regardless of registration
    /// order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for name in self.by_name.keys() {
            let e = &self.entries[self.by_name[name]];
            hasher.update(name.as_bytes());
            hasher.update((e.value.nrows() as u64).to_le_bytes());
            hasher.update((e.value.ncols() as u64).to_le_bytes());
            for v in e.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Checksum restricted to names under a prefix (freeze audits).
    pub fn checksum_prefix(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for name in self.by_name.keys() {
            if !name.starts_with(prefix) {
                continue;
            }
            let e = &self.entries[self.by_name[name]];
            hasher.update(name.as_bytes());
            for v in e.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    #[test]
    fn checksum_ignores_registration_order() {
        let mut rng = rng_for(7, "init");
        let mut a = ParamStore::new();
        a.register_randn("x", 2, 3, 0.1, &mut rng);
        let xv = a.value(a.id("x").unwrap()).clone();
        a.register_zeros("y", 1, 4);

        let mut b = ParamStore::new();
        b.register_zeros("y", 1, 4);
        b.register("x", xv);
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn freeze_by_prefix() {
        let mut s = ParamStore::new();
        s.register_zeros("enc.a", 1, 1);
        s.register_zeros("dec.b", 1, 1);
        s.set_trainable_prefix("enc.", false);
        assert!(!s.is_trainable(s.id("enc.a").unwrap()));
        assert!(s.is_trainable(s.id("dec.b").unwrap()));
    }
}
