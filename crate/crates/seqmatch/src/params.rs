//! Named, ordered storage for learnable parameters.
//!
//! Every model owns one [`ParamSet`]. The set's insertion order is fixed at
//! construction, which makes checkpoints, Adam state, and per-batch tape
//! insertion deterministic: [`ParamSet::insert_into`] returns tape ids
//! indexed by [`ParamId`].

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    entries: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "param {name}: data length {} vs shape {:?}", data.len(), shape);
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(Param { name: name.to_string(), shape, data });
        id
    }

    /// Uniform init in [-0.1, 0.1].
    pub fn add_uniform(&mut self, name: &str, shape: Vec<usize>, rng: &mut impl Rng) -> ParamId {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-0.1..0.1)).collect();
        self.add(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let numel: usize = shape.iter().product();
        self.add(name, shape, vec![0.0; numel])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    /// Pushes every parameter onto a tape in id order; the returned vector is
    /// indexed by [`ParamId::index`].
    pub fn insert_into(&self, tape: &mut Tape, trainable: impl Fn(ParamId) -> bool) -> Vec<TensorId> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf(p.data.clone(), p.shape.clone(), trainable(ParamId(i))))
            .collect()
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|p| p.data.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        assert_eq!(snapshot.len(), self.entries.len(), "snapshot does not match parameter set");
        for (p, s) in self.entries.iter_mut().zip(snapshot) {
            assert_eq!(p.data.len(), s.len(), "snapshot shape mismatch for {}", p.name);
            p.data.copy_from_slice(s);
        }
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ids_are_stable_and_named() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", vec![2], vec![1.0, 2.0]);
        let b = ps.add_zeros("b", vec![2, 2]);
        assert_eq!(ps.id_of("a"), Some(a));
        assert_eq!(ps.id_of("b"), Some(b));
        assert_eq!(ps.name(b), "b");
        assert_eq!(ps.data(a), &[1.0, 2.0]);
    }

    #[test]
    fn uniform_init_is_seeded_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let mut p1 = ParamSet::new();
        let mut p2 = ParamSet::new();
        let a1 = p1.add_uniform("w", vec![4, 4], &mut r1);
        let a2 = p2.add_uniform("w", vec![4, 4], &mut r2);
        assert_eq!(p1.data(a1), p2.data(a2));
        assert!(p1.data(a1).iter().all(|v| (-0.1..0.1).contains(v)));
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", vec![2], vec![1.0, 2.0]);
        let snap = ps.snapshot();
        ps.data_mut(a)[0] = 9.0;
        ps.restore(&snap);
        assert_eq!(ps.data(a), &[1.0, 2.0]);
    }
}
