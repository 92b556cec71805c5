use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer parameter group. Groups can be given distinct learning rates.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
}

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Normal with the given standard deviation, truncated at two standard
    /// deviations.
    TruncatedNormal(f64),
}

/// Named, ordered collection of learnable tensors.
///
/// Parameters are addressed by dotted paths (`encoder.layer0.attn.wq`) and
/// stored behind `Arc` so that graphs can reference them without copying.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    groups: Vec<ParamGroup>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> ParamId {
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Constant(c) => Tensor::filled(shape, c),
            Init::TruncatedNormal(std) => {
                let normal = Normal::new(0.0, std).expect("valid std");
                Tensor::from_fn(shape, |_| loop {
                    let x: f64 = normal.sample(rng);
                    if x.abs() <= 2.0 * std {
                        break x;
                    }
                })
            }
        };
        self.insert(name, tensor, group)
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.names.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(tensor));
        self.groups.push(group);
        id
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    /// Mutable access; clones the tensor if a graph still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<(), NumericsError> {
        if tensor.shape() != self.values[id.0].shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "param_set",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        self.values[id.0] = Arc::new(tensor);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Copies every parameter of `other` whose name and shape match. Returns
    /// the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, &src) in &other.index {
            if let Some(&dst) = self.index.get(name) {
                if self.values[dst.0].shape() == other.values[src.0].shape() {
                    self.values[dst.0] = Arc::clone(&other.values[src.0]);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Dense per-parameter gradient buffers, indexed like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, grad: &[f64]) {
        self.grads[id.0]
            .iter_mut()
            .zip(grad)
            .for_each(|(o, &g)| *o += g);
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.iter_mut().zip(b).for_each(|(o, &g)| *o += g);
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn norm(&self, id: ParamId) -> f64 {
        self.grads[id.0].iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= factor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let id = store.add(
            "w",
            &[64, 64],
            Init::TruncatedNormal(0.02),
            ParamGroup::Backbone,
            &mut rng,
        );
        assert!(store.get(id).data().iter().all(|v| v.abs() <= 0.04));
        let mean = store.get(id).data().iter().sum::<f64>() / 4096.0;
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn load_matching_skips_shape_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new();
        a.add("x", &[2], Init::Ones, ParamGroup::Backbone, &mut rng);
        a.add("y", &[3], Init::Ones, ParamGroup::Backbone, &mut rng);
        let mut b = ParamStore::new();
        b.add("x", &[2], Init::Zeros, ParamGroup::Backbone, &mut rng);
        b.add("y", &[4], Init::Zeros, ParamGroup::Backbone, &mut rng);
        assert_eq!(b.load_matching(&a), 1);
        assert_eq!(b.get(b.id("x").unwrap()).data(), &[1.0, 1.0]);
    }
}
