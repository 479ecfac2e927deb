use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::TensorError;
use crate::scalar::Scalar;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A learnable dense tensor with its gradient slot.
///
/// Vectors are stored as single-column (or single-row) matrices so that every
/// parameter shares one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub data: Array2<T>,
    pub grad: Array2<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(name: impl Into<String>, data: Array2<T>) -> Self {
        let grad = Array2::zeros(data.raw_dim());
        Self {
            name: name.into(),
            data,
            grad,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum InitKind {
    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    UniformFanAvg,
    Zeros,
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitScheme {
    pub kind: InitKind,
    pub seed: u64,
}

impl InitScheme {
    pub fn uniform_fan_avg(seed: u64) -> Self {
        Self {
            kind: InitKind::UniformFanAvg,
            seed,
        }
    }

    pub fn zeros() -> Self {
        Self {
            kind: InitKind::Zeros,
            seed: 0,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            kind: InitKind::Constant(c),
            seed: 0,
        }
    }
}

/// Initializes a `rows x cols` tensor, treating `cols` as fan-in and `rows` as fan-out.
pub fn init<T: Scalar>(name: &str, shape: (usize, usize), scheme: InitScheme) -> ParamTensor<T> {
    init_with_fans(name, shape, shape.1, shape.0, scheme)
}

/// Like [`init`] with explicit fans, for stacked tensors whose blocks are the logical matrices.
pub fn init_with_fans<T: Scalar>(
    name: &str,
    shape: (usize, usize),
    fan_in: usize,
    fan_out: usize,
    scheme: InitScheme,
) -> ParamTensor<T> {
    let data = match scheme.kind {
        InitKind::Zeros => Array2::zeros(shape),
        InitKind::Constant(c) => Array2::from_elem(shape, T::lit(c)),
        InitKind::UniformFanAvg => {
            let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let mut rng = ChaCha8Rng::seed_from_u64(scheme.seed);
            Array2::from_shape_simple_fn(shape, || T::lit(dist.sample(&mut rng)))
        }
    };
    ParamTensor::new(name, data)
}

/// Ordered collection of every parameter of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: Vec<ParamTensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, tensor: ParamTensor<T>) -> ParamId {
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a plain array as a parameter.
    pub fn add(&mut self, name: impl Into<String>, data: Array2<T>) -> ParamId {
        self.push(ParamTensor::new(name, data))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(ParamTensor::zero_grad);
    }

    /// Adds `grads` into every gradient slot.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (tensor, g) in self.tensors.iter_mut().zip(grads.slots.iter()) {
            if let Some(g) = g {
                tensor.grad += g;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(ParamTensor::is_finite)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let (rows, cols) = t.shape();
                let values = t.data.iter().map(|v| v.to_f64_lossy()).collect();
                (
                    t.name.clone(),
                    TensorRecord {
                        shape: [rows, cols],
                        values,
                    },
                )
            })
            .collect();
        Checkpoint { tensors }
    }

    /// Overwrites parameter values from a checkpoint. Every tensor of the store must be present
    /// with a matching shape; extra checkpoint entries are rejected.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), TensorError> {
        if ckpt.tensors.len() != self.tensors.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                ckpt.tensors.len(),
                self.tensors.len()
            )));
        }
        for t in &mut self.tensors {
            let rec = ckpt
                .tensors
                .get(&t.name)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor `{}`", t.name)))?;
            let shape = (rec.shape[0], rec.shape[1]);
            if shape != t.shape() || rec.values.len() != t.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_checkpoint",
                    left: t.shape(),
                    right: shape,
                });
            }
            for (dst, &src) in t.data.iter_mut().zip(rec.values.iter()) {
                *dst = T::lit(src);
            }
            t.zero_grad();
        }
        Ok(())
    }
}

/// Name -> shape + row-major values. Serialized as JSON; `f64` values round-trip exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Per-parameter gradient buffers produced by a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub(crate) slots: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            slots: vec![None; num_params],
        }
    }

    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self::new(store.len())
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &Array2<T>) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub(crate) fn add_owned(&mut self, id: ParamId, g: Array2<T>) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Elementwise sum, in place.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_constant_schemes() {
        let z: ParamTensor<f64> = init("z", (3, 2), InitScheme::zeros());
        assert!(z.data.iter().all(|&v| v == 0.0));
        let c: ParamTensor<f64> = init("c", (2, 2), InitScheme::constant(1.0));
        assert!(c.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a: ParamTensor<f64> = init("a", (5, 7), InitScheme::uniform_fan_avg(42));
        let b: ParamTensor<f64> = init("a", (5, 7), InitScheme::uniform_fan_avg(42));
        assert_eq!(a.data, b.data);
        let c: ParamTensor<f64> = init("a", (5, 7), InitScheme::uniform_fan_avg(43));
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn uniform_respects_bound() {
        let t: ParamTensor<f64> = init("t", (30, 20), InitScheme::uniform_fan_avg(1));
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(t.data.iter().all(|v| v.abs() <= bound));
        assert!(t.data.iter().any(|v| v.abs() > bound * 0.5));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut store = ParamStore::<f64>::new();
        store.push(init("w", (4, 3), InitScheme::uniform_fan_avg(9)));
        store.add("eps", Array2::from_elem((1, 1), 1.0 / 3.0));
        let json = serde_json::to_string(&store.to_checkpoint()).unwrap();
        let ckpt: Checkpoint = serde_json::from_str(&json).unwrap();
        let mut other = store.clone();
        other.iter_mut().for_each(|t| t.data.fill(0.0));
        other.load_checkpoint(&ckpt).unwrap();
        assert_eq!(store, other);
    }

    #[test]
    fn checkpoint_rejects_wrong_shape() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Array2::zeros((2, 2)));
        let mut ckpt = store.to_checkpoint();
        ckpt.tensors.get_mut("w").unwrap().shape = [1, 4];
        assert!(store.load_checkpoint(&ckpt).is_err());
    }
}
