use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensors::Tensor;

/// Handle to one parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors. Values sit behind `Arc`, so binding them into a
/// fresh tape costs a pointer copy and the optimizer updates in place once
/// the tape is gone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Arc<Vec<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "parameter shape");
        self.names.push(name.into());
        self.shapes.push(shape.to_vec());
        self.values.push(Arc::new(data));
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `±1/√fan_in`.
    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = T::one() / T::from_usize_lossy(fan_in.max(1)).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::uniform(rng, -bound, bound)).collect();
        self.add(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![T::zero(); n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn value(&self, i: usize) -> &[T] {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Vec<T> {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn set(&mut self, i: usize, data: Vec<T>) -> Result<()> {
        if data.len() != self.values[i].len() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                lhs: self.shapes[i].clone(),
                rhs: vec![data.len()],
            });
        }
        self.values[i] = Arc::new(data);
        Ok(())
    }

    /// Leaf tensors over the current values, one per parameter.
    pub fn bind(&self, requires_grad: bool) -> Bound<T> {
        let tensors = self
            .shapes
            .iter()
            .zip(&self.values)
            .map(|(s, v)| Tensor::from_shared(s, Arc::clone(v), requires_grad).expect("stored shape is valid"))
            .collect();
        Bound { tensors }
    }

    /// Parameters as `(shape, values)` pairs in store order.
    pub fn export(&self) -> Vec<(Vec<usize>, Vec<T>)> {
        self.shapes.iter().cloned().zip(self.values.iter().map(|v| v.as_ref().clone())).collect()
    }
}

/// Parameters bound into one tape.
#[derive(Clone, Debug)]
pub struct Bound<T: Real> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Bound<T> {
    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    /// Gradient per parameter after `backward`, zeros where none reached.
    pub fn grads(&self) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]))
            .collect()
    }
}
