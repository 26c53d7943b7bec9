use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named trainable tensors in a fixed registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> usize {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "{name}: data/shape");
        assert!(!self.index.contains_key(name), "duplicate tensor {name}");
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        self.tensors.len() - 1
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.add(name, shape, vec![0.0; shape.iter().product()])
    }

    pub fn add_filled(&mut self, name: &str, shape: &[usize], value: f64) -> usize {
        self.add(name, shape, vec![value; shape.iter().product()])
    }

    pub fn add_normal<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> usize {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.iter().product()).map(|_| dist.sample(rng)).collect();
        self.add(name, shape, data)
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i].data
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.0.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}
