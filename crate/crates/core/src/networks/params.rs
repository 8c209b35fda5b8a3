use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered parameter collection of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub seed: u64,
    pub params: Vec<Param<T>>,
}

/// Shape and initialization recipe for one parameter array.
#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Standard deviation of the zero-mean normal init; zero for biases.
    pub std: f64,
}

impl<T: Real> NetParams<T> {
    pub(crate) fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = if s.std > 0.0 {
                    let dist = Normal::new(0.0, s.std).expect("finite init std");
                    (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
                } else {
                    vec![T::zero(); n]
                };
                Param {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data,
                }
            })
            .collect();
        Self { seed, params }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Flat element access in declaration order.
    pub fn flat_get(&self, mut index: usize) -> T {
        for p in &self.params {
            if index < p.data.len() {
                return p.data[index];
            }
            index -= p.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn flat_set(&mut self, mut index: usize, value: T) {
        for p in &mut self.params {
            if index < p.data.len() {
                p.data[index] = value;
                return;
            }
            index -= p.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn flatten(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn squared_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            for (a, &b) in p.data.iter_mut().zip(&q.data) {
                *a += alpha * b;
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for p in &mut self.params {
            for v in &mut p.data {
                *v *= alpha;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}
