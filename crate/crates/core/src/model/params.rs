use std::fmt;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::RunningStats;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on +-sqrt(6 / (fan_in + fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Every trainable tensor and batch-norm buffer a layer tree needs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Specs {
    pub params: Vec<ParamSpec>,
    /// Batch-norm layer name and channel count.
    pub norms: Vec<(String, usize)>,
}

impl Specs {
    pub fn param(&mut self, name: String, shape: Shape, init: Init) {
        self.params.push(ParamSpec { name, shape, init });
    }

    pub fn norm(&mut self, name: String, channels: usize) {
        self.norms.push((name, channels));
    }

    /// Parameter names in spec order, for [`Forward::bind`](super::Forward::bind).
    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Number of trainable scalars. Running statistics are not counted.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.shape.numel()).sum()
    }

    /// Trainable scalars grouped by module (the first two name components).
    pub fn breakdown(&self) -> ParamCount {
        let mut groups: IndexMap<String, usize> = IndexMap::new();
        for p in &self.params {
            let parts: Vec<&str> = p.name.split('.').collect();
            let keep = (parts.len() - 1).clamp(1, 2);
            *groups.entry(parts[..keep].join(".")).or_default() += p.shape.numel();
        }
        ParamCount {
            total: self.count(),
            modules: groups.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub modules: Vec<(String, usize)>,
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.modules.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(5);
        for (m, n) in &self.modules {
            writeln!(f, "{m:<width$}  {n:>10}")?;
        }
        write!(f, "{:<width$}  {:>10}", "total", self.total)
    }
}

/// Named model tensors in a fixed order, plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: IndexMap<String, Tensor<T>>,
    norms: IndexMap<String, RunningStats<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Glorot-uniform kernels, zero biases and betas, unit gammas.
    pub fn init(specs: &Specs, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .params
            .iter()
            .map(|p| {
                let t = match p.init {
                    Init::Zeros => Tensor::zeros(p.shape),
                    Init::Ones => Tensor::full(p.shape, T::one()),
                    Init::Glorot { fan_in, fan_out } => {
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        let data = (0..p.shape.numel())
                            .map(|_| T::lit(rng.random_range(-limit..limit)))
                            .collect();
                        Tensor::new(p.shape, data).expect("sized from shape")
                    }
                };
                (p.name.clone(), t)
            })
            .collect();
        let norms = specs
            .norms
            .iter()
            .map(|(name, c)| (name.clone(), RunningStats::new(*c)))
            .collect();
        ModelParams { tensors, norms }
    }

    pub fn from_parts(
        tensors: IndexMap<String, Tensor<T>>,
        norms: IndexMap<String, RunningStats<T>>,
    ) -> Self {
        ModelParams { tensors, norms }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.values_mut()
    }

    pub fn norm(&self, name: &str) -> Option<&RunningStats<T>> {
        self.norms.get(name)
    }

    pub fn norm_mut(&mut self, name: &str) -> Option<&mut RunningStats<T>> {
        self.norms.get_mut(name)
    }

    pub fn norms(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.norms.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
            && self
                .norms
                .values()
                .all(|s| s.mean.iter().chain(&s.var).all(|v| v.is_finite()))
    }

    /// L2 norm of every tensor, for diagnostics.
    pub fn norm_table(&self) -> Vec<(String, f64)> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.l2_norm())).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect();
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            norms: self
                .norms
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Checks every name and shape against `specs`, ignoring order.
    pub fn check_against(&self, specs: &Specs) -> Result<()> {
        let mut problems = Vec::new();
        for p in &specs.params {
            match self.tensors.get(&p.name) {
                None => problems.push(format!("missing {}", p.name)),
                Some(t) if t.shape() != p.shape => {
                    problems.push(format!("{}: shape {} expected {}", p.name, t.shape(), p.shape))
                }
                _ => {}
            }
        }
        for (name, c) in &specs.norms {
            match self.norms.get(name) {
                None => problems.push(format!("missing running stats {name}")),
                Some(s) if s.mean.len() != *c || s.var.len() != *c => {
                    problems.push(format!("{name}: running stats of {} channels, expected {c}", s.mean.len()))
                }
                _ => {}
            }
        }
        if self.tensors.len() != specs.params.len() || self.norms.len() != specs.norms.len() {
            let known: std::collections::HashSet<&str> = specs
                .params
                .iter()
                .map(|p| p.name.as_str())
                .chain(specs.norms.iter().map(|(n, _)| n.as_str()))
                .collect();
            for name in self.tensors.keys().chain(self.norms.keys()) {
                if !known.contains(name.as_str()) {
                    problems.push(format!("unexpected {name}"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "parameters do not match the model: {}",
                problems.join("; ")
            )))
        }
    }
}
