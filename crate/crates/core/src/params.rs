//! Named parameter tensors, initialization, and checkpoint files.

use std::collections::HashMap;
use std::fs;
use std::ops::Index;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradReport, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

/// Graph leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))` for a `rows x cols` matrix.
pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "lstmn-checkpoint-v1";

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// # Panics
    /// On a duplicate name; parameter layouts are fixed by model code.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.values.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Gradients for every parameter after `g.backward`; unreachable ones are zero.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        bound.0.iter().map(|&v| g.grad_or_zeros(v)).collect()
    }

    /// Finite-difference check of `loss` over every parameter in the store.
    pub fn grad_check<F>(&self, loss: F, fd_step: f64, tolerance: f64) -> Result<GradReport>
    where
        F: Fn(&mut Graph, &Bound) -> Result<Var>,
    {
        grad_check(
            &self.names,
            &self.values,
            |g, vars| loss(g, &Bound(vars.to_vec())),
            fd_step,
            tolerance,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            tensors: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Overwrites every parameter from `path`. The file must hold exactly
    /// the store's tensor names, each with the same shape.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint {
                name: "<header>".into(),
                msg: format!("unknown format {}", file.format),
            });
        }
        let mut by_name: HashMap<String, NamedTensor> = file
            .tensors
            .into_iter()
            .map(|t| (t.name.clone(), t))
            .collect();
        let mut loaded = Vec::with_capacity(self.values.len());
        for (name, current) in self.names.iter().zip(&self.values) {
            let Some(t) = by_name.remove(name) else {
                return Err(Error::Checkpoint {
                    name: name.clone(),
                    msg: "missing from checkpoint".into(),
                });
            };
            if t.shape != current.shape() {
                return Err(Error::Checkpoint {
                    name: name.clone(),
                    msg: format!(
                        "shape {:?} in checkpoint, model expects {:?}",
                        t.shape,
                        current.shape()
                    ),
                });
            }
            loaded.push(Tensor::new(t.shape, t.data).map_err(|e| Error::Checkpoint {
                name: name.clone(),
                msg: e.to_string(),
            })?);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Checkpoint {
                name: extra.clone(),
                msg: "not part of this model".into(),
            });
        }
        self.values = loaded;
        Ok(())
    }
}
