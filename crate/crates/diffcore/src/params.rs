//! Named parameter storage.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::checkpoint::NamedTensor;
use crate::error::{DiffError, Result};
use crate::real::Real;
use crate::tensor::{check_len, Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real> {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<T>>,
}

impl<T: Real> Param<T> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn values_mut(&mut self) -> &mut Vec<T> {
        Arc::make_mut(&mut self.data)
    }
}

/// Parameters keyed by dotted names, kept in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<()> {
        check_len("param", shape, data.len())?;
        self.params.insert(
            name.into(),
            Param {
                shape: shape.to_vec(),
                data: Arc::new(data),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Param::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Moves every parameter of `other` in, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    /// Subset whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Tensors for a forward pass: graph leaves when `graph` is given,
    /// constants otherwise.
    pub fn bind(&self, graph: Option<&Graph<T>>) -> Result<BoundParams<T>> {
        let mut tensors = BTreeMap::new();
        for (name, p) in &self.params {
            let t = match graph {
                Some(g) => g.leaf_shared(&p.shape, p.data.clone())?,
                None => Tensor::constant_shared(&p.shape, p.data.clone())?,
            };
            tensors.insert(name.clone(), t);
        }
        Ok(BoundParams { tensors })
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            data: Arc::new(p.data.iter().map(|v| U::lit(v.as_f64())).collect()),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Checkpoint records, optionally renamed with a prefix.
    pub fn to_named(&self, prefix: &str) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|(k, p)| NamedTensor {
                name: format!("{prefix}{k}"),
                shape: p.shape.clone(),
                data: p.data.iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }

    /// Collects records whose names start with `prefix`, stripping it.
    pub fn from_named(records: &[NamedTensor], prefix: &str) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for r in records {
            if let Some(rest) = r.name.strip_prefix(prefix) {
                store.params.insert(
                    rest.to_string(),
                    Param {
                        shape: r.shape.clone(),
                        data: Arc::new(r.data.iter().map(|&v| T::lit(v as f64)).collect()),
                    },
                );
            }
        }
        store
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore<T>) -> Result<()> {
        for (k, p) in &self.params {
            let q = other.get(k)?;
            if q.shape != p.shape {
                return Err(DiffError::shape("param layout", &p.shape, &q.shape));
            }
        }
        if let Some(extra) = other.names().find(|k| !self.contains(k)) {
            return Err(DiffError::arg("param layout", format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Parameters bound to tensors for one forward pass.
pub struct BoundParams<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> BoundParams<T> {
    pub fn from_tensors(tensors: impl IntoIterator<Item = (String, Tensor<T>)>) -> Self {
        BoundParams {
            tensors: tensors.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    /// Accumulated gradients after backward, zero-filled where a parameter
    /// was not reached.
    pub fn grads(&self) -> BTreeMap<String, Vec<T>> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()])))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    /// Same values as untracked constants.
    pub fn detached(&self) -> BoundParams<T> {
        BoundParams {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.detach())).collect(),
        }
    }
}
