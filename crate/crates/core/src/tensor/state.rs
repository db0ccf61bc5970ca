use indexmap::IndexMap;

use super::{Gradients, Tape, Tensor, TensorError, TensorResult, Var};
use crate::Scalar;

/// A named model tensor. Running statistics are stored as non-trainable
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<T>>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Ordered name → parameter map plus the optimizer step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelState<T> {
    params: IndexMap<String, Param<T>>,
    pub step: u64,
}

/// Tape handles for every parameter of a [`ModelState`], valid for one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> TensorResult<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl<T: Scalar> ModelState<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            step: 0,
        }
    }

    /// Inserts a parameter; replacing an existing name is an error.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> TensorResult<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Shape {
                op: "ModelState::insert",
                reason: format!("duplicate parameter `{name}`"),
            });
        }
        self.params.insert(
            name,
            Param {
                value,
                requires_grad,
                grad: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> TensorResult<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> TensorResult<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> TensorResult<&Tensor<T>> {
        self.get(name).map(|p| &p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalars in trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.len())
            .sum()
    }

    /// Marks every parameter as non-trainable and drops stored gradients.
    pub fn freeze(&mut self) {
        for p in self.params.values_mut() {
            p.requires_grad = false;
            p.grad = None;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params.values().all(|p| !p.requires_grad)
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), p.requires_grad)))
            .collect();
        BoundParams { vars }
    }

    /// Like [`ModelState::bind`] but every leaf is a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.constant(p.value.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Adds the tape gradients of the bound leaves into `grad`. Trainable
    /// parameters the loss did not reach receive zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &BoundParams, grads: &Gradients<T>) {
        for (name, p) in self.params.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(&v) = bound.vars.get(name) else { continue };
            let g = grads.wrt(tape, v);
            match &mut p.grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Blends batch statistics into `{prefix}.running_mean` / `.running_var`.
    pub fn update_running_stats(&mut self, prefix: &str, stats: &BatchStats<T>, momentum: T) -> TensorResult<()> {
        for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let p = self.get_mut(&format!("{prefix}.{suffix}"))?;
            for (r, &s) in p.value.data_mut().iter_mut().zip(fresh) {
                *r = (T::one() - momentum) * *r + momentum * s;
            }
        }
        Ok(())
    }

    /// Same names, shapes and trainability.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((a, pa), (b, pb))| {
                a == b && pa.value.shape() == pb.value.shape() && pa.requires_grad == pb.requires_grad
            })
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            requires_grad: p.requires_grad,
                            grad: p.grad.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }
}
