//! Parameter initialization and the conv / batch-norm / linear building
//! blocks shared by the estimator and the classifier.

use rand::Rng;

use crate::tensor::{BatchNormMode, BatchStats, BoundParams, ModelState, PaddingMode, Tape, Tensor, TensorResult, Var};
use crate::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm statistics source for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

/// `U(−b, b)` with `b = √(6 / fan_in)`, times `scale`.
pub fn kaiming_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, scale: f64) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound) * scale))
}

pub fn add_conv<T: Scalar, R: Rng>(
    state: &mut ModelState<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut R,
) -> TensorResult<()> {
    let w = kaiming_uniform(rng, &[c_out, c_in, k, k], c_in * k * k, 1.0);
    state.insert(format!("{name}.weight"), w, true)
}

pub fn add_batch_norm<T: Scalar>(state: &mut ModelState<T>, name: &str, c: usize) -> TensorResult<()> {
    state.insert(format!("{name}.gamma"), Tensor::full(&[c], T::one()), true)?;
    state.insert(format!("{name}.beta"), Tensor::zeros(&[c]), true)?;
    state.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]), false)?;
    state.insert(format!("{name}.running_var"), Tensor::full(&[c], T::one()), false)
}

/// Linear layer; `scale` multiplies the Kaiming bound, bias starts at zero.
pub fn add_linear<T: Scalar, R: Rng>(
    state: &mut ModelState<T>,
    name: &str,
    f_in: usize,
    f_out: usize,
    scale: f64,
    rng: &mut R,
) -> TensorResult<()> {
    let w = kaiming_uniform(rng, &[f_out, f_in], f_in, scale);
    state.insert(format!("{name}.weight"), w, true)?;
    state.insert(format!("{name}.bias"), Tensor::zeros(&[f_out]), true)
}

/// Registers a 3×3 conv (no bias) followed by batch norm.
pub fn add_conv_bn<T: Scalar, R: Rng>(
    state: &mut ModelState<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> TensorResult<()> {
    add_conv(state, &format!("{name}.conv"), c_in, c_out, 3, rng)?;
    add_batch_norm(state, &format!("{name}.bn"), c_out)
}

/// One forward pass of a model recorded on a tape.
pub struct Forward<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub bound: &'a BoundParams,
    pub state: &'a ModelState<T>,
    pub phase: Phase,
    /// Training-mode batch statistics, keyed by batch-norm name.
    pub stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, bound: &'a BoundParams, state: &'a ModelState<T>, phase: Phase) -> Self {
        Self {
            tape,
            bound,
            state,
            phase,
            stats: Vec::new(),
        }
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> TensorResult<Var> {
        let gamma = self.bound.get(&format!("{name}.gamma"))?;
        let beta = self.bound.get(&format!("{name}.beta"))?;
        let eps = T::of(BN_EPS);
        let (y, stats) = match self.phase {
            Phase::Train => self.tape.batch_norm2d(x, gamma, beta, BatchNormMode::Train { eps })?,
            Phase::Eval => {
                let mean = self.state.tensor(&format!("{name}.running_mean"))?.data();
                let var = self.state.tensor(&format!("{name}.running_var"))?.data();
                self.tape.batch_norm2d(x, gamma, beta, BatchNormMode::Eval { mean, var, eps })?
            }
        };
        if let Some(s) = stats {
            self.stats.push((name.to_string(), s));
        }
        Ok(y)
    }

    pub fn conv_bn_relu(&mut self, name: &str, x: Var) -> TensorResult<Var> {
        let w = self.bound.get(&format!("{name}.conv.weight"))?;
        let y = self.tape.conv2d(x, w, None, 1, PaddingMode::Zero)?;
        let y = self.batch_norm(&format!("{name}.bn"), y)?;
        Ok(self.tape.relu(y))
    }

    pub fn linear(&mut self, name: &str, x: Var) -> TensorResult<Var> {
        let w = self.bound.get(&format!("{name}.weight"))?;
        let b = self.bound.get(&format!("{name}.bias"))?;
        self.tape.linear(x, w, b)
    }
}

/// Folds training-mode batch statistics into the running estimates.
pub fn apply_batch_stats<T: Scalar>(state: &mut ModelState<T>, stats: &[(String, BatchStats<T>)]) -> TensorResult<()> {
    for (name, s) in stats {
        state.update_running_stats(name, s, T::of(BN_MOMENTUM))?;
    }
    Ok(())
}

/// Sum over layers of weight, bias and batch-norm entries (including running
/// statistics).
pub fn param_count<T: Scalar>(state: &ModelState<T>) -> usize {
    state.iter().map(|(_, p)| p.value.len()).sum()
}
