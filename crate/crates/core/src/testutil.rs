//! Shared helpers for unit tests.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};

pub(crate) type T64 = Tensor<f64>;

pub(crate) fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> T64 {
    crate::gradcheck::random_tensor(rng, shape, scale)
}

pub(crate) fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    crate::gradcheck::project(tape, out, seed).unwrap()
}

/// [`crate::gradcheck::fd_check`] with `h = 1e-3` and a 1e-2 floor.
pub(crate) fn fd_check(inputs: &[T64], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    crate::gradcheck::fd_check(inputs, 1e-3, 1e-2, &|t, v| Ok(build(t, v))).unwrap()
}
