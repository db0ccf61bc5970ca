//! Finite-difference checks of the tape's reverse-mode gradients, per op
//! and through the whole estimator → warp → classifier → cross-entropy chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::imaging::{images_to_tensor, standardize, ColorSpace, Image, NormalizationSpec};
use crate::layers::{Forward, Phase};
use crate::nem::{enhance_graph, NemConfig};
use crate::tensor::{BatchNormMode, ModelState, PaddingMode, Tape, Tensor, TensorError, TensorResult, Var};
use crate::training::{classifier_forward, classifier_init, ClassifierConfig, TrainError};
use crate::Scalar;

pub type Build<'a, T> = &'a dyn Fn(&mut Tape<T>, &[Var]) -> TensorResult<Var>;

/// Uniform entries in `[-scale, scale]`.
pub fn random_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0) * scale))
}

/// Entries with magnitude in `[margin, 1]`, away from ReLU's kink.
fn off_kink<R: Rng>(rng: &mut R, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Sum of `out` times a fixed random tensor, so every output entry feeds the
/// scalar loss.
pub fn project<T: Scalar>(tape: &mut Tape<T>, out: Var, seed: u64) -> TensorResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(random_tensor(&mut rng, &shape, 1.0));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences with step `h` against the analytic gradient of
/// `build` for every entry of every input; returns the worst relative error.
pub fn fd_check<T: Scalar>(inputs: &[Tensor<T>], h: f64, floor: f64, build: Build<'_, T>) -> TensorResult<f64> {
    let eval = |vals: &[Tensor<T>]| -> TensorResult<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item().as_f64())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[i]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += T::of(h);
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= T::of(h);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[j].as_f64(), numeric, floor));
        }
    }
    Ok(worst)
}

/// Worst f64 relative error of each differentiable op for one seed.
pub fn op_suite(seed: u64) -> TensorResult<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let check = |inputs: &[Tensor<f64>], build: Build<'_, f64>| fd_check(inputs, 1e-5, 1e-4, build);
    let mut out = Vec::new();

    let (a, b) = (random_tensor(&mut rng, &[2, 3, 4], 1.0), random_tensor(&mut rng, &[2, 3, 4], 1.0));
    out.push(("add", check(&[a.clone(), b.clone()], &|t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, seed)
    })?));
    out.push(("mul", check(&[a.clone(), b], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, seed)
    })?));
    out.push(("scale", check(&[a.clone()], &|t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, seed)
    })?));
    out.push(("sum", check(&[a.clone()], &|t, v| Ok(t.sum(v[0])))?));
    out.push(("reshape", check(&[a], &|t, v| {
        let y = t.reshape(v[0], &[4, 6])?;
        project(t, y, seed)
    })?));
    out.push(("relu", check(&[off_kink(&mut rng, &[2, 3, 4], 0.05)], &|t, v| {
        let y = t.relu(v[0]);
        project(t, y, seed)
    })?));

    let x = random_tensor(&mut rng, &[2, 3, 6, 5], 1.0);
    let w = random_tensor(&mut rng, &[4, 3, 3, 3], 0.5);
    let bias = random_tensor(&mut rng, &[4], 0.5);
    let stride = 1 + (seed as usize % 2);
    let mode = if seed % 3 == 2 { PaddingMode::Replicate } else { PaddingMode::Zero };
    out.push(("conv2d", check(&[x.clone(), w, bias], &|t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), stride, mode)?;
        project(t, y, seed)
    })?));
    let (k, s, pad) = [(2, 2, 0), (3, 2, 1), (5, 4, 2)][seed as usize % 3];
    out.push(("avg_pool2d", check(&[x.clone()], &|t, v| {
        let y = t.avg_pool2d(v[0], k, s, pad)?;
        project(t, y, seed)
    })?));
    let gamma = random_tensor::<f64, _>(&mut rng, &[3], 0.5).map(|g| g + 1.0);
    let beta = random_tensor(&mut rng, &[3], 0.5);
    let (rm, rv) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    for train in [true, false] {
        let name = if train { "batch_norm2d.train" } else { "batch_norm2d.eval" };
        out.push((name, check(&[x.clone(), gamma.clone(), beta.clone()], &|t, v| {
            let mode = if train {
                BatchNormMode::Train { eps: 1e-5 }
            } else {
                BatchNormMode::Eval {
                    mean: &rm,
                    var: &rv,
                    eps: 1e-5,
                }
            };
            let (y, _) = t.batch_norm2d(v[0], v[1], v[2], mode)?;
            project(t, y, seed)
        })?));
    }
    out.push(("global_avg_pool", check(&[x.clone()], &|t, v| {
        let y = t.global_avg_pool(v[0])?;
        project(t, y, seed)
    })?));

    let feats = random_tensor(&mut rng, &[3, 5], 1.0);
    let lw = random_tensor(&mut rng, &[4, 5], 0.5);
    let lb = random_tensor(&mut rng, &[4], 0.5);
    out.push(("linear", check(&[feats.clone(), lw, lb], &|t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        project(t, y, seed)
    })?));
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
    out.push(("softmax_cross_entropy", check(&[feats.map(|v| 3.0 * v)], &|t, v| {
        t.softmax_cross_entropy(v[0], &labels)
    })?));

    let params = random_tensor(&mut rng, &[2, 37], 0.5);
    out.push(("slice_columns", check(&[params.clone()], &|t, v| {
        let y = t.slice_columns(v[0], 25, 9)?;
        project(t, y, seed)
    })?));
    let kernels = random_tensor(&mut rng, &[2, 25], 0.5);
    out.push(("sample_filter", check(&[x.clone(), kernels], &|t, v| {
        let y = t.sample_filter(v[0], v[1])?;
        project(t, y, seed)
    })?));
    let (m, sh) = (random_tensor(&mut rng, &[2, 9], 0.8), random_tensor(&mut rng, &[2, 3], 0.8));
    out.push(("color_affine", check(&[x.clone(), m, sh], &|t, v| {
        let y = t.color_affine(v[0], v[1], v[2])?;
        project(t, y, seed)
    })?));
    out.push(("dwm", check(&[x, params.map(|p| 0.4 * p)], &|t, v| {
        let y = crate::dwm::dwm_apply_differentiable(t, v[0], v[1], 5).map_err(|e| TensorError::Shape {
            op: "dwm",
            reason: e.to_string(),
        })?;
        project(t, y, seed)
    })?));
    Ok(out)
}

/// Fixture for the end-to-end check: a small estimator in train mode and a
/// frozen classifier in eval mode.
pub struct ChainFixture {
    pub nem_config: NemConfig,
    pub nem: ModelState<f32>,
    pub classifier_config: ClassifierConfig,
    pub classifier: ModelState<f32>,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl ChainFixture {
    pub fn new(seed: u64) -> Result<Self, TrainError> {
        let nem_config = NemConfig {
            widths: [4, 6, 8, 8],
            ..NemConfig::default()
        };
        let mut nem = crate::nem::nem_init::<f32>(&nem_config, seed)?;
        // move the head off its near-zero start so every stage carries signal
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC4A1);
        for name in ["head.weight", "head.bias"] {
            let p = nem.get_mut(name)?;
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.05f32..0.05);
            }
        }
        let classifier_config = ClassifierConfig {
            widths: vec![4, 8],
            num_classes: 5,
        };
        let mut classifier = classifier_init::<f32>(&classifier_config, seed + 1)?;
        classifier.freeze();
        let images = (0..3)
            .map(|_| Image::from_fn(16, 16, ColorSpace::Raw01, |_, _| [rng.gen(), rng.gen(), rng.gen()]))
            .collect();
        let labels = (0..3).map(|_| rng.gen_range(0..5)).collect();
        Ok(Self {
            nem_config,
            nem,
            classifier_config,
            classifier,
            images,
            labels,
        })
    }

    /// Cross-entropy of the classifier on the enhanced batch, plus the
    /// estimator's bound parameters.
    fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        nem: &ModelState<T>,
        classifier: &ModelState<T>,
    ) -> Result<(Var, crate::tensor::BoundParams), TrainError> {
        let std: Vec<Image> = self
            .images
            .iter()
            .map(|img| standardize(img, &NormalizationSpec::IMAGENET))
            .collect::<Result<_, _>>()?;
        let x = tape.constant(images_to_tensor::<T>(&std.iter().collect::<Vec<_>>())?);
        let bound = nem.bind(tape);
        let mut fwd = Forward::new(tape, &bound, nem, Phase::Train);
        let y = enhance_graph(&mut fwd, &self.nem_config, x)?;
        drop(fwd);
        let cb = classifier.bind_frozen(tape);
        let mut cf = Forward::new(tape, &cb, classifier, Phase::Eval);
        let logits = classifier_forward(&mut cf, &self.classifier_config, y)?;
        Ok((tape.softmax_cross_entropy(logits, &self.labels)?, bound))
    }
}

/// Worst relative error between the f32 analytic gradient and an f64
/// central difference, along `directions` random unit directions over all
/// estimator parameters and for every entry of the output-head bias.
pub fn chain_check(seed: u64, directions: usize) -> Result<f64, TrainError> {
    let fx = ChainFixture::new(seed)?;
    let mut tape = Tape::<f32>::new();
    let (loss, bound) = fx.loss(&mut tape, &fx.nem, &fx.classifier)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, var) in bound.iter() {
        if fx.nem.get(name)?.requires_grad {
            let g = grads.wrt(&tape, var);
            analytic.push((name.to_string(), g.data().iter().map(|v| v.as_f64()).collect()));
        }
    }
    let nem64 = fx.nem.cast::<f64>();
    let clf64 = fx.classifier.cast::<f64>();
    let loss_at = |delta: &[(String, Vec<f64>)], s: f64| -> Result<f64, TrainError> {
        let mut m = nem64.clone();
        for (name, d) in delta {
            for (v, dv) in m.get_mut(name)?.value.data_mut().iter_mut().zip(d) {
                *v += s * dv;
            }
        }
        let mut tape = Tape::<f64>::new();
        let (l, _) = fx.loss(&mut tape, &m, &clf64)?;
        Ok(tape.value(l).item())
    };
    // small enough that the f64 reference does not straddle ReLU kinks
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1);
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut dir: Vec<(String, Vec<f64>)> = analytic
            .iter()
            .map(|(n, g)| (n.clone(), g.iter().map(|_| rng.sample::<f64, _>(StandardNormal)).collect()))
            .collect();
        let norm = dir.iter().flat_map(|(_, d)| d.iter()).map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|(_, d)| d.iter_mut().for_each(|v| *v /= norm));
        let a: f64 = analytic
            .iter()
            .zip(&dir)
            .flat_map(|((_, g), (_, d))| g.iter().zip(d).map(|(x, y)| x * y))
            .sum();
        let n = (loss_at(&dir, h)? - loss_at(&dir, -h)?) / (2.0 * h);
        worst = worst.max(relative_error(a, n, 1e-4));
    }
    let (_, head) = analytic
        .iter()
        .find(|(n, _)| n == "head.bias")
        .ok_or_else(|| TrainError::Layout("missing head.bias".into()))?;
    let scale = head.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for j in 0..head.len() {
        let mut e = vec![0.0; head.len()];
        e[j] = 1.0;
        let d = vec![("head.bias".to_string(), e)];
        let n = (loss_at(&d, h)? - loss_at(&d, -h)?) / (2.0 * h);
        worst = worst.max(relative_error(head[j], n, 1e-2 * scale));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_for_a_few_seeds() {
        for seed in 0..3 {
            for (op, err) in op_suite(seed).unwrap() {
                assert!(err < 1e-3, "seed {seed} {op}: {err}");
            }
        }
    }

    #[test]
    fn chain_gradient_matches_in_single_precision() {
        for seed in 0..3 {
            let err = chain_check(seed, 3).unwrap();
            assert!(err < 1e-2, "seed {seed}: {err}");
        }
    }

    #[test]
    fn fd_check_notices_a_wrong_gradient() {
        // relu's derivative is wrong at the kink; centered samples at 0 expose it
        let x = Tensor::<f64>::from_fn(&[4], |i| [0.0, 1e-6, -1e-6, 0.0][i]);
        let err = fd_check(&[x], 1e-3, 1e-2, &|t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(err > 0.1);
    }
}
