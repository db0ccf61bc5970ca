use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testutil::*;

const SEEDS: u64 = 20;

#[test]
fn conv2d_scalar_product() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 1, 1, 1], &[2.0]).unwrap());
    let w = tape.constant(Tensor::from_f64(&[1, 1, 1, 1], &[3.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[1], &[0.0]).unwrap());
    let y = tape.conv2d(x, w, Some(b), 1, PaddingMode::Zero).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0]);
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [PaddingMode::Zero, PaddingMode::Replicate] {
        let input = rand_tensor(&mut rng, &[1, 3, 5, 5], 1.0).cast::<f32>();
        let mut weight = Tensor::<f32>::zeros(&[3, 3, 5, 5]);
        for c in 0..3 {
            weight.data_mut()[((c * 3 + c) * 5 + 2) * 5 + 2] = 1.0;
        }
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let w = tape.constant(weight);
        let y = tape.conv2d(x, w, None, 1, mode).unwrap();
        assert!(tape.value(y).max_abs_diff(&input) < 1e-6);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, PaddingMode::Zero).unwrap_err();
    assert!(matches!(err, TensorError::Dimension { axis: "input channels", expected: 3, got: 2, .. }));
}

#[test]
fn conv2d_output_arithmetic_with_stride() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 9, 8]));
    let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = tape.conv2d(x, w, None, 2, PaddingMode::Zero).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4, 5, 4]);
}

#[test]
fn conv2d_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 8, 8], 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], 0.5);
        let b = rand_tensor(&mut rng, &[4], 0.5);
        let mode = if seed % 2 == 0 { PaddingMode::Zero } else { PaddingMode::Replicate };
        let stride = if seed % 3 == 0 { 2 } else { 1 };
        let err = fd_check(&[x, w, b], &|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, mode).unwrap();
            project(t, y, seed)
        });
        assert!(err < 1e-3, "seed {seed}: rel err {err}");
    }
}

#[test]
fn avg_pool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.avg_pool2d(x, 2, 2, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5]);

    let c = tape.constant(Tensor::full(&[1, 2, 9, 7], 0.75));
    let y = tape.avg_pool2d(c, 5, 4, 2).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 3, 2]);
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));

    let small = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(tape.avg_pool2d(small, 5, 1, 0).is_err());
}

#[test]
fn avg_pool_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 2, 6, 6], 1.0);
        let (k, s, p) = if seed % 2 == 0 { (5, 4, 2) } else { (2, 2, 0) };
        let err = fd_check(&[x], &|t, v| {
            let y = t.avg_pool2d(v[0], k, s, p).unwrap();
            project(t, y, seed)
        });
        assert!(err < 1e-3, "seed {seed}: rel err {err}");
    }
}

#[test]
fn batch_norm_training_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[4, 3, 5, 5], 3.0).map(|v| v + 2.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (y, stats) = tape.batch_norm2d(xv, g, b, BatchNormMode::Train { eps: 1e-5 }).unwrap();
    assert!(stats.is_some());
    let y = tape.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + c) * 25..][..25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_eval_is_affine() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 0.5));
    let g = tape.constant(Tensor::full(&[1], 2.0));
    let b = tape.constant(Tensor::full(&[1], 1.0));
    let mode = BatchNormMode::Eval {
        mean: &[0.0],
        var: &[1.0],
        eps: 1e-5,
    };
    let (y, stats) = tape.batch_norm2d(x, g, b, mode).unwrap();
    assert!(stats.is_none());
    assert!((tape.value(y).item() - 2.0).abs() < 1e-5);
}

#[test]
fn batch_norm_degenerate_batch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let err = tape.batch_norm2d(x, g, b, BatchNormMode::Train { eps: 1e-5 }).unwrap_err();
    assert_eq!(err, TensorError::DegenerateBatch { count: 1 });
}

#[test]
fn batch_norm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], 2.0);
        let g = rand_tensor(&mut rng, &[3], 1.0).map(|v| v + 1.5);
        let b = rand_tensor(&mut rng, &[3], 1.0);
        let running_mean = [0.1, -0.2, 0.3];
        let running_var = [0.5, 1.5, 2.0];
        let train = seed % 4 != 3;
        let err = fd_check(&[x, g, b], &|t, v| {
            let mode = if train {
                BatchNormMode::Train { eps: 1e-5 }
            } else {
                BatchNormMode::Eval {
                    mean: &running_mean,
                    var: &running_var,
                    eps: 1e-5,
                }
            };
            let (y, _) = t.batch_norm2d(v[0], v[1], v[2], mode).unwrap();
            project(t, y, seed)
        });
        assert!(err < 1e-3, "seed {seed}: rel err {err}");
    }
}

#[test]
fn relu_examples_and_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let p = tape.constant(Tensor::from_f64(&[2], &[0.3, 4.0]).unwrap());
    let y = tape.relu(p);
    assert_eq!(tape.value(y).data(), &[0.3, 4.0]);

    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep every entry at least 0.05 away from the kink
        let x = Tensor::from_fn(&[2, 3, 4], |_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen() { v } else { -v }
        });
        let err = fd_check(&[x], &|t, v| {
            let y = t.relu(v[0]);
            project(t, y, seed)
        });
        assert!(err < 1e-3, "seed {seed}: rel err {err}");
    }
}

#[test]
fn global_avg_pool_examples_and_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5, 0.0]);
    let one = tape.constant(Tensor::from_f64(&[1, 3, 1, 1], &[1.0, -2.0, 5.0]).unwrap());
    let y = tape.global_avg_pool(one).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -2.0, 5.0]);

    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 4], 1.0);
        let err = fd_check(&[x], &|t, v| {
            let y = t.global_avg_pool(v[0]).unwrap();
            project(t, y, seed)
        });
        assert!(err < 1e-3, "seed {seed}: rel err {err}");
    }
}

#[test]
fn linear_examples_and_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let w = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[1], &[0.5]).unwrap());
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[3.5]);

    let eye = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let zero = tape.constant(Tensor::zeros(&[2]));
    let y = tape.linear(x, eye, zero).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let bad = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(tape.linear(x, bad, zero).is_err());

    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 5], 1.0);
        let w = rand_tensor(&mut rng, &[4, 5], 1.0);
        let b = rand_tensor(&mut rng, &[4], 1.0);
        let err = fd_check(&[x, w, b], &|t, v| {
            let y = t.linear(v[0], v[1], v[2]).unwrap();
            project(t, y, seed)
        });
        assert!(err < 1e-3, "seed {seed}: rel err {err}");
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
    let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

    let z = tape.constant(Tensor::from_f64(&[1, 2], &[100.0, 0.0]).unwrap());
    let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
    assert!(tape.value(l).item() < 1e-6);

    let z = tape.constant(Tensor::zeros(&[2, 7]));
    let l = tape.softmax_cross_entropy(z, &[3, 6]).unwrap();
    assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-12);
    assert_eq!(
        tape.softmax_cross_entropy(z, &[7, 0]).unwrap_err(),
        TensorError::LabelOutOfRange { label: 7, classes: 7 }
    );
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = rand_tensor(&mut rng, &[3, 4], 3.0);
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
        // analytic formula
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone(), true);
        let l = tape.softmax_cross_entropy(zv, &labels).unwrap();
        let g = tape.backward(l).unwrap().wrt(&tape, zv);
        for i in 0..3 {
            let row = &z.data()[i * 4..(i + 1) * 4];
            let max = row.iter().copied().fold(f64::MIN, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..4 {
                let p = (row[j] - max).exp() / denom;
                let want = (p - if j == labels[i] { 1.0 } else { 0.0 }) / 3.0;
                assert!((g.data()[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        let err = fd_check(&[z], &|t, v| t.softmax_cross_entropy(v[0], &labels).unwrap());
        assert!(err < 1e-3, "seed {seed}: rel err {err}");
    }
}

#[test]
fn slice_filter_and_color_affine_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = rand_tensor(&mut rng, &[2, 3, 6, 5], 1.0);
        let params = rand_tensor(&mut rng, &[2, 37], 0.5);
        let err = fd_check(&[img, params], &|t, v| {
            let k = t.slice_columns(v[1], 0, 25).unwrap();
            let m = t.slice_columns(v[1], 25, 9).unwrap();
            let s = t.slice_columns(v[1], 34, 3).unwrap();
            let f = t.sample_filter(v[0], k).unwrap();
            let y = t.color_affine(f, m, s).unwrap();
            project(t, y, seed)
        });
        assert!(err < 1e-3, "seed {seed}: rel err {err}");
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
    let s = tape.sum(x);
    assert_eq!(tape.backward(s).unwrap().wrt(&tape, x).data(), &[1.0, 1.0]);
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    assert_eq!(tape.backward(l).unwrap().wrt(&tape, x).data(), &[2.0, 4.0]);
    assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn unreachable_and_frozen_leaves_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let used = tape.leaf(Tensor::full(&[3], 2.0), true);
    let unused = tape.leaf(Tensor::full(&[3], 5.0), true);
    let frozen = tape.leaf(Tensor::full(&[3], 1.0), false);
    let prod = tape.mul(used, frozen).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.wrt(&tape, unused).data(), &[0.0, 0.0, 0.0]);
    assert!(grads.get(frozen).is_none());
    assert_eq!(grads.wrt(&tape, used).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn model_state_accumulates_and_freezes() {
    let mut state = ModelState::<f64>::new();
    state.insert("a", Tensor::full(&[2], 1.0), true).unwrap();
    state.insert("b", Tensor::full(&[2], 1.0), true).unwrap();
    state.insert("stat", Tensor::full(&[2], 0.0), false).unwrap();
    assert!(state.insert("a", Tensor::zeros(&[1]), true).is_err());
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape);
    let a = bound.get("a").unwrap();
    let l = tape.sum(a);
    let grads = tape.backward(l).unwrap();
    state.accumulate_grads(&tape, &bound, &grads);
    assert_eq!(state.get("a").unwrap().grad.as_ref().unwrap().data(), &[1.0, 1.0]);
    assert_eq!(state.get("b").unwrap().grad.as_ref().unwrap().data(), &[0.0, 0.0]);
    assert!(state.get("stat").unwrap().grad.is_none());
    assert_eq!(state.trainable_count(), 4);
    state.freeze();
    assert!(state.is_frozen());
    assert_eq!(state.trainable_count(), 0);
}
