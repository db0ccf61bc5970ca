use super::*;
use crate::imaging::{ColorSpace, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gray(v: f32, h: usize, w: usize) -> Image {
    Image::filled(h, w, [v, v, v], ColorSpace::Raw01)
}

fn textured(seed: u64, h: usize, w: usize, hi: f32) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px: Vec<f32> = (0..h * w * 3).map(|_| rng.gen::<f32>() * hi).collect();
    Image::new(h, w, px, ColorSpace::Raw01).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: f32, b: f32, tol: f32) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn darken_scales_uniformly() {
    let (out, spec) = apply_darken(&gray(0.5, 4, 4), 3).unwrap();
    assert!(out.pixels().iter().all(|&v| close(v, 0.25, 1e-7)));
    let o = spec.oracle.unwrap();
    assert_eq!(o.matrix, [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]]);
    assert_eq!(o.shift, [0.0; 3]);
    let (black, _) = apply_darken(&gray(0.0, 4, 4), 5).unwrap();
    assert!(black.pixels().iter().all(|&v| v == 0.0));
}

#[test]
fn horizon_target_white_point() {
    let white = gray(1.0, 2, 2);
    let (out, spec) = horizon_with(&white, 5, 0.0, 1.0);
    let p = out.pixel(0, 0);
    assert!(close(p[0], 1.0, 1e-6));
    assert!(close(p[1], 0.753, 5e-4) && close(p[2], 0.753, 5e-4), "{p:?}");
    assert_eq!(spec.draws.white_point, Some([255.0, 192.0, 192.0]));

    // severity strength t lerps the gain between 1 and the target
    let (out, _) = horizon_with(&white, 3, 0.0, 0.5);
    assert!(close(out.pixel(0, 0)[1], 0.5 + 0.5 * 192.0 / 255.0, 1e-6));
}

#[test]
fn horizon_delta_statistics() {
    let img = gray(0.5, 1, 1);
    let mut r = rng(11);
    let deltas: Vec<f64> = (0..10_000)
        .map(|_| {
            let (_, s) = apply_horizon(&img, 3, &mut r).unwrap();
            assert!(s.draws_in_range());
            s.draws.delta.unwrap()
        })
        .collect();
    let min = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    assert!(min >= -32.0 && max <= 32.0);
    assert!(mean.abs() <= 1.5, "mean {mean}");
    // range actually explored
    assert!(min < -31.0 && max > 31.0);
}

#[test]
fn night_blue_target_and_knee() {
    let white = [32.0f64, 32.0, 64.0];
    assert!(close((white[2] / 255.0) as f32, 0.251, 5e-4));

    let mut r = rng(3);
    for sev in SEVERITIES {
        let (out, s) = apply_night(&gray(0.1, 2, 2), sev, &mut r).unwrap();
        // below the knee only the white-point gain acts
        let t = CAST_STRENGTH[sev as usize - 1];
        let w = s.draws.white_point.unwrap();
        for c in 0..3 {
            let gain = 1.0 + t * (w[c] as f32 / 255.0 - 1.0);
            assert!(close(out.pixel(0, 0)[c], 0.1 * gain, 1e-6));
        }
        let d = s.draws.delta.unwrap();
        assert!((-24.0..=24.0).contains(&d));
        assert_eq!(w[2], 64.0 + d);
    }
}

#[test]
fn night_never_brightens() {
    let mut r = rng(5);
    for seed in 0..20 {
        let img = textured(seed, 8, 8, 1.0);
        for sev in SEVERITIES {
            let (out, _) = apply_night(&img, sev, &mut r).unwrap();
            for (a, b) in img.pixels().chunks(3).zip(out.pixels().chunks(3)) {
                assert!(luma(b) <= luma(a) + 1e-6);
            }
        }
    }
}

#[test]
fn night_knee_compresses_bright_regions() {
    // a pixel whose gained luma is above the knee must land on the knee line
    let img = gray(1.0, 1, 1);
    let mut r = rng(9);
    let (out, s) = apply_night(&img, 1, &mut r).unwrap();
    let t = CAST_STRENGTH[0];
    let w = s.draws.white_point.unwrap();
    let gained: Vec<f32> = (0..3).map(|c| 1.0 + t * (w[c] as f32 / 255.0 - 1.0)).collect();
    let l = luma(&gained);
    assert!(l > NIGHT_KNEE);
    let expect = NIGHT_KNEE + NIGHT_KNEE_SLOPE * (l - NIGHT_KNEE);
    assert!(close(luma(&out.pixel(0, 0)), expect, 1e-5));
}

#[test]
fn whitepoint_arithmetic() {
    let (out, _) = whitepoint_with(&gray(0.5, 2, 2), 1, [223.0, 255.0, 287.0]);
    let p = out.pixel(1, 1);
    assert!(close(p[0], 0.4373, 1e-4) && close(p[1], 0.5, 1e-7) && close(p[2], 0.5627, 1e-4), "{p:?}");

    let img = textured(1, 4, 4, 1.0);
    let (same, _) = whitepoint_with(&img, 4, [255.0; 3]);
    assert!(same.max_abs_diff(&img) < 1e-7);
}

#[test]
fn whitepoint_statistics() {
    let img = gray(0.5, 1, 1);
    let mut r = rng(21);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for _ in 0..10_000 {
        let (_, s) = apply_whitepoint(&img, 2, &mut r).unwrap();
        assert!(s.draws_in_range());
        for c in s.draws.white_point.unwrap() {
            lo = lo.min(c);
            hi = hi.max(c);
            sum += c;
        }
    }
    assert!(lo >= 223.0 && hi <= 287.0);
    assert!((sum / 30_000.0 - 255.0).abs() < 1.5);
}

#[test]
fn gaussian_noise_std() {
    let img = gray(0.5, 578, 578);
    let (out, s) = apply_standard(&img, CorruptionKind::GaussianNoise, 1, &mut rng(2)).unwrap();
    assert!(s.draws.noise_seed.is_some());
    let n = out.pixels().len() as f64;
    assert!(n >= 1e6);
    let mean = out.pixels().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = out.pixels().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var.sqrt() - 0.04).abs() <= 0.005, "std {}", var.sqrt());
}

#[test]
fn contrast_compresses_toward_channel_mean() {
    let img = textured(4, 16, 16, 1.0);
    let means = img.channel_means();
    let (out, s) = apply_standard(&img, CorruptionKind::Contrast, 5, &mut rng(0)).unwrap();
    for (a, b) in img.pixels().chunks(3).zip(out.pixels().chunks(3)) {
        for c in 0..3 {
            let expect = means[c] + 0.15 * (a[c] as f64 - means[c]);
            assert!((b[c] as f64 - expect).abs() < 1e-6);
        }
    }
    assert!(s.oracle.is_some());
}

#[test]
fn pixelate_block_aligned_is_identity() {
    let img = Image::from_fn(8, 8, ColorSpace::Raw01, |y, x| {
        let v = ((y / 2) * 4 + x / 2) as f32 / 16.0;
        [v, 1.0 - v, 0.5 * v]
    });
    let (out, _) = apply_standard(&img, CorruptionKind::Pixelate, 1, &mut rng(0)).unwrap();
    assert_eq!(out.max_abs_diff(&img), 0.0);
}

#[test]
fn brightness_shifts_and_clamps() {
    let (out, _) = apply_standard(&gray(0.9, 2, 2), CorruptionKind::Brightness, 5, &mut rng(0)).unwrap();
    assert!(out.pixels().iter().all(|&v| v == 1.0));
    let (out, _) = apply_standard(&gray(0.3, 2, 2), CorruptionKind::Brightness, 2, &mut rng(0)).unwrap();
    assert!(out.pixels().iter().all(|&v| close(v, 0.4, 1e-6)));
}

#[test]
fn blur_kernels_are_normalized() {
    for r in DEFOCUS_RADIUS {
        let (taps, k) = disk_kernel(r);
        assert_eq!(k, 2 * r + 1);
        assert!((taps.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
    for l in MOTION_LENGTH {
        for angle in [0.0, 33.0, 90.0, 135.0, 179.0] {
            let (taps, _) = line_kernel(l, angle);
            assert!((taps.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
    // blurs preserve constants with replicate borders
    for kind in [CorruptionKind::DefocusBlur, CorruptionKind::MotionBlur] {
        let (out, _) = apply_standard(&gray(0.4, 12, 12), kind, 5, &mut rng(1)).unwrap();
        assert!(out.pixels().iter().all(|&v| close(v, 0.4, 1e-6)));
    }
}

#[test]
fn affine_oracles_reproduce_output() {
    // pixel values kept low enough that no kind clamps
    let img = textured(8, 12, 12, 0.8);
    let mut r = rng(13);
    for kind in CorruptionKind::AFFINE {
        for sev in SEVERITIES {
            let (out, s) = apply(&img, kind, sev, &mut r).unwrap();
            let o = s.oracle.unwrap_or_else(|| panic!("{kind} records no oracle"));
            let predicted = o.apply(&img);
            assert!(predicted.max_abs_diff(&out) < 1e-6, "{kind} sev {sev}");
            assert!(o.determinant().abs() > 1e-6);
            assert!(o.condition_number() < 1e3, "{kind} sev {sev}");
        }
    }
}

#[test]
fn inverse_matrix_round_trip() {
    let o = AffineColorOracle {
        matrix: [[0.9, 0.1, 0.0], [0.05, 0.7, 0.2], [0.0, 0.3, 1.1]],
        shift: [0.0; 3],
    };
    let inv = o.inverse_matrix().unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let v: f64 = (0..3).map(|k| o.matrix[i][k] * inv[k][j]).sum();
            assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }
    let singular = AffineColorOracle::diagonal([1.0, 0.0, 1.0]);
    assert!(singular.inverse_matrix().is_none());
    assert!(singular.condition_number().is_infinite());
}

#[test]
fn generators_stay_in_unit_range_and_are_deterministic() {
    let img = textured(17, 10, 10, 1.0);
    for kind in CorruptionKind::ALL {
        for sev in SEVERITIES {
            let (a, sa) = apply(&img, kind, sev, &mut rng(99)).unwrap();
            let (b, sb) = apply(&img, kind, sev, &mut rng(99)).unwrap();
            assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)), "{kind}");
            assert_eq!(a.pixels(), b.pixels());
            assert_eq!(sa, sb);
            assert_eq!(a.space(), ColorSpace::Raw01);
        }
    }
}

#[test]
fn severity_is_monotone() {
    let img = Image::from_fn(60, 60, ColorSpace::Raw01, |y, x| {
        let (fy, fx) = (y as f32 / 5.0, x as f32 / 7.0);
        [0.5 + 0.3 * fy.sin(), 0.5 + 0.3 * fx.cos(), 0.5 + 0.25 * (fx + fy).sin()]
    });
    for kind in CorruptionKind::ALL {
        let dist: Vec<f64> = SEVERITIES
            .map(|sev| {
                let (out, _) = apply(&img, kind, sev, &mut rng(5)).unwrap();
                out.rms_diff(&img)
            })
            .collect();
        for w in dist.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "{kind}: {dist:?}");
        }
        if kind != CorruptionKind::Whitepoint {
            assert!(dist[4] > dist[0], "{kind}: {dist:?}");
        }
    }
}

#[test]
fn errors() {
    let img = gray(0.5, 2, 2);
    assert!(matches!(apply_darken(&img, 0), Err(CorruptionError::InvalidSeverity(0))));
    assert!(matches!(apply(&img, CorruptionKind::Night, 6, &mut rng(0)), Err(CorruptionError::InvalidSeverity(6))));
    let std = crate::imaging::standardize(&img, &crate::imaging::NormalizationSpec::IMAGENET).unwrap();
    assert!(matches!(apply_darken(&std, 1), Err(CorruptionError::WrongSpace(_))));
    assert!(matches!("fog".parse::<CorruptionKind>(), Err(CorruptionError::UnknownKind(_))));
    for k in CorruptionKind::ALL {
        assert_eq!(k.name().parse::<CorruptionKind>().unwrap(), k);
        assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
    }
}

#[test]
fn mixed_count_histogram() {
    let img = gray(0.5, 2, 2);
    let mut r = rng(31);
    let mut counts = [0usize; 3];
    let trials = 10_000;
    for _ in 0..trials {
        let (_, specs) = sample_mixed(&img, &mut r).unwrap();
        counts[specs.len() - 1] += 1;
        let mut kinds: Vec<_> = specs.iter().map(|s| s.kind).collect();
        kinds.sort();
        kinds.dedup();
        assert_eq!(kinds.len(), specs.len());
    }
    let p = 1.0 / 3.0;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - trials as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn mixed_single_matches_direct_application() {
    let img = textured(2, 8, 8, 1.0);
    let mut found = false;
    for seed in 0..200u64 {
        let (mixed, specs) = sample_mixed(&img, &mut rng(seed)).unwrap();
        let (again, specs_again) = sample_mixed(&img, &mut rng(seed)).unwrap();
        assert_eq!(mixed.pixels(), again.pixels());
        assert_eq!(specs, specs_again);
        if specs.len() == 1 {
            // replay the sampler's draws, then the single corruption on the same stream
            let mut r = rng(seed);
            let _n = r.gen_range(1..=3usize);
            let mut pool = CorruptionKind::ALL.to_vec();
            let j = r.gen_range(0..pool.len());
            pool.swap(0, j);
            let sev = r.gen_range(SEVERITIES);
            let (direct, s) = apply(&img, pool[0], sev, &mut r).unwrap();
            assert_eq!(direct.pixels(), mixed.pixels());
            assert_eq!(s, specs[0]);
            found = true;
        }
    }
    assert!(found);
}

mod dataset_io {
    use super::*;
    use crate::imaging::save_image;

    fn make_dataset(root: &std::path::Path, per_class: usize) {
        for (ci, class) in ["alpha", "beta"].iter().enumerate() {
            let dir = root.join(class);
            std::fs::create_dir_all(&dir).unwrap();
            for i in 0..per_class {
                let img = textured((ci * 100 + i) as u64, 8, 8, 1.0);
                save_image(&img, dir.join(format!("{i:03}.png"))).unwrap();
            }
        }
    }

    fn tree_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn counts_layout_and_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let (src, out) = (tmp.path().join("clean"), tmp.path().join("c"));
        make_dataset(&src, 5);
        let kinds = [CorruptionKind::Horizon, CorruptionKind::Night];
        let m = corrupt_dataset(&src, &out, &kinds, &[1, 2, 3, 4, 5], 7).unwrap();
        assert_eq!(m.records.len(), 100);
        let pngs = tree_bytes(&out).into_iter().filter(|(p, _)| p.ends_with(".png")).count();
        assert_eq!(pngs, 100);
        assert!(out.join("horizon/3/beta/004.png").exists());

        let back = read_manifest(out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.header.classes, vec!["alpha", "beta"]);
        for r in &back.records {
            let spec = CorruptionSpec {
                kind: r.kind,
                severity: r.severity,
                draws: r.draws.clone(),
                oracle: None,
            };
            assert!(spec.draws_in_range(), "{r:?}");
            assert!(out.join(&r.path).exists());
            assert_eq!(r.label, if r.class == "alpha" { 0 } else { 1 });
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("clean");
        make_dataset(&src, 3);
        let kinds = [CorruptionKind::Darken, CorruptionKind::GaussianNoise];
        corrupt_dataset(&src, tmp.path().join("a"), &kinds, &[1, 5], 3).unwrap();
        corrupt_dataset(&src, tmp.path().join("b"), &kinds, &[1, 5], 3).unwrap();
        corrupt_dataset(&src, tmp.path().join("d"), &kinds, &[1, 5], 4).unwrap();
        let a = tree_bytes(&tmp.path().join("a"));
        let b = tree_bytes(&tmp.path().join("b"));
        let d = tree_bytes(&tmp.path().join("d"));
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn manifest_survives_moving_both_trees() {
        let tmp = tempfile::tempdir().unwrap();
        let (root, moved) = (tmp.path().join("one"), tmp.path().join("two"));
        make_dataset(&root.join("clean"), 1);
        let out = root.join("runs").join("c");
        let m = corrupt_dataset(root.join("clean"), &out, &[CorruptionKind::Darken], &[1], 0).unwrap();
        assert_eq!(m.header.source_root, "../../clean");
        std::fs::rename(&root, &moved).unwrap();
        let dir = moved.join("runs").join("c");
        let back = read_manifest(dir.join(MANIFEST_FILE)).unwrap();
        assert!(back.source_dir(&dir).join("alpha").is_dir());
    }

    #[test]
    fn empty_and_bad_inputs() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("empty");
        std::fs::create_dir_all(src.join("cls")).unwrap();
        let err = corrupt_dataset(&src, tmp.path().join("o"), &[CorruptionKind::Darken], &[1], 0).unwrap_err();
        assert!(matches!(err, CorruptionError::EmptyDataset(_)));

        make_dataset(&tmp.path().join("ok"), 1);
        let err = corrupt_dataset(tmp.path().join("ok"), tmp.path().join("o"), &[CorruptionKind::Darken], &[9], 0)
            .unwrap_err();
        assert!(matches!(err, CorruptionError::InvalidSeverity(9)));

        std::fs::write(tmp.path().join("m.jsonl"), "{\"format\":\"other\"}\n").unwrap();
        assert!(matches!(read_manifest(tmp.path().join("m.jsonl")), Err(CorruptionError::Manifest(_))));
        assert!(read_manifest(tmp.path().join("missing.jsonl")).is_err());
    }
}
