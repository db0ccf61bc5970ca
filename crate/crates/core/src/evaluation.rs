//! Per-corruption accuracy reports, analytic FLOP counts and throughput
//! benchmarks.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corruptions::{apply, derive_seed, read_manifest, sample_mixed, CorruptionError, CorruptionKind, MANIFEST_FILE};
use crate::dwm::{dwm_apply, ParamTriple};
use crate::imaging::{list_labeled_images, load_image, standardize, Image, ImageError, NormalizationSpec};
use crate::nem::{pooled_size, ImageEnhancer, NemConfig, NemError};
use crate::training::{Classifier, LabeledSample, TrainError};
use crate::Scalar;

pub const REPORT_VERSION: u32 = 1;
const BATCH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("manifest lists {path}, which does not exist")]
    MissingFile { path: String },
    #[error("nothing to evaluate")]
    Empty,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid report: {0}")]
    Report(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Nem(#[from] NemError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Maps images to class indices. Paths are provided for harness stubs.
pub trait ImageClassifier: Sync {
    fn classify(&self, images: &[&Image], paths: &[&str]) -> Result<Vec<usize>, EvalError>;
}

impl<T: Scalar> ImageClassifier for Classifier<T> {
    fn classify(&self, images: &[&Image], _paths: &[&str]) -> Result<Vec<usize>, EvalError> {
        Ok(self.predict(images)?)
    }
}

/// Accuracy of one kind × severity cell.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CellAccuracy {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub accuracy: f64,
    pub count: usize,
}

/// Difference to a named baseline, in accuracy points.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub delta: f64,
    pub pct_delta: f64,
    pub clean_delta: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub name: String,
    pub clean: f64,
    pub clean_count: usize,
    pub cells: Vec<CellAccuracy>,
    /// Unweighted mean over `cells`.
    pub corruption_average: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

impl EvalReport {
    pub fn new(name: &str, clean: f64, clean_count: usize, cells: Vec<CellAccuracy>) -> Self {
        let corruption_average = mean(cells.iter().map(|c| c.accuracy));
        Self {
            version: REPORT_VERSION,
            name: name.into(),
            clean,
            clean_count,
            cells,
            corruption_average,
            comparison: None,
        }
    }

    /// Mean accuracy over the cells whose kind is in `kinds`.
    pub fn average_over(&self, kinds: &[CorruptionKind]) -> f64 {
        mean(self.cells.iter().filter(|c| kinds.contains(&c.kind)).map(|c| c.accuracy))
    }

    pub fn cell(&self, kind: CorruptionKind, severity: u8) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.severity == severity)
            .map(|c| c.accuracy)
    }

    /// Fills [`EvalReport::comparison`] against `baseline`.
    pub fn compare_to(&mut self, baseline: &EvalReport) {
        let (delta, pct_delta) = delta_points(baseline.corruption_average * 100.0, self.corruption_average * 100.0);
        self.comparison = Some(Comparison {
            baseline: baseline.name.clone(),
            delta,
            pct_delta,
            clean_delta: (self.clean - baseline.clean) * 100.0,
        });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let r: Self = serde_json::from_str(text).map_err(|e| EvalError::Report(e.to_string()))?;
        if r.version != REPORT_VERSION {
            return Err(EvalError::Report(format!("unsupported report version {}", r.version)));
        }
        Ok(r)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `(Δ, %Δ)` with `Δ = ours − base` and `%Δ = 100·Δ/base` (both in the
/// units of the inputs).
pub fn delta_points(base: f64, ours: f64) -> (f64, f64) {
    let delta = ours - base;
    let pct = if base == 0.0 { 0.0 } else { 100.0 * delta / base };
    (delta, pct)
}

/// Correct predictions over `(image, label, path)` items, enhancing first
/// when an enhancer is given.
fn count_correct(
    clf: &dyn ImageClassifier,
    enhancer: Option<&dyn ImageEnhancer>,
    items: &[(Image, usize, String)],
) -> Result<usize, EvalError> {
    let per_chunk: Vec<usize> = items
        .par_chunks(BATCH)
        .map(|chunk| -> Result<usize, EvalError> {
            let raw: Vec<&Image> = chunk.iter().map(|(img, _, _)| img).collect();
            let enhanced;
            let imgs: Vec<&Image> = match enhancer {
                Some(e) => {
                    enhanced = enhance_grouped(e, &raw)?;
                    enhanced.iter().collect()
                }
                None => raw,
            };
            let paths: Vec<&str> = chunk.iter().map(|(_, _, p)| p.as_str()).collect();
            let pred = clf.classify(&imgs, &paths)?;
            Ok(pred.iter().zip(chunk).filter(|(p, (_, l, _))| *p == l).count())
        })
        .collect::<Result<_, _>>()?;
    Ok(per_chunk.into_iter().sum())
}

/// Batches the estimator over images of equal size.
fn enhance_grouped(e: &dyn ImageEnhancer, images: &[&Image]) -> Result<Vec<Image>, EvalError> {
    let same = images
        .windows(2)
        .all(|w| (w[0].height(), w[0].width()) == (w[1].height(), w[1].width()));
    if same {
        return Ok(e.enhance_batch(images)?);
    }
    images.iter().map(|img| Ok(e.enhance_one(img)?)).collect()
}

fn accuracy_of(
    clf: &dyn ImageClassifier,
    enhancer: Option<&dyn ImageEnhancer>,
    items: &[(Image, usize, String)],
) -> Result<f64, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(count_correct(clf, enhancer, items)? as f64 / items.len() as f64)
}

/// Corrupts `clean` on the fly for every kind × severity (one seeded stream
/// per image and cell) and reports accuracies.
pub fn evaluate_in_memory(
    name: &str,
    clf: &dyn ImageClassifier,
    enhancer: Option<&dyn ImageEnhancer>,
    clean: &[LabeledSample],
    kinds: &[CorruptionKind],
    severities: &[u8],
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if clean.is_empty() {
        return Err(EvalError::Empty);
    }
    let tag = |i: usize| format!("mem/{i}");
    let clean_items: Vec<(Image, usize, String)> =
        clean.iter().enumerate().map(|(i, s)| (s.image.clone(), s.label, tag(i))).collect();
    let clean_acc = accuracy_of(clf, enhancer, &clean_items)?;
    let mut cells = Vec::new();
    for &kind in kinds {
        for &severity in severities {
            let items: Vec<(Image, usize, String)> = clean
                .par_iter()
                .enumerate()
                .map(|(i, s)| -> Result<_, EvalError> {
                    let cell_seed = derive_seed(seed, &[i as u64, kind as u64, severity as u64]);
                    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
                    let (img, _) = apply(&s.image, kind, severity, &mut rng)?;
                    Ok((img, s.label, tag(i)))
                })
                .collect::<Result<_, _>>()?;
            cells.push(CellAccuracy {
                kind,
                severity,
                accuracy: accuracy_of(clf, enhancer, &items)?,
                count: items.len(),
            });
        }
    }
    Ok(EvalReport::new(name, clean_acc, clean.len(), cells))
}

/// Evaluates a manifest written by `corrupt_dataset`. Clean accuracy is
/// measured on the manifest's source dataset.
pub fn evaluate_manifest(
    name: &str,
    clf: &dyn ImageClassifier,
    enhancer: Option<&dyn ImageEnhancer>,
    corrupted_dir: impl AsRef<Path>,
) -> Result<EvalReport, EvalError> {
    let dir = corrupted_dir.as_ref();
    let manifest = read_manifest(dir.join(MANIFEST_FILE))?;
    let src = manifest.source_dir(dir);
    let src = src.as_path();
    let (_, clean_list) = list_labeled_images(src)?;
    let clean_items: Vec<(Image, usize, String)> = clean_list
        .iter()
        .map(|it| {
            let rel = it.relative.display().to_string();
            Ok((load_image(src.join(&it.relative))?, it.label, rel))
        })
        .collect::<Result<_, EvalError>>()?;
    let clean_acc = accuracy_of(clf, enhancer, &clean_items)?;

    let mut groups: BTreeMap<(CorruptionKind, u8), Vec<(Image, usize, String)>> = BTreeMap::new();
    for r in &manifest.records {
        let path = dir.join(&r.path);
        if !path.is_file() {
            return Err(EvalError::MissingFile {
                path: path.display().to_string(),
            });
        }
        groups
            .entry((r.kind, r.severity))
            .or_default()
            .push((load_image(&path)?, r.label, r.path.clone()));
    }
    // cells in manifest header order
    let mut cells = Vec::new();
    for &kind in &manifest.header.kinds {
        for &severity in &manifest.header.severities {
            if let Some(items) = groups.get(&(kind, severity)) {
                cells.push(CellAccuracy {
                    kind,
                    severity,
                    accuracy: accuracy_of(clf, enhancer, items)?,
                    count: items.len(),
                });
            }
        }
    }
    Ok(EvalReport::new(name, clean_acc, clean_items.len(), cells))
}

/// Accuracy under `sample_mixed` compositions, one seeded stream per image.
pub fn evaluate_mixed(
    clf: &dyn ImageClassifier,
    enhancer: Option<&dyn ImageEnhancer>,
    clean: &[LabeledSample],
    seed: u64,
) -> Result<f64, EvalError> {
    let items: Vec<(Image, usize, String)> = clean
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<_, EvalError> {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64, 0x313]));
            let (img, _) = sample_mixed(&s.image, &mut rng)?;
            Ok((img, s.label, format!("mixed/{i}")))
        })
        .collect::<Result<_, _>>()?;
    accuracy_of(clf, enhancer, &items)
}

/// Analytic cost of one enhancement.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostReport {
    pub version: u32,
    /// FLOPs per multiply-accumulate.
    pub flops_per_mac: f64,
    pub nem_input: [usize; 2],
    pub dwm_resolution: [usize; 2],
    /// `(layer, FLOPs)` in execution order.
    pub nem_layers: Vec<(String, f64)>,
    pub nem_flops: f64,
    pub dwm_flops: f64,
    pub total_flops: f64,
}

/// Closed-form count: convolutions and linear layers at `flops_per_mac`
/// per MAC, batch norm 2 and ReLU 1 per element, average pooling one add per
/// window tap, and the warp as a 5×5 depthwise filter plus a 3×3 matrix and
/// shift per pixel.
pub fn estimate_flops(cfg: &NemConfig, nem_input: [usize; 2], dwm_resolution: [usize; 2]) -> CostReport {
    estimate_flops_with(cfg, nem_input, dwm_resolution, 2.0)
}

pub fn estimate_flops_with(
    cfg: &NemConfig,
    nem_input: [usize; 2],
    dwm_resolution: [usize; 2],
    flops_per_mac: f64,
) -> CostReport {
    let mut layers = Vec::new();
    let [mut h, mut w] = nem_input.map(|v| v as f64);
    let conv = |name: String, c_in: usize, c_out: usize, h: f64, w: f64| {
        let mac = (c_in * c_out * 9) as f64 * h * w;
        (name, flops_per_mac * mac + 3.0 * c_out as f64 * h * w)
    };
    layers.push(conv("stem".into(), 3, cfg.widths[0], h, w));
    for b in 0..3 {
        let c = cfg.widths[b];
        let (ho, wo) = (pooled_size(h as usize) as f64, pooled_size(w as usize) as f64);
        layers.push((format!("block{b}.pool"), 25.0 * c as f64 * ho * wo));
        h = ho;
        w = wo;
        layers.push(conv(format!("block{b}.conv0"), c, cfg.widths[b + 1], h, w));
        layers.push(conv(format!("block{b}.conv1"), cfg.widths[b + 1], cfg.widths[b + 1], h, w));
    }
    let c = cfg.widths[3] as f64;
    layers.push(("global_pool".into(), c * h * w));
    layers.push(("head".into(), flops_per_mac * c * cfg.output_dim() as f64));
    let nem_flops = layers.iter().map(|(_, f)| f).sum();
    let taps = (cfg.kernel_size * cfg.kernel_size) as f64;
    let pixels = (dwm_resolution[0] * dwm_resolution[1]) as f64;
    let dwm_flops = (flops_per_mac * taps * 3.0 + flops_per_mac * 9.0 + 3.0) * pixels;
    CostReport {
        version: REPORT_VERSION,
        flops_per_mac,
        nem_input,
        dwm_resolution,
        nem_layers: layers,
        nem_flops,
        dwm_flops,
        total_flops: nem_flops + dwm_flops,
    }
}

/// Measured images per second.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ThroughputReport {
    pub version: u32,
    pub resolution: [usize; 2],
    pub threads: usize,
    pub iterations: usize,
    pub dwm_median_seconds: f64,
    pub dwm_images_per_second: f64,
    pub full_median_seconds: f64,
    pub full_images_per_second: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_runs(iterations: usize, mut f: impl FnMut() -> Result<(), EvalError>) -> Result<f64, EvalError> {
    for _ in 0..2 {
        f()?;
    }
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Median wall time of the warp alone (standardized input, the enhancer's
/// own triple for the image) and of the full raw-to-raw pipeline, in a pool
/// of `threads` workers.
pub fn bench_throughput(
    enhancer: &dyn ImageEnhancer,
    resolution: [usize; 2],
    iterations: usize,
    threads: usize,
) -> Result<ThroughputReport, EvalError> {
    let iterations = iterations.max(10);
    let threads = threads.max(1);
    let [h, w] = resolution;
    let img = Image::from_fn(h, w, crate::imaging::ColorSpace::Raw01, |y, x| {
        let v = ((y * 31 + x * 17) % 255) as f32 / 255.0;
        [v, 1.0 - v, 0.5]
    });
    let norm: NormalizationSpec = enhancer.normalization();
    let std = standardize(&img, &norm)?;
    let p: ParamTriple<f32> = enhancer.estimate(&[&img])?.remove(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EvalError::Report(e.to_string()))?;
    let (dwm, full) = pool.install(|| -> Result<(f64, f64), EvalError> {
        let dwm = time_runs(iterations, || {
            std::hint::black_box(dwm_apply(&std, &p).map_err(NemError::from)?);
            Ok(())
        })?;
        let full = time_runs(iterations, || {
            std::hint::black_box(enhancer.enhance_one(&img)?);
            Ok(())
        })?;
        Ok((dwm, full))
    })?;
    Ok(ThroughputReport {
        version: REPORT_VERSION,
        resolution,
        threads,
        iterations,
        dwm_median_seconds: dwm,
        dwm_images_per_second: 1.0 / dwm,
        full_median_seconds: full,
        full_images_per_second: 1.0 / full,
    })
}

/// Per-pixel standard deviation and the RMS change between consecutive
/// iterates of `iterate_enhance` output (first entry compares to the input).
pub fn iteration_stats(input: &Image, iterates: &[Image]) -> (Vec<f64>, Vec<f64>) {
    let stds = iterates.iter().map(Image::pixel_std).collect();
    let mut prev = input;
    let mut changes = Vec::with_capacity(iterates.len());
    for it in iterates {
        changes.push(it.rms_diff(prev));
        prev = it;
    }
    (stds, changes)
}
