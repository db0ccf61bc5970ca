//! End-to-end enhancer training against a frozen classifier, regularized by
//! an exponential-moving-average shadow of the enhancer.

mod classifier;
pub mod synthetic;

pub use classifier::{
    accuracy, argmax_rows, classifier_forward, classifier_init, train_upstream, Classifier, ClassifierConfig,
    UpstreamConfig,
};
pub use synthetic::{class_names, load_dataset, make_synthetic_dataset, save_dataset, LabeledSample, NUM_CLASSES};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{enhancer_from, read_checkpoint, write_checkpoint, write_enhancer_fields, Checkpoint, CheckpointError};
use crate::corruptions::{apply, CorruptionError, CorruptionKind, CorruptionSpec, SEVERITIES};
use crate::dwm::DwmError;
use crate::imaging::{images_to_tensor, standardize, Image, ImageError};
use crate::layers::{apply_batch_stats, Forward, Phase};
use crate::nem::{enhance_graph, EnhancerState, NemConfig, NemError};
use crate::tensor::{
    AdamConfig, BatchStats, BoundParams, CosineSchedule, ModelState, OptimizerState, Tape, Tensor, TensorError, Var,
};
use crate::Scalar;

pub const TRAINING_KIND: &str = "training";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_ENHANCER: &str = "enhancer.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("shadow and live model layouts differ: {0}")]
    Layout(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Nem(#[from] NemError),
    #[error(transparent)]
    Dwm(#[from] DwmError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// EMA rate of the shadow.
    pub beta: f64,
    /// Weight of the shadow-path loss.
    pub lambda_ema: f64,
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// On-the-fly corruption pool; each image gets one kind uniformly.
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    /// Probability that a training image is left clean.
    pub clean_fraction: f64,
    pub nem: NemConfig,
    pub nem_input_size: usize,
    /// Checkpoint period in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.9,
            lambda_ema: 0.5,
            base_lr: 1e-3,
            min_lr: 0.0,
            total_steps: 3000,
            batch_size: 32,
            seed: 0,
            corruptions: CorruptionKind::ALL.to_vec(),
            severities: SEVERITIES.collect(),
            clean_fraction: 0.0,
            nem: NemConfig::default(),
            nem_input_size: 64,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta {} outside (0, 1)", self.beta));
        }
        if !(self.lambda_ema >= 0.0) {
            return bad(format!("lambda_ema {} is negative", self.lambda_ema));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch norm".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.corruptions.is_empty() && self.clean_fraction < 1.0 {
            return bad("empty corruption pool".into());
        }
        if let Some(s) = self.severities.iter().find(|s| !SEVERITIES.contains(s)) {
            return bad(format!("severity {s} outside 1..=5"));
        }
        if self.severities.is_empty() {
            return bad("no severities".into());
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return bad(format!("clean_fraction {} outside [0, 1]", self.clean_fraction));
        }
        self.nem.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            total_steps: self.total_steps,
            base_lr: self.base_lr,
            min_lr: self.min_lr,
        }
    }
}

/// Parameter-wise exponential moving average of the live enhancer; never
/// receives gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow<T> {
    pub model: ModelState<T>,
}

impl<T: Scalar> EmaShadow<T> {
    /// `θ_EMA,0 = θ₀`.
    pub fn new(live: &ModelState<T>) -> Self {
        let mut model = live.clone();
        model.zero_grads();
        model.freeze();
        Self { model }
    }
}

/// `θ_EMA ← β·θ_EMA + (1−β)·θ` over every tensor, running statistics
/// included.
pub fn ema_update<T: Scalar>(shadow: &mut EmaShadow<T>, live: &ModelState<T>, beta: f64) -> Result<(), TrainError> {
    if shadow.model.len() != live.len() {
        return Err(TrainError::Layout(format!("{} vs {} tensors", shadow.model.len(), live.len())));
    }
    let (b, rest) = (T::of(beta), T::of(1.0 - beta));
    for ((sn, sp), (ln, lp)) in shadow.model.iter_mut().zip(live.iter()) {
        if sn != ln || sp.value.shape() != lp.value.shape() {
            return Err(TrainError::Layout(format!("{sn} vs {ln}")));
        }
        for (s, &l) in sp.value.data_mut().iter_mut().zip(lp.value.data()) {
            *s = b * *s + rest * l;
        }
    }
    shadow.model.step = live.step;
    Ok(())
}

/// One optimization step's losses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainStepReport {
    pub step: u64,
    pub l1: f64,
    pub l2: f64,
    pub l: f64,
    pub lr: f64,
}

/// Corrupted training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub specs: Vec<Option<CorruptionSpec>>,
}

/// Samples `batch_size` images with replacement and corrupts each with one
/// uniformly drawn kind and severity from its own seeded stream.
pub fn sample_batch<R: Rng>(
    dataset: &[LabeledSample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Batch, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let picks: Vec<(usize, u64)> = (0..cfg.batch_size)
        .map(|_| (rng.gen_range(0..dataset.len()), rng.gen::<u64>()))
        .collect();
    let corrupted: Vec<(Image, Option<CorruptionSpec>)> = picks
        .par_iter()
        .map(|&(i, seed)| -> Result<_, TrainError> {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let img = &dataset[i].image;
            if cfg.corruptions.is_empty() || r.gen::<f64>() < cfg.clean_fraction {
                return Ok((img.clone(), None));
            }
            let kind = cfg.corruptions[r.gen_range(0..cfg.corruptions.len())];
            let severity = cfg.severities[r.gen_range(0..cfg.severities.len())];
            let (out, spec) = apply(img, kind, severity, &mut r)?;
            Ok((out, Some(spec)))
        })
        .collect::<Result<_, _>>()?;
    let labels = picks.iter().map(|&(i, _)| dataset[i].label).collect();
    let (images, specs) = corrupted.into_iter().unzip();
    Ok(Batch { images, labels, specs })
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub live: EnhancerState<T>,
    pub shadow: EmaShadow<T>,
    pub optimizer: OptimizerState<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let live = EnhancerState::new(cfg.nem.clone(), cfg.seed, cfg.nem_input_size)?;
        let shadow = EmaShadow::new(&live.nem);
        let optimizer = OptimizerState::new(&live.nem, AdamConfig::default(), cfg.schedule())?;
        Ok(Self {
            live,
            shadow,
            optimizer,
        })
    }
}

/// Batch-mean losses `(l1, l2)` of the live enhancer on a batch, without
/// updating anything. `x_ema` is recomputed from the shadow.
pub fn evaluate_losses<T: Scalar>(
    state: &TrainState<T>,
    clf: &Classifier<T>,
    batch: &Batch,
) -> Result<(f64, f64), TrainError> {
    let x = standardized_batch(&batch.images, &state.live)?;
    let x_ema = shadow_images(&state.shadow, &state.live, &x)?;
    let mut tape = Tape::new();
    let r = record_losses(&mut tape, state, clf, x, x_ema, &batch.labels)?;
    Ok((tape.value(r.l1).item().as_f64(), tape.value(r.l2).item().as_f64()))
}

fn standardized_batch<T: Scalar>(images: &[Image], live: &EnhancerState<T>) -> Result<Tensor<T>, TrainError> {
    let std: Vec<Image> = images
        .iter()
        .map(|img| standardize(img, &live.normalization))
        .collect::<Result<_, _>>()?;
    Ok(images_to_tensor(&std.iter().collect::<Vec<_>>())?)
}

/// `X_EMA = U_EMA(X)`, eval-mode batch norm, off the gradient tape.
fn shadow_images<T: Scalar>(
    shadow: &EmaShadow<T>,
    live: &EnhancerState<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>, TrainError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound = shadow.model.bind_frozen(&mut tape);
    let mut fwd = Forward::new(&mut tape, &bound, &shadow.model, Phase::Eval);
    let y = enhance_graph(&mut fwd, &live.config, xv)?;
    Ok(tape.value(y).clone())
}

struct Recorded<T> {
    l1: Var,
    l2: Var,
    bound: BoundParams,
    stats: Vec<(String, BatchStats<T>)>,
}

fn record_losses<T: Scalar>(
    tape: &mut Tape<T>,
    state: &TrainState<T>,
    clf: &Classifier<T>,
    x: Tensor<T>,
    x_ema: Tensor<T>,
    labels: &[usize],
) -> Result<Recorded<T>, TrainError> {
    let xv = tape.constant(x);
    let xev = tape.constant(x_ema);
    let bound = state.live.nem.bind(tape);
    let mut fwd = Forward::new(tape, &bound, &state.live.nem, Phase::Train);
    let x_bar = enhance_graph(&mut fwd, &state.live.config, xv)?;
    // running statistics follow the primary path only
    let stats = std::mem::take(&mut fwd.stats);
    let x_bar_ema = enhance_graph(&mut fwd, &state.live.config, xev)?;
    drop(fwd);

    let clf_bound = clf.model.bind_frozen(tape);
    let mut cf = Forward::new(tape, &clf_bound, &clf.model, Phase::Eval);
    let p = classifier_forward(&mut cf, &clf.config, x_bar)?;
    let p_ema = classifier_forward(&mut cf, &clf.config, x_bar_ema)?;
    drop(cf);
    let l1 = tape.softmax_cross_entropy(p, labels)?;
    let l2 = tape.softmax_cross_entropy(p_ema, labels)?;
    Ok(Recorded { l1, l2, bound, stats })
}

/// One step: shadow images, both enhancer paths through the frozen
/// classifier, `l = l1 + λ·l2`, Adam on the live enhancer, then the EMA
/// update.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    clf: &Classifier<T>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<TrainStepReport, TrainError> {
    let step = state.live.nem.step;
    let lr = cfg.schedule().lr_at(step);
    let x = standardized_batch(&batch.images, &state.live)?;
    let x_ema = shadow_images(&state.shadow, &state.live, &x)?;

    let mut tape = Tape::new();
    let Recorded { l1, l2, bound, stats } = record_losses(&mut tape, state, clf, x, x_ema, &batch.labels)?;
    let weighted = tape.scale(l2, T::of(cfg.lambda_ema));
    let loss = tape.add(l1, weighted)?;
    let report = TrainStepReport {
        step,
        l1: tape.value(l1).item().as_f64(),
        l2: tape.value(l2).item().as_f64(),
        l: tape.value(loss).item().as_f64(),
        lr,
    };
    if !report.l.is_finite() {
        let worst = state
            .live
            .nem
            .iter()
            .map(|(n, p)| (n, p.value.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()))))
            .fold(("", 0.0), |a, b| if b.1 > a.1 || b.1.is_nan() { b } else { a });
        return Err(TrainError::Diverged {
            step,
            detail: format!(
                "l1={} l2={} lr={lr:e}; largest |param| {}={}",
                report.l1, report.l2, worst.0, worst.1
            ),
        });
    }
    let grads = tape.backward(loss)?;
    state.live.nem.accumulate_grads(&tape, &bound, &grads);
    apply_batch_stats(&mut state.live.nem, &stats)?;
    state.optimizer.step(&mut state.live.nem, lr)?;
    ema_update(&mut state.shadow, &state.live.nem, cfg.beta)?;
    Ok(report)
}

/// Serializable [`ChaCha8Rng`] position.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal word position (a u128).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, TrainError> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| TrainError::Config(format!("bad rng word position {}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

pub fn training_checkpoint<T: Scalar>(
    state: &TrainState<T>,
    cfg: &TrainConfig,
    rng: &ChaCha8Rng,
) -> Result<Checkpoint, TrainError> {
    let mut c = Checkpoint::new(TRAINING_KIND);
    write_enhancer_fields(&mut c, &state.live)?;
    c.set("train_config", cfg)?;
    c.set("rng", &RngState::capture(rng))?;
    c.set("adam_t", &state.optimizer.t)?;
    c.set("adam", &state.optimizer.config)?;
    c.insert_model("live", &state.live.nem);
    c.insert_model("shadow", &state.shadow.model);
    c.insert_vectors("adam_m", &state.optimizer.first);
    c.insert_vectors("adam_v", &state.optimizer.second);
    Ok(c)
}

pub fn restore_training<T: Scalar>(c: &Checkpoint) -> Result<(TrainState<T>, TrainConfig, ChaCha8Rng), TrainError> {
    c.expect_kind(TRAINING_KIND)?;
    let cfg: TrainConfig = c.get("train_config")?;
    let live = enhancer_from::<T>(c, "live")?;
    let mut shadow = EmaShadow::new(&live.nem);
    c.restore_model("shadow", &mut shadow.model)?;
    let mut optimizer = OptimizerState::new(&live.nem, c.get("adam")?, cfg.schedule())?;
    c.restore_vectors("adam_m", &mut optimizer.first)?;
    c.restore_vectors("adam_v", &mut optimizer.second)?;
    optimizer.t = c.get("adam_t")?;
    let rng = c.get::<RngState>("rng")?.restore()?;
    Ok((
        TrainState {
            live,
            shadow,
            optimizer,
        },
        cfg,
        rng,
    ))
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

/// Most advanced `step_*.ckpt` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step_") && n.ends_with(".ckpt"))
        })
        .collect();
    found.sort();
    found.pop()
}

#[derive(Debug, Clone, Default)]
pub struct LoopOptions {
    /// Directory for checkpoints, the metrics log and the final enhancer.
    pub out_dir: Option<PathBuf>,
    /// Training checkpoint to continue from.
    pub resume_from: Option<PathBuf>,
    /// Stop after this global step count (for staged runs).
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub reports: Vec<TrainStepReport>,
}

#[derive(serde::Serialize)]
struct MetricsRow {
    #[serde(flatten)]
    report: TrainStepReport,
    wall_time: f64,
}

/// Runs [`train_step`] on cosine-scheduled learning rates with periodic
/// checkpoints; resumption from a checkpoint continues bit-exactly.
pub fn train_loop<T: Scalar>(
    cfg: &TrainConfig,
    dataset: &[LabeledSample],
    clf: &Classifier<T>,
    opts: &LoopOptions,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (mut state, mut rng) = match &opts.resume_from {
        Some(path) => {
            let (state, saved_cfg, rng) = restore_training::<T>(&read_checkpoint(path)?)?;
            if &saved_cfg != cfg {
                return Err(TrainError::Config(format!(
                    "checkpoint {} was written with a different config",
                    path.display()
                )));
            }
            (state, rng)
        }
        None => (TrainState::new(cfg)?, ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_5EED)),
    };
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(opts.resume_from.is_some())
                .write(true)
                .truncate(opts.resume_from.is_none())
                .open(&path)
                .map_err(|e| io_err(&path, e))?;
            Some((path, std::io::BufWriter::new(file)))
        }
        None => None,
    };
    let end = opts.stop_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let started = Instant::now();
    let mut reports = Vec::new();
    while state.live.nem.step < end {
        let batch = sample_batch(dataset, cfg, &mut rng)?;
        let report = train_step(&mut state, clf, &batch, cfg)?;
        if let Some((path, w)) = log.as_mut() {
            let row = MetricsRow {
                report,
                wall_time: started.elapsed().as_secs_f64(),
            };
            let line = serde_json::to_string(&row).expect("metrics row");
            writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
        }
        reports.push(report);
        let done = state.live.nem.step;
        if let Some(dir) = &opts.out_dir {
            let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
            if periodic || done == end {
                write_checkpoint(checkpoint_path(dir, done), &training_checkpoint(&state, cfg, &rng)?)?;
            }
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    if let Some(dir) = &opts.out_dir {
        if state.live.nem.step == cfg.total_steps {
            crate::checkpoint::save_enhancer(dir.join(FINAL_ENHANCER), &state.live)?;
        }
    }
    Ok(TrainOutcome { state, reports })
}
