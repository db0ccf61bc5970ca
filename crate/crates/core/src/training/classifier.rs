//! Small upstream classifier: conv blocks with 2× average pooling, global
//! pooling and a linear head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledSample, TrainError};
use crate::imaging::{images_to_tensor, standardize, Image, NormalizationSpec};
use crate::layers::{add_conv_bn, add_linear, apply_batch_stats, Forward, Phase};
use crate::tensor::{AdamConfig, CosineSchedule, ModelState, OptimizerState, Tape, TensorResult, Var};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub widths: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128],
            num_classes: super::synthetic::NUM_CLASSES,
        }
    }
}

/// A trained classifier with its input normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub config: ClassifierConfig,
    pub model: ModelState<T>,
    pub normalization: NormalizationSpec,
    pub classes: Vec<String>,
}

pub fn classifier_init<T: Scalar>(cfg: &ClassifierConfig, seed: u64) -> TensorResult<ModelState<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ModelState::new();
    let mut c_in = 3;
    for (i, &w) in cfg.widths.iter().enumerate() {
        add_conv_bn(&mut state, &format!("conv{i}"), c_in, w, &mut rng)?;
        c_in = w;
    }
    add_linear(&mut state, "fc", c_in, cfg.num_classes, 1.0, &mut rng)?;
    Ok(state)
}

/// Logits for a standardized batch.
pub fn classifier_forward<T: Scalar>(fwd: &mut Forward<'_, T>, cfg: &ClassifierConfig, x: Var) -> TensorResult<Var> {
    let mut y = x;
    for i in 0..cfg.widths.len() {
        y = fwd.conv_bn_relu(&format!("conv{i}"), y)?;
        if i + 1 < cfg.widths.len() {
            y = fwd.tape.avg_pool2d(y, 2, 2, 0)?;
        }
    }
    let pooled = fwd.tape.global_avg_pool(y)?;
    fwd.linear("fc", pooled)
}

impl<T: Scalar> Classifier<T> {
    /// Eval-mode class predictions for raw images.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>, TrainError> {
        let std: Vec<Image> = images
            .iter()
            .map(|img| standardize(img, &self.normalization))
            .collect::<Result<_, _>>()?;
        self.predict_standardized(&std.iter().collect::<Vec<_>>())
    }

    pub fn predict_standardized(&self, images: &[&Image]) -> Result<Vec<usize>, TrainError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.constant(images_to_tensor::<T>(images)?);
        let bound = self.model.bind_frozen(&mut tape);
        let mut fwd = Forward::new(&mut tape, &bound, &self.model, Phase::Eval);
        let logits = classifier_forward(&mut fwd, &self.config, x)?;
        Ok(argmax_rows(tape.value(logits).data(), self.config.num_classes))
    }
}

pub fn argmax_rows<T: Scalar>(data: &[T], width: usize) -> Vec<usize> {
    data.chunks_exact(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamConfig {
    pub arch: ClassifierConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for UpstreamConfig {
    fn default() -> Self {
        Self {
            arch: ClassifierConfig::default(),
            epochs: 8,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Trains on clean images with cross-entropy and Adam (cosine schedule) and
/// returns the frozen classifier.
pub fn train_upstream<T: Scalar>(
    dataset: &[LabeledSample],
    classes: Vec<String>,
    cfg: &UpstreamConfig,
) -> Result<Classifier<T>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let norm = NormalizationSpec::IMAGENET;
    let std: Vec<Image> = dataset
        .iter()
        .map(|s| standardize(&s.image, &norm))
        .collect::<Result<_, _>>()?;
    let mut model = classifier_init::<T>(&cfg.arch, cfg.seed)?;
    let batch = cfg.batch_size.clamp(2, dataset.len().max(2));
    let per_epoch = dataset.len().div_ceil(batch);
    let total = (cfg.epochs * per_epoch) as u64;
    let schedule = CosineSchedule {
        total_steps: total,
        base_lr: cfg.lr,
        min_lr: 0.0,
    };
    let mut opt = OptimizerState::new(&model, AdamConfig::default(), schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1A5);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &std[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset[i].label).collect();
            let mut tape = Tape::new();
            let x = tape.constant(images_to_tensor::<T>(&imgs)?);
            let bound = model.bind(&mut tape);
            let mut fwd = Forward::new(&mut tape, &bound, &model, Phase::Train);
            let logits = classifier_forward(&mut fwd, &cfg.arch, x)?;
            let stats = std::mem::take(&mut fwd.stats);
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    detail: format!("upstream loss {lv}"),
                });
            }
            let grads = tape.backward(loss)?;
            model.accumulate_grads(&tape, &bound, &grads);
            apply_batch_stats(&mut model, &stats)?;
            opt.step(&mut model, schedule.lr_at(step))?;
            step += 1;
        }
    }
    model.freeze();
    Ok(Classifier {
        config: cfg.arch.clone(),
        model,
        normalization: norm,
        classes,
    })
}

/// Fraction of correctly classified samples.
pub fn accuracy<T: Scalar>(clf: &Classifier<T>, samples: &[LabeledSample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let pred = clf.predict(&imgs)?;
        correct += pred.iter().zip(chunk).filter(|(p, s)| **p == s.label).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}
