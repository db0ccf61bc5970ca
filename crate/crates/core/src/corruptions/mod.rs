//! Synthetic corruptions with five severity levels: the four color-cast
//! corruptions (darken, horizon, night, white point), a subset of the usual
//! noise / blur / digital corruptions, and a 1-to-3 mixed sampler.
//!
//! Every generator is a pure function of `(image, severity, rng stream)` and
//! records its realized random draws in a [`CorruptionSpec`].

mod dataset;

pub use dataset::{corrupt_dataset, derive_seed, read_manifest, Manifest, ManifestHeader, ManifestRecord, MANIFEST_FILE};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::imaging::{filter_replicate, ColorSpace, Image, ImageError, CHANNELS};

pub const SEVERITIES: std::ops::RangeInclusive<u8> = 1..=5;

pub const HORIZON_DELTA: f64 = 32.0;
pub const NIGHT_DELTA: f64 = 24.0;
pub const WHITE_POINT_RANGE: (f64, f64) = (223.0, 287.0);

const DARKEN_SCALE: [f32; 5] = [0.8, 0.65, 0.5, 0.35, 0.2];
const CAST_STRENGTH: [f32; 5] = [0.2, 0.35, 0.5, 0.7, 0.9];
const NIGHT_KNEE: f32 = 0.7;
const NIGHT_KNEE_SLOPE: f32 = 0.5;
const GAUSSIAN_SIGMA: [f32; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];
const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const IMPULSE_FRACTION: [f64; 5] = [0.01, 0.02, 0.03, 0.05, 0.07];
const DEFOCUS_RADIUS: [usize; 5] = [1, 2, 3, 4, 6];
const MOTION_LENGTH: [usize; 5] = [3, 5, 7, 9, 11];
const CONTRAST_FACTOR: [f32; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];
const BRIGHTNESS_SHIFT: [f32; 5] = [0.05, 0.1, 0.15, 0.2, 0.25];
const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 5, 6];

#[derive(Debug, thiserror::Error)]
pub enum CorruptionError {
    #[error("severity {0} outside 1..=5")]
    InvalidSeverity(u8),
    #[error("unknown corruption kind `{0}`")]
    UnknownKind(String),
    #[error("corruptions operate on [0, 1] images, got {0:?}")]
    WrongSpace(ColorSpace),
    #[error("dataset at {0} contains no images")]
    EmptyDataset(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Darken,
    Horizon,
    Night,
    Whitepoint,
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 12] = [
        Self::Darken,
        Self::Horizon,
        Self::Night,
        Self::Whitepoint,
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::ImpulseNoise,
        Self::DefocusBlur,
        Self::MotionBlur,
        Self::Contrast,
        Self::Brightness,
        Self::Pixelate,
    ];

    /// Kinds whose action is an exact per-pixel affine color map.
    pub const AFFINE: [CorruptionKind; 4] = [Self::Darken, Self::Contrast, Self::Whitepoint, Self::Horizon];

    pub fn name(self) -> &'static str {
        match self {
            Self::Darken => "darken",
            Self::Horizon => "horizon",
            Self::Night => "night",
            Self::Whitepoint => "whitepoint",
            Self::GaussianNoise => "gaussian_noise",
            Self::ShotNoise => "shot_noise",
            Self::ImpulseNoise => "impulse_noise",
            Self::DefocusBlur => "defocus_blur",
            Self::MotionBlur => "motion_blur",
            Self::Contrast => "contrast",
            Self::Brightness => "brightness",
            Self::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = CorruptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CorruptionError::UnknownKind(s.to_string()))
    }
}

/// Exact `x ↦ M·x + b` action of an affine color corruption, before clamping.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AffineColorOracle {
    pub matrix: [[f64; 3]; 3],
    pub shift: [f64; 3],
}

impl AffineColorOracle {
    pub fn diagonal(gains: [f64; 3]) -> Self {
        let mut matrix = [[0.0; 3]; 3];
        for c in 0..3 {
            matrix[c][c] = gains[c];
        }
        Self { matrix, shift: [0.0; 3] }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for px in out.pixels_mut().chunks_exact_mut(CHANNELS) {
            let x = [px[0] as f64, px[1] as f64, px[2] as f64];
            for i in 0..3 {
                px[i] = (self.matrix[i][0] * x[0] + self.matrix[i][1] * x[1] + self.matrix[i][2] * x[2] + self.shift[i])
                    as f32;
            }
        }
        out
    }

    pub fn determinant(&self) -> f64 {
        det3(&self.matrix)
    }

    pub fn inverse_matrix(&self) -> Option<[[f64; 3]; 3]> {
        invert3(&self.matrix)
    }

    /// Frobenius-norm condition number `‖M‖·‖M⁻¹‖`.
    pub fn condition_number(&self) -> f64 {
        match self.inverse_matrix() {
            Some(inv) => frobenius(&self.matrix) * frobenius(&inv),
            None => f64::INFINITY,
        }
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub(crate) fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = det3(m);
    if det.abs() < 1e-12 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // cofactor of (j, i)
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    Some(inv)
}

fn frobenius(m: &[[f64; 3]; 3]) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Realized randomness of one corruption.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Draws {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// RGB white point on the 0–255 scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub white_point: Option<[f64; 3]>,
    /// Seed of the per-pixel noise stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
    /// Motion direction in degrees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
}

/// One applied corruption.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub draws: Draws,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<AffineColorOracle>,
}

impl CorruptionSpec {
    /// Checks the realized draws against the sampling ranges of the kind.
    pub fn draws_in_range(&self) -> bool {
        let within = |v: f64, lo: f64, hi: f64| (lo..=hi).contains(&v);
        let d = &self.draws;
        let severity_ok = SEVERITIES.contains(&self.severity);
        severity_ok
            && match self.kind {
                CorruptionKind::Horizon => d.delta.is_some_and(|v| within(v, -HORIZON_DELTA, HORIZON_DELTA)),
                CorruptionKind::Night => d.delta.is_some_and(|v| within(v, -NIGHT_DELTA, NIGHT_DELTA)),
                CorruptionKind::Whitepoint => d
                    .white_point
                    .is_some_and(|w| w.iter().all(|&c| within(c, WHITE_POINT_RANGE.0, WHITE_POINT_RANGE.1))),
                CorruptionKind::MotionBlur => d.angle.is_some_and(|a| within(a, 0.0, 180.0)),
                _ => true,
            }
    }
}

/// Rec. 601 luma.
pub fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn level<T: Copy>(table: &[T; 5], severity: u8) -> T {
    table[severity as usize - 1]
}

fn check(img: &Image, severity: u8) -> Result<(), CorruptionError> {
    if !SEVERITIES.contains(&severity) {
        return Err(CorruptionError::InvalidSeverity(severity));
    }
    if img.space() != ColorSpace::Raw01 {
        return Err(CorruptionError::WrongSpace(img.space()));
    }
    Ok(())
}

fn scale_channels(img: &Image, gains: [f32; 3]) -> Image {
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_exact_mut(CHANNELS) {
        for c in 0..CHANNELS {
            px[c] *= gains[c];
        }
    }
    out.clamp01();
    out
}

fn cast_gains(white: [f64; 3], strength: f32) -> [f32; 3] {
    white.map(|w| 1.0 + strength * (w as f32 / 255.0 - 1.0))
}

fn spec(kind: CorruptionKind, severity: u8, draws: Draws, oracle: Option<AffineColorOracle>) -> CorruptionSpec {
    CorruptionSpec {
        kind,
        severity,
        draws,
        oracle,
    }
}

pub fn apply_darken(img: &Image, severity: u8) -> Result<(Image, CorruptionSpec), CorruptionError> {
    check(img, severity)?;
    let s = level(&DARKEN_SCALE, severity);
    let oracle = AffineColorOracle::diagonal([s as f64; 3]);
    Ok((
        scale_channels(img, [s; 3]),
        spec(CorruptionKind::Darken, severity, Draws::default(), Some(oracle)),
    ))
}

pub fn apply_horizon<R: Rng>(img: &Image, severity: u8, rng: &mut R) -> Result<(Image, CorruptionSpec), CorruptionError> {
    check(img, severity)?;
    let delta = rng.gen_range(-HORIZON_DELTA..=HORIZON_DELTA);
    Ok(horizon_with(img, severity, delta, level(&CAST_STRENGTH, severity)))
}

pub(crate) fn horizon_with(img: &Image, severity: u8, delta: f64, strength: f32) -> (Image, CorruptionSpec) {
    let white = [255.0, 192.0 + delta, 192.0 - delta];
    let gains = cast_gains(white, strength);
    let draws = Draws {
        delta: Some(delta),
        white_point: Some(white),
        ..Draws::default()
    };
    let oracle = AffineColorOracle::diagonal(gains.map(f64::from));
    (
        scale_channels(img, gains),
        spec(CorruptionKind::Horizon, severity, draws, Some(oracle)),
    )
}

pub fn apply_night<R: Rng>(img: &Image, severity: u8, rng: &mut R) -> Result<(Image, CorruptionSpec), CorruptionError> {
    check(img, severity)?;
    let delta = rng.gen_range(-NIGHT_DELTA..=NIGHT_DELTA);
    let white = [32.0, 32.0, 64.0 + delta];
    let mut out = scale_channels(img, cast_gains(white, level(&CAST_STRENGTH, severity)));
    for px in out.pixels_mut().chunks_exact_mut(CHANNELS) {
        let l = luma(px);
        if l > NIGHT_KNEE {
            let factor = (NIGHT_KNEE + NIGHT_KNEE_SLOPE * (l - NIGHT_KNEE)) / l;
            for v in px.iter_mut() {
                *v *= factor;
            }
        }
    }
    let draws = Draws {
        delta: Some(delta),
        white_point: Some(white),
        ..Draws::default()
    };
    Ok((out, spec(CorruptionKind::Night, severity, draws, None)))
}

/// Full-strength white-point gain regardless of severity.
pub fn apply_whitepoint<R: Rng>(img: &Image, severity: u8, rng: &mut R) -> Result<(Image, CorruptionSpec), CorruptionError> {
    check(img, severity)?;
    let (lo, hi) = WHITE_POINT_RANGE;
    let white = [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)];
    Ok(whitepoint_with(img, severity, white))
}

pub(crate) fn whitepoint_with(img: &Image, severity: u8, white: [f64; 3]) -> (Image, CorruptionSpec) {
    let gains = white.map(|w| (w / 255.0) as f32);
    let draws = Draws {
        white_point: Some(white),
        ..Draws::default()
    };
    let oracle = AffineColorOracle::diagonal(gains.map(f64::from));
    (
        scale_channels(img, gains),
        spec(CorruptionKind::Whitepoint, severity, draws, Some(oracle)),
    )
}

fn noise_rng<R: Rng>(rng: &mut R) -> (u64, ChaCha8Rng) {
    let seed = rng.gen::<u64>();
    (seed, ChaCha8Rng::seed_from_u64(seed))
}

fn disk_kernel(radius: usize) -> (Vec<f32>, usize) {
    let k = 2 * radius + 1;
    let r2 = (radius * radius) as isize;
    let mut taps: Vec<f32> = (0..k * k)
        .map(|i| {
            let (y, x) = ((i / k) as isize - radius as isize, (i % k) as isize - radius as isize);
            if y * y + x * x <= r2 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let total: f32 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    (taps, k)
}

fn line_kernel(length: usize, angle_deg: f64) -> (Vec<f32>, usize) {
    let k = length;
    let c = (k / 2) as isize;
    let (s, co) = angle_deg.to_radians().sin_cos();
    let mut taps = vec![0.0f32; k * k];
    for t in 0..length {
        let offset = t as f64 - (length as f64 - 1.0) / 2.0;
        let x = (c + (offset * co).round() as isize).clamp(0, k as isize - 1) as usize;
        let y = (c + (offset * s).round() as isize).clamp(0, k as isize - 1) as usize;
        taps[y * k + x] += 1.0;
    }
    taps.iter_mut().for_each(|t| *t /= length as f32);
    (taps, k)
}

/// The generic (non color-cast) corruptions.
pub fn apply_standard<R: Rng>(
    img: &Image,
    kind: CorruptionKind,
    severity: u8,
    rng: &mut R,
) -> Result<(Image, CorruptionSpec), CorruptionError> {
    check(img, severity)?;
    let mut draws = Draws::default();
    let mut oracle = None;
    let mut out = match kind {
        CorruptionKind::GaussianNoise => {
            let (seed, mut nrng) = noise_rng(rng);
            draws.noise_seed = Some(seed);
            let normal = Normal::new(0.0f32, level(&GAUSSIAN_SIGMA, severity)).expect("positive sigma");
            let mut out = img.clone();
            out.pixels_mut().iter_mut().for_each(|v| *v += normal.sample(&mut nrng));
            out
        }
        CorruptionKind::ShotNoise => {
            let (seed, mut nrng) = noise_rng(rng);
            draws.noise_seed = Some(seed);
            let photons = level(&SHOT_PHOTONS, severity);
            let mut out = img.clone();
            for v in out.pixels_mut() {
                let rate = *v as f64 * photons;
                *v = if rate > 0.0 {
                    (Poisson::new(rate).expect("positive rate").sample(&mut nrng) / photons) as f32
                } else {
                    0.0
                };
            }
            out
        }
        CorruptionKind::ImpulseNoise => {
            let (seed, mut nrng) = noise_rng(rng);
            draws.noise_seed = Some(seed);
            let fraction = level(&IMPULSE_FRACTION, severity);
            let mut out = img.clone();
            for v in out.pixels_mut() {
                if nrng.gen::<f64>() < fraction {
                    *v = if nrng.gen::<bool>() { 1.0 } else { 0.0 };
                }
            }
            out
        }
        CorruptionKind::DefocusBlur => {
            let (taps, k) = disk_kernel(level(&DEFOCUS_RADIUS, severity));
            filter_replicate(img, &taps, k)
        }
        CorruptionKind::MotionBlur => {
            let angle = rng.gen_range(0.0..180.0);
            draws.angle = Some(angle);
            let (taps, k) = line_kernel(level(&MOTION_LENGTH, severity), angle);
            filter_replicate(img, &taps, k)
        }
        CorruptionKind::Contrast => {
            let f = level(&CONTRAST_FACTOR, severity);
            let means = img.channel_means();
            let mut out = img.clone();
            for px in out.pixels_mut().chunks_exact_mut(CHANNELS) {
                for c in 0..CHANNELS {
                    px[c] = means[c] as f32 + f * (px[c] - means[c] as f32);
                }
            }
            let mut o = AffineColorOracle::diagonal([f as f64; 3]);
            o.shift = means.map(|m| (1.0 - f as f64) * m);
            oracle = Some(o);
            out
        }
        CorruptionKind::Brightness => {
            let b = level(&BRIGHTNESS_SHIFT, severity);
            let mut out = img.clone();
            out.pixels_mut().iter_mut().for_each(|v| *v += b);
            let mut o = AffineColorOracle::diagonal([1.0; 3]);
            o.shift = [b as f64; 3];
            oracle = Some(o);
            out
        }
        CorruptionKind::Pixelate => {
            let block = level(&PIXELATE_BLOCK, severity);
            Image::from_fn(img.height(), img.width(), ColorSpace::Raw01, |y, x| {
                img.pixel(y / block * block, x / block * block)
            })
        }
        other => return apply(img, other, severity, rng),
    };
    out.clamp01();
    Ok((out, spec(kind, severity, draws, oracle)))
}

/// Applies any corruption kind.
pub fn apply<R: Rng>(
    img: &Image,
    kind: CorruptionKind,
    severity: u8,
    rng: &mut R,
) -> Result<(Image, CorruptionSpec), CorruptionError> {
    match kind {
        CorruptionKind::Darken => apply_darken(img, severity),
        CorruptionKind::Horizon => apply_horizon(img, severity, rng),
        CorruptionKind::Night => apply_night(img, severity, rng),
        CorruptionKind::Whitepoint => apply_whitepoint(img, severity, rng),
        _ => apply_standard(img, kind, severity, rng),
    }
}

/// Applies 1–3 distinct kinds drawn uniformly from the full pool, in draw
/// order, each at a uniform severity.
pub fn sample_mixed<R: Rng>(img: &Image, rng: &mut R) -> Result<(Image, Vec<CorruptionSpec>), CorruptionError> {
    let n = rng.gen_range(1..=3usize);
    let mut pool = CorruptionKind::ALL.to_vec();
    for i in 0..n {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut current = img.clone();
    let mut specs = Vec::with_capacity(n);
    for &kind in &pool[..n] {
        let severity = rng.gen_range(SEVERITIES);
        let (next, s) = apply(&current, kind, severity, rng)?;
        current = next;
        specs.push(s);
    }
    Ok((current, specs))
}

#[cfg(test)]
mod tests;
