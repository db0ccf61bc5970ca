//! The parameter-estimation CNN and the composed enhancer: the CNN sees a
//! low-resolution standardized copy, the warp is applied at full resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dwm::{dwm_apply, dwm_apply_differentiable, param_dim, unpack_params, DwmError, ParamTriple, COLOR_DIM};
use crate::imaging::{
    destandardize, images_to_tensor, prepare_nem_input, resize_side_for_crop, standardize, ColorSpace, Image,
    ImageError, NormalizationSpec,
};
use crate::layers::{add_conv_bn, add_linear, Forward, Phase};
use crate::tensor::{ModelState, Tape, TensorError, Var};
use crate::Scalar;

/// Spatial size the three stride-4 pools need to leave at least one cell.
pub const MIN_INPUT: usize = 16;
const POOL_KERNEL: usize = 5;
const POOL_STRIDE: usize = 4;
const POOL_PAD: usize = 2;
const HEAD_INIT_SCALE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum NemError {
    #[error("estimator input {height}x{width} is smaller than {MIN_INPUT}x{MIN_INPUT}")]
    TooSmall { height: usize, width: usize },
    #[error("invalid estimator config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Dwm(#[from] DwmError),
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NemConfig {
    /// Stem width followed by the three block widths.
    pub widths: [usize; 4],
    #[serde(default)]
    pub use_residual: bool,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
}

fn default_kernel() -> usize {
    crate::dwm::KERNEL_SIZE
}

impl Default for NemConfig {
    fn default() -> Self {
        Self {
            widths: [64, 128, 256, 512],
            use_residual: false,
            kernel_size: default_kernel(),
        }
    }
}

impl NemConfig {
    pub fn output_dim(&self) -> usize {
        param_dim(COLOR_DIM, self.kernel_size)
    }

    pub fn validate(&self) -> Result<(), NemError> {
        if self.widths.contains(&0) {
            return Err(NemError::Config(format!("widths must be positive: {:?}", self.widths)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(NemError::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        Ok(())
    }
}

/// Output side of one `pool 5 / stride 4 / pad 2` stage.
pub fn pooled_size(n: usize) -> usize {
    (n + 2 * POOL_PAD - POOL_KERNEL) / POOL_STRIDE + 1
}

/// Kaiming-uniform convolutions and linear layers, unit batch norms, and a
/// head scaled by 1e-3 with zero bias so the first enhancer is near identity.
pub fn nem_init<T: Scalar>(cfg: &NemConfig, seed: u64) -> Result<ModelState<T>, NemError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ModelState::new();
    let w = cfg.widths;
    add_conv_bn(&mut state, "stem", COLOR_DIM, w[0], &mut rng)?;
    for b in 0..3 {
        add_conv_bn(&mut state, &format!("block{b}.conv0"), w[b], w[b + 1], &mut rng)?;
        add_conv_bn(&mut state, &format!("block{b}.conv1"), w[b + 1], w[b + 1], &mut rng)?;
    }
    add_linear(&mut state, "head", w[3], cfg.output_dim(), HEAD_INIT_SCALE, &mut rng)?;
    Ok(state)
}

/// Estimator output plus the feature shape after each block.
#[derive(Debug)]
pub struct NemOutput {
    /// `N × A` parameter offsets.
    pub params: Var,
    pub block_shapes: Vec<Vec<usize>>,
}

pub fn nem_forward<T: Scalar>(fwd: &mut Forward<'_, T>, cfg: &NemConfig, x: Var) -> Result<NemOutput, NemError> {
    let (_, _, h, w) = fwd.tape.value(x).dims4("nem")?;
    if h < MIN_INPUT || w < MIN_INPUT {
        return Err(NemError::TooSmall { height: h, width: w });
    }
    let mut y = fwd.conv_bn_relu("stem", x)?;
    let mut block_shapes = Vec::with_capacity(3);
    for b in 0..3 {
        y = fwd.tape.avg_pool2d(y, POOL_KERNEL, POOL_STRIDE, POOL_PAD)?;
        let first = fwd.conv_bn_relu(&format!("block{b}.conv0"), y)?;
        let second = fwd.conv_bn_relu(&format!("block{b}.conv1"), first)?;
        y = if cfg.use_residual {
            fwd.tape.add(first, second)?
        } else {
            second
        };
        block_shapes.push(fwd.tape.value(y).shape().to_vec());
    }
    let pooled = fwd.tape.global_avg_pool(y)?;
    let params = fwd.linear("head", pooled)?;
    Ok(NemOutput { params, block_shapes })
}

/// Graph for `U(x) = D(x, E(x))` on a standardized batch.
pub fn enhance_graph<T: Scalar>(fwd: &mut Forward<'_, T>, cfg: &NemConfig, x: Var) -> Result<Var, NemError> {
    let out = nem_forward(fwd, cfg, x)?;
    Ok(dwm_apply_differentiable(fwd.tape, x, out.params, cfg.kernel_size)?)
}

/// A trained estimator with its preprocessing contract.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerState<T> {
    pub config: NemConfig,
    pub nem: ModelState<T>,
    pub normalization: NormalizationSpec,
    /// Side of the square estimator input.
    pub nem_input_size: usize,
}

impl<T: Scalar> EnhancerState<T> {
    pub fn new(config: NemConfig, seed: u64, nem_input_size: usize) -> Result<Self, NemError> {
        if nem_input_size < MIN_INPUT {
            return Err(NemError::TooSmall {
                height: nem_input_size,
                width: nem_input_size,
            });
        }
        Ok(Self {
            nem: nem_init(&config, seed)?,
            config,
            normalization: NormalizationSpec::IMAGENET,
            nem_input_size,
        })
    }

    /// Standardized estimator input: the image as-is, or the resize + center
    /// crop copy when `full_pipeline`.
    pub fn nem_input(&self, img: &Image, full_pipeline: bool) -> Result<Image, NemError> {
        let src = if full_pipeline {
            let side = self.nem_input_size;
            prepare_nem_input(img, resize_side_for_crop(side), side)?
        } else {
            img.clone()
        };
        Ok(standardize(&src, &self.normalization)?)
    }

    /// Eval-mode parameter estimates for standardized, equally sized inputs.
    pub fn estimate_standardized(&self, inputs: &[&Image]) -> Result<Vec<ParamTriple<T>>, NemError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.constant(images_to_tensor::<T>(inputs)?);
        let bound = self.nem.bind_frozen(&mut tape);
        let mut fwd = Forward::new(&mut tape, &bound, &self.nem, Phase::Eval);
        let out = nem_forward(&mut fwd, &self.config, x)?;
        let v = tape.value(out.params);
        let a = self.config.output_dim();
        v.data()
            .chunks_exact(a)
            .map(|row| Ok(unpack_params(row, self.config.kernel_size)?))
            .collect()
    }

    /// The preprocessing choice the enhancer trait uses: images already at
    /// the estimator size are fed as-is.
    pub fn needs_resize(&self, img: &Image) -> bool {
        img.height() != self.nem_input_size || img.width() != self.nem_input_size
    }
}

/// Standardize, estimate, warp at full resolution, destandardize and clamp.
pub fn enhance<T: Scalar>(
    state: &EnhancerState<T>,
    img: &Image,
    full_pipeline: bool,
) -> Result<(Image, ParamTriple<f32>), NemError> {
    let input = state.nem_input(img, full_pipeline)?;
    let params = state.estimate_standardized(&[&input])?.remove(0).cast::<f32>();
    let out = warp_raw(img, &params, &state.normalization)?;
    Ok((out, params))
}

fn warp_raw(img: &Image, params: &ParamTriple<f32>, norm: &NormalizationSpec) -> Result<Image, NemError> {
    let std_img = standardize(img, norm)?;
    let mut out = destandardize(&dwm_apply(&std_img, params)?, norm)?;
    out.clamp01();
    Ok(out)
}

/// Anything that maps a raw image to a warp.
pub trait ImageEnhancer: Sync {
    fn normalization(&self) -> NormalizationSpec;

    fn estimate(&self, images: &[&Image]) -> Result<Vec<ParamTriple<f32>>, NemError>;

    fn enhance_batch(&self, images: &[&Image]) -> Result<Vec<Image>, NemError> {
        let norm = self.normalization();
        self.estimate(images)?
            .iter()
            .zip(images)
            .map(|(p, img)| warp_raw(img, p, &norm))
            .collect()
    }

    fn enhance_one(&self, img: &Image) -> Result<Image, NemError> {
        Ok(self.enhance_batch(&[img])?.remove(0))
    }
}

impl<T: Scalar> ImageEnhancer for EnhancerState<T> {
    fn normalization(&self) -> NormalizationSpec {
        self.normalization
    }

    fn estimate(&self, images: &[&Image]) -> Result<Vec<ParamTriple<f32>>, NemError> {
        let inputs: Vec<Image> = images
            .iter()
            .map(|img| self.nem_input(img, self.needs_resize(img)))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&Image> = inputs.iter().collect();
        Ok(self.estimate_standardized(&refs)?.iter().map(ParamTriple::cast).collect())
    }
}

/// Applies the same triple to every image.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedEnhancer {
    pub params: ParamTriple<f32>,
    pub normalization: NormalizationSpec,
}

impl FixedEnhancer {
    pub fn identity() -> Self {
        Self {
            params: crate::dwm::identity_params(),
            normalization: NormalizationSpec::IMAGENET,
        }
    }

    /// Uniform `k×k` box filter with the identity color map; exercises the
    /// filter stage, unlike [`FixedEnhancer::identity`].
    pub fn box_filter(k: usize) -> Self {
        let mut params = crate::dwm::identity_params();
        params.kernel_size = k;
        params.kernel = vec![1.0 / (k * k) as f32; k * k];
        Self {
            params,
            normalization: NormalizationSpec::IMAGENET,
        }
    }
}

impl ImageEnhancer for FixedEnhancer {
    fn normalization(&self) -> NormalizationSpec {
        self.normalization
    }

    fn estimate(&self, images: &[&Image]) -> Result<Vec<ParamTriple<f32>>, NemError> {
        Ok(vec![self.params.clone(); images.len()])
    }
}

/// `x₀ = img`, `xᵢ = enhance(xᵢ₋₁)`; returns `x₁ … xₙ`.
pub fn iterate_enhance(enhancer: &dyn ImageEnhancer, img: &Image, n: usize) -> Result<Vec<Image>, NemError> {
    if img.space() != ColorSpace::Raw01 {
        return Err(ImageError::WrongSpace {
            expected: ColorSpace::Raw01,
            got: img.space(),
        }
        .into());
    }
    let mut out: Vec<Image> = Vec::with_capacity(n);
    for _ in 0..n {
        let next = enhancer.enhance_one(out.last().unwrap_or(img))?;
        out.push(next);
    }
    Ok(out)
}
