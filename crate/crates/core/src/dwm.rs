//! Differentiable warping: a spatial filter shared by all channels, then a
//! per-pixel affine color map `x ← C_M·x + C_S`, both in standardized space.

use rayon::prelude::*;

use crate::corruptions::{invert3, AffineColorOracle};
use crate::imaging::{filter_replicate, ColorSpace, Image, ImageError, NormalizationSpec, CHANNELS};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::Scalar;

pub const COLOR_DIM: usize = 3;
pub const KERNEL_SIZE: usize = 5;
/// Length of the packed parameter vector for the default kernel size.
pub const PARAM_DIM: usize = param_dim(COLOR_DIM, KERNEL_SIZE);

const SERIAL_VERSION: u32 = 1;

/// `d(d+1) + K²`.
pub const fn param_dim(colors: usize, kernel_size: usize) -> usize {
    colors * (colors + 1) + kernel_size * kernel_size
}

#[derive(Debug, thiserror::Error)]
pub enum DwmError {
    #[error("parameter vector has length {got}, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("kernel size {0} must be odd and positive")]
    KernelSize(usize),
    #[error("unsupported parameter blob version {0}")]
    Version(u32),
    #[error("color corruption is not invertible")]
    Singular,
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Filter kernel, color matrix and color shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTriple<T> {
    pub kernel_size: usize,
    /// Row-major `kernel_size × kernel_size`.
    pub kernel: Vec<T>,
    pub matrix: [[T; 3]; 3],
    pub shift: [T; 3],
}

fn delta_kernel<T: Scalar>(k: usize) -> Vec<T> {
    let mut kernel = vec![T::zero(); k * k];
    kernel[(k / 2) * k + k / 2] = T::one();
    kernel
}

fn kernel_size_for(len: usize) -> Option<usize> {
    let taps = len.checked_sub(COLOR_DIM * (COLOR_DIM + 1))?;
    let k = (taps as f64).sqrt().round() as usize;
    (k * k == taps && k % 2 == 1).then_some(k)
}

impl<T: Scalar> ParamTriple<T> {
    pub fn identity(kernel_size: usize) -> Self {
        let mut matrix = [[T::zero(); 3]; 3];
        for (i, row) in matrix.iter_mut().enumerate() {
            row[i] = T::one();
        }
        Self {
            kernel_size,
            kernel: delta_kernel(kernel_size),
            matrix,
            shift: [T::zero(); 3],
        }
    }

    /// Inverse of [`unpack_params`].
    pub fn pack(&self) -> Vec<T> {
        let k = self.kernel_size;
        let center = (k / 2) * k + k / 2;
        let mut v: Vec<T> = self.kernel.clone();
        v[center] -= T::one();
        for i in 0..3 {
            for j in 0..3 {
                v.push(self.matrix[i][j] - if i == j { T::one() } else { T::zero() });
            }
        }
        v.extend_from_slice(&self.shift);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.kernel.iter().chain(self.matrix.iter().flatten()).chain(&self.shift).all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamTriple<U> {
        let c = |v: T| U::of(v.as_f64());
        ParamTriple {
            kernel_size: self.kernel_size,
            kernel: self.kernel.iter().map(|&v| c(v)).collect(),
            matrix: self.matrix.map(|r| r.map(c)),
            shift: self.shift.map(c),
        }
    }

    /// Version tag (u32 LE) followed by the packed vector as f32 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let packed = self.pack();
        let mut out = Vec::with_capacity(4 + 4 * packed.len());
        out.extend_from_slice(&SERIAL_VERSION.to_le_bytes());
        for v in packed {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DwmError> {
        if bytes.len() < 4 || (bytes.len() - 4) % 4 != 0 {
            return Err(DwmError::WrongLength {
                expected: 4 + 4 * PARAM_DIM,
                got: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
        if version != SERIAL_VERSION {
            return Err(DwmError::Version(version));
        }
        let values: Vec<T> = bytes[4..]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let k = kernel_size_for(values.len()).ok_or(DwmError::WrongLength {
            expected: PARAM_DIM,
            got: values.len(),
        })?;
        unpack_params(&values, k)
    }
}

/// Offsets from identity: `K = v[..K²] + Δ`, `C_M = I + v[K²..K²+9]`,
/// `C_S = v[K²+9..]`. The zero vector is the identity triple.
pub fn unpack_params<T: Scalar>(v: &[T], kernel_size: usize) -> Result<ParamTriple<T>, DwmError> {
    if kernel_size % 2 == 0 {
        return Err(DwmError::KernelSize(kernel_size));
    }
    let expected = param_dim(COLOR_DIM, kernel_size);
    if v.len() != expected {
        return Err(DwmError::WrongLength { expected, got: v.len() });
    }
    let taps = kernel_size * kernel_size;
    let mut p = ParamTriple::identity(kernel_size);
    for (dst, &src) in p.kernel.iter_mut().zip(&v[..taps]) {
        *dst += src;
    }
    for i in 0..3 {
        for j in 0..3 {
            p.matrix[i][j] += v[taps + i * 3 + j];
        }
    }
    p.shift.copy_from_slice(&v[taps + 9..]);
    Ok(p)
}

pub fn identity_params<T: Scalar>() -> ParamTriple<T> {
    ParamTriple::identity(KERNEL_SIZE)
}

/// Applies a triple to a standardized image of any size.
pub fn dwm_apply<T: Scalar>(img: &Image, p: &ParamTriple<T>) -> Result<Image, DwmError> {
    if img.space() != ColorSpace::Standardized {
        return Err(ImageError::WrongSpace {
            expected: ColorSpace::Standardized,
            got: img.space(),
        }
        .into());
    }
    let p = p.cast::<f32>();
    let mut out = if p.kernel == delta_kernel::<f32>(p.kernel_size) {
        img.clone()
    } else {
        filter_replicate(img, &p.kernel, p.kernel_size)
    };
    let (m, s) = (p.matrix, p.shift);
    let row = img.width().max(1) * CHANNELS;
    out.pixels_mut().par_chunks_mut(row).for_each(|r| {
        for px in r.chunks_exact_mut(CHANNELS) {
            let x = [px[0], px[1], px[2]];
            for i in 0..3 {
                px[i] = m[i][0] * x[0] + m[i][1] * x[1] + m[i][2] * x[2] + s[i];
            }
        }
    });
    Ok(out)
}

/// Graph version: `img` is `N×3×H×W`, `v` is `N×A` (one parameter row per
/// sample).
pub fn dwm_apply_differentiable<T: Scalar>(
    tape: &mut Tape<T>,
    img: Var,
    v: Var,
    kernel_size: usize,
) -> Result<Var, DwmError> {
    let (n, c, _, _) = tape.value(img).dims4("dwm")?;
    let (vn, a) = tape.value(v).dims2("dwm")?;
    let expected = param_dim(COLOR_DIM, kernel_size);
    if c != COLOR_DIM || vn != n || a != expected {
        return Err(TensorError::Shape {
            op: "dwm",
            reason: format!("image {:?} with parameters {:?}", tape.value(img).shape(), tape.value(v).shape()),
        }
        .into());
    }
    let taps = kernel_size * kernel_size;
    let identity = ParamTriple::<T>::identity(kernel_size);
    let delta = tape.constant(Tensor::from_fn(&[n, taps], |i| identity.kernel[i % taps]));
    let eye = tape.constant(Tensor::from_fn(&[n, 9], |i| identity.matrix[(i % 9) / 3][i % 3]));

    let k_off = tape.slice_columns(v, 0, taps)?;
    let kernels = tape.add(k_off, delta)?;
    let m_off = tape.slice_columns(v, taps, 9)?;
    let matrix = tape.add(m_off, eye)?;
    let shift = tape.slice_columns(v, taps + 9, 3)?;

    let filtered = tape.sample_filter(img, kernels)?;
    Ok(tape.color_affine(filtered, matrix, shift)?)
}

/// The raw-space corruption `x ↦ M·x + b` expressed in standardized
/// coordinates: `z ↦ S⁻¹MS·z + S⁻¹(Mμ + b − μ)`.
pub fn affine_in_standardized(oracle: &AffineColorOracle, norm: &NormalizationSpec) -> AffineColorOracle {
    let mu = norm.mean.map(f64::from);
    let sd = norm.std.map(f64::from);
    let m = oracle.matrix;
    let mut matrix = [[0.0; 3]; 3];
    let mut shift = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            matrix[i][j] = m[i][j] * sd[j] / sd[i];
        }
        let m_mu: f64 = (0..3).map(|j| m[i][j] * mu[j]).sum();
        shift[i] = (m_mu + oracle.shift[i] - mu[i]) / sd[i];
    }
    AffineColorOracle { matrix, shift }
}

/// Triple that exactly undoes an affine color corruption (delta kernel).
pub fn inverse_of_affine<T: Scalar>(
    oracle: &AffineColorOracle,
    norm: &NormalizationSpec,
) -> Result<ParamTriple<T>, DwmError> {
    let fwd = affine_in_standardized(oracle, norm);
    let inv = invert3(&fwd.matrix).ok_or(DwmError::Singular)?;
    let mut p = ParamTriple::<f64>::identity(KERNEL_SIZE);
    p.matrix = inv;
    for i in 0..3 {
        p.shift[i] = -(0..3).map(|j| inv[i][j] * fwd.shift[j]).sum::<f64>();
    }
    Ok(p.cast())
}

/// Color action of applying `first` then `second`, both with delta kernels.
pub fn compose_color<T: Scalar>(first: &ParamTriple<T>, second: &ParamTriple<T>) -> ParamTriple<T> {
    let mut out = ParamTriple::identity(first.kernel_size);
    for i in 0..3 {
        for j in 0..3 {
            out.matrix[i][j] = (0..3).map(|k| second.matrix[i][k] * first.matrix[k][j]).sum();
        }
        out.shift[i] = (0..3).map(|k| second.matrix[i][k] * first.shift[k]).sum::<T>() + second.shift[i];
    }
    out
}
