//! RGB image container, PNG I/O, standardization and the resize / crop
//! preprocessing used to build the estimator's low-resolution input.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::tensor::Tensor;
use crate::Scalar;

pub const CHANNELS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    NotFound(String),
    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedFormat { path: String, reason: String },
    #[error("corrupt PNG {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("expected {expected:?} image, got {got:?}")]
    WrongSpace { expected: ColorSpace, got: ColorSpace },
    #[error("crop of {size} does not fit {height}x{width} image")]
    CropTooLarge { size: usize, height: usize, width: usize },
    #[error("invalid image geometry: {0}")]
    Geometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    /// Pixels in `[0, 1]`.
    Raw01,
    /// `(raw − μ) / σ` per channel.
    Standardized,
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizationSpec {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormalizationSpec {
    /// ImageNet statistics.
    pub const IMAGENET: Self = Self {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub const IDENTITY: Self = Self {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn new(mean: [f32; 3], std: [f32; 3]) -> Result<Self, ImageError> {
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(ImageError::Geometry(format!("standard deviations must be positive: {std:?}")));
        }
        Ok(Self { mean, std })
    }
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// Height × width × 3 image, HWC row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    space: ColorSpace,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, space: ColorSpace) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::Geometry(format!("{height}x{width} image")));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(ImageError::Geometry(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * CHANNELS,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            space,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3], space: ColorSpace) -> Self {
        let pixels = rgb.iter().copied().cycle().take(height * width * CHANNELS).collect();
        Self {
            height,
            width,
            pixels,
            space,
        }
    }

    pub fn from_fn(height: usize, width: usize, space: ColorSpace, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            pixels,
            space,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Same geometry and space, new pixel buffer.
    pub fn with_pixels(&self, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), self.pixels.len());
        Self {
            height: self.height,
            width: self.width,
            pixels,
            space: self.space,
        }
    }

    pub fn clamp01(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Root-mean-square pixel difference.
    pub fn rms_diff(&self, other: &Image) -> f64 {
        let sq: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        (sq / self.pixels.len() as f64).sqrt()
    }

    /// Standard deviation over all pixel values.
    pub fn pixel_std(&self) -> f64 {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
        (self.pixels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.pixels.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width) as f64;
        acc.map(|a| a / n)
    }

    fn expect_space(&self, expected: ColorSpace) -> Result<(), ImageError> {
        if self.space == expected {
            Ok(())
        } else {
            Err(ImageError::WrongSpace {
                expected,
                got: self.space,
            })
        }
    }
}

/// Reads an 8-bit RGB PNG into `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ImageError::NotFound(shown.clone()),
        _ => ImageError::Io {
            path: shown.clone(),
            source: e,
        },
    })?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| ImageError::Corrupt {
        path: shown.clone(),
        reason: e.to_string(),
    })?;
    let info = reader.info();
    let (color, depth) = (info.color_type, info.bit_depth);
    if color != png::ColorType::Rgb || depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedFormat {
            path: shown,
            reason: format!("{color:?} at {depth:?} bits; only 8-bit RGB is accepted"),
        });
    }
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| ImageError::Corrupt {
        path: shown.clone(),
        reason: e.to_string(),
    })?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let pixels = buf[..frame.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(h, w, pixels, ColorSpace::Raw01)
}

/// Byte value for a `[0, 1]` pixel: clamp, then round half up.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn to_bytes(img: &Image) -> Vec<u8> {
    img.pixels.iter().map(|&v| quantize(v)).collect()
}

/// Writes a `[0, 1]` image as 8-bit RGB PNG.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    img.expect_space(ColorSpace::Raw01)?;
    let path = path.as_ref();
    let io_err = |e: std::io::Error| ImageError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| ImageError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&to_bytes(img)).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}

pub fn standardize(img: &Image, spec: &NormalizationSpec) -> Result<Image, ImageError> {
    img.expect_space(ColorSpace::Raw01)?;
    let mut out = img.clone();
    for px in out.pixels.chunks_exact_mut(CHANNELS) {
        for c in 0..CHANNELS {
            px[c] = (px[c] - spec.mean[c]) / spec.std[c];
        }
    }
    out.space = ColorSpace::Standardized;
    Ok(out)
}

/// Inverse of [`standardize`]; does not clamp.
pub fn destandardize(img: &Image, spec: &NormalizationSpec) -> Result<Image, ImageError> {
    img.expect_space(ColorSpace::Standardized)?;
    let mut out = img.clone();
    for px in out.pixels.chunks_exact_mut(CHANNELS) {
        for c in 0..CHANNELS {
            px[c] = px[c] * spec.std[c] + spec.mean[c];
        }
    }
    out.space = ColorSpace::Raw01;
    Ok(out)
}

/// Output size for a resize that maps the short side to `target`.
pub fn resized_dims(height: usize, width: usize, target: usize) -> (usize, usize) {
    let scale = |long: usize, short: usize| ((long as f64 * target as f64 / short as f64).round() as usize).max(1);
    if height <= width {
        (target, scale(width, height))
    } else {
        (scale(height, width), target)
    }
}

/// Source coordinate sampling for one output axis with half-pixel centers:
/// `(lower index, upper index, fraction)`.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// Bilinear resize to the given dimensions (half-pixel centers).
pub fn resize_to(img: &Image, height: usize, width: usize) -> Image {
    let ys = axis_taps(img.height, height);
    let xs = axis_taps(img.width, width);
    let mut pixels = Vec::with_capacity(height * width * CHANNELS);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let a = img.pixel(y0, x0);
            let b = img.pixel(y0, x1);
            let c = img.pixel(y1, x0);
            let d = img.pixel(y1, x1);
            for ch in 0..CHANNELS {
                let top = lerp(a[ch], b[ch], fx);
                let bottom = lerp(c[ch], d[ch], fx);
                pixels.push(lerp(top, bottom, fy));
            }
        }
    }
    Image {
        height,
        width,
        pixels,
        space: img.space,
    }
}

/// Bilinear resize mapping the short side to `target_short_side`, preserving
/// aspect ratio (long side rounded to nearest).
pub fn resize_bilinear(img: &Image, target_short_side: usize) -> Image {
    let (h, w) = resized_dims(img.height, img.width, target_short_side.max(1));
    resize_to(img, h, w)
}

/// Top-left offsets `(row, col)` of a centered square crop.
pub fn crop_offsets(height: usize, width: usize, size: usize) -> (usize, usize) {
    ((height - size) / 2, (width - size) / 2)
}

pub fn crop(img: &Image, top: usize, left: usize, height: usize, width: usize) -> Result<Image, ImageError> {
    if top + height > img.height || left + width > img.width || height == 0 || width == 0 {
        return Err(ImageError::Geometry(format!(
            "crop {height}x{width}+{top}+{left} outside {}x{} image",
            img.height, img.width
        )));
    }
    let mut pixels = Vec::with_capacity(height * width * CHANNELS);
    for y in top..top + height {
        let start = (y * img.width + left) * CHANNELS;
        pixels.extend_from_slice(&img.pixels[start..start + width * CHANNELS]);
    }
    Ok(Image {
        height,
        width,
        pixels,
        space: img.space,
    })
}

pub fn center_crop(img: &Image, size: usize) -> Result<Image, ImageError> {
    if size == 0 || img.height < size || img.width < size {
        return Err(ImageError::CropTooLarge {
            size,
            height: img.height,
            width: img.width,
        });
    }
    let (top, left) = crop_offsets(img.height, img.width, size);
    crop(img, top, left, size, size)
}

/// Resize side for a given estimator crop, keeping the 232:224 ratio.
pub fn resize_side_for_crop(crop: usize) -> usize {
    (crop as f64 * 232.0 / 224.0).round() as usize
}

/// Low-resolution copy for parameter estimation: short side to
/// `resize_side`, then a centered `crop` square.
pub fn prepare_nem_input(img: &Image, resize_side: usize, crop: usize) -> Result<Image, ImageError> {
    center_crop(&resize_bilinear(img, resize_side), crop)
}

/// Packs images of identical geometry into an NCHW tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>, ImageError> {
    let first = images.first().ok_or_else(|| ImageError::Geometry("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let hw = h * w;
    let mut data = vec![T::zero(); images.len() * CHANNELS * hw];
    for (n, img) in images.iter().enumerate() {
        if img.height != h || img.width != w {
            return Err(ImageError::Geometry(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        for (p, px) in img.pixels.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                data[(n * CHANNELS + c) * hw + p] = T::of(px[c] as f64);
            }
        }
    }
    Ok(Tensor::new(vec![images.len(), CHANNELS, h, w], data).expect("sized above"))
}

/// Splits an NCHW tensor back into images tagged with `space`.
pub fn tensor_to_images<T: Scalar>(t: &Tensor<T>, space: ColorSpace) -> Result<Vec<Image>, ImageError> {
    let (n, c, h, w) = t
        .dims4("tensor_to_images")
        .map_err(|e| ImageError::Geometry(e.to_string()))?;
    if c != CHANNELS {
        return Err(ImageError::Geometry(format!("{c} channels")));
    }
    let hw = h * w;
    Ok((0..n)
        .map(|b| {
            let mut pixels = vec![0.0f32; hw * CHANNELS];
            for ch in 0..CHANNELS {
                let plane = &t.data()[(b * CHANNELS + ch) * hw..][..hw];
                for (p, &v) in plane.iter().enumerate() {
                    pixels[p * CHANNELS + ch] = v.as_f64() as f32;
                }
            }
            Image {
                height: h,
                width: w,
                pixels,
                space,
            }
        })
        .collect())
}

/// Convolves every channel with a `k×k` kernel (row-major), replicate
/// padding, same size.
pub fn filter_replicate(img: &Image, kernel: &[f32], k: usize) -> Image {
    assert_eq!(kernel.len(), k * k, "kernel taps");
    assert!(k % 2 == 1, "kernel size must be odd");
    let (h, w) = (img.height, img.width);
    let r = k / 2;
    let row_len = (w + 2 * r) * CHANNELS;
    let mut padded = vec![0.0f32; (h + 2 * r) * row_len];
    for py in 0..h + 2 * r {
        let sy = py.saturating_sub(r).min(h - 1);
        let src = &img.pixels[sy * w * CHANNELS..(sy + 1) * w * CHANNELS];
        let dst = &mut padded[py * row_len..(py + 1) * row_len];
        dst[r * CHANNELS..(r + w) * CHANNELS].copy_from_slice(src);
        for x in 0..r {
            dst[x * CHANNELS..(x + 1) * CHANNELS].copy_from_slice(&src[..CHANNELS]);
            let right = (r + w + x) * CHANNELS;
            dst[right..right + CHANNELS].copy_from_slice(&src[(w - 1) * CHANNELS..]);
        }
    }
    let mut pixels = vec![0.0f32; h * w * CHANNELS];
    let run = w * CHANNELS;
    for (y, out_row) in pixels.chunks_exact_mut(run).enumerate() {
        for i in 0..k {
            let src = &padded[(y + i) * row_len..(y + i + 1) * row_len];
            for j in 0..k {
                let kv = kernel[i * k + j];
                if kv == 0.0 {
                    continue;
                }
                let taps = &src[j * CHANNELS..j * CHANNELS + run];
                for (o, &v) in out_row.iter_mut().zip(taps) {
                    *o += kv * v;
                }
            }
        }
    }
    Image {
        height: h,
        width: w,
        pixels,
        space: img.space,
    }
}

/// One image of a directory-per-class dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPath {
    pub class: String,
    pub label: usize,
    /// Path relative to the dataset root.
    pub relative: std::path::PathBuf,
}

/// Lists `root/<class>/*.png`, classes and files in lexicographic order;
/// labels are class indices in that order.
pub fn list_labeled_images(root: impl AsRef<Path>) -> Result<(Vec<String>, Vec<LabeledPath>), ImageError> {
    let root = root.as_ref();
    let io = |e: std::io::Error| ImageError::Io {
        path: root.display().to_string(),
        source: e,
    };
    if !root.is_dir() {
        return Err(ImageError::NotFound(root.display().to_string()));
    }
    let mut classes: Vec<String> = std::fs::read_dir(root)
        .map_err(io)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    classes.sort();
    let mut items = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let mut files: Vec<String> = std::fs::read_dir(root.join(class))
            .map_err(io)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
            .collect();
        files.sort();
        items.extend(files.into_iter().map(|f| LabeledPath {
            class: class.clone(),
            label,
            relative: Path::new(class).join(f),
        }));
    }
    Ok((classes, items))
}
