//! Ten-class shape × color dataset. Objects are drawn on neutral gray
//! backgrounds, so any color cast moves the whole image off the clean
//! distribution and can flip the color half of the label.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{save_image, ColorSpace, Image, ImageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
}

const COLORS: [(&str, [f32; 3]); 5] = [
    ("blue", [0.2, 0.3, 0.8]),
    ("green", [0.2, 0.7, 0.25]),
    ("magenta", [0.75, 0.25, 0.7]),
    ("red", [0.8, 0.2, 0.2]),
    ("yellow", [0.8, 0.75, 0.2]),
];

pub const NUM_CLASSES: usize = 10;

/// Class names in label order (lexicographic, matching directory listing).
pub fn class_names() -> Vec<String> {
    let mut names: Vec<String> = ["circle", "square"]
        .iter()
        .flat_map(|s| COLORS.iter().map(move |(c, _)| format!("{s}_{c}")))
        .collect();
    names.sort();
    names
}

fn class_parts(label: usize) -> (Shape, [f32; 3]) {
    let shape = if label < COLORS.len() { Shape::Circle } else { Shape::Square };
    (shape, COLORS[label % COLORS.len()].1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub label: usize,
}

/// Renders one sample of `label`.
pub fn render_sample<R: Rng>(label: usize, size: usize, rng: &mut R) -> Image {
    let (shape, base) = class_parts(label);
    let s = size as f32;
    let gray = rng.gen_range(0.3f32..0.7);
    let (gy, gx) = (rng.gen_range(-0.1f32..0.1), rng.gen_range(-0.1f32..0.1));
    let brightness = rng.gen_range(0.85f32..1.1);
    let color: Vec<f32> = base
        .iter()
        .map(|&c| ((c + rng.gen_range(-0.06f32..0.06)) * brightness).clamp(0.0, 1.0))
        .collect();
    let half = rng.gen_range(0.2f32..0.3) * s;
    let margin = half + 1.0;
    let cy = rng.gen_range(margin..s - margin);
    let cx = rng.gen_range(margin..s - margin);
    let noise: Vec<f32> = (0..size * size).map(|_| rng.gen_range(-0.02f32..0.02)).collect();
    Image::from_fn(size, size, ColorSpace::Raw01, |y, x| {
        // 2×2 supersampled coverage for soft edges
        let mut cover = 0.0;
        for sy in [0.25f32, 0.75] {
            for sx in [0.25f32, 0.75] {
                let (dy, dx) = (y as f32 + sy - cy, x as f32 + sx - cx);
                let inside = match shape {
                    Shape::Circle => dy * dy + dx * dx <= half * half,
                    Shape::Square => dy.abs() <= half * 0.85 && dx.abs() <= half * 0.85,
                };
                if inside {
                    cover += 0.25;
                }
            }
        }
        let bg = gray + gy * (y as f32 / s - 0.5) + gx * (x as f32 / s - 0.5) + noise[y * size + x];
        let mut px = [0.0; 3];
        for c in 0..3 {
            px[c] = (cover * color[c] + (1.0 - cover) * bg).clamp(0.0, 1.0);
        }
        px
    })
}

/// `n_per_class` samples of every class, interleaved by class.
pub fn make_synthetic_dataset(n_per_class: usize, image_size: usize, seed: u64) -> Vec<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_class * NUM_CLASSES);
    for _ in 0..n_per_class {
        for label in 0..NUM_CLASSES {
            out.push(LabeledSample {
                image: render_sample(label, image_size, &mut rng),
                label,
            });
        }
    }
    out
}

/// Writes `root/<class>/<index>.png`.
pub fn save_dataset(samples: &[LabeledSample], root: impl AsRef<Path>) -> Result<(), ImageError> {
    let root = root.as_ref();
    let names = class_names();
    for (i, s) in samples.iter().enumerate() {
        let dir = root.join(&names[s.label]);
        std::fs::create_dir_all(&dir).map_err(|e| ImageError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        save_image(&s.image, dir.join(format!("{i:05}.png")))?;
    }
    Ok(())
}

/// Reads a directory-per-class dataset.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<(Vec<String>, Vec<LabeledSample>), ImageError> {
    let root = root.as_ref();
    let (classes, items) = crate::imaging::list_labeled_images(root)?;
    let samples = items
        .iter()
        .map(|it| {
            Ok(LabeledSample {
                image: crate::imaging::load_image(root.join(&it.relative))?,
                label: it.label,
            })
        })
        .collect::<Result<_, ImageError>>()?;
    Ok((classes, samples))
}
