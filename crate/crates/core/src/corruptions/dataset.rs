use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{apply, CorruptionError, CorruptionKind, Draws};
use crate::imaging::{list_labeled_images, load_image, save_image, ImageError};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const MANIFEST_FORMAT: &str = "sympie-corruption-manifest";
const MANIFEST_VERSION: u32 = 1;

/// First line of a manifest.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    /// Clean dataset root the `source` paths are relative to.
    pub source_root: String,
    pub seed: u64,
    pub classes: Vec<String>,
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
}

/// One corrupted output image.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRecord {
    /// Output path relative to the manifest directory.
    pub path: String,
    pub source: String,
    pub class: String,
    pub label: usize,
    pub kind: CorruptionKind,
    pub severity: u8,
    pub draws: Draws,
    /// Seed of the RNG stream that produced this output.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// The clean dataset this manifest was generated from, given the
    /// directory holding the manifest.
    pub fn source_dir(&self, manifest_dir: impl AsRef<Path>) -> PathBuf {
        manifest_dir.as_ref().join(&self.header.source_root)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CorruptionError> {
        let path = path.as_ref();
        let mut out = String::new();
        push_line(&mut out, &self.header)?;
        for r in &self.records {
            push_line(&mut out, r)?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))?;
        Ok(())
    }
}

fn push_line(out: &mut String, row: &impl serde::Serialize) -> Result<(), CorruptionError> {
    let line = serde_json::to_string(row).map_err(|e| CorruptionError::Manifest(e.to_string()))?;
    out.push_str(&line);
    out.push('\n');
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> CorruptionError {
    CorruptionError::Image(ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, CorruptionError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CorruptionError::Image(ImageError::NotFound(path.display().to_string())),
        _ => io_err(path, e),
    })?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| CorruptionError::Manifest("empty manifest".into()))?
        .map_err(|e| io_err(path, e))?;
    let header: ManifestHeader =
        serde_json::from_str(&first).map_err(|e| CorruptionError::Manifest(format!("header: {e}")))?;
    if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
        return Err(CorruptionError::Manifest(format!(
            "unsupported manifest {} v{}",
            header.format, header.version
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| CorruptionError::Manifest(format!("row {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok(Manifest { header, records })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for one (image, kind, severity) cell.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

fn path_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Corrupts every image of a directory-per-class dataset for each
/// kind × severity, mirroring the layout under `out_dir/<kind>/<severity>/`,
/// and writes `out_dir/manifest.jsonl`.
pub fn corrupt_dataset(
    in_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    kinds: &[CorruptionKind],
    severities: &[u8],
    seed: u64,
) -> Result<Manifest, CorruptionError> {
    let (in_dir, out_dir) = (in_dir.as_ref(), out_dir.as_ref());
    let (classes, items) = list_labeled_images(in_dir)?;
    if items.is_empty() {
        return Err(CorruptionError::EmptyDataset(in_dir.display().to_string()));
    }
    if let Some(&bad) = severities.iter().find(|s| !super::SEVERITIES.contains(s)) {
        return Err(CorruptionError::InvalidSeverity(bad));
    }
    let per_image: Vec<Vec<ManifestRecord>> = items
        .par_iter()
        .enumerate()
        .map(|(index, item)| -> Result<Vec<ManifestRecord>, CorruptionError> {
            let clean = load_image(in_dir.join(&item.relative))?;
            let mut rows = Vec::with_capacity(kinds.len() * severities.len());
            for &kind in kinds {
                for &severity in severities {
                    let cell_seed = derive_seed(seed, &[index as u64, kind as u64, severity as u64]);
                    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
                    let (img, spec) = apply(&clean, kind, severity, &mut rng)?;
                    let rel: PathBuf = Path::new(kind.name()).join(severity.to_string()).join(&item.relative);
                    let dest = out_dir.join(&rel);
                    if let Some(parent) = dest.parent() {
                        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
                    }
                    save_image(&img, &dest)?;
                    rows.push(ManifestRecord {
                        path: path_string(&rel),
                        source: path_string(&item.relative),
                        class: item.class.clone(),
                        label: item.label,
                        kind,
                        severity,
                        draws: spec.draws,
                        seed: cell_seed,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_, _>>()?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let manifest = Manifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            source_root: path_string(&relative_root(in_dir, out_dir)),
            seed,
            classes,
            kinds: kinds.to_vec(),
            severities: severities.to_vec(),
        },
        records: per_image.into_iter().flatten().collect(),
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// `source` as seen from `base`, so manifests survive moving both trees
/// together. Falls back to the absolute path across filesystem roots.
fn relative_root(source: &Path, base: &Path) -> PathBuf {
    let (Ok(src), Ok(base)) = (source.canonicalize(), base.canonicalize()) else {
        return source.to_path_buf();
    };
    let (a, b): (Vec<_>, Vec<_>) = (src.components().collect(), base.components().collect());
    let common = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return src;
    }
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    rel.extend(&a[common..]);
    if rel.as_os_str().is_empty() {
        rel.push(".");
    }
    rel
}
