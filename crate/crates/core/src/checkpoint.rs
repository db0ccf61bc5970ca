//! Binary checkpoint container: magic, version, a JSON header, then named
//! little-endian f32 blobs. Writes go to a temporary file renamed into place.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::imaging::NormalizationSpec;
use crate::nem::{nem_init, EnhancerState, NemConfig};
use crate::tensor::{ModelState, Tensor};
use crate::training::{classifier_init, Classifier, ClassifierConfig};
use crate::Scalar;

const MAGIC: &[u8; 8] = b"SYMPIECK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} is not a checkpoint")]
    Magic(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint has no blob `{0}`")]
    Missing(String),
    #[error("blob `{name}` has shape {got:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected a `{expected}` checkpoint, found `{got}`")]
    Kind { expected: String, got: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub blobs: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            header: serde_json::json!({ "kind": kind }),
            blobs: IndexMap::new(),
        }
    }

    pub fn kind(&self) -> &str {
        self.header.get("kind").and_then(|k| k.as_str()).unwrap_or("")
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind() != kind {
            return Err(CheckpointError::Kind {
                expected: kind.into(),
                got: self.kind().into(),
            });
        }
        Ok(())
    }

    pub fn set<V: serde::Serialize>(&mut self, key: &str, value: &V) -> Result<(), CheckpointError> {
        let v = serde_json::to_value(value).map_err(|e| CheckpointError::Format(e.to_string()))?;
        self.header
            .as_object_mut()
            .expect("header is an object")
            .insert(key.into(), v);
        Ok(())
    }

    pub fn get<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V, CheckpointError> {
        let v = self
            .header
            .get(key)
            .ok_or_else(|| CheckpointError::Format(format!("header lacks `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Format(format!("`{key}`: {e}")))
    }

    pub fn insert_model<T: Scalar>(&mut self, prefix: &str, model: &ModelState<T>) {
        for (name, p) in model.iter() {
            self.blobs.insert(format!("{prefix}/{name}"), p.value.cast());
        }
    }

    /// Overwrites every tensor of `model` with the stored blob of the same name.
    pub fn restore_model<T: Scalar>(&self, prefix: &str, model: &mut ModelState<T>) -> Result<(), CheckpointError> {
        for (name, p) in model.iter_mut() {
            let key = format!("{prefix}/{name}");
            let blob = self.blobs.get(&key).ok_or_else(|| CheckpointError::Missing(key.clone()))?;
            if blob.shape() != p.value.shape() {
                return Err(CheckpointError::Shape {
                    name: key,
                    expected: p.value.shape().to_vec(),
                    got: blob.shape().to_vec(),
                });
            }
            p.value = blob.cast();
            p.grad = None;
        }
        Ok(())
    }

    pub fn insert_vectors<T: Scalar>(&mut self, prefix: &str, vectors: &IndexMap<String, Vec<T>>) {
        for (name, v) in vectors {
            let t = Tensor::new(vec![v.len()], v.iter().map(|x| x.as_f64() as f32).collect()).expect("1-D");
            self.blobs.insert(format!("{prefix}/{name}"), t);
        }
    }

    /// Fills every entry of `vectors` from blobs of matching length.
    pub fn restore_vectors<T: Scalar>(
        &self,
        prefix: &str,
        vectors: &mut IndexMap<String, Vec<T>>,
    ) -> Result<(), CheckpointError> {
        for (name, v) in vectors.iter_mut() {
            let key = format!("{prefix}/{name}");
            let blob = self.blobs.get(&key).ok_or_else(|| CheckpointError::Missing(key.clone()))?;
            if blob.len() != v.len() {
                return Err(CheckpointError::Shape {
                    name: key,
                    expected: vec![v.len()],
                    got: blob.shape().to_vec(),
                });
            }
            for (d, &s) in v.iter_mut().zip(blob.data()) {
                *d = T::of(s as f64);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("json header");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, t) in &self.blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::Magic(origin.into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = r.u32()? as usize;
        let header: serde_json::Value =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
        if !header.is_object() {
            return Err(CheckpointError::Format("header is not an object".into()));
        }
        let count = r.u32()?;
        let mut blobs = IndexMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| CheckpointError::Format("blob name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| CheckpointError::Format("blob too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            blobs.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Self { header, blobs })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `path.tmp`, syncs it, then renames it over `path`.
pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}

pub const ENHANCER_KIND: &str = "enhancer";
pub const CLASSIFIER_KIND: &str = "classifier";

pub fn enhancer_checkpoint<T: Scalar>(state: &EnhancerState<T>) -> Result<Checkpoint, CheckpointError> {
    let mut c = Checkpoint::new(ENHANCER_KIND);
    write_enhancer_fields(&mut c, state)?;
    c.insert_model("nem", &state.nem);
    Ok(c)
}

pub(crate) fn write_enhancer_fields<T: Scalar>(c: &mut Checkpoint, state: &EnhancerState<T>) -> Result<(), CheckpointError> {
    c.set("config", &state.config)?;
    c.set("normalization", &state.normalization)?;
    c.set("nem_input_size", &state.nem_input_size)?;
    c.set("step", &state.nem.step)
}

/// Rebuilds an enhancer from the header fields and the `prefix` blobs of
/// any checkpoint carrying them.
pub fn enhancer_from<T: Scalar>(c: &Checkpoint, prefix: &str) -> Result<EnhancerState<T>, CheckpointError> {
    let config: NemConfig = c.get("config")?;
    let normalization: NormalizationSpec = c.get("normalization")?;
    let nem_input_size: usize = c.get("nem_input_size")?;
    let mut nem = nem_init::<T>(&config, 0).map_err(|e| CheckpointError::Format(e.to_string()))?;
    c.restore_model(prefix, &mut nem)?;
    nem.step = c.get("step")?;
    Ok(EnhancerState {
        config,
        nem,
        normalization,
        nem_input_size,
    })
}

pub fn save_enhancer<T: Scalar>(path: impl AsRef<Path>, state: &EnhancerState<T>) -> Result<(), CheckpointError> {
    write_checkpoint(path, &enhancer_checkpoint(state)?)
}

/// Loads an enhancer file, or the live model of a training checkpoint.
pub fn load_enhancer<T: Scalar>(path: impl AsRef<Path>) -> Result<EnhancerState<T>, CheckpointError> {
    let c = read_checkpoint(path)?;
    match c.kind() {
        ENHANCER_KIND => enhancer_from(&c, "nem"),
        crate::training::TRAINING_KIND => enhancer_from(&c, "live"),
        other => Err(CheckpointError::Kind {
            expected: ENHANCER_KIND.into(),
            got: other.into(),
        }),
    }
}

pub fn save_classifier<T: Scalar>(path: impl AsRef<Path>, clf: &Classifier<T>) -> Result<(), CheckpointError> {
    let mut c = Checkpoint::new(CLASSIFIER_KIND);
    c.set("config", &clf.config)?;
    c.set("normalization", &clf.normalization)?;
    c.set("classes", &clf.classes)?;
    c.insert_model("model", &clf.model);
    write_checkpoint(path, &c)
}

/// Loads a classifier; the returned model is frozen.
pub fn load_classifier<T: Scalar>(path: impl AsRef<Path>) -> Result<Classifier<T>, CheckpointError> {
    let c = read_checkpoint(path)?;
    c.expect_kind(CLASSIFIER_KIND)?;
    let config: ClassifierConfig = c.get("config")?;
    let mut model = classifier_init::<T>(&config, 0).map_err(|e| CheckpointError::Format(e.to_string()))?;
    c.restore_model("model", &mut model)?;
    model.freeze();
    Ok(Classifier {
        config,
        model,
        normalization: c.get("normalization")?,
        classes: c.get("classes")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption_detection() {
        let state = EnhancerState::<f32>::new(
            NemConfig {
                widths: [4, 4, 8, 8],
                ..NemConfig::default()
            },
            3,
            32,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/enh.ckpt");
        save_enhancer(&path, &state).unwrap();
        assert!(!dir.path().join("sub/enh.ckpt.tmp").exists());
        let back: EnhancerState<f32> = load_enhancer(&path).unwrap();
        assert_eq!(back, state);

        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "x"), Err(CheckpointError::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPTxxxx", "x"), Err(CheckpointError::Magic(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2, "x"), Err(CheckpointError::Version(2))));
        assert!(matches!(load_classifier::<f32>(&path), Err(CheckpointError::Kind { .. })));
    }

    #[test]
    fn restore_checks_shapes() {
        let mut a = ModelState::<f32>::new();
        a.insert("w", Tensor::zeros(&[2, 3]), true).unwrap();
        let mut c = Checkpoint::new("test");
        c.insert_model("m", &a);
        let mut b = ModelState::<f32>::new();
        b.insert("w", Tensor::zeros(&[3, 2]), true).unwrap();
        assert!(matches!(c.restore_model("m", &mut b), Err(CheckpointError::Shape { .. })));
        let mut d = ModelState::<f32>::new();
        d.insert("v", Tensor::zeros(&[1]), true).unwrap();
        assert!(matches!(c.restore_model("m", &mut d), Err(CheckpointError::Missing(_))));
    }
}
