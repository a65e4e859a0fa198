//! Named-tensor checkpoints.
//!
//! On disk a checkpoint is a JSON manifest (architecture, tensor names,
//! shapes, byte offsets, training metadata, blob digest) next to a `.bin`
//! blob of little-endian `f32` values concatenated in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::{ArchConfig, Model};
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const FORMAT: &str = "nodule-cascade-checkpoint/1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub seed: u64,
    /// Free-form notes, e.g. the split fingerprint.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: ArchConfig,
    pub tensors: Vec<NamedTensor>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format: String,
    arch: ArchConfig,
    blob: String,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
    training_meta: TrainingMeta,
}

impl ModelCheckpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, meta: TrainingMeta) -> Self {
        let tensors = model
            .net
            .graph
            .params
            .iter()
            .zip(&model.net.params)
            .map(|(info, values)| NamedTensor {
                name: info.name.clone(),
                shape: info.shape.clone(),
                values: values.iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        ModelCheckpoint {
            arch: model.config,
            tensors,
            meta,
        }
    }

    pub fn count_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuild a model of the recorded architecture with these weights.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::new(self.arch, 0)?;
        transfer_weights(self, &mut model)?;
        Ok(model)
    }

    fn blob(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.values.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Hex SHA-256 of the tensor blob.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.blob()))
    }
}

/// Copy every tensor of `model` from the checkpoint by name.
pub fn transfer_weights<T: Scalar>(ckpt: &ModelCheckpoint, model: &mut Model<T>) -> Result<()> {
    let mut staged = Vec::with_capacity(model.net.params.len());
    for info in &model.net.graph.params {
        let t = ckpt
            .tensor(&info.name)
            .ok_or_else(|| Error::MissingTensor(info.name.clone()))?;
        if t.shape != info.shape || t.values.len() != info.numel() {
            return Err(Error::TensorShape {
                name: info.name.clone(),
                expected: info.shape.clone(),
                actual: t.shape.clone(),
            });
        }
        staged.push(t.values.iter().map(|&v| T::from_f64(f64::from(v))).collect());
    }
    model.net.params = staged;
    Ok(())
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let blob = ckpt.blob();
    let bp = blob_path(path);
    let mut offset = 0;
    let tensors = ckpt
        .tensors
        .iter()
        .map(|t| {
            let nbytes = t.values.len() * 4;
            let e = TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                nbytes,
            };
            offset += nbytes;
            e
        })
        .collect();
    let manifest = ManifestFile {
        format: FORMAT.into(),
        arch: ckpt.arch,
        blob: bp
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad checkpoint path {}", path.display())))?
            .to_string(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
        training_meta: ckpt.meta.clone(),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: ManifestFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", manifest.format)));
    }
    let bp = path.parent().unwrap_or_else(|| Path::new(".")).join(&manifest.blob);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let actual = hex::encode(Sha256::digest(&blob));
    if actual != manifest.blob_sha256 {
        return Err(Error::DigestMismatch {
            expected: manifest.blob_sha256,
            actual,
        });
    }
    let tensors = manifest
        .tensors
        .into_iter()
        .map(|e| {
            let numel: usize = e.shape.iter().product();
            if e.nbytes != numel * 4 || e.offset + e.nbytes > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` spans bytes {}..{} of a {}-byte blob with shape {:?}",
                    e.name,
                    e.offset,
                    e.offset + e.nbytes,
                    blob.len(),
                    e.shape
                )));
            }
            let values = blob[e.offset..e.offset + e.nbytes]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(NamedTensor {
                name: e.name,
                shape: e.shape,
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ckpt = ModelCheckpoint {
        arch: manifest.arch,
        tensors,
        meta: manifest.training_meta,
    };
    // Reject checkpoints whose tensors do not fit the declared architecture.
    let graph = ckpt.arch.build_graph()?;
    for info in &graph.params {
        let t = ckpt
            .tensor(&info.name)
            .ok_or_else(|| Error::MissingTensor(info.name.clone()))?;
        if t.shape != info.shape {
            return Err(Error::TensorShape {
                name: info.name.clone(),
                expected: info.shape.clone(),
                actual: t.shape.clone(),
            });
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::ArchId;
    use crate::nn::model::Mode;
    use crate::nn::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn small_cls() -> Model<f32> {
        Model::new(ArchConfig::new(ArchId::Classifier, 16, 16), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_cls();
        let meta = TrainingMeta {
            epochs: 2,
            final_train_loss: Some(0.25),
            seed: 9,
            ..Default::default()
        };
        let ck = ModelCheckpoint::from_model(&m, meta);
        let p = dir.path().join("m.json");
        save_checkpoint(&ck, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        let m2: Model<f32> = back.to_model().unwrap();
        assert_eq!(m2, m);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let x: Vec<f32> = (0..2 * 16 * 16).map(|_| rng.gen()).collect();
            let t = Tensor::from_nchw(1, 2, 16, 16, &x).unwrap();
            assert_eq!(m.forward(&t, Mode::Inference).unwrap(), m2.forward(&t, Mode::Inference).unwrap());
        }
    }

    #[test]
    fn truncated_blob_fails_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&ModelCheckpoint::from_model(&small_cls(), Default::default()), &p).unwrap();
        let bp = p.with_extension("bin");
        let mut blob = fs::read(&bp).unwrap();
        blob.truncate(blob.len() - 4);
        fs::write(&bp, blob).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::DigestMismatch { .. })));
    }

    #[test]
    fn unknown_arch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&ModelCheckpoint::from_model(&small_cls(), Default::default()), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap().replace("encoder-cls", "resnet50");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn transfer_reports_missing_and_misshapen_tensors() {
        let m = small_cls();
        let mut ck = ModelCheckpoint::from_model(&m, Default::default());
        ck.tensors.retain(|t| t.name != "fc2.bias");
        let mut target = small_cls();
        match transfer_weights(&ck, &mut target) {
            Err(Error::MissingTensor(n)) => assert_eq!(n, "fc2.bias"),
            other => panic!("{other:?}"),
        }
        let mut ck = ModelCheckpoint::from_model(&m, Default::default());
        ck.tensors[0].shape = vec![1, 2, 3];
        let e = transfer_weights(&ck, &mut target).unwrap_err().to_string();
        assert!(e.contains("enc1.weight"), "{e}");
        // failed transfers leave the target untouched
        assert_eq!(target, small_cls());
    }
}
