//! Model checkpoints: a little-endian binary parameter file with an optional
//! optimizer section, plus a JSON sidecar describing the architecture.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneKind;
use crate::classifier::ClassifierModel;
use crate::error::{Error, IoContext, Result};
use crate::nn::Adam;
use crate::saliency::{DecoderConfig, SaliencyModel};

const MAGIC: &[u8; 8] = b"SCWSOD01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Classifier,
    Saliency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: ModelRole,
    pub backbone: BackboneKind,
    #[serde(default)]
    pub num_categories: Option<usize>,
    #[serde(default)]
    pub mid_channels: Option<usize>,
    pub input_size: usize,
    /// Completed training epochs.
    pub epoch: usize,
    pub seed: u64,
    pub num_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
    pub adam: Option<Adam>,
}

/// `foo.ckpt` → `foo.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.at) / 8 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.params.len() * if self.adam.is_some() { 3 } else { 1 });
        out.extend_from_slice(MAGIC);
        put_f64s(&mut out, &self.params);
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for x in [a.lr, a.beta1, a.beta2, a.eps] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                put_f64s(&mut out, &a.m);
                put_f64s(&mut out, &a.v);
            }
        }
        out
    }

    fn decode(bytes: &[u8], meta: CheckpointMeta) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let params = r.f64s()?;
        if params.len() != meta.num_params {
            return Err(Error::Checkpoint(format!(
                "sidecar says {} params, file has {}",
                meta.num_params,
                params.len()
            )));
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let m = r.f64s()?;
                let v = r.f64s()?;
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(Error::Checkpoint("optimizer state length mismatch".into()));
                }
                Some(Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step,
                    m,
                    v,
                })
            }
            _ => return Err(Error::Checkpoint("bad optimizer flag".into())),
        };
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
        }
        Ok(Self { meta, params, adam })
    }

    /// Writes `path` and its JSON sidecar; returns the file's SHA-256.
    pub fn save(&self, path: &Path) -> Result<String> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        let bytes = self.encode();
        fs::write(path, &bytes).at(path)?;
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&self.meta).at(&side)? + "\n").at(&side)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&side).at(&side)?).at(&side)?;
        Self::decode(&fs::read(path).at(path)?, meta)
    }

    pub fn from_classifier(model: &ClassifierModel, input_size: usize, epoch: usize, seed: u64) -> Self {
        Self {
            meta: CheckpointMeta {
                role: ModelRole::Classifier,
                backbone: model.backbone.kind,
                num_categories: Some(model.num_categories),
                mid_channels: None,
                input_size,
                epoch,
                seed,
                num_params: model.num_params(),
            },
            params: model.params.clone(),
            adam: None,
        }
    }

    pub fn from_saliency(
        model: &SaliencyModel,
        adam: Option<&Adam>,
        input_size: usize,
        epoch: usize,
        seed: u64,
    ) -> Self {
        Self {
            meta: CheckpointMeta {
                role: ModelRole::Saliency,
                backbone: model.backbone.kind,
                num_categories: None,
                mid_channels: Some(model.decoder.cfg.mid_channels),
                input_size,
                epoch,
                seed,
                num_params: model.num_params(),
            },
            params: model.params.clone(),
            adam: adam.cloned(),
        }
    }

    fn expect_role(&self, role: ModelRole) -> Result<()> {
        if self.meta.role == role {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a {role:?} checkpoint, found {:?}",
                self.meta.role
            )))
        }
    }

    pub fn classifier(&self) -> Result<ClassifierModel> {
        self.expect_role(ModelRole::Classifier)?;
        let k = self
            .meta
            .num_categories
            .ok_or_else(|| Error::Checkpoint("classifier checkpoint without num_categories".into()))?;
        let mut model = ClassifierModel::layout(self.meta.backbone, k);
        if model.num_params() != self.params.len() {
            return Err(Error::Checkpoint("parameter count does not match architecture".into()));
        }
        model.params.copy_from_slice(&self.params);
        Ok(model)
    }

    pub fn saliency(&self) -> Result<SaliencyModel> {
        self.expect_role(ModelRole::Saliency)?;
        let cfg = DecoderConfig {
            mid_channels: self.meta.mid_channels.unwrap_or(DecoderConfig::default().mid_channels),
        };
        let mut model = SaliencyModel::layout(self.meta.backbone, cfg)?;
        if model.num_params() != self.params.len() {
            return Err(Error::Checkpoint("parameter count does not match architecture".into()));
        }
        model.params.copy_from_slice(&self.params);
        Ok(model)
    }
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).at(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = ClassifierModel::new(BackboneKind::Tiny, 3, 5);
        let ck = Checkpoint::from_classifier(&model, 64, 2, 5);
        let path = dir.path().join("cls.ckpt");
        let h = ck.save(&path).unwrap();
        assert_eq!(h, file_hash(&path).unwrap());
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.classifier().unwrap().params, model.params);
        assert!(back.saliency().is_err());
    }

    #[test]
    fn saliency_round_trip_with_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DecoderConfig { mid_channels: 4 };
        let model = SaliencyModel::new(BackboneKind::Tiny, cfg, 1).unwrap();
        let mut adam = Adam::new(1e-3, model.num_params());
        adam.step = 7;
        adam.m[3] = 0.25;
        let ck = Checkpoint::from_saliency(&model, Some(&adam), 64, 1, 1);
        let path = dir.path().join("sal.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.adam.as_ref(), Some(&adam));
        assert_eq!(back.saliency().unwrap().params, model.params);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = ClassifierModel::new(BackboneKind::Tiny, 2, 0);
        let path = dir.path().join("c.ckpt");
        Checkpoint::from_classifier(&model, 64, 0, 0).save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
