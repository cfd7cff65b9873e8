//! The pseudo-label store: immutable stage-1 labels Y₁ plus the evolving
//! blended labels, persisted as PNG directories and a JSON descriptor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{load_gray_map, save_gray_map};
use crate::error::{Error, IoContext, Result};
use crate::refinement::{AffinityConfig, SkippedImage, DEFAULT_THRESHOLD};
use crate::tensor::SaliencyMap;

/// Provenance recorded in `store.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub threshold: f64,
    pub scales: Vec<f64>,
    pub affinity: AffinityConfig,
    pub checkpoint_hash: String,
    pub crf: Option<String>,
    pub crf_applied: usize,
    pub pipeline: String,
    pub skipped: Vec<SkippedImage>,
    pub ids: Vec<String>,
    pub original_hash: String,
    pub epoch_tag: usize,
}

impl Default for StoreMeta {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            scales: Vec::new(),
            affinity: AffinityConfig::default(),
            checkpoint_hash: String::new(),
            crf: None,
            crf_applied: 0,
            pipeline: String::new(),
            skipped: Vec::new(),
            ids: Vec::new(),
            original_hash: String::new(),
            epoch_tag: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelStore {
    ids: Vec<String>,
    original: Vec<SaliencyMap>,
    current: Vec<SaliencyMap>,
    pub epoch_tag: usize,
    pub meta: StoreMeta,
}

fn check_unit(map: &SaliencyMap, id: &str) -> Result<()> {
    if map.values.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("label {id} has values outside [0,1]")))
    }
}

impl PseudoLabelStore {
    pub fn new(ids: Vec<String>, original: Vec<SaliencyMap>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::NoLabels);
        }
        if ids.len() != original.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", ids.len()),
                actual: format!("{} labels", original.len()),
            });
        }
        for (id, m) in ids.iter().zip(&original) {
            check_unit(m, id)?;
        }
        Ok(Self {
            current: original.clone(),
            ids,
            original,
            epoch_tag: 0,
            meta: StoreMeta::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    /// Y₁ for entry `i`; never changes after construction.
    pub fn original(&self, i: usize) -> &SaliencyMap {
        &self.original[i]
    }

    pub fn current(&self, i: usize) -> &SaliencyMap {
        &self.current[i]
    }

    pub fn set_current(&mut self, i: usize, map: SaliencyMap) -> Result<()> {
        let o = &self.original[i];
        map.same_shape(o.height, o.width)?;
        check_unit(&map, &self.ids[i])?;
        self.current[i] = map;
        Ok(())
    }

    fn hash_maps(maps: &[SaliencyMap], ids: &[String]) -> String {
        let mut h = Sha256::new();
        for (id, m) in ids.iter().zip(maps) {
            h.update(id.as_bytes());
            h.update((m.height as u64).to_le_bytes());
            h.update((m.width as u64).to_le_bytes());
            for v in &m.values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn original_hash(&self) -> String {
        Self::hash_maps(&self.original, &self.ids)
    }

    pub fn current_hash(&self) -> String {
        Self::hash_maps(&self.current, &self.ids)
    }

    /// Writes `Y1/<id>.png`, the exact current labels and `store.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let y1 = dir.join("Y1");
        fs::create_dir_all(&y1).at(&y1)?;
        for (id, m) in self.ids.iter().zip(&self.original) {
            save_gray_map(&y1.join(format!("{id}.png")), m)?;
        }
        self.save_state(dir)
    }

    /// Exact little-endian encoding of the current labels.
    pub fn encode_current(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for m in &self.current {
            bytes.extend_from_slice(&(m.height as u64).to_le_bytes());
            bytes.extend_from_slice(&(m.width as u64).to_le_bytes());
            for v in &m.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    /// Inverse of [`PseudoLabelStore::encode_current`].
    pub fn restore_current(&mut self, bytes: &[u8]) -> Result<()> {
        let mut at = 0;
        let read_u64 = |at: &mut usize| -> Result<u64> {
            let b = bytes
                .get(*at..*at + 8)
                .ok_or_else(|| Error::Checkpoint("truncated label state".into()))?;
            *at += 8;
            Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
        };
        let mut maps = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let h = read_u64(&mut at)? as usize;
            let w = read_u64(&mut at)? as usize;
            let o = &self.original[i];
            if (h, w) != (o.height, o.width) {
                return Err(Error::Checkpoint(format!(
                    "label state for {} has the wrong shape",
                    self.ids[i]
                )));
            }
            let mut values = Vec::with_capacity(h * w);
            for _ in 0..h * w {
                values.push(f64::from_bits(read_u64(&mut at)?));
            }
            let m = SaliencyMap::new(h, w, values)?;
            check_unit(&m, &self.ids[i])?;
            maps.push(m);
        }
        if at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes in label state".into()));
        }
        self.current = maps;
        Ok(())
    }

    /// Rewrites only the mutable part (current labels and descriptor).
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let cur = dir.join("current.bin");
        fs::write(&cur, self.encode_current()).at(&cur)?;
        let mut meta = self.meta.clone();
        meta.ids = self.ids.clone();
        meta.original_hash = self.original_hash();
        meta.epoch_tag = self.epoch_tag;
        let p = dir.join("store.json");
        fs::write(&p, serde_json::to_string_pretty(&meta).at(&p)?).at(&p)
    }

    /// Writes the current labels as 8-bit PNGs under `Y_epoch<n>/`.
    pub fn save_snapshot(&self, dir: &Path, epoch: usize) -> Result<()> {
        let d = dir.join(format!("Y_epoch{epoch}"));
        fs::create_dir_all(&d).at(&d)?;
        for (id, m) in self.ids.iter().zip(&self.current) {
            save_gray_map(&d.join(format!("{id}.png")), m)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("store.json");
        let meta: StoreMeta = serde_json::from_str(&fs::read_to_string(&p).at(&p)?).at(&p)?;
        let mut original = Vec::with_capacity(meta.ids.len());
        for id in &meta.ids {
            original.push(load_gray_map(&dir.join("Y1").join(format!("{id}.png")))?);
        }
        let mut store = Self::new(meta.ids.clone(), original)?;
        if store.original_hash() != meta.original_hash {
            return Err(Error::Checkpoint("Y1 labels do not match store.json hash".into()));
        }
        let cur = dir.join("current.bin");
        if cur.exists() {
            store.restore_current(&fs::read(&cur).at(&cur)?)?;
        }
        store.epoch_tag = meta.epoch_tag;
        store.meta = meta;
        Ok(store)
    }
}
