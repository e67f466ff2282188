//! Loading indexed samples into model inputs.
//!
//! Embedding files (`*.emb.f32`) hold little-endian `f32` values with no
//! header; a JSON sidecar with the same stem and a `.json` extension records
//! the sentence id and the dimension.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetIndex, MiscLabel};
use crate::encoders::ModalityInput;
use crate::error::{Error, Result};
use crate::modality::ModalityId;
use crate::signal::read_feat_csv;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub sentence_id: String,
    pub dim: usize,
    pub dtype: String,
    pub byte_order: String,
}

/// `foo.emb.f32` -> `foo.emb.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_embedding(path: &Path, sentence_id: &str, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = EmbeddingSidecar {
        sentence_id: sentence_id.to_string(),
        dim: values.len(),
        dtype: "f32".into(),
        byte_order: "little".into(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string(&sidecar)? + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_embedding(path: &Path) -> Result<(EmbeddingSidecar, Vec<f64>)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: EmbeddingSidecar = serde_json::from_str(&text)?;
    if sidecar.dtype != "f32" || sidecar.byte_order != "little" {
        return Err(Error::format(side.display(), "only little-endian f32 embeddings are supported"));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != sidecar.dim * 4 {
        return Err(Error::format(
            path.display(),
            format!("{} bytes for declared dimension {}", bytes.len(), sidecar.dim),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((sidecar, values))
}

/// Per-modality inputs of one sample, `None` where unavailable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleInputs {
    slots: [Option<ModalityInput>; 6],
}

impl SampleInputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, m: ModalityId) -> Option<&ModalityInput> {
        self.slots[m.index()].as_ref()
    }

    pub fn set(&mut self, m: ModalityId, input: ModalityInput) {
        self.slots[m.index()] = Some(input);
    }

    pub fn remove(&mut self, m: ModalityId) -> Option<ModalityInput> {
        self.slots[m.index()].take()
    }

    pub fn available(&self, m: ModalityId) -> bool {
        self.slots[m.index()].is_some()
    }

    pub fn modalities(&self) -> Vec<ModalityId> {
        ModalityId::ALL.into_iter().filter(|&m| self.available(m)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub session: String,
    pub label: MiscLabel,
    pub inputs: SampleInputs,
}

fn mean_of(vectors: Vec<Vec<f64>>, path: &Path) -> Result<Vec<f64>> {
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::format(path.display(), "context embeddings differ in dimension"));
    }
    let n = vectors.len() as f64;
    let mut out = vec![0.0; dim];
    for v in &vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

fn load_modality(base: &Path, m: ModalityId, files: &[String]) -> Result<ModalityInput> {
    let first = files.first().ok_or(Error::Empty("feature file list"))?;
    if m.is_sequence() {
        let matrix = read_feat_csv(&base.join(first))?;
        return Ok(ModalityInput::Sequence(matrix.values));
    }
    let vectors = files
        .iter()
        .map(|f| read_embedding(&base.join(f)).map(|(_, v)| v))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModalityInput::Vector(mean_of(vectors, &base.join(first))?))
}

/// Loads every index entry, keeping only `modalities`. Context modalities
/// with several files are averaged. Entries come back in index order.
pub fn load_samples(index: &DatasetIndex, base: &Path, modalities: &[ModalityId]) -> Result<Vec<Sample>> {
    index
        .entries
        .par_iter()
        .map(|(id, entry)| {
            let mut inputs = SampleInputs::new();
            for &m in modalities {
                if !entry.available(m) {
                    continue;
                }
                let files = entry.features.get(&m).map(Vec::as_slice).unwrap_or_default();
                inputs.set(m, load_modality(base, m, files)?);
            }
            Ok(Sample {
                id: id.clone(),
                session: entry.session.clone(),
                label: entry.label,
                inputs,
            })
        })
        .collect()
}

/// Loads the index at `path`, resolving feature files relative to its
/// directory.
pub fn load_dataset(path: &Path, modalities: &[ModalityId]) -> Result<Vec<Sample>> {
    let index = DatasetIndex::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_samples(&index, base, modalities)
}
