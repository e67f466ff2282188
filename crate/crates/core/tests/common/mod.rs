#![allow(dead_code)]

use std::path::{Path, PathBuf};

use malefic::data::{load_dataset, Sample};
use malefic::model::{MaleficModel, ModelConfig};
use malefic::pipeline::{Pipeline, PipelineConfig, Stage};
use malefic::train::{evaluate, split_by_session, train};
use malefic::ModalityId;
use tempfile::TempDir;

pub fn tiny(seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig::preset("tiny").unwrap();
    c.seed = seed;
    c.train.seed = seed;
    c
}

/// Generates the corpus, reorganizes it, and builds the index.
pub fn prepare(config: &PipelineConfig) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config.clone(), dir.path()).unwrap();
    for s in [Stage::GenCorpus, Stage::Preprocess, Stage::Features] {
        p.run_stage(s).unwrap();
    }
    let index = p.layout.index();
    (dir, index)
}

pub struct Fitted {
    pub model: MaleficModel,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Trains a model on `modalities` with the config's split and schedule.
pub fn fit(index: &Path, config: &PipelineConfig, modalities: &[ModalityId]) -> Fitted {
    let samples = load_dataset(index, modalities).unwrap();
    let (train_set, val) = split_by_session(samples, config.train.validation_fraction, config.seed);
    let shape = &config.model;
    let mut mc = ModelConfig::from_samples(&train_set, modalities, shape.face_output, shape.body_output).unwrap();
    mc.fusion_dim = shape.fusion_dim;
    mc.attention_dim = shape.attention_dim;
    mc.encoder_dropout = shape.encoder_dropout;
    let mut model = MaleficModel::new(mc, config.seed).unwrap();
    let mut tc = config.train.clone();
    tc.modalities = Some(modalities.to_vec());
    train(&mut model, &train_set, &val, &tc).unwrap();
    Fitted {
        model,
        train: train_set,
        val,
    }
}

pub fn macro_f1(model: &MaleficModel, samples: &[Sample]) -> f64 {
    evaluate(model, samples, 1, 0).unwrap().f1_macro.value
}

/// Copies of `samples` without modality `m`.
pub fn without(samples: &[Sample], m: ModalityId) -> Vec<Sample> {
    samples
        .iter()
        .cloned()
        .map(|mut s| {
            s.inputs.remove(m);
            s
        })
        .collect()
}
