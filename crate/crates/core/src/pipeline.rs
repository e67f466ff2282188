//! End-to-end orchestration under one artifacts directory: synthetic corpus,
//! transcript reorganization, feature extraction, training, evaluation,
//! interpretation, and classification.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{write_json, Stamp};
use crate::corpus::{
    build_dataset_index, read_transcript, reorganize_transcript, BackchannelRule, DatasetIndex, Manifest, MiscLabel,
    Sentence, Speaker,
};
use crate::data::{load_dataset, load_samples, Sample};
use crate::encoders::{BODY_OUTPUT, FACE_OUTPUT};
use crate::error::{Error, Result};
use crate::fusion::ATTENTION_DIM;
use crate::interpret::{contribution_profile, export_embeddings, interpret, predicted_label, KMEANS_RESTARTS, K_RANGE};
use crate::metrics::{EvalReport, BOOTSTRAP_RESAMPLES};
use crate::modality::ModalityId;
use crate::model::{MaleficModel, ModelConfig, ENCODER_DROPOUT, FUSION_DIM};
use crate::signal::{preprocess_body, preprocess_face, read_au_csv, read_pose_jsonl, write_feat_csv};
use crate::synth::{generate_synthetic_corpus, transcript_paths, CorpusSummary, SyntheticCorpusSpec, RAW_MANIFEST};
use crate::train::{evaluate, split_by_session, train, usable, TrainConfig, TrainOutcome};

pub const DATA_DIR: &str = "data";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_DIR: &str = "reports";
pub const INTERPRET_DIR: &str = "interpret";
pub const EFFECTIVE_CONFIG: &str = "config.effective.toml";
const STAGE_DIR: &str = ".stages";

pub const SENTENCE_DIR: &str = "sentences";
pub const FEATURE_DIR: &str = "features";
pub const FEATURE_MANIFEST: &str = "manifest.json";
pub const INDEX_FILE: &str = "index.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt.json";
pub const BUNDLE_DIR: &str = "bundle";

/// Names accepted by [`PipelineConfig::preset`].
pub const PIPELINE_PRESETS: [&str; 2] = ["tiny", "paper-shapes"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub fusion_dim: usize,
    pub attention_dim: usize,
    pub face_output: usize,
    pub body_output: usize,
    pub encoder_dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            fusion_dim: FUSION_DIM,
            attention_dim: ATTENTION_DIM,
            face_output: FACE_OUTPUT,
            body_output: BODY_OUTPUT,
            encoder_dropout: ENCODER_DROPOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub bootstrap_resamples: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            bootstrap_resamples: BOOTSTRAP_RESAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSettings {
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
}

impl Default for InterpretSettings {
    fn default() -> Self {
        Self {
            k_min: K_RANGE.0,
            k_max: K_RANGE.1,
            restarts: KMEANS_RESTARTS,
        }
    }
}

/// Everything that determines a pipeline run. The top-level `seed` drives
/// corpus generation, initialization, the split, training, and bootstrap;
/// it replaces `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: String,
    pub seed: u64,
    pub corpus: SyntheticCorpusSpec,
    pub train: TrainConfig,
    pub model: ModelShape,
    pub eval: EvalSettings,
    pub interpret: InterpretSettings,
}

/// Command-line overrides, applied above the preset and below a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub modalities: Option<Vec<ModalityId>>,
}

impl PipelineConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let unknown = || Error::Config(format!("unknown preset `{name}`; expected one of {}", PIPELINE_PRESETS.join(", ")));
        let train = TrainConfig::preset(name).ok_or_else(unknown)?;
        let (corpus, model) = match name {
            "tiny" => (
                SyntheticCorpusSpec::tiny(),
                ModelShape {
                    fusion_dim: 32,
                    face_output: 32,
                    ..ModelShape::default()
                },
            ),
            "paper-shapes" => (SyntheticCorpusSpec::paper_shapes(), ModelShape::default()),
            _ => return Err(unknown()),
        };
        Ok(Self {
            preset: name.to_string(),
            seed: 0,
            corpus,
            train,
            model,
            eval: EvalSettings::default(),
            interpret: InterpretSettings::default(),
        })
    }

    /// Layers, lowest first: `base` (or the named preset, or `tiny`), then
    /// command-line overrides, then the TOML file. A preset named by the
    /// file or the flags replaces a base built from a different preset.
    pub fn resolve(base: Option<&PipelineConfig>, overrides: &Overrides, file: Option<&str>) -> Result<Self> {
        let table: Option<toml::Table> = file
            .map(|text| text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string())))
            .transpose()?;
        let file_preset = match table.as_ref().and_then(|t| t.get("preset")) {
            Some(toml::Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => None,
        };
        let named = file_preset.or_else(|| overrides.preset.clone());
        let mut config = match (named, base) {
            (Some(p), Some(b)) if b.preset == p => b.clone(),
            (Some(p), _) => Self::preset(&p)?,
            (None, Some(b)) => b.clone(),
            (None, None) => Self::preset("tiny")?,
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(m) = &overrides.modalities {
            config.train.modalities = Some(m.clone());
        }
        if let Some(table) = table {
            let mut value = toml::Value::try_from(&config).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut value, toml::Value::Table(table));
            config = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        }
        config.train.seed = config.seed;
        if let Some(m) = &mut config.train.modalities {
            m.sort();
            m.dedup();
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !PIPELINE_PRESETS.contains(&self.preset.as_str()) {
            return Err(Error::Config(format!("unknown preset `{}`", self.preset)));
        }
        self.corpus.validate()?;
        self.train.validate()?;
        let m = &self.model;
        if m.fusion_dim == 0 || m.attention_dim == 0 || m.face_output == 0 || m.body_output == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&m.encoder_dropout) {
            return Err(Error::Config(format!("encoder dropout {} outside [0, 1)", m.encoder_dropout)));
        }
        if self.eval.bootstrap_resamples == 0 {
            return Err(Error::Config("bootstrap needs at least one resample".into()));
        }
        let i = &self.interpret;
        if i.k_min < 2 || i.k_min > i.k_max || i.restarts == 0 {
            return Err(Error::Config(format!(
                "interpret needs 2 <= k_min <= k_max and restarts >= 1, got k {}..{} with {} restarts",
                i.k_min, i.k_max, i.restarts
            )));
        }
        Ok(())
    }

    /// Canonical serialized form; its hash identifies the run.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn stamp(&self) -> Result<Stamp> {
        Ok(Stamp::new(self.to_toml()?.as_bytes(), self.seed))
    }

    /// Model modalities: the configured subset or all of them.
    pub fn modalities(&self) -> Vec<ModalityId> {
        self.train.modalities.clone().unwrap_or_else(|| ModalityId::ALL.to_vec())
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else is
/// replaced.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenCorpus,
    Preprocess,
    Features,
    Train,
    Eval,
    Interpret,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::GenCorpus,
        Stage::Preprocess,
        Stage::Features,
        Stage::Train,
        Stage::Eval,
        Stage::Interpret,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::Preprocess => "preprocess",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Interpret => "interpret",
        }
    }
}

/// Paths of the artifacts directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join(DATA_DIR)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR)
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join(REPORT_DIR)
    }

    pub fn interpret(&self) -> PathBuf {
        self.root.join(INTERPRET_DIR)
    }

    pub fn effective_config(&self) -> PathBuf {
        self.root.join(EFFECTIVE_CONFIG)
    }

    pub fn index(&self) -> PathBuf {
        self.data().join(INDEX_FILE)
    }

    pub fn split(&self) -> PathBuf {
        self.data().join(SPLIT_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoints().join(CHECKPOINT_FILE)
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join(STAGE_DIR).join(format!("{}.done", stage.name()))
    }

    /// Entries this tool creates directly under the root.
    fn owned_entries(&self) -> [PathBuf; 6] {
        [
            self.data(),
            self.checkpoints(),
            self.reports(),
            self.interpret(),
            self.effective_config(),
            self.root.join(STAGE_DIR),
        ]
    }

    /// The config recorded by an earlier command, if any.
    pub fn recorded_config(&self) -> Result<Option<PipelineConfig>> {
        let path = self.effective_config();
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        PipelineConfig::from_toml(&text).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub stamp: Stamp,
    pub sessions: usize,
    pub sentences: usize,
    pub labeled_client_sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub stamp: Stamp,
    pub indexed_sentences: usize,
    pub availability: BTreeMap<ModalityId, usize>,
    /// Tracks dropped because a channel was never observed or the framing
    /// was degenerate; the modality is treated as absent for that sentence.
    pub dropped_tracks: BTreeMap<ModalityId, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub stamp: Stamp,
    pub train_sessions: BTreeSet<String>,
    pub validation_sessions: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stamp: Stamp,
    pub modalities: Vec<ModalityId>,
    pub n_train: usize,
    pub n_validation: usize,
    pub parameters: usize,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stamp: Stamp,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Refuse a non-empty artifacts directory.
    Fresh,
    /// Continue a run with the same config, skipping completed stages.
    Resume,
    /// Delete the artifacts this tool owns and start over.
    Overwrite,
}

/// One configured pipeline bound to an artifacts directory.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub layout: Layout,
    pub stamp: Stamp,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let stamp = config.stamp()?;
        Ok(Self {
            config,
            layout: Layout::new(root),
            stamp,
        })
    }

    /// Fails when the directory was produced under a different config.
    pub fn check_recorded(&self) -> Result<()> {
        if let Some(recorded) = self.layout.recorded_config()? {
            let recorded = recorded.stamp()?;
            if recorded != self.stamp {
                return Err(Error::ConfigMismatch {
                    path: self.layout.root.clone(),
                    recorded: recorded.config_hash,
                    current: self.stamp.config_hash.clone(),
                });
            }
        }
        Ok(())
    }

    fn stage_inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let data = self.layout.data();
        match stage {
            Stage::GenCorpus => vec![],
            Stage::Preprocess => vec![data.join(crate::synth::TRANSCRIPT_DIR)],
            Stage::Features => vec![data.join(RAW_MANIFEST), data.join(SENTENCE_DIR)],
            Stage::Train => vec![self.layout.index()],
            Stage::Eval => vec![self.layout.checkpoint(), self.layout.index(), self.layout.split()],
            Stage::Interpret => vec![self.layout.checkpoint(), self.layout.index(), self.layout.split()],
        }
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        fs::read_to_string(self.layout.marker(stage)).is_ok_and(|h| h.trim() == self.stamp.config_hash)
    }

    /// Validates inputs and the recorded config, then runs one stage. Later
    /// stages lose their completion markers.
    pub fn run_stage(&self, stage: Stage) -> Result<serde_json::Value> {
        self.check_recorded()?;
        for path in self.stage_inputs(stage) {
            if !path.exists() {
                return Err(Error::MissingStageInput {
                    stage: stage.name(),
                    path,
                });
            }
        }
        fs::create_dir_all(&self.layout.root).map_err(|e| Error::io(&self.layout.root, e))?;
        let echo = self.layout.effective_config();
        fs::write(&echo, self.config.to_toml()?).map_err(|e| Error::io(&echo, e))?;
        for later in Stage::ALL.into_iter().filter(|&s| s >= stage) {
            let m = self.layout.marker(later);
            if m.exists() {
                fs::remove_file(&m).map_err(|e| Error::io(&m, e))?;
            }
        }
        let summary = match stage {
            Stage::GenCorpus => serde_json::to_value(self.gen_corpus()?)?,
            Stage::Preprocess => serde_json::to_value(self.preprocess()?)?,
            Stage::Features => serde_json::to_value(self.features()?)?,
            Stage::Train => serde_json::to_value(self.train()?)?,
            Stage::Eval => serde_json::to_value(self.eval()?)?,
            Stage::Interpret => serde_json::to_value(self.interpret()?)?,
        };
        let marker = self.layout.marker(stage);
        let dir = marker.parent().expect("marker has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(&marker, format!("{}\n", self.stamp.config_hash)).map_err(|e| Error::io(&marker, e))?;
        Ok(summary)
    }

    pub fn gen_corpus(&self) -> Result<CorpusSummary> {
        let data = self.layout.data();
        fresh_dir(&data)?;
        let summary = generate_synthetic_corpus(&self.config.corpus, self.config.seed, &data)?;
        write_json(&data.join("stamp.json"), &self.stamp)?;
        Ok(summary)
    }

    /// Reorganizes every transcript into `data/sentences/`.
    pub fn preprocess(&self) -> Result<PreprocessSummary> {
        let data = self.layout.data();
        let out = data.join(SENTENCE_DIR);
        fresh_dir(&out)?;
        let rule = BackchannelRule::default();
        let sessions: Vec<Vec<Sentence>> = transcript_paths(&data)?
            .par_iter()
            .map(|(session, path)| {
                let sentences = reorganize_transcript(&read_transcript(path)?, &rule, session)?;
                write_json(&out.join(format!("{session}.sentences.json")), &sentences)?;
                Ok(sentences)
            })
            .collect::<Result<_>>()?;
        let all = sessions.iter().flatten();
        Ok(PreprocessSummary {
            stamp: self.stamp.clone(),
            sessions: sessions.len(),
            sentences: sessions.iter().map(Vec::len).sum(),
            labeled_client_sentences: all
                .filter(|s| s.speaker == Speaker::Client && s.label.is_some())
                .count(),
        })
    }

    /// Extracts face and body features, writes the processed manifest, and
    /// builds the dataset index.
    pub fn features(&self) -> Result<FeatureSummary> {
        let data = self.layout.data();
        let raw_path = data.join(RAW_MANIFEST);
        let raw: Manifest = serde_json::from_str(&fs::read_to_string(&raw_path).map_err(|e| Error::io(&raw_path, e))?)?;
        let feat_dir = data.join(FEATURE_DIR);
        fresh_dir(&feat_dir)?;

        let processed: Vec<(String, BTreeMap<ModalityId, String>, Vec<ModalityId>)> = raw
            .par_iter()
            .map(|(id, files)| {
                let mut out = BTreeMap::new();
                let mut dropped = Vec::new();
                for (&m, rel) in files {
                    let src = data.join(rel);
                    let features = match m {
                        ModalityId::Face => Some(read_au_csv(&src).and_then(|t| preprocess_face(&t))),
                        ModalityId::Body => Some(read_pose_jsonl(&src).and_then(|t| preprocess_body(&t))),
                        _ => None,
                    };
                    match features {
                        None => {
                            out.insert(m, rel.clone());
                        }
                        Some(Ok(f)) => {
                            let rel = format!("{FEATURE_DIR}/{id}.{m}.feat.csv");
                            write_feat_csv(&data.join(&rel), &f)?;
                            out.insert(m, rel);
                        }
                        Some(Err(Error::AllMissing(_) | Error::DegenerateFraming(_))) => dropped.push(m),
                        Some(Err(e)) => return Err(e),
                    }
                }
                Ok((id.clone(), out, dropped))
            })
            .collect::<Result<_>>()?;

        let mut manifest = Manifest::new();
        let mut dropped_tracks = BTreeMap::new();
        for (id, files, dropped) in processed {
            for m in dropped {
                *dropped_tracks.entry(m).or_insert(0) += 1;
            }
            manifest.insert(id, files);
        }
        write_json(&data.join(FEATURE_MANIFEST), &manifest)?;

        let index = build_dataset_index(&read_sentences(&data.join(SENTENCE_DIR))?, &manifest, &data)?;
        index.save(&self.layout.index())?;
        let summary = FeatureSummary {
            stamp: self.stamp.clone(),
            indexed_sentences: index.entries.len(),
            availability: index.availability_counts(),
            dropped_tracks,
        };
        write_json(&data.join("features.json"), &summary)?;
        Ok(summary)
    }

    pub fn train(&self) -> Result<TrainReport> {
        let modalities = self.config.modalities();
        let samples = load_dataset(&self.layout.index(), &modalities)?;
        let (train_set, val_set) = split_by_session(samples, self.config.train.validation_fraction, self.config.seed);
        let split = Split {
            stamp: self.stamp.clone(),
            train_sessions: train_set.iter().map(|s| s.session.clone()).collect(),
            validation_sessions: val_set.iter().map(|s| s.session.clone()).collect(),
        };
        write_json(&self.layout.split(), &split)?;

        let shape = &self.config.model;
        let mut model_config = ModelConfig::from_samples(&train_set, &modalities, shape.face_output, shape.body_output)?;
        model_config.fusion_dim = shape.fusion_dim;
        model_config.attention_dim = shape.attention_dim;
        model_config.encoder_dropout = shape.encoder_dropout;
        model_config.modality_dropout = self.config.train.modality_dropout;
        model_config.validate()?;
        let mut model = MaleficModel::new(model_config, self.config.seed)?;
        let outcome = train(&mut model, &train_set, &val_set, &self.config.train)?;

        fresh_dir(&self.layout.checkpoints())?;
        model.save(&self.layout.checkpoint(), Some(&self.stamp))?;
        let reports = self.layout.reports();
        fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
        let curve = reports.join("loss_curve.csv");
        fs::write(&curve, outcome.curve_csv(&self.stamp.csv_comment())).map_err(|e| Error::io(&curve, e))?;
        let report = TrainReport {
            stamp: self.stamp.clone(),
            modalities: model.modalities().to_vec(),
            n_train: train_set.len(),
            n_validation: val_set.len(),
            parameters: model.params.num_scalars(),
            outcome,
        };
        write_json(&reports.join("train.json"), &report)?;
        Ok(report)
    }

    /// Loads the checkpoint and the samples it can read.
    fn model_and_samples(&self) -> Result<(MaleficModel, Vec<Sample>)> {
        let (model, _) = MaleficModel::load(&self.layout.checkpoint())?;
        let samples = load_dataset(&self.layout.index(), model.modalities())?;
        Ok((model, samples))
    }

    /// The validation sessions of the recorded split; every sample when the
    /// split holds none out.
    fn validation(&self, samples: Vec<Sample>) -> Result<Vec<Sample>> {
        let path = self.layout.split();
        let split: Split = serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        if split.validation_sessions.is_empty() {
            return Ok(samples);
        }
        Ok(samples
            .into_iter()
            .filter(|s| split.validation_sessions.contains(&s.session))
            .collect())
    }

    /// Metrics on the validation sessions (every session when the split
    /// holds none out).
    pub fn eval(&self) -> Result<EvalReport> {
        let (model, samples) = self.model_and_samples()?;
        let samples = self.validation(samples)?;
        let mut report = evaluate(&model, &samples, self.config.eval.bootstrap_resamples, self.config.seed)?;
        report.stamp = Some(self.stamp.clone());
        let reports = self.layout.reports();
        fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
        write_json(&reports.join("eval.json"), &report)?;
        let table = reports.join("eval.txt");
        fs::write(&table, format!("{}{}", self.stamp.csv_comment(), report.to_table()))
            .map_err(|e| Error::io(&table, e))?;
        report.write_confusion_csv(&reports.join("confusion.csv"))?;
        Ok(report)
    }

    /// Contribution analysis on the full-modality validation samples, and
    /// the embedding bundle over every sample.
    pub fn interpret(&self) -> Result<crate::interpret::InterpretReport> {
        let (model, samples) = self.model_and_samples()?;
        let validation = self.validation(samples.clone())?;
        let s = &self.config.interpret;
        let mut result = interpret(&model, &validation, (s.k_min, s.k_max), s.restarts, self.config.seed)?;
        result.report.stamp = Some(self.stamp.clone());
        let dir = self.layout.interpret();
        fresh_dir(&dir)?;
        result.write(&dir)?;
        export_embeddings(&model, &samples, &dir.join(BUNDLE_DIR), Some(&self.stamp))?;
        Ok(result.report)
    }
}

/// Runs every stage in order under `root`.
pub fn run_pipeline(config: PipelineConfig, root: &Path, mode: RunMode) -> Result<RunSummary> {
    let pipeline = Pipeline::new(config, root)?;
    let occupied = fs::read_dir(root).is_ok_and(|mut d| d.next().is_some());
    match mode {
        RunMode::Fresh if occupied => return Err(Error::PriorRun(root.to_path_buf())),
        RunMode::Overwrite => {
            for path in pipeline.layout.owned_entries() {
                let removed = if path.is_dir() {
                    fs::remove_dir_all(&path)
                } else if path.exists() {
                    fs::remove_file(&path)
                } else {
                    Ok(())
                };
                removed.map_err(|e| Error::io(&path, e))?;
            }
        }
        _ => {}
    }
    pipeline.check_recorded()?;
    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    for stage in Stage::ALL {
        if mode == RunMode::Resume && pipeline.is_complete(stage) && executed.is_empty() {
            skipped.push(stage);
            continue;
        }
        pipeline.run_stage(stage)?;
        executed.push(stage);
    }
    Ok(RunSummary {
        stamp: pipeline.stamp,
        executed,
        skipped,
    })
}

/// Removes and recreates a directory this tool owns.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Reorganized sessions from `*.sentences.json`, sorted by file name.
pub fn read_sentences(dir: &Path) -> Result<Vec<Vec<Sentence>>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.to_string_lossy().ends_with(".sentences.json") {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(serde_json::from_str(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?))
        .collect()
}

/// One classified sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRecord {
    pub sentence_id: String,
    pub session: String,
    /// Annotated label from the index.
    pub label: MiscLabel,
    pub predicted: MiscLabel,
    pub class_probs: BTreeMap<MiscLabel, f64>,
    pub available: Vec<ModalityId>,
    /// Share of fused dimensions each model modality supplied.
    pub contribution: BTreeMap<ModalityId, f64>,
    pub top_modality: ModalityId,
}

/// Modalities to read for classification. An explicit request must be a
/// subset of the checkpoint; otherwise the index and checkpoint must share
/// at least one modality.
pub fn classify_modalities(
    checkpoint: &[ModalityId],
    input: &[ModalityId],
    requested: Option<&[ModalityId]>,
) -> Result<Vec<ModalityId>> {
    let mismatch = |input: &[ModalityId]| Error::ModalityMismatch {
        checkpoint: ModalityId::join(checkpoint),
        input: ModalityId::join(input),
    };
    let chosen: Vec<ModalityId> = match requested {
        Some(r) => {
            if r.iter().any(|m| !checkpoint.contains(m)) {
                return Err(mismatch(r));
            }
            r.iter().copied().filter(|m| input.contains(m)).collect()
        }
        None => checkpoint.iter().copied().filter(|m| input.contains(m)).collect(),
    };
    if chosen.is_empty() {
        return Err(mismatch(requested.unwrap_or(input)));
    }
    Ok(chosen)
}

/// Eval-mode predictions with contribution profiles. Samples carrying none
/// of the model modalities are skipped.
pub fn classify(model: &MaleficModel, samples: &[Sample]) -> Result<Vec<ClassifyRecord>> {
    let mods = model.modalities();
    usable(model, samples)
        .par_iter()
        .map(|s| {
            let r = model.infer(&s.inputs, None)?;
            let profile = contribution_profile(&r.output.selection, mods.len());
            let mut top = 0;
            for (i, &p) in profile.iter().enumerate() {
                if p > profile[top] {
                    top = i;
                }
            }
            Ok(ClassifyRecord {
                sentence_id: s.id.clone(),
                session: s.session.clone(),
                label: s.label,
                predicted: predicted_label(&r.class_probs),
                class_probs: MiscLabel::ALL.into_iter().zip(r.class_probs.iter().copied()).collect(),
                available: mods.iter().zip(&r.available).filter(|(_, &a)| a).map(|(&m, _)| m).collect(),
                contribution: mods.iter().copied().zip(profile).collect(),
                top_modality: mods[top],
            })
        })
        .collect()
}

/// Classifies every entry of a dataset index with a checkpoint.
pub fn classify_index(checkpoint: &Path, index_path: &Path, requested: Option<&[ModalityId]>) -> Result<Vec<ClassifyRecord>> {
    let (model, _) = MaleficModel::load(checkpoint)?;
    let index = DatasetIndex::load(index_path)?;
    let modalities = classify_modalities(model.modalities(), &index.modalities, requested)?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    let samples = load_samples(&index, base, &modalities)?;
    classify(&model, &samples)
}

/// JSON lines, one record per line.
pub fn records_jsonl(records: &[ClassifyRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
