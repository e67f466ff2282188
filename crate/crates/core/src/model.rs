//! The full classifier: encoders, docks, selection fusion, and linear head.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::Stamp;
use crate::autodiff::{Axis, Graph, NamedTensor, NodeId, ParamStore};
use crate::data::{Sample, SampleInputs};
use crate::encoders::{Dense, Dock, DockedEmbedding, Encoder, EncoderSpec, ModalityInput};
use crate::error::{Error, Result};
use crate::fusion::{
    argmax_selection, modality_dropout, sample_selection, select_and_fuse, AttentionBlock, AttentionMatrix,
    FrozenSelection, FusionOutput, SelectionMap, SelectionMode, ATTENTION_DIM, MODALITY_DROPOUT,
};
use crate::modality::ModalityId;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const FUSION_DIM: usize = 64;
pub const ENCODER_DROPOUT: f64 = 0.1;
const CHECKPOINT_FORMAT: &str = "malefic-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model modalities in canonical order; `encoders[i]` belongs to
    /// `modalities[i]`.
    pub modalities: Vec<ModalityId>,
    pub encoders: Vec<EncoderSpec>,
    pub fusion_dim: usize,
    pub attention_dim: usize,
    pub encoder_dropout: f64,
    pub modality_dropout: f64,
}

impl ModelConfig {
    /// Default sizes around the given per-modality encoders.
    pub fn new(mut specs: Vec<(ModalityId, EncoderSpec)>) -> Result<Self> {
        specs.sort_by_key(|(m, _)| *m);
        let config = Self {
            modalities: specs.iter().map(|(m, _)| *m).collect(),
            encoders: specs.into_iter().map(|(_, s)| s).collect(),
            fusion_dim: FUSION_DIM,
            attention_dim: ATTENTION_DIM,
            encoder_dropout: ENCODER_DROPOUT,
            modality_dropout: MODALITY_DROPOUT,
        };
        config.validate()?;
        Ok(config)
    }

    /// Infers encoder input shapes from the first sample carrying each
    /// modality. Face and body use `face_output` and `body_output` for their
    /// embedding size.
    pub fn from_samples(samples: &[Sample], modalities: &[ModalityId], face_output: usize, body_output: usize) -> Result<Self> {
        let mut specs = Vec::new();
        for &m in modalities {
            let input = samples
                .iter()
                .find_map(|s| s.inputs.get(m))
                .ok_or_else(|| Error::Parameter(format!("no sample carries modality `{m}`")))?;
            let spec = match input {
                ModalityInput::Vector(v) => EncoderSpec::mlp(v.len()),
                ModalityInput::Sequence(t) => {
                    let out = if m == ModalityId::Body { body_output } else { face_output };
                    EncoderSpec::sequence(t.cols(), out)
                }
            };
            specs.push((m, spec));
        }
        Self::new(specs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Parameter("model needs at least one modality".into()));
        }
        if self.modalities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("model modalities must be in canonical order without repeats".into()));
        }
        if self.encoders.len() != self.modalities.len() {
            return Err(Error::Parameter("one encoder spec per modality required".into()));
        }
        for (m, spec) in self.modalities.iter().zip(&self.encoders) {
            spec.validate()?;
            if m.is_sequence() != matches!(spec, EncoderSpec::Sequence { .. }) {
                return Err(Error::Parameter(format!("encoder kind does not fit modality `{m}`")));
            }
        }
        if self.fusion_dim == 0 || self.attention_dim == 0 {
            return Err(Error::Parameter("fusion and attention dimensions must be positive".into()));
        }
        for (name, p) in [("encoder dropout", self.encoder_dropout), ("modality dropout", self.modality_dropout)] {
            if !(0.0..1.0).contains(&p) && !(name == "modality dropout" && p == 1.0) {
                return Err(Error::Parameter(format!("{name} {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Per-channel affine standardization of a sequence modality, fitted on
/// training frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(frames: impl Iterator<Item = &'a Tensor>, channels: usize) -> Option<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for t in frames {
            for r in 0..t.rows() {
                for (c, &v) in t.row_slice(r).iter().enumerate().take(channels) {
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return None;
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / nf - m * m).max(0.0).sqrt();
                if sd > 1e-8 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Some(Self { mean, scale })
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        let cols = t.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % cols;
            *v = (*v - self.mean[c]) * self.scale[c];
        }
        out
    }
}

/// Optional controls for one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Per model modality: `false` hides a present modality, exactly as if
    /// it were absent.
    pub mask: Option<&'a [bool]>,
    /// Replaces the drawn selection and fixes the straight-through reference.
    pub frozen: Option<&'a FrozenSelection>,
}

/// Graph nodes and choices of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub logits: NodeId,
    pub probs: NodeId,
    pub docked: NodeId,
    pub fused: NodeId,
    pub selection: SelectionMap,
    /// Availability after masking and modality dropout.
    pub available: Vec<bool>,
}

/// Eval-mode result for one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inference {
    pub output: FusionOutput,
    #[serde(skip)]
    pub docked: Vec<DockedEmbedding>,
    pub class_probs: Vec<f64>,
    pub available: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    stamp: Option<Stamp>,
    config: ModelConfig,
    standardizers: Vec<Option<Standardizer>>,
    params: Vec<NamedTensor>,
}

#[derive(Debug, Clone)]
pub struct MaleficModel {
    config: ModelConfig,
    pub params: ParamStore,
    encoders: Vec<Encoder>,
    docks: Vec<Dock>,
    attention: AttentionBlock,
    head: Dense,
    standardizers: Vec<Option<Standardizer>>,
}

/// Softmax of a logit row.
pub fn class_probabilities(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

impl MaleficModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut encoders = Vec::new();
        let mut docks = Vec::new();
        for (&m, spec) in config.modalities.iter().zip(&config.encoders) {
            encoders.push(Encoder::new(&mut params, m.name(), spec, &mut rng)?);
            docks.push(Dock::new(&mut params, m, spec.output_dim(), config.fusion_dim, &mut rng));
        }
        let attention = AttentionBlock::new(
            &mut params,
            config.modalities.len(),
            config.fusion_dim,
            config.attention_dim,
            &mut rng,
        );
        let head = Dense::new(&mut params, "head", config.fusion_dim, NUM_CLASSES, &mut rng);
        let standardizers = vec![None; config.modalities.len()];
        Ok(Self {
            config,
            params,
            encoders,
            docks,
            attention,
            head,
            standardizers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn modalities(&self) -> &[ModalityId] {
        &self.config.modalities
    }

    /// Sets the training-time modality dropout rate.
    pub fn set_modality_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Parameter(format!("modality dropout {rate} outside [0, 1]")));
        }
        self.config.modality_dropout = rate;
        Ok(())
    }

    pub fn num_modalities(&self) -> usize {
        self.config.modalities.len()
    }

    /// Fits per-channel standardization of every sequence modality on
    /// `samples`.
    pub fn fit_standardizers(&mut self, samples: &[Sample]) {
        for (i, (&m, spec)) in self.config.modalities.iter().zip(&self.config.encoders).enumerate() {
            if let EncoderSpec::Sequence { channels, .. } = *spec {
                let frames = samples.iter().filter_map(|s| match s.inputs.get(m) {
                    Some(ModalityInput::Sequence(t)) => Some(t),
                    _ => None,
                });
                self.standardizers[i] = Standardizer::fit(frames, channels);
            }
        }
    }

    /// Which model modalities the sample carries, after an optional mask.
    pub fn availability(&self, inputs: &SampleInputs, mask: Option<&[bool]>) -> Result<Vec<bool>> {
        if let Some(mask) = mask {
            if mask.len() != self.num_modalities() {
                return Err(Error::Shape {
                    op: "availability mask",
                    left: vec![self.num_modalities()],
                    right: vec![mask.len()],
                });
            }
        }
        Ok(self
            .config
            .modalities
            .iter()
            .enumerate()
            .map(|(i, &m)| inputs.available(m) && mask.is_none_or(|k| k[i]))
            .collect())
    }

    /// Builds the forward pass into `g`. A training graph applies modality
    /// dropout and samples the selection; an eval graph takes the argmax.
    pub fn forward(&self, g: &mut Graph, inputs: &SampleInputs, options: ForwardOptions) -> Result<Trace> {
        let mut available = self.availability(inputs, options.mask)?;
        if !available.iter().any(|&b| b) {
            return Err(Error::NoAvailableModality);
        }
        if g.is_training() && options.frozen.is_none() {
            let rng = g.rng().expect("training graph owns an rng");
            available = modality_dropout(&available, self.config.modality_dropout, rng)?;
        }
        let dropout = if g.is_training() { self.config.encoder_dropout } else { 0.0 };

        let mut rows = Vec::with_capacity(self.num_modalities());
        for (i, &m) in self.config.modalities.iter().enumerate() {
            let encoded = if available[i] {
                let input = inputs.get(m).expect("availability checked");
                let node = match (input, &self.standardizers[i]) {
                    (ModalityInput::Sequence(t), Some(st)) => {
                        self.encoders[i].forward(g, &ModalityInput::Sequence(st.apply(t)), dropout)?
                    }
                    _ => self.encoders[i].forward(g, input, dropout)?,
                };
                Some(node)
            } else {
                None
            };
            rows.push(self.docks[i].forward(g, encoded)?);
        }
        let docked = g.concat(&rows, Axis::Rows)?;
        let probs = self.attention.attend(g, docked, &available)?;

        let (chosen, mode, reference) = match options.frozen {
            Some(f) => (f.chosen.clone(), SelectionMode::Argmax, Some(f.reference.clone())),
            None if g.is_training() => {
                let p = g.value(probs).clone();
                let rng = g.rng().expect("training graph owns an rng");
                (sample_selection(&p, rng), SelectionMode::Sampled, None)
            }
            None => (argmax_selection(g.value(probs)), SelectionMode::Argmax, None),
        };
        for (d, &m) in chosen.iter().enumerate() {
            if m >= available.len() || !available[m] {
                return Err(Error::Parameter(format!("dimension {d} selects unavailable modality {m}")));
            }
        }
        let fused = select_and_fuse(g, docked, probs, &chosen, reference)?;
        let logits = self.head.forward(g, fused)?;
        Ok(Trace {
            logits,
            probs,
            docked,
            fused,
            selection: SelectionMap { chosen, mode },
            available,
        })
    }

    /// Eval-mode selection of `inputs`, frozen with its probabilities as
    /// reference so that the loss becomes a smooth function of the
    /// parameters around the current point.
    pub fn frozen_selection(&self, inputs: &SampleInputs, mask: Option<&[bool]>) -> Result<FrozenSelection> {
        let mut g = Graph::new(&self.params);
        let t = self.forward(&mut g, inputs, ForwardOptions { mask, frozen: None })?;
        Ok(FrozenSelection {
            chosen: t.selection.chosen,
            reference: g.value(t.probs).clone(),
        })
    }

    /// Eval-mode classification of one sample.
    pub fn infer(&self, inputs: &SampleInputs, mask: Option<&[bool]>) -> Result<Inference> {
        let mut g = Graph::new(&self.params);
        let t = self.forward(&mut g, inputs, ForwardOptions { mask, frozen: None })?;
        let logits = g.value(t.logits).data().to_vec();
        let docked_t = g.value(t.docked);
        let docked = self
            .config
            .modalities
            .iter()
            .enumerate()
            .map(|(i, &m)| DockedEmbedding {
                modality: m,
                vector: docked_t.row_slice(i).to_vec(),
                available: t.available[i],
            })
            .collect();
        Ok(Inference {
            class_probs: class_probabilities(&logits),
            output: FusionOutput {
                fused: g.value(t.fused).data().to_vec(),
                logits,
                selection: t.selection,
                attention: AttentionMatrix {
                    modalities: self.config.modalities.clone(),
                    probs: g.value(t.probs).clone(),
                },
            },
            docked,
            available: t.available,
        })
    }

    /// Serialized checkpoint. Parameters are stored as JSON numbers in
    /// shortest round-trip form, so loading reproduces every bit.
    pub fn to_checkpoint_bytes(&self, stamp: Option<&Stamp>) -> Result<Vec<u8>> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stamp: stamp.cloned(),
            config: self.config.clone(),
            standardizers: self.standardizers.clone(),
            params: self.params.to_named(),
        };
        let mut bytes = serde_json::to_vec(&ck)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], origin: &str) -> Result<(Self, Option<Stamp>)> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            ));
        }
        if ck.standardizers.len() != ck.config.modalities.len() {
            return Err(Error::format(origin, "standardizer count does not match modalities"));
        }
        let mut model = Self::new(ck.config, 0)?;
        model.params.load_named(&ck.params)?;
        model.standardizers = ck.standardizers;
        Ok((model, ck.stamp))
    }

    pub fn save(&self, path: &Path, stamp: Option<&Stamp>) -> Result<()> {
        let bytes = self.to_checkpoint_bytes(stamp)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Stamp>)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, &path.display().to_string())
    }
}
