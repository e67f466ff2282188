//! Synthetic counselling corpus with controllable per-modality class signal.
//!
//! The generator writes the raw inputs the preprocessing stages consume:
//! turn-fragmented transcripts, embedding files, face tracker CSVs, and pose
//! keypoint JSONL, plus a manifest from sentence id to raw files.
//!
//! Class signal is a per-class offset. For the embedding modalities, class
//! `k` adds `separation[k]` times a fixed random unit direction to standard
//! normal noise. For the face, it shifts the upper-face action units along a
//! fixed random sign pattern; for the body, it widens the arm span and the
//! arm motion. A modality whose separations are all zero carries no signal.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifact::write_json;
use crate::corpus::{reorganize_transcript, write_transcript, BackchannelRule, Manifest, MiscLabel, Speaker, Utterance};
use crate::data::write_embedding;
use crate::error::{Error, Result};
use crate::modality::ModalityId;
use crate::signal::{
    write_au_csv, write_pose_jsonl, AuTrack, Detection, KeypointFrame, KeypointTrack, Point, QOM_OFFSET,
};

pub const TRANSCRIPT_DIR: &str = "transcripts";
pub const RAW_DIR: &str = "raw";
pub const RAW_MANIFEST: &str = "raw_manifest.json";
pub const CORPUS_SUMMARY: &str = "corpus.json";

/// Availability and class separation of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub availability: f64,
    /// Class offset magnitudes in CT, ST, FN order.
    pub separation: [f64; 3],
}

impl SignalSpec {
    pub fn noise(availability: f64) -> Self {
        Self {
            availability,
            separation: [0.0; 3],
        }
    }

    pub fn new(availability: f64, separation: [f64; 3]) -> Self {
        Self {
            availability,
            separation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub sessions: usize,
    pub client_turns_per_session: usize,
    pub max_sentences_per_turn: usize,
    /// CT, ST, FN.
    pub class_proportions: [f64; 3],
    pub text_dim: usize,
    pub audio_dim: usize,
    /// Inclusive range of frames per face/body track.
    pub frames: [usize; 2],
    pub fps: f64,
    /// Probability that a client sentence is split by a therapist backchannel.
    pub fragment_rate: f64,
    /// Probability that a tracked frame is lost.
    pub frame_loss: f64,
    pub text: SignalSpec,
    pub audio: SignalSpec,
    pub face: SignalSpec,
    pub body: SignalSpec,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self::tiny()
    }
}

impl SyntheticCorpusSpec {
    /// Small corpus with text and audio carrying complementary signal.
    pub fn tiny() -> Self {
        Self {
            sessions: 24,
            client_turns_per_session: 12,
            max_sentences_per_turn: 2,
            class_proportions: [0.24, 0.16, 0.60],
            text_dim: 32,
            audio_dim: 32,
            frames: [16, 28],
            fps: 10.0,
            fragment_rate: 0.15,
            frame_loss: 0.05,
            text: SignalSpec::new(1.0, [3.0, 1.0, 0.0]),
            audio: SignalSpec::new(1.0, [0.0, 3.0, 0.0]),
            face: SignalSpec::noise(0.78),
            body: SignalSpec::noise(0.39),
        }
    }

    /// Corpus with the input sizes of the original encoders.
    pub fn paper_shapes() -> Self {
        Self {
            sessions: 60,
            client_turns_per_session: 16,
            text_dim: 768,
            audio_dim: 758,
            frames: [20, 40],
            ..Self::tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.class_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.class_proportions.iter().any(|&p| p < 0.0) {
            return Err(Error::Parameter(format!(
                "class proportions {:?} must be non-negative and sum to 1",
                self.class_proportions
            )));
        }
        if self.sessions == 0 || self.client_turns_per_session == 0 || self.max_sentences_per_turn == 0 {
            return Err(Error::Parameter("corpus sizes must be positive".into()));
        }
        if self.text_dim == 0 || self.audio_dim == 0 {
            return Err(Error::Parameter("embedding dimensions must be positive".into()));
        }
        if self.frames[0] < QOM_OFFSET + 1 || self.frames[1] < self.frames[0] {
            return Err(Error::Parameter(format!(
                "frame range {:?} must start at {} or more",
                self.frames,
                QOM_OFFSET + 1
            )));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Parameter("fps must be positive".into()));
        }
        for (name, p) in [
            ("fragment rate", self.fragment_rate),
            ("frame loss", self.frame_loss),
            ("text availability", self.text.availability),
            ("audio availability", self.audio.availability),
            ("face availability", self.face.availability),
            ("body availability", self.body.availability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub sessions: Vec<String>,
    pub client_sentences: usize,
    /// CT, ST, FN.
    pub label_counts: [usize; 3],
    pub availability_counts: BTreeMap<ModalityId, usize>,
    pub fragmented_sentences: usize,
}

const VOCABULARY: [&str; 40] = [
    "i", "think", "my", "week", "work", "drink", "smoke", "quit", "family", "again", "feel", "want", "maybe", "could",
    "try", "hard", "doctor", "health", "money", "friends", "home", "stop", "start", "change", "every", "day", "night",
    "wife", "kids", "job", "tired", "better", "worse", "plan", "because", "really", "never", "always", "little", "much",
];
const BACKCHANNELS: [&str; 4] = ["Mm-hmm", "Yeah", "Right", "Uh-huh"];

struct Generated {
    speaker: Speaker,
    label: Option<MiscLabel>,
}

fn sentence_words(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let n = rng.random_range(5..=12);
    (0..n).map(|_| *VOCABULARY.choose(rng).expect("vocabulary")).collect()
}

fn capitalized(words: &[&str]) -> String {
    let text = words.join(" ");
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => text,
    }
}

fn draw_label(p: &[f64; 3], rng: &mut ChaCha8Rng) -> MiscLabel {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return MiscLabel::from_index(i).expect("class index");
        }
    }
    MiscLabel::FN
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn embedding(dim: usize, direction: Option<(&[f64], f64)>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    if let Some((u, s)) = direction {
        for (x, d) in v.iter_mut().zip(u) {
            *x += s * d;
        }
    }
    v
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn face_track(spec: &SyntheticCorpusSpec, pattern: &[f64; 8], offset: f64, rng: &mut ChaCha8Rng) -> AuTrack {
    let frames = rng.random_range(spec.frames[0]..=spec.frames[1]);
    let base: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        if t > 0 && rng.random::<f64>() < spec.frame_loss {
            out.push([None; 16]);
            continue;
        }
        let mut f = [None; 16];
        for j in 0..8 {
            let v = base[j] + 0.5 * offset * pattern[j] + 0.4 * normal(rng);
            f[j] = Some(v.clamp(0.0, 5.0));
        }
        f[8] = Some(0.1 * normal(rng));
        f[9] = Some(0.1 * normal(rng));
        f[10] = Some(10.0 * normal(rng));
        f[11] = Some(10.0 * normal(rng));
        f[12] = Some(500.0 + 20.0 * normal(rng));
        for slot in f.iter_mut().skip(13) {
            *slot = Some(0.05 * normal(rng));
        }
        out.push(f);
    }
    AuTrack { frames: out }
}

fn pose_track(spec: &SyntheticCorpusSpec, scale: f64, offset: f64, rng: &mut ChaCha8Rng) -> KeypointTrack {
    let frames = rng.random_range(spec.frames[0]..=spec.frames[1]);
    let span = (0.6 + 0.15 * offset + 0.05 * normal(rng)).max(0.1);
    let motion = (0.1 + 0.05 * offset).max(0.0);
    let freq = rng.random_range(0.05..0.2);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let neck = Point::new(320.0 + 5.0 * normal(rng), 120.0 + 5.0 * normal(rng));
    let hip = Point::new(neck.x, neck.y + scale);
    let det = |p: Point| Detection {
        point: Some(p),
        confidence: 0.9,
    };
    let track = (0..frames)
        .map(|t| {
            let swing = 1.0 + motion * (std::f64::consts::TAU * freq * t as f64 + phase).sin();
            let half = 0.5 * span * scale * swing;
            let drop = 0.4 * scale + 0.02 * scale * normal(rng);
            let mut f = KeypointFrame {
                left_wrist: det(Point::new(neck.x - half, neck.y + drop)),
                right_wrist: det(Point::new(neck.x + half, neck.y + drop)),
                neck: det(neck),
                mid_hip: det(hip),
            };
            if t != 0 && t != QOM_OFFSET && rng.random::<f64>() < spec.frame_loss {
                f.neck.confidence = 0.1;
            }
            f
        })
        .collect();
    KeypointTrack { fps: spec.fps, frames: track }
}

fn rel(dir: &str, name: String) -> String {
    format!("{dir}/{name}")
}

/// Writes a synthetic corpus under `root` and returns its summary.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, seed: u64, root: &Path) -> Result<CorpusSummary> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transcripts = root.join(TRANSCRIPT_DIR);
    let raw = root.join(RAW_DIR);
    for d in [&transcripts, &raw] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let text_dirs: Vec<Vec<f64>> = (0..3).map(|_| unit_vector(spec.text_dim, &mut rng)).collect();
    let audio_dirs: Vec<Vec<f64>> = (0..3).map(|_| unit_vector(spec.audio_dim, &mut rng)).collect();
    let face_patterns: Vec<[f64; 8]> = (0..3)
        .map(|_| std::array::from_fn(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }))
        .collect();

    let rule = BackchannelRule::default();
    let mut manifest = Manifest::new();
    let mut summary = CorpusSummary {
        sessions: Vec::new(),
        client_sentences: 0,
        label_counts: [0; 3],
        availability_counts: BTreeMap::new(),
        fragmented_sentences: 0,
    };

    for s in 0..spec.sessions {
        let session = format!("session{s:03}");
        let body_scale = rng.random_range(150.0..300.0);
        let mut utterances = Vec::new();
        let mut generated = Vec::new();
        let mut clock = 0.0;
        let push = |utterances: &mut Vec<Utterance>, speaker, text: String, label: Option<MiscLabel>, clock: &mut f64| {
            let id = utterances.len();
            let words = text.split_whitespace().count() as f64;
            let mut u = Utterance::new(id, speaker, text, *clock);
            u.label = label;
            utterances.push(u);
            *clock += 0.3 * words + 0.2;
        };
        for _ in 0..spec.client_turns_per_session {
            let n_ther = rng.random_range(1..=2);
            for _ in 0..n_ther {
                let words = sentence_words(&mut rng);
                let end = if rng.random::<bool>() { "?" } else { "." };
                push(&mut utterances, Speaker::Therapist, capitalized(&words) + end, None, &mut clock);
                generated.push(Generated {
                    speaker: Speaker::Therapist,
                    label: None,
                });
            }
            let n_client = rng.random_range(1..=spec.max_sentences_per_turn);
            for _ in 0..n_client {
                let label = draw_label(&spec.class_proportions, &mut rng);
                let words = sentence_words(&mut rng);
                if rng.random::<f64>() < spec.fragment_rate {
                    let cut = rng.random_range(2..=words.len() - 2);
                    let (a, b) = match (label, rng.random_range(0..3)) {
                        (MiscLabel::FN, _) => (label, label),
                        (_, 0) => (label, MiscLabel::FN),
                        (_, 1) => (MiscLabel::FN, label),
                        _ => (label, label),
                    };
                    push(&mut utterances, Speaker::Client, capitalized(&words[..cut]), Some(a), &mut clock);
                    let bc = BACKCHANNELS.choose(&mut rng).expect("backchannels").to_string();
                    push(&mut utterances, Speaker::Therapist, bc, None, &mut clock);
                    push(&mut utterances, Speaker::Client, words[cut..].join(" ") + ".", Some(b), &mut clock);
                    summary.fragmented_sentences += 1;
                } else {
                    push(&mut utterances, Speaker::Client, capitalized(&words) + ".", Some(label), &mut clock);
                }
                generated.push(Generated {
                    speaker: Speaker::Client,
                    label: Some(label),
                });
            }
        }

        let sentences = reorganize_transcript(&utterances, &rule, &session)?;
        let consistent = sentences.len() == generated.len()
            && sentences
                .iter()
                .zip(&generated)
                .all(|(a, b)| a.speaker == b.speaker && a.label == b.label);
        if !consistent {
            return Err(Error::Parameter(format!(
                "generated transcript for {session} does not reorganize into its sentences"
            )));
        }
        let tpath = transcripts.join(format!("{session}.transcript.jsonl"));
        write_transcript(&tpath, &utterances)?;

        for sentence in &sentences {
            let id = &sentence.id;
            let mut files = BTreeMap::new();
            let write_emb = |name: String, values: &[f64]| -> Result<String> {
                write_embedding(&raw.join(&name), id, values)?;
                Ok(rel(RAW_DIR, name))
            };
            let Some(label) = sentence.label else {
                let v = embedding(spec.text_dim, None, &mut rng);
                files.insert(ModalityId::Text, write_emb(format!("{id}.text.emb.f32"), &v)?);
                manifest.insert(id.clone(), files);
                continue;
            };
            let k = label.index();
            summary.client_sentences += 1;
            summary.label_counts[k] += 1;
            if rng.random::<f64>() < spec.text.availability {
                let v = embedding(spec.text_dim, Some((&text_dirs[k], spec.text.separation[k])), &mut rng);
                files.insert(ModalityId::Text, write_emb(format!("{id}.text.emb.f32"), &v)?);
            }
            if rng.random::<f64>() < spec.audio.availability {
                let v = embedding(spec.audio_dim, Some((&audio_dirs[k], spec.audio.separation[k])), &mut rng);
                files.insert(ModalityId::Audio, write_emb(format!("{id}.audio.emb.f32"), &v)?);
            }
            if rng.random::<f64>() < spec.face.availability {
                let track = face_track(spec, &face_patterns[k], spec.face.separation[k], &mut rng);
                let name = format!("{id}.au.csv");
                let confidence = vec![0.95; track.frames.len()];
                write_au_csv(&raw.join(&name), &track, &[("confidence", confidence)])?;
                files.insert(ModalityId::Face, rel(RAW_DIR, name));
            }
            if rng.random::<f64>() < spec.body.availability {
                let track = pose_track(spec, body_scale, spec.body.separation[k], &mut rng);
                let name = format!("{id}.pose.jsonl");
                write_pose_jsonl(&raw.join(&name), &track)?;
                files.insert(ModalityId::Body, rel(RAW_DIR, name));
            }
            for m in files.keys() {
                *summary.availability_counts.entry(*m).or_default() += 1;
            }
            manifest.insert(id.clone(), files);
        }
        summary.sessions.push(session);
    }
    write_json(&root.join(RAW_MANIFEST), &manifest)?;
    write_json(&root.join(CORPUS_SUMMARY), &summary)?;
    Ok(summary)
}

/// Transcript files of a generated corpus, sorted by session.
pub fn transcript_paths(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let dir = root.join(TRANSCRIPT_DIR);
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(session) = name.strip_suffix(".transcript.jsonl") {
            out.push((session.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}
