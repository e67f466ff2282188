//! Transcript reorganization and dataset indexing.
//!
//! Turn-fragmented transcripts are cleaned of listener backchannels, the
//! fragments a backchannel split apart are merged back into sentences, the
//! per-fragment labels are resolved, and the client sentences are assembled
//! into an index of per-modality feature files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::ModalityId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MiscLabel {
    /// Change talk.
    CT,
    /// Sustain talk.
    ST,
    /// Follow / neutral.
    FN,
}

impl MiscLabel {
    pub const ALL: [MiscLabel; 3] = [MiscLabel::CT, MiscLabel::ST, MiscLabel::FN];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<MiscLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MiscLabel::CT => "CT",
            MiscLabel::ST => "ST",
            MiscLabel::FN => "FN",
        }
    }
}

impl fmt::Display for MiscLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MiscLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CT" => Ok(MiscLabel::CT),
            "ST" => Ok(MiscLabel::ST),
            "FN" | "F/N" => Ok(MiscLabel::FN),
            other => Err(Error::Parameter(format!("unknown MISC label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Client,
    Therapist,
}

/// One line of a `*.transcript.jsonl` file.
///
/// `id` is the utterance's position in the original transcript. It survives
/// backchannel removal, so a gap between two consecutive ids marks the spot
/// where an interruption was taken out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: usize,
    pub speaker: Speaker,
    pub text: String,
    pub start_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<MiscLabel>,
    #[serde(default)]
    pub is_backchannel: bool,
}

impl Utterance {
    pub fn new(id: usize, speaker: Speaker, text: impl Into<String>, start_time: f64) -> Self {
        Self {
            id,
            speaker,
            text: text.into(),
            start_time,
            label: None,
            is_backchannel: false,
        }
    }

    pub fn with_label(mut self, label: MiscLabel) -> Self {
        self.label = Some(label);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub session: String,
    pub speaker: Speaker,
    pub text: String,
    pub label: Option<MiscLabel>,
    /// Labels of the merged fragments, in order; resolved into `label`.
    pub part_labels: Vec<MiscLabel>,
    pub source_ids: Vec<usize>,
    pub turn_id: usize,
    pub position_in_turn: usize,
}

/// Backchannel detection rule: a short utterance made only of lexicon tokens
/// that lands between two fragments of another speaker's unfinished sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackchannelRule {
    pub max_tokens: usize,
    pub lexicon: BTreeSet<String>,
}

impl Default for BackchannelRule {
    fn default() -> Self {
        Self {
            max_tokens: 3,
            lexicon: ["yeah", "mm-hmm", "right", "okay", "uh-huh", "mm", "sure"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

/// Lower-cased whitespace tokens with surrounding punctuation stripped.
pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn ends_sentence(text: &str) -> bool {
    matches!(text.trim_end().chars().last(), Some('.' | '?' | '!'))
}

impl BackchannelRule {
    fn is_backchannel_text(&self, text: &str) -> bool {
        let toks = tokens(text);
        !toks.is_empty() && toks.len() <= self.max_tokens && toks.iter().all(|t| self.lexicon.contains(t))
    }

    fn interrupts(&self, transcript: &[Utterance], i: usize) -> bool {
        if i == 0 || i + 1 >= transcript.len() {
            return false;
        }
        let (prev, cur, next) = (&transcript[i - 1], &transcript[i], &transcript[i + 1]);
        prev.speaker != cur.speaker
            && next.speaker == prev.speaker
            && !ends_sentence(&prev.text)
            && self.is_backchannel_text(&cur.text)
    }
}

/// Drops utterances that are flagged as backchannels, either explicitly in the
/// input or by `rule`. Order is preserved.
pub fn remove_backchannels(transcript: &[Utterance], rule: &BackchannelRule) -> Vec<Utterance> {
    transcript
        .iter()
        .enumerate()
        .filter(|&(i, u)| !(u.is_backchannel || rule.interrupts(transcript, i)))
        .map(|(_, u)| u.clone())
        .collect()
}

/// Rebuilds sentences from a backchannel-free transcript.
///
/// Consecutive same-speaker utterances separated by a gap in their original
/// ids are fragments of one sentence and get concatenated. Without a gap they
/// are distinct sentences of the same turn. A speaker change starts a new turn.
/// Labels are not resolved here; see [`resolve_labels`].
pub fn merge_turn_sentences(transcript: &[Utterance], session: &str) -> Vec<Sentence> {
    let mut out: Vec<Sentence> = Vec::new();
    let mut prev: Option<&Utterance> = None;
    for u in transcript {
        match prev {
            Some(p) if p.speaker == u.speaker && u.id > p.id + 1 => {
                let s = out.last_mut().expect("previous sentence");
                s.text.push(' ');
                s.text.push_str(&u.text);
                s.source_ids.push(u.id);
                s.part_labels.extend(u.label);
            }
            _ => {
                let (turn_id, position_in_turn) = match (prev, out.last()) {
                    (Some(p), Some(last)) if p.speaker == u.speaker => (last.turn_id, last.position_in_turn + 1),
                    (Some(_), Some(last)) => (last.turn_id + 1, 0),
                    _ => (0, 0),
                };
                out.push(Sentence {
                    id: format!("{session}-s{:04}", out.len()),
                    session: session.to_string(),
                    speaker: u.speaker,
                    text: u.text.clone(),
                    label: None,
                    part_labels: u.label.into_iter().collect(),
                    source_ids: vec![u.id],
                    turn_id,
                    position_in_turn,
                });
            }
        }
        prev = Some(u);
    }
    out
}

/// Resolves the labels of fragments merged into one sentence: identical labels
/// stand, neutral yields to change or sustain talk, and change mixed with
/// sustain talk is a conflict.
pub fn resolve_label(parts: &[MiscLabel]) -> Result<MiscLabel> {
    let has = |l| parts.contains(&l);
    match (has(MiscLabel::CT), has(MiscLabel::ST), has(MiscLabel::FN)) {
        (true, true, _) => Err(Error::LabelConflict(format!("{parts:?}"))),
        (true, false, _) => Ok(MiscLabel::CT),
        (false, true, _) => Ok(MiscLabel::ST),
        (false, false, true) => Ok(MiscLabel::FN),
        (false, false, false) => Err(Error::Empty("label parts")),
    }
}

/// Fills `label` from `part_labels` for every sentence that has any.
pub fn resolve_labels(sentences: &mut [Sentence]) -> Result<()> {
    for s in sentences.iter_mut().filter(|s| !s.part_labels.is_empty()) {
        s.label = Some(resolve_label(&s.part_labels).map_err(|e| match e {
            Error::LabelConflict(_) => Error::LabelConflict(s.id.clone()),
            other => other,
        })?);
    }
    Ok(())
}

/// Backchannel removal, sentence merging, and label resolution in one pass.
pub fn reorganize_transcript(transcript: &[Utterance], rule: &BackchannelRule, session: &str) -> Result<Vec<Sentence>> {
    let cleaned = remove_backchannels(transcript, rule);
    let mut sentences = merge_turn_sentences(&cleaned, session);
    resolve_labels(&mut sentences)?;
    Ok(sentences)
}

pub fn read_transcript(path: &Path) -> Result<Vec<Utterance>> {
    #[derive(Deserialize)]
    struct Line {
        id: Option<usize>,
        speaker: Speaker,
        text: String,
        start_time: f64,
        #[serde(default)]
        label: Option<MiscLabel>,
        #[serde(default)]
        is_backchannel: bool,
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<Utterance> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)
            .map_err(|e| Error::format(path.display(), format!("line {}: {e}", n + 1)))?;
        if !(l.start_time >= 0.0) {
            return Err(Error::format(path.display(), format!("line {}: negative start_time", n + 1)));
        }
        if l.label.is_some() && l.speaker != Speaker::Client {
            return Err(Error::format(path.display(), format!("line {}: label on a therapist utterance", n + 1)));
        }
        if let Some(prev) = out.last() {
            if l.start_time < prev.start_time {
                return Err(Error::format(path.display(), format!("line {}: transcript not ordered by start_time", n + 1)));
            }
        }
        out.push(Utterance {
            id: l.id.unwrap_or(out.len()),
            speaker: l.speaker,
            text: l.text,
            start_time: l.start_time,
            label: l.label,
            is_backchannel: l.is_backchannel,
        });
    }
    Ok(out)
}

pub fn write_transcript(path: &Path, transcript: &[Utterance]) -> Result<()> {
    let mut buf = Vec::new();
    for u in transcript {
        serde_json::to_writer(&mut buf, u)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Sentence id -> raw modality -> feature path (relative to the manifest's
/// directory). Context modalities are derived, never listed.
pub type Manifest = BTreeMap<String, BTreeMap<ModalityId, String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub session: String,
    pub label: MiscLabel,
    pub mask: BTreeMap<ModalityId, bool>,
    /// Feature files per available modality. Context modalities may list
    /// several embedding files, which are averaged on load.
    pub features: BTreeMap<ModalityId, Vec<String>>,
}

impl IndexEntry {
    pub fn available(&self, m: ModalityId) -> bool {
        self.mask.get(&m).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub modalities: Vec<ModalityId>,
    pub entries: BTreeMap<String, IndexEntry>,
}

/// Therapist context keeps at most this many tokens, taken from the end of
/// the previous therapist turn (whole sentences, at least one).
pub const THERAPIST_CONTEXT_TOKENS: usize = 128;

/// Builds the index over labeled client sentences.
///
/// `sessions` holds each session's reorganized sentences in order; manifest
/// paths are resolved relative to `base`. Every manifest path of a sentence in
/// these sessions must exist.
pub fn build_dataset_index(sessions: &[Vec<Sentence>], manifest: &Manifest, base: &Path) -> Result<DatasetIndex> {
    let raw = [ModalityId::Text, ModalityId::Audio, ModalityId::Face, ModalityId::Body];
    let path_of = |id: &str, m: ModalityId| -> Result<Option<String>> {
        let Some(p) = manifest.get(id).and_then(|e| e.get(&m)) else {
            return Ok(None);
        };
        if !base.join(p).is_file() {
            return Err(Error::DanglingPath {
                sentence: id.to_string(),
                path: base.join(p),
            });
        }
        Ok(Some(p.clone()))
    };

    let mut entries = BTreeMap::new();
    for sentences in sessions {
        let mut last_therapist_turn: Vec<&Sentence> = Vec::new();
        let mut client_turn: Vec<&Sentence> = Vec::new();
        for (i, s) in sentences.iter().enumerate() {
            for m in raw {
                path_of(&s.id, m)?;
            }
            if s.speaker == Speaker::Therapist {
                if i > 0 && sentences[i - 1].turn_id != s.turn_id {
                    last_therapist_turn.clear();
                }
                last_therapist_turn.push(s);
                continue;
            }
            if client_turn.last().is_some_and(|p| p.turn_id != s.turn_id) {
                client_turn.clear();
            }
            if let Some(label) = s.label {
                let mut features = BTreeMap::new();
                for m in raw {
                    if let Some(p) = path_of(&s.id, m)? {
                        features.insert(m, vec![p]);
                    }
                }
                let client_ctx: Vec<String> = client_turn
                    .iter()
                    .filter_map(|p| path_of(&p.id, ModalityId::Text).transpose())
                    .collect::<Result<_>>()?;
                if !client_ctx.is_empty() {
                    features.insert(ModalityId::ClientContext, client_ctx);
                }
                let mut budget = THERAPIST_CONTEXT_TOKENS;
                let mut therapist_ctx = Vec::new();
                for t in last_therapist_turn.iter().rev() {
                    let n = tokens(&t.text).len();
                    if !therapist_ctx.is_empty() && n > budget {
                        break;
                    }
                    budget = budget.saturating_sub(n);
                    if let Some(p) = path_of(&t.id, ModalityId::Text)? {
                        therapist_ctx.push(p);
                    }
                }
                therapist_ctx.reverse();
                if !therapist_ctx.is_empty() {
                    features.insert(ModalityId::TherapistContext, therapist_ctx);
                }
                let mask = ModalityId::ALL.into_iter().map(|m| (m, features.contains_key(&m))).collect();
                entries.insert(
                    s.id.clone(),
                    IndexEntry {
                        session: s.session.clone(),
                        label,
                        mask,
                        features,
                    },
                );
            }
            client_turn.push(s);
        }
    }
    Ok(DatasetIndex {
        version: 1,
        modalities: ModalityId::ALL.to_vec(),
        entries,
    })
}

impl DatasetIndex {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))
    }

    /// Number of entries with each modality available.
    pub fn availability_counts(&self) -> BTreeMap<ModalityId, usize> {
        ModalityId::ALL
            .into_iter()
            .map(|m| (m, self.entries.values().filter(|e| e.available(m)).count()))
            .collect()
    }
}
