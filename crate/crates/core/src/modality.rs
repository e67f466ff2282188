use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Input modalities in their fixed canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityId {
    Text,
    ClientContext,
    TherapistContext,
    Audio,
    Face,
    Body,
}

impl ModalityId {
    pub const ALL: [ModalityId; 6] = [
        ModalityId::Text,
        ModalityId::ClientContext,
        ModalityId::TherapistContext,
        ModalityId::Audio,
        ModalityId::Face,
        ModalityId::Body,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityId::Text => "text",
            ModalityId::ClientContext => "client_context",
            ModalityId::TherapistContext => "therapist_context",
            ModalityId::Audio => "audio",
            ModalityId::Face => "face",
            ModalityId::Body => "body",
        }
    }

    /// Whether the modality is a time series (face, body) rather than a
    /// precomputed embedding vector.
    pub fn is_sequence(self) -> bool {
        matches!(self, ModalityId::Face | ModalityId::Body)
    }

    /// Parses a comma-separated list into canonical order without duplicates.
    pub fn parse_list(list: &str) -> Result<Vec<ModalityId>, Error> {
        let mut out = Vec::new();
        for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let m: ModalityId = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out.sort();
        if out.is_empty() {
            return Err(Error::Parameter("empty modality list".into()));
        }
        Ok(out)
    }

    pub fn join(list: &[ModalityId]) -> String {
        list.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModalityId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown modality `{s}`")))
    }
}
