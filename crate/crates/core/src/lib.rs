//! Crossmodal emotion embedding training.
//!
//! Modality-specific recurrent encoders project audio and video features into
//! a shared embedding space. A shared head predicts emotion from either
//! modality's embeddings. Training combines the target modality's loss, the
//! auxiliary modality's loss and a crossmodal batch-hard triplet loss, so that
//! at inference time only the target modality's encoder is needed.

pub mod dataio;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numkit;
pub mod postprocess;
pub mod training;
pub mod triplet;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Input signal family with its own encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Audio => Modality::Video,
            Modality::Video => Modality::Audio,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            other => Err(Error::Usage(format!("unknown modality `{other}`"))),
        }
    }
}
