//! Dataset model: clip metadata and path conventions, WAV I/O, SNR mixing,
//! the seeded synthetic machine-sound generator and dataset scanning.
//!
//! A development-style tree looks like
//!
//! ```text
//! <root>/manifest.csv
//! <root>/<machine>/section_<NN>_<domain>_<split>_<condition>_<IIII>.wav
//! ```
//!
//! Evaluation-style trees drop the condition token from test clip names.

mod audio;
mod index;
mod meta;
mod synth;

pub use audio::{load_clip, mix_at_snr, rms, write_clip, AudioClip, MixOutput};
pub use index::{scan_dataset, CellKey, DatasetIndex, IndexEntry, ScanReport, MANIFEST_FILE};
pub use meta::{format_clip_path, parse_clip_path, ClipMeta, Condition, Domain, Split};
pub use synth::{
    default_machine_names, section_spec, synth_clip, synth_corpus, CorpusConfig, DomainShift,
    DomainSpec, NoiseColor,
};

use std::path::PathBuf;

/// Sampling rate of every clip handled by the toolkit.
pub const SAMPLE_RATE: u32 = 16_000;
/// Clip duration in seconds.
pub const CLIP_SECONDS: u32 = 10;
/// Samples per clip.
pub const CLIP_LEN: usize = (SAMPLE_RATE * CLIP_SECONDS) as usize;
/// Highest valid section index.
pub const MAX_SECTION: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("malformed clip path `{path}`: bad {token}")]
    Parse { path: String, token: String },
    #[error("{path}: sample rate {found} Hz, expected {expected} Hz")]
    SampleRate {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("output directory {0} is not empty (pass force to overwrite)")]
    OutputExists(PathBuf),
    #[error("no conformant clips found under {0}")]
    EmptyDataset(PathBuf),
    #[error("duplicate clip {0}")]
    Duplicate(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

impl CorpusError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.into(),
            source,
        }
    }
}
