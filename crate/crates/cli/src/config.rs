//! JSON run configuration. Flags override the file, the file overrides the
//! built-in defaults.

use std::path::Path;

use anyhow::Context;
use asdbench_core::corpus::CorpusConfig;
use asdbench_core::detectors::DetectorConfig;
use asdbench_core::dsp::LogMelParams;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const DEFAULT_P: f64 = 0.1;

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: Option<CorpusConfig>,
    pub detector: Option<DetectorConfig>,
    pub logmel: Option<LogMelParams>,
    pub p: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    pub fn logmel(&self) -> LogMelParams {
        self.logmel.unwrap_or_default()
    }
}

pub fn check_p(p: f64) -> Result<f64, UsageError> {
    if p > 0.0 && p <= 1.0 {
        Ok(p)
    } else {
        Err(UsageError(format!("p must be in (0, 1], got {p}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: FileConfig =
            serde_json::from_str(r#"{"detector": {"kind": "knn", "knn": {"k": 3}}}"#).unwrap();
        let det = cfg.detector.unwrap();
        assert_eq!(det.knn.k, 3);
        assert_eq!(det.knn.frame_stride, 8);
        assert_eq!(det.ae, Default::default());
        assert!(cfg.corpus.is_none());
    }

    #[test]
    fn unknown_sections_are_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"detectr": {}}"#).is_err());
    }

    #[test]
    fn p_range() {
        assert!(check_p(0.1).is_ok());
        assert!(check_p(1.0).is_ok());
        assert!(check_p(0.0).is_err());
        assert!(check_p(1.5).is_err());
        assert!(check_p(f64::NAN).is_err());
    }
}
