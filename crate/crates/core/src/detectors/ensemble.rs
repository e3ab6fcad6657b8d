//! Parallel hybrid: the mean of member scores after z-scoring each member
//! against its own scores on the source-domain training normals.

use serde::{Deserialize, Serialize};

use super::{fit_kind, DetectorConfig, DetectorError, FittedModel, ScoreContext, TrainSet};
use crate::corpus::Domain;
use crate::dsp::LogMelSpectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mean: f64,
    pub std: f64,
}

impl Calibration {
    /// Mean and sample standard deviation.
    pub fn from_scores(scores: &[f64]) -> Option<Self> {
        if scores.len() < 2 {
            return None;
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn z(&self, score: f64) -> f64 {
        (score - self.mean) / self.std
    }
}

/// Mean of z-scores, one per member.
pub fn z_score_mean(scores: &[f64], calibrations: &[Calibration]) -> Result<f64, DetectorError> {
    if scores.is_empty() || scores.len() != calibrations.len() {
        return Err(DetectorError::Invalid(format!(
            "{} scores for {} calibrations",
            scores.len(),
            calibrations.len()
        )));
    }
    Ok(scores
        .iter()
        .zip(calibrations)
        .map(|(&s, c)| c.z(s))
        .sum::<f64>()
        / scores.len() as f64)
}

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub model: FittedModel,
    pub calibration: Calibration,
}

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub(crate) members: Vec<EnsembleMember>,
}

impl EnsembleModel {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self, DetectorError> {
        if members.is_empty() {
            return Err(DetectorError::InsufficientData(
                "ensemble has no usable members".into(),
            ));
        }
        if members.iter().any(|m| !(m.calibration.std > 0.0)) {
            return Err(DetectorError::Invalid(
                "member calibration std must be > 0".into(),
            ));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn member_scores(
        &self,
        logmel: &LogMelSpectrogram,
        ctx: &ScoreContext,
    ) -> Result<Vec<f64>, DetectorError> {
        self.members
            .iter()
            .map(|m| m.model.score(logmel, ctx))
            .collect()
    }

    pub fn score(
        &self,
        logmel: &LogMelSpectrogram,
        ctx: &ScoreContext,
    ) -> Result<f64, DetectorError> {
        let scores = self.member_scores(logmel, ctx)?;
        let cals: Vec<_> = self.members.iter().map(|m| m.calibration).collect();
        z_score_mean(&scores, &cals)
    }
}

pub(crate) fn ensemble_fit(
    set: &TrainSet<'_>,
    config: &DetectorConfig,
) -> Result<EnsembleModel, DetectorError> {
    let mut members = Vec::new();
    for (i, &kind) in config.members.iter().enumerate() {
        let member_cfg = DetectorConfig {
            kind,
            seed: super::sub_seed(config.seed, 100 + i as u64),
            ..config.clone()
        };
        let model = match fit_kind(kind, set, &member_cfg) {
            Ok(m) => m,
            Err(e @ DetectorError::OeNotApplicable { .. }) => {
                log::warn!("dropping ensemble member {kind}: {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let scores: Vec<f64> = set
            .source
            .iter()
            .map(|c| {
                model.score(
                    &c.logmel,
                    &ScoreContext {
                        section: c.meta.section,
                        domain_hint: Some(Domain::Source),
                    },
                )
            })
            .collect::<Result<_, _>>()?;
        match Calibration::from_scores(&scores) {
            Some(cal) if cal.std > 0.0 && cal.std.is_finite() => {
                log::info!(
                    "ensemble member {kind}: mean {:.4}, std {:.4}",
                    cal.mean,
                    cal.std
                );
                members.push(EnsembleMember {
                    model,
                    calibration: cal,
                });
            }
            _ => log::warn!("dropping ensemble member {kind}: degenerate calibration scores"),
        }
    }
    EnsembleModel::new(members).map_err(|e| match e {
        DetectorError::InsufficientData(_) => DetectorError::InsufficientData(format!(
            "all ensemble members of {} were dropped",
            set.machine
        )),
        other => other,
    })
}
