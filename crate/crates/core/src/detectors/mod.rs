//! Anomaly scorers: autoencoder and section-classifier baselines, inlier
//! models (GMM, kNN), the parallel OE+IM ensemble and the serial
//! embedding+IM hybrid, with optional per-domain adaptation.
//!
//! Every scorer is fitted on the normal training clips of one machine type
//! and maps a clip's log-mel spectrogram to a real score, larger meaning
//! more anomalous.

mod ae;
mod ensemble;
mod gmm;
mod knn;
mod oe;
mod persist;
mod serial;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{ClipMeta, Condition, Domain, Split};
use crate::dsp::{DspError, LogMelSpectrogram};
use crate::nnet::NnetError;

pub use ae::{reconstruction_score, AeConfig, AeModel};
pub use ensemble::{z_score_mean, Calibration, EnsembleMember, EnsembleModel};
pub use gmm::{gmm_fit, GmmConfig, GmmFit, GmmModel};
pub use knn::{mean_knn_distance, KnnBank, KnnConfig};
pub use oe::{negative_logit_score, OeConfig, OeModel};
pub use persist::{load_scorer, save_scorer, SCORER_FILE};
pub use serial::{serial_fit, ImKind, ImModel, SerialConfig, SerialModel};

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("scorer has not been fitted")]
    NotFitted,
    #[error("OE not applicable to {machine}: needs at least 2 sections, found {sections}")]
    OeNotApplicable { machine: String, sections: usize },
    #[error("section {0} was not seen during training")]
    UnknownSection(u8),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite score {score} for {what}")]
    NonFinite { what: String, score: f64 },
    #[error("model file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Ae,
    Oe,
    Gmm,
    Knn,
    Serial,
    Ensemble,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 6] = [
        DetectorKind::Ae,
        DetectorKind::Oe,
        DetectorKind::Gmm,
        DetectorKind::Knn,
        DetectorKind::Serial,
        DetectorKind::Ensemble,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::Ae => "ae",
            DetectorKind::Oe => "oe",
            DetectorKind::Gmm => "gmm",
            DetectorKind::Knn => "knn",
            DetectorKind::Serial => "serial",
            DetectorKind::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DetectorKind {
    type Err = DetectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DetectorError::Invalid(format!("unknown detector kind `{s}`")))
    }
}

/// Everything needed to fit any scorer. Fields irrelevant to `kind` are
/// ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// Use the target-domain training clips: pooled into AE/OE/GMM training,
    /// or as separate per-domain models for kNN and the serial hybrid.
    pub adapt: bool,
    pub ae: AeConfig,
    pub oe: OeConfig,
    pub gmm: GmmConfig,
    pub knn: KnnConfig,
    pub serial: SerialConfig,
    /// Ensemble members, in order.
    pub members: Vec<DetectorKind>,
    /// Cap on source-domain training clips per section (lowest ids first).
    pub max_train_clips_per_section: Option<usize>,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kind: DetectorKind::Gmm,
            adapt: false,
            ae: AeConfig::default(),
            oe: OeConfig::default(),
            gmm: GmmConfig::default(),
            knn: KnnConfig::default(),
            serial: SerialConfig::default(),
            members: vec![DetectorKind::Oe, DetectorKind::Gmm],
            max_train_clips_per_section: None,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn new(kind: DetectorKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.kind == DetectorKind::Ensemble {
            if self.members.is_empty() {
                return Err(DetectorError::Invalid(
                    "ensemble needs at least one member".into(),
                ));
            }
            if self.members.contains(&DetectorKind::Ensemble) {
                return Err(DetectorError::Invalid("ensembles cannot be nested".into()));
            }
        }
        if self.max_train_clips_per_section == Some(0) {
            return Err(DetectorError::Invalid(
                "max_train_clips_per_section must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A normal training clip with its features.
#[derive(Debug, Clone)]
pub struct TrainClip {
    pub meta: ClipMeta,
    pub logmel: LogMelSpectrogram,
}

/// What a scorer may know about a test clip besides its audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreContext {
    pub section: u8,
    /// Domain to score against when per-domain models exist; `None` takes
    /// the minimum over domains.
    pub domain_hint: Option<Domain>,
}

impl ScoreContext {
    /// The domain is passed on only when the scorer was fitted per domain.
    pub fn for_clip(meta: &ClipMeta, adapt: bool) -> Self {
        Self {
            section: meta.section,
            domain_hint: adapt.then_some(meta.domain),
        }
    }
}

/// Affine standardization of log-mel values with one mean and one scale
/// shared by all bands, so relative band energies are preserved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: f64,
    pub std: f64,
}

impl FeatureNorm {
    pub fn fit<'a>(
        specs: impl IntoIterator<Item = &'a LogMelSpectrogram>,
    ) -> Result<Self, DetectorError> {
        let (mut sum, mut sum2, mut n) = (0.0, 0.0, 0usize);
        for spec in specs {
            for &x in spec.values() {
                sum += x;
                sum2 += x * x;
            }
            n += spec.values().len();
        }
        if n == 0 {
            return Err(DetectorError::InsufficientData(
                "no frames for normalization".into(),
            ));
        }
        let mean = sum / n as f64;
        let std = (sum2 / n as f64 - mean * mean).max(0.0).sqrt();
        Ok(Self {
            mean,
            std: if std < 1e-6 { 1.0 } else { std },
        })
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.mean.is_finite() && self.std > 0.0 && self.std.is_finite()) {
            return Err(DetectorError::Invalid(format!(
                "normalization mean {} std {}",
                self.mean, self.std
            )));
        }
        Ok(())
    }

    pub fn apply(&self, spec: &LogMelSpectrogram) -> LogMelSpectrogram {
        LogMelSpectrogram::new(spec.values().mapv(|x| (x - self.mean) / self.std))
    }
}

/// Derives an independent sub-seed (splitmix64 finalizer).
pub(crate) fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stacks every `stride`-th row of each matrix.
pub(crate) fn stack_rows<'a>(
    mats: impl IntoIterator<Item = &'a Array2<f64>>,
    stride: usize,
) -> Result<Array2<f64>, DetectorError> {
    let views: Vec<_> = mats
        .into_iter()
        .map(|m| m.slice(ndarray::s![..;stride.max(1), ..]))
        .collect();
    if views.is_empty() {
        return Err(DetectorError::InsufficientData("no feature rows".into()));
    }
    ndarray::concatenate(Axis(0), &views)
        .map_err(|e| DetectorError::Dimension(format!("cannot stack features: {e}")))
}

/// A fitted model of any kind.
#[derive(Debug, Clone)]
pub enum FittedModel {
    Ae(AeModel),
    Oe(OeModel),
    Gmm(GmmModel),
    Knn(KnnBank),
    Serial(SerialModel),
    Ensemble(EnsembleModel),
}

impl FittedModel {
    pub fn kind(&self) -> DetectorKind {
        match self {
            FittedModel::Ae(_) => DetectorKind::Ae,
            FittedModel::Oe(_) => DetectorKind::Oe,
            FittedModel::Gmm(_) => DetectorKind::Gmm,
            FittedModel::Knn(_) => DetectorKind::Knn,
            FittedModel::Serial(_) => DetectorKind::Serial,
            FittedModel::Ensemble(_) => DetectorKind::Ensemble,
        }
    }

    pub fn score(
        &self,
        logmel: &LogMelSpectrogram,
        ctx: &ScoreContext,
    ) -> Result<f64, DetectorError> {
        match self {
            FittedModel::Ae(m) => m.score(logmel),
            FittedModel::Oe(m) => m.score(logmel, ctx.section),
            FittedModel::Gmm(m) => m.score(logmel.values().view()),
            FittedModel::Knn(b) => b.score(logmel.values().view(), ctx.domain_hint),
            FittedModel::Serial(m) => m.score(logmel, ctx.domain_hint),
            FittedModel::Ensemble(m) => m.score(logmel, ctx),
        }
    }

    /// Per-epoch training losses of every network inside the model, labelled
    /// by their position (`ae`, `serial/oe`, `ensemble/0/oe`, ...). Empty for
    /// models without networks and for models loaded from disk.
    pub fn epoch_losses(&self) -> Vec<(String, Vec<f64>)> {
        match self {
            FittedModel::Ae(m) => vec![("ae".into(), m.epoch_losses().to_vec())],
            FittedModel::Oe(m) => vec![("oe".into(), m.epoch_losses().to_vec())],
            FittedModel::Gmm(_) | FittedModel::Knn(_) => Vec::new(),
            FittedModel::Serial(m) => {
                vec![("serial/oe".into(), m.extractor().epoch_losses().to_vec())]
            }
            FittedModel::Ensemble(m) => m
                .members()
                .iter()
                .enumerate()
                .flat_map(|(i, member)| {
                    member
                        .model
                        .epoch_losses()
                        .into_iter()
                        .map(move |(name, losses)| (format!("ensemble/{i}/{name}"), losses))
                })
                .collect(),
        }
    }
}

/// The clips a scorer trains on, split by domain.
pub(crate) struct TrainSet<'a> {
    pub machine: String,
    pub source: Vec<&'a TrainClip>,
    pub target: Vec<&'a TrainClip>,
}

impl<'a> TrainSet<'a> {
    /// Source clips, plus target clips when `adapt` is set.
    pub fn pooled(&self, adapt: bool) -> Vec<&'a TrainClip> {
        let mut out = self.source.clone();
        if adapt {
            out.extend(self.target.iter().copied());
        }
        out
    }

    pub fn sections(&self) -> Vec<u8> {
        let mut s: Vec<u8> = self.source.iter().map(|c| c.meta.section).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

pub(crate) fn fit_kind(
    kind: DetectorKind,
    set: &TrainSet<'_>,
    config: &DetectorConfig,
) -> Result<FittedModel, DetectorError> {
    let seed = config.seed;
    let adapt = config.adapt;
    Ok(match kind {
        DetectorKind::Ae => {
            let clips: Vec<_> = set.pooled(adapt).iter().map(|c| &c.logmel).collect();
            FittedModel::Ae(ae::ae_fit(&clips, &config.ae, sub_seed(seed, 1))?)
        }
        DetectorKind::Oe => FittedModel::Oe(fit_oe(set, config, adapt)?),
        DetectorKind::Gmm => {
            let clips = set.pooled(adapt);
            let frames = stack_rows(
                clips.iter().map(|c| c.logmel.values()),
                config.gmm.frame_stride,
            )?;
            let fit = gmm_fit(frames.view(), &config.gmm, sub_seed(seed, 3))?;
            log::info!(
                "{}: GMM K={} fitted on {} frames in {} iterations",
                set.machine,
                config.gmm.components,
                frames.nrows(),
                fit.log_likelihoods.len()
            );
            FittedModel::Gmm(fit.model)
        }
        DetectorKind::Knn => {
            let stride = config.knn.frame_stride;
            let mut banks = BTreeMap::new();
            banks.insert(
                Domain::Source,
                stack_rows(set.source.iter().map(|c| c.logmel.values()), stride)?,
            );
            if adapt && !set.target.is_empty() {
                banks.insert(
                    Domain::Target,
                    stack_rows(set.target.iter().map(|c| c.logmel.values()), stride)?,
                );
            }
            FittedModel::Knn(KnnBank::new(config.knn.k, banks)?)
        }
        DetectorKind::Serial => {
            // The feature extractor never sees target data.
            let oe = fit_oe(set, config, false)?;
            let mut by_domain = BTreeMap::new();
            by_domain.insert(
                Domain::Source,
                set.source.iter().map(|c| &c.logmel).collect::<Vec<_>>(),
            );
            if adapt && !set.target.is_empty() {
                by_domain.insert(
                    Domain::Target,
                    set.target.iter().map(|c| &c.logmel).collect(),
                );
            }
            FittedModel::Serial(serial_fit(
                oe,
                &by_domain,
                &config.serial,
                sub_seed(seed, 5),
            )?)
        }
        DetectorKind::Ensemble => FittedModel::Ensemble(ensemble::ensemble_fit(set, config)?),
    })
}

fn fit_oe(
    set: &TrainSet<'_>,
    config: &DetectorConfig,
    adapt: bool,
) -> Result<OeModel, DetectorError> {
    let sections = set.sections();
    if sections.len() < 2 {
        return Err(DetectorError::OeNotApplicable {
            machine: set.machine.clone(),
            sections: sections.len(),
        });
    }
    let clips: Vec<_> = set
        .pooled(adapt)
        .iter()
        .map(|c| (&c.logmel, c.meta.section))
        .collect();
    oe::oe_fit(&clips, &config.oe, sub_seed(config.seed, 2))
}

/// An anomaly scorer for one machine type.
///
/// `fit` mutates the scorer; `score` on a fitted scorer only reads it and
/// may be called from many threads at once.
#[derive(Debug, Clone)]
pub struct Scorer {
    machine_type: String,
    config: DetectorConfig,
    model: Option<FittedModel>,
}

impl Scorer {
    pub fn new(machine_type: impl Into<String>, config: DetectorConfig) -> Self {
        Self {
            machine_type: machine_type.into(),
            config,
            model: None,
        }
    }

    pub fn from_model(
        machine_type: impl Into<String>,
        config: DetectorConfig,
        model: FittedModel,
    ) -> Result<Self, DetectorError> {
        if model.kind() != config.kind {
            return Err(DetectorError::Invalid(format!(
                "{} model under a {} config",
                model.kind(),
                config.kind
            )));
        }
        Ok(Self {
            machine_type: machine_type.into(),
            config,
            model: Some(model),
        })
    }

    pub fn kind(&self) -> DetectorKind {
        self.config.kind
    }

    pub fn machine_type(&self) -> &str {
        &self.machine_type
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn is_fitted(&self) -> bool {
        self.model.is_some()
    }

    pub fn model(&self) -> Option<&FittedModel> {
        self.model.as_ref()
    }

    /// Fits on the normal training clips of this scorer's machine type;
    /// other clips in `clips` are ignored.
    pub fn fit(&mut self, clips: &[TrainClip]) -> Result<(), DetectorError> {
        self.config.validate()?;
        let mut source: Vec<&TrainClip> = Vec::new();
        let mut target: Vec<&TrainClip> = Vec::new();
        for c in clips {
            let m = &c.meta;
            if m.machine_type != self.machine_type
                || m.split != Split::Train
                || m.condition != Condition::Normal
            {
                continue;
            }
            match m.domain {
                Domain::Source => source.push(c),
                Domain::Target => target.push(c),
            }
        }
        if let Some(cap) = self.config.max_train_clips_per_section {
            source.sort_by_key(|c| (c.meta.section, c.meta.clip_id));
            let mut per_section: BTreeMap<u8, usize> = BTreeMap::new();
            source.retain(|c| {
                let n = per_section.entry(c.meta.section).or_insert(0);
                *n += 1;
                *n <= cap
            });
        }
        if source.is_empty() {
            return Err(DetectorError::InsufficientData(format!(
                "no source-domain normal training clips for {}",
                self.machine_type
            )));
        }
        let set = TrainSet {
            machine: self.machine_type.clone(),
            source,
            target,
        };
        log::info!(
            "fitting {} for {} on {} source + {} target clips (adapt={})",
            self.config.kind,
            self.machine_type,
            set.source.len(),
            set.target.len(),
            self.config.adapt
        );
        self.model = Some(fit_kind(self.config.kind, &set, &self.config)?);
        Ok(())
    }

    pub fn score(
        &self,
        logmel: &LogMelSpectrogram,
        ctx: &ScoreContext,
    ) -> Result<f64, DetectorError> {
        let model = self.model.as_ref().ok_or(DetectorError::NotFitted)?;
        let score = model.score(logmel, ctx)?;
        if !score.is_finite() {
            return Err(DetectorError::NonFinite {
                what: format!("{} clip of section {:02}", self.machine_type, ctx.section),
                score,
            });
        }
        Ok(score)
    }
}
