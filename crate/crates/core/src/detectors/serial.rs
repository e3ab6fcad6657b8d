//! Serial hybrid: inlier models fitted on the embeddings of a frozen
//! section classifier, one model per domain.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{gmm_fit, mean_knn_distance, stack_rows, DetectorError, GmmConfig, GmmModel, OeModel};
use crate::corpus::Domain;
use crate::dsp::LogMelSpectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImKind {
    Gmm,
    Knn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SerialConfig {
    pub source_im: ImKind,
    pub target_im: ImKind,
    pub gmm: GmmConfig,
    pub knn_k: usize,
}

impl Default for SerialConfig {
    fn default() -> Self {
        Self {
            source_im: ImKind::Gmm,
            target_im: ImKind::Knn,
            gmm: GmmConfig {
                components: 2,
                frame_stride: 1,
                ..GmmConfig::default()
            },
            knn_k: 1,
        }
    }
}

/// An inlier model over embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum ImModel {
    Gmm(GmmModel),
    Knn { k: usize, bank: Array2<f64> },
}

impl ImModel {
    pub fn kind(&self) -> ImKind {
        match self {
            ImModel::Gmm(_) => ImKind::Gmm,
            ImModel::Knn { .. } => ImKind::Knn,
        }
    }

    pub fn score(&self, vectors: ArrayView2<'_, f64>) -> Result<f64, DetectorError> {
        match self {
            ImModel::Gmm(m) => m.score(vectors),
            ImModel::Knn { k, bank } => mean_knn_distance(bank.view(), vectors, *k),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SerialModel {
    pub(crate) oe: OeModel,
    pub(crate) im: BTreeMap<Domain, ImModel>,
}

impl SerialModel {
    pub fn extractor(&self) -> &OeModel {
        &self.oe
    }

    pub fn models(&self) -> &BTreeMap<Domain, ImModel> {
        &self.im
    }

    /// Scores with the hinted domain's model, else the minimum over domains.
    pub fn score(
        &self,
        logmel: &LogMelSpectrogram,
        hint: Option<Domain>,
    ) -> Result<f64, DetectorError> {
        let emb = self.oe.embed(logmel)?;
        if let Some(m) = hint.and_then(|d| self.im.get(&d)) {
            return m.score(emb.view());
        }
        let mut best = f64::INFINITY;
        for m in self.im.values() {
            best = best.min(m.score(emb.view())?);
        }
        Ok(best)
    }
}

fn fit_im(
    kind: ImKind,
    vectors: Array2<f64>,
    config: &SerialConfig,
    seed: u64,
) -> Result<ImModel, DetectorError> {
    match kind {
        ImKind::Gmm if vectors.nrows() >= config.gmm.components => Ok(ImModel::Gmm(
            gmm_fit(vectors.view(), &config.gmm, seed)?.model,
        )),
        ImKind::Gmm => {
            log::warn!(
                "{} embedding vectors cannot support a {}-component GMM; using kNN",
                vectors.nrows(),
                config.gmm.components
            );
            fit_im(ImKind::Knn, vectors, config, seed)
        }
        ImKind::Knn => {
            if vectors.nrows() < config.knn_k {
                return Err(DetectorError::InsufficientData(format!(
                    "{} embedding vectors for k = {}",
                    vectors.nrows(),
                    config.knn_k
                )));
            }
            Ok(ImModel::Knn {
                k: config.knn_k,
                bank: vectors,
            })
        }
    }
}

/// Fits per-domain inlier models on the embeddings of `oe`, which is moved
/// in unchanged.
pub fn serial_fit(
    oe: OeModel,
    clips_by_domain: &BTreeMap<Domain, Vec<&LogMelSpectrogram>>,
    config: &SerialConfig,
    seed: u64,
) -> Result<SerialModel, DetectorError> {
    let mut im = BTreeMap::new();
    for (&domain, clips) in clips_by_domain {
        if clips.is_empty() {
            continue;
        }
        let embs: Vec<_> = clips
            .iter()
            .map(|c| oe.embed(c))
            .collect::<Result<_, _>>()?;
        let vectors = stack_rows(embs.iter(), 1)?;
        let kind = match domain {
            Domain::Source => config.source_im,
            Domain::Target => config.target_im,
        };
        log::info!(
            "serial: {domain} {kind:?} on {} embedding vectors",
            vectors.nrows()
        );
        im.insert(domain, fit_im(kind, vectors, config, seed ^ domain as u64)?);
    }
    if im.is_empty() {
        return Err(DetectorError::InsufficientData(
            "no clips for the serial hybrid".into(),
        ));
    }
    Ok(SerialModel { oe, im })
}
