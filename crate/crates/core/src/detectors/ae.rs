//! Autoencoder baseline: the score is the mean squared reconstruction error
//! of a clip's context frames.

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{stack_rows, DetectorError, FeatureNorm};
use crate::dsp::{ae_frames, LogMelSpectrogram};
use crate::nnet::{train, Activation, DenseNet, Loss, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    /// Consecutive frames per input vector.
    pub context: usize,
    pub hidden_units: usize,
    /// Hidden layers on each side of the bottleneck.
    pub hidden_layers: usize,
    pub bottleneck: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Keep every n-th training vector.
    pub frame_stride: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            context: 5,
            hidden_units: 128,
            hidden_layers: 4,
            bottleneck: 8,
            epochs: 100,
            batch_size: 512,
            lr: 1e-3,
            frame_stride: 1,
        }
    }
}

impl AeConfig {
    /// Layer widths: `D -> H x n -> bottleneck -> H x n -> D`.
    pub fn dims(&self, input: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(self.hidden_units, self.hidden_layers));
        dims.push(self.bottleneck);
        dims.extend(std::iter::repeat_n(self.hidden_units, self.hidden_layers));
        dims.push(input);
        dims
    }

    pub fn activations(&self) -> Vec<Activation> {
        let mut acts = vec![Activation::Relu; 2 * self.hidden_layers + 1];
        acts.push(Activation::Linear);
        acts
    }
}

#[derive(Debug, Clone)]
pub struct AeModel {
    pub(crate) net: DenseNet,
    pub(crate) norm: FeatureNorm,
    pub(crate) context: usize,
    pub(crate) train_config: TrainConfig,
    pub(crate) epoch_losses: Vec<f64>,
}

/// Mean over rows of the per-row mean squared reconstruction error.
pub fn reconstruction_score(
    net: &DenseNet,
    vectors: ArrayView2<'_, f64>,
) -> Result<f64, DetectorError> {
    frame_errors(net, vectors)?
        .mean()
        .ok_or_else(|| DetectorError::Invalid("no frames to score".into()))
}

fn frame_errors(
    net: &DenseNet,
    vectors: ArrayView2<'_, f64>,
) -> Result<Array1<f64>, DetectorError> {
    let recon = net.predict(vectors)?;
    let d = vectors.ncols() as f64;
    Ok((&recon - &vectors)
        .rows()
        .into_iter()
        .map(|r| r.dot(&r) / d)
        .collect())
}

pub(crate) fn ae_fit(
    clips: &[&LogMelSpectrogram],
    config: &AeConfig,
    seed: u64,
) -> Result<AeModel, DetectorError> {
    let norm = FeatureNorm::fit(clips.iter().copied())?;
    let vectors: Vec<_> = clips
        .iter()
        .map(|c| ae_frames(&norm.apply(c), config.context).map_err(DetectorError::from))
        .collect::<Result<_, _>>()?;
    let data = stack_rows(vectors.iter(), config.frame_stride)?;
    let mut net = DenseNet::glorot(&config.dims(data.ncols()), &config.activations(), seed)?;
    let train_config = TrainConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        seed: seed.wrapping_add(1),
        shuffle: true,
    };
    log::info!(
        "training AE on {} vectors of dim {} for {} epochs",
        data.nrows(),
        data.ncols(),
        config.epochs
    );
    let report = train(&mut net, data.view(), data.view(), Loss::Mse, &train_config)?;
    Ok(AeModel {
        net,
        norm,
        context: config.context,
        train_config,
        epoch_losses: report.epoch_losses,
    })
}

impl AeModel {
    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    /// Reconstruction error of each context vector of the clip.
    pub fn frame_errors(&self, logmel: &LogMelSpectrogram) -> Result<Array1<f64>, DetectorError> {
        let vectors = ae_frames(&self.norm.apply(logmel), self.context)?;
        frame_errors(&self.net, vectors.view())
    }

    pub fn score(&self, logmel: &LogMelSpectrogram) -> Result<f64, DetectorError> {
        let vectors = ae_frames(&self.norm.apply(logmel), self.context)?;
        reconstruction_score(&self.net, vectors.view())
    }
}
