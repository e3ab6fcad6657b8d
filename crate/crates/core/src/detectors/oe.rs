//! Section-classifier baseline. A softmax classifier learns to tell the
//! sections of one machine type apart from context-window images; a clip
//! scores high when the classifier doubts it belongs to its own section.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{stack_rows, DetectorError, FeatureNorm};
use crate::dsp::{frame_windows, FeatureWindows, LogMelSpectrogram};
use crate::nnet::{train, Activation, DenseNet, Loss, TrainConfig};

const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OeConfig {
    /// Frames per context-window image (`P`).
    pub frames_per_image: usize,
    /// Hop between image starts (`L`).
    pub shift: usize,
    /// Hidden widths; the last one is the embedding size.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Keep every n-th training window.
    pub window_stride: usize,
}

impl Default for OeConfig {
    fn default() -> Self {
        Self {
            frames_per_image: 64,
            shift: 8,
            hidden: vec![640, 128],
            epochs: 20,
            batch_size: 32,
            lr: 1e-5,
            window_stride: 1,
        }
    }
}

/// Averaged negative logit of the correct-class probabilities:
/// `(1/B) sum_b ln((1 - p_b) / p_b)`, each `p_b` clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn negative_logit_score(probs: &[f64]) -> Result<f64, DetectorError> {
    if probs.is_empty() {
        return Err(DetectorError::Invalid("no windows to score".into()));
    }
    let total: f64 = probs
        .iter()
        .map(|&p| {
            let p = if p.is_nan() {
                P_CLAMP
            } else {
                p.clamp(P_CLAMP, 1.0 - P_CLAMP)
            };
            ((1.0 - p) / p).ln()
        })
        .sum();
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone)]
pub struct OeModel {
    pub(crate) net: DenseNet,
    pub(crate) norm: FeatureNorm,
    /// Section id of each output class.
    pub(crate) sections: Vec<u8>,
    pub(crate) frames_per_image: usize,
    pub(crate) shift: usize,
    pub(crate) train_config: TrainConfig,
    pub(crate) epoch_losses: Vec<f64>,
}

/// Trains the classifier on `(clip, section)` pairs.
pub(crate) fn oe_fit(
    clips: &[(&LogMelSpectrogram, u8)],
    config: &OeConfig,
    seed: u64,
) -> Result<OeModel, DetectorError> {
    let mut sections: Vec<u8> = clips.iter().map(|(_, s)| *s).collect();
    sections.sort_unstable();
    sections.dedup();
    if sections.len() < 2 {
        return Err(DetectorError::OeNotApplicable {
            machine: String::from("(unnamed)"),
            sections: sections.len(),
        });
    }
    let norm = FeatureNorm::fit(clips.iter().map(|(c, _)| *c))?;
    let mut images = Vec::with_capacity(clips.len());
    let mut labels: Vec<usize> = Vec::new();
    for (clip, section) in clips {
        let w = frame_windows(&norm.apply(clip), config.frames_per_image, config.shift)?;
        let kept = w.count().div_ceil(config.window_stride.max(1));
        let class = sections
            .binary_search(section)
            .expect("section collected above");
        labels.extend(std::iter::repeat_n(class, kept));
        images.push(w.images);
    }
    let data = stack_rows(images.iter(), config.window_stride)?;
    drop(images);
    debug_assert_eq!(data.nrows(), labels.len());
    let mut targets = Array2::zeros((labels.len(), sections.len()));
    for (row, &class) in labels.iter().enumerate() {
        targets[[row, class]] = 1.0;
    }

    let mut dims = vec![data.ncols()];
    dims.extend(&config.hidden);
    dims.push(sections.len());
    let mut acts = vec![Activation::Relu; config.hidden.len()];
    acts.push(Activation::Softmax);
    let mut net = DenseNet::glorot(&dims, &acts, seed)?;
    let train_config = TrainConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        seed: seed.wrapping_add(1),
        shuffle: true,
    };
    log::info!(
        "training section classifier on {} windows ({} sections) for {} epochs",
        data.nrows(),
        sections.len(),
        config.epochs
    );
    let report = train(
        &mut net,
        data.view(),
        targets.view(),
        Loss::CrossEntropy,
        &train_config,
    )?;
    Ok(OeModel {
        net,
        norm,
        sections,
        frames_per_image: config.frames_per_image,
        shift: config.shift,
        train_config,
        epoch_losses: report.epoch_losses,
    })
}

impl OeModel {
    pub fn sections(&self) -> &[u8] {
        &self.sections
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    /// Normalized context-window images of a clip.
    pub fn windows(&self, logmel: &LogMelSpectrogram) -> Result<FeatureWindows, DetectorError> {
        Ok(frame_windows(
            &self.norm.apply(logmel),
            self.frames_per_image,
            self.shift,
        )?)
    }

    /// Class probabilities, one row per window.
    pub fn probabilities(&self, logmel: &LogMelSpectrogram) -> Result<Array2<f64>, DetectorError> {
        Ok(self.net.predict(self.windows(logmel)?.images.view())?)
    }

    /// Most probable section for each window.
    pub fn predict_sections(&self, logmel: &LogMelSpectrogram) -> Result<Vec<u8>, DetectorError> {
        let probs = self.probabilities(logmel)?;
        Ok(probs
            .rows()
            .into_iter()
            .map(|r| {
                let best = r
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &p)| if p > r[b] { i } else { b });
                self.sections[best]
            })
            .collect())
    }

    pub fn score(&self, logmel: &LogMelSpectrogram, section: u8) -> Result<f64, DetectorError> {
        let class = self
            .sections
            .binary_search(&section)
            .map_err(|_| DetectorError::UnknownSection(section))?;
        let probs = self.probabilities(logmel)?;
        negative_logit_score(&probs.column(class).to_vec())
    }

    /// Penultimate-layer activations for already-normalized images.
    pub fn embed_images(&self, images: ArrayView2<'_, f64>) -> Result<Array2<f64>, DetectorError> {
        let depth = self.net.layers().len() - 1;
        if depth == 0 {
            return Err(DetectorError::Invalid(
                "classifier has no hidden layer".into(),
            ));
        }
        let mut outs = self.net.forward_layers(images, depth)?;
        Ok(outs.pop().expect("depth >= 1"))
    }

    /// Embedding of each window of a clip.
    pub fn embed(&self, logmel: &LogMelSpectrogram) -> Result<Array2<f64>, DetectorError> {
        self.embed_images(self.windows(logmel)?.images.view())
    }

    /// Mean embedding over a set of clips (used by diagnostics and tests).
    pub fn mean_embedding(
        &self,
        clips: &[&LogMelSpectrogram],
    ) -> Result<ndarray::Array1<f64>, DetectorError> {
        let embs: Vec<_> = clips
            .iter()
            .map(|c| self.embed(c))
            .collect::<Result<_, _>>()?;
        let all = stack_rows(embs.iter(), 1)?;
        Ok(all.mean_axis(Axis(0)).expect("non-empty"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Condition, Domain};
    use crate::detectors::test_util::logmel;

    #[test]
    fn negative_logit_examples() {
        assert_eq!(negative_logit_score(&[0.5]).unwrap(), 0.0);
        assert!((negative_logit_score(&[0.1]).unwrap() - 9f64.ln()).abs() < 1e-12);
        assert!((negative_logit_score(&[0.1]).unwrap() - 2.19722).abs() < 1e-5);
        let two = negative_logit_score(&[0.5, 0.1]).unwrap();
        assert!((two - 9f64.ln() / 2.0).abs() < 1e-12);
        assert!((two - 1.09861).abs() < 1e-5);
        // Order does not matter.
        assert_eq!(
            negative_logit_score(&[0.2, 0.7, 0.4]).unwrap(),
            negative_logit_score(&[0.4, 0.2, 0.7]).unwrap()
        );
        // Clamped at both ends.
        let hi = negative_logit_score(&[0.0]).unwrap();
        assert!((hi - ((1.0 - 1e-12) / 1e-12f64).ln()).abs() < 1e-9);
        assert!(negative_logit_score(&[1.0]).unwrap().is_finite());
        assert!(negative_logit_score(&[]).is_err());
    }

    fn fit_three_sections(identical: bool) -> (OeModel, Vec<Vec<LogMelSpectrogram>>) {
        let per = 6;
        let clips: Vec<Vec<LogMelSpectrogram>> = (0..3u8)
            .map(|s| {
                let src = if identical { 0 } else { s };
                (0..per)
                    .map(|i| logmel(src, Domain::Source, Condition::Normal, 31 * s as u64 + i))
                    .collect()
            })
            .collect();
        let pairs: Vec<_> = clips
            .iter()
            .enumerate()
            .flat_map(|(s, v)| v.iter().take(per as usize - 2).map(move |c| (c, s as u8)))
            .collect();
        let cfg = OeConfig {
            epochs: 10,
            ..OeConfig::default()
        };
        (oe_fit(&pairs, &cfg, 11).unwrap(), clips)
    }

    fn held_out_accuracy(model: &OeModel, clips: &[Vec<LogMelSpectrogram>]) -> f64 {
        let (mut hit, mut total) = (0, 0);
        for (s, v) in clips.iter().enumerate() {
            for c in &v[v.len() - 2..] {
                for p in model.predict_sections(c).unwrap() {
                    hit += usize::from(p == s as u8);
                    total += 1;
                }
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn distinct_sections_are_classified_and_embedded_apart() {
        let (model, clips) = fit_three_sections(false);
        assert!(held_out_accuracy(&model, &clips) >= 0.9);

        let emb = model.embed(&clips[0][5]).unwrap();
        assert_eq!(emb.dim(), (30, 128));
        let probe = emb.mean_axis(Axis(0)).unwrap();
        let train0: Vec<_> = clips[0][..4].iter().collect();
        let train1: Vec<_> = clips[1][..4].iter().collect();
        let d0 = (&probe - &model.mean_embedding(&train0).unwrap())
            .mapv(|v| v * v)
            .sum();
        let d1 = (&probe - &model.mean_embedding(&train1).unwrap())
            .mapv(|v| v * v)
            .sum();
        assert!(d0 < d1, "{d0} vs {d1}");

        // Identical windows embed identically.
        let w = model.windows(&clips[0][0]).unwrap().images;
        let twice = ndarray::concatenate(
            Axis(0),
            &[
                w.slice(ndarray::s![0..1, ..]),
                w.slice(ndarray::s![0..1, ..]),
            ],
        )
        .unwrap();
        let e = model.embed_images(twice.view()).unwrap();
        assert_eq!(e.row(0), e.row(1));

        assert!(matches!(
            model.score(&clips[0][0], 4),
            Err(DetectorError::UnknownSection(4))
        ));
    }

    #[test]
    fn identical_sections_are_near_chance() {
        let (model, clips) = fit_three_sections(true);
        let acc = held_out_accuracy(&model, &clips);
        assert!((acc - 1.0 / 3.0).abs() <= 0.1, "accuracy {acc}");
    }
}
