//! On-disk layout of a fitted scorer:
//!
//! ```text
//! <dir>/scorer.json      kind, config, calibration and model structure
//! <dir>/net_<i>.bin      network weights (nnet model format)
//! <dir>/net_<i>.json     network sidecar
//! <dir>/blocks.bin       numeric payloads (GMM parameters, kNN banks, ...)
//! ```
//!
//! `blocks.bin` is the magic `ASDB`, a u32 version and a u32 block count,
//! then per block u32 rows, u32 cols and `rows * cols` f64 values, all
//! little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{
    AeModel, Calibration, DetectorConfig, DetectorError, EnsembleMember, EnsembleModel,
    FeatureNorm, FittedModel, GmmModel, ImModel, KnnBank, OeModel, Scorer, SerialModel,
};
use crate::corpus::Domain;
use crate::nnet::{
    load_model, save_model, DenseNet, Loss, ModelSidecar, TrainConfig, MODEL_VERSION,
};

pub const SCORER_FILE: &str = "scorer.json";
const BLOCKS_FILE: &str = "blocks.bin";
const BLOCKS_MAGIC: [u8; 4] = *b"ASDB";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ScorerDoc {
    format_version: u32,
    machine_type: String,
    config: DetectorConfig,
    model: ModelDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ModelDoc {
    Ae {
        net: String,
        norm: FeatureNorm,
        context: usize,
    },
    Oe {
        net: String,
        norm: FeatureNorm,
        sections: Vec<u8>,
        frames_per_image: usize,
        shift: usize,
    },
    Gmm(GmmDoc),
    Knn {
        k: usize,
        banks: BTreeMap<Domain, usize>,
    },
    Serial {
        extractor: Box<ModelDoc>,
        models: BTreeMap<Domain, ImDoc>,
    },
    Ensemble {
        members: Vec<MemberDoc>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct GmmDoc {
    weights: usize,
    means: usize,
    variances: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ImDoc {
    Gmm(GmmDoc),
    Knn { k: usize, bank: usize },
}

#[derive(Debug, Serialize, Deserialize)]
struct MemberDoc {
    calibration: Calibration,
    model: ModelDoc,
}

struct Writer<'a> {
    dir: &'a Path,
    blocks: Vec<Array2<f64>>,
    nets: usize,
}

impl Writer<'_> {
    fn block(&mut self, m: Array2<f64>) -> usize {
        self.blocks.push(m);
        self.blocks.len() - 1
    }

    fn vector(&mut self, v: &Array1<f64>) -> usize {
        self.block(v.clone().insert_axis(ndarray::Axis(0)))
    }

    fn net(
        &mut self,
        net: &DenseNet,
        loss: Loss,
        train: &TrainConfig,
        losses: &[f64],
    ) -> Result<String, DetectorError> {
        let stem = format!("net_{}", self.nets);
        self.nets += 1;
        let sidecar = ModelSidecar {
            format_version: MODEL_VERSION,
            architecture: net.layers().to_vec(),
            loss,
            train_config: train.clone(),
            epoch_losses: losses.to_vec(),
        };
        save_model(self.dir, &stem, net, &sidecar)?;
        Ok(stem)
    }

    fn gmm(&mut self, g: &GmmModel) -> GmmDoc {
        GmmDoc {
            weights: self.vector(&g.weights().to_owned()),
            means: self.block(g.means().to_owned()),
            variances: self.block(g.variances().to_owned()),
        }
    }

    fn model(&mut self, model: &FittedModel) -> Result<ModelDoc, DetectorError> {
        Ok(match model {
            FittedModel::Ae(m) => ModelDoc::Ae {
                net: self.net(&m.net, Loss::Mse, &m.train_config, &m.epoch_losses)?,
                norm: m.norm,
                context: m.context,
            },
            FittedModel::Oe(m) => self.oe(m)?,
            FittedModel::Gmm(g) => ModelDoc::Gmm(self.gmm(g)),
            FittedModel::Knn(b) => ModelDoc::Knn {
                k: b.k(),
                banks: b
                    .banks()
                    .iter()
                    .map(|(&d, bank)| (d, self.block(bank.clone())))
                    .collect(),
            },
            FittedModel::Serial(s) => ModelDoc::Serial {
                extractor: Box::new(self.oe(&s.oe)?),
                models: s
                    .im
                    .iter()
                    .map(|(&d, m)| {
                        let doc = match m {
                            ImModel::Gmm(g) => ImDoc::Gmm(self.gmm(g)),
                            ImModel::Knn { k, bank } => ImDoc::Knn {
                                k: *k,
                                bank: self.block(bank.clone()),
                            },
                        };
                        (d, doc)
                    })
                    .collect(),
            },
            FittedModel::Ensemble(e) => ModelDoc::Ensemble {
                members: e
                    .members
                    .iter()
                    .map(|m| {
                        Ok(MemberDoc {
                            calibration: m.calibration,
                            model: self.model(&m.model)?,
                        })
                    })
                    .collect::<Result<_, DetectorError>>()?,
            },
        })
    }

    fn oe(&mut self, m: &OeModel) -> Result<ModelDoc, DetectorError> {
        Ok(ModelDoc::Oe {
            net: self.net(&m.net, Loss::CrossEntropy, &m.train_config, &m.epoch_losses)?,
            norm: m.norm,
            sections: m.sections.clone(),
            frames_per_image: m.frames_per_image,
            shift: m.shift,
        })
    }
}

struct Reader<'a> {
    dir: &'a Path,
    blocks: Vec<Array2<f64>>,
}

impl Reader<'_> {
    fn bad(&self, reason: impl Into<String>) -> DetectorError {
        DetectorError::Format {
            path: self.dir.join(SCORER_FILE),
            reason: reason.into(),
        }
    }

    fn block(&self, i: usize) -> Result<Array2<f64>, DetectorError> {
        self.blocks
            .get(i)
            .cloned()
            .ok_or_else(|| self.bad(format!("block {i} does not exist")))
    }

    fn vector(&self, i: usize) -> Result<Array1<f64>, DetectorError> {
        let b = self.block(i)?;
        if b.nrows() != 1 {
            return Err(self.bad(format!("block {i} is not a vector")));
        }
        Ok(b.row(0).to_owned())
    }

    fn net(&self, stem: &str) -> Result<(DenseNet, ModelSidecar), DetectorError> {
        Ok(load_model(self.dir, stem)?)
    }

    fn norm(&self, n: &FeatureNorm) -> Result<FeatureNorm, DetectorError> {
        n.validate()?;
        Ok(*n)
    }

    fn gmm(&self, d: &GmmDoc) -> Result<GmmModel, DetectorError> {
        GmmModel::from_parts(
            self.vector(d.weights)?,
            self.block(d.means)?,
            self.block(d.variances)?,
        )
    }

    fn oe(&self, doc: &ModelDoc) -> Result<OeModel, DetectorError> {
        let ModelDoc::Oe {
            net,
            norm,
            sections,
            frames_per_image,
            shift,
        } = doc
        else {
            return Err(self.bad("serial extractor must be an OE model"));
        };
        let (net, sidecar) = self.net(net)?;
        Ok(OeModel {
            net,
            norm: self.norm(norm)?,
            sections: sections.clone(),
            frames_per_image: *frames_per_image,
            shift: *shift,
            train_config: sidecar.train_config,
            epoch_losses: sidecar.epoch_losses,
        })
    }

    fn model(&self, doc: &ModelDoc) -> Result<FittedModel, DetectorError> {
        Ok(match doc {
            ModelDoc::Ae { net, norm, context } => {
                let (net, sidecar) = self.net(net)?;
                FittedModel::Ae(AeModel {
                    net,
                    norm: self.norm(norm)?,
                    context: *context,
                    train_config: sidecar.train_config,
                    epoch_losses: sidecar.epoch_losses,
                })
            }
            ModelDoc::Oe { .. } => FittedModel::Oe(self.oe(doc)?),
            ModelDoc::Gmm(g) => FittedModel::Gmm(self.gmm(g)?),
            ModelDoc::Knn { k, banks } => {
                let banks = banks
                    .iter()
                    .map(|(&d, &i)| Ok((d, self.block(i)?)))
                    .collect::<Result<_, DetectorError>>()?;
                FittedModel::Knn(KnnBank::new(*k, banks)?)
            }
            ModelDoc::Serial { extractor, models } => {
                let im = models
                    .iter()
                    .map(|(&d, m)| {
                        let model = match m {
                            ImDoc::Gmm(g) => ImModel::Gmm(self.gmm(g)?),
                            ImDoc::Knn { k, bank } => ImModel::Knn {
                                k: *k,
                                bank: self.block(*bank)?,
                            },
                        };
                        Ok((d, model))
                    })
                    .collect::<Result<_, DetectorError>>()?;
                FittedModel::Serial(SerialModel {
                    oe: self.oe(extractor)?,
                    im,
                })
            }
            ModelDoc::Ensemble { members } => FittedModel::Ensemble(EnsembleModel::new(
                members
                    .iter()
                    .map(|m| {
                        Ok(EnsembleMember {
                            model: self.model(&m.model)?,
                            calibration: m.calibration,
                        })
                    })
                    .collect::<Result<_, DetectorError>>()?,
            )?),
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DetectorError + '_ {
    move |source| DetectorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn encode_blocks(blocks: &[Array2<f64>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&BLOCKS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(b.ncols() as u32).to_le_bytes());
        for v in b.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_blocks(bytes: &[u8], path: &Path) -> Result<Vec<Array2<f64>>, DetectorError> {
    let bad = |reason: &str| DetectorError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], DetectorError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != BLOCKS_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    if u32_at(take(4)?) != FORMAT_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let count = u32_at(take(4)?);
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let raw = take(rows * cols * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blocks.push(Array2::from_shape_vec((rows, cols), values).expect("sized above"));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(blocks)
}

/// Writes a fitted scorer into `dir` (created if needed).
pub fn save_scorer(scorer: &Scorer, dir: &Path) -> Result<(), DetectorError> {
    let model = scorer.model().ok_or(DetectorError::NotFitted)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut w = Writer {
        dir,
        blocks: Vec::new(),
        nets: 0,
    };
    let doc = ScorerDoc {
        format_version: FORMAT_VERSION,
        machine_type: scorer.machine_type().to_string(),
        config: scorer.config().clone(),
        model: w.model(model)?,
    };
    let blocks_path = dir.join(BLOCKS_FILE);
    fs::write(&blocks_path, encode_blocks(&w.blocks)).map_err(io_err(&blocks_path))?;
    let json_path = dir.join(SCORER_FILE);
    let json = serde_json::to_string_pretty(&doc).map_err(|e| DetectorError::Format {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;
    Ok(())
}

/// Reads a scorer written by [`save_scorer`].
pub fn load_scorer(dir: &Path) -> Result<Scorer, DetectorError> {
    let json_path = dir.join(SCORER_FILE);
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let doc: ScorerDoc = serde_json::from_str(&text).map_err(|e| DetectorError::Format {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    if doc.format_version != FORMAT_VERSION {
        return Err(DetectorError::Format {
            path: json_path,
            reason: format!("unsupported format version {}", doc.format_version),
        });
    }
    let blocks_path = dir.join(BLOCKS_FILE);
    let bytes = fs::read(&blocks_path).map_err(io_err(&blocks_path))?;
    let reader = Reader {
        dir,
        blocks: decode_blocks(&bytes, &blocks_path)?,
    };
    let model = reader.model(&doc.model)?;
    Scorer::from_model(doc.machine_type, doc.config, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Condition;
    use crate::detectors::test_util::{logmel, train_clips};
    use crate::detectors::{DetectorKind, OeConfig, ScoreContext};

    #[test]
    fn blocks_round_trip_and_reject_garbage() {
        let blocks = vec![
            Array2::from_shape_fn((2, 3), |(i, j)| i as f64 - 0.1 * j as f64),
            Array2::zeros((0, 4)),
        ];
        let bytes = encode_blocks(&blocks);
        let p = Path::new("blocks.bin");
        assert_eq!(decode_blocks(&bytes, p).unwrap(), blocks);
        assert!(decode_blocks(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_blocks(&extra, p).is_err());
    }

    #[test]
    fn every_kind_round_trips_with_identical_scores() {
        let clips = train_clips(2, 2, 1);
        let probe = logmel(1, Domain::Target, Condition::Anomaly, 4242);
        for kind in DetectorKind::ALL {
            let cfg = DetectorConfig {
                kind,
                adapt: true,
                oe: OeConfig {
                    epochs: 1,
                    hidden: vec![16, 8],
                    ..OeConfig::default()
                },
                ae: crate::detectors::AeConfig {
                    epochs: 1,
                    hidden_units: 16,
                    frame_stride: 8,
                    ..Default::default()
                },
                ..DetectorConfig::default()
            };
            let mut scorer = Scorer::new("fan", cfg);
            scorer.fit(&clips).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_scorer(&scorer, dir.path()).unwrap();
            let loaded = load_scorer(dir.path()).unwrap();
            assert_eq!(loaded.kind(), kind);
            assert_eq!(loaded.config(), scorer.config());
            for hint in [None, Some(Domain::Source), Some(Domain::Target)] {
                let ctx = ScoreContext {
                    section: 1,
                    domain_hint: hint,
                };
                assert_eq!(
                    scorer.score(&probe, &ctx).unwrap().to_bits(),
                    loaded.score(&probe, &ctx).unwrap().to_bits(),
                    "{kind}"
                );
            }
        }
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_scorer(&dir.path().join("nope")),
            Err(DetectorError::Io { .. })
        ));
    }
}
