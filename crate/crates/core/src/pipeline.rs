//! End-to-end plumbing: features from a dataset index, per-machine training
//! and scoring, challenge-style score files, and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::{
    load_clip, parse_clip_path, ClipMeta, Condition, CorpusError, DatasetIndex, Domain, IndexEntry,
    Split,
};
use crate::detectors::{
    load_scorer, save_scorer, DetectorConfig, DetectorError, ScoreContext, Scorer, TrainClip,
};
use crate::dsp::{DspError, LogMelExtractor, LogMelParams, LogMelSpectrogram};
use crate::eval::{evaluate, EvalError, MetricsReport, ScoreRecord};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no trained model for {machine} under {path}")]
    MissingModel { machine: String, path: PathBuf },
    #[error("score file {path}: {reason}")]
    ScoreFile { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Selection(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A clip's index entry and log-mel features.
#[derive(Debug, Clone)]
pub struct ClipFeatures {
    pub entry: IndexEntry,
    pub logmel: LogMelSpectrogram,
}

/// Extracts features for every clip of `machine` (optionally one split) in
/// index order.
pub fn load_features(
    index: &DatasetIndex,
    machine: &str,
    split: Option<Split>,
    params: &LogMelParams,
) -> Result<Vec<ClipFeatures>, PipelineError> {
    let extractor = LogMelExtractor::new(*params)?;
    index
        .entries()
        .iter()
        .filter(|e| e.meta.machine_type == machine && split.is_none_or(|s| e.meta.split == s))
        .map(|e| {
            let clip = load_clip(index.abs_path(e))?;
            Ok(ClipFeatures {
                entry: e.clone(),
                logmel: extractor.log_mel(&clip)?,
            })
        })
        .collect()
}

/// The normal training clips among `features`.
pub fn train_clips(features: &[ClipFeatures]) -> Vec<TrainClip> {
    features
        .iter()
        .filter(|f| {
            f.entry.meta.split == Split::Train && f.entry.meta.condition == Condition::Normal
        })
        .map(|f| TrainClip {
            meta: f.entry.meta.clone(),
            logmel: f.logmel.clone(),
        })
        .collect()
}

/// Scores every test clip among `features`, in order.
pub fn score_clips(
    scorer: &Scorer,
    features: &[ClipFeatures],
) -> Result<Vec<ScoreRecord>, PipelineError> {
    let adapt = scorer.config().adapt;
    features
        .iter()
        .filter(|f| f.entry.meta.split == Split::Test)
        .map(|f| {
            let ctx = ScoreContext::for_clip(&f.entry.meta, adapt);
            Ok(ScoreRecord {
                meta: f.entry.meta.clone(),
                score: scorer.score(&f.logmel, &ctx)?,
            })
        })
        .collect()
}

/// Restricts an index to the given machines; `None` keeps all of them.
pub fn select_machines(
    index: &DatasetIndex,
    machines: Option<&[String]>,
) -> Result<DatasetIndex, PipelineError> {
    let Some(wanted) = machines else {
        return Ok(index.clone());
    };
    let known = index.machines();
    for m in wanted {
        if !known.contains(m) {
            return Err(PipelineError::Selection(format!(
                "machine `{m}` not in dataset (have: {})",
                known.join(", ")
            )));
        }
    }
    let entries = index
        .entries()
        .iter()
        .filter(|e| wanted.contains(&e.meta.machine_type))
        .cloned()
        .collect();
    Ok(DatasetIndex::new(index.root(), entries)?)
}

/// Trains one scorer per machine of `index` and writes each under
/// `models_dir/<machine>/`.
pub fn train_all(
    index: &DatasetIndex,
    config: &DetectorConfig,
    params: &LogMelParams,
    models_dir: &Path,
) -> Result<Vec<Scorer>, PipelineError> {
    let mut scorers = Vec::new();
    for machine in index.machines() {
        let features = load_features(index, &machine, Some(Split::Train), params)?;
        let mut scorer = Scorer::new(&machine, config.clone());
        scorer.fit(&train_clips(&features))?;
        save_scorer(&scorer, &models_dir.join(&machine))?;
        scorers.push(scorer);
    }
    Ok(scorers)
}

pub fn load_machine_scorer(models_dir: &Path, machine: &str) -> Result<Scorer, PipelineError> {
    let dir = models_dir.join(machine);
    if !dir.join(crate::detectors::SCORER_FILE).is_file() {
        return Err(PipelineError::MissingModel {
            machine: machine.to_string(),
            path: dir,
        });
    }
    let scorer = load_scorer(&dir)?;
    if scorer.machine_type() != machine {
        return Err(PipelineError::Selection(format!(
            "model under {} was trained for {}",
            dir.display(),
            scorer.machine_type()
        )));
    }
    Ok(scorer)
}

/// Scores the test clips of every machine of `index` with the scorers
/// stored under `models_dir`.
pub fn score_all(
    index: &DatasetIndex,
    models_dir: &Path,
    params: &LogMelParams,
) -> Result<Vec<ScoreRecord>, PipelineError> {
    let mut out = Vec::new();
    for machine in index.machines() {
        let scorer = load_machine_scorer(models_dir, &machine)?;
        let features = load_features(index, &machine, Some(Split::Test), params)?;
        out.extend(score_clips(&scorer, &features)?);
    }
    Ok(out)
}

pub fn score_file_name(machine: &str, section: u8, domain: Domain) -> String {
    format!("anomaly_score_{machine}_section_{section:02}_{domain}.csv")
}

/// Inverse of [`score_file_name`].
pub fn parse_score_file_name(name: &str) -> Option<(String, u8, Domain)> {
    let stem = name.strip_prefix("anomaly_score_")?.strip_suffix(".csv")?;
    let (machine, rest) = stem.rsplit_once("_section_")?;
    let (section, domain) = rest.split_once('_')?;
    if machine.is_empty() || section.len() != 2 || !section.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((
        machine.to_string(),
        section.parse().ok()?,
        domain.parse().ok()?,
    ))
}

/// Writes one `filename,score` CSV per (machine, section, domain), rows in
/// file-name order. Returns the written paths in order.
pub fn write_scores(dir: &Path, records: &[ScoreRecord]) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut groups: BTreeMap<(String, u8, Domain), Vec<(String, f64)>> = BTreeMap::new();
    for r in records {
        let m = &r.meta;
        groups
            .entry((m.machine_type.clone(), m.section, m.domain))
            .or_default()
            .push((m.file_name(), r.score));
    }
    let mut paths = Vec::new();
    for ((machine, section, domain), mut rows) in groups {
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let mut text = String::from("filename,score\n");
        for (name, score) in rows {
            text.push_str(&format!("{name},{score}\n"));
        }
        let path = dir.join(score_file_name(&machine, section, domain));
        fs::write(&path, text).map_err(io_err(&path))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads every score file in `dir`.
pub fn read_scores(dir: &Path) -> Result<Vec<ScoreRecord>, PipelineError> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    names.sort();
    let mut out = Vec::new();
    for path in names {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some((machine, section, domain)) = parse_score_file_name(name) else {
            continue;
        };
        let bad = |reason: String| PipelineError::ScoreFile {
            path: path.clone(),
            reason,
        };
        let mut reader = csv::Reader::from_path(&path).map_err(|e| bad(e.to_string()))?;
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?;
        if headers != vec!["filename", "score"] {
            return Err(bad(format!(
                "expected header `filename,score`, got {headers:?}"
            )));
        }
        for row in reader.records() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            let file = &row[0];
            let meta: ClipMeta =
                parse_clip_path(format!("{machine}/{file}")).map_err(|e| bad(e.to_string()))?;
            if meta.section != section || meta.domain != domain {
                return Err(bad(format!("{file} does not belong in this file")));
            }
            let score: f64 = row[1]
                .parse()
                .map_err(|_| bad(format!("bad score `{}` for {file}", &row[1])))?;
            out.push(ScoreRecord { meta, score });
        }
    }
    if out.is_empty() {
        return Err(PipelineError::ScoreFile {
            path: dir.to_path_buf(),
            reason: "no score files found".into(),
        });
    }
    Ok(out)
}

/// Evaluates score files against the labelled test clips of `index`,
/// restricted to the machines that have scores.
pub fn evaluate_scores(
    index: &DatasetIndex,
    records: &[ScoreRecord],
    p: f64,
) -> Result<MetricsReport, PipelineError> {
    let mut machines: Vec<String> = records
        .iter()
        .map(|r| r.meta.machine_type.clone())
        .collect();
    machines.sort();
    machines.dedup();
    let index = select_machines(index, Some(&machines))?;
    Ok(evaluate(&index, records, p)?)
}

/// In-memory train, score and evaluate of every machine with one config.
pub fn run_once(
    index: &DatasetIndex,
    config: &DetectorConfig,
    params: &LogMelParams,
    p: f64,
) -> Result<(Vec<ScoreRecord>, MetricsReport), PipelineError> {
    let mut records = Vec::new();
    for machine in index.machines() {
        let features = load_features(index, &machine, None, params)?;
        let mut scorer = Scorer::new(&machine, config.clone());
        scorer.fit(&train_clips(&features))?;
        records.extend(score_clips(&scorer, &features)?);
    }
    let report = evaluate(index, &records, p)?;
    Ok((records, report))
}
