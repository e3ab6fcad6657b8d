use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asdbench_core::corpus::{
    default_machine_names, scan_dataset, synth_corpus, CorpusError, DatasetIndex, MANIFEST_FILE,
};
use asdbench_core::detectors::{DetectorConfig, DetectorError, DetectorKind, Scorer};
use asdbench_core::eval::{EvalError, TrialSummary};
use asdbench_core::pipeline::{
    evaluate_scores, read_scores, run_once, score_all, select_machines, train_all, write_scores,
    PipelineError,
};

use crate::config::{check_p, FileConfig, DEFAULT_P};
use crate::{DetectorArgs, EvalArgs, ScoreArgs, SynthArgs, TrainArgs, UsageError};

/// A required input (dataset, model, score files) does not exist (exit 3).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct MissingArtifact(String);

pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Exit code and tag for an error chain.
pub fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    const USAGE: (u8, &str) = (1, "usage");
    const EXISTS: (u8, &str) = (2, "exists");
    const MISSING: (u8, &str) = (3, "missing");
    const INVALID: (u8, &str) = (4, "validation");

    fn corpus(e: &CorpusError) -> Option<(u8, &'static str)> {
        match e {
            CorpusError::OutputExists(_) => Some(EXISTS),
            CorpusError::EmptyDataset(_) => Some(MISSING),
            CorpusError::InvalidConfig(_) | CorpusError::InvalidSpec(_) => Some(USAGE),
            CorpusError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Some(MISSING)
            }
            _ => None,
        }
    }
    fn detector(e: &DetectorError) -> Option<(u8, &'static str)> {
        match e {
            DetectorError::OeNotApplicable { .. } | DetectorError::InsufficientData(_) => {
                Some(INVALID)
            }
            DetectorError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Some(MISSING)
            }
            _ => None,
        }
    }
    fn eval(e: &EvalError) -> Option<(u8, &'static str)> {
        matches!(e, EvalError::Validation(_) | EvalError::Undefined(_)).then_some(INVALID)
    }

    for cause in err.chain() {
        let found = if cause.is::<UsageError>() {
            Some(USAGE)
        } else if cause.is::<MissingArtifact>() {
            Some(MISSING)
        } else if let Some(e) = cause.downcast_ref::<PipelineError>() {
            match e {
                PipelineError::MissingModel { .. } => Some(MISSING),
                PipelineError::ScoreFile { .. } => Some(INVALID),
                PipelineError::Selection(_) => Some(USAGE),
                PipelineError::Io { source, .. }
                    if source.kind() == std::io::ErrorKind::NotFound =>
                {
                    Some(MISSING)
                }
                PipelineError::Corpus(e) => corpus(e),
                PipelineError::Detector(e) => detector(e),
                PipelineError::Eval(e) => eval(e),
                _ => None,
            }
        } else if let Some(e) = cause.downcast_ref::<CorpusError>() {
            corpus(e)
        } else if let Some(e) = cause.downcast_ref::<DetectorError>() {
            detector(e)
        } else if let Some(e) = cause.downcast_ref::<EvalError>() {
            eval(e)
        } else {
            None
        };
        if let Some(code) = found {
            return code;
        }
    }
    (1, "error")
}

/// Reads the manifest of a synthesized tree, or scans any other tree.
fn open_index(data: &Path, machines: Option<&[String]>) -> Result<DatasetIndex> {
    if !data.is_dir() {
        return Err(
            MissingArtifact(format!("dataset directory {} not found", data.display())).into(),
        );
    }
    let index = if data.join(MANIFEST_FILE).is_file() {
        DatasetIndex::read_manifest(data)?
    } else {
        let report = scan_dataset(data)?;
        if !report.skipped.is_empty() {
            log::warn!(
                "skipped {} non-conforming files under {}",
                report.skipped.len(),
                data.display()
            );
        }
        report.index
    };
    Ok(select_machines(&index, machines)?)
}

fn detector_config(args: &DetectorArgs, file: &FileConfig) -> Result<DetectorConfig> {
    let mut config = file.detector.clone().unwrap_or_default();
    match &args.detector {
        Some(kind) => {
            config.kind = kind
                .parse()
                .map_err(|e: DetectorError| UsageError(e.to_string()))?
        }
        None if file.detector.is_none() => {
            bail!(UsageError(
                "--detector is required (or a `detector` section in --config)".into()
            ))
        }
        None => {}
    }
    if let Some(members) = &args.members {
        config.members = members
            .iter()
            .map(|m| m.parse::<DetectorKind>())
            .collect::<Result<_, _>>()
            .map_err(|e| UsageError(e.to_string()))?;
    }
    config.adapt |= args.adapt;
    if args.max_train_clips.is_some() {
        config.max_train_clips_per_section = args.max_train_clips;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(config)
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let mut config = file.corpus.unwrap_or_default();
    if let Some(n) = args.machines {
        config.machines = default_machine_names(n);
    }
    if let Some(n) = args.sections {
        config.sections_per_machine = n;
    }
    if let Some(n) = args.source_train_clips {
        config.source_train_clips = n;
    }
    if let Some(n) = args.target_train_clips {
        config.target_train_clips = n;
    }
    if let Some(n) = args.test_clips {
        config.test_clips_per_condition = n;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.identical_sections |= args.identical_sections;

    let index = synth_corpus(&config, &args.out, args.force)?;
    let mut out = format!("wrote {} clips to {}\n", index.len(), args.out.display());
    out.push_str("machine,section,domain,split,clips\n");
    for (key, n) in index.counts() {
        let _ = writeln!(
            out,
            "{},{:02},{},{},{n}",
            key.machine_type, key.section, key.domain, key.split
        );
    }
    print!("{out}");
    Ok(())
}

fn write_train_log(scorer: &Scorer, dir: &Path) -> Result<PathBuf> {
    let mut text = String::from("network,epoch,loss\n");
    if let Some(model) = scorer.model() {
        for (name, losses) in model.epoch_losses() {
            for (epoch, loss) in losses.iter().enumerate() {
                let _ = writeln!(text, "{name},{},{loss}", epoch + 1);
                log::info!(
                    "{} {name} epoch {}: loss {loss:.6}",
                    scorer.machine_type(),
                    epoch + 1
                );
            }
        }
    }
    let path = dir.join(TRAIN_LOG_FILE);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let config = detector_config(&args.detector, &file)?;
    let index = open_index(&args.data, args.machines.as_deref())?;
    let scorers = train_all(&index, &config, &file.logmel(), &args.models)?;
    for scorer in &scorers {
        let dir = args.models.join(scorer.machine_type());
        write_train_log(scorer, &dir)?;
        println!(
            "trained {} for {} -> {}",
            scorer.kind(),
            scorer.machine_type(),
            dir.display()
        );
    }
    Ok(())
}

pub fn score(args: ScoreArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let index = open_index(&args.data, args.machines.as_deref())?;
    let records = score_all(&index, &args.models, &file.logmel())?;
    let paths = write_scores(&args.scores, &records)?;
    println!(
        "wrote {} scores in {} files to {}",
        records.len(),
        paths.len(),
        args.scores.display()
    );
    Ok(())
}

fn write_report(dir: &Path, stem: &str, csv: &str, markdown: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (ext, text) in [("csv", csv), ("md", markdown)] {
        let path = dir.join(format!("{stem}.{ext}"));
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let p = check_p(args.p.or(file.p).unwrap_or(DEFAULT_P))?;
    let index = open_index(&args.data, args.machines.as_deref())?;

    if let Some(trials) = args.trials {
        if trials == 0 {
            bail!(UsageError("--trials must be >= 1".into()));
        }
        let base = detector_config(&args.detector, &file)?;
        let params = file.logmel();
        let mut reports = Vec::with_capacity(trials);
        for t in 0..trials {
            let mut config = base.clone();
            config.seed = base.seed.wrapping_add(t as u64);
            log::info!("trial {}/{trials} with seed {}", t + 1, config.seed);
            reports.push(run_once(&index, &config, &params, p)?.1);
        }
        let summary = TrialSummary::from_reports(&reports)?;
        let dir = args.report.unwrap_or_else(|| PathBuf::from("."));
        write_report(&dir, "trials", &summary.to_csv(), &summary.to_markdown())?;
        print!("{}", summary.to_markdown());
        println!(
            "official_score,{},{}",
            summary.official_mean, summary.official_std
        );
        return Ok(());
    }

    if !args.scores.is_dir() {
        return Err(MissingArtifact(format!(
            "score directory {} not found",
            args.scores.display()
        ))
        .into());
    }
    let mut records = read_scores(&args.scores)?;
    if let Some(machines) = &args.machines {
        records.retain(|r| machines.contains(&r.meta.machine_type));
    }
    let report = evaluate_scores(&index, &records, p)?;
    let dir = args.report.unwrap_or(args.scores);
    write_report(&dir, "metrics", &report.to_csv(), &report.to_markdown())?;
    print!("{}", report.to_markdown());
    println!("official_score,{}", report.official_score);
    Ok(())
}
