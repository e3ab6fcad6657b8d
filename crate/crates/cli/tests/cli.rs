use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn asdbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asdbench"))
        .args(args)
        .env_remove("ASDBENCH_SEED")
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn asdbench")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[track_caller]
fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

/// Asserts the exit code and that stderr is a single `error[<code>:...]` line.
#[track_caller]
fn assert_fails(out: &Output, code: i32) -> String {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", stderr(out));
    let err = stderr(out);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    assert!(lines[0].starts_with(&format!("error[{code}:")), "{err}");
    lines[0].to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A tiny corpus: 1 machine, `sections` sections, 4 source and 2 target
/// training clips, 3 normal + 3 anomalous test clips per cell.
fn small_corpus(dir: &Path, sections: &str) -> PathBuf {
    let data = dir.join("data");
    assert_ok(&asdbench(&[
        "synth",
        "--out",
        p(&data),
        "--machines",
        "1",
        "--sections",
        sections,
        "--seed",
        "3",
        "--source-train-clips",
        "4",
        "--target-train-clips",
        "2",
        "--test-clips",
        "3",
    ]));
    data
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

#[test]
fn synth_refuses_nonempty_output_without_force() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path(), "1");
    assert!(data.join("manifest.csv").is_file());
    let again = [
        "synth",
        "--out",
        p(&data),
        "--machines",
        "1",
        "--sections",
        "1",
        "--source-train-clips",
        "1",
        "--test-clips",
        "1",
    ];
    let line = assert_fails(&asdbench(&again), 2);
    assert!(line.contains("not empty"), "{line}");
    let mut forced = again.to_vec();
    forced.push("--force");
    assert_ok(&asdbench(&forced));
}

#[test]
fn synth_defaults_to_three_target_training_clips() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    let out = asdbench(&[
        "synth",
        "--out",
        p(&data),
        "--machines",
        "2",
        "--sections",
        "1",
        "--source-train-clips",
        "1",
        "--test-clips",
        "1",
    ]);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("fan,00,target,train,3"), "{text}");
    assert!(text.contains("gearbox,00,target,train,3"), "{text}");
    let machines: Vec<_> = files_in(&data).into_iter().filter(|p| p.is_dir()).collect();
    assert_eq!(machines.len(), 2);
    let target_train = fs::read_dir(data.join("fan"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .contains("_target_train_")
        })
        .count();
    assert_eq!(target_train, 3);
}

#[test]
fn train_score_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path(), "2");
    let models = tmp.path().join("models");
    let scores = tmp.path().join("scores");

    let out = asdbench(&[
        "train",
        "--detector",
        "gmm",
        "--data",
        p(&data),
        "--models",
        p(&models),
        "--seed",
        "1",
    ]);
    assert_ok(&out);
    assert!(models.join("fan/scorer.json").is_file());
    assert!(models.join("fan/train_log.csv").is_file());

    assert_ok(&asdbench(&[
        "score",
        "--data",
        p(&data),
        "--models",
        p(&models),
        "--scores",
        p(&scores),
    ]));
    let files = files_in(&scores);
    let names: Vec<_> = files
        .iter()
        .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names,
        [
            "anomaly_score_fan_section_00_source.csv",
            "anomaly_score_fan_section_00_target.csv",
            "anomaly_score_fan_section_01_source.csv",
            "anomaly_score_fan_section_01_target.csv",
        ]
    );
    // 2 sections x 2 domains x (3 normal + 3 anomalous) test clips.
    let mut rows = 0;
    for f in &files {
        let text = fs::read_to_string(f).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("filename,score"));
        let names: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted, "rows must be in file-name order");
        rows += names.len();
    }
    assert_eq!(rows, 24);

    // floor(0.1 * 3) = 0 normals: the pAUC is undefined.
    let line = assert_fails(
        &asdbench(&["eval", "--data", p(&data), "--scores", p(&scores)]),
        4,
    );
    assert!(line.contains("pAUC"), "{line}");

    let report = tmp.path().join("report");
    let out = asdbench(&[
        "eval",
        "--data",
        p(&data),
        "--scores",
        p(&scores),
        "--report",
        p(&report),
        "--p",
        "0.34",
    ]);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(
        text.lines().any(|l| l.starts_with("official_score,")),
        "{text}"
    );
    let csv = fs::read_to_string(report.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("machine,section,domain,auc,pauc,n_neg,n_pos\n"));
    assert_eq!(csv.lines().count(), 1 + 4 + 1);
    assert!(report.join("metrics.md").is_file());
}

#[test]
fn same_seed_gives_byte_identical_models() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path(), "2");
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let models = tmp.path().join(run);
        assert_ok(&asdbench(&[
            "train",
            "--detector",
            "ensemble",
            "--members",
            "gmm,knn",
            "--data",
            p(&data),
            "--models",
            p(&models),
            "--seed",
            "5",
        ]));
        dirs.push(models.join("fan"));
    }
    let a = files_in(&dirs[0]);
    assert!(a.len() >= 3, "{a:?}");
    for f in a {
        let name = f.file_name().unwrap();
        assert_eq!(
            fs::read(&f).unwrap(),
            fs::read(dirs[1].join(name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn oe_with_one_section_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path(), "1");
    let models = tmp.path().join("models");
    let line = assert_fails(
        &asdbench(&[
            "train",
            "--detector",
            "oe",
            "--data",
            p(&data),
            "--models",
            p(&models),
        ]),
        4,
    );
    assert!(line.contains("section"), "{line}");
}

#[test]
fn missing_artifacts_exit_3() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path(), "1");
    let models = tmp.path().join("no-models");
    let line = assert_fails(
        &asdbench(&[
            "score",
            "--data",
            p(&data),
            "--models",
            p(&models),
            "--scores",
            p(&tmp.path().join("s")),
        ]),
        3,
    );
    assert!(line.contains("fan"), "{line}");
    assert_fails(
        &asdbench(&[
            "train",
            "--detector",
            "gmm",
            "--data",
            p(&tmp.path().join("nope")),
        ]),
        3,
    );
    assert_fails(
        &asdbench(&[
            "eval",
            "--data",
            p(&data),
            "--scores",
            p(&tmp.path().join("nope")),
        ]),
        3,
    );
}

#[test]
fn usage_errors_exit_1() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path(), "1");
    assert_fails(
        &asdbench(&["train", "--detector", "svm", "--data", p(&data)]),
        1,
    );
    assert_fails(&asdbench(&["train", "--data", p(&data)]), 1);
    assert_fails(
        &asdbench(&[
            "train",
            "--detector",
            "ensemble",
            "--members",
            "ensemble",
            "--data",
            p(&data),
        ]),
        1,
    );
    assert_fails(&asdbench(&["eval", "--data", p(&data), "--p", "0"]), 1);
    assert_fails(&asdbench(&["synth", "--bogus"]), 1);
    assert_fails(&asdbench(&[]), 1);
    assert!(asdbench(&["--help"]).status.success());
}

#[test]
fn score_label_mismatch_fails_validation_naming_clip() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path(), "1");
    let models = tmp.path().join("models");
    let scores = tmp.path().join("scores");
    assert_ok(&asdbench(&[
        "train",
        "--detector",
        "knn",
        "--data",
        p(&data),
        "--models",
        p(&models),
    ]));
    assert_ok(&asdbench(&[
        "score",
        "--data",
        p(&data),
        "--models",
        p(&models),
        "--scores",
        p(&scores),
    ]));
    let file = scores.join("anomaly_score_fan_section_00_target.csv");
    let text = fs::read_to_string(&file).unwrap();
    let dropped = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .to_string();
    let kept: Vec<&str> = text
        .lines()
        .enumerate()
        .filter(|(i, _)| *i != 1)
        .map(|(_, l)| l)
        .collect();
    fs::write(&file, kept.join("\n") + "\n").unwrap();
    let line = assert_fails(
        &asdbench(&[
            "eval",
            "--data",
            p(&data),
            "--scores",
            p(&scores),
            "--p",
            "0.5",
        ]),
        4,
    );
    assert!(line.contains(&dropped), "{line}");
}

#[test]
fn oracle_scores_give_official_score_one() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path(), "1");
    let scores = tmp.path().join("scores");
    fs::create_dir_all(&scores).unwrap();
    for domain in ["source", "target"] {
        let mut text = String::from("filename,score\n");
        for (cond, score) in [("anomaly", 1), ("normal", 0)] {
            for id in 0..3 {
                text.push_str(&format!(
                    "section_00_{domain}_test_{cond}_{id:04}.wav,{score}\n"
                ));
            }
        }
        fs::write(
            scores.join(format!("anomaly_score_fan_section_00_{domain}.csv")),
            text,
        )
        .unwrap();
    }
    // p = 0.5 so that floor(p * 3) = 1 normal enters the pAUC.
    let out = asdbench(&[
        "eval",
        "--data",
        p(&data),
        "--scores",
        p(&scores),
        "--p",
        "0.5",
    ]);
    assert_ok(&out);
    assert!(
        stdout(&out).lines().any(|l| l == "official_score,1"),
        "{}",
        stdout(&out)
    );
}

#[test]
fn unlabeled_test_clips_are_scored() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path(), "1");
    // An evaluation-style copy: training clips as-is, test clips renamed
    // without their condition token.
    let eval_data = tmp.path().join("eval").join("fan");
    fs::create_dir_all(&eval_data).unwrap();
    let mut n_test = 0;
    for f in files_in(&data.join("fan")) {
        let name = f.file_name().unwrap().to_string_lossy().into_owned();
        let renamed = if name.contains("_test_") {
            n_test += 1;
            let id = name.rsplit('_').next().unwrap();
            let head: Vec<&str> = name.split('_').take(4).collect();
            format!(
                "{}_{:04}.wav",
                head.join("_"),
                n_test * 10 + id[..4].parse::<usize>().unwrap()
            )
        } else {
            name
        };
        fs::copy(&f, eval_data.join(renamed)).unwrap();
    }
    let root = tmp.path().join("eval");
    let models = tmp.path().join("models");
    let scores = tmp.path().join("scores");
    assert_ok(&asdbench(&[
        "train",
        "--detector",
        "gmm",
        "--data",
        p(&root),
        "--models",
        p(&models),
    ]));
    let out = asdbench(&[
        "score",
        "--data",
        p(&root),
        "--models",
        p(&models),
        "--scores",
        p(&scores),
    ]);
    assert_ok(&out);
    assert!(
        stdout(&out).contains(&format!("wrote {n_test} scores")),
        "{}",
        stdout(&out)
    );
    let text = fs::read_to_string(scores.join("anomaly_score_fan_section_00_source.csv")).unwrap();
    assert!(text
        .lines()
        .skip(1)
        .all(|l| !l.contains("normal") && !l.contains("anomaly")));
}

#[test]
fn config_file_is_overridden_by_flags_and_env_seed_is_a_fallback() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path(), "1");
    let config = tmp.path().join("run.json");
    fs::write(
        &config,
        r#"{"detector": {"kind": "knn", "knn": {"k": 2}, "seed": 11}}"#,
    )
    .unwrap();
    let read_config = |models: &Path| -> serde_json::Value {
        let doc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(models.join("fan/scorer.json")).unwrap())
                .unwrap();
        doc["config"].clone()
    };

    let m1 = tmp.path().join("m1");
    assert_ok(&asdbench(&[
        "train",
        "--config",
        p(&config),
        "--data",
        p(&data),
        "--models",
        p(&m1),
    ]));
    let c = read_config(&m1);
    assert_eq!(c["kind"], "knn");
    assert_eq!(c["knn"]["k"], 2);
    assert_eq!(c["seed"], 11);

    let m2 = tmp.path().join("m2");
    assert_ok(&asdbench(&[
        "train",
        "--config",
        p(&config),
        "--detector",
        "gmm",
        "--seed",
        "4",
        "--data",
        p(&data),
        "--models",
        p(&m2),
    ]));
    let c = read_config(&m2);
    assert_eq!(c["kind"], "gmm");
    assert_eq!(c["knn"]["k"], 2);
    assert_eq!(c["seed"], 4);

    let m3 = tmp.path().join("m3");
    let out = Command::new(env!("CARGO_BIN_EXE_asdbench"))
        .args([
            "train",
            "--detector",
            "knn",
            "--data",
            p(&data),
            "--models",
            p(&m3),
        ])
        .env("ASDBENCH_SEED", "23")
        .output()
        .unwrap();
    assert_ok(&out);
    assert_eq!(read_config(&m3)["seed"], 23);
}

#[test]
fn trials_report_mean_and_std() {
    let tmp = TempDir::new().unwrap();
    let data = small_corpus(tmp.path(), "1");
    let report = tmp.path().join("report");
    let out = asdbench(&[
        "eval",
        "--data",
        p(&data),
        "--trials",
        "2",
        "--detector",
        "gmm",
        "--seed",
        "1",
        "--p",
        "0.34",
        "--report",
        p(&report),
    ]);
    assert_ok(&out);
    let csv = fs::read_to_string(report.join("trials.csv")).unwrap();
    assert!(
        csv.starts_with("machine,section,domain,auc_mean,auc_std,pauc_mean,pauc_std\n"),
        "{csv}"
    );
    assert_eq!(csv.lines().count(), 1 + 2 + 1);
    assert!(stdout(&out)
        .lines()
        .any(|l| l.starts_with("official_score,")));
}
