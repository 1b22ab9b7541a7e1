//! End-to-end checks of the `trimnet` binary on a small synthetic task.

use std::path::Path;
use std::process::{Command, Output};

use trimnet_core::config::{DatasetSpec, ModelSpec, PipelineSpec, RunConfig};
use trimnet_core::data::Normalization;
use trimnet_core::train::{KdSchedule, TrainConfig};

fn tiny_config(out_dir: &Path) -> RunConfig {
    RunConfig {
        seed: 42,
        out_dir: out_dir.to_path_buf(),
        dataset: DatasetSpec::Synthetic {
            classes: 3,
            train_samples: 48,
            eval_samples: 24,
            noise: 0.5,
            normalization: Normalization::centered(),
        },
        model: ModelSpec::TinyResnet { widths: vec![8, 16], depths: vec![2, 2], classes: 3 },
        pipeline: PipelineSpec {
            prune_ratio: 0.4,
            plane_fraction: 0.5,
            mid_fraction: 0.5,
            schedule: KdSchedule { epochs: 1, ..KdSchedule::default() },
            teacher: TrainConfig {
                epochs: 1,
                batch_size: 24,
                eval_batch_size: 24,
                bn_recal_batches: 1,
                ..TrainConfig::teacher(0)
            },
            kd: TrainConfig {
                epochs: 1,
                batch_size: 24,
                eval_batch_size: 24,
                bn_recal_batches: 1,
                ..TrainConfig::kd(0)
            },
            mi_bins: 4,
            probe_batch: 24,
            probe_max: 48,
        },
    }
}

fn trimnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trimnet")).args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn pipeline_then_report_over_two_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    let first = dir.path().join("seed42");
    let second = dir.path().join("seed7");
    tiny_config(&first).save(&config).unwrap();

    let stdout = assert_ok(&trimnet(&["pipeline", "--config", config.to_str().unwrap()]));
    assert!(stdout.contains("inner-sliced+kd"), "{stdout}");
    assert!(first.join("summary.json").exists());

    assert_ok(&trimnet(&[
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        second.to_str().unwrap(),
    ]));

    let report_dir = dir.path().join("report");
    let stdout = assert_ok(&trimnet(&[
        "report",
        "--out",
        report_dir.to_str().unwrap(),
        first.to_str().unwrap(),
        second.to_str().unwrap(),
    ]));
    assert!(stdout.contains("\u{b1}"), "{stdout}");
    assert!(stdout.contains("teacher"), "{stdout}");
    assert!(report_dir.join("report.json").exists());
    assert!(report_dir.join("report.csv").exists());
}

#[test]
fn staged_commands_produce_the_pipeline_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    let out = dir.path().join("run");
    tiny_config(&out).save(&config).unwrap();
    let c = config.to_str().unwrap();

    assert_ok(&trimnet(&["train-teacher", "--config", c]));
    assert!(out.join("teacher.ckpt").exists());
    assert!(out.join("teacher_log.csv").exists());

    assert_ok(&trimnet(&["score-mi", "--config", c]));
    assert!(out.join("scores.json").exists());

    let stdout = assert_ok(&trimnet(&["plan-prune", "--config", c, "--ratio", "0.4"]));
    assert!(stdout.contains("budget"), "{stdout}");
    assert_ok(&trimnet(&["apply-prune", "--config", c]));
    assert!(out.join("pruned.ckpt").exists());

    assert_ok(&trimnet(&["slice-planes", "--config", c, "--input", "teacher.ckpt"]));
    assert!(out.join("slice_planes.json").exists());
    assert_ok(&trimnet(&["slice-mid", "--config", c, "--input", "sliced_planes.ckpt"]));
    assert!(out.join("sliced_mid.ckpt").exists());

    assert_ok(&trimnet(&[
        "bn-recal",
        "--config",
        c,
        "--input",
        "sliced_mid.ckpt",
        "--output",
        "recal.ckpt",
        "--batches",
        "1",
    ]));

    // The student is narrower than the teacher, so this also exercises the
    // feature-coordinate lookup through slice_planes.json.
    assert_ok(&trimnet(&["kd", "--config", c, "--label", "mid", "--input", "recal.ckpt"]));
    assert!(out.join("kd_mid.ckpt").exists());
    assert!(out.join("kd_mid_log.csv").exists());

    let json = out.join("profile.json");
    let stdout = assert_ok(&trimnet(&[
        "profile",
        "--config",
        c,
        "--input",
        "kd_mid.ckpt",
        "--json",
        json.to_str().unwrap(),
    ]));
    assert!(stdout.contains("params"), "{stdout}");
    assert!(json.exists());

    let bad = trimnet(&["slice-planes", "--config", c, "--input", "teacher.ckpt", "--fractions", "abc"]);
    assert!(!bad.status.success());
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("fraction"), "{stderr}");
}

#[test]
fn invalid_config_fails_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    let mut bad = tiny_config(&dir.path().join("run"));
    bad.pipeline.prune_ratio = 1.5;
    bad.save(&config).unwrap();

    let out = trimnet(&["plan-prune", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("prune_ratio"), "{stderr}");
}
