use std::path::Path;
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxr-bench"))
        .args(args)
        .env_remove("CXR_DEVICE")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic sources plus their smoke config under `dir`.
fn synth(dir: &Path) -> String {
    let o = bench(&[
        "synth",
        "--out",
        p(dir),
        "--covid",
        "6",
        "--normal",
        "6",
        "--bacterial",
        "6",
        "--viral",
        "6",
        "--side",
        "24",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    dir.join("smoke.toml").to_str().unwrap().to_string()
}

#[test]
fn validate_bundled_tables_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let o = bench(&["validate", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0);
    assert!(text(&o.stdout).contains("checked 90 rows"));
    let saved = std::fs::read_to_string(dir.path().join("validation.txt")).unwrap();
    assert!(saved.starts_with("# validation report"));
}

#[test]
fn validate_missing_fixture_file_exits_3() {
    let o = bench(&["validate", "--fixtures", "/nonexistent/tables.tsv"]);
    assert_eq!(code(&o), 3);
    assert!(text(&o.stderr).contains("/nonexistent/tables.tsv"));
}

#[test]
fn validate_flags_a_corrupted_row() {
    let dir = tempfile::tempdir().unwrap();
    let bundled = include_str!("../../core/fixtures/published_tables.tsv");
    let row = bundled
        .lines()
        .find(|l| l.starts_with("resnet50\tdataset3\tpooled"))
        .unwrap();
    let mut fields: Vec<&str> = row.split('\t').collect();
    fields[7] = "98.0";
    let broken = bundled.replace(row, &fields.join("\t"));
    let path = dir.path().join("tables.tsv");
    std::fs::write(&path, broken).unwrap();
    let o = bench(&["validate", "--fixtures", p(&path)]);
    assert_eq!(code(&o), 1);
    let out = text(&o.stdout);
    assert!(out.contains("1 discrepancies"), "{out}");
    assert!(out.contains("ResNet50") || out.contains("resnet50"), "{out}");
}

#[test]
fn missing_source_root_exits_3_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = bench(&["ingest", "--out", p(dir.path()), "--covid-repo", "/nonexistent/covid"]);
    assert_eq!(code(&o), 3);
    assert!(text(&o.stderr).contains("/nonexistent/covid"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&bench(&["split", "--folds", "7"])), 2);
    assert_eq!(code(&bench(&["ingest", "--device", "tpu"])), 2);
    assert_eq!(code(&bench(&["run", "--backbones", "vgg16"])), 2);
    assert_eq!(code(&bench(&["ingest", "--out", "/tmp"])), 2, "no sources configured");
}

#[test]
fn ingest_and_split_are_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let results = dir.path().join("results");
    let files = [
        results.join("manifest.tsv"),
        results.join("dataset1.folds"),
        results.join("dataset2.folds"),
        results.join("dataset3.folds"),
    ];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        for cmd in ["ingest", "split"] {
            let o = bench(&[cmd, "--config", &cfg, "--datasets", "dataset1,dataset2,dataset3"]);
            assert_eq!(code(&o), 0, "{cmd}: {}", text(&o.stderr));
        }
        snapshots.push(files.iter().map(|f| std::fs::read(f).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(snapshots[0], snapshots[1]);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let results = dir.path().join("results");
    let run_args = ["run", "--config", &cfg, "--folds", "1,2", "--epochs", "2"];

    let o = bench(&["build-datasets", "--config", &cfg]);
    assert_eq!(code(&o), 3, "build-datasets needs a manifest first");

    let o = bench(&run_args);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let out = text(&o.stdout);
    assert!(out.contains("2 trained, 0 resumed, 0 failed"), "{out}");
    let echoed = std::fs::read_to_string(results.join("config.toml")).unwrap();
    assert!(echoed.contains("epochs = 2"));
    assert!(results.join("runs/tiny_cnn_dataset1_fold1.run").is_file());
    assert!(results
        .join("checkpoints/tiny_cnn_dataset1_fold2.safetensors")
        .is_file());
    assert!(results.join("tables/dataset1.tsv").is_file());

    let o = bench(&run_args);
    assert!(text(&o.stdout).contains("0 trained, 2 resumed"));

    let o = bench(&["report", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    for name in [
        "dataset1_fold1_train-acc.png",
        "dataset1_fold2_test-acc.png",
        "dataset1_fold1_curves.tsv",
        "comparison.tsv",
    ] {
        assert!(results.join("report").join(name).is_file(), "{name} missing");
    }
}

#[test]
fn report_without_runs_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = bench(&["report", "--out", p(dir.path())]);
    assert_eq!(code(&o), 3);
}

#[test]
fn missing_pretrained_weights_exit_3_with_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path());
    let weights = dir.path().join("no-weights");
    let o = bench(&[
        "run",
        "--config",
        &cfg,
        "--backbones",
        "resnet50",
        "--pretrained",
        "true",
        "--weights-dir",
        p(&weights),
    ]);
    assert_eq!(code(&o), 3);
    let err = text(&o.stderr);
    assert!(
        err.contains("resnet50.safetensors") && err.contains("export_weights.py"),
        "{err}"
    );
}
