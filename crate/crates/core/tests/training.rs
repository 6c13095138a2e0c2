use std::path::Path;

use cxr_core::config::{Config, Provenance};
use cxr_core::nn::{build_model, load_checkpoint, Model, ModelConfig};
use cxr_core::split::assign_folds;
use cxr_core::train::{fold_samples, predict, run_matrix, train_fold, InMemoryImages, RunInfo, RunRecord, TrainConfig};
use cxr_core::{synth, Backbone, DatasetName};

fn tiny(seed: u64) -> Model {
    let cfg = ModelConfig {
        init_seed: seed,
        ..ModelConfig::new(Backbone::TinyCnn)
    };
    build_model(&cfg, Path::new("")).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: synth::SMOKE_LEARNING_RATE,
        ..TrainConfig::default()
    }
}

fn grid_config(out: &Path, dataset: DatasetName, epochs: usize) -> Config {
    Config {
        out: out.to_path_buf(),
        datasets: vec![dataset],
        backbones: vec![Backbone::TinyCnn],
        pretrained: false,
        train: quick(epochs),
        ..Config::default()
    }
}

fn fold1(
    per_class: usize,
    seed: u64,
) -> (
    cxr_core::data::BinaryDataset,
    InMemoryImages,
    Vec<cxr_core::train::Sample>,
    Vec<cxr_core::train::Sample>,
) {
    let (ds, images) = synth::in_memory(DatasetName::Dataset1, per_class, Backbone::TinyCnn, seed);
    let folds = assign_folds(&ds, 42).unwrap();
    let (train, test) = fold_samples(&ds, &folds, 1).unwrap();
    (ds, images, train, test)
}

#[test]
fn zero_epochs_gives_empty_log_and_full_predictions() {
    let (_, images, train, test) = fold1(5, 1);
    let run = RunInfo {
        dataset: DatasetName::Dataset1,
        fold: 1,
        seed: 42,
    };
    let rec = train_fold(
        &mut tiny(42),
        &train,
        &test,
        &images,
        &quick(0),
        &run,
        &Provenance::new(42, ""),
    )
    .unwrap();
    assert!(rec.epochs.is_empty());
    assert_eq!(rec.predictions.len(), test.len());
    assert_eq!(rec.confusion.total() as usize, test.len());
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (_, images, train, test) = fold1(5, 2);
    let run = RunInfo {
        dataset: DatasetName::Dataset1,
        fold: 1,
        seed: 9,
    };
    let prov = Provenance::new(9, "");
    let a = train_fold(&mut tiny(9), &train, &test, &images, &quick(2), &run, &prov).unwrap();
    let b = train_fold(&mut tiny(9), &train, &test, &images, &quick(2), &run, &prov).unwrap();
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.predictions, b.predictions);
    let other = RunInfo { seed: 10, ..run };
    let c = train_fold(&mut tiny(9), &train, &test, &images, &quick(2), &other, &prov).unwrap();
    assert_ne!(a.epochs, c.epochs, "shuffle seed had no effect");
}

#[test]
fn predictions_do_not_depend_on_batch_size() {
    let (ds, images) = synth::in_memory(DatasetName::Dataset3, 3, Backbone::TinyCnn, 3);
    let ids: Vec<&str> = ds.records.iter().map(|r| r.id.as_str()).collect();
    let mut m = tiny(4);
    let one = predict(&mut m, &ids, &images, 1).unwrap();
    let four = predict(&mut m, &ids, &images, 4).unwrap();
    assert_eq!(one.len(), ids.len());
    for (id, p) in &one {
        assert_eq!(p.label, four[id].label);
        assert!((p.probability - four[id].probability).abs() < 1e-12);
    }
}

#[test]
fn grid_covers_five_folds_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, images) = synth::in_memory(DatasetName::Dataset2, 5, Backbone::TinyCnn, 4);
    let config = grid_config(dir.path(), DatasetName::Dataset2, 1);
    let folds = assign_folds(&ds, config.seed).unwrap();
    let data = [(ds.clone(), folds)];

    let first = run_matrix(&config, &data, &images).unwrap();
    assert_eq!((first.trained, first.resumed, first.failures.len()), (5, 0, 0));
    let mut seen: Vec<u8> = first.records.iter().map(|r| r.fold).collect();
    seen.sort();
    assert_eq!(seen, vec![1, 2, 3, 4, 5]);
    let scored: usize = first.records.iter().map(|r| r.test_size).sum();
    assert_eq!(scored, ds.len(), "every record is tested exactly once");

    let again = run_matrix(&config, &data, &images).unwrap();
    assert_eq!((again.trained, again.resumed), (0, 5));
    assert_eq!(RunRecord::load_dir(&config.runs_dir()).unwrap().len(), 5);
}

#[test]
fn failed_cell_is_recorded_and_grid_continues() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, mut images) = synth::in_memory(DatasetName::Dataset1, 5, Backbone::TinyCnn, 5);
    let config = Config {
        folds: vec![1, 2],
        ..grid_config(dir.path(), DatasetName::Dataset1, 1)
    };
    let folds = assign_folds(&ds, config.seed).unwrap();
    // the lost image sits in every fold's train or test set, so both cells fail
    let lost = folds.split(1).unwrap().test[0].clone();
    images.images.remove(&lost);
    let outcome = run_matrix(&config, &[(ds, folds)], &images).unwrap();
    assert_eq!(outcome.failures.len(), 2, "grid stopped after the first failure");
    assert!(config.runs_dir().join("tiny_cnn_dataset1_fold1.failed").is_file());
    assert!(outcome.failures[0].error.contains(&lost));
}

#[test]
fn checkpoint_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, images) = synth::in_memory(DatasetName::Dataset1, 5, Backbone::TinyCnn, 6);
    let config = Config {
        folds: vec![3],
        ..grid_config(dir.path(), DatasetName::Dataset1, 2)
    };
    let folds = assign_folds(&ds, config.seed).unwrap();
    let outcome = run_matrix(&config, &[(ds, folds)], &images).unwrap();
    let rec = &outcome.records[0];
    let (mut model, meta) =
        load_checkpoint(&config.checkpoints_dir().join("tiny_cnn_dataset1_fold3.safetensors")).unwrap();
    assert_eq!((meta.fold, meta.seed), (3, config.seed));
    let ids: Vec<&str> = rec.truth.keys().map(String::as_str).collect();
    let again = predict(&mut model, &ids, &images, 3).unwrap();
    for (id, p) in &rec.predictions {
        assert_eq!(p.label, again[id].label);
        assert!((p.probability - again[id].probability).abs() < 1e-12);
    }
}
