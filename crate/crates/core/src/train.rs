//! Fine-tuning one (backbone, dataset, fold) run, and the resumable grid.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Provenance};
use crate::data::{preprocess_path, BinaryDataset, ImageRecord, Manifest, Normalization};
use crate::metrics::{confusion_from_predictions, ConfusionCounts};
use crate::nn::{self, Adam, AdamConfig, CheckpointMeta, Mode, Model, ModelConfig};
use crate::split::{self, FoldAssignment};
use crate::{fsutil, Backbone, DatasetName, Error, Result, TOOL_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    /// Write a weight checkpoint next to each finished run.
    pub checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 3,
            epochs: 30,
            dropout: nn::DEFAULT_DROPOUT,
            checkpoints: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    /// Fields that differ from the defaults, as `name -> (default, used)`.
    pub fn overrides(&self) -> BTreeMap<String, (String, String)> {
        let ours = serde_json::to_value(self).expect("serializable");
        let base = serde_json::to_value(TrainConfig::default()).expect("serializable");
        let mut out = BTreeMap::new();
        if let (Some(a), Some(b)) = (ours.as_object(), base.as_object()) {
            for (k, v) in a {
                if b.get(k) != Some(v) {
                    out.insert(k.clone(), (b[k].to_string(), v.to_string()));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// 1 for COVID-19, 0 for the negative class.
    pub label: u8,
    /// Probability of the positive class.
    pub probability: f64,
}

/// Argmax over `[negative, positive]`; ties go to the positive class.
pub fn decide(negative: f64, positive: f64) -> Prediction {
    Prediction {
        label: (positive >= negative) as u8,
        probability: positive,
    }
}

/// One labelled record in a fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub target: u8,
}

/// Supplies preprocessed `[side, side, 3]` images by record id.
pub trait ImageSource: Sync {
    fn load(&self, id: &str, backbone: Backbone) -> Result<Array3<f64>>;
}

/// Preloaded tensors, used by tests and the synthetic fixture.
#[derive(Debug, Clone, Default)]
pub struct InMemoryImages {
    pub images: HashMap<String, Array3<f64>>,
}

impl ImageSource for InMemoryImages {
    fn load(&self, id: &str, _backbone: Backbone) -> Result<Array3<f64>> {
        self.images
            .get(id)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no image for record {id}")))
    }
}

/// Decodes files listed in a manifest and preprocesses them per backbone.
pub struct DiskImages {
    records: HashMap<String, (ImageRecord, PathBuf)>,
}

impl DiskImages {
    pub fn new(manifest: &Manifest) -> Result<DiskImages> {
        let records = manifest
            .records
            .iter()
            .map(|r| Ok((r.id.clone(), (r.clone(), manifest.full_path(r)?))))
            .collect::<Result<_>>()?;
        Ok(DiskImages { records })
    }
}

impl ImageSource for DiskImages {
    fn load(&self, id: &str, backbone: Backbone) -> Result<Array3<f64>> {
        let (rec, path) = self
            .records
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("record {id} is not in the manifest")))?;
        preprocess_path(rec, path, backbone.input_side(), &Normalization::for_backbone(backbone))
    }
}

fn load_batch(images: &dyn ImageSource, ids: &[&str], backbone: Backbone) -> Result<Array4<f64>> {
    use rayon::prelude::*;
    let tensors: Vec<Array3<f64>> = ids
        .par_iter()
        .map(|id| images.load(id, backbone))
        .collect::<Result<_>>()?;
    nn::stack_images(&tensors)
}

/// Class decisions for `ids`, evaluated in batches of `batch_size` in
/// inference mode.
pub fn predict(
    model: &mut Model,
    ids: &[&str],
    images: &dyn ImageSource,
    batch_size: usize,
) -> Result<BTreeMap<String, Prediction>> {
    let backbone = model.config().backbone;
    let mut out = BTreeMap::new();
    for chunk in ids.chunks(batch_size.max(1)) {
        let probs = model.predict_proba(&load_batch(images, chunk, backbone)?)?;
        for (id, row) in chunk.iter().zip(probs.rows()) {
            out.insert(id.to_string(), decide(row[0], row[1]));
        }
    }
    Ok(out)
}

/// Identifies a run inside the grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub dataset: DatasetName,
    pub fold: u8,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub provenance: Provenance,
    pub model: ModelConfig,
    pub dataset: DatasetName,
    pub fold: u8,
    pub seed: u64,
    pub train: TrainConfig,
    /// Hyperparameters changed from their defaults: name -> [default, used].
    pub overrides: BTreeMap<String, (String, String)>,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: Vec<EpochLog>,
    pub truth: BTreeMap<String, u8>,
    pub predictions: BTreeMap<String, Prediction>,
    pub confusion: ConfusionCounts,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn stem(backbone: Backbone, dataset: DatasetName, fold: u8) -> String {
        format!("{backbone}_{dataset}_fold{fold}")
    }

    pub fn file_name(&self) -> String {
        format!("{}.run", Self::stem(self.model.backbone, self.dataset, self.fold))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.file_name());
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fsutil::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<RunRecord> {
        let text = fsutil::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        })
    }

    /// Every `.run` file in `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Vec<RunRecord>> {
        if !dir.is_dir() {
            return Err(Error::MissingDirectory(dir.to_path_buf()));
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "run"))
            .collect();
        paths.sort();
        paths.iter().map(|p| RunRecord::load(p)).collect()
    }
}

fn accuracy(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

fn guard_disjoint<'a>(train: &[Sample], test: &'a [Sample]) -> Result<BTreeSet<&'a str>> {
    let test_ids: BTreeSet<&str> = test.iter().map(|s| s.id.as_str()).collect();
    if test_ids.len() != test.len() {
        return Err(Error::Leakage("test set lists a record twice".into()));
    }
    if let Some(s) = train.iter().find(|s| test_ids.contains(s.id.as_str())) {
        return Err(Error::Leakage(format!(
            "record {} is in both train and test sets",
            s.id
        )));
    }
    Ok(test_ids)
}

/// Trains `model` on `train` for `cfg.epochs` epochs of shuffled mini-batches,
/// measuring test accuracy after every epoch, and returns the record with
/// final-epoch test predictions.
pub fn train_fold(
    model: &mut Model,
    train: &[Sample],
    test: &[Sample],
    images: &dyn ImageSource,
    cfg: &TrainConfig,
    run: &RunInfo,
    provenance: &Provenance,
) -> Result<RunRecord> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let test_ids = guard_disjoint(train, test)?;
    let started = Instant::now();
    let backbone = model.config().backbone;
    let mut opt = Adam::new(cfg.adam());
    let test_order: Vec<&str> = test.iter().map(|s| s.id.as_str()).collect();
    let truth: BTreeMap<String, u8> = test.iter().map(|s| (s.id.clone(), s.target)).collect();
    let mut order: Vec<&Sample> = train.iter().collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut last_predictions = None;
    model.zero_grad();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        rng.set_stream(epoch as u64);
        split::shuffle(&mut order, &mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
            if let Some(id) = ids.iter().find(|id| test_ids.contains(*id)) {
                return Err(Error::Leakage(format!("test record {id} reached a training batch")));
            }
            let targets: Vec<u8> = batch.iter().map(|s| s.target).collect();
            let x = load_batch(images, &ids, backbone)?;
            let (loss, probs) = model.loss_and_grad(&x, &targets, Mode::Train)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            loss_sum += loss * batch.len() as f64;
            correct += probs
                .rows()
                .into_iter()
                .zip(&targets)
                .filter(|(r, &t)| decide(r[0], r[1]).label == t)
                .count();
            opt.step(model);
        }
        let preds = predict(model, &test_order, images, cfg.batch_size)?;
        let test_correct = preds.iter().filter(|(id, p)| truth[*id] == p.label).count();
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: accuracy(correct, train.len()),
            test_accuracy: accuracy(test_correct, test.len()),
        };
        log::info!(
            "{backbone} {} fold {} epoch {epoch}/{}: loss {:.4} train acc {:.4} test acc {:.4}",
            run.dataset,
            run.fold,
            cfg.epochs,
            log.train_loss,
            log.train_accuracy,
            log.test_accuracy
        );
        logs.push(log);
        last_predictions = Some(preds);
    }
    let predictions = match last_predictions {
        Some(p) => p,
        None => predict(model, &test_order, images, cfg.batch_size)?,
    };
    let predicted: BTreeMap<String, u8> = predictions.iter().map(|(k, p)| (k.clone(), p.label)).collect();
    // also rejects predictions that do not cover exactly the test set
    let confusion = confusion_from_predictions(&truth, &predicted)?;
    Ok(RunRecord {
        provenance: provenance.clone(),
        model: model.config().clone(),
        dataset: run.dataset,
        fold: run.fold,
        seed: run.seed,
        train: cfg.clone(),
        overrides: cfg.overrides(),
        train_size: train.len(),
        test_size: test.len(),
        epochs: logs,
        truth,
        predictions,
        confusion,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Train and test samples of fold `k`.
pub fn fold_samples(dataset: &BinaryDataset, folds: &FoldAssignment, k: u8) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !folds.matches(dataset) {
        return Err(Error::InvalidArgument(format!(
            "fold assignment does not cover exactly the records of {}",
            dataset.name
        )));
    }
    let split = folds.split(k)?;
    let to_samples = |ids: Vec<String>| -> Result<Vec<Sample>> {
        ids.into_iter()
            .map(|id| {
                let rec = dataset
                    .get(&id)
                    .ok_or_else(|| Error::InvalidArgument(format!("fold file lists unknown record {id}")))?;
                Ok(Sample {
                    target: BinaryDataset::target_of(rec),
                    id,
                })
            })
            .collect()
    };
    Ok((to_samples(split.train)?, to_samples(split.test)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub backbone: Backbone,
    pub dataset: DatasetName,
    pub fold: u8,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct GridOutcome {
    /// Records of every finished cell, resumed or new, in grid order.
    pub records: Vec<RunRecord>,
    pub trained: usize,
    pub resumed: usize,
    pub failures: Vec<RunFailure>,
}

/// Runs every (backbone, dataset, fold) cell of the configured grid. Cells
/// with a readable `.run` file are skipped; a failed cell is written as
/// `.failed` and the grid moves on.
pub fn run_matrix(
    config: &Config,
    data: &[(BinaryDataset, FoldAssignment)],
    images: &dyn ImageSource,
) -> Result<GridOutcome> {
    config.train.validate()?;
    // missing weights would fail every cell of that backbone; stop up front
    if config.pretrained {
        for &b in config.backbones.iter().filter(|&&b| b != Backbone::TinyCnn) {
            let path = nn::pretrained_path(&config.weights_dir, b);
            if !path.is_file() {
                return Err(Error::WeightsUnavailable {
                    backbone: b.to_string(),
                    instructions: nn::export_instructions(b, &path),
                    path,
                });
            }
        }
    }
    let runs = config.runs_dir();
    std::fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    let ckpts = config.checkpoints_dir();
    if config.train.checkpoints {
        std::fs::create_dir_all(&ckpts).map_err(|e| Error::io(&ckpts, e))?;
    }
    let provenance = config.provenance();
    let mut outcome = GridOutcome::default();
    for (dataset, folds) in data {
        for &backbone in &config.backbones {
            for &k in &config.folds {
                let stem = RunRecord::stem(backbone, dataset.name, k);
                let run_path = runs.join(format!("{stem}.run"));
                let failed_path = runs.join(format!("{stem}.failed"));
                if run_path.is_file() {
                    match RunRecord::load(&run_path) {
                        Ok(r) => {
                            log::info!("{stem}: already complete, skipping");
                            outcome.resumed += 1;
                            outcome.records.push(r);
                            continue;
                        }
                        Err(e) => log::warn!("{stem}: unreadable record ({e}), retraining"),
                    }
                }
                match run_cell(config, backbone, dataset, folds, k, images, &provenance, &ckpts) {
                    Ok(record) => {
                        record.write(&runs)?;
                        let _ = std::fs::remove_file(&failed_path);
                        outcome.trained += 1;
                        outcome.records.push(record);
                    }
                    Err(e) => {
                        log::error!("{stem}: {e}");
                        let failure = RunFailure {
                            backbone,
                            dataset: dataset.name,
                            fold: k,
                            error: e.to_string(),
                        };
                        let text = serde_json::to_string_pretty(&failure)? + "\n";
                        fsutil::write_atomic(&failed_path, text.as_bytes())?;
                        outcome.failures.push(failure);
                    }
                }
            }
        }
    }
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &Config,
    backbone: Backbone,
    dataset: &BinaryDataset,
    folds: &FoldAssignment,
    k: u8,
    images: &dyn ImageSource,
    provenance: &Provenance,
    ckpts: &Path,
) -> Result<RunRecord> {
    let (train, test) = fold_samples(dataset, folds, k)?;
    let model_cfg = ModelConfig {
        dropout_rate: config.train.dropout,
        pretrained: config.pretrained && backbone != Backbone::TinyCnn,
        init_seed: config.seed,
        ..ModelConfig::new(backbone)
    };
    let mut model = nn::build_model(&model_cfg, &config.weights_dir)?;
    let run = RunInfo {
        dataset: dataset.name,
        fold: k,
        seed: config.seed,
    };
    let record = train_fold(&mut model, &train, &test, images, &config.train, &run, provenance)?;
    if config.train.checkpoints {
        let meta = CheckpointMeta {
            model: model_cfg,
            dataset: dataset.name.to_string(),
            fold: k,
            seed: config.seed,
            tool: TOOL_VERSION.to_string(),
            extra: serde_json::json!({
                "train": config.train,
                "config_digest": provenance.config_digest,
            }),
        };
        let path = ckpts.join(nn::checkpoint_name(backbone, dataset.name.as_str(), k));
        nn::save_checkpoint(&mut model, &path, &meta)?;
    }
    Ok(record)
}
