use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cxr_core::config::Config;
use cxr_core::data::{build_dataset, ingest_source, provenance_report, BinaryDataset, DatasetSpec, Manifest};
use cxr_core::metrics::{bundled_fixtures, load_fixtures, validate_against_published};
use cxr_core::split::{assign_folds, FoldAssignment};
use cxr_core::train::{run_matrix, DiskImages, RunRecord};
use cxr_core::{fsutil, report, synth, Error, Source};

use crate::{Common, SynthArgs, ValidateArgs};

pub const EXIT_DISCREPANCY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING_INPUT: u8 = 3;

/// Usage problems found after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<Error>() {
        Some(
            Error::MissingFile(_)
            | Error::MissingDirectory(_)
            | Error::NoReadableImages(_)
            | Error::WeightsUnavailable { .. },
        ) => EXIT_MISSING_INPUT,
        Some(Error::InvalidArgument(_) | Error::UnsupportedDevice(_)) => EXIT_USAGE,
        _ => EXIT_DISCREPANCY,
    }
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env();
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = &c.$flag { cfg.$($field).+ = v.clone().into(); })*
        };
    }
    set!(
        seed => seed,
        out => out,
        device => device,
        normal_limit => normal_limit,
        datasets => datasets,
        backbones => backbones,
        folds => folds,
        pretrained => pretrained,
        weights_dir => weights_dir,
        epochs => train.epochs,
        batch_size => train.batch_size,
        learning_rate => train.learning_rate,
        dropout => train.dropout,
        checkpoints => train.checkpoints,
    );
    for (flag, field) in [
        (&c.covid_repo, &mut cfg.covid_repo),
        (&c.chestxray8, &mut cfg.chestxray8),
        (&c.kaggle_pneumonia, &mut cfg.kaggle_pneumonia),
    ] {
        if flag.is_some() {
            *field = flag.clone();
        }
    }
    cfg.check_device()?;
    if let Some(k) = cfg.folds.iter().find(|k| !(1..=5).contains(*k)) {
        return Err(Usage(format!("fold {k} outside 1..=5")).into());
    }
    Ok(cfg)
}

fn roots(cfg: &Config) -> BTreeMap<Source, PathBuf> {
    [
        (Source::CovidRepo, &cfg.covid_repo),
        (Source::ChestXray8, &cfg.chestxray8),
        (Source::KagglePneumonia, &cfg.kaggle_pneumonia),
    ]
    .into_iter()
    .filter_map(|(s, p)| p.clone().map(|p| (s, p)))
    .collect()
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Ingests every configured source and writes the manifest plus the
/// provenance report.
fn do_ingest(cfg: &Config) -> Result<Manifest> {
    let roots = roots(cfg);
    if roots.is_empty() {
        return Err(Usage("no source directories configured (covid_repo, chestxray8, kaggle_pneumonia)".into()).into());
    }
    let mut records = Vec::new();
    let mut skipped = BTreeMap::new();
    for (&source, root) in &roots {
        let ingested = ingest_source(root, source)?;
        log::info!(
            "{source}: {} images, {} skipped",
            ingested.records.len(),
            ingested.skipped.len()
        );
        records.extend(ingested.records);
        skipped.insert(source, ingested.skipped);
    }
    let (manifest, notes) = Manifest::assemble(roots, records, cfg.normal_limit)?;
    mkdir(&cfg.out)?;
    let prov = cfg.provenance();
    manifest.write(&cfg.manifest_path(), &prov)?;
    let report = provenance_report(&manifest, &skipped, &notes, &prov);
    fsutil::write_atomic(&cfg.out.join("ingest_report.txt"), report.as_bytes())?;
    Ok(manifest)
}

pub fn ingest(c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let manifest = do_ingest(&cfg)?;
    println!(
        "wrote {} ({} records, checksum {})",
        cfg.manifest_path().display(),
        manifest.records.len(),
        manifest.checksum
    );
    Ok(ExitCode::SUCCESS)
}

fn datasets(cfg: &Config, manifest: &Manifest) -> Result<Vec<BinaryDataset>> {
    cfg.datasets
        .iter()
        .map(|&name| {
            // warnings are already logged by the builder
            let (ds, _) = build_dataset(manifest, &DatasetSpec::reference(name))?;
            Ok(ds)
        })
        .collect()
}

pub fn build_datasets(c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let manifest = Manifest::load(&cfg.manifest_path())?;
    let prov = cfg.provenance();
    for ds in datasets(&cfg, &manifest)? {
        let path = cfg.dataset_path(ds.name);
        fsutil::write_atomic(&path, ds.to_text(&prov).as_bytes())?;
        println!(
            "wrote {} ({} positive, {} negative)",
            path.display(),
            ds.positives(),
            ds.len() - ds.positives()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn write_folds(cfg: &Config, ds: &BinaryDataset) -> Result<FoldAssignment> {
    let folds = assign_folds(ds, cfg.seed)?;
    folds.write(&cfg.fold_path(ds.name), &cfg.provenance())?;
    Ok(folds)
}

pub fn split(c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let manifest = Manifest::load(&cfg.manifest_path())?;
    for ds in datasets(&cfg, &manifest)? {
        let folds = write_folds(&cfg, &ds)?;
        let split = folds.split(1)?;
        println!(
            "wrote {} ({} records, fold 1 test size {})",
            cfg.fold_path(ds.name).display(),
            folds.len(),
            split.test.len()
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn run(c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    mkdir(&cfg.out)?;
    fsutil::write_atomic(&cfg.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let manifest = if cfg.manifest_path().is_file() {
        Manifest::load(&cfg.manifest_path())?
    } else {
        log::info!("no manifest yet; ingesting");
        do_ingest(&cfg)?
    };
    let mut data = Vec::new();
    for ds in datasets(&cfg, &manifest)? {
        let path = cfg.fold_path(ds.name);
        let folds = if path.is_file() {
            let f = FoldAssignment::load(&path)?;
            if !f.matches(&ds) {
                bail!(
                    "{} does not match the records of {}; rerun split",
                    path.display(),
                    ds.name
                );
            }
            f
        } else {
            write_folds(&cfg, &ds)?
        };
        data.push((ds, folds));
    }
    let images = DiskImages::new(&manifest)?;
    let outcome = run_matrix(&cfg, &data, &images)?;
    let prov = cfg.provenance();
    let tables = report::metric_tables(&outcome.records)?;
    let written = report::write_tables(&tables, &cfg.tables_dir(), &prov)?;
    for t in &tables {
        println!("{}", t.to_text());
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    println!(
        "{} trained, {} resumed, {} failed",
        outcome.trained,
        outcome.resumed,
        outcome.failures.len()
    );
    for f in &outcome.failures {
        eprintln!("failed: {} {} fold {}: {}", f.backbone, f.dataset, f.fold, f.error);
    }
    Ok(if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_DISCREPANCY)
    })
}

pub fn report(c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let records = RunRecord::load_dir(&cfg.runs_dir())?;
    if records.is_empty() {
        return Err(Error::MissingFile(cfg.runs_dir().join("*.run")).into());
    }
    let files = report::write_report(&records, &cfg.report_dir(), &cfg.provenance())?;
    for p in files.plots.iter().chain(&files.curve_data) {
        println!("wrote {}", p.display());
    }
    println!("wrote {}", files.comparison.display());
    Ok(ExitCode::SUCCESS)
}

pub fn validate(v: &ValidateArgs) -> Result<ExitCode> {
    let cfg = load_config(&v.common)?;
    let rows = match &v.fixtures {
        Some(p) => load_fixtures(p)?,
        None => bundled_fixtures(),
    };
    let report = validate_against_published(&rows);
    print!("{report}");
    if v.common.out.is_some() {
        mkdir(&cfg.out)?;
        let text = cfg.provenance().header("validation report") + &report.to_string();
        fsutil::write_atomic(&cfg.out.join("validation.txt"), text.as_bytes())?;
    }
    Ok(if report.is_clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_DISCREPANCY)
    })
}

pub fn synth(s: &SynthArgs) -> Result<ExitCode> {
    let Some(out) = &s.common.out else {
        return Err(Usage("synth needs --out".into()).into());
    };
    let spec = synth::SynthSpec {
        covid: s.covid,
        normal: s.normal,
        bacterial: s.bacterial,
        viral: s.viral,
        side: s.side,
        seed: s.common.seed.unwrap_or(synth::SynthSpec::default().seed),
    };
    mkdir(out)?;
    let out = std::fs::canonicalize(out).with_context(|| format!("resolving {}", out.display()))?;
    let layout = synth::generate(&out.join("sources"), &spec)?;
    let cfg = synth::smoke_config(&layout, &out.join("results"));
    let path = out.join("smoke.toml");
    fsutil::write_atomic(&path, cfg.to_toml().as_bytes())?;
    println!("wrote synthetic sources under {}", out.join("sources").display());
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}
