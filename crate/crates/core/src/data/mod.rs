//! Image records, the unified manifest, and the three binary datasets.

mod image;
mod ingest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Provenance;
use crate::{fsutil, DatasetName, Error, Label, Result, Source};

pub use self::image::{preprocess_image, preprocess_path, Normalization};
pub use self::ingest::{ingest_source, Ingested, Skipped};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// `{source}/{relative path}`; unique across a manifest.
    pub id: String,
    pub source: Source,
    pub label: Label,
    /// Path relative to the source root, `/`-separated.
    pub path: String,
    /// Hex SHA-256 of the file contents.
    pub digest: String,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub patient: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub roots: BTreeMap<Source, PathBuf>,
    /// Sorted by id.
    pub records: Vec<ImageRecord>,
    pub checksum: String,
}

/// What assembly removed, for the provenance report.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssemblyNotes {
    pub duplicates: BTreeMap<Source, usize>,
    pub truncated_normals: usize,
}

const MANIFEST_COLUMNS: &str = "id\tsource\tlabel\tpath\tdigest\twidth\theight\tchannels\tpatient";

fn checksum(records: &[ImageRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl Manifest {
    /// Merges ingested sources: drops repeated content within a source (the
    /// lexicographically first id wins), optionally keeps only the first
    /// `normal_limit` normal images, and sorts by id.
    pub fn assemble(
        roots: BTreeMap<Source, PathBuf>,
        ingested: Vec<ImageRecord>,
        normal_limit: Option<usize>,
    ) -> Result<(Manifest, AssemblyNotes)> {
        let mut records = ingested;
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let mut notes = AssemblyNotes::default();
        let mut seen: BTreeSet<(Source, String)> = BTreeSet::new();
        let mut ids: BTreeSet<String> = BTreeSet::new();
        let mut kept = Vec::with_capacity(records.len());
        for r in records {
            if !ids.insert(r.id.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate record id {}", r.id)));
            }
            if !seen.insert((r.source, r.digest.clone())) {
                *notes.duplicates.entry(r.source).or_default() += 1;
                continue;
            }
            if r.label.source() != r.source {
                return Err(Error::InvalidArgument(format!(
                    "record {} has label {} which cannot come from {}",
                    r.id, r.label, r.source
                )));
            }
            kept.push(r);
        }
        if let Some(limit) = normal_limit {
            let mut normals = 0;
            kept.retain(|r| {
                if r.label != Label::Normal {
                    return true;
                }
                normals += 1;
                normals <= limit
            });
            notes.truncated_normals = normals.saturating_sub(limit);
        }
        let checksum = checksum(&kept);
        Ok((
            Manifest {
                roots,
                records: kept,
                checksum,
            },
            notes,
        ))
    }

    pub fn count(&self, source: Source, label: Label) -> usize {
        self.records
            .iter()
            .filter(|r| r.source == source && r.label == label)
            .count()
    }

    pub fn root_of(&self, record: &ImageRecord) -> Result<&Path> {
        self.roots
            .get(&record.source)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::InvalidArgument(format!("manifest has no root for {}", record.source)))
    }

    pub fn full_path(&self, record: &ImageRecord) -> Result<PathBuf> {
        Ok(self.root_of(record)?.join(&record.path))
    }

    pub fn to_text(&self, provenance: &Provenance) -> String {
        let mut out = provenance.header("image manifest");
        for (source, root) in &self.roots {
            let _ = writeln!(out, "# root {source}={}", root.display());
        }
        let _ = writeln!(out, "# checksum={}", self.checksum);
        out.push_str(MANIFEST_COLUMNS);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id,
                r.source,
                r.label,
                r.path,
                r.digest,
                r.width,
                r.height,
                r.channels,
                r.patient.as_deref().unwrap_or("-")
            );
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Manifest> {
        let mut roots = BTreeMap::new();
        let mut records = Vec::new();
        let mut declared = None;
        for (i, line) in text.lines().enumerate() {
            let err = |reason: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                reason,
            };
            if let Some(rest) = line.strip_prefix("# root ") {
                let (s, p) = rest.split_once('=').ok_or_else(|| err("bad root line".into()))?;
                roots.insert(s.parse().map_err(|e: Error| err(e.to_string()))?, PathBuf::from(p));
                continue;
            }
            if let Some(c) = line.strip_prefix("# checksum=") {
                declared = Some(c.to_string());
                continue;
            }
            if line.starts_with('#') || line.is_empty() || line == MANIFEST_COLUMNS {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 9 {
                return Err(err(format!("expected 9 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|e| err(format!("{s:?}: {e}")));
            records.push(ImageRecord {
                id: f[0].to_string(),
                source: f[1].parse().map_err(|e: Error| err(e.to_string()))?,
                label: f[2].parse().map_err(|e: Error| err(e.to_string()))?,
                path: f[3].to_string(),
                digest: f[4].to_string(),
                width: num(f[5])?,
                height: num(f[6])?,
                channels: num(f[7])? as u8,
                patient: (f[8] != "-").then(|| f[8].to_string()),
            });
        }
        if records.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: 0,
                reason: "records not strictly sorted by id".into(),
            });
        }
        let checksum = checksum(&records);
        if declared.as_deref().is_some_and(|d| d != checksum) {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: 0,
                reason: "checksum does not match record ids".into(),
            });
        }
        Ok(Manifest {
            roots,
            records,
            checksum,
        })
    }

    pub fn write(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        fsutil::write_atomic(path, self.to_text(provenance).as_bytes())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fsutil::read_to_string(path)?;
        Manifest::parse(&text, &path.display().to_string())
    }
}

/// One binary task: COVID-19 against a single negative class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub positive_label: Label,
    pub negative_label: Label,
    pub expected_positive_count: usize,
    pub expected_negative_count: usize,
}

impl DatasetSpec {
    /// Reference class counts of the three published datasets.
    pub fn reference(name: DatasetName) -> DatasetSpec {
        let expected_negative_count = match name {
            DatasetName::Dataset1 => 2800,
            DatasetName::Dataset2 => 1493,
            DatasetName::Dataset3 => 2772,
        };
        DatasetSpec {
            name,
            positive_label: Label::Covid19,
            negative_label: name.negative_label(),
            expected_positive_count: 341,
            expected_negative_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDataset {
    pub name: DatasetName,
    /// Sorted by id.
    pub records: Vec<ImageRecord>,
}

impl BinaryDataset {
    /// Binary target: 1 for COVID-19, 0 for the negative class.
    pub fn target_of(record: &ImageRecord) -> u8 {
        (record.label == Label::Covid19) as u8
    }

    /// Builds a dataset from bare `(id, label)` pairs; paths equal ids.
    pub fn from_items(name: DatasetName, mut items: Vec<(String, Label)>) -> BinaryDataset {
        items.sort();
        BinaryDataset {
            name,
            records: items
                .into_iter()
                .map(|(id, label)| ImageRecord {
                    path: id.clone(),
                    id,
                    source: label.source(),
                    label,
                    digest: String::new(),
                    width: 0,
                    height: 0,
                    channels: 1,
                    patient: None,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| Self::target_of(r) == 1).count()
    }

    pub fn targets(&self) -> BTreeMap<String, u8> {
        self.records
            .iter()
            .map(|r| (r.id.clone(), Self::target_of(r)))
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn to_text(&self, provenance: &Provenance) -> String {
        let mut out = provenance.header("binary dataset");
        let _ = writeln!(out, "# dataset={}", self.name);
        out.push_str("id\tlabel\ttarget\n");
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}", r.id, r.label, Self::target_of(r));
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub warnings: Vec<String>,
}

pub fn build_dataset(manifest: &Manifest, spec: &DatasetSpec) -> Result<(BinaryDataset, BuildReport)> {
    let records: Vec<ImageRecord> = manifest
        .records
        .iter()
        .filter(|r| r.label == spec.positive_label || r.label == spec.negative_label)
        .cloned()
        .collect();
    let pos = records.iter().filter(|r| r.label == spec.positive_label).count();
    let neg = records.len() - pos;
    for (label, n) in [(spec.positive_label, pos), (spec.negative_label, neg)] {
        if n == 0 {
            return Err(Error::MissingClass {
                dataset: spec.name.to_string(),
                label: label.to_string(),
            });
        }
    }
    let mut report = BuildReport::default();
    for (label, n, expected) in [
        (spec.positive_label, pos, spec.expected_positive_count),
        (spec.negative_label, neg, spec.expected_negative_count),
    ] {
        if n != expected {
            let msg = format!("{}: {label} count {n} differs from reference {expected}", spec.name);
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
    }
    Ok((
        BinaryDataset {
            name: spec.name,
            records,
        },
        report,
    ))
}

/// Plain-text per-source, per-class counts against the reference counts.
pub fn provenance_report(
    manifest: &Manifest,
    skipped: &BTreeMap<Source, Vec<Skipped>>,
    notes: &AssemblyNotes,
    provenance: &Provenance,
) -> String {
    let mut out = provenance.header("ingest provenance report");
    let _ = writeln!(out, "manifest checksum {}", manifest.checksum);
    let _ = writeln!(
        out,
        "\n{:<18}{:<11}{:>8}{:>11}  status",
        "source", "class", "count", "reference"
    );
    let expected = [
        (Source::CovidRepo, Label::Covid19, 341),
        (Source::ChestXray8, Label::Normal, 2800),
        (Source::KagglePneumonia, Label::Bacterial, 2772),
        (Source::KagglePneumonia, Label::Viral, 1493),
    ];
    for (source, label, reference) in expected {
        let n = manifest.count(source, label);
        let status = if n == reference { "ok" } else { "differs" };
        let _ = writeln!(
            out,
            "{:<18}{:<11}{:>8}{:>11}  {status}",
            source.as_str(),
            label.as_str(),
            n,
            reference
        );
    }
    out.push('\n');
    for (source, list) in skipped {
        let mut by_reason: BTreeMap<&str, usize> = BTreeMap::new();
        for s in list {
            *by_reason.entry(s.reason.as_str()).or_default() += 1;
        }
        let _ = writeln!(out, "skipped in {source}: {}", list.len());
        for (reason, n) in by_reason {
            let _ = writeln!(out, "  {n:>6}  {reason}");
        }
    }
    for (source, n) in &notes.duplicates {
        let _ = writeln!(out, "duplicate content removed in {source}: {n}");
    }
    if notes.truncated_normals > 0 {
        let _ = writeln!(out, "normal images beyond limit dropped: {}", notes.truncated_normals);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: Label, digest: &str) -> ImageRecord {
        ImageRecord {
            id: id.to_string(),
            source: label.source(),
            label,
            path: id.to_string(),
            digest: digest.to_string(),
            width: 8,
            height: 8,
            channels: 1,
            patient: None,
        }
    }

    fn manifest(records: Vec<ImageRecord>) -> Manifest {
        Manifest::assemble(BTreeMap::new(), records, None).unwrap().0
    }

    #[test]
    fn assembly_sorts_and_dedups_within_source() {
        let (m, notes) = Manifest::assemble(
            BTreeMap::new(),
            vec![
                rec("covid_repo/b", Label::Covid19, "d1"),
                rec("covid_repo/a", Label::Covid19, "d1"),
                rec("chestxray8/a", Label::Normal, "d1"),
            ],
            None,
        )
        .unwrap();
        let ids: Vec<_> = m.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["chestxray8/a", "covid_repo/a"]);
        assert_eq!(notes.duplicates[&Source::CovidRepo], 1);
    }

    #[test]
    fn normal_limit_keeps_first_ids() {
        let records = (0..5)
            .map(|i| rec(&format!("chestxray8/{i}"), Label::Normal, &i.to_string()))
            .collect();
        let (m, notes) = Manifest::assemble(BTreeMap::new(), records, Some(3)).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.records[2].id, "chestxray8/2");
        assert_eq!(notes.truncated_normals, 2);
    }

    #[test]
    fn wrong_source_for_label_rejected() {
        let mut r = rec("x", Label::Normal, "d");
        r.source = Source::KagglePneumonia;
        assert!(Manifest::assemble(BTreeMap::new(), vec![r], None).is_err());
    }

    #[test]
    fn build_dataset_filters_and_labels() {
        let m = manifest(vec![
            rec("covid_repo/1", Label::Covid19, "a"),
            rec("kaggle_pneumonia/v1", Label::Viral, "b"),
            rec("kaggle_pneumonia/b1", Label::Bacterial, "c"),
            rec("chestxray8/n1", Label::Normal, "d"),
        ]);
        let (d, report) = build_dataset(&m, &DatasetSpec::reference(DatasetName::Dataset2)).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.positives(), 1);
        assert_eq!(d.targets()["kaggle_pneumonia/v1"], 0);
        assert_eq!(report.warnings.len(), 2);
        assert!(d.records.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn missing_class_is_error() {
        let m = manifest(vec![
            rec("covid_repo/1", Label::Covid19, "a"),
            rec("chestxray8/n1", Label::Normal, "d"),
        ]);
        let err = build_dataset(&m, &DatasetSpec::reference(DatasetName::Dataset2)).unwrap_err();
        assert!(err.to_string().contains("missing class"));
    }

    #[test]
    fn manifest_text_round_trip() {
        let mut roots = BTreeMap::new();
        roots.insert(Source::CovidRepo, PathBuf::from("/data/covid"));
        let mut r = rec("covid_repo/1", Label::Covid19, "a");
        r.patient = Some("p7".into());
        let (m, _) = Manifest::assemble(roots, vec![r, rec("chestxray8/2", Label::Normal, "b")], None).unwrap();
        let text = m.to_text(&Provenance::new(1, "x"));
        assert_eq!(Manifest::parse(&text, "mem").unwrap(), m);
        let tampered = text.replace("covid_repo/1\t", "covid_repo/0\t");
        assert!(Manifest::parse(&tampered, "mem").is_err());
    }

    #[test]
    fn reference_specs() {
        let d1 = DatasetSpec::reference(DatasetName::Dataset1);
        assert_eq!((d1.expected_positive_count, d1.expected_negative_count), (341, 2800));
        assert_eq!(
            DatasetSpec::reference(DatasetName::Dataset3).negative_label,
            Label::Bacterial
        );
    }
}
