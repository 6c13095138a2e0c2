//! Walks one source directory and turns its images into records.
//!
//! Label inference per source:
//! - `covid_repo`: with a `metadata.csv` (COVID image collection layout), only
//!   rows whose `modality` is X-ray and whose `finding` mentions COVID-19 are
//!   kept. Without metadata every image is COVID-19.
//! - `chestxray8`: with `Data_Entry_2017*.csv`, only `No Finding` images are
//!   kept as normal. Without it every image is normal.
//! - `kaggle_pneumonia`: `*bacteria*` / `*virus*` file names under
//!   `PNEUMONIA/`; `NORMAL/` images are skipped.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ::image::ImageDecoder;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::ImageRecord;
use crate::{Error, Label, Result, Source};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<ImageRecord>,
    pub skipped: Vec<Skipped>,
}

struct Inferred {
    label: Label,
    patient: Option<String>,
}

enum LabelIndex {
    /// file name -> label (None = present but excluded, with reason)
    Metadata(HashMap<String, std::result::Result<Inferred, String>>),
    Fixed(Label),
    Kaggle,
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn covid_metadata(path: &Path) -> Result<LabelIndex> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(fname), Some(finding)) = (col("filename"), col("finding")) else {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            reason: "metadata needs filename and finding columns".into(),
        });
    };
    let modality = col("modality");
    let patient = col("patientid");
    let mut map = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let name = row.get(fname).unwrap_or_default().to_string();
        let is_xray = modality
            .and_then(|m| row.get(m))
            .is_none_or(|m| m.eq_ignore_ascii_case("x-ray"));
        let find = row.get(finding).unwrap_or_default();
        let entry = if !is_xray {
            Err("non-X-ray modality".to_string())
        } else if !find.contains("COVID-19") {
            Err("finding is not COVID-19".to_string())
        } else {
            Ok(Inferred {
                label: Label::Covid19,
                patient: patient.and_then(|p| row.get(p)).map(str::to_string),
            })
        };
        map.insert(name, entry);
    }
    Ok(LabelIndex::Metadata(map))
}

fn nih_metadata(path: &Path) -> Result<LabelIndex> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(index), Some(findings)) = (col("Image Index"), col("Finding Labels")) else {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            reason: "metadata needs Image Index and Finding Labels columns".into(),
        });
    };
    let patient = col("Patient ID");
    let mut map = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let entry = if row.get(findings) == Some("No Finding") {
            Ok(Inferred {
                label: Label::Normal,
                patient: patient.and_then(|p| row.get(p)).map(str::to_string),
            })
        } else {
            Err("finding is not 'No Finding'".to_string())
        };
        map.insert(row.get(index).unwrap_or_default().to_string(), entry);
    }
    Ok(LabelIndex::Metadata(map))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line: e.position().map_or(0, |p| p.line() as usize),
        reason: e.to_string(),
    }
}

fn label_index(root: &Path, source: Source) -> Result<LabelIndex> {
    match source {
        Source::CovidRepo => {
            let meta = root.join("metadata.csv");
            if meta.is_file() {
                covid_metadata(&meta)
            } else {
                Ok(LabelIndex::Fixed(Label::Covid19))
            }
        }
        Source::ChestXray8 => {
            for name in ["Data_Entry_2017.csv", "Data_Entry_2017_v2020.csv"] {
                let meta = root.join(name);
                if meta.is_file() {
                    return nih_metadata(&meta);
                }
            }
            Ok(LabelIndex::Fixed(Label::Normal))
        }
        Source::KagglePneumonia => Ok(LabelIndex::Kaggle),
    }
}

fn infer(index: &LabelIndex, rel: &Path) -> std::result::Result<Inferred, String> {
    let name = file_name(rel);
    match index {
        LabelIndex::Fixed(label) => Ok(Inferred {
            label: *label,
            patient: None,
        }),
        LabelIndex::Metadata(map) => match map.get(&name) {
            Some(Ok(i)) => Ok(Inferred {
                label: i.label,
                patient: i.patient.clone(),
            }),
            Some(Err(reason)) => Err(reason.clone()),
            None => Err("not listed in metadata".into()),
        },
        LabelIndex::Kaggle => {
            if rel.components().any(|c| c.as_os_str().eq_ignore_ascii_case("NORMAL")) {
                return Err("kaggle normal image (normal class comes from chestxray8)".into());
            }
            let lower = name.to_ascii_lowercase();
            let label = if lower.contains("bacteria") {
                Label::Bacterial
            } else if lower.contains("virus") {
                Label::Viral
            } else {
                return Err("cannot infer pneumonia type from file name".into());
            };
            Ok(Inferred {
                label,
                patient: name.split('_').next().map(str::to_string),
            })
        }
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Returns (width, height, channels) from the image header.
fn probe(path: &Path) -> std::result::Result<(u32, u32, u8), String> {
    let decoder = ::image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .into_decoder()
        .map_err(|e| e.to_string())?;
    let (w, h) = decoder.dimensions();
    let channels = match decoder.color_type().channel_count() {
        1 | 2 => 1,
        _ => 3,
    };
    Ok((w, h, channels))
}

fn process(
    root: &Path,
    source: Source,
    index: &LabelIndex,
    path: PathBuf,
) -> std::result::Result<ImageRecord, Skipped> {
    let skip = |reason: String| Skipped {
        path: path.clone(),
        reason,
    };
    let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
    if !has_image_extension(&path) {
        return Err(skip("not an image file".into()));
    }
    let inferred = infer(index, &rel).map_err(skip)?;
    let (width, height, channels) = probe(&path).map_err(|e| skip(format!("unreadable: {e}")))?;
    let bytes = std::fs::read(&path).map_err(|e| skip(format!("unreadable: {e}")))?;
    let rel_str = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/");
    Ok(ImageRecord {
        id: format!("{source}/{rel_str}"),
        source,
        label: inferred.label,
        path: rel_str,
        digest: hex::encode(Sha256::digest(&bytes)),
        width,
        height,
        channels,
        patient: inferred.patient,
    })
}

/// Ingests every readable image under `root`. Files that are not images,
/// cannot be decoded or whose label cannot be inferred are skipped and listed.
pub fn ingest_source(root: &Path, source: Source) -> Result<Ingested> {
    if !root.is_dir() {
        return Err(Error::MissingDirectory(root.to_path_buf()));
    }
    let index = label_index(root, source)?;
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let p = e.path().unwrap_or(root).to_path_buf();
            Error::io(p, e.into())
        })?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    let metadata_files = ["metadata.csv", "Data_Entry_2017.csv", "Data_Entry_2017_v2020.csv"];
    files.retain(|p| !(p.parent() == Some(root) && metadata_files.contains(&file_name(p).as_str())));

    let results: Vec<_> = files
        .into_par_iter()
        .map(|p| process(root, source, &index, p))
        .collect();
    let mut out = Ingested::default();
    for r in results {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(s) => {
                log::warn!("skipping {}: {}", s.path.display(), s.reason);
                out.skipped.push(s);
            }
        }
    }
    if out.records.is_empty() {
        return Err(Error::NoReadableImages(root.to_path_buf()));
    }
    Ok(out)
}
