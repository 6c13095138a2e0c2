//! Synthetic two-class image sources laid out like the real ones, so every
//! pipeline stage runs without downloads. COVID-19 images are bright noise,
//! every other class is dark noise; any model that can threshold mean
//! intensity separates them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ::image::{DynamicImage, GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{preprocess_image, BinaryDataset, Normalization};
use crate::train::InMemoryImages;
use crate::{Backbone, DatasetName, Error, Label, Result, Source};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSpec {
    pub covid: usize,
    pub normal: usize,
    pub bacterial: usize,
    pub viral: usize,
    /// Side of the square PNG files.
    pub side: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            covid: 16,
            normal: 16,
            bacterial: 16,
            viral: 16,
            side: 48,
            seed: 7,
        }
    }
}

/// Roots written by [`generate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthLayout {
    pub covid_repo: PathBuf,
    pub chestxray8: PathBuf,
    pub kaggle_pneumonia: PathBuf,
}

/// One synthetic radiograph: uniform noise in a bright or dark band with a
/// soft vignette so images are not flat.
pub fn render(positive: bool, side: u32, rng: &mut ChaCha8Rng) -> GrayImage {
    let (lo, hi) = if positive { (150.0, 230.0) } else { (20.0, 100.0) };
    let c = (side as f64 - 1.0) / 2.0;
    GrayImage::from_fn(side, side, |x, y| {
        let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() / (c + 1.0);
        let v = rng.gen_range(lo..hi) * (1.0 - 0.15 * r);
        Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

fn save(img: &GrayImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)
        .map_err(|e| Error::InvalidArgument(format!("writing {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the three source trees under `out`, with the metadata files the
/// ingester reads. A few distractors (a CT row, a Kaggle normal image, a
/// non-"No Finding" entry) exercise the filters.
pub fn generate(out: &Path, spec: &SynthSpec) -> Result<SynthLayout> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = SynthLayout {
        covid_repo: out.join("covid_repo"),
        chestxray8: out.join("chestxray8"),
        kaggle_pneumonia: out.join("kaggle_pneumonia"),
    };

    let mut meta = String::from("patientid,offset,sex,age,finding,survival,view,modality,filename\n");
    for i in 0..spec.covid {
        let name = format!("covid-{i:04}.png");
        save(
            &render(true, spec.side, &mut rng),
            &layout.covid_repo.join("images").join(&name),
        )?;
        let _ = writeln!(
            meta,
            "{},0,M,50,Pneumonia/Viral/COVID-19,Y,PA,X-ray,{name}",
            100 + i / 2
        );
    }
    save(
        &render(true, spec.side, &mut rng),
        &layout.covid_repo.join("images/ct-0000.png"),
    )?;
    meta.push_str("999,0,F,40,Pneumonia/Viral/COVID-19,Y,Axial,CT,ct-0000.png\n");
    write(&layout.covid_repo.join("metadata.csv"), &meta)?;

    let mut entries = String::from("Image Index,Finding Labels,Follow-up #,Patient ID\n");
    for i in 0..spec.normal {
        let name = format!("{:08}_000.png", 1000 + i);
        save(
            &render(false, spec.side, &mut rng),
            &layout.chestxray8.join("images").join(&name),
        )?;
        let _ = writeln!(entries, "{name},No Finding,0,{}", 1000 + i);
    }
    save(
        &render(false, spec.side, &mut rng),
        &layout.chestxray8.join("images/00009999_000.png"),
    )?;
    entries.push_str("00009999_000.png,Effusion,0,9999\n");
    write(&layout.chestxray8.join("Data_Entry_2017.csv"), &entries)?;

    let pneu = layout.kaggle_pneumonia.join("train/PNEUMONIA");
    for i in 0..spec.bacterial {
        let name = format!("person{}_bacteria_{i}.png", i / 2);
        save(&render(false, spec.side, &mut rng), &pneu.join(name))?;
    }
    for i in 0..spec.viral {
        let name = format!("person{}_virus_{i}.png", 500 + i / 2);
        save(&render(false, spec.side, &mut rng), &pneu.join(name))?;
    }
    save(
        &render(false, spec.side, &mut rng),
        &layout.kaggle_pneumonia.join("train/NORMAL/IM-0001-0001.png"),
    )?;
    Ok(layout)
}

/// Config for a tiny_cnn run over generated sources. The learning rate is
/// raised from the default so a 32-image set converges within the default
/// 30 epochs; the run record lists this as an override.
pub fn smoke_config(layout: &SynthLayout, out: &Path) -> Config {
    let mut c = Config {
        out: out.to_path_buf(),
        covid_repo: Some(layout.covid_repo.clone()),
        chestxray8: Some(layout.chestxray8.clone()),
        kaggle_pneumonia: Some(layout.kaggle_pneumonia.clone()),
        datasets: vec![DatasetName::Dataset1],
        backbones: vec![Backbone::TinyCnn],
        pretrained: false,
        ..Config::default()
    };
    c.train.learning_rate = SMOKE_LEARNING_RATE;
    c
}

pub const SMOKE_LEARNING_RATE: f64 = 1e-3;

/// In-memory separable set of `per_class` positives and negatives, already
/// preprocessed for `backbone`.
pub fn in_memory(
    name: DatasetName,
    per_class: usize,
    backbone: Backbone,
    seed: u64,
) -> (BinaryDataset, InMemoryImages) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let negative = name.negative_label();
    let mut items = Vec::new();
    let mut images = HashMap::new();
    for i in 0..per_class * 2 {
        let positive = i % 2 == 0;
        let label = if positive { Label::Covid19 } else { negative };
        let id = format!("{}/synthetic-{i:04}.png", label.source());
        let img = DynamicImage::ImageLuma8(render(positive, 32, &mut rng));
        let side = backbone.input_side();
        images.insert(
            id.clone(),
            preprocess_image(&img, side, &Normalization::for_backbone(backbone)),
        );
        items.push((id, label));
    }
    (BinaryDataset::from_items(name, items), InMemoryImages { images })
}

/// Source roots of a layout, keyed like a manifest.
pub fn roots(layout: &SynthLayout) -> [(Source, &Path); 3] {
    [
        (Source::CovidRepo, layout.covid_repo.as_path()),
        (Source::ChestXray8, layout.chestxray8.as_path()),
        (Source::KagglePneumonia, layout.kaggle_pneumonia.as_path()),
    ]
}
