//! Metric tables, training-curve plots and the literature comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;

use crate::config::Provenance;
use crate::metrics::{fmt_rate, metrics_from_confusion, pool_folds, ConfusionCounts, FoldRow, MetricSet, METRIC_NAMES};
use crate::train::RunRecord;
use crate::{fsutil, Backbone, DatasetName, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub backbone: Backbone,
    pub fold: FoldRow,
    pub counts: ConfusionCounts,
    pub metrics: MetricSet,
}

/// One dataset's results: per model, the fold rows then (if all five folds
/// finished) the pooled row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub dataset: DatasetName,
    pub rows: Vec<TableRow>,
}

fn model_rank(b: Backbone) -> usize {
    Backbone::BENCHMARK
        .iter()
        .position(|x| *x == b)
        .unwrap_or(Backbone::BENCHMARK.len())
}

/// Fold counts keyed by (table position, backbone).
type ModelFolds = BTreeMap<(usize, Backbone), BTreeMap<u8, ConfusionCounts>>;

pub fn metric_tables(records: &[RunRecord]) -> Result<Vec<MetricTable>> {
    let mut cells: BTreeMap<DatasetName, ModelFolds> = BTreeMap::new();
    for r in records {
        cells
            .entry(r.dataset)
            .or_default()
            .entry((model_rank(r.model.backbone), r.model.backbone))
            .or_default()
            .insert(r.fold, r.confusion);
    }
    let mut tables = Vec::new();
    for (dataset, models) in cells {
        let mut rows = Vec::new();
        for ((_, backbone), folds) in models {
            for (&k, c) in &folds {
                rows.push(TableRow {
                    backbone,
                    fold: FoldRow::Fold(k),
                    counts: *c,
                    metrics: metrics_from_confusion(c)?,
                });
            }
            if (1..=5).all(|k| folds.contains_key(&k)) {
                let counts: Vec<ConfusionCounts> = folds.values().copied().collect();
                let (pooled, metrics) = pool_folds(&counts)?;
                rows.push(TableRow {
                    backbone,
                    fold: FoldRow::Pooled,
                    counts: pooled,
                    metrics,
                });
            }
        }
        tables.push(MetricTable { dataset, rows });
    }
    Ok(tables)
}

impl MetricTable {
    pub fn to_tsv(&self, provenance: &Provenance) -> String {
        let mut out = provenance.header("metric table");
        let _ = writeln!(out, "# dataset={} ({})", self.dataset, self.dataset.display_name());
        let _ = writeln!(out, "model\tfold\tTP\tTN\tFP\tFN\t{}", METRIC_NAMES.join("\t"));
        for r in &self.rows {
            let c = r.counts;
            let metrics: Vec<String> = r.metrics.columns().iter().map(|m| fmt_rate(*m)).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.backbone,
                r.fold,
                c.tp,
                c.tn,
                c.fp,
                c.fn_,
                metrics.join("\t")
            );
        }
        out
    }

    /// Fixed-width rendering for terminals.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} ({})\n", self.dataset, self.dataset.display_name());
        let _ = write!(
            out,
            "{:<20}{:>7}{:>6}{:>6}{:>6}{:>6}",
            "model", "fold", "TP", "TN", "FP", "FN"
        );
        for n in METRIC_NAMES {
            let _ = write!(out, "{n:>10}");
        }
        out.push('\n');
        for r in &self.rows {
            let c = r.counts;
            let fold = match r.fold {
                FoldRow::Fold(k) => k.to_string(),
                FoldRow::Pooled => "total".to_string(),
            };
            let _ = write!(
                out,
                "{:<20}{:>7}{:>6}{:>6}{:>6}{:>6}",
                r.backbone.display_name(),
                fold,
                c.tp,
                c.tn,
                c.fp,
                c.fn_
            );
            for m in r.metrics.columns() {
                let _ = write!(out, "{:>10}", fmt_rate(m));
            }
            out.push('\n');
        }
        out
    }
}

/// Writes `{dataset}.tsv` per table into `dir`.
pub fn write_tables(tables: &[MetricTable], dir: &Path, provenance: &Provenance) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tables
        .iter()
        .map(|t| {
            let path = dir.join(format!("{}.tsv", t.dataset));
            fsutil::write_atomic(&path, t.to_tsv(provenance).as_bytes())?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiteratureRow {
    pub study: String,
    pub data_type: String,
    pub method: String,
    pub classes: String,
    pub accuracy: String,
}

const LITERATURE: &str = include_str!("../fixtures/literature.tsv");

pub fn literature() -> Vec<LiteratureRow> {
    LITERATURE
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            LiteratureRow {
                study: f[0].into(),
                data_type: f[1].into(),
                method: f[2].into(),
                classes: f[3].into(),
                accuracy: f[4].into(),
            }
        })
        .collect()
}

/// The static comparison rows plus one "This Study" row per dataset that
/// has at least one pooled result, carrying the best pooled accuracy.
pub fn comparison_rows(tables: &[MetricTable]) -> Vec<LiteratureRow> {
    let mut rows = literature();
    for t in tables {
        let pooled: Vec<&TableRow> = t.rows.iter().filter(|r| r.fold == FoldRow::Pooled).collect();
        let Some(best) = pooled
            .iter()
            .max_by(|a, b| a.metrics.accuracy.percent().total_cmp(&b.metrics.accuracy.percent()))
        else {
            continue;
        };
        let methods: Vec<&str> = pooled.iter().map(|r| r.backbone.display_name()).collect();
        rows.push(LiteratureRow {
            study: "This Study".into(),
            data_type: "X-ray".into(),
            method: methods.join(", "),
            classes: format!("2 ({})", t.dataset.display_name()),
            accuracy: best.metrics.accuracy.to_string(),
        });
    }
    rows
}

pub fn comparison_tsv(rows: &[LiteratureRow], provenance: &Provenance) -> String {
    let mut out = provenance.header("literature comparison");
    out.push_str("study\tdata_type\tmethod\tclasses\taccuracy_percent\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.study, r.data_type, r.method, r.classes, r.accuracy
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curve {
    TrainAccuracy,
    TrainLoss,
    TestAccuracy,
}

impl Curve {
    pub const ALL: [Curve; 3] = [Curve::TrainAccuracy, Curve::TrainLoss, Curve::TestAccuracy];

    pub fn slug(self) -> &'static str {
        match self {
            Curve::TrainAccuracy => "train-acc",
            Curve::TrainLoss => "train-loss",
            Curve::TestAccuracy => "test-acc",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Curve::TrainAccuracy => "training accuracy",
            Curve::TrainLoss => "training loss",
            Curve::TestAccuracy => "testing accuracy",
        }
    }

    fn value(self, log: &crate::train::EpochLog) -> f64 {
        match self {
            Curve::TrainAccuracy => log.train_accuracy,
            Curve::TrainLoss => log.train_loss,
            Curve::TestAccuracy => log.test_accuracy,
        }
    }
}

const FONT: &str = "sans-serif";
const FONT_PATHS: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a system font once; plots are drawn without text if none is found.
fn font_available() -> bool {
    static FOUND: OnceLock<bool> = OnceLock::new();
    *FOUND.get_or_init(|| {
        let env = std::env::var("CXR_PLOT_FONT").ok();
        let candidates = env.iter().map(String::as_str).chain(FONT_PATHS.iter().copied());
        for p in candidates {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font(FONT, FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found; plots will have no text");
        false
    })
}

const PLOT_SIZE: (u32, u32) = (900, 560);

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Draws one overlay plot to an RGB buffer.
fn draw_curves(
    series: &[(Backbone, Vec<(f64, f64)>)],
    title: &str,
    y_desc: &str,
    y_max: f64,
    footer: &str,
) -> Result<Vec<u8>> {
    let (w, h) = PLOT_SIZE;
    let mut buf = vec![0u8; (w * h * 3) as usize];
    let text = font_available();
    {
        let root = BitMapBackend::with_buffer(&mut buf, PLOT_SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let (body, foot) = root.split_vertically(h - 24);
        let x_max = series
            .iter()
            .flat_map(|(_, p)| p.iter().map(|(x, _)| *x))
            .fold(1.0, f64::max);
        let mut builder = ChartBuilder::on(&body);
        builder.margin(12);
        if text {
            builder
                .caption(title, (FONT, 22))
                .x_label_area_size(40)
                .y_label_area_size(60);
        }
        let mut chart = builder
            .build_cartesian_2d(1.0..x_max.max(2.0), 0.0..y_max)
            .map_err(plot_err)?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc("epoch")
                .x_label_formatter(&|v| format!("{v:.0}"))
                .y_desc(y_desc)
                .label_style((FONT, 14));
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw().map_err(plot_err)?;
        for (i, (backbone, points)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba().stroke_width(2);
            let drawn = chart
                .draw_series(LineSeries::new(points.iter().copied(), color))
                .map_err(plot_err)?;
            if text {
                drawn.label(backbone.display_name()).legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 20, y)], Palette99::pick(i).stroke_width(2))
                });
            }
        }
        if text {
            chart
                .configure_series_labels()
                .position(SeriesLabelPosition::LowerRight)
                .background_style(WHITE.mix(0.85))
                .border_style(BLACK)
                .label_font((FONT, 14))
                .draw()
                .map_err(plot_err)?;
            foot.draw(&Text::new(
                footer.to_string(),
                (12, 4),
                (FONT, 12).into_font().color(&BLACK.mix(0.6)),
            ))
            .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Ok(buf)
}

/// Encodes RGB pixels as PNG with a `tEXt` comment chunk after the header.
fn encode_png(rgb: &[u8], comment: &str) -> Result<Vec<u8>> {
    use ::image::ImageEncoder;
    let (w, h) = PLOT_SIZE;
    let mut png = Vec::new();
    ::image::codecs::png::PngEncoder::new(&mut png)
        .write_image(rgb, w, h, ::image::ExtendedColorType::Rgb8)
        .map_err(plot_err)?;
    // signature (8) + IHDR chunk (4 length + 4 type + 13 data + 4 crc)
    let at = 8 + 25;
    let mut data = b"Comment\0".to_vec();
    data.extend(comment.bytes().filter(|b| b.is_ascii() && *b != 0));
    let mut chunk = (data.len() as u32).to_be_bytes().to_vec();
    let mut typed = b"tEXt".to_vec();
    typed.extend(&data);
    chunk.extend(&typed);
    chunk.extend(crc32fast::hash(&typed).to_be_bytes());
    png.splice(at..at, chunk);
    Ok(png)
}

fn stamp(p: &Provenance) -> String {
    format!("{} | run_seed={} | config_digest={}", p.tool, p.seed, p.config_digest)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub plots: Vec<PathBuf>,
    pub curve_data: Vec<PathBuf>,
    pub comparison: PathBuf,
}

/// Per (dataset, fold): one plot per curve kind with a line per backbone,
/// plus the curve data as TSV. Then the comparison table.
pub fn write_report(records: &[RunRecord], dir: &Path, provenance: &Provenance) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no run records to report".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut groups: BTreeMap<(DatasetName, u8), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.dataset, r.fold)).or_default().push(r);
    }
    let mut files = ReportFiles::default();
    for ((dataset, fold), mut runs) in groups {
        runs.sort_by_key(|r| (model_rank(r.model.backbone), r.model.backbone));
        let stem = format!("{dataset}_fold{fold}");

        let mut tsv = provenance.header("training curves");
        tsv.push_str("model\tepoch\ttrain_loss\ttrain_accuracy\ttest_accuracy\n");
        for r in &runs {
            for e in &r.epochs {
                let _ = writeln!(
                    tsv,
                    "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                    r.model.backbone, e.epoch, e.train_loss, e.train_accuracy, e.test_accuracy
                );
            }
        }
        let path = dir.join(format!("{stem}_curves.tsv"));
        fsutil::write_atomic(&path, tsv.as_bytes())?;
        files.curve_data.push(path);

        for curve in Curve::ALL {
            let series: Vec<(Backbone, Vec<(f64, f64)>)> = runs
                .iter()
                .map(|r| {
                    let pts = r.epochs.iter().map(|e| (e.epoch as f64, curve.value(e))).collect();
                    (r.model.backbone, pts)
                })
                .collect();
            let y_max = match curve {
                Curve::TrainLoss => {
                    let m = series
                        .iter()
                        .flat_map(|(_, p)| p.iter().map(|(_, y)| *y))
                        .filter(|y| y.is_finite())
                        .fold(0.0, f64::max);
                    if m > 0.0 {
                        m * 1.05
                    } else {
                        1.0
                    }
                }
                _ => 1.0,
            };
            let title = format!("{} {}, fold {fold}: {}", dataset, dataset.display_name(), curve.title());
            let rgb = draw_curves(&series, &title, curve.title(), y_max, &stamp(provenance))?;
            let path = dir.join(format!("{stem}_{}.png", curve.slug()));
            fsutil::write_atomic(&path, &encode_png(&rgb, &stamp(provenance))?)?;
            files.plots.push(path);
        }
    }
    let tables = metric_tables(records)?;
    let path = dir.join("comparison.tsv");
    fsutil::write_atomic(&path, comparison_tsv(&comparison_rows(&tables), provenance).as_bytes())?;
    files.comparison = path;
    Ok(files)
}
