use std::path::Path;

use ::image::{DynamicImage, GenericImageView};
use ndarray::Array3;

use super::ImageRecord;
use crate::{Backbone, Error, Result};

/// Per-channel standardization applied after scaling pixels to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// Plain [0, 1] scaling.
    pub const UNIT: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    /// Maps [0, 1] to [-1, 1], the Inception family convention.
    pub const SYMMETRIC: Normalization = Normalization {
        mean: [0.5; 3],
        std: [0.5; 3],
    };

    pub fn for_backbone(backbone: Backbone) -> Normalization {
        match backbone {
            Backbone::ResNet50 | Backbone::ResNet101 | Backbone::ResNet152 => Self::IMAGENET,
            Backbone::InceptionV3 | Backbone::InceptionResNetV2 => Self::SYMMETRIC,
            Backbone::TinyCnn => Self::UNIT,
        }
    }
}

/// Pixel planes scaled to [0, 1]: either one gray plane or three RGB planes.
fn unit_planes(img: &DynamicImage) -> (usize, usize, Vec<Vec<f64>>) {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let gray = img.color().channel_count() <= 2;
    let sixteen = img.color().bytes_per_pixel() / img.color().channel_count() == 2;
    let planes = match (gray, sixteen) {
        (true, false) => vec![img.to_luma8().pixels().map(|p| p[0] as f64 / 255.0).collect()],
        (true, true) => vec![img.to_luma16().pixels().map(|p| p[0] as f64 / 65535.0).collect()],
        (false, false) => {
            let rgb = img.to_rgb8();
            (0..3)
                .map(|c| rgb.pixels().map(|p| p[c] as f64 / 255.0).collect())
                .collect()
        }
        (false, true) => {
            let rgb = img.to_rgb16();
            (0..3)
                .map(|c| rgb.pixels().map(|p| p[c] as f64 / 65535.0).collect())
                .collect()
        }
    };
    (w, h, planes)
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
fn resize_bilinear(src: &[f64], w: usize, h: usize, side: usize) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    let sx = w as f64 / side as f64;
    let sy = h as f64 / side as f64;
    for oy in 0..side {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..side {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[oy * side + ox] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Turns a decoded image into a `[side, side, 3]` tensor: bilinear resize,
/// gray replicated to three channels, [0, 1] scaling, then standardization.
pub fn preprocess_image(img: &DynamicImage, side: usize, norm: &Normalization) -> Array3<f64> {
    let (w, h, planes) = unit_planes(img);
    let resized: Vec<Vec<f64>> = planes.iter().map(|p| resize_bilinear(p, w, h, side)).collect();
    Array3::from_shape_fn((side, side, 3), |(y, x, c)| {
        let plane = &resized[if resized.len() == 1 { 0 } else { c }];
        (plane[y * side + x] - norm.mean[c]) / norm.std[c]
    })
}

/// Decodes the file of `record` at `path` and preprocesses it. Decode failures
/// name the record.
pub fn preprocess_path(record: &ImageRecord, path: &Path, side: usize, norm: &Normalization) -> Result<Array3<f64>> {
    let img = ::image::ImageReader::open(path)
        .map_err(|e| Error::ImageDecode {
            id: record.id.clone(),
            reason: e.to_string(),
        })?
        .with_guessed_format()
        .map_err(|e| Error::ImageDecode {
            id: record.id.clone(),
            reason: e.to_string(),
        })?
        .decode()
        .map_err(|e| Error::ImageDecode {
            id: record.id.clone(),
            reason: e.to_string(),
        })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::ImageDecode {
            id: record.id.clone(),
            reason: "empty image".into(),
        });
    }
    Ok(preprocess_image(&img, side, norm))
}
