//! Counting metrics, evaluation runs and map export.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::data::{eval_prepare, Entry, Normalization, Prepared};
use crate::error::{Error, Result};
use crate::imaging::{to_u8, Image, Mask};
use crate::model::{Model, ModelOutput};
use crate::tensor::{Scalar, Tensor};

pub const SIDECAR_MAGIC: &[u8; 4] = b"SFDM";

/// Sums the `out_width × out_height` top-left window of the last two axes
/// of `density`, weighted by `roi` when given.
pub fn count_from_density<T: Scalar>(
    density: &Tensor<T>,
    out_width: usize,
    out_height: usize,
    roi: Option<&Mask>,
) -> Result<f64> {
    let shape = density.shape();
    if shape.len() < 2 || shape[..shape.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::InvalidShape {
            op: "count_from_density",
            shape: shape.to_vec(),
            reason: "expected a single map".into(),
        });
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if out_width > w || out_height > h {
        return Err(Error::InvalidShape {
            op: "count_from_density",
            shape: shape.to_vec(),
            reason: format!("counting window {out_width}x{out_height} exceeds the map"),
        });
    }
    if let Some(m) = roi {
        if (m.width, m.height) != (out_width, out_height) {
            return Err(Error::ShapeMismatch {
                op: "count_from_density",
                lhs: vec![out_height, out_width],
                rhs: vec![m.height, m.width],
            });
        }
    }
    let d = density.data();
    let mut total = 0.0;
    for y in 0..out_height {
        for x in 0..out_width {
            if roi.is_none_or(|m| m.data[y * out_width + x]) {
                total += d[y * w + x].as_f64();
            }
        }
    }
    Ok(total)
}

/// Counts a prediction made on an [`eval_prepare`]d input.
pub fn count_prepared<T: Scalar>(density: &Tensor<T>, prep: &Prepared<T>) -> Result<f64> {
    count_from_density(density, prep.out_width, prep.out_height, prep.roi.as_ref())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub predicted_count: f64,
    pub gt_count: usize,
    pub abs_err: f64,
    pub sq_err: f64,
}

impl ImageResult {
    pub fn new(image_id: impl Into<String>, predicted_count: f64, gt_count: usize) -> Self {
        let e = predicted_count - gt_count as f64;
        Self {
            image_id: image_id.into(),
            predicted_count,
            gt_count,
            abs_err: e.abs(),
            sq_err: e * e,
        }
    }
}

/// Field order is the JSON key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n: usize,
    pub mae: f64,
    /// Root of the mean squared error.
    pub mse: f64,
    pub per_image: Vec<ImageResult>,
}

/// `(MAE, root-mean-square error)` of `predicted − actual`.
pub fn aggregate(predicted: &[f64], actual: &[f64]) -> Result<(f64, f64)> {
    if predicted.len() != actual.len() {
        return Err(Error::ShapeMismatch {
            op: "aggregate",
            lhs: vec![predicted.len()],
            rhs: vec![actual.len()],
        });
    }
    if predicted.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = predicted.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, a) in predicted.iter().zip(actual) {
        let e = p - a;
        abs += e.abs();
        sq += e * e;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

impl EvalResult {
    /// Aggregates per-image results, ordering them by image id so the
    /// result does not depend on input order.
    pub fn from_images(mut per_image: Vec<ImageResult>) -> Result<Self> {
        per_image.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let pred: Vec<f64> = per_image.iter().map(|r| r.predicted_count).collect();
        let gt: Vec<f64> = per_image.iter().map(|r| r.gt_count as f64).collect();
        let (mae, mse) = aggregate(&pred, &gt)?;
        Ok(Self {
            n: per_image.len(),
            mae,
            mse,
            per_image,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval result serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,predicted_count,gt_count,abs_err,sq_err\n");
        for r in &self.per_image {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.image_id, r.predicted_count, r.gt_count, r.abs_err, r.sq_err
            ));
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        for (ext, body) in [("json", self.to_json()), ("csv", self.to_csv())] {
            let path = stem.with_extension(ext);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Predicts one image in eval mode and returns the output with its count.
pub fn predict_image<T: Scalar>(
    model: &mut Model<T>,
    image: &Image,
    roi: Option<&Mask>,
    norm: &Normalization,
) -> Result<(ModelOutput<T>, Prepared<T>, f64)> {
    let prep = eval_prepare::<T>(image, roi, norm)?;
    let out = model.predict(&prep.input, Mode::Eval)?;
    let count = count_prepared(&out.density, &prep)?;
    Ok((out, prep, count))
}

/// Evaluates `model` on every entry. A per-entry ROI takes precedence over
/// the shared `roi`.
pub fn evaluate<T: Scalar>(
    model: &mut Model<T>,
    dataset: &[Entry],
    roi: Option<&Mask>,
    norm: &Normalization,
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut per_image = Vec::with_capacity(dataset.len());
    for e in dataset {
        let (_, _, count) = predict_image(model, &e.image, e.roi.as_ref().or(roi), norm)?;
        per_image.push(ImageResult::new(e.id(), count, e.annotation.count()));
    }
    EvalResult::from_images(per_image)
}

/// Fraction of output cells where `attention > 0.5` agrees with a binary
/// target of the same shape.
pub fn attention_accuracy<T: Scalar, U: Scalar>(attention: &Tensor<T>, target: &Tensor<U>) -> Result<f64> {
    if attention.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "attention_accuracy",
            lhs: attention.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = attention.numel();
    if n == 0 {
        return Ok(1.0);
    }
    let hits = attention
        .data()
        .iter()
        .zip(target.data())
        .filter(|(a, t)| (a.as_f64() > 0.5) == (t.as_f64() > 0.5))
        .count();
    Ok(hits as f64 / n as f64)
}

/// Raw single-channel map as stored in a sidecar file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl RawMap {
    /// Top-left `width × height` window of the last two axes of `t`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, width: usize, height: usize) -> Self {
        let shape = t.shape();
        let w = shape[shape.len() - 1];
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            values.extend(t.data()[y * w..y * w + width].iter().map(|v| v.as_f64() as f32));
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(16 + 4 * self.values.len());
        b.extend_from_slice(SIDECAR_MAGIC);
        b.extend_from_slice(&(self.width as u32).to_le_bytes());
        b.extend_from_slice(&(self.height as u32).to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != SIDECAR_MAGIC {
            return Err(Error::format(path, "not a density sidecar"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (width, height) = (word(4), word(8));
        let body = &bytes[16..];
        if body.len() != 4 * width * height {
            return Err(Error::format(
                path,
                format!("{width}x{height} map needs {} bytes, found {}", 4 * width * height, body.len()),
            ));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Grayscale rendering: divided by the map maximum, black when the
    /// maximum is not positive.
    pub fn to_gray_normalized(&self) -> GrayImage {
        let max = self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let scale = if max > 0.0 { 1.0 / max as f64 } else { 0.0 };
        self.to_gray(|v| v * scale)
    }

    /// Grayscale rendering of values already in `[0,1]`.
    pub fn to_gray_unit(&self) -> GrayImage {
        self.to_gray(|v| v)
    }

    fn to_gray(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([to_u8(f(self.values[y as usize * self.width + x as usize] as f64))])
        })
    }
}

/// Paths written by [`export_maps`].
#[derive(Clone, Debug)]
pub struct ExportedMaps {
    pub composite: std::path::PathBuf,
    pub density_pgm: std::path::PathBuf,
    pub attention_pgm: std::path::PathBuf,
    pub sidecar: std::path::PathBuf,
}

fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `<prefix>_density.pgm`, `<prefix>_attention.pgm`,
/// `<prefix>_density.sfdm` and a `<prefix>_maps.png` strip showing the
/// input, the max-normalized density and the attention map side by side.
/// Maps cover the first `out_width × out_height` output cells.
pub fn export_maps<T: Scalar>(
    output: &ModelOutput<T>,
    input: &Image,
    out_width: usize,
    out_height: usize,
    prefix: impl AsRef<Path>,
) -> Result<ExportedMaps> {
    let prefix = prefix.as_ref();
    let named = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        std::path::PathBuf::from(s)
    };
    let density = RawMap::from_tensor(&output.density, out_width, out_height);
    let attention = RawMap::from_tensor(&output.attention, out_width, out_height);
    let paths = ExportedMaps {
        composite: named("_maps.png"),
        density_pgm: named("_density.pgm"),
        attention_pgm: named("_attention.pgm"),
        sidecar: named("_density.sfdm"),
    };
    let dg = density.to_gray_normalized();
    let ag = attention.to_gray_unit();
    save_gray(&dg, &paths.density_pgm)?;
    save_gray(&ag, &paths.attention_pgm)?;
    density.write(&paths.sidecar)?;

    let (w, h) = (input.width, input.height);
    let rgb = input.to_rgb8();
    let strip: RgbImage = ImageBuffer::from_fn(3 * w as u32, h as u32, |x, y| {
        let (panel, px) = (x as usize / w, x as usize % w);
        let (mx, my) = (
            (px / 2).min(out_width.saturating_sub(1)) as u32,
            (y as usize / 2).min(out_height.saturating_sub(1)) as u32,
        );
        match panel {
            0 => *rgb.get_pixel(px as u32, y),
            1 => {
                let v = dg.get_pixel(mx, my).0[0];
                Rgb([v, v, v])
            }
            _ => {
                let v = ag.get_pixel(mx, my).0[0];
                Rgb([v, v, v])
            }
        }
    });
    strip.save(&paths.composite).map_err(|source| Error::Image {
        path: paths.composite.clone(),
        source,
    })?;
    Ok(paths)
}
