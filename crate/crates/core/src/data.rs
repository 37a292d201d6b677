//! Dataset ingestion, augmentation and batching.
//!
//! Ground truth is always rendered after geometric augmentation, from the
//! transformed head points, so crops never cut a stamp and the target sum
//! equals the number of surviving heads. Targets are then sum-pooled to the
//! network's half-resolution output grid.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groundtruth::{
    self, adaptive_kernel, render_attention, render_density, DownscaleHalf, KernelSpec,
    PointAnnotation, ATTENTION_KERNEL, ATTENTION_THRESHOLD, DENSITY_KERNEL,
};
use crate::imaging::{Image, Mask};
use crate::model::INPUT_MULTIPLE;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Crop `(width, height)`; both even.
    pub crop: (usize, usize),
    /// Images whose short side is below this are upscaled to it first.
    pub short_side_min: usize,
    pub scale_range: (f64, f64),
    pub flip_p: f64,
    pub gamma_range: (f64, f64),
    pub gamma_p: f64,
    pub gray_p: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: (400, 400),
            short_side_min: 512,
            scale_range: (0.8, 1.2),
            flip_p: 0.5,
            gamma_range: (0.5, 1.5),
            gamma_p: 0.3,
            gray_p: 0.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No randomness at all: identity scale, every probability zero.
    pub fn identity(crop: (usize, usize)) -> Self {
        Self {
            crop,
            short_side_min: 0,
            scale_range: (1.0, 1.0),
            flip_p: 0.0,
            gamma_range: (1.0, 1.0),
            gamma_p: 0.0,
            gray_p: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (cw, ch) = self.crop;
        if cw == 0 || ch == 0 || cw % 2 != 0 || ch % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "crop must be positive and even, got {cw}x{ch}"
            )));
        }
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("gamma_p", self.gamma_p),
            ("gray_p", self.gray_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be in [0, 1], got {p}"
                )));
            }
        }
        let (s0, s1) = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::InvalidArgument(format!(
                "invalid scale_range ({s0}, {s1})"
            )));
        }
        let (g0, g1) = self.gamma_range;
        if !(g0 > 0.0 && g0 <= g1) {
            return Err(Error::InvalidArgument(format!(
                "invalid gamma_range ({g0}, {g1})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundTruthConfig {
    pub density_kernel: KernelSpec,
    pub attention_kernel: KernelSpec,
    pub attention_threshold: f64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            density_kernel: DENSITY_KERNEL,
            attention_kernel: ATTENTION_KERNEL,
            attention_threshold: ATTENTION_THRESHOLD,
        }
    }
}

/// Per-channel input normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn apply<T: Scalar>(&self, image: &Image) -> Tensor<T> {
        let plane = image.width * image.height;
        Tensor::from_fn([3, image.height, image.width], |i| {
            let c = i / plane;
            T::of((image.data[i] as f64 - self.mean[c]) / self.std[c])
        })
    }
}

/// Preprocessing applied once at load time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Resize every image (and its points) to this `(width, height)`
    /// bilinearly, e.g. 960×640 for low-resolution surveillance frames.
    pub upscale_to: Option<(usize, usize)>,
    /// Large-image mode: pick the density kernel from the original width,
    /// then resize to 1024×768.
    pub qnrf: bool,
}

/// On-disk annotation document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub image: PathBuf,
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<PathBuf>,
}

impl AnnotationFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("annotation serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Converts to a [`PointAnnotation`] with points clamped inside the
    /// image; the id is the image file stem.
    pub fn to_annotation(&self) -> PointAnnotation {
        let image_id = self
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut a = PointAnnotation {
            image_id,
            width: self.width,
            height: self.height,
            points: self.points.iter().map(|p| (p[0], p[1])).collect(),
        };
        a.clamp_points();
        a
    }
}

/// Reads a manifest (JSON list of annotation paths). Relative entries are
/// resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<PathBuf> = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(entries.into_iter().map(|p| base.join(p)).collect())
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[PathBuf]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One loaded image with its annotation.
#[derive(Clone, Debug)]
pub struct Entry {
    pub image: Image,
    pub annotation: PointAnnotation,
    /// Density stamp to render this image's targets with.
    pub kernel: KernelSpec,
    pub roi: Option<Mask>,
}

impl Entry {
    pub fn new(image: Image, annotation: PointAnnotation, kernel: KernelSpec) -> Self {
        Self {
            image,
            annotation,
            kernel,
            roi: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.annotation.image_id
    }
}

fn scale_points(points: &mut [(f64, f64)], sx: f64, sy: f64) {
    for (x, y) in points {
        *x *= sx;
        *y *= sy;
    }
}

/// Loads one annotation file and its image, applying `ingest`.
pub fn load_entry(
    annotation_path: impl AsRef<Path>,
    gt: &GroundTruthConfig,
    ingest: &IngestConfig,
) -> Result<Entry> {
    let annotation_path = annotation_path.as_ref();
    let file = AnnotationFile::read(annotation_path)?;
    let base = annotation_path.parent().unwrap_or(Path::new(""));
    let image = Image::load(base.join(&file.image))?;
    if (image.width, image.height) != (file.width, file.height) {
        return Err(Error::format(
            annotation_path,
            format!(
                "declares {}x{} but image is {}x{}",
                file.width, file.height, image.width, image.height
            ),
        ));
    }
    let roi = file
        .roi
        .as_ref()
        .map(|p| Mask::load(base.join(p)))
        .transpose()?;
    let mut entry = Entry {
        image,
        annotation: file.to_annotation(),
        kernel: gt.density_kernel,
        roi,
    };
    ingest_entry(&mut entry, ingest);
    Ok(entry)
}

/// Applies load-time resizing to an entry.
pub fn ingest_entry(entry: &mut Entry, ingest: &IngestConfig) {
    let target = if ingest.qnrf {
        entry.kernel = adaptive_kernel(entry.annotation.width);
        Some(groundtruth::QNRF_SIZE)
    } else {
        ingest.upscale_to
    };
    let Some((tw, th)) = target else { return };
    let (w, h) = (entry.image.width, entry.image.height);
    if (w, h) == (tw, th) {
        return;
    }
    entry.image = entry.image.resize_bilinear(tw, th);
    let a = &mut entry.annotation;
    scale_points(&mut a.points, tw as f64 / w as f64, th as f64 / h as f64);
    a.width = tw;
    a.height = th;
    a.clamp_points();
    entry.roi = entry.roi.as_ref().map(|m| m.resize_nearest(tw, th));
}

pub fn load_dataset(
    manifest: impl AsRef<Path>,
    gt: &GroundTruthConfig,
    ingest: &IngestConfig,
) -> Result<Vec<Entry>> {
    read_manifest(manifest)?
        .iter()
        .map(|p| load_entry(p, gt, ingest))
        .collect()
}

/// Which random transforms fired for a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Applied {
    pub scale: f64,
    pub crop_origin: (usize, usize),
    pub padded: bool,
    pub flipped: bool,
    pub gamma: Option<f64>,
    pub gray: bool,
}

/// A training example at crop resolution with half-resolution targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image_id: String,
    /// Normalized `[3,H,W]`.
    pub image: Tensor<f32>,
    /// Head points in crop coordinates.
    pub points: Vec<(f64, f64)>,
    /// `[1,H/2,W/2]`, sums to `points.len()`.
    pub density_target: Tensor<f64>,
    /// `[1,H/2,W/2]`, values in `{0,1}`.
    pub attention_target: Tensor<f64>,
    pub roi: Option<Mask>,
    pub applied: Applied,
}

/// Horizontal flip of point x-coordinates inside a crop of width `crop_w`.
pub fn flip_points(points: &mut [(f64, f64)], crop_w: usize) {
    for (x, _) in points {
        *x = (crop_w as f64 - 1.0) - *x;
    }
}

/// `v^gamma` on every pixel.
pub fn apply_gamma(image: &mut Image, gamma: f64) {
    for v in &mut image.data {
        *v = (v.max(0.0) as f64).powf(gamma) as f32;
    }
}

/// Luminance `0.299 R + 0.587 G + 0.114 B` copied to all three channels.
pub fn to_gray(image: &mut Image) {
    let n = image.width * image.height;
    for i in 0..n {
        let l = 0.299 * image.data[i] + 0.587 * image.data[n + i] + 0.114 * image.data[2 * n + i];
        image.data[i] = l;
        image.data[n + i] = l;
        image.data[2 * n + i] = l;
    }
}

fn resize_with_points(image: &Image, points: &mut [(f64, f64)], nw: usize, nh: usize) -> Image {
    let sx = nw as f64 / image.width as f64;
    let sy = nh as f64 / image.height as f64;
    scale_points(points, sx, sy);
    image.resize_bilinear(nw, nh)
}

/// Renders half-resolution density and attention targets for `points` on a
/// `width×height` canvas.
pub fn render_targets(
    image_id: &str,
    width: usize,
    height: usize,
    points: &[(f64, f64)],
    kernel: &KernelSpec,
    gt: &GroundTruthConfig,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let ann = PointAnnotation {
        image_id: image_id.to_owned(),
        width,
        height,
        points: points.to_vec(),
    };
    let density = render_density(&ann, kernel);
    let attention = render_attention(&density, &gt.attention_kernel, gt.attention_threshold)?;
    let density = density.downscale_half()?;
    let attention = attention.downscale_half()?;
    let d = Tensor::new([1, density.height, density.width], density.values)?;
    let a = Tensor::new(
        [1, attention.height, attention.width],
        attention.values.iter().map(|&v| v as f64).collect(),
    )?;
    Ok((d, a))
}

/// Randomly transforms one entry into a training sample.
///
/// Order: short-side upscale, random scale, random crop (replicate-padding
/// images smaller than the crop), horizontal flip, gamma, grayscale.
/// Targets are rendered from the surviving points afterwards.
pub fn augment<R: Rng + ?Sized>(
    entry: &Entry,
    cfg: &AugmentConfig,
    gt: &GroundTruthConfig,
    norm: &Normalization,
    rng: &mut R,
) -> Result<Sample> {
    cfg.validate()?;
    let src = &entry.image;
    if src.width == 0 || src.height == 0 {
        return Err(Error::InvalidArgument(format!(
            "image `{}` is empty",
            entry.id()
        )));
    }
    // Draw every random number up front so the stream layout does not
    // depend on which transforms fire.
    let scale = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    let crop_u: f64 = rng.random();
    let crop_v: f64 = rng.random();
    let flip = rng.random::<f64>() < cfg.flip_p;
    let gamma_fires = rng.random::<f64>() < cfg.gamma_p;
    let gamma = rng.random_range(cfg.gamma_range.0..=cfg.gamma_range.1);
    let gray = rng.random::<f64>() < cfg.gray_p;

    let mut points = entry.annotation.points.clone();
    let mut roi = entry.roi.clone();
    let mut image = src.clone();

    let short = image.width.min(image.height);
    if short < cfg.short_side_min {
        let k = cfg.short_side_min as f64 / short as f64;
        let nw = ((image.width as f64 * k).round() as usize).max(cfg.short_side_min);
        let nh = ((image.height as f64 * k).round() as usize).max(cfg.short_side_min);
        let (nw, nh) = if image.width <= image.height {
            (cfg.short_side_min, nh)
        } else {
            (nw, cfg.short_side_min)
        };
        image = resize_with_points(&image, &mut points, nw, nh);
        roi = roi.map(|m| m.resize_nearest(nw, nh));
    }
    if scale != 1.0 {
        let nw = ((image.width as f64 * scale).round() as usize).max(1);
        let nh = ((image.height as f64 * scale).round() as usize).max(1);
        image = resize_with_points(&image, &mut points, nw, nh);
        roi = roi.map(|m| m.resize_nearest(nw, nh));
    }

    let (cw, ch) = cfg.crop;
    let padded = image.width < cw || image.height < ch;
    if padded {
        log::debug!(
            "padding `{}` from {}x{} to crop {}x{}",
            entry.id(),
            image.width,
            image.height,
            cw,
            ch
        );
        image = image.pad_replicate(cw, ch);
        roi = roi.map(|m| {
            let mut grown = Mask::full(image.width, image.height, false);
            for y in 0..m.height {
                for x in 0..m.width {
                    grown.data[y * image.width + x] = m.data[y * m.width + x];
                }
            }
            grown
        });
    }
    let ox = ((image.width - cw + 1) as f64 * crop_u).floor() as usize;
    let oy = ((image.height - ch + 1) as f64 * crop_v).floor() as usize;
    let ox = ox.min(image.width - cw);
    let oy = oy.min(image.height - ch);
    let mut image = image.crop(ox, oy, cw, ch);
    let mut roi = roi.map(|m| {
        let mut out = Mask::full(cw, ch, false);
        for y in 0..ch {
            for x in 0..cw {
                out.data[y * cw + x] = m.data[(y + oy) * m.width + x + ox];
            }
        }
        out
    });
    let mut points: Vec<(f64, f64)> = points
        .into_iter()
        .map(|(x, y)| (x - ox as f64, y - oy as f64))
        .filter(|&(x, y)| x >= 0.0 && x < cw as f64 && y >= 0.0 && y < ch as f64)
        .collect();

    if flip {
        image = image.flip_horizontal();
        flip_points(&mut points, cw);
        if let Some(m) = roi.as_mut() {
            for row in m.data.chunks_mut(cw) {
                row.reverse();
            }
        }
    }
    if gamma_fires {
        apply_gamma(&mut image, gamma);
    }
    if gray {
        to_gray(&mut image);
    }

    let (density_target, attention_target) =
        render_targets(entry.id(), cw, ch, &points, &entry.kernel, gt)?;
    Ok(Sample {
        image_id: entry.id().to_owned(),
        image: norm.apply(&image),
        points,
        density_target,
        attention_target,
        roi,
        applied: Applied {
            scale,
            crop_origin: (ox, oy),
            padded,
            flipped: flip,
            gamma: gamma_fires.then_some(gamma),
            gray,
        },
    })
}

/// Stacked training tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub density: Tensor<T>,
    pub attention: Tensor<T>,
}

pub fn make_batch<T: Scalar>(samples: &[Sample]) -> Result<Batch<T>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot batch zero samples".into()));
    }
    let first = samples[0].image.shape();
    if let Some(s) = samples.iter().find(|s| s.image.shape() != first) {
        return Err(Error::ShapeMismatch {
            op: "make_batch",
            lhs: first.to_vec(),
            rhs: s.image.shape().to_vec(),
        });
    }
    let cast = |f: &dyn Fn(&Sample) -> Tensor<T>| -> Result<Tensor<T>> {
        Tensor::stack(&samples.iter().map(f).collect::<Vec<_>>())
    };
    Ok(Batch {
        images: cast(&|s| s.image.cast())?,
        density: cast(&|s| s.density_target.cast())?,
        attention: cast(&|s| s.attention_target.cast())?,
    })
}

/// An evaluation input padded to the network's size multiple.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    /// `[1,3,H',W']` with `H'`, `W'` multiples of 16.
    pub input: Tensor<T>,
    pub width: usize,
    pub height: usize,
    /// Output cells covering the unpadded image: `ceil(W/2)`, `ceil(H/2)`.
    pub out_width: usize,
    pub out_height: usize,
    /// ROI resampled to the `out_width × out_height` output grid.
    pub roi: Option<Mask>,
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m).max(1) * m
}

/// Normalizes and replicate-pads an image for inference.
pub fn eval_prepare<T: Scalar>(
    image: &Image,
    roi: Option<&Mask>,
    norm: &Normalization,
) -> Result<Prepared<T>> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let pw = round_up(image.width, INPUT_MULTIPLE);
    let ph = round_up(image.height, INPUT_MULTIPLE);
    let padded = if (pw, ph) == (image.width, image.height) {
        image.clone()
    } else {
        image.pad_replicate(pw, ph)
    };
    let input = norm.apply::<T>(&padded).reshape([1, 3, ph, pw])?;
    let out_width = image.width.div_ceil(2);
    let out_height = image.height.div_ceil(2);
    Ok(Prepared {
        input,
        width: image.width,
        height: image.height,
        out_width,
        out_height,
        roi: roi.map(|m| m.resize_nearest(out_width, out_height)),
    })
}
