//! Synthetic blob-crowd dataset.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, AnnotationFile, Entry};
use crate::error::{Error, Result};
use crate::groundtruth::PointAnnotation;
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub images: usize,
    pub width: usize,
    pub height: usize,
    pub min_heads: usize,
    pub max_heads: usize,
    /// Blob standard deviation in pixels.
    pub blob_sigma: f64,
    /// Minimum distance between blob centres.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 20,
            width: 128,
            height: 128,
            min_heads: 5,
            max_heads: 25,
            blob_sigma: 2.5,
            min_separation: 8.0,
            seed: 0,
        }
    }
}

/// Draws one image with `Gaussian blob per head` on a textured background.
fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng, id: &str) -> Entry {
    let (w, h) = (cfg.width, cfg.height);
    let heads = rng.random_range(cfg.min_heads..=cfg.max_heads);
    let margin = 2.0 * cfg.blob_sigma;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(heads);
    let mut attempts = 0;
    while points.len() < heads {
        let p = (
            rng.random_range(margin..w as f64 - margin),
            rng.random_range(margin..h as f64 - margin),
        );
        attempts += 1;
        let sep = if attempts > 10_000 { 0.0 } else { cfg.min_separation };
        if points
            .iter()
            .all(|q| (q.0 - p.0).hypot(q.1 - p.1) >= sep)
        {
            points.push(p);
        }
    }

    let base: [f32; 3] = [
        rng.random_range(0.1..0.3),
        rng.random_range(0.1..0.3),
        rng.random_range(0.1..0.3),
    ];
    let tint: [f32; 3] = [
        rng.random_range(0.6..0.9),
        rng.random_range(0.5..0.8),
        rng.random_range(0.4..0.7),
    ];
    let mut image = Image::filled(w, h, base);
    for v in image.data.iter_mut() {
        *v += rng.random_range(-0.03..0.03);
    }
    let two_s2 = 2.0 * cfg.blob_sigma * cfg.blob_sigma;
    let reach = (3.0 * cfg.blob_sigma).ceil() as isize;
    for &(px, py) in &points {
        let (cx, cy) = (px.round() as isize, py.round() as isize);
        for y in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
            for x in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                let a = (-d2 / two_s2).exp() as f32;
                for (c, t) in tint.iter().enumerate() {
                    let i = (c * h + y as usize) * w + x as usize;
                    image.data[i] += a * (t - image.data[i]);
                }
            }
        }
    }
    for v in image.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Entry::new(
        image,
        PointAnnotation {
            image_id: id.to_owned(),
            width: w,
            height: h,
            points,
        },
        crate::groundtruth::DENSITY_KERNEL,
    )
}

/// Generates the dataset in memory. Images are quantized to 8 bits so the
/// result matches what [`write_dataset`] produces on disk.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Entry>> {
    if cfg.images == 0 || cfg.min_heads > cfg.max_heads || cfg.width < 16 || cfg.height < 16 {
        return Err(Error::InvalidArgument(format!("invalid synth config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.images)
        .map(|i| {
            let mut e = draw(cfg, &mut rng, &format!("synth_{i:03}"));
            for v in e.image.data.iter_mut() {
                *v = crate::imaging::to_u8(*v as f64) as f32 / 255.0;
            }
            e
        })
        .collect())
}

/// Writes `synth_NNN.png`, `synth_NNN.json` and `manifest.json` into `dir`
/// and returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for e in generate(cfg)? {
        let png = format!("{}.png", e.id());
        let json = format!("{}.json", e.id());
        e.image.save(dir.join(&png))?;
        AnnotationFile {
            image: png.into(),
            width: e.annotation.width,
            height: e.annotation.height,
            points: e.annotation.points.iter().map(|&(x, y)| [x, y]).collect(),
            roi: None,
        }
        .write(dir.join(&json))?;
        entries.push(PathBuf::from(json));
    }
    let manifest = dir.join("manifest.json");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
