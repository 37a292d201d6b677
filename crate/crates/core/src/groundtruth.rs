//! Density and attention targets rasterized from head annotations.
//!
//! Each head becomes a truncated `μ×μ` Gaussian stamp centred on its
//! nearest pixel. Stamps clipped by the image border are renormalized over
//! their in-bounds part, so a density map always integrates to exactly the
//! number of heads. The attention target blurs the density map once more
//! with a small Gaussian and thresholds it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize_plane_bilinear, Image};

/// Default stamp for density maps: 15×15 window, σ = 4.
pub const DENSITY_KERNEL: KernelSpec = KernelSpec { size: 15, sigma: 4.0 };
/// Default smoothing for attention targets: 3×3 window, σ = 2.
pub const ATTENTION_KERNEL: KernelSpec = KernelSpec { size: 3, sigma: 2.0 };
/// Default attention threshold.
pub const ATTENTION_THRESHOLD: f64 = 0.001;

/// Fixed size images are resized to before rendering for large-image
/// datasets.
pub const QNRF_SIZE: (usize, usize) = (1024, 768);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    /// Head centres `(x, y)` in pixels.
    pub points: Vec<(f64, f64)>,
}

impl PointAnnotation {
    pub fn new(image_id: impl Into<String>, width: usize, height: usize) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            points: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Clamps every point into `[0,width) × [0,height)`. Non-finite points
    /// are dropped.
    pub fn clamp_points(&mut self) {
        let (w, h) = (self.width as f64, self.height as f64);
        let below = |v: f64| if v > 0.0 { v.next_down() } else { 0.0 };
        self.points.retain(|(x, y)| x.is_finite() && y.is_finite());
        for (x, y) in &mut self.points {
            *x = x.clamp(0.0, below(w));
            *y = y.clamp(0.0, below(h));
        }
    }
}

/// Gaussian window: odd side `size` (μ) and standard deviation `sigma` (ρ).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub size: usize,
    pub sigma: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        DENSITY_KERNEL
    }
}

impl KernelSpec {
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        let k = Self { size, sigma };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd and >= 1, got {}",
                self.size
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    /// Row-major `size×size` weights summing to one.
    pub fn weights(&self) -> Vec<f64> {
        let r = self.radius() as isize;
        let s2 = 2.0 * self.sigma * self.sigma;
        let mut w: Vec<f64> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (-((dx * dx + dy * dy) as f64) / s2).exp()))
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        w
    }
}

/// Kernel scaled to the image width: `μ = 1 + ⌊15·w/1024 / 2⌋·2`,
/// `ρ = (μ+4)/4`. `μ` is odd by construction.
pub fn adaptive_kernel(image_width: usize) -> KernelSpec {
    let half = (15.0 * image_width as f64 / 1024.0 / 2.0).floor() as usize;
    let size = 1 + half * 2;
    KernelSpec {
        size,
        sigma: (size as f64 + 4.0) / 4.0,
    }
}

/// People-per-pixel map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Binary head-region mask, row-major, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionTarget {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl DensityMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `(x, y)` of the largest value, first in row-major order on ties.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<usize> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if best.is_none_or(|b| v > self.values[b]) {
                best = Some(i);
            }
        }
        best.map(|i| (i % self.width, i / self.width))
    }
}

impl AttentionTarget {
    pub fn ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

fn stamp_center(v: f64, len: usize) -> usize {
    (v.round().max(0.0) as usize).min(len.saturating_sub(1))
}

/// Sums one renormalized Gaussian stamp per head.
pub fn render_density(ann: &PointAnnotation, kernel: &KernelSpec) -> DensityMap {
    let (w, h) = (ann.width, ann.height);
    let mut map = DensityMap::zeros(w, h);
    if w == 0 || h == 0 {
        return map;
    }
    let weights = kernel.weights();
    let r = kernel.radius() as isize;
    let k = kernel.size;
    for &(px, py) in &ann.points {
        let cx = stamp_center(px, w) as isize;
        let cy = stamp_center(py, h) as isize;
        let x0 = (cx - r).max(0);
        let x1 = (cx + r).min(w as isize - 1);
        let y0 = (cy - r).max(0);
        let y1 = (cy + r).min(h as isize - 1);
        let kidx = |x: isize, y: isize| ((y - cy + r) as usize) * k + (x - cx + r) as usize;
        let mut mass = 0.0;
        for y in y0..=y1 {
            for x in x0..=x1 {
                mass += weights[kidx(x, y)];
            }
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                map.values[y as usize * w + x as usize] += weights[kidx(x, y)] / mass;
            }
        }
    }
    map
}

/// Convolves a density map with the full (not border-renormalized) kernel,
/// zero padding outside the image.
pub fn smooth_density(density: &DensityMap, kernel: &KernelSpec) -> Vec<f64> {
    let (w, h) = (density.width as isize, density.height as isize);
    let weights = kernel.weights();
    let r = kernel.radius() as isize;
    let k = kernel.size;
    let mut out = vec![0.0; density.values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                let sy = y + dy;
                if sy < 0 || sy >= h {
                    continue;
                }
                for dx in -r..=r {
                    let sx = x + dx;
                    if sx < 0 || sx >= w {
                        continue;
                    }
                    acc += weights[((dy + r) as usize) * k + (dx + r) as usize]
                        * density.values[(sy * w + sx) as usize];
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Blurs `density` with `smooth` and marks every pixel `≥ th`.
pub fn render_attention(
    density: &DensityMap,
    smooth: &KernelSpec,
    th: f64,
) -> Result<AttentionTarget> {
    if !(th > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "attention threshold must be positive, got {th}"
        )));
    }
    smooth.validate()?;
    let z = smooth_density(density, smooth);
    Ok(AttentionTarget {
        width: density.width,
        height: density.height,
        values: z.iter().map(|&v| u8::from(v >= th)).collect(),
    })
}

/// Halves both sides of a target map, preserving what matters for it.
pub trait DownscaleHalf: Sized {
    fn downscale_half(&self) -> Result<Self>;
}

fn check_even(op: &'static str, w: usize, h: usize) -> Result<()> {
    if !w.is_multiple_of(2) || !h.is_multiple_of(2) {
        return Err(Error::InvalidShape {
            op,
            shape: vec![h, w],
            reason: "dimensions must be even".into(),
        });
    }
    Ok(())
}

impl DownscaleHalf for DensityMap {
    /// 2×2 sum pooling; the total count is preserved.
    fn downscale_half(&self) -> Result<Self> {
        check_even("downscale_half", self.width, self.height)?;
        let (w, h) = (self.width / 2, self.height / 2);
        let mut values = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let g = |dy: usize, dx: usize| self.get(2 * x + dx, 2 * y + dy);
                values[y * w + x] = g(0, 0) + g(0, 1) + g(1, 0) + g(1, 1);
            }
        }
        Ok(Self {
            width: w,
            height: h,
            values,
        })
    }
}

impl DownscaleHalf for AttentionTarget {
    /// 2×2 max pooling; stays binary.
    fn downscale_half(&self) -> Result<Self> {
        check_even("downscale_half", self.width, self.height)?;
        let (w, h) = (self.width / 2, self.height / 2);
        let mut values = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                let g = |dy: usize, dx: usize| {
                    self.values[(2 * y + dy) * self.width + 2 * x + dx]
                };
                values[y * w + x] = g(0, 0).max(g(0, 1)).max(g(1, 0)).max(g(1, 1));
            }
        }
        Ok(Self {
            width: w,
            height: h,
            values,
        })
    }
}

pub fn downscale_half_sum<M: DownscaleHalf>(map: &M) -> Result<M> {
    map.downscale_half()
}

/// Result of the fixed-size preprocessing for large images.
#[derive(Clone, Debug)]
pub struct QnrfSample {
    pub image: Image,
    pub annotation: PointAnnotation,
    pub kernel: KernelSpec,
    pub density: DensityMap,
}

/// Picks the kernel from the original width, renders density at original
/// size, then resizes image and density to 1024×768. The density is
/// rescaled by one global factor so its sum is unchanged.
pub fn qnrf_preprocess(ann: &PointAnnotation, image: &Image) -> Result<QnrfSample> {
    if (image.width, image.height) != (ann.width, ann.height) {
        return Err(Error::InvalidArgument(format!(
            "annotation is {}x{} but image is {}x{}",
            ann.width, ann.height, image.width, image.height
        )));
    }
    let kernel = adaptive_kernel(ann.width);
    let density = render_density(ann, &kernel);
    let (tw, th) = QNRF_SIZE;
    if (ann.width, ann.height) == (tw, th) {
        return Ok(QnrfSample {
            image: image.clone(),
            annotation: ann.clone(),
            kernel,
            density,
        });
    }
    let before = density.sum();
    let mut values = resize_plane_bilinear(&density.values, ann.width, ann.height, tw, th);
    let after: f64 = values.iter().sum();
    if after > 0.0 {
        let k = before / after;
        values.iter_mut().for_each(|v| *v *= k);
    }
    let sx = tw as f64 / ann.width as f64;
    let sy = th as f64 / ann.height as f64;
    let mut annotation = PointAnnotation {
        image_id: ann.image_id.clone(),
        width: tw,
        height: th,
        points: ann.points.iter().map(|&(x, y)| (x * sx, y * sy)).collect(),
    };
    annotation.clamp_points();
    Ok(QnrfSample {
        image: image.resize_bilinear(tw, th),
        annotation,
        kernel,
        density: DensityMap {
            width: tw,
            height: th,
            values,
        },
    })
}
