//! Brute-force reference implementations shared by the integration tests.
//! Each one is written from the definitions, not from the library code.

#![allow(dead_code)]

use rand::Rng;

/// Normalized `size × size` Gaussian window evaluated pixel by pixel.
pub fn gaussian(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let r = (size / 2) as f64;
    let mut g = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (j, row) in g.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let (dx, dy) = (i as f64 - r, j as f64 - r);
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in &mut g {
        for v in row {
            *v /= total;
        }
    }
    g
}

/// Density ground truth: for every head, every pixel of the image asks
/// whether it lies in the head's window and takes its share of the clipped
/// window's mass.
pub fn density(w: usize, h: usize, points: &[(f64, f64)], size: usize, sigma: f64) -> Vec<f64> {
    let g = gaussian(size, sigma);
    let r = (size / 2) as i64;
    let mut out = vec![0.0; w * h];
    for &(px, py) in points {
        let cx = (px.round() as i64).clamp(0, w as i64 - 1);
        let cy = (py.round() as i64).clamp(0, h as i64 - 1);
        let inside = |x: i64, y: i64| (x - cx).abs() <= r && (y - cy).abs() <= r;
        let weight = |x: i64, y: i64| g[(y - cy + r) as usize][(x - cx + r) as usize];
        let mut mass = 0.0;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if inside(x, y) {
                    mass += weight(x, y);
                }
            }
        }
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if inside(x, y) {
                    out[(y * w as i64 + x) as usize] += weight(x, y) / mass;
                }
            }
        }
    }
    out
}

/// Zero-padded Gaussian blur.
pub fn smooth(d: &[f64], w: usize, h: usize, size: usize, sigma: f64) -> Vec<f64> {
    let g = gaussian(size, sigma);
    let r = (size / 2) as i64;
    let mut out = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut z = 0.0;
            for (j, row) in g.iter().enumerate() {
                for (i, k) in row.iter().enumerate() {
                    let (sx, sy) = (x + i as i64 - r, y + j as i64 - r);
                    if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
                        z += k * d[(sy * w as i64 + sx) as usize];
                    }
                }
            }
            out[(y * w as i64 + x) as usize] = z;
        }
    }
    out
}

/// Blur followed by `>= th`.
pub fn attention(d: &[f64], w: usize, h: usize, size: usize, sigma: f64, th: f64) -> Vec<u8> {
    smooth(d, w, h, size, sigma).iter().map(|&z| (z >= th) as u8).collect()
}

/// `μ = 1 + 15·w/1024 // 2 · 2` read left to right, `ρ = (μ+4)/4`.
pub fn adaptive(w: usize) -> (usize, f64) {
    let mu = 1 + ((15.0 * w as f64 / 1024.0) / 2.0).floor() as usize * 2;
    (mu, (mu as f64 + 4.0) / 4.0)
}

/// Mean absolute error and root mean squared error by plain loops.
pub fn metrics(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    let n = pred.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for i in 0..pred.len() {
        let e = pred[i] - gt[i];
        abs += e.abs();
        sq += e * e;
    }
    (abs / n, (sq / n).sqrt())
}

/// Same-padded stride-1 convolution, NCHW input, `[out, in, k, k]` weights.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    cout: usize,
    k: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let p = (k / 2) as i64;
    let mut out = vec![0.0; n * cout * h * w];
    for b in 0..n {
        for o in 0..cout {
            for y in 0..h as i64 {
                for xx in 0..w as i64 {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for c in 0..cin {
                        for ky in 0..k as i64 {
                            for kx in 0..k as i64 {
                                let (sy, sx) = (y + ky - p, xx + kx - p);
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                    continue;
                                }
                                let xi = ((b * cin + c) * h + sy as usize) * w + sx as usize;
                                let wi = ((o * cin + c) * k + ky as usize) * k + kx as usize;
                                acc += x[xi] * wt[wi];
                            }
                        }
                    }
                    out[((b * cout + o) * h + y as usize) * w + xx as usize] = acc;
                }
            }
        }
    }
    out
}

/// Binary cross-entropy in the textbook log form.
pub fn bce(logit: f64, target: f64) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Parameter count of the architecture at a width multiplier, tallied from
/// the layer list: 3×3 conv+BN layers in the backbone, then per decoder the
/// concat widths feeding 1×1 and 3×3 conv+BN layers and a 1×1 output conv.
pub fn param_count(m: f64, amp: bool) -> usize {
    let s = |c: usize| ((c as f64 * m).round() as usize).max(1);
    let conv_bn = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout + 2 * cout;
    let mut total = 0;
    let blocks = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut cin = 3;
    for (c, depth) in blocks {
        for _ in 0..depth {
            total += conv_bn(3, cin, s(c));
            cin = s(c);
        }
    }
    let decoder = {
        let mut d = 0;
        d += conv_bn(1, s(512) + s(512), s(256)) + conv_bn(3, s(256), s(256));
        d += conv_bn(1, s(256) + s(256), s(128)) + conv_bn(3, s(128), s(128));
        d += conv_bn(1, s(128) + s(128), s(64)) + conv_bn(3, s(64), s(64));
        d += conv_bn(3, s(64), s(32));
        d += s(32) + 1;
        d
    };
    total + decoder * if amp { 2 } else { 1 }
}

/// Adam with coupled L2 decay on one scalar, straight from the update rule.
pub struct ScalarAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub wd: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new(lr: f64, wd: f64) -> Self {
        Self {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            wd,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, x: f64, grad: f64) -> f64 {
        self.t += 1;
        let g = grad + self.wd * x;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let mh = self.m / (1.0 - self.b1.powi(self.t));
        let vh = self.v / (1.0 - self.b2.powi(self.t));
        x - self.lr * mh / (vh.sqrt() + self.eps)
    }
}

/// Up to `max_heads` points in `[0,w) × [0,h)`, about a third of them
/// pushed onto the image border.
pub fn random_points<R: Rng>(rng: &mut R, w: usize, h: usize, max_heads: usize) -> Vec<(f64, f64)> {
    let n = rng.random_range(0..=max_heads);
    (0..n)
        .map(|_| {
            let mut x = rng.random_range(0.0..w as f64);
            let mut y = rng.random_range(0.0..h as f64);
            match rng.random_range(0..6) {
                0 => x = 0.0,
                1 => x = (w as f64 - 1.0).max(0.0),
                2 => y = 0.0,
                3 => y = (h as f64 - 1.0).max(0.0),
                _ => {}
            }
            (x, y)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
