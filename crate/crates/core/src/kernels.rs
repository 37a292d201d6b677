//! Forward and backward kernels on flat `N,C,H,W` buffers.
//!
//! These are the numeric building blocks recorded by the autodiff tape. They
//! take shapes explicitly and never allocate tape state.

use crate::tensor::Scalar;

/// Geometry of a same-padded, stride-1 square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Direct nested-loop convolution. This is the reference the GEMM path is
/// tested against.
pub fn conv2d_reference<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (h, w, k, p) = (g.height as isize, g.width as isize, g.kernel, g.pad as isize);
    let mut out = vec![T::zero(); g.batch * g.out_channels * g.plane()];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let b = bias.map_or(T::zero(), |b| b[co]);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = b;
                    for ci in 0..g.in_channels {
                        for ky in 0..k {
                            let iy = y + ky as isize - p;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = x + kx as isize - p;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                let iv = input[((n * g.in_channels + ci) * g.height + iy as usize)
                                    * g.width
                                    + ix as usize];
                                let wv = weight[((co * g.in_channels + ci) * k + ky) * k + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                    out[((n * g.out_channels + co) * g.height + y as usize) * g.width
                        + x as usize] = acc;
                }
            }
        }
    }
    out
}

/// Output columns `x0..x1` whose source `x + dx` lies inside `0..w`.
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).clamp(0, w as isize) as usize;
    let x1 = (w as isize - dx).clamp(x0 as isize, w as isize) as usize;
    (x0, x1)
}

/// Unfolds one image `[C,H,W]` into columns `[C*k*k, H*W]`.
fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (h, w, k, p) = (g.height, g.width, g.kernel, g.pad as isize);
    let plane = g.plane();
    for ci in 0..g.in_channels {
        let src = &image[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let iy = y as isize + dy;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    let (x0, x1) = valid_span(w, dx);
                    line[..x0].fill(T::zero());
                    line[x1..].fill(T::zero());
                    if x0 < x1 {
                        let s0 = (x0 as isize + dx) as usize;
                        line[x0..x1].copy_from_slice(&srow[s0..s0 + x1 - x0]);
                    }
                }
            }
        }
    }
}

/// Folds columns back into an image, accumulating overlaps.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (h, w, k, p) = (g.height, g.width, g.kernel, g.pad as isize);
    let plane = g.plane();
    for ci in 0..g.in_channels {
        let dst = &mut image[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[y * w..(y + 1) * w];
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let (x0, x1) = valid_span(w, dx);
                    if x0 < x1 {
                        let d0 = (x0 as isize + dx) as usize;
                        for (d, &v) in drow[d0..d0 + x1 - x0].iter_mut().zip(&line[x0..x1]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution through im2col and GEMM. Matches [`conv2d_reference`].
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.plane();
    let patch = g.patch();
    let in_stride = g.in_channels * plane;
    let out_stride = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_stride];
    let mut cols = if g.kernel == 1 {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for n in 0..g.batch {
        let image = &input[n * in_stride..(n + 1) * in_stride];
        let dst = &mut out[n * out_stride..(n + 1) * out_stride];
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.kernel == 1 {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        T::gemm(
            g.out_channels,
            patch,
            plane,
            T::one(),
            weight,
            patch as isize,
            1,
            src,
            plane as isize,
            1,
            beta,
            dst,
            plane as isize,
            1,
        );
    }
    out
}

/// Gradients of [`conv2d_forward`]. Returns `(d_input, d_weight, d_bias)`;
/// `d_input` is only computed when requested.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane = g.plane();
    let patch = g.patch();
    let in_stride = g.in_channels * plane;
    let out_stride = g.out_channels * plane;
    let mut d_weight = vec![T::zero(); g.out_channels * patch];
    let mut d_bias = vec![T::zero(); g.out_channels];
    let mut d_input = want_input.then(|| vec![T::zero(); g.batch * in_stride]);
    let mut cols = if g.kernel == 1 {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    let mut d_cols = if want_input && g.kernel != 1 {
        vec![T::zero(); patch * plane]
    } else {
        Vec::new()
    };
    for n in 0..g.batch {
        let image = &input[n * in_stride..(n + 1) * in_stride];
        let dout = &grad_out[n * out_stride..(n + 1) * out_stride];
        for (co, row) in dout.chunks(plane).enumerate() {
            d_bias[co] += row.iter().copied().sum::<T>();
        }
        let src: &[T] = if g.kernel == 1 {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        // dW += dOut · colsᵀ
        T::gemm(
            g.out_channels,
            plane,
            patch,
            T::one(),
            dout,
            plane as isize,
            1,
            src,
            1,
            plane as isize,
            T::one(),
            &mut d_weight,
            patch as isize,
            1,
        );
        if let Some(d_input) = d_input.as_mut() {
            let dst = &mut d_input[n * in_stride..(n + 1) * in_stride];
            // dCols = Wᵀ · dOut
            if g.kernel == 1 {
                T::gemm(
                    patch,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    1,
                    patch as isize,
                    dout,
                    plane as isize,
                    1,
                    T::zero(),
                    dst,
                    plane as isize,
                    1,
                );
            } else {
                T::gemm(
                    patch,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    1,
                    patch as isize,
                    dout,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut d_cols,
                    plane as isize,
                    1,
                );
                col2im(g, &d_cols, dst);
            }
        }
    }
    (d_input, d_weight, d_bias)
}

/// Per-channel statistics saved by a train-mode batch norm forward.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

/// Train-mode batch norm: normalizes each channel by its batch mean and
/// biased variance.
pub fn batchnorm_train_forward<T: Scalar>(
    dims: [usize; 4],
    input: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, BatchNormSaved<T>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            s += input[base..base + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for &x in &input[base..base + plane] {
                let d = x - m;
                v += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); input.len()];
    let mut out = vec![T::zero(); input.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let xh = (input[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (
        out,
        BatchNormSaved {
            normalized,
            inv_std,
            mean,
            var,
        },
    )
}

/// Returns `(d_input, d_gamma, d_beta)` for a train-mode batch norm.
pub fn batchnorm_train_backward<T: Scalar>(
    dims: [usize; 4],
    saved: &BatchNormSaved<T>,
    gamma: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let range = base..base + plane;
            for (&g, &x) in grad_out[range.clone()].iter().zip(&saved.normalized[range]) {
                d_beta[ch] += g;
                d_gamma[ch] += g * x;
            }
        }
    }
    let mut d_input = vec![T::zero(); grad_out.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let scale = gamma[ch] * saved.inv_std[ch] / count;
            for i in base..base + plane {
                d_input[i] = scale
                    * (count * grad_out[i] - d_beta[ch] - saved.normalized[i] * d_gamma[ch]);
            }
        }
    }
    (d_input, d_gamma, d_beta)
}

/// 2×2 stride-2 max pool. Returns the output and, per output cell, the flat
/// input index that won. Ties go to the first position in row-major window
/// order.
pub fn maxpool2x2_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> (Vec<T>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + (2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2x_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let ow = 2 * w;
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x_forward`]: sums each 2×2 block.
pub fn upsample2x_backward<T: Scalar>(dims: [usize; 4], grad_out: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let ow = 2 * w;
    let mut d = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    d
}

/// Concatenates along channels: `a` then `b`.
pub fn concat_channels_forward<T: Scalar>(
    n: usize,
    ca: usize,
    cb: usize,
    plane: usize,
    a: &[T],
    b: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        out.extend_from_slice(&a[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b[i * cb * plane..(i + 1) * cb * plane]);
    }
    out
}

pub fn concat_channels_backward<T: Scalar>(
    n: usize,
    ca: usize,
    cb: usize,
    plane: usize,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut da = Vec::with_capacity(n * ca * plane);
    let mut db = Vec::with_capacity(n * cb * plane);
    let stride = (ca + cb) * plane;
    for i in 0..n {
        let chunk = &grad_out[i * stride..(i + 1) * stride];
        da.extend_from_slice(&chunk[..ca * plane]);
        db.extend_from_slice(&chunk[ca * plane..]);
    }
    (da, db)
}

/// Multiplies every channel of `features` by the single-channel `map`.
pub fn mul_channel_forward<T: Scalar>(dims: [usize; 4], features: &[T], map: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![T::zero(); features.len()];
    for b in 0..n {
        let m = &map[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in 0..plane {
                out[base + i] = features[base + i] * m[i];
            }
        }
    }
    out
}

/// Returns `(d_features, d_map)`.
pub fn mul_channel_backward<T: Scalar>(
    dims: [usize; 4],
    features: &[T],
    map: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut d_features = vec![T::zero(); features.len()];
    let mut d_map = vec![T::zero(); map.len()];
    for b in 0..n {
        let m = &map[b * plane..(b + 1) * plane];
        let dm = &mut d_map[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in 0..plane {
                d_features[base + i] = grad_out[base + i] * m[i];
                dm[i] += grad_out[base + i] * features[base + i];
            }
        }
    }
    (d_features, d_map)
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `target`, in the fused
/// form `max(z,0) - z·t + ln(1 + e^{-|z|})`.
pub fn bce_with_logit<T: Scalar>(logit: T, target: T) -> T {
    logit.max(T::zero()) - logit * target + (-logit.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gemm_conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (k, pad) in [(1, 0), (3, 1)] {
            let g = ConvGeometry {
                batch: 2,
                in_channels: 3,
                out_channels: 4,
                height: 5,
                width: 6,
                kernel: k,
                pad,
            };
            let x = random(&mut rng, 2 * 3 * 30);
            let wt = random(&mut rng, 4 * 3 * k * k);
            let b = random(&mut rng, 4);
            let fast = conv2d_forward(&g, &x, &wt, Some(&b));
            let slow = conv2d_reference(&g, &x, &wt, Some(&b));
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_reference_adjoint() {
        // <conv(x), r> is linear in x and w; its gradients are conv_backward(r).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = ConvGeometry {
            batch: 1,
            in_channels: 2,
            out_channels: 3,
            height: 4,
            width: 4,
            kernel: 3,
            pad: 1,
        };
        let x = random(&mut rng, 32);
        let wt = random(&mut rng, 54);
        let r = random(&mut rng, 48);
        let (dx, dw, db) = conv2d_backward(&g, &x, &wt, &r, true);
        let dx = dx.unwrap();
        let f = |x: &[f64], w: &[f64]| -> f64 {
            conv2d_reference(&g, x, w, None)
                .iter()
                .zip(&r)
                .map(|(a, b)| a * b)
                .sum()
        };
        for i in 0..x.len() {
            let mut e = vec![0.0; x.len()];
            e[i] = 1.0;
            assert!((f(&e, &wt) - dx[i]).abs() < 1e-12);
        }
        for i in 0..wt.len() {
            let mut e = vec![0.0; wt.len()];
            e[i] = 1.0;
            assert!((f(&x, &e) - dw[i]).abs() < 1e-12);
        }
        let rsum: f64 = r[..16].iter().sum();
        assert!((db[0] - rsum).abs() < 1e-12);
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let (out, arg) = maxpool2x2_forward([1, 1, 2, 2], &[3.0f64, 3.0, 3.0, 3.0]);
        assert_eq!(out, vec![3.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(50.0f64) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-50.0f64) > 0.0 && sigmoid(-50.0f64) < 1e-20);
        assert!(sigmoid(-1000.0f64).is_finite());
        assert!(sigmoid(1000.0f32).is_finite());
    }

    #[test]
    fn fused_bce_matches_log_form() {
        for z in [-3.0f64, -0.2, 0.0, 0.7, 4.0] {
            let p = sigmoid(z);
            for t in [0.0, 1.0] {
                let direct = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                assert!((bce_with_logit(z, t) - direct).abs() < 1e-12);
            }
        }
        // No log(0) at extreme logits.
        assert!(bce_with_logit(-800.0f64, 1.0).is_finite());
    }
}
