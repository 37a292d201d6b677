//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node to the [`Graph`] in
//! execution order. [`Graph::backward`] consumes the graph and walks the
//! nodes in exact reverse, so the tape is gone once gradients are out.

use crate::error::{Error, Result};
use crate::kernels::{self, BatchNormSaved, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Running mean/variance of a batch norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub batches_tracked: u64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            batches_tracked: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormConfig<T> {
    pub mode: Mode,
    pub eps: T,
    pub momentum: T,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    /// Eval-mode batch norm: `gamma * (x - mean) * inv_std + beta`.
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    Concat(Var, Var),
    MulChannel {
        features: Var,
        map: Var,
    },
    Mul(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
    /// `Σ (pred - target)² / divisor`
    SquaredError {
        pred: Var,
        target: Tensor<T>,
        divisor: T,
    },
    /// `Σ bce(sigmoid(logit), target) / divisor`
    BceWithLogits {
        logits: Var,
        target: Tensor<T>,
        divisor: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that does not take gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Records a leaf that takes gradients.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Same-padded, stride-1 convolution with a square `k×k` kernel,
    /// `k ∈ {1, 3}`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [n, cin, h, w] = self.value(input).dims4()?;
        let wshape = self.value(weight).shape().to_vec();
        let [cout, wcin, kh, kw] = match wshape[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    shape: wshape,
                    reason: "weight must be [Cout,Cin,k,k]".into(),
                })
            }
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.value(input).shape().to_vec(),
                rhs: wshape,
            });
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: wshape,
                reason: "kernel must be 1x1 or 3x3".into(),
            });
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: wshape,
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kernel: kh,
            pad: kh / 2,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new([n, cout, h, w], out)?,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        cfg: BatchNormConfig<T>,
    ) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let [n, c, h, w] = dims;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm2d",
                    lhs: dims.to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        if stats.mean.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d running stats",
                lhs: dims.to_vec(),
                rhs: vec![stats.mean.len()],
            });
        }
        let rg = self.any_grad(&[input, gamma, beta]);
        match cfg.mode {
            Mode::Train => {
                let count = n * h * w;
                if count < 2 {
                    return Err(Error::InvalidShape {
                        op: "batchnorm2d",
                        shape: dims.to_vec(),
                        reason: "train mode needs N*H*W >= 2 per channel".into(),
                    });
                }
                let (out, saved) = kernels::batchnorm_train_forward(
                    dims,
                    self.value(input).data(),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    cfg.eps,
                );
                let m = cfg.momentum;
                let unbias = T::of(count as f64 / (count - 1) as f64);
                for ch in 0..c {
                    stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * saved.mean[ch];
                    stats.var[ch] = (T::one() - m) * stats.var[ch] + m * saved.var[ch] * unbias;
                }
                stats.batches_tracked += 1;
                Ok(self.push(
                    Tensor::new(dims, out)?,
                    rg,
                    Op::BatchNormTrain {
                        input,
                        gamma,
                        beta,
                        saved,
                    },
                ))
            }
            Mode::Eval => {
                if stats.batches_tracked == 0 {
                    return Err(Error::UninitializedStats("batchnorm2d".into()));
                }
                let inv_std: Vec<T> = stats
                    .var
                    .iter()
                    .map(|&v| T::one() / (v + cfg.eps).sqrt())
                    .collect();
                let x = self.value(input).data();
                let g = self.value(gamma).data();
                let b = self.value(beta).data();
                let plane = h * w;
                let mut normalized = vec![T::zero(); x.len()];
                let mut out = vec![T::zero(); x.len()];
                for i in 0..x.len() {
                    let ch = (i / plane) % c;
                    let xh = (x[i] - stats.mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
                Ok(self.push(
                    Tensor::new(dims, out)?,
                    rg,
                    Op::BatchNormEval {
                        input,
                        gamma,
                        beta,
                        normalized,
                        inv_std,
                    },
                ))
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let v = self.value(input).map(|x| x.max(T::zero()));
        let rg = self.any_grad(&[input]);
        self.push(v, rg, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let v = self.value(input).map(kernels::sigmoid);
        let rg = self.any_grad(&[input]);
        self.push(v, rg, Op::Sigmoid(input))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let [n, c, h, w] = dims;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "maxpool2x2",
                shape: dims.to_vec(),
                reason: "height and width must be even".into(),
            });
        }
        let (out, argmax) = kernels::maxpool2x2_forward(dims, self.value(input).data());
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::new([n, c, h / 2, w / 2], out)?,
            rg,
            Op::MaxPool { input, argmax },
        ))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let [n, c, h, w] = dims;
        let out = kernels::upsample2x_forward(dims, self.value(input).data());
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Tensor::new([n, c, 2 * h, 2 * w], out)?,
            rg,
            Op::Upsample(input),
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = kernels::concat_channels_forward(
            na,
            ca,
            cb,
            ha * wa,
            self.value(a).data(),
            self.value(b).data(),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new([na, ca + cb, ha, wa], out)?,
            rg,
            Op::Concat(a, b),
        ))
    }

    /// Multiplies `features [N,C,H,W]` by `map [N,1,H,W]` broadcast over C.
    pub fn mul_broadcast_channel(&mut self, features: Var, map: Var) -> Result<Var> {
        let dims = self.value(features).dims4()?;
        let [n, _, h, w] = dims;
        let [mn, mc, mh, mw] = self.value(map).dims4()?;
        if (mn, mc, mh, mw) != (n, 1, h, w) {
            return Err(Error::ShapeMismatch {
                op: "mul_broadcast_channel",
                lhs: dims.to_vec(),
                rhs: self.value(map).shape().to_vec(),
            });
        }
        let out =
            kernels::mul_channel_forward(dims, self.value(features).data(), self.value(map).data());
        let rg = self.any_grad(&[features, map]);
        Ok(self.push(
            Tensor::new(dims, out)?,
            rg,
            Op::MulChannel { features, map },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let v = self.value(input).map(|x| x * factor);
        let rg = self.any_grad(&[input]);
        self.push(v, rg, Op::Scale(input, factor))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), rg, Op::Sum(input))
    }

    /// `Σ (pred − target)² / divisor` as a scalar.
    pub fn squared_error(&mut self, pred: Var, target: &Tensor<T>, divisor: T) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "squared_error",
                lhs: self.value(pred).shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let s: T = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(s / divisor),
            rg,
            Op::SquaredError {
                pred,
                target: target.clone(),
                divisor,
            },
        ))
    }

    /// `Σ BCE(sigmoid(logits), target) / divisor`, computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>, divisor: T) -> Result<Var> {
        if self.value(logits).shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.value(logits).shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let s: T = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| kernels::bce_with_logit(z, t))
            .sum();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(s / divisor),
            rg,
            Op::BceWithLogits {
                logits,
                target: target.clone(),
                divisor,
            },
        ))
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: loss_shape.to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            let mut send = |v: Var, d: Vec<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(d) {
                            *a += x;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            };
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let want_input = nodes[input.0].requires_grad;
                    let (dx, dw, db) =
                        kernels::conv2d_backward(geom, val(*input), val(*weight), &g, want_input);
                    if let Some(dx) = dx {
                        send(*input, dx);
                    }
                    send(*weight, dw);
                    if let Some(b) = bias {
                        send(*b, db);
                    }
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let dims = nodes[input.0].value.dims4()?;
                    let (dx, dg, db) =
                        kernels::batchnorm_train_backward(dims, saved, val(*gamma), &g);
                    send(*input, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let [_, c, h, w] = nodes[input.0].value.dims4()?;
                    let plane = h * w;
                    let gm = val(*gamma);
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for i in 0..g.len() {
                        let ch = (i / plane) % c;
                        dx[i] = g[i] * gm[ch] * inv_std[ch];
                        dg[ch] += g[i] * normalized[i];
                        db[ch] += g[i];
                    }
                    send(*input, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::Relu(input) => {
                    let d = val(*input)
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gy)| if x > T::zero() { gy } else { T::zero() })
                        .collect();
                    send(*input, d);
                }
                Op::Sigmoid(input) => {
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gy)| gy * y * (T::one() - y))
                        .collect();
                    send(*input, d);
                }
                Op::MaxPool { input, argmax } => {
                    let mut d = vec![T::zero(); nodes[input.0].value.numel()];
                    for (&i, &gy) in argmax.iter().zip(&g) {
                        d[i] += gy;
                    }
                    send(*input, d);
                }
                Op::Upsample(input) => {
                    let dims = nodes[input.0].value.dims4()?;
                    send(*input, kernels::upsample2x_backward(dims, &g));
                }
                Op::Concat(a, b) => {
                    let [n, ca, h, w] = nodes[a.0].value.dims4()?;
                    let cb = nodes[b.0].value.dims4()?[1];
                    let (da, db) = kernels::concat_channels_backward(n, ca, cb, h * w, &g);
                    send(*a, da);
                    send(*b, db);
                }
                Op::MulChannel { features, map } => {
                    let dims = nodes[features.0].value.dims4()?;
                    let (df, dm) =
                        kernels::mul_channel_backward(dims, val(*features), val(*map), &g);
                    send(*features, df);
                    send(*map, dm);
                }
                Op::Mul(a, b) => {
                    let da = val(*b).iter().zip(&g).map(|(&y, &gy)| y * gy).collect();
                    let db = val(*a).iter().zip(&g).map(|(&x, &gy)| x * gy).collect();
                    send(*a, da);
                    send(*b, db);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Scale(input, factor) => {
                    send(*input, g.iter().map(|&gy| gy * *factor).collect());
                }
                Op::Sum(input) => {
                    send(*input, vec![g[0]; nodes[input.0].value.numel()]);
                }
                Op::SquaredError {
                    pred,
                    target,
                    divisor,
                } => {
                    let k = T::of(2.0) * g[0] / *divisor;
                    let d = val(*pred)
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| k * (p - t))
                        .collect();
                    send(*pred, d);
                }
                Op::BceWithLogits {
                    logits,
                    target,
                    divisor,
                } => {
                    let k = g[0] / *divisor;
                    let d = val(*logits)
                        .iter()
                        .zip(target.data())
                        .map(|(&z, &t)| k * (kernels::sigmoid(z) - t))
                        .collect();
                    send(*logits, d);
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` is not a gradient-taking leaf or the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 5.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        // subgradient at 0 is 0
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_negative_relu_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[4], &[-1.0, -0.5, -3.0, -1e-9]));
        let y = g.relu(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_box_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 1, 3, 3]));
        let w = g.variable(Tensor::ones([1, 1, 3, 3]));
        let b = g.variable(Tensor::zeros([1]));
        let y = g.conv2d(x, w, Some(b)).unwrap();
        let v = g.value(y);
        assert_eq!(v.at4(0, 0, 1, 1), 9.0);
        assert_eq!(v.at4(0, 0, 0, 0), 4.0);
        assert_eq!(v.at4(0, 0, 2, 2), 4.0);
        assert_eq!(v.at4(0, 0, 0, 1), 6.0);
        assert_eq!(v.at4(0, 0, 1, 2), 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 4 * 5).map(|i| (i as f64).sin()).collect();
        let x = g.constant(t(&[2, 1, 4, 5], &data));
        let w = g.constant(Tensor::ones([1, 1, 1, 1]));
        let b = g.constant(Tensor::zeros([1]));
        let y = g.conv2d(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros([3, 5, 3, 3]));
        let err = g.conv2d(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[3, 5, 3, 3]"), "{err}");
    }

    #[test]
    fn maxpool_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2x2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::full([1, 1, 2, 2], 7.0));
        let y = g.maxpool2x2(x).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros([1, 1, 3, 4]));
        assert!(g.maxpool2x2(x).is_err());
    }

    #[test]
    fn upsample_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.upsample2x(x).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let p = g.maxpool2x2(y).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.upsample2x(x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let b = g.variable(t(&[1, 1, 1, 2], &[3.0, 4.0]));
        let c = g.concat_channels(a, b).unwrap();
        let v = g.value(c).clone();
        assert_eq!(v.shape(), &[1, 2, 1, 2]);
        assert_eq!(v.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(v.slice_channels(0, 1).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(v.slice_channels(1, 2).unwrap().data(), &[3.0, 4.0]);
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros([1, 1, 2, 3]));
        let err = g.concat_channels(a, b).unwrap_err().to_string();
        assert!(err.contains("[1, 1, 2, 2]") && err.contains("[1, 1, 2, 3]"));
    }

    #[test]
    fn mul_broadcast_identity_and_zero() {
        let data: Vec<f64> = (0..12).map(|i| i as f64 - 5.0).collect();
        let mut g = Graph::<f64>::new();
        let f = g.constant(t(&[1, 3, 2, 2], &data));
        let ones = g.constant(Tensor::ones([1, 1, 2, 2]));
        let zeros = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let y1 = g.mul_broadcast_channel(f, ones).unwrap();
        let y0 = g.mul_broadcast_channel(f, zeros).unwrap();
        assert_eq!(g.value(y1).data(), &data[..]);
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros([1, 1, 2, 3]));
        assert!(g.mul_broadcast_channel(f, bad).is_err());
    }

    fn bn_cfg(mode: Mode) -> BatchNormConfig<f64> {
        BatchNormConfig {
            mode,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([2, 2, 3, 3], 4.2));
        let gamma = g.constant(t(&[2], &[1.5, -0.5]));
        let beta = g.constant(t(&[2], &[0.25, -3.0]));
        let mut stats = RunningStats::new(2);
        let y = g
            .batchnorm(x, gamma, beta, &mut stats, bn_cfg(Mode::Train))
            .unwrap();
        let v = g.value(y);
        for n in 0..2 {
            for i in 0..3 {
                assert_eq!(v.at4(n, 0, i, i), 0.25);
                assert_eq!(v.at4(n, 1, i, 2 - i), -3.0);
            }
        }
    }

    #[test]
    fn batchnorm_eval_requires_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::<f64>::ones([1, 1, 2, 2]));
        let gamma = g.constant(Tensor::ones([1]));
        let beta = g.constant(Tensor::zeros([1]));
        let mut stats = RunningStats::new(1);
        let err = g.batchnorm(x, gamma, beta, &mut stats, bn_cfg(Mode::Eval));
        assert!(matches!(err, Err(Error::UninitializedStats(_))));
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let gamma = g.constant(Tensor::ones([1]));
        let beta = g.constant(Tensor::zeros([1]));
        let mut stats = RunningStats::new(1);
        g.batchnorm(x, gamma, beta, &mut stats, bn_cfg(Mode::Train))
            .unwrap();
        // mean 2.5, unbiased var 5/3
        assert!((stats.mean[0] - 0.25).abs() < 1e-15);
        assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
        assert_eq!(stats.batches_tracked, 1);
    }
}
