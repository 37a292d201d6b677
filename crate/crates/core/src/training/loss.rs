//! Density regression and attention supervision losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// How pixel errors are reduced inside one image before averaging over the
/// batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelReduction {
    /// Sum over pixels (squared L2 norm per image).
    #[default]
    Sum,
    /// Mean over pixels.
    Mean,
}

fn divisor<T: Scalar>(shape: &[usize], reduction: PixelReduction) -> Result<T> {
    let n = *shape.first().ok_or_else(|| Error::InvalidShape {
        op: "loss",
        shape: shape.to_vec(),
        reason: "expected a leading batch axis".into(),
    })?;
    let pixels: usize = shape[1..].iter().product();
    let d = match reduction {
        PixelReduction::Sum => n,
        PixelReduction::Mean => n * pixels,
    };
    if d == 0 {
        return Err(Error::InvalidShape {
            op: "loss",
            shape: shape.to_vec(),
            reason: "empty batch".into(),
        });
    }
    Ok(T::of(d as f64))
}

/// `(1/N) Σ_i ‖pred_i − target_i‖²` over a `[N,1,h,w]` batch.
pub fn density_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    reduction: PixelReduction,
) -> Result<Var> {
    let d = divisor(target.shape(), reduction)?;
    g.squared_error(pred, target, d)
}

/// Rejects targets that are not exactly 0 or 1.
pub fn check_binary<T: Scalar>(target: &Tensor<T>) -> Result<()> {
    match target
        .data()
        .iter()
        .position(|&t| t != T::zero() && t != T::one())
    {
        Some(i) => Err(Error::InvalidArgument(format!(
            "attention target must be binary, found {:?} at index {i}",
            target.data()[i]
        ))),
        None => Ok(()),
    }
}

/// Binary cross-entropy between `sigmoid(logits)` and a binary target,
/// summed (or averaged) per image and averaged over the batch. Computed in
/// the fused logit form so no `log(0)` can occur.
pub fn attention_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: &Tensor<T>,
    reduction: PixelReduction,
) -> Result<Var> {
    check_binary(target)?;
    let d = divisor(target.shape(), reduction)?;
    g.bce_with_logits(logits, target, d)
}

/// `dl + alpha · al`; just `dl` when there is no attention term.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    dl: Var,
    al: Option<Var>,
    alpha: f64,
) -> Result<Var> {
    match al {
        Some(al) => {
            let scaled = g.scale(al, T::of(alpha));
            g.add(dl, scaled)
        }
        None => Ok(dl),
    }
}

/// Scalar form of [`combined_loss`].
pub fn combine(dl: f64, al: f64, alpha: f64) -> f64 {
    dl + alpha * al
}

/// BCE of probabilities computed from logits, per pixel, no reduction.
pub fn bce_from_logits<T: Scalar>(logits: &[T], target: &[T]) -> Vec<T> {
    logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| kernels::bce_with_logit(z, t))
        .collect()
}
