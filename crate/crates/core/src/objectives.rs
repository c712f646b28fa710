//! Reconstruction, captioning and joint losses, the Gaussian likelihood
//! view of the reconstruction loss, and the caption conditional-entropy
//! bound.

use std::f64::consts::{LN_2, PI};

use crate::autograd::Var;
use crate::error::{MugError, Result};
use crate::params::Graph;
use crate::tensor::{kernels, Real, Tensor};
use crate::data::Example;
use crate::model::Model;
use crate::text::shift_for_teacher_forcing;
use crate::vision::{self, sample_mask, MaskSpec};

/// Loss weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_l: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_v: 1.0,
            lambda_l: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_v) || !ok(self.lambda_l) || self.lambda_v + self.lambda_l <= 0.0 {
            return Err(MugError::Config(format!(
                "loss weights ({}, {}) must be non-negative with a positive sum",
                self.lambda_v, self.lambda_l
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub loss_v: f64,
    pub loss_l: f64,
    pub loss_joint: f64,
    pub tokens_supervised: usize,
    pub pixels_supervised: usize,
}

/// Mean of squared differences over the elements of rows flagged in `rows`.
pub(crate) fn masked_mse_value<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, rows: &[bool]) -> Result<T> {
    let (m, n) = pred.dims2();
    if rows.len() != m || target.shape() != pred.shape() {
        return Err(MugError::Dimension {
            op: "masked_mse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let count = rows.iter().filter(|&&r| r).count() * n;
    if count == 0 {
        return Err(MugError::Invalid("reconstruction loss over zero masked patches".into()));
    }
    let mut s = T::zero();
    for i in (0..m).filter(|&i| rows[i]) {
        for (&p, &t) in pred.row(i).iter().zip(target.row(i)) {
            let d = p - t;
            s += d * d;
        }
    }
    Ok(s / T::from_usize(count).unwrap())
}

/// `‖(1−M)⊙(x − x̃)‖² / (Ω·P)`: squared error over masked patches only.
pub fn loss_reconstruction<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask: &MaskSpec) -> Result<T> {
    if mask.omega == 0 {
        return Err(MugError::Invalid("reconstruction loss needs at least one masked patch".into()));
    }
    masked_mse_value(pred, target, &mask.masked())
}

/// Mean token negative log-likelihood over supervised positions.
pub fn loss_caption<T: Real>(logits: &Tensor<T>, labels: &[usize], loss_mask: &[bool]) -> Result<T> {
    let (m, v) = logits.dims2();
    if labels.len() != m || loss_mask.len() != m {
        return Err(MugError::Dimension {
            op: "loss_caption",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len(), loss_mask.len()],
        });
    }
    let count = loss_mask.iter().filter(|&&f| f).count();
    if count == 0 {
        return Err(MugError::Invalid("caption loss over zero supervised tokens".into()));
    }
    let mut total = T::zero();
    for i in (0..m).filter(|&i| loss_mask[i]) {
        if labels[i] >= v {
            return Err(MugError::Invalid(format!("label {} out of range for {v} classes", labels[i])));
        }
        let row = logits.row(i);
        total += kernels::log_sum_exp(row) - row[labels[i]];
    }
    Ok(total / T::from_usize(count).unwrap())
}

/// `λ_V·L_V + λ_L·L_L`, always evaluated in this order.
pub fn joint_value(loss_v: f64, loss_l: f64, w: &LossWeights) -> f64 {
    w.lambda_v * loss_v + w.lambda_l * loss_l
}

pub fn loss_joint(
    loss_v: f64,
    loss_l: f64,
    tokens_supervised: usize,
    pixels_supervised: usize,
    w: &LossWeights,
) -> LossReport {
    LossReport {
        loss_v,
        loss_l,
        loss_joint: joint_value(loss_v, loss_l, w),
        tokens_supervised,
        pixels_supervised,
    }
}

/// Joint objective on the tape, in the same arithmetic order as
/// [`joint_value`].
pub fn joint_on_tape<T: Real>(g: &mut Graph<'_, T>, loss_v: Var, loss_l: Var, w: &LossWeights) -> Result<Var> {
    let a = g.tape.scale(loss_v, T::lit(w.lambda_v));
    let b = g.tape.scale(loss_l, T::lit(w.lambda_l));
    g.tape.add(a, b)
}

/// Per-element constant of the Gaussian negative log-likelihood,
/// `½·ln(2πσ²)`.
pub fn gaussian_const(sigma: f64) -> f64 {
    0.5 * (2.0 * PI * sigma * sigma).ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianEquiv {
    /// Mean per-element Gaussian NLL over masked elements.
    pub nll: f64,
    /// Masked mean squared error (the reconstruction loss).
    pub mse: f64,
    pub constant: f64,
}

/// Evaluates the masked Gaussian NLL `(x̃−x)²/(2σ²) + ½ln(2πσ²)` per element
/// alongside the masked MSE, so that `nll = mse/(2σ²) + const` can be
/// checked.
pub fn gaussian_nll_equiv<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask: &MaskSpec, sigma: f64) -> Result<GaussianEquiv> {
    if !(sigma > 0.0) {
        return Err(MugError::Config(format!("sigma {sigma} must be positive")));
    }
    let mse = loss_reconstruction(pred, target, mask)?.as_f64();
    let c = gaussian_const(sigma);
    let two_var = 2.0 * sigma * sigma;
    let mut nll = 0.0;
    let mut count = 0usize;
    for (i, &k) in mask.keep.iter().enumerate() {
        if k {
            continue;
        }
        for (&p, &t) in pred.row(i).iter().zip(target.row(i)) {
            let d = p.as_f64() - t.as_f64();
            nll += d * d / two_var + c;
            count += 1;
        }
    }
    Ok(GaussianEquiv {
        nll: nll / count as f64,
        mse,
        constant: c,
    })
}

/// Gaussian NLL assembled from elementwise primitives, independent of the
/// fused masked-MSE node.
pub fn gaussian_nll_on_tape<T: Real>(
    g: &mut Graph<'_, T>,
    pred: Var,
    target: &Tensor<T>,
    mask: &MaskSpec,
    sigma: f64,
) -> Result<Var> {
    let t = g.tape.constant(target.clone());
    let d = g.tape.sub(pred, t)?;
    let sq = g.tape.mul(d, d)?;
    let scaled = g.tape.scale(sq, T::lit(1.0 / (2.0 * sigma * sigma)));
    let shifted = g.tape.add_scalar(scaled, T::lit(gaussian_const(sigma)));
    g.tape.mean_rows(shifted, mask.masked())
}

/// Nats to bits.
pub fn nats_to_bits(nats: f64) -> f64 {
    nats / LN_2
}

/// Mean caption negative log-likelihood per supervised token, in bits,
/// with each image encoded under a seeded mask. An upper bound on the
/// conditional entropy of captions given the latent.
pub fn conditional_entropy_bound<T: Real>(model: &Model<T>, examples: &[Example<T>], mask_seed: u64) -> Result<f64> {
    if examples.is_empty() {
        return Err(MugError::Invalid("entropy bound over an empty dataset".into()));
    }
    let (mut total, mut tokens) = (0.0f64, 0usize);
    for ex in examples {
        let mask = sample_mask(ex.patches.rows(), model.config.mask_ratio, vision::mask_seed(mask_seed, ex.key, 0))?;
        let tf = shift_for_teacher_forcing(ex.tokens.trimmed())?;
        let mut g = model.graph();
        let latent = model.encode_masked(&mut g, &ex.patches, &mask)?;
        let logits = model.decode_text(&mut g, latent, &tf.input)?;
        let n = tf.supervised();
        total += loss_caption(g.value(logits), &tf.labels, &tf.loss_mask)?.as_f64() * n as f64;
        tokens += n;
    }
    Ok(nats_to_bits(total / tokens as f64))
}
