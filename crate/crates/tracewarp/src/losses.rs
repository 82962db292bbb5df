//! Training objectives: differentiable normalized mutual information,
//! content alignment, and least-squares adversarial losses.
//!
//! Mutual information is estimated from soft histograms: each pixel spreads
//! one unit of mass over nearby bins through a truncated Gaussian Parzen
//! kernel, so the joint histogram — and everything derived from it — is
//! differentiable w.r.t. both images. NMI(X,Y) = (H(X)+H(Y)) / H(X,Y),
//! which runs from 1 (independent) to 2 (hard-binned identical images; the
//! soft estimator saturates below 2 because the kernel spreads mass off the
//! diagonal).
//!
//! L1 and the adversarial objectives are means, not sums, so the lambda
//! weights stay resolution- and patch-count-independent.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Floor inside entropy logarithms. Empty bins contribute no image gradient
/// because the truncated kernel never touches them.
pub const ENTROPY_EPS: f64 = 1e-10;

/// Parzen kernel bandwidth in bin widths.
pub const DEFAULT_PARZEN_SIGMA: f64 = 0.5;

/// Mixing weights of the two streams and their regularizers.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Share of the translation task; the deformation task gets `1 - alpha`.
    pub alpha: f64,
    /// Strength of the cross-domain constraint between the two outputs.
    pub gamma: f64,
    pub lambda_adv: f64,
    pub lambda_smooth: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must lie in [0,1], got {}",
                self.alpha
            )));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda_adv", self.lambda_adv),
            ("lambda_smooth", self.lambda_smooth),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            gamma: 1.0,
            lambda_adv: 0.01,
            lambda_smooth: 0.2,
        }
    }
}

/// Soft-histogram configuration for one mutual-information term.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DnmiConfig {
    pub bins: usize,
    /// Kernel bandwidth in bin widths.
    pub sigma: f64,
    pub value_range: (f64, f64),
}

impl DnmiConfig {
    pub fn new(bins: usize) -> Self {
        DnmiConfig {
            bins,
            sigma: DEFAULT_PARZEN_SIGMA,
            value_range: (-1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!(
                "dnmi bins must be >= 2, got {}",
                self.bins
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "dnmi sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(self.value_range.1 > self.value_range.0) {
            return Err(Error::Config(format!(
                "dnmi value range is degenerate: {:?}",
                self.value_range
            )));
        }
        Ok(())
    }
}

fn entropy<T: Scalar>(tape: &mut Tape<T>, p: Var) -> Result<Var> {
    let shifted = tape.add_scalar(p, ENTROPY_EPS);
    let logp = tape.ln(shifted);
    let plogp = tape.mul(p, logp)?;
    let s = tape.sum(plogp);
    Ok(tape.neg(s))
}

fn dnmi_single<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, cfg: &DnmiConfig) -> Result<Var> {
    let pixels = tape.value(a).numel();
    let (lo, hi) = cfg.value_range;
    let wa = tape.parzen_weights(a, cfg.bins, cfg.sigma, lo, hi)?;
    let wb = tape.parzen_weights(b, cfg.bins, cfg.sigma, lo, hi)?;
    let joint = tape.matmul_tn(wa, wb)?;
    // Rows of the weight matrices are normalized, so total mass is P exactly.
    let p_joint = tape.mul_scalar(joint, 1.0 / pixels as f64);
    let p_a = tape.row_sum(p_joint)?;
    let p_b = tape.col_sum(p_joint)?;
    let h_a = entropy(tape, p_a)?;
    let h_b = entropy(tape, p_b)?;
    let h_ab = entropy(tape, p_joint)?;
    let num = tape.add(h_a, h_b)?;
    tape.div(num, h_ab)
}

/// Differentiable normalized mutual information of two same-shape images,
/// computed per batch sample and averaged. Values outside the configured
/// range are clamped into it.
pub fn dnmi<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, cfg: &DnmiConfig) -> Result<Var> {
    cfg.validate()?;
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "dnmi: image shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let (n, _, _, _) = tape.value(a).dims4()?;
    if n == 1 {
        return dnmi_single(tape, a, b, cfg);
    }
    let mut acc: Option<Var> = None;
    for i in 0..n {
        let ai = tape.batch_slice(a, i)?;
        let bi = tape.batch_slice(b, i)?;
        let nmi = dnmi_single(tape, ai, bi, cfg)?;
        acc = Some(match acc {
            None => nmi,
            Some(prev) => tape.add(prev, nmi)?,
        });
    }
    Ok(tape.mul_scalar(acc.expect("n >= 1"), 1.0 / n as f64))
}

/// `-DNMI(a, b)`: higher mutual information, lower loss.
pub fn dnmi_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, cfg: &DnmiConfig) -> Result<Var> {
    let nmi = dnmi(tape, a, b, cfg)?;
    Ok(tape.neg(nmi))
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let ad = tape.abs(diff);
    Ok(tape.mean(ad))
}

/// Sum weighted terms, skipping zero coefficients entirely so degenerate
/// settings (alpha 0 or 1, gamma 0) send exactly zero gradient into the
/// disabled stream.
fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(term, c) in terms {
        if c == 0.0 {
            continue;
        }
        let scaled = if c == 1.0 {
            term
        } else {
            tape.mul_scalar(term, c)
        };
        acc = Some(match acc {
            None => scaled,
            Some(prev) => tape.add(prev, scaled)?,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => tape.constant(crate::tensor::Tensor::scalar(T::zero())),
    })
}

/// Content alignment:
/// `alpha * L1(y_trans, y) + (1-alpha) * -DNMI(y_warp, y)
///  + min(alpha, 1-alpha) * gamma * -DNMI(y_trans, y_warp)`.
pub fn content_alignment_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y_trans: Var,
    y_warp: Var,
    y: Var,
    w: &LossWeights,
    cfg_warp: &DnmiConfig,
    cfg_cross: &DnmiConfig,
) -> Result<Var> {
    w.validate()?;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    if w.alpha != 0.0 {
        terms.push((l1_loss(tape, y_trans, y)?, w.alpha));
    }
    if w.alpha != 1.0 {
        terms.push((dnmi_loss(tape, y_warp, y, cfg_warp)?, 1.0 - w.alpha));
    }
    let cross_coeff = w.alpha.min(1.0 - w.alpha) * w.gamma;
    if cross_coeff != 0.0 {
        terms.push((dnmi_loss(tape, y_trans, y_warp, cfg_cross)?, cross_coeff));
    }
    weighted_sum(tape, &terms)
}

/// Least-squares generator objective: `mean((D(x, G(x)) - 1)^2)`.
pub fn adv_g_loss<T: Scalar>(tape: &mut Tape<T>, d_out: Var) -> Var {
    let shifted = tape.add_scalar(d_out, -1.0);
    let sq = tape.square(shifted);
    tape.mean(sq)
}

/// Least-squares discriminator objective:
/// `0.5 * (mean((D(x,y) - 1)^2) + mean(D(x, G(x))^2))`.
pub fn adv_d_loss<T: Scalar>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let real_shift = tape.add_scalar(d_real, -1.0);
    let real_sq = tape.square(real_shift);
    let real_term = tape.mean(real_sq);
    let fake_sq = tape.square(d_fake);
    let fake_term = tape.mean(fake_sq);
    let s = tape.add(real_term, fake_term)?;
    Ok(tape.mul_scalar(s, 0.5))
}

/// Scalar loss terms feeding the overall generator objective.
pub struct GeneratorLossTerms {
    pub align: Var,
    pub adv_g_trans: Option<Var>,
    pub adv_g_warp: Option<Var>,
    pub smoothness: Option<Var>,
}

fn require_term(term: Option<Var>, coeff: f64, name: &str) -> Result<Option<(Var, f64)>> {
    if coeff == 0.0 {
        return Ok(None);
    }
    match term {
        Some(v) => Ok(Some((v, coeff))),
        None => Err(Error::Config(format!(
            "generator loss: {name} term required (coefficient {coeff}) but not provided"
        ))),
    }
}

/// `L_G = L_align + lambda_adv * (alpha * L_advG^trans + (1-alpha) * L_advG^warp)
///        + (1-alpha) * lambda_smooth * L_smooth`.
pub fn total_generator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    t: &GeneratorLossTerms,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut terms = vec![(t.align, 1.0)];
    if let Some(p) = require_term(t.adv_g_trans, w.lambda_adv * w.alpha, "adv_g_trans")? {
        terms.push(p);
    }
    if let Some(p) = require_term(t.adv_g_warp, w.lambda_adv * (1.0 - w.alpha), "adv_g_warp")? {
        terms.push(p);
    }
    if let Some(p) = require_term(t.smoothness, (1.0 - w.alpha) * w.lambda_smooth, "smoothness")? {
        terms.push(p);
    }
    weighted_sum(tape, &terms)
}

/// `L_D = lambda_adv * (alpha * L_advD^trans + (1-alpha) * L_advD^warp)`.
pub fn total_discriminator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    adv_d_trans: Option<Var>,
    adv_d_warp: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut terms = Vec::new();
    if let Some(p) = require_term(adv_d_trans, w.lambda_adv * w.alpha, "adv_d_trans")? {
        terms.push(p);
    }
    if let Some(p) = require_term(adv_d_warp, w.lambda_adv * (1.0 - w.alpha), "adv_d_warp")? {
        terms.push(p);
    }
    weighted_sum(tape, &terms)
}
