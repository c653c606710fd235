//! The training objective: photometric, Eikonal, decomposition, occlusion
//! decoupling and completeness terms, and their weighted sum.
//!
//! Every term has a plain reference form and a tape form. Tape forms return
//! sums divided by a caller-supplied denominator so that a batch split over
//! several tapes still normalizes by the global count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Mat, Tape, Var};
use crate::geometry::Vec3;

pub const ALPHA_CLAMP: f64 = 1e-5;
const EIKONAL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub eik: f64,
    pub dec: f64,
    pub comp: f64,
    pub occ: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eik: 0.1,
            dec: 0.003,
            comp: 0.2,
            occ: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eik", self.eik),
            ("dec", self.dec),
            ("comp", self.comp),
            ("occ", self.occ),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Settings of the occlusion decoupling term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionPrior {
    /// Foreground opacity above which an unmasked ray is taken to hide the body.
    pub threshold: f64,
    /// Weight of positive-target rays in the cross entropy.
    pub positive_weight: f64,
}

impl Default for OcclusionPrior {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            positive_weight: 5.0,
        }
    }
}

/// The five terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rgb: f64,
    pub eik: f64,
    pub dec: f64,
    pub occ: f64,
    pub comp: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("L_rgb", self.rgb),
            ("L_eik", self.eik),
            ("L_dec", self.dec),
            ("L_occ", self.occ),
            ("L_comp", self.comp),
        ]
    }
}

pub fn total(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    if let Some((name, v)) = parts.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss(format!("{name} = {v}")));
    }
    Ok(parts.rgb + w.eik * parts.eik + w.dec * parts.dec + w.occ * parts.occ + w.comp * parts.comp)
}

pub fn photometric(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| (0..3).map(move |c| (p[c] - t[c]).abs()))
        .sum();
    Ok(sum / (3 * pred.len()) as f64)
}

pub fn eikonal(grads: &[Vec3]) -> Result<f64> {
    if grads.is_empty() {
        return Err(Error::Contract(
            "eikonal term needs at least one gradient".into(),
        ));
    }
    Ok(grads.iter().map(|g| (g.norm() - 1.0).powi(2)).sum::<f64>() / grads.len() as f64)
}

fn bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

pub fn decomposition(alpha_fg: &[f64], mask: &[bool]) -> Result<f64> {
    if alpha_fg.len() != mask.len() {
        return Err(Error::Contract("opacity and mask lengths differ".into()));
    }
    if alpha_fg.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = alpha_fg
        .iter()
        .zip(mask)
        .map(|(&a, &m)| bce(a, if m { 1.0 } else { 0.0 }))
        .sum();
    Ok(sum / alpha_fg.len() as f64)
}

/// `1` where the ray is unmasked yet the foreground claims it.
pub fn occlusion_targets(alpha_fg: &[f64], mask: &[bool], prior: &OcclusionPrior) -> Vec<f64> {
    alpha_fg
        .iter()
        .zip(mask)
        .map(|(&a, &m)| if !m && a > prior.threshold { 1.0 } else { 0.0 })
        .collect()
}

pub fn occlusion_decoupling(
    alpha_occ: &[f64],
    alpha_fg: &[f64],
    mask: &[bool],
    prior: &OcclusionPrior,
) -> Result<f64> {
    if alpha_occ.len() != alpha_fg.len() || alpha_fg.len() != mask.len() {
        return Err(Error::Contract("opacity and mask lengths differ".into()));
    }
    if alpha_occ.is_empty() {
        return Ok(0.0);
    }
    let targets = occlusion_targets(alpha_fg, mask, prior);
    let sum: f64 = alpha_occ
        .iter()
        .zip(&targets)
        .map(|(&a, &t)| if t > 0.5 { prior.positive_weight } else { 1.0 } * bce(a, t))
        .sum();
    Ok(sum / alpha_occ.len() as f64)
}

pub fn completeness(sdf_near: &[f64]) -> f64 {
    if sdf_near.is_empty() {
        return 0.0;
    }
    sdf_near.iter().map(|s| s.abs()).sum::<f64>() / sdf_near.len() as f64
}

// ----- tape forms -----

fn check_denom(denom: f64) -> f64 {
    if denom > 0.0 {
        1.0 / denom
    } else {
        0.0
    }
}

/// `sum |pred - target| / denom`; `pred` is `N x 3`.
pub fn photometric_tape(tape: &mut Tape, pred: Var, target: &Mat, denom: f64) -> Var {
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t);
    let a = tape.abs(d);
    let s = tape.sum_all(a);
    tape.scale(s, check_denom(denom))
}

/// `sum (|g| - 1)^2 / denom`; `grad` is `M x 3`.
pub fn eikonal_tape(tape: &mut Tape, grad: Var, denom: f64) -> Var {
    let sq = tape.mul(grad, grad);
    let n2 = tape.sum_cols(sq);
    let n2 = tape.add_scalar(n2, EIKONAL_EPS);
    let norm = tape.sqrt(n2);
    let d = tape.add_scalar(norm, -1.0);
    let d2 = tape.mul(d, d);
    let s = tape.sum_all(d2);
    tape.scale(s, check_denom(denom))
}

/// Cross entropy of clamped `alpha` (`N x 1`) against constant targets, weighted per row.
fn bce_tape(tape: &mut Tape, alpha: Var, targets: &[f64], weights: &[f64], denom: f64) -> Var {
    let n = targets.len();
    let a = tape.clamp(alpha, ALPHA_CLAMP, 1.0 - ALPHA_CLAMP);
    let la = tape.ln(a);
    let oma = tape.rsub_scalar(1.0, a);
    let lb = tape.ln(oma);
    let pos = tape.constant(Mat::from_vec(
        n,
        1,
        targets.iter().zip(weights).map(|(t, w)| t * w).collect(),
    ));
    let neg = tape.constant(Mat::from_vec(
        n,
        1,
        targets
            .iter()
            .zip(weights)
            .map(|(t, w)| (1.0 - t) * w)
            .collect(),
    ));
    let x = tape.mul(la, pos);
    let y = tape.mul(lb, neg);
    let xy = tape.add(x, y);
    let s = tape.sum_all(xy);
    tape.scale(s, -check_denom(denom))
}

pub fn decomposition_tape(tape: &mut Tape, alpha_fg: Var, mask: &[bool], denom: f64) -> Var {
    let targets: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    bce_tape(tape, alpha_fg, &targets, &vec![1.0; mask.len()], denom)
}

/// Weighted cross entropy of `alpha_occ` against targets derived from the
/// current foreground opacity. The foreground opacity enters as plain values,
/// so no gradient reaches the foreground through this term.
pub fn occlusion_tape(
    tape: &mut Tape,
    alpha_occ: Var,
    alpha_fg: Var,
    mask: &[bool],
    prior: &OcclusionPrior,
    denom: f64,
) -> Var {
    let fg = tape.value(alpha_fg).data.clone();
    let targets = occlusion_targets(&fg, mask, prior);
    let weights: Vec<f64> = targets
        .iter()
        .map(|&t| if t > 0.5 { prior.positive_weight } else { 1.0 })
        .collect();
    bce_tape(tape, alpha_occ, &targets, &weights, denom)
}

/// `sum |s| / denom` over the listed rows of `sdf`.
pub fn completeness_tape(tape: &mut Tape, sdf: Var, near: &[usize], denom: f64) -> Var {
    if near.is_empty() {
        return tape.constant(Mat::scalar(0.0));
    }
    let g = tape.gather_rows(sdf, near.to_vec().into());
    let a = tape.abs(g);
    let s = tape.sum_all(a);
    tape.scale(s, check_denom(denom))
}

/// Tape nodes for each term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rgb: Var,
    pub eik: Var,
    pub dec: Var,
    pub occ: Var,
    pub comp: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossParts {
        LossParts {
            rgb: tape.value(self.rgb).item(),
            eik: tape.value(self.eik).item(),
            dec: tape.value(self.dec).item(),
            occ: tape.value(self.occ).item(),
            comp: tape.value(self.comp).item(),
        }
    }

    pub fn total(&self, tape: &mut Tape, w: &LossWeights) -> Var {
        let mut t = self.rgb;
        for (v, lambda) in [
            (self.eik, w.eik),
            (self.dec, w.dec),
            (self.occ, w.occ),
            (self.comp, w.comp),
        ] {
            let s = tape.scale(v, lambda);
            t = tape.add(t, s);
        }
        t
    }
}
