//! Bayes-risk training objectives over Dirichlet fields and their gradients.
//!
//! Data terms (all voxel means except the region Dice loss, which is global
//! over the field):
//!
//! - `ML`:   `log S - log alpha_c`
//! - `CE`:   `psi(S) - psi(alpha_c)`
//! - `MSE`:  `sum_j (y_j - p_j)^2 + p_j (1 - p_j) / (S + 1)`
//! - `DICE`: `1 - (2 / W) sum_j w_j N_j / D_j` with `N_j = sum_i y_ij p_ij` and
//!   `D_j = sum_i y_ij^2 + p_ij^2 + var_ij`; unweighted means `w_j = 1, W = K`.
//!
//! Every kind is paired with the KL regulariser on the misleading evidence,
//! scaled by the annealing coefficient `lambda(epoch)`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{EdlError, Result};
use crate::evidence::{
    check_same_grid, evidence_to_alpha, DirichletField, EvidenceField, LabelField,
};
use crate::special::{digamma_unchecked, log_gamma_unchecked, trigamma_unchecked};

pub const DEFAULT_KL_MAX: f64 = 0.1;
pub const DEFAULT_ANNEAL_EPOCHS: u32 = 100;
/// Lower bound applied to label-derived class weights.
pub const CLASS_WEIGHT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ml,
    Ce,
    Mse,
    Dice,
    #[serde(rename = "wdice")]
    WDice,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Ml,
        LossKind::Ce,
        LossKind::Mse,
        LossKind::Dice,
        LossKind::WDice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ml => "ml",
            LossKind::Ce => "ce",
            LossKind::Mse => "mse",
            LossKind::Dice => "dice",
            LossKind::WDice => "wdice",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = EdlError;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| EdlError::InvalidArgument(format!("unknown loss kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub kl_max: f64,
    pub anneal_epochs: u32,
    /// Fixed class weights for `WDice`. When absent they are derived from each label field.
    pub class_weights: Option<Vec<f64>>,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            kl_max: DEFAULT_KL_MAX,
            anneal_epochs: DEFAULT_ANNEAL_EPOCHS,
            class_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kl_max.is_finite() && self.kl_max >= 0.0) {
            return Err(EdlError::InvalidArgument(format!(
                "kl_max must be >= 0, got {}",
                self.kl_max
            )));
        }
        if self.anneal_epochs < 1 {
            return Err(EdlError::InvalidArgument(
                "anneal_epochs must be >= 1".into(),
            ));
        }
        if let Some(w) = &self.class_weights {
            validate_weights(w)?;
        }
        Ok(())
    }

    /// `kl_max * min(1, epoch / anneal_epochs)^2`
    pub fn anneal_lambda(&self, epoch: u32) -> f64 {
        let ramp = (epoch as f64 / self.anneal_epochs as f64).min(1.0);
        self.kl_max * ramp * ramp
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(LossKind::Dice)
    }
}

/// Annealing coefficient with the default schedule (maximum 0.1 reached at epoch 100).
pub fn anneal_lambda(epoch: u32) -> f64 {
    LossConfig::default().anneal_lambda(epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub data_term: f64,
    pub kl_term: f64,
    pub lambda: f64,
}

impl LossValue {
    fn compose(data_term: f64, kl_term: f64, lambda: f64) -> Result<Self> {
        let total = data_term + lambda * kl_term;
        if !(total.is_finite() && data_term.is_finite() && kl_term.is_finite()) {
            return Err(EdlError::NonFinite(format!(
                "loss components data={data_term} kl={kl_term} lambda={lambda}"
            )));
        }
        Ok(Self {
            total,
            data_term,
            kl_term,
            lambda,
        })
    }
}

fn validate_weights(w: &[f64]) -> Result<()> {
    if let Some(bad) = w.iter().find(|&&x| !(x.is_finite() && x > 0.0)) {
        return Err(EdlError::InvalidArgument(format!(
            "class weights must be > 0, got {bad}"
        )));
    }
    Ok(())
}

fn correct_class(y: &LabelField, r: usize, c: usize) -> usize {
    y.labels()[(r, c)] as usize
}

/// Negative log marginal likelihood, voxel mean.
pub fn loss_ml(d: &DirichletField, y: &LabelField) -> Result<f64> {
    check_same_grid(d, y)?;
    let (h, w) = d.spatial_shape();
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let k = correct_class(y, r, c);
            acc += d.strength()[(r, c)].ln() - d.alpha()[(k, r, c)].ln();
        }
    }
    Ok(acc / d.n_voxels() as f64)
}

/// Bayes risk of cross-entropy, voxel mean.
pub fn loss_ce(d: &DirichletField, y: &LabelField) -> Result<f64> {
    check_same_grid(d, y)?;
    let (h, w) = d.spatial_shape();
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let k = correct_class(y, r, c);
            acc +=
                digamma_unchecked(d.strength()[(r, c)]) - digamma_unchecked(d.alpha()[(k, r, c)]);
        }
    }
    Ok(acc / d.n_voxels() as f64)
}

/// Bayes risk of the squared error, voxel mean.
pub fn loss_mse(d: &DirichletField, y: &LabelField) -> Result<f64> {
    check_same_grid(d, y)?;
    let (h, w) = d.spatial_shape();
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let label = correct_class(y, r, c);
            for j in 0..d.k_classes() {
                let target = if j == label { 1.0 } else { 0.0 };
                let p = d.p_hat()[(j, r, c)];
                acc += (target - p) * (target - p) + d.var_term()[(j, r, c)];
            }
        }
    }
    Ok(acc / d.n_voxels() as f64)
}

/// Per-class numerators `sum_i y_ij p_ij` and denominators `sum_i y_ij^2 + p_ij^2 + var_ij`.
fn dice_sums(d: &DirichletField, y: &LabelField) -> (Vec<f64>, Vec<f64>) {
    let k = d.k_classes();
    let (h, w) = d.spatial_shape();
    let mut num = vec![0.0; k];
    let mut den = vec![0.0; k];
    for j in 0..k {
        for r in 0..h {
            for c in 0..w {
                let p = d.p_hat()[(j, r, c)];
                let hit = correct_class(y, r, c) == j;
                if hit {
                    num[j] += p;
                    den[j] += 1.0;
                }
                den[j] += p * p + d.var_term()[(j, r, c)];
            }
        }
    }
    (num, den)
}

fn resolve_weights(k: usize, weights: Option<&[f64]>) -> Result<(Vec<f64>, f64)> {
    match weights {
        None => Ok((vec![1.0; k], k as f64)),
        Some(w) => {
            if w.len() != k {
                return Err(EdlError::ShapeMismatch(format!(
                    "{} class weights for K = {k}",
                    w.len()
                )));
            }
            validate_weights(w)?;
            Ok((w.to_vec(), w.iter().sum()))
        }
    }
}

/// Region-based Dice Bayes risk over the whole field.
pub fn loss_dice(d: &DirichletField, y: &LabelField, weights: Option<&[f64]>) -> Result<f64> {
    check_same_grid(d, y)?;
    let (w, total_weight) = resolve_weights(d.k_classes(), weights)?;
    let (num, den) = dice_sums(d, y);
    let overlap: f64 = (0..d.k_classes()).map(|j| w[j] * num[j] / den[j]).sum();
    Ok(1.0 - 2.0 / total_weight * overlap)
}

/// Per-entry Dice denominator contributions `y_ij^2 + p_ij^2 + var_ij` as the loss uses them.
pub fn dice_denominator_terms(d: &DirichletField, y: &LabelField) -> Result<Array3<f64>> {
    check_same_grid(d, y)?;
    let yy = y.one_hot();
    Ok(&yy * &yy + d.p_hat() * d.p_hat() + d.var_term())
}

/// `w_j = 1 - n_j / (N - n_j)`, floored at [`CLASS_WEIGHT_FLOOR`].
pub fn class_weights(y: &LabelField) -> Result<Vec<f64>> {
    let counts = y.class_counts();
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let rest = total - n;
            if rest == 0 {
                return Err(EdlError::InvalidArgument(format!(
                    "every voxel has class {j}; class weight ratio is undefined"
                )));
            }
            Ok((1.0 - n as f64 / rest as f64).max(CLASS_WEIGHT_FLOOR))
        })
        .collect()
}

/// Component `j` of `alpha~`: the correct-class parameter is replaced by 1.
fn tilde_alpha(d: &DirichletField, label: usize, j: usize, r: usize, c: usize) -> f64 {
    if j == label {
        1.0
    } else {
        d.alpha()[(j, r, c)]
    }
}

/// `KL(Dir(alpha~) || Dir(1, ..., 1))` for each voxel.
pub fn kl_per_voxel(d: &DirichletField, y: &LabelField) -> Result<Array2<f64>> {
    check_same_grid(d, y)?;
    let k = d.k_classes();
    let (h, w) = d.spatial_shape();
    let ln_gamma_k = log_gamma_unchecked(k as f64);
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        let label = correct_class(y, r, c);
        let s_tilde: f64 = (0..k).map(|j| tilde_alpha(d, label, j, r, c)).sum();
        let psi_s = digamma_unchecked(s_tilde);
        let mut kl = log_gamma_unchecked(s_tilde) - ln_gamma_k;
        for j in 0..k {
            let a = tilde_alpha(d, label, j, r, c);
            kl -= log_gamma_unchecked(a);
            kl += (a - 1.0) * (digamma_unchecked(a) - psi_s);
        }
        kl
    }))
}

/// Voxel-mean KL regulariser.
pub fn loss_kl(d: &DirichletField, y: &LabelField) -> Result<f64> {
    let per_voxel = kl_per_voxel(d, y)?;
    Ok(per_voxel.iter().sum::<f64>() / per_voxel.len() as f64)
}

fn data_weights(cfg: &LossConfig, y: &LabelField) -> Result<Option<Vec<f64>>> {
    match cfg.kind {
        LossKind::WDice => match &cfg.class_weights {
            Some(w) => Ok(Some(w.clone())),
            None => class_weights(y).map(Some),
        },
        _ => Ok(None),
    }
}

fn data_term(d: &DirichletField, y: &LabelField, cfg: &LossConfig) -> Result<f64> {
    match cfg.kind {
        LossKind::Ml => loss_ml(d, y),
        LossKind::Ce => loss_ce(d, y),
        LossKind::Mse => loss_mse(d, y),
        LossKind::Dice | LossKind::WDice => {
            let weights = data_weights(cfg, y)?;
            loss_dice(d, y, weights.as_deref())
        }
    }
}

/// `data_term + lambda(epoch) * KL_mean`.
pub fn loss_edl(
    d: &DirichletField,
    y: &LabelField,
    cfg: &LossConfig,
    epoch: u32,
) -> Result<LossValue> {
    cfg.validate()?;
    let data = data_term(d, y, cfg)?;
    let kl = loss_kl(d, y)?;
    LossValue::compose(data, kl, cfg.anneal_lambda(epoch))
}

/// Gradient of the total loss with respect to the evidence.
pub fn grad_loss_edl(
    e: &EvidenceField,
    y: &LabelField,
    cfg: &LossConfig,
    epoch: u32,
) -> Result<Array3<f64>> {
    loss_and_grad(e, y, cfg, epoch).map(|(_, g)| g)
}

/// Loss value and its evidence gradient in one pass.
pub fn loss_and_grad(
    e: &EvidenceField,
    y: &LabelField,
    cfg: &LossConfig,
    epoch: u32,
) -> Result<(LossValue, Array3<f64>)> {
    let d = evidence_to_alpha(e)?;
    let value = loss_edl(&d, y, cfg, epoch)?;
    let mut grad = grad_wrt_alpha(&d, y, cfg, value.lambda)?;
    // alpha = (e + 1)^2  =>  d alpha / d e = 2 (e + 1)
    grad.zip_mut_with(e.data(), |g, &ev| *g *= 2.0 * (ev + 1.0));
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(EdlError::NonFinite("evidence gradient".into()));
    }
    Ok((value, grad))
}

/// Chain rule from `(dL/dp_hat at fixed S, dL/dS direct)` to `dL/dalpha` at one voxel.
///
/// `p_j = alpha_j / S` gives `dp_j/dalpha_k = (delta_jk - p_j) / S`, and `dS/dalpha_k = 1`.
fn chain_through_p_hat(dl_dp: &[f64], dl_ds: f64, p: &[f64], s: f64, out: &mut [f64]) {
    let weighted: f64 = dl_dp.iter().zip(p).map(|(g, p)| g * p).sum();
    for k in 0..out.len() {
        out[k] = (dl_dp[k] - weighted) / s + dl_ds;
    }
}

/// Analytic `dL/dalpha` for the configured data term plus `lambda * KL`.
pub fn grad_wrt_alpha(
    d: &DirichletField,
    y: &LabelField,
    cfg: &LossConfig,
    lambda: f64,
) -> Result<Array3<f64>> {
    check_same_grid(d, y)?;
    let k = d.k_classes();
    let (h, w) = d.spatial_shape();
    let inv_n = 1.0 / d.n_voxels() as f64;
    let mut grad = Array3::<f64>::zeros((k, h, w));

    // Region Dice couples voxels through the per-class sums.
    let dice_coeffs = match cfg.kind {
        LossKind::Dice | LossKind::WDice => {
            let weights = data_weights(cfg, y)?;
            let (wts, total_weight) = resolve_weights(k, weights.as_deref())?;
            let (num, den) = dice_sums(d, y);
            let dl_dnum: Vec<f64> = (0..k)
                .map(|j| -2.0 / total_weight * wts[j] / den[j])
                .collect();
            let dl_dden: Vec<f64> = (0..k)
                .map(|j| 2.0 / total_weight * wts[j] * num[j] / (den[j] * den[j]))
                .collect();
            Some((dl_dnum, dl_dden))
        }
        _ => None,
    };

    let mut p = vec![0.0; k];
    let mut dl_dp = vec![0.0; k];
    let mut out = vec![0.0; k];
    for r in 0..h {
        for c in 0..w {
            let label = correct_class(y, r, c);
            let s = d.strength()[(r, c)];
            for j in 0..k {
                p[j] = d.p_hat()[(j, r, c)];
            }
            match cfg.kind {
                LossKind::Ml => {
                    for j in 0..k {
                        out[j] = inv_n
                            * (1.0 / s
                                - if j == label {
                                    1.0 / d.alpha()[(j, r, c)]
                                } else {
                                    0.0
                                });
                    }
                }
                LossKind::Ce => {
                    let tri_s = trigamma_unchecked(s);
                    for j in 0..k {
                        let own = if j == label {
                            trigamma_unchecked(d.alpha()[(j, r, c)])
                        } else {
                            0.0
                        };
                        out[j] = inv_n * (tri_s - own);
                    }
                }
                LossKind::Mse => {
                    let mut dl_ds = 0.0;
                    for j in 0..k {
                        let target = if j == label { 1.0 } else { 0.0 };
                        dl_dp[j] =
                            inv_n * (-2.0 * (target - p[j]) + (1.0 - 2.0 * p[j]) / (s + 1.0));
                        dl_ds -= inv_n * p[j] * (1.0 - p[j]) / ((s + 1.0) * (s + 1.0));
                    }
                    chain_through_p_hat(&dl_dp, dl_ds, &p, s, &mut out);
                }
                LossKind::Dice | LossKind::WDice => {
                    let (dl_dnum, dl_dden) = dice_coeffs.as_ref().expect("dice coefficients");
                    let mut dl_ds = 0.0;
                    for j in 0..k {
                        let hit = if j == label { 1.0 } else { 0.0 };
                        dl_dp[j] = dl_dnum[j] * hit
                            + dl_dden[j] * (2.0 * p[j] + (1.0 - 2.0 * p[j]) / (s + 1.0));
                        dl_ds -= dl_dden[j] * p[j] * (1.0 - p[j]) / ((s + 1.0) * (s + 1.0));
                    }
                    chain_through_p_hat(&dl_dp, dl_ds, &p, s, &mut out);
                }
            }

            if lambda != 0.0 {
                let s_tilde: f64 = (0..k).map(|j| tilde_alpha(d, label, j, r, c)).sum();
                let shared = (s_tilde - k as f64) * trigamma_unchecked(s_tilde);
                for j in 0..k {
                    if j != label {
                        let a = d.alpha()[(j, r, c)];
                        out[j] += lambda * inv_n * ((a - 1.0) * trigamma_unchecked(a) - shared);
                    }
                }
            }

            for j in 0..k {
                grad[(j, r, c)] = out[j];
            }
        }
    }
    Ok(grad)
}
