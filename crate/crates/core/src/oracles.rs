//! Independent verification machinery.
//!
//! Nothing in here calls into the closed-form loss gradients; the Monte Carlo
//! estimator integrates the raw loss integrands over Dirichlet draws, the
//! finite-difference routine only evaluates scalar functions, and the theorem
//! harness perturbs Dirichlet parameters and compares loss values.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use serde::Serialize;

use crate::error::{EdlError, Result};
use crate::evidence::{check_same_grid, DirichletField, LabelField};
use crate::losses;

/// Perturbation size used by the theorem checks.
pub const THEOREM_EPSILON: f64 = 0.5;
/// A perturbation passes only if the loss moves by more than this.
pub const THEOREM_SLACK: f64 = 1e-12;
/// Range of concentration parameters drawn for theorem trials.
pub const THEOREM_ALPHA_RANGE: (f64, f64) = (1.0, 50.0);
pub const THEOREM_MAX_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl McEstimate {
    /// Distance from `value` in units of the standard error.
    pub fn z_score(&self, value: f64) -> f64 {
        if self.std_error == 0.0 {
            if self.mean == value {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - value).abs() / self.std_error
        }
    }
}

/// Gamma(shape, 1) variate: Marsaglia–Tsang for shape >= 1, boosted for shape < 1.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let u: f64 = rng.sample(Open01);
        return sample_gamma(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.sample(Open01);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

fn check_concentration(alpha: &[f64]) -> Result<()> {
    if alpha.len() < 2 {
        return Err(EdlError::InvalidArgument(
            "Dirichlet needs at least 2 components".into(),
        ));
    }
    if let Some(bad) = alpha.iter().find(|&&a| !(a.is_finite() && a > 0.0)) {
        return Err(EdlError::InvalidArgument(format!(
            "Dirichlet parameters must be > 0, got {bad}"
        )));
    }
    Ok(())
}

/// Draws one probability vector from `Dir(alpha)` using the caller's generator.
pub fn sample_dirichlet_with<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    check_concentration(alpha)?;
    Ok(draw_dirichlet(alpha, rng))
}

fn draw_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = alpha.iter().map(|&a| sample_gamma(a, rng)).collect();
    let total: f64 = draws.iter().sum();
    for x in &mut draws {
        *x /= total;
    }
    draws
}

/// Draws one probability vector from `Dir(alpha)` with a fresh seeded generator.
pub fn sample_dirichlet(alpha: &[f64], seed: u64) -> Result<Vec<f64>> {
    sample_dirichlet_with(alpha, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrand {
    /// `-sum_j y_j log p_j`
    Ce,
    /// `||y - p||^2`
    Mse,
}

/// Monte Carlo estimate of `E_{p ~ Dir(alpha)}[integrand(y, p)]`.
pub fn mc_bayes_risk(
    alpha: &[f64],
    y: &[f64],
    integrand: Integrand,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_concentration(alpha)?;
    if y.len() != alpha.len() {
        return Err(EdlError::ShapeMismatch(format!(
            "{} targets for {} classes",
            y.len(),
            alpha.len()
        )));
    }
    if n < 1000 {
        return Err(EdlError::InvalidArgument(format!(
            "need at least 1000 samples, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Welford running mean / variance.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n {
        let p = draw_dirichlet(alpha, &mut rng);
        let value = match integrand {
            Integrand::Ce => -y
                .iter()
                .zip(&p)
                .map(|(&t, &q)| if t == 0.0 { 0.0 } else { t * q.ln() })
                .sum::<f64>(),
            Integrand::Mse => y
                .iter()
                .zip(&p)
                .map(|(&t, &q)| (t - q) * (t - q))
                .sum::<f64>(),
        };
        let delta = value - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (value - mean);
    }
    let variance = m2 / (n - 1) as f64;
    Ok(McEstimate {
        mean,
        std_error: (variance / n as f64).sqrt(),
        n_samples: n,
    })
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(EdlError::InvalidArgument(format!(
            "step must be > 0, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(EdlError::NonFinite(format!(
                "function value near coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Worst scaled mismatch between an analytic and a numerical gradient.
///
/// Each entry contributes `|a - n| / max(|a|, |n|, abs_floor / rel_tol)`, so a
/// result `<= rel_tol` means every entry agrees to `rel_tol` relatively or to
/// `abs_floor` absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(abs_floor / rel_tol))
        .fold(0.0, f64::max)
}

/// Linear evidence mapping `alpha = e + 1`, kept only for comparison with the squared mapping.
pub fn linear_evidence_to_alpha(e: &Array3<f64>) -> Result<DirichletField> {
    DirichletField::from_alpha(e.mapv(|v| v + 1.0))
}

/// The two views of a region Dice loss the theorem harness needs.
pub trait DiceModel {
    fn loss(&self, d: &DirichletField, y: &LabelField) -> Result<f64>;
    /// Per-entry denominator contribution, expected to be `sDiceDen + Var`.
    fn denominator_terms(&self, d: &DirichletField, y: &LabelField) -> Result<Array3<f64>>;
}

/// The production closed form from [`crate::losses`].
#[derive(Debug, Default, Clone, Copy)]
pub struct ClosedFormDice;

impl DiceModel for ClosedFormDice {
    fn loss(&self, d: &DirichletField, y: &LabelField) -> Result<f64> {
        losses::loss_dice(d, y, None)
    }

    fn denominator_terms(&self, d: &DirichletField, y: &LabelField) -> Result<Array3<f64>> {
        losses::dice_denominator_terms(d, y)
    }
}

/// Mutant with the variance term subtracted instead of added.
#[derive(Debug, Default, Clone, Copy)]
pub struct NegatedVarianceDice;

impl NegatedVarianceDice {
    fn terms(d: &DirichletField, y: &LabelField) -> Array3<f64> {
        let yy = y.one_hot();
        &yy * &yy + d.p_hat() * d.p_hat() - d.var_term()
    }
}

impl DiceModel for NegatedVarianceDice {
    fn loss(&self, d: &DirichletField, y: &LabelField) -> Result<f64> {
        check_same_grid(d, y)?;
        let yy = y.one_hot();
        let den = Self::terms(d, y);
        let k = d.k_classes();
        let mut overlap = 0.0;
        for j in 0..k {
            let num: f64 = (&yy.index_axis(ndarray::Axis(0), j)
                * &d.p_hat().index_axis(ndarray::Axis(0), j))
                .sum();
            overlap += num / den.index_axis(ndarray::Axis(0), j).sum();
        }
        Ok(1.0 - 2.0 / k as f64 * overlap)
    }

    fn denominator_terms(&self, d: &DirichletField, y: &LabelField) -> Result<Array3<f64>> {
        check_same_grid(d, y)?;
        Ok(Self::terms(d, y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Theorem {
    /// Data-fit denominator exceeds the variance term for every entry.
    DataFitDominatesVariance = 1,
    /// Adding (removing) correct-class evidence strictly lowers (raises) the Dice loss.
    CorrectEvidenceLowersLoss = 2,
    /// Removing evidence from every incorrect class strictly lowers the Dice loss.
    IncorrectEvidenceRemovalLowersLoss = 3,
    /// The per-voxel KL term strictly increases in every incorrect parameter.
    KlIncreasesInIncorrectAlpha = 4,
}

impl Theorem {
    pub const ALL: [Theorem; 4] = [
        Theorem::DataFitDominatesVariance,
        Theorem::CorrectEvidenceLowersLoss,
        Theorem::IncorrectEvidenceRemovalLowersLoss,
        Theorem::KlIncreasesInIncorrectAlpha,
    ];

    pub fn from_id(id: u8) -> Result<Self> {
        Theorem::ALL
            .get((id as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| EdlError::InvalidArgument(format!("theorem id must be 1..=4, got {id}")))
    }

    pub fn id(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub theorem: Theorem,
    pub trials: usize,
    /// Number of individual inequality checks performed.
    pub checks: usize,
    pub violations: usize,
    /// Smallest observed margin (positive means the inequality held).
    pub worst_margin: f64,
    /// Trial index of the worst margin.
    pub worst_trial: usize,
}

impl TheoremReport {
    fn new(theorem: Theorem, trials: usize) -> Self {
        Self {
            theorem,
            trials,
            checks: 0,
            violations: 0,
            worst_margin: f64::INFINITY,
            worst_trial: 0,
        }
    }

    fn record(&mut self, trial: usize, margin: f64) {
        self.checks += 1;
        if !(margin > THEOREM_SLACK) {
            self.violations += 1;
        }
        if margin < self.worst_margin || margin.is_nan() {
            self.worst_margin = margin;
            self.worst_trial = trial;
        }
    }
}

/// Random Dirichlet field for theorem trials: K in {2, 4}, sides in 1..=8, alpha uniform in [1, 50].
pub fn random_theorem_instance<R: Rng + ?Sized>(rng: &mut R) -> (DirichletField, LabelField) {
    let k = if rng.random_bool(0.5) { 2 } else { 4 };
    let h = rng.random_range(1..=THEOREM_MAX_SIDE);
    let w = rng.random_range(1..=THEOREM_MAX_SIDE);
    let (lo, hi) = THEOREM_ALPHA_RANGE;
    let alpha = Array3::from_shape_fn((k, h, w), |_| rng.random_range(lo..=hi));
    let labels = Array2::from_shape_fn((h, w), |_| rng.random_range(0..k) as u8);
    (
        DirichletField::from_alpha(alpha).expect("alpha >= 1 by construction"),
        LabelField::with_full_domain(labels, k).expect("labels < K by construction"),
    )
}

fn with_alpha(d: &DirichletField, edit: impl FnOnce(&mut Array3<f64>)) -> Result<DirichletField> {
    let mut alpha = d.alpha().clone();
    edit(&mut alpha);
    DirichletField::from_alpha(alpha)
}

/// Runs the closed-form Dice model through the perturbation property of `theorem`.
pub fn theorem_check(theorem: Theorem, trials: usize, seed: u64) -> Result<TheoremReport> {
    theorem_check_with(theorem, trials, seed, &ClosedFormDice)
}

/// Runs `model` through the perturbation property of `theorem` on `trials` random fields.
///
/// Theorem 4 concerns the KL term and always uses [`losses::kl_per_voxel`].
pub fn theorem_check_with(
    theorem: Theorem,
    trials: usize,
    seed: u64,
    model: &dyn DiceModel,
) -> Result<TheoremReport> {
    if trials < 1 {
        return Err(EdlError::InvalidArgument("trials must be >= 1".into()));
    }
    let mut report = TheoremReport::new(theorem, trials);
    for trial in 0..trials {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (d, y) = random_theorem_instance(&mut rng);
        let (h, w) = d.spatial_shape();
        let k = d.k_classes();
        match theorem {
            Theorem::DataFitDominatesVariance => {
                let den = model.denominator_terms(&d, &y)?;
                for ((j, r, c), &total) in den.indexed_iter() {
                    let a = d.alpha()[(j, r, c)];
                    let s = d.strength()[(r, c)];
                    // Variance written directly in alpha, independent of the cached p_hat.
                    let var = a * (s - a) / (s * s * (s + 1.0));
                    let data_fit = total - var;
                    report.record(trial, data_fit - var);
                }
            }
            Theorem::CorrectEvidenceLowersLoss => {
                let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
                let label = y.labels()[(r, c)] as usize;
                let base = model.loss(&d, &y)?;
                let up = with_alpha(&d, |a| a[(label, r, c)] += THEOREM_EPSILON)?;
                report.record(trial, base - model.loss(&up, &y)?);
                if d.alpha()[(label, r, c)] - THEOREM_EPSILON >= 1.0 {
                    let down = with_alpha(&d, |a| a[(label, r, c)] -= THEOREM_EPSILON)?;
                    report.record(trial, model.loss(&down, &y)? - base);
                }
            }
            Theorem::IncorrectEvidenceRemovalLowersLoss => {
                // Voxels whose incorrect parameters can all drop by epsilon and stay >= 1.
                let eligible: Vec<(usize, usize)> = (0..h)
                    .flat_map(|r| (0..w).map(move |c| (r, c)))
                    .filter(|&(r, c)| {
                        let label = y.labels()[(r, c)] as usize;
                        (0..k)
                            .filter(|&j| j != label)
                            .all(|j| d.alpha()[(j, r, c)] - THEOREM_EPSILON >= 1.0)
                    })
                    .collect();
                if eligible.is_empty() {
                    continue;
                }
                let (r, c) = eligible[rng.random_range(0..eligible.len())];
                let label = y.labels()[(r, c)] as usize;
                let base = model.loss(&d, &y)?;
                let reduced = with_alpha(&d, |a| {
                    for j in (0..k).filter(|&j| j != label) {
                        a[(j, r, c)] -= THEOREM_EPSILON;
                    }
                })?;
                report.record(trial, base - model.loss(&reduced, &y)?);
            }
            Theorem::KlIncreasesInIncorrectAlpha => {
                let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
                let label = y.labels()[(r, c)] as usize;
                let base = losses::kl_per_voxel(&d, &y)?[(r, c)];
                for wrong in (0..k).filter(|&j| j != label) {
                    let up = with_alpha(&d, |a| a[(wrong, r, c)] += THEOREM_EPSILON)?;
                    report.record(trial, losses::kl_per_voxel(&up, &y)?[(r, c)] - base);
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dirichlet_draws_lie_on_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = sample_dirichlet_with(&[1.0, 2.5, 0.7, 10.0], &mut rng).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn concentrated_dirichlet_stays_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let p = sample_dirichlet_with(&[1000.0, 1000.0], &mut rng).unwrap();
            assert!((p[0] - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn dirichlet_mean_matches_alpha_over_strength() {
        let alpha = [2.0, 3.0, 5.0];
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sum = [0.0; 3];
        let mut sum_sq = [0.0; 3];
        for _ in 0..n {
            let p = sample_dirichlet_with(&alpha, &mut rng).unwrap();
            for j in 0..3 {
                sum[j] += p[j];
                sum_sq[j] += p[j] * p[j];
            }
        }
        for j in 0..3 {
            let mean = sum[j] / n as f64;
            let var = sum_sq[j] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - alpha[j] / 10.0).abs() < 3.0 * se,
                "component {j}: {mean}"
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_and_validated() {
        assert_eq!(
            sample_dirichlet(&[1.0, 2.0], 9).unwrap(),
            sample_dirichlet(&[1.0, 2.0], 9).unwrap()
        );
        assert!(sample_dirichlet(&[1.0, 0.0], 9).is_err());
        assert!(sample_dirichlet(&[1.0, -1.0], 9).is_err());
        assert!(sample_dirichlet(&[1.0], 9).is_err());
    }

    #[test]
    fn small_shape_gamma_has_right_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| sample_gamma(0.3, &mut rng)).sum::<f64>() / n as f64;
        // Var = 0.3, se ≈ 0.0012
        assert!((mean - 0.3).abs() < 0.005);
    }

    #[test]
    fn mc_reproduces_uniform_binary_hand_values() {
        let mse = mc_bayes_risk(&[1.0, 1.0], &[1.0, 0.0], Integrand::Mse, 1_000_000, 21).unwrap();
        assert!(mse.z_score(2.0 / 3.0) < 3.0, "{mse:?}");
        let ce = mc_bayes_risk(&[1.0, 1.0], &[1.0, 0.0], Integrand::Ce, 1_000_000, 22).unwrap();
        assert!(ce.z_score(1.0) < 3.0, "{ce:?}");
    }

    #[test]
    fn mc_standard_error_scales_with_root_n() {
        let a = mc_bayes_risk(
            &[2.0, 3.0, 1.0],
            &[0.0, 1.0, 0.0],
            Integrand::Mse,
            20_000,
            4,
        )
        .unwrap();
        let b = mc_bayes_risk(
            &[2.0, 3.0, 1.0],
            &[0.0, 1.0, 0.0],
            Integrand::Mse,
            80_000,
            4,
        )
        .unwrap();
        let ratio = a.std_error / b.std_error;
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn mc_rejects_too_few_samples() {
        assert!(mc_bayes_risk(&[1.0, 1.0], &[1.0, 0.0], Integrand::Ce, 999, 0).is_err());
        assert!(mc_bayes_risk(&[1.0, 1.0], &[1.0], Integrand::Ce, 1000, 0).is_err());
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.5, &[1.0, -2.0, 0.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(finite_diff_grad(|x| 1.0 / x[0], &[1e-5], 1e-5).is_err());
        assert!(finite_diff_grad(|x| x[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn relative_error_uses_absolute_floor() {
        assert_eq!(max_relative_error(&[1.0], &[1.0], 1e-4, 1e-7), 0.0);
        assert!(max_relative_error(&[1e-9], &[2e-9], 1e-4, 1e-7) <= 1e-4);
        assert!(max_relative_error(&[1.0], &[1.001], 1e-4, 1e-7) > 1e-4);
    }

    #[test]
    fn linear_mapping_is_less_concentrated_than_squared() {
        let e = array![[[3.0]], [[0.0]]];
        let lin = linear_evidence_to_alpha(&e).unwrap();
        let sq =
            crate::evidence::evidence_to_alpha(&crate::EvidenceField::new(e).unwrap()).unwrap();
        assert_eq!(lin.alpha()[(0, 0, 0)], 4.0);
        assert!(sq.p_hat()[(0, 0, 0)] > lin.p_hat()[(0, 0, 0)]);
    }

    #[test]
    fn theorem_ids_round_trip() {
        for t in Theorem::ALL {
            assert_eq!(Theorem::from_id(t.id()).unwrap(), t);
        }
        assert!(Theorem::from_id(0).is_err());
        assert!(Theorem::from_id(5).is_err());
    }

    #[test]
    fn theorems_one_and_two_hold() {
        for t in [
            Theorem::DataFitDominatesVariance,
            Theorem::CorrectEvidenceLowersLoss,
        ] {
            let report = theorem_check(t, 200, 17).unwrap();
            assert_eq!(report.violations, 0, "{report:?}");
            assert!(report.worst_margin > THEOREM_SLACK);
        }
    }

    #[test]
    fn kl_grows_with_the_wrong_alpha_for_two_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2000 {
            let a = rng.random_range(1.0..50.0);
            let b = rng.random_range(1.0..50.0);
            let d = DirichletField::from_alpha(array![[[a]], [[b]]]).unwrap();
            let up = DirichletField::from_alpha(array![[[a]], [[b + THEOREM_EPSILON]]]).unwrap();
            let y = LabelField::with_full_domain(array![[0u8]], 2).unwrap();
            let base = losses::kl_per_voxel(&d, &y).unwrap()[(0, 0)];
            assert!(losses::kl_per_voxel(&up, &y).unwrap()[(0, 0)] > base);
        }
    }

    #[test]
    fn kl_can_fall_when_a_small_wrong_alpha_grows() {
        // Dir(1, 1, 30, 30) moves toward uniform when the second entry grows.
        let y = LabelField::with_full_domain(array![[0u8]], 4).unwrap();
        let d = DirichletField::from_alpha(array![[[5.0]], [[1.0]], [[30.0]], [[30.0]]]).unwrap();
        let up = DirichletField::from_alpha(array![[[5.0]], [[1.5]], [[30.0]], [[30.0]]]).unwrap();
        let before = losses::kl_per_voxel(&d, &y).unwrap()[(0, 0)];
        let after = losses::kl_per_voxel(&up, &y).unwrap()[(0, 0)];
        assert!(before - after > 0.3, "{before} -> {after}");
        let report = theorem_check(Theorem::KlIncreasesInIncorrectAlpha, 200, 17).unwrap();
        assert!(report.violations > 0);
    }

    #[test]
    fn dice_loss_can_rise_when_wrong_evidence_shrinks() {
        let y = LabelField::with_full_domain(array![[3u8, 0]], 4).unwrap();
        let alpha = array![[[44.0, 46.0]], [[2.0, 10.0]], [[2.0, 47.0]], [[2.0, 7.0]]];
        let d = DirichletField::from_alpha(alpha.clone()).unwrap();
        let mut reduced = alpha;
        for j in 0..3 {
            reduced[(j, 0, 0)] -= THEOREM_EPSILON;
        }
        let shrunk = DirichletField::from_alpha(reduced).unwrap();
        let rise = ClosedFormDice.loss(&shrunk, &y).unwrap() - ClosedFormDice.loss(&d, &y).unwrap();
        assert!(rise > 5e-4, "{rise}");
    }

    #[test]
    fn negated_variance_mutant_breaks_theorem_one() {
        let report = theorem_check_with(
            Theorem::DataFitDominatesVariance,
            100,
            17,
            &NegatedVarianceDice,
        )
        .unwrap();
        assert!(report.violations > 0);
    }

    #[test]
    fn mutant_differs_from_closed_form() {
        let d = DirichletField::from_alpha(array![[[1.0, 3.0]], [[2.0, 1.0]]]).unwrap();
        let y = LabelField::with_full_domain(array![[0u8, 1]], 2).unwrap();
        let a = ClosedFormDice.loss(&d, &y).unwrap();
        let b = NegatedVarianceDice.loss(&d, &y).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn theorem_checks_are_deterministic() {
        let a = theorem_check(Theorem::IncorrectEvidenceRemovalLowersLoss, 50, 3).unwrap();
        let b = theorem_check(Theorem::IncorrectEvidenceRemovalLowersLoss, 50, 3).unwrap();
        assert_eq!(a, b);
        assert!(theorem_check(Theorem::DataFitDominatesVariance, 0, 3).is_err());
    }
}
