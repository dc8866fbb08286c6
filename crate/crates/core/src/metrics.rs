//! Segmentation and uncertainty metrics.
//!
//! Uncertainty is the normalised predictive entropy (NPE) of the expected
//! class probabilities; confidence is `1 - NPE`. ECE and sUEO are evaluated
//! only inside the domain mask, as is BraS.

use ndarray::{Array2, Axis, Zip};
use serde::Serialize;

use crate::error::{EdlError, Result};
use crate::evidence::{DirichletField, LabelField};

pub const DEFAULT_ECE_BINS: usize = 10;

/// Per-voxel uncertainty in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    values: Array2<f64>,
}

impl UncertaintyMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(bad) = values
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(EdlError::InvalidArgument(format!(
                "uncertainty {bad} outside [0, 1]"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// `1 - u` per voxel.
    pub fn confidence(&self) -> Array2<f64> {
        self.values.mapv(|u| 1.0 - u)
    }
}

/// Normalised predictive entropy `-(1 / ln K) sum_j p_j ln p_j`, with `0 ln 0 = 0`.
pub fn npe_map(d: &DirichletField) -> UncertaintyMap {
    let norm = (d.k_classes() as f64).ln();
    let entropy = d.p_hat().map_axis(Axis(0), |p| {
        let h: f64 = p.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
        (h / norm).clamp(0.0, 1.0)
    });
    UncertaintyMap { values: entropy }
}

fn check_shapes(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(EdlError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `2|X ∩ Y| / (|X| + |Y|)`; two empty masks score 1.
pub fn dice_score(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    check_shapes(pred.shape(), gt.shape(), "dice masks")?;
    let mut inter = 0usize;
    let mut total = 0usize;
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    });
    Ok(dice_from_counts(inter, total))
}

fn dice_from_counts(intersection: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / total as f64
    }
}

/// Expected calibration error over voxels inside `gt`'s domain mask.
///
/// Bins are `[m/M, (m+1)/M)` except the last, which is `[(M-1)/M, 1]`.
pub fn ece(
    confidence: &Array2<f64>,
    pred_labels: &Array2<u8>,
    gt: &LabelField,
    m_bins: usize,
) -> Result<f64> {
    check_shapes(
        confidence.shape(),
        gt.labels().shape(),
        "confidence vs labels",
    )?;
    check_shapes(
        pred_labels.shape(),
        gt.labels().shape(),
        "prediction vs labels",
    )?;
    if m_bins < 1 {
        return Err(EdlError::InvalidArgument(
            "ECE needs at least one bin".into(),
        ));
    }
    let mut conf_sum = vec![0.0; m_bins];
    let mut correct = vec![0usize; m_bins];
    let mut count = vec![0usize; m_bins];
    let mut n = 0usize;
    for ((idx, &inside), &conf) in gt.domain_mask().indexed_iter().zip(confidence.iter()) {
        if !inside {
            continue;
        }
        if !(conf.is_finite() && (0.0..=1.0).contains(&conf)) {
            return Err(EdlError::InvalidArgument(format!(
                "confidence {conf} outside [0, 1]"
            )));
        }
        let bin = ((conf * m_bins as f64).floor() as usize).min(m_bins - 1);
        conf_sum[bin] += conf;
        correct[bin] += (pred_labels[idx] == gt.labels()[idx]) as usize;
        count[bin] += 1;
        n += 1;
    }
    if n == 0 {
        return Err(EdlError::InvalidArgument(
            "ECE over an empty domain mask".into(),
        ));
    }
    let mut total = 0.0;
    for m in 0..m_bins {
        if count[m] == 0 {
            continue;
        }
        let c_m = conf_sum[m] / count[m] as f64;
        let a_m = correct[m] as f64 / count[m] as f64;
        total += count[m] as f64 / n as f64 * (c_m - a_m).abs();
    }
    Ok(total)
}

/// Soft uncertainty-error overlap `2 sum e_i u_i / sum (e_i^2 + u_i^2)` inside the domain.
pub fn sueo(
    u: &UncertaintyMap,
    error_mask: &Array2<bool>,
    domain_mask: &Array2<bool>,
) -> Result<f64> {
    check_shapes(
        u.values().shape(),
        error_mask.shape(),
        "uncertainty vs error mask",
    )?;
    check_shapes(
        u.values().shape(),
        domain_mask.shape(),
        "uncertainty vs domain mask",
    )?;
    let mut num = 0.0;
    let mut den = 0.0;
    Zip::from(u.values())
        .and(error_mask)
        .and(domain_mask)
        .for_each(|&ui, &err, &inside| {
            if inside {
                let e = if err { 1.0 } else { 0.0 };
                num += e * ui;
                den += e * e + ui * ui;
            }
        });
    Ok(if den == 0.0 { 1.0 } else { 2.0 * num / den })
}

/// `{0.00, 0.05, ..., 1.00}`
pub fn default_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrasCurves {
    pub thresholds: Vec<f64>,
    pub dice: Vec<f64>,
    pub ftp: Vec<f64>,
    pub ftn: Vec<f64>,
}

impl BrasCurves {
    pub fn score(&self) -> f64 {
        let auc_dice = trapezoid_auc(&self.thresholds, &self.dice);
        let auc_ftp = trapezoid_auc(&self.thresholds, &self.ftp);
        let auc_ftn = trapezoid_auc(&self.thresholds, &self.ftn);
        (auc_dice + (1.0 - auc_ftp) + (1.0 - auc_ftn)) / 3.0
    }

    fn mean_of(curves: &[BrasCurves]) -> BrasCurves {
        let n = curves.len() as f64;
        let avg = |pick: fn(&BrasCurves) -> &Vec<f64>| -> Vec<f64> {
            (0..pick(&curves[0]).len())
                .map(|i| curves.iter().map(|c| pick(c)[i]).sum::<f64>() / n)
                .collect()
        };
        BrasCurves {
            thresholds: curves[0].thresholds.clone(),
            dice: avg(|c| &c.dice),
            ftp: avg(|c| &c.ftp),
            ftn: avg(|c| &c.ftn),
        }
    }
}

/// Trapezoid area under `y(x)`, divided by the span of `x` so a constant curve integrates to itself.
pub fn trapezoid_auc(x: &[f64], y: &[f64]) -> f64 {
    let span = x[x.len() - 1] - x[0];
    let area: f64 = x
        .windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0)
        .sum();
    area / span
}

fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.len() < 2 {
        return Err(EdlError::InvalidArgument(
            "BraS needs at least two thresholds".into(),
        ));
    }
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t))
        || thresholds.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(EdlError::InvalidArgument(
            "thresholds must increase strictly within [0, 1]".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    tp: usize,
    fp: usize,
    fn_: usize,
    tn: usize,
}

impl Tally {
    fn add(&mut self, o: Outcome, delta: isize) {
        let slot = match o {
            Outcome::TruePositive => &mut self.tp,
            Outcome::FalsePositive => &mut self.fp,
            Outcome::FalseNegative => &mut self.fn_,
            Outcome::TrueNegative => &mut self.tn,
        };
        *slot = slot.checked_add_signed(delta).expect("tally underflow");
    }

    fn retained(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Filtered-ratio `(before - after) / before`, 0 when nothing was there to filter.
fn filtered_ratio(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        (before - after) as f64 / before as f64
    }
}

/// BraS score and its three threshold curves.
///
/// At each threshold only domain voxels with `confidence >= tau` are kept.
/// Dice over an empty retained set repeats the previous threshold's value.
pub fn bras(
    confidence: &Array2<f64>,
    pred_mask: &Array2<bool>,
    gt_mask: &Array2<bool>,
    domain_mask: &Array2<bool>,
    thresholds: &[f64],
) -> Result<(f64, BrasCurves)> {
    check_shapes(
        confidence.shape(),
        pred_mask.shape(),
        "confidence vs prediction",
    )?;
    check_shapes(
        confidence.shape(),
        gt_mask.shape(),
        "confidence vs ground truth",
    )?;
    check_shapes(
        confidence.shape(),
        domain_mask.shape(),
        "confidence vs domain mask",
    )?;
    validate_thresholds(thresholds)?;

    let mut voxels: Vec<(f64, Outcome)> = Vec::new();
    Zip::from(confidence)
        .and(pred_mask)
        .and(gt_mask)
        .and(domain_mask)
        .for_each(|&conf, &p, &g, &inside| {
            if inside {
                let o = match (p, g) {
                    (true, true) => Outcome::TruePositive,
                    (true, false) => Outcome::FalsePositive,
                    (false, true) => Outcome::FalseNegative,
                    (false, false) => Outcome::TrueNegative,
                };
                voxels.push((conf, o));
            }
        });
    if voxels.is_empty() {
        return Err(EdlError::InvalidArgument(
            "BraS over an empty domain mask".into(),
        ));
    }
    if let Some((bad, _)) = voxels.iter().find(|(c, _)| c.is_nan()) {
        return Err(EdlError::NonFinite(format!("confidence {bad}")));
    }
    voxels.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut tally = Tally::default();
    for &(_, o) in &voxels {
        tally.add(o, 1);
    }
    let all = tally;
    let mut last_dice = dice_from_counts(all.tp, 2 * all.tp + all.fp + all.fn_);
    let mut curves = BrasCurves {
        thresholds: thresholds.to_vec(),
        dice: Vec::with_capacity(thresholds.len()),
        ftp: Vec::with_capacity(thresholds.len()),
        ftn: Vec::with_capacity(thresholds.len()),
    };
    let mut cursor = 0;
    for &tau in thresholds {
        while cursor < voxels.len() && voxels[cursor].0 < tau {
            tally.add(voxels[cursor].1, -1);
            cursor += 1;
        }
        if tally.retained() > 0 {
            last_dice = dice_from_counts(tally.tp, 2 * tally.tp + tally.fp + tally.fn_);
        }
        curves.dice.push(last_dice);
        curves.ftp.push(filtered_ratio(all.tp, tally.tp));
        curves.ftn.push(filtered_ratio(all.tn, tally.tn));
    }
    Ok((curves.score(), curves))
}

/// A foreground region defined as a set of label values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Region {
    pub name: String,
    pub classes: Vec<u8>,
}

impl Region {
    pub fn new(name: &str, classes: &[u8]) -> Self {
        Self {
            name: name.to_string(),
            classes: classes.to_vec(),
        }
    }

    pub fn mask(&self, labels: &Array2<u8>) -> Array2<bool> {
        labels.mapv(|l| self.classes.contains(&l))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionMetrics {
    pub region: String,
    pub dice: f64,
    pub bras: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub ece: f64,
    pub sueo: f64,
    pub bras: f64,
    pub curves: BrasCurves,
    pub regions: Vec<RegionMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub m_bins: usize,
    pub thresholds: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            m_bins: DEFAULT_ECE_BINS,
            thresholds: default_thresholds(),
        }
    }
}

/// Full metric suite for one image.
///
/// Dice and BraS are averaged over `regions`; ECE and sUEO compare labels
/// directly (the error mask is `pred != gt`).
pub fn evaluate(
    pred_labels: &Array2<u8>,
    u: &UncertaintyMap,
    gt: &LabelField,
    regions: &[Region],
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    if regions.is_empty() {
        return Err(EdlError::InvalidArgument(
            "at least one region is required".into(),
        ));
    }
    check_shapes(
        pred_labels.shape(),
        gt.labels().shape(),
        "prediction vs labels",
    )?;
    let confidence = u.confidence();
    let domain = gt.domain_mask();
    let mut per_region = Vec::with_capacity(regions.len());
    let mut curves = Vec::with_capacity(regions.len());
    for region in regions {
        let pred_mask = region.mask(pred_labels);
        let gt_mask = region.mask(gt.labels());
        let dice = dice_score(&pred_mask, &gt_mask)?;
        let (score, c) = bras(
            &confidence,
            &pred_mask,
            &gt_mask,
            domain,
            &settings.thresholds,
        )?;
        per_region.push(RegionMetrics {
            region: region.name.clone(),
            dice,
            bras: score,
        });
        curves.push(c);
    }
    let error_mask = Zip::from(pred_labels)
        .and(gt.labels())
        .map_collect(|p, g| p != g);
    let n = regions.len() as f64;
    Ok(MetricsReport {
        dice: per_region.iter().map(|r| r.dice).sum::<f64>() / n,
        ece: ece(&confidence, pred_labels, gt, settings.m_bins)?,
        sueo: sueo(u, &error_mask, domain)?,
        bras: per_region.iter().map(|r| r.bras).sum::<f64>() / n,
        curves: BrasCurves::mean_of(&curves),
        regions: per_region,
    })
}
