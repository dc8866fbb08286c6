//! Synthetic nested-ellipse "tumour" images and input perturbations.
//!
//! Each image has a 4-class label field: 0 background, 1 outer region,
//! 2 ring, 3 core. The filled core ellipse lies inside the ring ellipse,
//! which lies inside the outer ellipse, which lies inside the domain
//! ("brain") ellipse. Derived subregions:
//!
//! | task  | foreground classes |
//! |-------|--------------------|
//! | WT    | 1, 2, 3            |
//! | TC    | 2, 3               |
//! | ET    | 2                  |
//! | MULTI | all four classes   |

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EdlError, Result};
use crate::evidence::LabelField;
use crate::metrics::Region;

pub const IMAGE_SIDE: usize = 64;
pub const N_CHANNELS: usize = 2;
pub const N_TISSUE_CLASSES: usize = 4;
pub const ACQUISITION_NOISE_SD: f64 = 0.05;

/// Fraction of the image covered by the domain ellipse. The upper end is held
/// below the 78.5% that the largest inscribed ellipse can reach.
const DOMAIN_COVERAGE: (f64, f64) = (0.60, 0.75);
const MAX_GENERATION_ATTEMPTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

impl FromStr for Difficulty {
    type Err = EdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(EdlError::InvalidArgument(format!(
                "unknown difficulty '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Wt,
    Tc,
    Et,
    Multi,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Wt, Task::Tc, Task::Et, Task::Multi];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Wt => "wt",
            Task::Tc => "tc",
            Task::Et => "et",
            Task::Multi => "multi",
        }
    }

    pub fn k_classes(self) -> usize {
        match self {
            Task::Multi => N_TISSUE_CLASSES,
            _ => 2,
        }
    }

    fn foreground(self) -> &'static [u8] {
        match self {
            Task::Wt => &[1, 2, 3],
            Task::Tc => &[2, 3],
            Task::Et => &[2],
            Task::Multi => &[1, 2, 3],
        }
    }

    /// Regions scored by Dice/BraS for this task, expressed in the task's own label space.
    pub fn eval_regions(self) -> Vec<Region> {
        match self {
            Task::Multi => vec![
                Region::new("wt", Task::Wt.foreground()),
                Region::new("tc", Task::Tc.foreground()),
                Region::new("et", Task::Et.foreground()),
            ],
            binary => vec![Region::new(binary.as_str(), &[1])],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = EdlError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .iter()
            .copied()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| EdlError::InvalidArgument(format!("unknown task '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    /// `(C, H, W)` z-scored intensities.
    pub channels: Array3<f64>,
    /// 4-class tissue labels with the domain mask.
    pub labels: LabelField,
}

impl SynthImage {
    pub fn domain_mask(&self) -> &Array2<bool> {
        self.labels.domain_mask()
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn scaled(&self, factor_a: f64, factor_b: f64) -> Self {
        Self {
            a: self.a * factor_a,
            b: self.b * factor_b,
            ..*self
        }
    }

    fn rasterize(&self) -> Array2<bool> {
        Array2::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE), |(r, c)| {
            self.contains(r as f64 + 0.5, c as f64 + 0.5)
        })
    }
}

/// Per-(region, channel) ranges for the mean intensity. Index 0 is in-domain background.
fn intensity_ranges(difficulty: Difficulty) -> [[(f64, f64); N_CHANNELS]; N_TISSUE_CLASSES] {
    match difficulty {
        Difficulty::Easy => [
            [(0.20, 0.28), (0.20, 0.28)],
            [(0.55, 0.63), (0.42, 0.50)],
            [(0.85, 0.93), (0.75, 0.83)],
            [(0.38, 0.46), (0.95, 1.03)],
        ],
        Difficulty::Hard => [
            [(0.20, 0.45), (0.25, 0.50)],
            [(0.32, 0.57), (0.35, 0.60)],
            [(0.45, 0.70), (0.42, 0.67)],
            [(0.28, 0.53), (0.55, 0.80)],
        ],
    }
}

fn sample_domain<R: Rng>(rng: &mut R) -> Ellipse {
    let side = IMAGE_SIDE as f64;
    let half = side / 2.0;
    let coverage = rng.random_range(DOMAIN_COVERAGE.0..=DOMAIN_COVERAGE.1);
    let area = coverage * side * side;
    let radius = (area / PI).sqrt();
    let a = (radius * rng.random_range(1.0..1.1)).min(half - 0.5);
    let b = area / (PI * a);
    Ellipse {
        cy: half,
        cx: half,
        a,
        b,
        theta: 0.0,
    }
}

fn sample_tumour<R: Rng>(
    rng: &mut R,
    domain: &Array2<bool>,
    brain: &Ellipse,
) -> Option<[Array2<bool>; 3]> {
    let a = rng.random_range(7.0..13.0);
    let b = a * rng.random_range(0.6..1.0);
    let theta = rng.random_range(0.0..PI);
    let reach = 0.55 * brain.a.min(brain.b);
    let outer = Ellipse {
        cy: brain.cy + rng.random_range(-reach..reach),
        cx: brain.cx + rng.random_range(-reach..reach),
        a,
        b,
        theta,
    };
    let ring = outer.scaled(rng.random_range(0.5..0.7), rng.random_range(0.5..0.7));
    let core = ring.scaled(rng.random_range(0.4..0.6), rng.random_range(0.4..0.6));
    let masks = [outer.rasterize(), ring.rasterize(), core.rasterize()];
    let nested = masks[0].iter().zip(domain.iter()).all(|(&t, &d)| !t || d)
        && masks[1].iter().zip(masks[0].iter()).all(|(&i, &o)| !i || o)
        && masks[2].iter().zip(masks[1].iter()).all(|(&i, &o)| !i || o);
    let non_empty = masks.iter().all(|m| m.iter().any(|&v| v));
    (nested && non_empty).then_some(masks)
}

fn zscore_channels(channels: &mut Array3<f64>) {
    for mut plane in channels.outer_iter_mut() {
        let n = plane.len() as f64;
        let mean = plane.sum() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd > 0.0 {
            plane.mapv_inplace(|v| (v - mean) / sd);
        } else {
            plane.mapv_inplace(|v| v - mean);
        }
    }
}

/// Generates one image from its own seed.
pub fn generate_image(seed: u64, difficulty: Difficulty) -> Result<SynthImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let brain = sample_domain(&mut rng);
    let domain = brain.rasterize();
    let masks = (0..MAX_GENERATION_ATTEMPTS)
        .find_map(|_| sample_tumour(&mut rng, &domain, &brain))
        .ok_or_else(|| EdlError::InvalidArgument("could not place a nested tumour".into()))?;

    let labels = Array2::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE), |idx| {
        if masks[2][idx] {
            3u8
        } else if masks[1][idx] {
            2
        } else if masks[0][idx] {
            1
        } else {
            0
        }
    });

    let ranges = intensity_ranges(difficulty);
    let mut means = [[0.0; N_CHANNELS]; N_TISSUE_CLASSES];
    for (region, row) in ranges.iter().enumerate() {
        for (ch, &(lo, hi)) in row.iter().enumerate() {
            means[region][ch] = rng.random_range(lo..=hi);
        }
    }
    let noise = Normal::new(0.0, ACQUISITION_NOISE_SD).expect("valid sd");
    let mut channels = Array3::<f64>::zeros((N_CHANNELS, IMAGE_SIDE, IMAGE_SIDE));
    for ch in 0..N_CHANNELS {
        for r in 0..IMAGE_SIDE {
            for c in 0..IMAGE_SIDE {
                let base = if domain[(r, c)] {
                    means[labels[(r, c)] as usize][ch]
                } else {
                    0.0
                };
                channels[(ch, r, c)] = base + noise.sample(&mut rng);
            }
        }
    }
    zscore_channels(&mut channels);

    Ok(SynthImage {
        channels,
        labels: LabelField::new(labels, domain, N_TISSUE_CLASSES)?,
    })
}

/// `n` images; image `i` is generated from seed `seed ^ i`.
pub fn generate_dataset(n: usize, seed: u64, difficulty: Difficulty) -> Result<Vec<SynthImage>> {
    if n < 1 {
        return Err(EdlError::InvalidArgument(
            "dataset size must be >= 1".into(),
        ));
    }
    (0..n as u64)
        .map(|i| generate_image(seed ^ i, difficulty))
        .collect()
}

/// Projects a 4-class tissue label field onto a task's label space.
pub fn subregion_labels(labels: &LabelField, task: Task) -> Result<LabelField> {
    if labels.k_classes() != N_TISSUE_CLASSES {
        return Err(EdlError::InvalidArgument(format!(
            "subregions are defined on {N_TISSUE_CLASSES}-class fields, got K = {}",
            labels.k_classes()
        )));
    }
    if task == Task::Multi {
        return Ok(labels.clone());
    }
    let fg = task.foreground();
    let binary = labels.labels().mapv(|l| fg.contains(&l) as u8);
    LabelField::new(binary, labels.domain_mask().clone(), 2)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= total;
    }
    kernel
}

/// Normalised 1-D Gaussian kernel of radius `ceil(3 sigma)`.
pub fn blur_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(EdlError::InvalidArgument(format!(
            "blur sigma must be > 0, got {sigma}"
        )));
    }
    Ok(gaussian_kernel(sigma))
}

/// Separable Gaussian blur per channel with clamp-to-border edges.
pub fn gaussian_blur(channels: &Array3<f64>, sigma: f64) -> Result<Array3<f64>> {
    let kernel = blur_kernel(sigma)?;
    let radius = (kernel.len() / 2) as isize;
    let (nc, h, w) = channels.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = Array3::<f64>::zeros((nc, h, w));
    let mut tmp = Array2::<f64>::zeros((h, w));
    for ch in 0..nc {
        let plane = channels.index_axis(Axis(0), ch);
        for r in 0..h {
            for c in 0..w {
                tmp[(r, c)] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| wt * plane[(r, clamp(c as isize + k as isize - radius, w))])
                    .sum();
            }
        }
        for r in 0..h {
            for c in 0..w {
                out[(ch, r, c)] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| wt * tmp[(clamp(r as isize + k as isize - radius, h), c)])
                    .sum();
            }
        }
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, variance)` noise to every voxel of every channel.
pub fn add_gaussian_noise(channels: &Array3<f64>, variance: f64, seed: u64) -> Result<Array3<f64>> {
    if !(variance.is_finite() && variance >= 0.0) {
        return Err(EdlError::InvalidArgument(format!(
            "noise variance must be >= 0, got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(channels.clone());
    }
    let noise = Normal::new(0.0, variance.sqrt()).expect("valid sd");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(channels.mapv(|v| v + noise.sample(&mut rng)))
}

/// Per channel: min-max normalise to `[0, 1]`, then raise to `gamma`.
/// A constant channel is returned unchanged.
pub fn gamma_correct(channels: &Array3<f64>, gamma: f64) -> Result<Array3<f64>> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(EdlError::InvalidArgument(format!(
            "gamma must be > 0, got {gamma}"
        )));
    }
    let mut out = channels.clone();
    for mut plane in out.outer_iter_mut() {
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 {
            plane.mapv_inplace(|v| ((v - lo) / range).powf(gamma));
        }
    }
    Ok(out)
}

/// Input perturbation applied at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Perturbation {
    None,
    Blur(f64),
    Noise(f64),
    Gamma(f64),
}

impl Perturbation {
    /// Applies the perturbation; `seed` only matters for noise.
    pub fn apply(&self, channels: &Array3<f64>, seed: u64) -> Result<Array3<f64>> {
        match *self {
            Perturbation::None => Ok(channels.clone()),
            Perturbation::Blur(sigma) => gaussian_blur(channels, sigma),
            Perturbation::Noise(variance) => add_gaussian_noise(channels, variance, seed),
            Perturbation::Gamma(gamma) => gamma_correct(channels, gamma),
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::None => f.write_str("none"),
            Perturbation::Blur(v) => write!(f, "blur:{v}"),
            Perturbation::Noise(v) => write!(f, "noise:{v}"),
            Perturbation::Gamma(v) => write!(f, "gamma:{v}"),
        }
    }
}

impl FromStr for Perturbation {
    type Err = EdlError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || EdlError::InvalidArgument(format!("malformed perturbation '{s}'"));
        if s.eq_ignore_ascii_case("none") {
            return Ok(Perturbation::None);
        }
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        if !value.is_finite() {
            return Err(bad());
        }
        let p = match kind.trim().to_ascii_lowercase().as_str() {
            "blur" if value > 0.0 => Perturbation::Blur(value),
            "noise" if value >= 0.0 => Perturbation::Noise(value),
            "gamma" if value > 0.0 => Perturbation::Gamma(value),
            _ => return Err(bad()),
        };
        Ok(p)
    }
}
