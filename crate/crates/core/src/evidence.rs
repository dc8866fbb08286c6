//! Evidence fields and their Dirichlet parameterisation.
//!
//! The network head emits non-negative evidence `e[j, r, c]` per class and
//! voxel. It is mapped to Dirichlet concentration `alpha = (e + 1)^2`, from
//! which the strength `S = sum_j alpha_j`, expected probability
//! `p_hat = alpha / S` and per-class variance `p_hat (1 - p_hat) / (S + 1)`
//! are cached once and shared by every loss and metric.

use ndarray::{Array2, Array3, Axis, Zip};

use crate::error::{EdlError, Result};

/// Non-negative per-class, per-voxel evidence with shape `(K, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceField {
    data: Array3<f64>,
}

impl EvidenceField {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        validate_evidence(&data)?;
        Ok(Self { data })
    }

    pub fn zeros(k: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((k, height, width)),
        }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    pub fn k_classes(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial_shape(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }
}

fn validate_evidence(data: &Array3<f64>) -> Result<()> {
    if data.shape()[0] < 2 {
        return Err(EdlError::InvalidArgument(format!(
            "evidence needs at least 2 classes, got {}",
            data.shape()[0]
        )));
    }
    for ((class, row, col), &value) in data.indexed_iter() {
        if !value.is_finite() {
            return Err(EdlError::NonFinite(format!(
                "evidence at class {class}, voxel ({row}, {col}) is {value}"
            )));
        }
        if value < 0.0 {
            return Err(EdlError::NegativeEvidence {
                value,
                class,
                row,
                col,
            });
        }
    }
    Ok(())
}

/// Dirichlet parameters per voxel with cached derived quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletField {
    alpha: Array3<f64>,
    strength: Array2<f64>,
    p_hat: Array3<f64>,
    var_term: Array3<f64>,
}

impl DirichletField {
    /// Builds the field from concentration parameters; every `alpha` must be finite and `>= 1`.
    pub fn from_alpha(alpha: Array3<f64>) -> Result<Self> {
        if alpha.shape()[0] < 2 {
            return Err(EdlError::InvalidArgument(
                "Dirichlet field needs K >= 2".into(),
            ));
        }
        if let Some(bad) = alpha.iter().find(|a| !a.is_finite()) {
            return Err(EdlError::NonFinite(format!("alpha contains {bad}")));
        }
        if let Some(bad) = alpha.iter().find(|&&a| a < 1.0) {
            return Err(EdlError::InvalidArgument(format!(
                "alpha must be >= 1, got {bad}"
            )));
        }
        Ok(Self::from_alpha_unchecked(alpha))
    }

    pub(crate) fn from_alpha_unchecked(alpha: Array3<f64>) -> Self {
        let strength = alpha.sum_axis(Axis(0));
        let mut p_hat = alpha.clone();
        for mut class_plane in p_hat.outer_iter_mut() {
            Zip::from(&mut class_plane)
                .and(&strength)
                .for_each(|p, &s| *p /= s);
        }
        let mut var_term = p_hat.clone();
        for mut class_plane in var_term.outer_iter_mut() {
            Zip::from(&mut class_plane)
                .and(&strength)
                .for_each(|v, &s| *v = *v * (1.0 - *v) / (s + 1.0));
        }
        Self {
            alpha,
            strength,
            p_hat,
            var_term,
        }
    }

    pub fn alpha(&self) -> &Array3<f64> {
        &self.alpha
    }

    pub fn strength(&self) -> &Array2<f64> {
        &self.strength
    }

    pub fn p_hat(&self) -> &Array3<f64> {
        &self.p_hat
    }

    pub fn var_term(&self) -> &Array3<f64> {
        &self.var_term
    }

    pub fn k_classes(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn spatial_shape(&self) -> (usize, usize) {
        (self.alpha.shape()[1], self.alpha.shape()[2])
    }

    pub fn n_voxels(&self) -> usize {
        self.strength.len()
    }
}

/// `alpha = (e + 1)^2`. Rejects negative or non-finite evidence instead of clamping it.
pub fn evidence_to_alpha(e: &EvidenceField) -> Result<DirichletField> {
    validate_evidence(&e.data)?;
    let alpha = e.data.mapv(|v| (v + 1.0) * (v + 1.0));
    Ok(DirichletField::from_alpha_unchecked(alpha))
}

/// Per-voxel class labels and the domain ("brain") mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelField {
    labels: Array2<u8>,
    domain_mask: Array2<bool>,
    k_classes: usize,
}

impl LabelField {
    pub fn new(labels: Array2<u8>, domain_mask: Array2<bool>, k_classes: usize) -> Result<Self> {
        if k_classes < 2 || k_classes > 256 {
            return Err(EdlError::InvalidArgument(format!(
                "K = {k_classes} out of range"
            )));
        }
        if labels.shape() != domain_mask.shape() {
            return Err(EdlError::ShapeMismatch(format!(
                "labels {:?} vs domain mask {:?}",
                labels.shape(),
                domain_mask.shape()
            )));
        }
        for ((row, col), &label) in labels.indexed_iter() {
            if label as usize >= k_classes {
                return Err(EdlError::InvalidArgument(format!(
                    "label {label} at ({row}, {col}) is not < K = {k_classes}"
                )));
            }
            if label != 0 && !domain_mask[(row, col)] {
                return Err(EdlError::InvalidArgument(format!(
                    "foreground label {label} at ({row}, {col}) lies outside the domain mask"
                )));
            }
        }
        Ok(Self {
            labels,
            domain_mask,
            k_classes,
        })
    }

    /// Label field whose domain covers every voxel.
    pub fn with_full_domain(labels: Array2<u8>, k_classes: usize) -> Result<Self> {
        let mask = Array2::from_elem(labels.raw_dim(), true);
        Self::new(labels, mask, k_classes)
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn domain_mask(&self) -> &Array2<bool> {
        &self.domain_mask
    }

    pub fn k_classes(&self) -> usize {
        self.k_classes
    }

    pub fn spatial_shape(&self) -> (usize, usize) {
        let s = self.labels.shape();
        (s[0], s[1])
    }

    /// One-hot view `y[j, r, c]`.
    pub fn one_hot(&self) -> Array3<f64> {
        let (h, w) = self.spatial_shape();
        Array3::from_shape_fn((self.k_classes, h, w), |(j, r, c)| {
            if self.labels[(r, c)] as usize == j {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Voxel count per class over the whole field.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

pub(crate) fn check_same_grid(d: &DirichletField, y: &LabelField) -> Result<()> {
    if d.k_classes() != y.k_classes() || d.spatial_shape() != y.spatial_shape() {
        return Err(EdlError::ShapeMismatch(format!(
            "Dirichlet field (K={}, {:?}) vs labels (K={}, {:?})",
            d.k_classes(),
            d.spatial_shape(),
            y.k_classes(),
            y.spatial_shape()
        )));
    }
    Ok(())
}
