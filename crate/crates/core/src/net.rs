//! Tiny evidential segmentation network.
//!
//! `conv3x3(C_in -> 8) -> ReLU -> conv3x3(8 -> 8) -> ReLU -> conv1x1(8 -> K) -> ReLU`,
//! zero padding, stride 1. The final ReLU emits evidence. Backpropagation is
//! written out by hand and training uses Adam with batch size 1.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EdlError, Result};
use crate::evidence::{evidence_to_alpha, DirichletField, EvidenceField, LabelField};
use crate::losses::{loss_and_grad, LossConfig, LossValue};
use crate::metrics::{npe_map, UncertaintyMap};

pub const HIDDEN_CHANNELS: usize = 8;
const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Network weights. Kernels are stored row-major as `(out, in, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    c_in: usize,
    k: usize,
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl NetParams {
    pub fn zeros(c_in: usize, k: usize) -> Self {
        let h = HIDDEN_CHANNELS;
        Self {
            c_in,
            k,
            conv1_w: vec![0.0; h * c_in * TAPS],
            conv1_b: vec![0.0; h],
            conv2_w: vec![0.0; h * h * TAPS],
            conv2_b: vec![0.0; h],
            head_w: vec![0.0; k * h],
            head_b: vec![0.0; k],
        }
    }

    /// Glorot-uniform kernels, zero biases.
    pub fn init<R: Rng>(c_in: usize, k: usize, rng: &mut R) -> Self {
        let h = HIDDEN_CHANNELS;
        let mut p = Self::zeros(c_in, k);
        let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.random_range(-limit..=limit);
            }
        };
        fill(&mut p.conv1_w, c_in * TAPS, h * TAPS);
        fill(&mut p.conv2_w, h * TAPS, h * TAPS);
        fill(&mut p.head_w, h, k);
        p
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn k_classes(&self) -> usize {
        self.k
    }

    /// Tensor shapes in serialisation order.
    pub fn shapes(&self) -> [Vec<usize>; 6] {
        let h = HIDDEN_CHANNELS;
        [
            vec![h, self.c_in, KERNEL, KERNEL],
            vec![h],
            vec![h, h, KERNEL, KERNEL],
            vec![h],
            vec![self.k, h, 1, 1],
            vec![self.k],
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    /// Rebuilds parameters from tensors in serialisation order, checking every shape.
    pub fn from_tensors(
        c_in: usize,
        k: usize,
        tensors: Vec<(Vec<usize>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut p = Self::zeros(c_in, k);
        let shapes = p.shapes();
        if tensors.len() != shapes.len() {
            return Err(EdlError::Format(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((slot, expected), (shape, data)) in
            p.tensors_mut().into_iter().zip(shapes.iter()).zip(tensors)
        {
            if &shape != expected || data.len() != slot.len() {
                return Err(EdlError::Format(format!(
                    "tensor shape {shape:?}, expected {expected:?}"
                )));
            }
            *slot = data;
        }
        p.check_finite()?;
        Ok(p)
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in serialisation order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(EdlError::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        if self
            .tensors()
            .iter()
            .any(|t| t.iter().any(|v| !v.is_finite()))
        {
            return Err(EdlError::NonFinite("network parameter".into()));
        }
        Ok(())
    }
}

/// `out[o] = b[o] + sum_c sum_{dy,dx} w[o,c,dy,dx] * in[c, y+dy-1, x+dx-1]` with zero padding.
fn conv3x3_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let c_out = bias.len();
    let plane = h * w;
    let mut out = vec![0.0; c_out * plane];
    for (o, out_plane) in out.chunks_exact_mut(plane).enumerate() {
        out_plane.fill(bias[o]);
        for ci in 0..c_in {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            for dy in 0..KERNEL {
                for dx in 0..KERNEL {
                    let wt = weight[(o * c_in + ci) * TAPS + dy * KERNEL + dx];
                    let (y0, y1) = tap_range(dy, h);
                    let (x0, x1) = tap_range(dx, w);
                    for y in y0..y1 {
                        let iy = y + dy - 1;
                        let orow = &mut out_plane[y * w + x0..y * w + x1];
                        let irow = &in_plane[iy * w + x0 + dx - 1..iy * w + x1 + dx - 1];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wt * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output coordinates `[lo, hi)` whose tap at offset `d - 1` stays inside `[0, n)`.
fn tap_range(d: usize, n: usize) -> (usize, usize) {
    let lo = usize::from(d == 0);
    let hi = if d == KERNEL - 1 { n - 1 } else { n };
    (lo, hi.max(lo))
}

/// Accumulates weight/bias gradients and, if requested, the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let plane = h * w;
    for (o, g_plane) in grad_out.chunks_exact(plane).enumerate() {
        grad_b[o] += g_plane.iter().sum::<f64>();
        for ci in 0..c_in {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            for dy in 0..KERNEL {
                for dx in 0..KERNEL {
                    let idx = (o * c_in + ci) * TAPS + dy * KERNEL + dx;
                    let wt = weight[idx];
                    let (y0, y1) = tap_range(dy, h);
                    let (x0, x1) = tap_range(dx, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + dy - 1;
                        let grow = &g_plane[y * w + x0..y * w + x1];
                        let irow = &in_plane[iy * w + x0 + dx - 1..iy * w + x1 + dx - 1];
                        acc += grow.iter().zip(irow).map(|(g, i)| g * i).sum::<f64>();
                        if let Some(gin) = grad_in.as_deref_mut() {
                            let gin_row = &mut gin[ci * plane + iy * w + x0 + dx - 1
                                ..ci * plane + iy * w + x1 + dx - 1];
                            for (gi, g) in gin_row.iter_mut().zip(grow) {
                                *gi += wt * g;
                            }
                        }
                    }
                    grad_w[idx] += acc;
                }
            }
        }
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Intermediate activations kept for the backward pass.
struct ForwardCache {
    h: usize,
    w: usize,
    input: Vec<f64>,
    act1: Vec<f64>,
    act2: Vec<f64>,
    head_pre: Vec<f64>,
}

fn check_image(params: &NetParams, image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != params.c_in {
        return Err(EdlError::ShapeMismatch(format!(
            "image has {c} channels, network expects {}",
            params.c_in
        )));
    }
    if h == 0 || w == 0 {
        return Err(EdlError::ShapeMismatch("empty image".into()));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(EdlError::NonFinite("input image".into()));
    }
    Ok(())
}

fn forward_cached(params: &NetParams, image: &Array3<f64>) -> Result<ForwardCache> {
    check_image(params, image)?;
    let (_, h, w) = image.dim();
    let plane = h * w;
    let input: Vec<f64> = image.iter().copied().collect();
    let mut act1 = conv3x3_forward(&input, params.c_in, h, w, &params.conv1_w, &params.conv1_b);
    relu_in_place(&mut act1);
    let mut act2 = conv3x3_forward(
        &act1,
        HIDDEN_CHANNELS,
        h,
        w,
        &params.conv2_w,
        &params.conv2_b,
    );
    relu_in_place(&mut act2);
    let mut head_pre = vec![0.0; params.k * plane];
    for (j, out) in head_pre.chunks_exact_mut(plane).enumerate() {
        out.fill(params.head_b[j]);
        for c in 0..HIDDEN_CHANNELS {
            let wt = params.head_w[j * HIDDEN_CHANNELS + c];
            for (o, a) in out.iter_mut().zip(&act2[c * plane..(c + 1) * plane]) {
                *o += wt * a;
            }
        }
    }
    Ok(ForwardCache {
        h,
        w,
        input,
        act1,
        act2,
        head_pre,
    })
}

fn evidence_from_cache(params: &NetParams, cache: &ForwardCache) -> Result<EvidenceField> {
    let evidence: Vec<f64> = cache.head_pre.iter().map(|&z| z.max(0.0)).collect();
    let data =
        Array3::from_shape_vec((params.k, cache.h, cache.w), evidence).expect("head output shape");
    EvidenceField::new(data)
}

/// Evidence map of shape `(K, H, W)`.
pub fn forward(params: &NetParams, image: &Array3<f64>) -> Result<EvidenceField> {
    let cache = forward_cached(params, image)?;
    evidence_from_cache(params, &cache)
}

/// Loss at `epoch` and exact parameter gradients for one image.
pub fn backward(
    params: &NetParams,
    image: &Array3<f64>,
    y: &LabelField,
    cfg: &LossConfig,
    epoch: u32,
) -> Result<(LossValue, NetParams)> {
    let cache = forward_cached(params, image)?;
    let evidence = evidence_from_cache(params, &cache)?;
    let (value, grad_e) = loss_and_grad(&evidence, y, cfg, epoch)?;
    let (h, w) = (cache.h, cache.w);
    let plane = h * w;
    let hidden = HIDDEN_CHANNELS;
    let mut grads = NetParams::zeros(params.c_in, params.k);

    let mut g_head: Vec<f64> = grad_e.iter().copied().collect();
    for (g, &z) in g_head.iter_mut().zip(&cache.head_pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }

    let mut g_act2 = vec![0.0; hidden * plane];
    for (j, g_plane) in g_head.chunks_exact(plane).enumerate() {
        grads.head_b[j] = g_plane.iter().sum();
        for c in 0..hidden {
            let a_plane = &cache.act2[c * plane..(c + 1) * plane];
            grads.head_w[j * hidden + c] = g_plane.iter().zip(a_plane).map(|(g, a)| g * a).sum();
            let wt = params.head_w[j * hidden + c];
            for (ga, g) in g_act2[c * plane..(c + 1) * plane].iter_mut().zip(g_plane) {
                *ga += wt * g;
            }
        }
    }
    for (g, &a) in g_act2.iter_mut().zip(&cache.act2) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }

    let mut g_act1 = vec![0.0; hidden * plane];
    conv3x3_backward(
        &cache.act1,
        hidden,
        h,
        w,
        &params.conv2_w,
        &g_act2,
        &mut grads.conv2_w,
        &mut grads.conv2_b,
        Some(&mut g_act1),
    );
    for (g, &a) in g_act1.iter_mut().zip(&cache.act1) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
    conv3x3_backward(
        &cache.input,
        params.c_in,
        h,
        w,
        &params.conv1_w,
        &g_act1,
        &mut grads.conv1_w,
        &mut grads.conv1_b,
        None,
    );
    grads.check_finite()?;
    Ok((value, grads))
}

/// Smallest absolute pre-activation over all three ReLU layers. Finite
/// differences with step `h` are only meaningful when this exceeds `h` times
/// the perturbation's effect on the pre-activations.
pub fn min_abs_preactivation(params: &NetParams, image: &Array3<f64>) -> Result<f64> {
    check_image(params, image)?;
    let (_, h, w) = image.dim();
    let input: Vec<f64> = image.iter().copied().collect();
    let z1 = conv3x3_forward(&input, params.c_in, h, w, &params.conv1_w, &params.conv1_b);
    let mut a1 = z1.clone();
    relu_in_place(&mut a1);
    let z2 = conv3x3_forward(&a1, HIDDEN_CHANNELS, h, w, &params.conv2_w, &params.conv2_b);
    let cache = forward_cached(params, image)?;
    Ok(z1
        .iter()
        .chain(&z2)
        .chain(&cache.head_pre)
        .map(|z| z.abs())
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: u32,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 200,
            seed: 0,
            loss: LossConfig::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(EdlError::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.epochs < 1 {
            return Err(EdlError::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps <= 0.0
        {
            return Err(EdlError::InvalidArgument(
                "Adam hyper-parameters out of range".into(),
            ));
        }
        self.loss.validate()
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: NetParams,
    pub second: NetParams,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        Self {
            first: NetParams::zeros(params.c_in, params.k),
            second: NetParams::zeros(params.c_in, params.k),
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
pub fn adam_step(
    params: &mut NetParams,
    grads: &NetParams,
    state: &mut AdamState,
    t: u64,
    cfg: &TrainConfig,
) -> Result<()> {
    if t < 1 {
        return Err(EdlError::InvalidArgument(
            "Adam step counter starts at 1".into(),
        ));
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let correction1 = 1.0 - b1.powf(t as f64);
    let correction2 = 1.0 - b2.powf(t as f64);
    let tensors = params.tensors_mut();
    let firsts = state.first.tensors_mut();
    let seconds = state.second.tensors_mut();
    for (((p, g), m), v) in tensors
        .into_iter()
        .zip(grads.tensors())
        .zip(firsts)
        .zip(seconds)
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// An input image with its task-space labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: Array3<f64>,
    pub labels: LabelField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NetParams,
    /// Per-epoch mean of each loss component over the dataset.
    pub trace: Vec<LossValue>,
    pub steps: u64,
}

/// Trains from a seeded Glorot initialisation, one Adam step per image,
/// visiting images in a freshly shuffled order every epoch.
pub fn train(dataset: &[TrainingSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(dataset, cfg, |_, _| Ok(()))
}

/// Like [`train`], calling `observer(epoch, params)` after every epoch.
pub fn train_with_observer<F>(
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(u32, &NetParams) -> Result<()>,
{
    cfg.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| EdlError::InvalidArgument("empty training set".into()))?;
    let c_in = first.image.dim().0;
    let k = first.labels.k_classes();
    if let Some(bad) = dataset
        .iter()
        .find(|s| s.image.dim().0 != c_in || s.labels.k_classes() != k)
    {
        return Err(EdlError::ShapeMismatch(format!(
            "inconsistent sample: {} channels, K = {}",
            bad.image.dim().0,
            bad.labels.k_classes()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = NetParams::init(c_in, k, &mut rng);
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs as usize);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossValue::default();
        for &i in &order {
            let sample = &dataset[i];
            let (value, grads) =
                backward(&params, &sample.image, &sample.labels, &cfg.loss, epoch)?;
            step += 1;
            adam_step(&mut params, &grads, &mut state, step, cfg)?;
            sum.total += value.total;
            sum.data_term += value.data_term;
            sum.kl_term += value.kl_term;
            sum.lambda = value.lambda;
        }
        let n = dataset.len() as f64;
        trace.push(LossValue {
            total: sum.total / n,
            data_term: sum.data_term / n,
            kl_term: sum.kl_term / n,
            lambda: sum.lambda,
        });
        observer(epoch, &params)?;
    }
    Ok(TrainOutcome {
        params,
        trace,
        steps: step,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub dirichlet: DirichletField,
    pub uncertainty: UncertaintyMap,
    pub labels: Array2<u8>,
}

/// Per-voxel argmax of `p_hat`, ties to the lower class index.
pub fn argmax_labels(d: &DirichletField) -> Array2<u8> {
    let (h, w) = d.spatial_shape();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut best = 0;
        for j in 1..d.k_classes() {
            if d.p_hat()[(j, r, c)] > d.p_hat()[(best, r, c)] {
                best = j;
            }
        }
        best as u8
    })
}

pub fn predict(params: &NetParams, image: &Array3<f64>) -> Result<Prediction> {
    let evidence = forward(params, image)?;
    let dirichlet = evidence_to_alpha(&evidence)?;
    let uncertainty = npe_map(&dirichlet);
    let labels = argmax_labels(&dirichlet);
    Ok(Prediction {
        dirichlet,
        uncertainty,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;
    use crate::oracles::{finite_diff_grad, max_relative_error};

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_network_is_maximally_uncertain() {
        let params = NetParams::zeros(2, 2);
        let image = Array3::from_elem((2, 5, 6), 0.7);
        let e = forward(&params, &image).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
        let p = predict(&params, &image).unwrap();
        assert!(p.dirichlet.alpha().iter().all(|&a| a == 1.0));
        assert!(p.labels.iter().all(|&l| l == 0));
        assert!(p
            .uncertainty
            .values()
            .iter()
            .all(|&u| (u - 1.0).abs() < 1e-12));
    }

    #[test]
    fn evidence_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let params = NetParams::init(3, 4, &mut rng);
            let image = random_image(&mut rng, 3, 7, 9);
            assert!(forward(&params, &image)
                .unwrap()
                .data()
                .iter()
                .all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn interior_is_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = NetParams::init(2, 2, &mut rng);
        for b in params.head_b.iter_mut() {
            *b = 0.5;
        }
        let (h, w) = (12, 12);
        let image = random_image(&mut rng, 2, h, w);
        let shifted = Array3::from_shape_fn((2, h, w), |(c, r, col)| {
            image[(c, (r + h - 1) % h, (col + w - 1) % w)]
        });
        let a = forward(&params, &image).unwrap();
        let b = forward(&params, &shifted).unwrap();
        // Receptive field radius 2: outputs at least 3 voxels from any border agree.
        for j in 0..2 {
            for r in 3..h - 3 {
                for c in 3..w - 3 {
                    assert!((b.data()[(j, r + 1, c + 1)] - a.data()[(j, r, c)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_channel_count() {
        let params = NetParams::zeros(2, 2);
        assert!(matches!(
            forward(&params, &Array3::zeros((3, 4, 4))),
            Err(EdlError::ShapeMismatch(_))
        ));
        let mut bad = Array3::zeros((2, 4, 4));
        bad[(0, 0, 0)] = f64::NAN;
        assert!(forward(&params, &bad).is_err());
    }

    fn smooth_instance(seed: u64, k: usize) -> (NetParams, Array3<f64>, LabelField) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let mut params = NetParams::init(1, k, &mut rng);
            for b in params.head_b.iter_mut() {
                *b = rng.random_range(0.2..0.8);
            }
            let image = random_image(&mut rng, 1, 8, 8);
            let labels = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..k) as u8);
            if min_abs_preactivation(&params, &image).unwrap() > 1e-3 {
                return (
                    params,
                    image,
                    LabelField::with_full_domain(labels, k).unwrap(),
                );
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (seed, kind) in [(1, LossKind::Dice), (2, LossKind::Mse), (3, LossKind::Ce)] {
            let (params, image, y) = smooth_instance(seed, 2);
            let cfg = LossConfig::new(kind);
            let (_, grads) = backward(&params, &image, &y, &cfg, 60).unwrap();
            let numeric = finite_diff_grad(
                |flat| {
                    let mut p = params.clone();
                    p.assign_flat(flat).unwrap();
                    let d = evidence_to_alpha(&forward(&p, &image).unwrap()).unwrap();
                    crate::losses::loss_edl(&d, &y, &cfg, 60).unwrap().total
                },
                &params.flatten(),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&grads.flatten(), &numeric, 1e-4, 1e-7);
            assert!(err <= 1e-4, "{kind}: {err}");
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let (params, image, y) = smooth_instance(9, 2);
        let cfg = LossConfig::new(LossKind::Dice);
        let a = backward(&params, &image, &y, &cfg, 10).unwrap();
        let b = backward(&params, &image, &y, &cfg, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_network_background_bias_gradient_is_not_positive() {
        let params = NetParams::zeros(1, 2);
        let image = Array3::from_elem((1, 4, 4), 0.3);
        let y = LabelField::with_full_domain(Array2::zeros((4, 4)), 2).unwrap();
        let (_, grads) =
            backward(&params, &image, &y, &LossConfig::new(LossKind::Dice), 0).unwrap();
        assert!(grads.head_b[0] <= 0.0);
    }

    fn tiny_cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            lr,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = NetParams::init(2, 2, &mut rng);
        let before = params.clone();
        let mut state = AdamState::new(&params);
        adam_step(
            &mut params,
            &NetParams::zeros(2, 2),
            &mut state,
            1,
            &tiny_cfg(1e-3),
        )
        .unwrap();
        assert_eq!(params, before);
        assert!(adam_step(
            &mut params,
            &NetParams::zeros(2, 2),
            &mut state,
            0,
            &tiny_cfg(1e-3)
        )
        .is_err());
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let cfg = tiny_cfg(1e-3);
        let mut params = NetParams::zeros(1, 2);
        let mut grads = NetParams::zeros(1, 2);
        grads.head_b = vec![0.37, -4.0];
        let mut state = AdamState::new(&params);
        let mut prev = params.head_b.clone();
        for t in 1..=2000 {
            adam_step(&mut params, &grads, &mut state, t, &cfg).unwrap();
            let step0 = prev[0] - params.head_b[0];
            let step1 = prev[1] - params.head_b[1];
            assert!((step0 - 1e-3).abs() < 1e-7, "t={t}: {step0}");
            assert!((step1 + 1e-3).abs() < 1e-7);
            prev = params.head_b.clone();
        }
    }

    #[test]
    fn adam_is_odd_in_the_gradient() {
        let cfg = tiny_cfg(1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = NetParams::init(1, 2, &mut rng);
        let mut g = NetParams::init(1, 2, &mut rng);
        let mut plus = start.clone();
        adam_step(&mut plus, &g, &mut AdamState::new(&start), 1, &cfg).unwrap();
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v = -*v);
        }
        let mut minus = start.clone();
        adam_step(&mut minus, &g, &mut AdamState::new(&start), 1, &cfg).unwrap();
        for ((s, p), m) in start
            .flatten()
            .iter()
            .zip(plus.flatten())
            .zip(minus.flatten())
        {
            assert!(((p - s) + (m - s)).abs() < 1e-15);
        }
    }

    #[test]
    fn training_loop_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sample = TrainingSample {
            image: random_image(&mut rng, 2, 6, 6),
            labels: LabelField::with_full_domain(
                Array2::from_shape_fn((6, 6), |(r, _)| (r < 3) as u8),
                2,
            )
            .unwrap(),
        };
        let cfg = TrainConfig {
            epochs: 1,
            seed: 11,
            ..TrainConfig::default()
        };
        let out = train(std::slice::from_ref(&sample), &cfg).unwrap();
        assert_eq!(out.steps, 1);
        assert_eq!(out.trace.len(), 1);
        assert!(train(&[], &cfg).is_err());
        assert!(train(
            std::slice::from_ref(&sample),
            &TrainConfig {
                epochs: 0,
                ..cfg.clone()
            }
        )
        .is_err());

        let cfg = TrainConfig { epochs: 3, ..cfg };
        let a = train(std::slice::from_ref(&sample), &cfg).unwrap();
        let b = train(std::slice::from_ref(&sample), &cfg).unwrap();
        assert_eq!(a, b);
        let c = train(
            std::slice::from_ref(&sample),
            &TrainConfig { seed: 12, ..cfg },
        )
        .unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn argmax_ties_go_low() {
        let d = DirichletField::from_alpha(ndarray::array![[[2.0, 9.0, 1.0]], [[2.0, 1.0, 9.0]]])
            .unwrap();
        assert_eq!(argmax_labels(&d), ndarray::array![[0u8, 0, 1]]);
    }

    #[test]
    fn prediction_is_the_composition() {
        let (params, image, _) = smooth_instance(12, 2);
        let p = predict(&params, &image).unwrap();
        let d = evidence_to_alpha(&forward(&params, &image).unwrap()).unwrap();
        assert_eq!(p.dirichlet, d);
    }
}
