//! Training objectives: batch-hard triplet, holistic mask loss, grouped
//! keypoint loss and their weighted combination.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, TripletMargin, Var};
use crate::tensor::Tensor;

/// How a residual map is reduced per sample (mask) or per channel (keypoints).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduction {
    /// `sqrt(sum r^2 + eps)`.
    Norm,
    /// `sum r^2`.
    SquaredNorm,
}

/// Trade-off weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub lambda_p: f64,
    pub margin: TripletMargin,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_h: 0.003,
            lambda_p: 0.003,
            margin: TripletMargin::Soft,
        }
    }
}

/// `(1/N) sum_n ||z_n - m_n||` over `[N, 1, H, W]` predictions and binary targets.
pub fn mask_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, reduction: Reduction) -> Result<Var> {
    let [n, _, _, _] = tape.value(pred).dims4("mask_loss")?;
    same_nchw("mask_loss", tape.value(pred), tape.value(target))?;
    let diff = tape.sub(pred, target)?;
    let norms = tape.row_norms(diff, n, reduction == Reduction::SquaredNorm)?;
    Ok(tape.mean(norms))
}

fn same_nchw<T: Real>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    let want = pred.dims4(op)?;
    let got = target.dims4(op)?;
    for (axis, (&a, &b)) in ["N", "C", "H", "W"].into_iter().zip(want.iter().zip(&got)) {
        if a != b {
            return Err(Error::dim(op, axis, a, b));
        }
    }
    Ok(())
}

/// Unit-peak Gaussian centred on a keypoint, or all zeros when it is not visible.
///
/// Pixel `(u, v)` has its centre at integer coordinates; the centre is
/// clamped into the image first.
pub fn gaussian_heatmap<T: Real>(
    center: (f64, f64),
    visible: bool,
    sigma: f64,
    height: usize,
    width: usize,
) -> Tensor<T> {
    let mut out = Tensor::zeros(&[height, width]);
    if visible {
        write_gaussian(out.data_mut(), center, sigma, height, width);
    }
    out
}

/// Writes a unit-peak Gaussian into an `height x width` plane.
pub fn write_gaussian<T: Real>(dst: &mut [T], center: (f64, f64), sigma: f64, height: usize, width: usize) {
    let cx = center.0.clamp(0.0, width.saturating_sub(1) as f64);
    let cy = center.1.clamp(0.0, height.saturating_sub(1) as f64);
    let inv = -1.0 / (2.0 * sigma * sigma);
    let col: Vec<f64> = (0..width).map(|u| libm_exp((u as f64 - cx).powi(2) * inv)).collect();
    for v in 0..height {
        let row = libm_exp((v as f64 - cy).powi(2) * inv);
        for (u, &c) in col.iter().enumerate() {
            dst[v * width + u] = T::of(row * c);
        }
    }
}

fn libm_exp(v: f64) -> f64 {
    num_traits::Float::exp(v)
}

/// `(1/(N K)) sum_n sum_k ||p_nk - g_nk||` summed over every channel of every group.
pub fn keypoint_loss<T: Real>(
    tape: &mut Tape<T>,
    preds: &[Var],
    targets: &[Var],
    keypoints: usize,
    reduction: Reduction,
) -> Result<Var> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::dim("keypoint_loss", "groups", preds.len(), targets.len()));
    }
    let mut total_channels = 0;
    let mut batch = None;
    let mut sums = Vec::with_capacity(preds.len());
    for (&p, &g) in preds.iter().zip(targets) {
        let [n, k, _, _] = tape.value(p).dims4("keypoint_loss")?;
        same_nchw("keypoint_loss", tape.value(p), tape.value(g))?;
        if *batch.get_or_insert(n) != n {
            return Err(Error::dim("keypoint_loss", "batch", batch.unwrap_or(0), n));
        }
        total_channels += k;
        let diff = tape.sub(p, g)?;
        let norms = tape.row_norms(diff, n * k, reduction == Reduction::SquaredNorm)?;
        sums.push(tape.sum(norms));
    }
    if total_channels != keypoints {
        return Err(Error::Config(format!(
            "groups carry {total_channels} channels in total, expected {keypoints}"
        )));
    }
    let mut acc = sums[0];
    for &s in &sums[1..] {
        acc = tape.add(acc, s)?;
    }
    let n = batch.unwrap_or(1);
    Ok(tape.scale(acc, T::one() / T::of((n * keypoints) as f64)))
}

/// Batch-hard triplet loss on Euclidean distances between embedding rows.
pub fn triplet_batch_hard<T: Real>(
    tape: &mut Tape<T>,
    embeddings: Var,
    labels: &[u32],
    margin: TripletMargin,
) -> Result<Var> {
    let d = tape.pairwise_distance(embeddings)?;
    tape.batch_hard_triplet(d, labels, margin)
}

/// `L = L_r + lambda_h L_h + lambda_p L_p`; absent branches contribute nothing.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    reid: Var,
    mask: Option<Var>,
    keypoint: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    for (name, v) in [("reid", Some(reid)), ("mask", mask), ("keypoint", keypoint)] {
        if let Some(v) = v {
            if !tape.value(v).all_finite() {
                return Err(Error::Numerical(format!(
                    "{name} loss is not finite: {:?}",
                    tape.value(v).data()
                )));
            }
        }
    }
    let mut total = reid;
    if let Some(h) = mask {
        let w = tape.scale(h, T::of(weights.lambda_h));
        total = tape.add(total, w)?;
    }
    if let Some(p) = keypoint {
        let w = tape.scale(p, T::of(weights.lambda_p));
        total = tape.add(total, w)?;
    }
    Ok(total)
}
