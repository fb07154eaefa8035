//! Quantitative probes of the training-only branches.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::config::PabTarget;
use crate::model::grouping::NUM_KEYPOINTS;
use crate::model::{self, ModelBundle};
use crate::real::Real;
use crate::synth::{Keypoint, Sample};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::stack;

/// Samples are pushed through the network in chunks of this size.
const CHUNK: usize = 32;

/// Peak-to-keypoint match radius in pixels.
pub const MATCH_RADIUS: f64 = 4.0;

/// Location of the maximum of an `[h, w]` plane; ties go to the first index.
pub fn argmax_2d<T: Real>(plane: &[T], width: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    (best % width, best / width)
}

fn near(peak: (usize, usize), kp: &Keypoint, radius: f64) -> bool {
    let dx = peak.0 as f64 - f64::from(kp.x);
    let dy = peak.1 as f64 - f64::from(kp.y);
    dx * dx + dy * dy <= radius * radius
}

/// HAB mask prediction and PAB outputs for a batch of images.
pub struct BranchOutputs<T> {
    /// `[N, 1, H, W]` after the sigmoid.
    pub mask: Tensor<T>,
    /// Per group `[N, c_p, H, W]`.
    pub parts: Vec<Tensor<T>>,
}

/// Runs the training-only branches in inference mode.
pub fn branch_outputs<T: Real>(bundle: &ModelBundle<T>, images: &Tensor<T>) -> Result<BranchOutputs<T>> {
    let cfg = &bundle.config;
    let mut tape = Tape::new();
    let vars = bundle.params.bind(&mut tape, |_| true, false);
    let x = tape.constant(images.clone());
    let out = model::backbone_forward(&mut tape, &vars, cfg, x)?;
    let mask = model::hab_forward(&mut tape, &vars, cfg, out.lowlevel)?;
    let parts = model::pab_forward(&mut tape, &vars, cfg, out.features)?;
    Ok(BranchOutputs {
        mask: tape.value(mask).clone(),
        parts: parts.iter().map(|&p| tape.value(p).clone()).collect(),
    })
}

fn chunks(samples: &[Sample]) -> impl Iterator<Item = &[Sample]> {
    samples.chunks(CHUNK)
}

fn images<T: Real>(samples: &[Sample]) -> Result<Tensor<T>> {
    let refs: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    stack(&refs)
}

/// Mean per-sample IoU between the HAB mask thresholded at 0.5 and the ground truth.
pub fn hab_iou<T: Real>(bundle: &ModelBundle<T>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to score".into()));
    }
    let mut total = 0.0;
    for chunk in chunks(samples) {
        let out = branch_outputs(bundle, &images(chunk)?)?;
        let mask = out.mask;
        let plane = mask.numel() / chunk.len();
        for (n, s) in chunk.iter().enumerate() {
            let pred = &mask.data()[n * plane..(n + 1) * plane];
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &g) in pred.iter().zip(s.mask.data()) {
                let (p, g) = (p.as_f64() > 0.5, g > 0.5);
                inter += usize::from(p && g);
                union += usize::from(p || g);
            }
            total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        }
    }
    Ok(total / samples.len() as f64)
}

/// Fraction of visible keypoints whose predicted heatmap peaks within `radius`.
pub fn pab_peak_accuracy<T: Real>(bundle: &ModelBundle<T>, samples: &[Sample], radius: f64) -> Result<f64> {
    let cfg = &bundle.config;
    if cfg.pab_target != PabTarget::Keypoints {
        return Err(Error::Config("peak accuracy needs keypoint heatmap heads".into()));
    }
    let scheme = cfg.scheme();
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in chunks(samples) {
        let out = branch_outputs(bundle, &images(chunk)?)?;
        let parts = out.parts;
        for (p, t) in parts.iter().enumerate() {
            let [_, c, h, w] = t.dims4("pab_peak_accuracy")?;
            for (n, s) in chunk.iter().enumerate() {
                for (j, &k) in scheme.group(p).iter().enumerate() {
                    let kp = &s.keypoints[k];
                    if !kp.visible {
                        continue;
                    }
                    let off = (n * c + j) * h * w;
                    let peak = argmax_2d(&t.data()[off..off + h * w], w);
                    total += 1;
                    hits += usize::from(near(peak, kp, radius));
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Config("no visible keypoints among the samples".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Group-`i`-features-through-head-`j` match rates.
#[derive(Clone, Debug, PartialEq)]
pub struct ShuffleMatrix {
    pub groups: usize,
    /// Row-major `[i][j]`: peaks of head `j` on group `i` features that land
    /// near a keypoint of group `i`.
    pub vs_feature: Vec<f64>,
    /// Same peaks scored against the keypoints of group `j`.
    pub vs_head: Vec<f64>,
}

impl ShuffleMatrix {
    pub fn feature(&self, i: usize, j: usize) -> f64 {
        self.vs_feature[i * self.groups + j]
    }

    pub fn head(&self, i: usize, j: usize) -> f64 {
        self.vs_head[i * self.groups + j]
    }

    fn off_diagonal(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let m = self.groups;
        (0..m).flat_map(move |i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
    }

    /// Mean off-diagonal score against feature groups over that against head groups.
    pub fn off_diagonal_ratio(&self) -> f64 {
        let (mut f, mut h) = (0.0, 0.0);
        for (i, j) in self.off_diagonal() {
            f += self.feature(i, j);
            h += self.head(i, j);
        }
        if h == 0.0 {
            if f == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            f / h
        }
    }

    /// Mean over off-diagonal cells of `[vs_feature - vs_head]+`, relative to
    /// the mean diagonal score, clamped to `[0, 1]`.
    pub fn decoupling_score(&self) -> f64 {
        let m = self.groups;
        if m < 2 {
            return 0.0;
        }
        let diag = (0..m).map(|i| self.feature(i, i)).sum::<f64>() / m as f64;
        if diag <= 0.0 {
            return 0.0;
        }
        let cells = (m * (m - 1)) as f64;
        let gap: f64 = self
            .off_diagonal()
            .map(|(i, j)| (self.feature(i, j) - self.head(i, j)).max(0.0))
            .sum::<f64>()
            / cells;
        (gap / diag).clamp(0.0, 1.0)
    }
}

/// Feeds every channel group through the decoder and every head.
///
/// Each head's per-channel peaks are scored against the visible keypoints
/// of both the feature group and the head's own group.
pub fn shuffle_probe<T: Real>(bundle: &ModelBundle<T>, samples: &[Sample], radius: f64) -> Result<ShuffleMatrix> {
    let cfg = &bundle.config;
    if cfg.pab_target != PabTarget::Keypoints {
        return Err(Error::Config("the shuffle probe needs keypoint heatmap heads".into()));
    }
    let scheme = cfg.scheme();
    let m = cfg.num_groups();
    let mut hits_f = vec![0usize; m * m];
    let mut hits_h = vec![0usize; m * m];
    let mut count_f = vec![0usize; m * m];
    let mut count_h = vec![0usize; m * m];
    for chunk in chunks(samples) {
        let mut tape = Tape::new();
        let vars = bundle.params.bind(&mut tape, |_| true, false);
        let x = tape.constant(images(chunk)?);
        let out = model::backbone_forward(&mut tape, &vars, cfg, x)?;
        let groups = model::split_channels(&mut tape, out.features, m)?;
        let decoded = model::pab_decode(&mut tape, &vars, cfg, &groups)?;
        for (i, &d) in decoded.iter().enumerate() {
            for j in 0..m {
                let y = model::pab_head(&mut tape, &vars, j, d)?;
                let t = tape.value(y);
                let [_, c, h, w] = t.dims4("shuffle_probe")?;
                for (n, s) in chunk.iter().enumerate() {
                    let vis = |g: usize| -> Vec<&Keypoint> {
                        scheme
                            .group(g)
                            .iter()
                            .map(|&k| &s.keypoints[k])
                            .filter(|k| k.visible)
                            .collect()
                    };
                    let (kf, kh) = (vis(i), vis(j));
                    for ch in 0..c {
                        let off = (n * c + ch) * h * w;
                        let peak = argmax_2d(&t.data()[off..off + h * w], w);
                        if !kf.is_empty() {
                            count_f[i * m + j] += 1;
                            hits_f[i * m + j] += usize::from(kf.iter().any(|k| near(peak, k, radius)));
                        }
                        if !kh.is_empty() {
                            count_h[i * m + j] += 1;
                            hits_h[i * m + j] += usize::from(kh.iter().any(|k| near(peak, k, radius)));
                        }
                    }
                }
            }
        }
    }
    let rate = |h: &[usize], c: &[usize]| -> Vec<f64> {
        h.iter()
            .zip(c)
            .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
            .collect()
    };
    Ok(ShuffleMatrix {
        groups: m,
        vs_feature: rate(&hits_f, &count_f),
        vs_head: rate(&hits_h, &count_h),
    })
}

/// Chance that a uniformly placed peak lands near a visible keypoint of
/// `group`, averaged over samples that have one.
pub fn random_peak_rate(samples: &[Sample], group: &[usize], radius: f64, height: usize, width: usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        let kps: Vec<&Keypoint> = group
            .iter()
            .filter(|&&k| k < NUM_KEYPOINTS)
            .map(|&k| &s.keypoints[k])
            .filter(|k| k.visible)
            .collect();
        if kps.is_empty() {
            continue;
        }
        let mut covered = 0usize;
        for v in 0..height {
            for u in 0..width {
                covered += usize::from(kps.iter().any(|k| near((u, v), k, radius)));
            }
        }
        sum += covered as f64 / (height * width) as f64;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
