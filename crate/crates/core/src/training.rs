//! Joint optimisation of the embedding and the attention branches.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, Reduction};
use crate::model::checkpoint::Checkpoint;
use crate::model::config::{DecoderSharing, ModelConfig, PabTarget};
use crate::model::grouping::{GroupingKind, NUM_KEYPOINTS};
use crate::model::{self, is_hab_param, is_inference_param, is_pab_param, ModelBundle};
use crate::real::Real;
use crate::synth::{rng_for, stripe_rows, Keypoint, Sample};
use crate::tape::{Tape, TripletMargin, Var};
use crate::tensor::Tensor;

const DOMAIN_PK: u64 = 4;

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Identities per batch.
    pub p: usize,
    /// Images per identity in a batch.
    pub k: usize,
    pub lr: f64,
    pub steps: usize,
    pub weights: LossWeights,
    pub hab: bool,
    pub pab: bool,
    pub grouping: GroupingKind,
    pub pab_decoder: DecoderSharing,
    pub pab_target: PabTarget,
    pub reduction: Reduction,
    /// Gaussian target width in pixels.
    pub sigma: f64,
    pub decoder_channels: usize,
    pub seed: u64,
    pub log_interval: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 8,
            k: 4,
            lr: 0.001,
            steps: 400,
            weights: LossWeights::default(),
            hab: true,
            pab: true,
            grouping: GroupingKind::Six,
            pab_decoder: DecoderSharing::Shared,
            pab_target: PabTarget::Keypoints,
            reduction: Reduction::Norm,
            sigma: 2.0,
            decoder_channels: ModelConfig::default().decoder_channels,
            seed: 0,
            log_interval: 10,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    /// The network structure this run trains.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            grouping: self.grouping,
            pab_decoder: self.pab_decoder,
            pab_target: self.pab_target,
            decoder_channels: self.decoder_channels,
            ..ModelConfig::default()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "P={} and K={} must both be at least 2",
                self.p, self.k
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr) || !positive(self.sigma) {
            return Err(Error::Config(format!(
                "lr {} and sigma {} must be positive",
                self.lr, self.sigma
            )));
        }
        if !(self.weights.lambda_h >= 0.0 && self.weights.lambda_p >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if let TripletMargin::Hard(m) = self.weights.margin {
            if m.is_nan() || m < 0.0 {
                return Err(Error::Config(format!("triplet margin {m} must be non-negative")));
            }
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be positive".into()));
        }
        self.model_config().validate()
    }

    /// Which parameters receive updates.
    pub fn trains(&self, name: &str) -> bool {
        is_inference_param(name) || (self.hab && is_hab_param(name)) || (self.pab && is_pab_param(name))
    }
}

/// Training images held in memory.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub images: Vec<Tensor<f32>>,
    pub masks: Vec<Tensor<f32>>,
    pub keypoints: Vec<[Keypoint; NUM_KEYPOINTS]>,
    pub labels: Vec<u32>,
}

impl TrainSet {
    pub fn from_samples(samples: &[Sample]) -> Self {
        Self {
            images: samples.iter().map(|s| s.image.clone()).collect(),
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
            keypoints: samples.iter().map(|s| s.keypoints).collect(),
            labels: samples.iter().map(|s| s.identity).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stacks `[C, H, W]` tensors into `[N, C, H, W]`.
pub fn stack<T: Real>(items: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend(t.data().iter().map(|&v| T::of(f64::from(v))));
    }
    Tensor::new(&shape, data)
}

/// Gaussian targets of one keypoint group for a batch: `[N, |group|, H, W]`.
pub fn heatmap_targets<T: Real>(
    keypoints: &[&[Keypoint; NUM_KEYPOINTS]],
    group: &[usize],
    sigma: f64,
    height: usize,
    width: usize,
) -> Tensor<T> {
    let plane = height * width;
    let mut out = Tensor::zeros(&[keypoints.len(), group.len(), height, width]);
    for (n, kps) in keypoints.iter().enumerate() {
        for (j, &k) in group.iter().enumerate() {
            let kp = kps[k];
            if kp.visible {
                let off = (n * group.len() + j) * plane;
                losses::write_gaussian(
                    &mut out.data_mut()[off..off + plane],
                    (f64::from(kp.x), f64::from(kp.y)),
                    sigma,
                    height,
                    width,
                );
            }
        }
    }
    out
}

/// Part-image targets: the image with every row outside stripe `p` zeroed,
/// for each of `parts` equal horizontal stripes.
pub fn part_image_targets<T: Real>(image: &Tensor<T>, parts: usize) -> Result<Vec<Tensor<T>>> {
    let [c, h, w] = match image.shape() {
        &[c, h, w] => [c, h, w],
        s => {
            return Err(Error::shape(
                "part_image_targets",
                format!("expected [C, H, W], got {s:?}"),
            ))
        }
    };
    if parts == 0 || parts > h {
        return Err(Error::Config(format!("cannot cut {h} rows into {parts} stripes")));
    }
    Ok((0..parts)
        .map(|p| {
            let rows = stripe_rows(h, parts, p);
            Tensor::from_fn(&[c, h, w], |i| {
                let v = (i / w) % h;
                if rows.contains(&v) {
                    image.data()[i]
                } else {
                    T::zero()
                }
            })
        })
        .collect())
}

/// P x K batch sampler with per-epoch reshuffling.
///
/// At the start of every epoch each identity's images are shuffled and cut
/// into chunks of `k`; a short final chunk is topped up with other images of
/// the same identity. Batches then take one chunk from each of the `p`
/// identities with the most chunks left, so whole epochs are consumed evenly.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_id: Vec<(u32, Vec<usize>)>,
    p: usize,
    k: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    plan: Vec<Vec<usize>>,
}

impl PkSampler {
    pub fn new(labels: &[u32], p: usize, k: usize, seed: u64) -> Result<Self> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        let by_id: Vec<(u32, Vec<usize>)> = groups.into_iter().filter(|(_, v)| v.len() >= k).collect();
        if p < 2 || k < 2 || by_id.len() < p {
            return Err(Error::Sampling(format!(
                "need {p} identities with at least {k} images each, found {}",
                by_id.len()
            )));
        }
        let mut s = Self {
            by_id,
            p,
            k,
            seed,
            epoch: 0,
            cursor: 0,
            plan: Vec::new(),
        };
        s.plan = s.plan_epoch(0);
        Ok(s)
    }

    fn plan_epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = rng_for(self.seed, DOMAIN_PK, epoch);
        let mut chunks: Vec<Vec<Vec<usize>>> = self
            .by_id
            .iter()
            .map(|(_, imgs)| {
                let mut order = imgs.clone();
                order.shuffle(&mut rng);
                let mut out: Vec<Vec<usize>> = order.chunks(self.k).map(<[usize]>::to_vec).collect();
                let last = out.last_mut().expect("identity has at least k images");
                if last.len() < self.k {
                    let mut spare: Vec<usize> = imgs.iter().copied().filter(|i| !last.contains(i)).collect();
                    spare.shuffle(&mut rng);
                    let need = self.k - last.len();
                    last.extend_from_slice(&spare[..need]);
                }
                out
            })
            .collect();
        let mut plan = Vec::new();
        let mut ids: Vec<usize> = (0..chunks.len()).collect();
        loop {
            ids.shuffle(&mut rng);
            ids.sort_by_key(|&i| core::cmp::Reverse(chunks[i].len()));
            if chunks[ids[self.p - 1]].is_empty() {
                break;
            }
            let mut batch = Vec::with_capacity(self.p * self.k);
            for &i in &ids[..self.p] {
                batch.extend(chunks[i].pop().expect("non-empty"));
            }
            plan.push(batch);
        }
        plan
    }

    /// Indices of the next batch, identities contiguous.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.plan.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.plan = self.plan_epoch(self.epoch);
        }
        self.cursor += 1;
        self.plan[self.cursor - 1].clone()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.plan.len()
    }

    /// `(epoch, batches already drawn in it)`.
    pub fn state(&self) -> (u64, usize) {
        (self.epoch, self.cursor)
    }

    pub fn restore(&mut self, epoch: u64, cursor: usize) {
        self.epoch = epoch;
        self.cursor = cursor;
        self.plan = self.plan_epoch(epoch);
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every listed parameter that received a gradient.
    pub fn update<'a>(
        &mut self,
        params: &mut crate::model::params::ParamStore<T>,
        grads: impl IntoIterator<Item = (&'a str, &'a [T])>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - T::of(num_traits::Float::powi(self.beta1, t));
        let c2 = T::one() - T::of(num_traits::Float::powi(self.beta2, t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("optimizer got gradient for unknown parameter `{name}`")))?;
            let shape = p.shape().to_vec();
            let m = self.m.entry(name.into()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(name.into()).or_insert_with(|| Tensor::zeros(&shape));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Loss values of one step; disabled branches report 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub reid: f64,
    pub mask: f64,
    pub keypoint: f64,
}

/// Graph outputs of one training forward pass.
pub struct ForwardLosses {
    pub total: Var,
    pub reid: Var,
    pub mask: Option<Var>,
    pub keypoint: Option<Var>,
}

/// Builds the full training objective for one batch on `tape`.
pub fn training_objective<T: Real>(
    tape: &mut Tape<T>,
    vars: &model::params::Bound,
    bundle_config: &ModelConfig,
    config: &TrainConfig,
    data: &TrainSet,
    batch: &[usize],
) -> Result<ForwardLosses> {
    let cfg = bundle_config;
    let images: Vec<&Tensor<f32>> = batch.iter().map(|&i| &data.images[i]).collect();
    let labels: Vec<u32> = batch.iter().map(|&i| data.labels[i]).collect();
    let x = tape.constant(stack(&images)?);
    let out = model::backbone_forward(tape, vars, cfg, x)?;
    let e = model::embed(tape, vars, cfg, out.features)?;
    let reid = losses::triplet_batch_hard(tape, e, &labels, config.weights.margin)?;

    let mask = if config.hab {
        let z = model::hab_forward(tape, vars, cfg, out.lowlevel)?;
        let masks: Vec<&Tensor<f32>> = batch.iter().map(|&i| &data.masks[i]).collect();
        let m = tape.constant(stack(&masks)?);
        Some(losses::mask_loss(tape, z, m, config.reduction)?)
    } else {
        None
    };

    let keypoint = if config.pab {
        let preds = model::pab_forward(tape, vars, cfg, out.features)?;
        let targets: Vec<Var> = match cfg.pab_target {
            PabTarget::Keypoints => {
                let kps: Vec<&[Keypoint; NUM_KEYPOINTS]> = batch.iter().map(|&i| &data.keypoints[i]).collect();
                cfg.scheme()
                    .groups()
                    .iter()
                    .map(|g| tape.constant(heatmap_targets(&kps, g, config.sigma, cfg.input_h, cfg.input_w)))
                    .collect()
            }
            PabTarget::PartImage => {
                let m = cfg.num_groups();
                let mut per_part: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); m];
                for img in &images {
                    for (p, t) in part_image_targets(*img, m)?.into_iter().enumerate() {
                        per_part[p].push(t);
                    }
                }
                let mut vars_out = Vec::with_capacity(m);
                for parts in &per_part {
                    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
                    vars_out.push(tape.constant(stack(&refs)?));
                }
                vars_out
            }
        };
        let channels: usize = cfg.head_channels().iter().sum();
        Some(losses::keypoint_loss(
            tape,
            &preds,
            &targets,
            channels,
            config.reduction,
        )?)
    } else {
        None
    };

    let total = losses::total_loss(tape, reid, mask, keypoint, &config.weights)?;
    Ok(ForwardLosses {
        total,
        reid,
        mask,
        keypoint,
    })
}

/// Model, optimiser and sampler state of a run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub bundle: ModelBundle<T>,
    pub adam: Adam<T>,
    pub sampler: PkSampler,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, data: &TrainSet) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::init(config.model_config(), config.seed)?;
        let sampler = PkSampler::new(&data.labels, config.p, config.k, config.seed)?;
        Ok(Self {
            adam: Adam::new(config.lr),
            config,
            bundle,
            sampler,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Samples a batch, evaluates the objective and applies one Adam update.
    pub fn train_step(&mut self, data: &TrainSet) -> Result<StepLoss> {
        let batch = self.sampler.next_batch();
        self.step_on(data, &batch)
    }

    /// One update on a given batch.
    pub fn step_on(&mut self, data: &TrainSet, batch: &[usize]) -> Result<StepLoss> {
        let mut tape = Tape::new();
        let cfg = &self.config;
        let vars = self.bundle.params.bind(&mut tape, |n| cfg.trains(n), true);
        let step = self.adam.step + 1;
        let out = training_objective(&mut tape, &vars, &self.bundle.config, cfg, data, batch).map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("step {step}: {msg}")),
            other => other,
        })?;
        let read = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        let loss = StepLoss {
            total: read(Some(out.total)),
            reid: read(Some(out.reid)),
            mask: read(out.mask),
            keypoint: read(out.keypoint),
        };
        tape.backward(out.total)?;
        let mut grads = Vec::new();
        for (name, v) in vars.iter() {
            if let Some(g) = tape.grad(v) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "step {step}: non-finite gradient for `{name}` (losses {loss:?})"
                    )));
                }
                grads.push((name, g));
            }
        }
        self.adam.update(&mut self.bundle.params, grads)?;
        Ok(loss)
    }

    /// Model parameters plus optimiser and sampler state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_bundle(&self.bundle);
        for (prefix, map) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (name, t) in map {
                ck.push(&format!("{prefix}{name}"), t.cast());
            }
        }
        let (epoch, cursor) = self.sampler.state();
        ck.push("train.state", counter_tensor(&[self.adam.step, epoch, cursor as u64]));
        ck
    }

    /// Continues a run from [`Trainer::checkpoint`] output.
    pub fn resume(config: TrainConfig, data: &TrainSet, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, data)?;
        if ck.config != t.bundle.config {
            return Err(Error::Config(
                "checkpoint structure differs from the training config".into(),
            ));
        }
        t.bundle = ck.bundle()?;
        let state = ck
            .blob("train.state")
            .ok_or_else(|| Error::Format("checkpoint has no training state".into()))?;
        let [step, epoch, cursor] = read_counters(state)?;
        t.adam.step = step;
        for (name, blob) in &ck.blobs {
            if let Some(p) = name.strip_prefix("adam.m.") {
                t.adam.m.insert(p.into(), blob.cast());
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                t.adam.v.insert(p.into(), blob.cast());
            }
        }
        t.sampler.restore(epoch, cursor as usize);
        Ok(t)
    }
}

/// Packs counters as 16-bit limbs so they survive the f32 blob format exactly.
fn counter_tensor(values: &[u64]) -> Tensor<f32> {
    let data = values
        .iter()
        .flat_map(|&v| (0..4).map(move |i| ((v >> (16 * i)) & 0xFFFF) as f32))
        .collect::<Vec<_>>();
    Tensor::new(&[values.len(), 4], data).expect("shape matches")
}

fn read_counters<const N: usize>(t: &Tensor<f32>) -> Result<[u64; N]> {
    if t.shape() != [N, 4] {
        return Err(Error::Format(format!("training state has shape {:?}", t.shape())));
    }
    let mut out = [0u64; N];
    for (i, o) in out.iter_mut().enumerate() {
        for l in 0..4 {
            let limb = t.data()[i * 4 + l];
            if !(0.0..65536.0).contains(&limb) || num_traits::Float::fract(limb) != 0.0 {
                return Err(Error::Format(format!("corrupt training counter limb {limb}")));
            }
            *o |= (limb as u64) << (16 * l);
        }
    }
    Ok(out)
}
