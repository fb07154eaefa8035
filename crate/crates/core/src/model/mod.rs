//! The embedding network and its two training-only attention branches.
//!
//! * Backbone: a stride-2 stem (block 1) followed by three stride-2 blocks of
//!   two 3x3 convolutions each. Block 1's output is the low-level tap.
//! * Embedding head: global average pooling, `dense + ReLU`, `dense`, L2
//!   normalisation.
//! * Holistic branch: an encoder with the structure of blocks 2-4, a stack of
//!   stride-2 deconvolutions back to input resolution, a 1x1 convolution and
//!   a sigmoid, predicting the body mask.
//! * Partial branch: the final feature channels are split into `M` groups;
//!   each group runs through the (shared) deconvolution stack and its own
//!   1x1 head predicting its keypoints' heatmaps.
//!
//! Inference only ever touches `backbone.*` and `embed.*` parameters.

pub mod checkpoint;
pub mod config;
pub mod grouping;
pub mod params;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use config::{DecoderSharing, ModelConfig, PabTarget, BACKBONE_STRIDE};
pub use grouping::{ChannelPartition, GroupingKind, GroupingScheme, KEYPOINT_NAMES, NUM_KEYPOINTS};
pub use params::{Bound, ParamStore};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{ConvSpec, DeconvSpec, Tape, Var};
use crate::tensor::Tensor;

const DOWN: ConvSpec = ConvSpec { stride: 2, pad: 1 };
const SAME: ConvSpec = ConvSpec { stride: 1, pad: 1 };
const POINT: ConvSpec = ConvSpec { stride: 1, pad: 0 };
const UP: DeconvSpec = DeconvSpec {
    stride: 2,
    pad: 1,
    out_pad: 1,
};

/// Parameter groups, by name prefix.
pub fn is_inference_param(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("embed.")
}

pub fn is_hab_param(name: &str) -> bool {
    name.starts_with("hab.")
}

pub fn is_pab_param(name: &str) -> bool {
    name.starts_with("pab.")
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Normal with `std = sqrt(gain / fan_in)`.
    Normal {
        fan_in: usize,
        gain: f64,
    },
    Zero,
}

/// Name, shape and initialiser of every parameter implied by a config.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut conv = |out: &mut Vec<_>, name: String, cout: usize, cin: usize, k: usize| {
        out.push((
            format!("{name}.w"),
            vec![cout, cin, k, k],
            Init::Normal {
                fan_in: cin * k * k,
                gain: 2.0,
            },
        ));
        out.push((format!("{name}.b"), vec![cout], Init::Zero));
    };
    let blocks = |out: &mut Vec<_>, prefix: &str, conv: &mut dyn FnMut(&mut Vec<_>, String, usize, usize, usize)| {
        let mut cin = cfg.stem_channels;
        for (i, &c) in cfg.block_channels.iter().enumerate() {
            conv(out, format!("{prefix}.block{}.conv1", i + 2), c, cin, 3);
            conv(out, format!("{prefix}.block{}.conv2", i + 2), c, c, 3);
            cin = c;
        }
    };
    conv(&mut out, "backbone.block1".into(), cfg.stem_channels, 3, 3);
    blocks(&mut out, "backbone", &mut conv);

    let c = cfg.feature_channels();
    out.push((
        "embed.fc1.w".into(),
        vec![cfg.embed_hidden, c],
        Init::Normal { fan_in: c, gain: 2.0 },
    ));
    out.push(("embed.fc1.b".into(), vec![cfg.embed_hidden], Init::Zero));
    out.push((
        "embed.fc2.w".into(),
        vec![cfg.embed_dim, cfg.embed_hidden],
        Init::Normal {
            fan_in: cfg.embed_hidden,
            gain: 1.0,
        },
    ));
    out.push(("embed.fc2.b".into(), vec![cfg.embed_dim], Init::Zero));

    if !cfg.hab_shares_encoder {
        blocks(&mut out, "hab.encoder", &mut conv);
    }
    decoder_layout(&mut out, "hab.decoder", c, cfg);
    out.push((
        "hab.head.w".into(),
        vec![1, cfg.decoder_channels, 1, 1],
        Init::Normal {
            fan_in: cfg.decoder_channels,
            gain: 1.0,
        },
    ));
    out.push(("hab.head.b".into(), vec![1], Init::Zero));

    let per_group = c / cfg.num_groups().max(1);
    match cfg.pab_decoder {
        DecoderSharing::Shared => decoder_layout(&mut out, "pab.decoder", per_group, cfg),
        DecoderSharing::Independent => {
            for p in 0..cfg.num_groups() {
                decoder_layout(&mut out, &format!("pab.decoder{p}"), per_group, cfg);
            }
        }
    }
    for (p, k) in cfg.head_channels().into_iter().enumerate() {
        out.push((
            format!("pab.head{p}.w"),
            vec![k, cfg.decoder_channels, 1, 1],
            Init::Normal {
                fan_in: cfg.decoder_channels,
                gain: 1.0,
            },
        ));
        out.push((format!("pab.head{p}.b"), vec![k], Init::Zero));
    }
    out
}

fn decoder_layout(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, cin: usize, cfg: &ModelConfig) {
    let k = cfg.decoder_kernel;
    let mut cin = cin;
    for l in 1..=cfg.decoder_layers {
        // A stride-2 transposed conv feeds each output pixel from ~cin * k^2 / 4 inputs.
        out.push((
            format!("{prefix}.deconv{l}.w"),
            vec![cin, cfg.decoder_channels, k, k],
            Init::Normal {
                fan_in: (cin * k * k / 4).max(1),
                gain: 2.0,
            },
        ));
        out.push((format!("{prefix}.deconv{l}.b"), vec![cfg.decoder_channels], Init::Zero));
        cin = cfg.decoder_channels;
    }
}

/// Network parameters together with the structure they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> ModelBundle<T> {
    /// Freshly initialised parameters (He-normal weights, zero biases).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config) {
            let t = match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::Normal { fan_in, gain } => {
                    let std = num_traits::Float::sqrt(gain / fan_in as f64);
                    Tensor::from_fn(&shape, |_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::of(z * std)
                    })
                }
            };
            params.insert(&name, t);
        }
        Ok(Self { config, params })
    }

    /// Assembles a bundle from named tensors, requiring exactly the parameters `config` implies.
    pub fn from_params(config: ModelConfig, mut params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        let mut ordered = ParamStore::new();
        for (name, shape, _) in &expected {
            let t = params
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            if t.shape() != &shape[..] {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    t.shape(),
                    shape
                )));
            }
            ordered.insert(name, core::mem::replace(t, Tensor::zeros(&[0])));
        }
        if params.len() != expected.len() {
            let extra = params
                .iter()
                .map(|(n, _)| n)
                .find(|n| !ordered.contains(n))
                .unwrap_or_default();
            return Err(Error::Format(format!("unexpected parameter `{extra}` for this config")));
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Scalar count of the parameters used at inference.
    pub fn inference_param_count(&self) -> usize {
        self.params.count_where(is_inference_param)
    }

    pub fn param_count(&self) -> usize {
        self.params.count_where(|_| true)
    }

    /// Embeds `[N, 3, H, W]` images using only the inference path.
    pub fn embed_images(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, is_inference_param, false);
        let x = tape.constant(images.clone());
        let feats = backbone_forward(&mut tape, &vars, &self.config, x)?;
        let e = embed(&mut tape, &vars, &self.config, feats.features)?;
        Ok(tape.value(e).clone())
    }
}

/// Outputs of the backbone.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// Block-1 output, `[N, C1, H/2, W/2]`.
    pub lowlevel: Var,
    /// Block-4 output, `[N, C, H/16, W/16]`.
    pub features: Var,
}

fn conv_relu<T: Real>(tape: &mut Tape<T>, vars: &Bound, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    let w = vars.var(&format!("{name}.w"))?;
    let b = vars.var(&format!("{name}.b"))?;
    let y = tape.conv2d(x, w, Some(b), spec)?;
    Ok(tape.relu(y))
}

/// Block 1: the stride-2 stem.
pub fn stem<T: Real>(tape: &mut Tape<T>, vars: &Bound, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let [_, c, h, w] = tape.value(image).dims4("backbone_forward")?;
    if c != 3 {
        return Err(Error::Config(format!("image has {c} channels, expected 3")));
    }
    if (h, w) != (cfg.input_h, cfg.input_w) {
        return Err(Error::Config(format!(
            "image extent {h}x{w} does not match configured {}x{}",
            cfg.input_h, cfg.input_w
        )));
    }
    conv_relu(tape, vars, "backbone.block1", image, DOWN)
}

/// Blocks 2-4 under a parameter prefix (`backbone` or `hab.encoder`).
pub fn blocks<T: Real>(tape: &mut Tape<T>, vars: &Bound, prefix: &str, lowlevel: Var) -> Result<Var> {
    let mut h = lowlevel;
    for b in 2..=4 {
        h = conv_relu(tape, vars, &format!("{prefix}.block{b}.conv1"), h, DOWN)?;
        h = conv_relu(tape, vars, &format!("{prefix}.block{b}.conv2"), h, SAME)?;
    }
    Ok(h)
}

pub fn backbone_forward<T: Real>(
    tape: &mut Tape<T>,
    vars: &Bound,
    cfg: &ModelConfig,
    image: Var,
) -> Result<BackboneOutput> {
    let lowlevel = stem(tape, vars, cfg, image)?;
    let features = blocks(tape, vars, "backbone", lowlevel)?;
    Ok(BackboneOutput { lowlevel, features })
}

/// Global average pool, `dense + ReLU`, `dense`, then L2 normalisation of each row.
pub fn embed<T: Real>(tape: &mut Tape<T>, vars: &Bound, cfg: &ModelConfig, features: Var) -> Result<Var> {
    let c = tape.value(features).dims4("embed")?[1];
    if c != cfg.feature_channels() {
        return Err(Error::dim("embed", "channels", cfg.feature_channels(), c));
    }
    let pooled = tape.global_avg_pool(features)?;
    let h = tape.dense(pooled, vars.var("embed.fc1.w")?, Some(vars.var("embed.fc1.b")?))?;
    let h = tape.relu(h);
    let e = tape.dense(h, vars.var("embed.fc2.w")?, Some(vars.var("embed.fc2.b")?))?;
    tape.normalize_rows(e)
}

/// Stride-2 deconvolutions with ReLU, back to input resolution.
pub fn decoder<T: Real>(tape: &mut Tape<T>, vars: &Bound, cfg: &ModelConfig, prefix: &str, x: Var) -> Result<Var> {
    let mut h = x;
    for l in 1..=cfg.decoder_layers {
        let w = vars.var(&format!("{prefix}.deconv{l}.w"))?;
        let b = vars.var(&format!("{prefix}.deconv{l}.b"))?;
        h = tape.deconv2d(h, w, Some(b), UP)?;
        h = tape.relu(h);
    }
    let [_, _, oh, ow] = tape.value(h).dims4("decoder")?;
    if (oh, ow) != (cfg.input_h, cfg.input_w) {
        return Err(Error::Config(format!(
            "decoder reached {oh}x{ow}, input is {}x{}",
            cfg.input_h, cfg.input_w
        )));
    }
    Ok(h)
}

fn pointwise<T: Real>(tape: &mut Tape<T>, vars: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = vars.var(&format!("{name}.w"))?;
    let b = vars.var(&format!("{name}.b"))?;
    tape.conv2d(x, w, Some(b), POINT)
}

/// Holistic branch: encoder, decoder, 1x1 conv, sigmoid. Output `[N, 1, H, W]` in (0, 1).
pub fn hab_forward<T: Real>(tape: &mut Tape<T>, vars: &Bound, cfg: &ModelConfig, lowlevel: Var) -> Result<Var> {
    let prefix = if cfg.hab_shares_encoder {
        "backbone"
    } else {
        "hab.encoder"
    };
    let enc = blocks(tape, vars, prefix, lowlevel)?;
    let dec = decoder(tape, vars, cfg, "hab.decoder", enc)?;
    let logits = pointwise(tape, vars, "hab.head", dec)?;
    Ok(tape.sigmoid(logits))
}

/// Contiguous channel groups of the features; trailing `C mod M` channels are dropped.
pub fn split_channels<T: Real>(tape: &mut Tape<T>, features: Var, groups: usize) -> Result<Vec<Var>> {
    let c = tape.value(features).dims4("split_channels")?[1];
    let part = ChannelPartition::new(c, groups)?;
    (0..groups)
        .map(|p| tape.slice_channels(features, part.range(p).start, part.per_group))
        .collect()
}

/// Runs each group through its decoder (the shared one, or its own).
pub fn pab_decode<T: Real>(tape: &mut Tape<T>, vars: &Bound, cfg: &ModelConfig, groups: &[Var]) -> Result<Vec<Var>> {
    match cfg.pab_decoder {
        DecoderSharing::Shared => {
            let n = tape.value(groups[0]).shape()[0];
            let stacked = tape.concat_batch(groups)?;
            let dec = decoder(tape, vars, cfg, "pab.decoder", stacked)?;
            (0..groups.len()).map(|p| tape.slice_batch(dec, p * n, n)).collect()
        }
        DecoderSharing::Independent => groups
            .iter()
            .enumerate()
            .map(|(p, &g)| decoder(tape, vars, cfg, &format!("pab.decoder{p}"), g))
            .collect(),
    }
}

/// Head `p` applied to a decoded group.
pub fn pab_head<T: Real>(tape: &mut Tape<T>, vars: &Bound, p: usize, decoded: Var) -> Result<Var> {
    pointwise(tape, vars, &format!("pab.head{p}"), decoded)
}

/// Partial branch: one `[N, k_p, H, W]` prediction per group.
pub fn pab_forward<T: Real>(tape: &mut Tape<T>, vars: &Bound, cfg: &ModelConfig, features: Var) -> Result<Vec<Var>> {
    let groups = split_channels(tape, features, cfg.num_groups())?;
    let decoded = pab_decode(tape, vars, cfg, &groups)?;
    decoded
        .into_iter()
        .enumerate()
        .map(|(p, d)| pab_head(tape, vars, p, d))
        .collect()
}
