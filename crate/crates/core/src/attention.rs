//! Gradient-weighted activation maps of the inference path.
//!
//! For a probed activation `A` with `K` channels and a scalar output `x_n`,
//! the map is `(1/K) sum_k |dx_n/dA_k * A_k|`. The activation is re-entered
//! on a fresh tape as a tracked leaf, so one forward pass serves every
//! component; each component then needs one backward sweep.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{self, is_inference_param, ModelBundle};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which activation is probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProbeLayer {
    /// Stem output, `[C1, H/2, W/2]`.
    Block1,
    /// Final backbone features, `[C, H/16, W/16]`.
    Block4,
}

impl ProbeLayer {
    pub fn name(self) -> &'static str {
        match self {
            ProbeLayer::Block1 => "block1",
            ProbeLayer::Block4 => "block4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "block1" => Ok(ProbeLayer::Block1),
            "block4" => Ok(ProbeLayer::Block4),
            _ => Err(Error::Config(format!("unknown probe layer `{s}` (block1, block4)"))),
        }
    }
}

/// What the map explains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProbeTarget {
    /// One embedding component.
    Component(usize),
    /// The mean over all embedding components.
    Holistic,
    /// The mean over the pooled channels of one feature group.
    Group(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    /// `[h, w]` on the probed layer's grid; every value is non-negative.
    pub values: Tensor<T>,
    pub layer: ProbeLayer,
    pub target: ProbeTarget,
}

/// Grad-CAM maps of `head(A)[c]` for every `c` in `components`.
///
/// `activation` is `[1, K, h, w]`; `head` maps it to a `[1, D]` output.
pub fn grad_cam_maps<T: Real>(
    activation: &Tensor<T>,
    head: impl Fn(&mut Tape<T>, Var) -> Result<Var>,
    components: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let [n, k, h, w] = activation.dims4("grad_cam")?;
    if n != 1 {
        return Err(Error::dim("grad_cam", "N", 1, n));
    }
    let mut tape = Tape::new();
    let a = tape.param(activation.clone());
    let out = head(&mut tape, a)?;
    let dims = tape.value(out).numel();
    let plane = h * w;
    let mut maps = Vec::with_capacity(components.len());
    for &c in components {
        if c >= dims {
            return Err(Error::Config(format!("component {c} outside output of width {dims}")));
        }
        tape.reset_grads();
        let mut seed = alloc::vec![T::zero(); dims];
        seed[c] = T::one();
        tape.backward_with_seed(out, seed)?;
        let mut map = Tensor::zeros(&[h, w]);
        if let Some(g) = tape.grad(a) {
            let av = activation.data();
            let scale = T::one() / T::of(k as f64);
            for ch in 0..k {
                let span = ch * plane..(ch + 1) * plane;
                for ((m, &gi), &ai) in map.data_mut().iter_mut().zip(&g[span.clone()]).zip(&av[span]) {
                    *m += (gi * ai).abs() * scale;
                }
            }
        }
        maps.push(map);
    }
    Ok(maps)
}

/// Mean of equally shaped maps.
pub fn mean_map<T: Real>(maps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = maps.first().ok_or_else(|| Error::Config("no maps to average".into()))?;
    let mut out = Tensor::zeros(first.shape());
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::shape(
                "mean_map",
                format!("{:?} vs {:?}", m.shape(), first.shape()),
            ));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += v;
        }
    }
    let inv = T::one() / T::of(maps.len() as f64);
    for o in out.data_mut() {
        *o *= inv;
    }
    Ok(out)
}

/// Probes the inference network of a bundle for one image.
pub struct Prober<'a, T: Real> {
    bundle: &'a ModelBundle<T>,
    image: Tensor<T>,
}

impl<'a, T: Real> Prober<'a, T> {
    /// `image` is `[3, H, W]` or `[1, 3, H, W]`.
    pub fn new(bundle: &'a ModelBundle<T>, image: &Tensor<T>) -> Result<Self> {
        let image = match image.rank() {
            3 => {
                let mut s = alloc::vec![1];
                s.extend_from_slice(image.shape());
                image.clone().reshape(&s)?
            }
            4 => image.clone(),
            r => return Err(Error::shape("attention", format!("image must be rank 3 or 4, got {r}"))),
        };
        Ok(Self { bundle, image })
    }

    /// The probed activation for this image.
    pub fn activation(&self, layer: ProbeLayer) -> Result<Tensor<T>> {
        let cfg = &self.bundle.config;
        let mut tape = Tape::new();
        let vars = self.bundle.params.bind(&mut tape, is_inference_param, false);
        let x = tape.constant(self.image.clone());
        let out = model::backbone_forward(&mut tape, &vars, cfg, x)?;
        Ok(tape
            .value(match layer {
                ProbeLayer::Block1 => out.lowlevel,
                ProbeLayer::Block4 => out.features,
            })
            .clone())
    }

    /// Runs the rest of the network from `a` at `layer` to the backbone features.
    fn features_from(&self, tape: &mut Tape<T>, layer: ProbeLayer, a: Var) -> Result<Var> {
        match layer {
            ProbeLayer::Block4 => Ok(a),
            ProbeLayer::Block1 => {
                let vars = self.bundle.params.bind(tape, is_inference_param, false);
                model::blocks(tape, &vars, "backbone", a)
            }
        }
    }

    /// Per-component maps for the embedding components in `components`.
    pub fn component_maps(&self, layer: ProbeLayer, components: &[usize]) -> Result<Vec<Tensor<T>>> {
        let act = self.activation(layer)?;
        let cfg = &self.bundle.config;
        grad_cam_maps(
            &act,
            |tape, a| {
                let f = self.features_from(tape, layer, a)?;
                let vars = self.bundle.params.bind(tape, |n| n.starts_with("embed."), false);
                model::embed(tape, &vars, cfg, f)
            },
            components,
        )
    }

    pub fn component_map(&self, layer: ProbeLayer, n: usize) -> Result<AttentionMap<T>> {
        let dims = self.bundle.config.embed_dim;
        if n >= dims {
            return Err(Error::Config(format!("embedding component {n} outside 0..{dims}")));
        }
        let values = self.component_maps(layer, &[n])?.remove(0);
        Ok(AttentionMap {
            values,
            layer,
            target: ProbeTarget::Component(n),
        })
    }

    /// Mean of the maps of every embedding component, at Block 1.
    pub fn holistic_map(&self) -> Result<AttentionMap<T>> {
        let all: Vec<usize> = (0..self.bundle.config.embed_dim).collect();
        let maps = self.component_maps(ProbeLayer::Block1, &all)?;
        Ok(AttentionMap {
            values: mean_map(&maps)?,
            layer: ProbeLayer::Block1,
            target: ProbeTarget::Holistic,
        })
    }

    /// Per-channel maps of the globally pooled backbone features, at Block 1.
    pub fn pooled_channel_maps(&self, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
        let act = self.activation(ProbeLayer::Block1)?;
        grad_cam_maps(
            &act,
            |tape, a| {
                let f = self.features_from(tape, ProbeLayer::Block1, a)?;
                tape.global_avg_pool(f)
            },
            channels,
        )
    }

    /// Mean over the pooled channels of feature group `group`, at Block 1.
    pub fn partial_map(&self, group: usize) -> Result<AttentionMap<T>> {
        let part = self.bundle.config.partition()?;
        if group >= part.groups {
            return Err(Error::Config(format!("group {group} outside 0..{}", part.groups)));
        }
        let channels: Vec<usize> = part.range(group).collect();
        let maps = self.pooled_channel_maps(&channels)?;
        Ok(AttentionMap {
            values: mean_map(&maps)?,
            layer: ProbeLayer::Block1,
            target: ProbeTarget::Group(group),
        })
    }
}

/// Fraction of a map's mass on pixels where `mask` is set, after
/// nearest-neighbour upsampling of the map to the mask's `[H, W]` grid.
pub fn mass_inside<T: Real>(map: &Tensor<T>, mask: &[f32], height: usize, width: usize) -> Result<f64> {
    let [h, w] = map.dims2("mass_inside")?;
    if mask.len() != height * width || !height.is_multiple_of(h) || !width.is_multiple_of(w) {
        return Err(Error::shape(
            "mass_inside",
            format!("map {h}x{w} does not tile mask {height}x{width}"),
        ));
    }
    let (sy, sx) = (height / h, width / w);
    let (mut inside, mut total) = (0.0, 0.0);
    for v in 0..height {
        for u in 0..width {
            let m = map.data()[(v / sy) * w + u / sx].as_f64();
            total += m;
            if mask[v * width + u] > 0.5 {
                inside += m;
            }
        }
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}
