//! Procedural person renderer with exact masks and keypoints.
//!
//! Figures are drawn facing the camera, so the person's left side appears on
//! the image's right (+x). Pixel `(u, v)` has its centre at integer
//! coordinates, matching [`crate::losses::gaussian_heatmap`].

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::grouping::NUM_KEYPOINTS;
use crate::tensor::Tensor;

pub const IMAGE_H: usize = 64;
pub const IMAGE_W: usize = 32;

/// Seeded generator for one `(seed, domain, index)` triple.
pub fn rng_for(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const DOMAIN_IDENTITY: u64 = 1;
const DOMAIN_CAMERA: u64 = 2;
const DOMAIN_SAMPLE: u64 = 3;

type Rgb = [f32; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

impl Keypoint {
    /// The pixel containing the keypoint.
    pub fn pixel(&self) -> (isize, isize) {
        (Float::round(self.x) as isize, Float::round(self.y) as isize)
    }
}

/// Torso texture that helps tell identities apart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pattern {
    Plain,
    /// Horizontal stripes of the given period in rows, alternating with `accent`.
    Stripes {
        period: u8,
        accent: Rgb,
    },
    /// Left and right halves in different colours.
    Split {
        accent: Rgb,
    },
}

/// Appearance of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: u32,
    pub skin: Rgb,
    pub hair: Rgb,
    pub torso: Rgb,
    pub arms: Rgb,
    pub legs: Rgb,
    pub pattern: Pattern,
    /// Limb length multiplier.
    pub limbs: f32,
    /// Torso length multiplier.
    pub torso_len: f32,
    /// Width multiplier for torso and limbs.
    pub build: f32,
}

impl IdentitySpec {
    pub fn generate(dataset_seed: u64, id: u32) -> Self {
        let mut rng = rng_for(dataset_seed, DOMAIN_IDENTITY, u64::from(id));
        let colour = |rng: &mut ChaCha8Rng| -> Rgb {
            [
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            ]
        };
        let tone = rng.gen_range(0.35f32..0.9);
        let skin = [tone, tone * 0.8, tone * 0.65];
        let hair = {
            let d = rng.gen_range(0.05f32..0.5);
            [d, d * rng.gen_range(0.6..1.0), d * rng.gen_range(0.4..0.9)]
        };
        let torso = colour(&mut rng);
        let arms = if rng.gen_bool(0.5) { torso } else { skin };
        let legs = colour(&mut rng);
        let pattern = match rng.gen_range(0..3) {
            0 => Pattern::Plain,
            1 => Pattern::Stripes {
                period: rng.gen_range(2..5),
                accent: colour(&mut rng),
            },
            _ => Pattern::Split {
                accent: colour(&mut rng),
            },
        };
        Self {
            id,
            skin,
            hair,
            torso,
            arms,
            legs,
            pattern,
            limbs: rng.gen_range(0.92..1.02),
            torso_len: rng.gen_range(0.92..1.05),
            build: rng.gen_range(0.85..1.12),
        }
    }
}

/// Joint angles in radians (positive moves the limb away from the body) and
/// a similarity transform of the whole figure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    /// Upper-arm angle from vertical, `[left, right]`.
    pub shoulder: [f32; 2],
    /// Extra forearm angle relative to the upper arm.
    pub elbow: [f32; 2],
    /// Thigh angle from vertical.
    pub hip: [f32; 2],
    /// Extra shin angle relative to the thigh.
    pub knee: [f32; 2],
    pub dx: f32,
    pub dy: f32,
    pub scale: f32,
}

impl Pose {
    pub fn neutral() -> Self {
        Self {
            shoulder: [0.15; 2],
            elbow: [0.0; 2],
            hip: [0.08; 2],
            knee: [0.0; 2],
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
        }
    }
}

/// Sampling ranges for random poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseRanges {
    pub shoulder: (f32, f32),
    pub elbow: (f32, f32),
    pub hip: (f32, f32),
    pub knee: (f32, f32),
    pub shift_x: f32,
    pub shift_y: f32,
    pub scale: (f32, f32),
}

impl Default for PoseRanges {
    fn default() -> Self {
        Self {
            shoulder: (0.05, 0.45),
            elbow: (-0.4, 0.3),
            hip: (0.0, 0.25),
            knee: (-0.2, 0.2),
            shift_x: 1.5,
            shift_y: 1.0,
            scale: (0.93, 1.02),
        }
    }
}

impl PoseRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> Pose {
        let mut pick = |r: (f32, f32)| if r.0 < r.1 { rng.gen_range(r.0..=r.1) } else { r.0 };
        let shoulder = [pick(self.shoulder), pick(self.shoulder)];
        let elbow = [pick(self.elbow), pick(self.elbow)];
        let hip = [pick(self.hip), pick(self.hip)];
        let knee = [pick(self.knee), pick(self.knee)];
        let scale = pick(self.scale);
        let dx = pick((-self.shift_x, self.shift_x));
        let dy = pick((-self.shift_y, self.shift_y));
        Pose {
            shoulder,
            elbow,
            hip,
            knee,
            dx,
            dy,
            scale,
        }
    }
}

/// Per-camera colour response.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraStyle {
    pub camera: u32,
    pub gain: Rgb,
    pub offset: f32,
}

impl CameraStyle {
    pub fn for_camera(dataset_seed: u64, camera: u32) -> Self {
        let mut rng = rng_for(dataset_seed, DOMAIN_CAMERA, u64::from(camera));
        Self {
            camera,
            gain: [
                rng.gen_range(0.8..1.2),
                rng.gen_range(0.8..1.2),
                rng.gen_range(0.8..1.2),
            ],
            offset: rng.gen_range(-0.06..0.06),
        }
    }

    pub fn identity(camera: u32) -> Self {
        Self {
            camera,
            gain: [1.0; 3],
            offset: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
    pub colour: Rgb,
}

/// Textured gradient with distractor blobs.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundStyle {
    pub from: Rgb,
    pub to: Rgb,
    /// Gradient direction in radians.
    pub angle: f32,
    pub texture_freq: f32,
    pub texture_amp: f32,
    pub blobs: Vec<Blob>,
}

impl BackgroundStyle {
    /// A random background; `clutter` in `[0, 1]` scales colour contrast
    /// against a grey base and the number of distractor blobs.
    pub fn random(rng: &mut impl Rng, clutter: f32) -> Self {
        let grey = rng.gen_range(0.3f32..0.7);
        let colour = |rng: &mut dyn rand::RngCore| -> Rgb {
            let mut c = [0.0; 3];
            for v in &mut c {
                *v = grey + clutter * (rng.gen_range(0.0f32..1.0) - grey);
            }
            c
        };
        let from = colour(rng);
        let to = colour(rng);
        let angle = rng.gen_range(0.0..core::f32::consts::TAU);
        let texture_freq = rng.gen_range(0.3..1.2);
        let texture_amp = clutter * rng.gen_range(0.02..0.12);
        let max_blobs = Float::round(clutter * 4.0) as usize;
        let count = rng.gen_range(0..=max_blobs);
        let blobs = (0..count)
            .map(|_| Blob {
                cx: rng.gen_range(0.0..IMAGE_W as f32),
                cy: rng.gen_range(0.0..IMAGE_H as f32),
                rx: rng.gen_range(2.0..6.0),
                ry: rng.gen_range(2.0..9.0),
                colour: colour(rng),
            })
            .collect();
        Self {
            from,
            to,
            angle,
            texture_freq,
            texture_amp,
            blobs,
        }
    }

    /// A flat grey field without texture or blobs.
    pub fn plain(level: f32) -> Self {
        Self {
            from: [level; 3],
            to: [level; 3],
            angle: 0.0,
            texture_freq: 0.0,
            texture_amp: 0.0,
            blobs: Vec::new(),
        }
    }

    fn colour_at(&self, u: f32, v: f32) -> Rgb {
        let (s, c) = (Float::sin(self.angle), Float::cos(self.angle));
        let cu = u - IMAGE_W as f32 / 2.0;
        let cv = v - IMAGE_H as f32 / 2.0;
        let t = ((cu * c + cv * s) / IMAGE_H as f32 + 0.5).clamp(0.0, 1.0);
        let tex = self.texture_amp * Float::sin(u * self.texture_freq) * Float::cos(v * self.texture_freq * 0.7);
        let out: Rgb = core::array::from_fn(|ch| self.from[ch] + (self.to[ch] - self.from[ch]) * t + tex);
        for b in self.blobs.iter().rev() {
            let du = (u - b.cx) / b.rx;
            let dv = (v - b.cy) / b.ry;
            if du * du + dv * dv <= 1.0 {
                return b.colour;
            }
        }
        out
    }
}

/// One labelled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]`, 1 on the body.
    pub mask: Tensor<f32>,
    pub keypoints: [Keypoint; NUM_KEYPOINTS],
    pub identity: u32,
    pub camera: u32,
    pub pose: Pose,
}

impl Sample {
    pub fn visible_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.visible).count()
    }

    pub fn mask_at(&self, u: isize, v: isize) -> bool {
        if u < 0 || v < 0 || u as usize >= IMAGE_W || v as usize >= IMAGE_H {
            return false;
        }
        self.mask.data()[v as usize * IMAGE_W + u as usize] > 0.5
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32 },
    Capsule { a: (f32, f32), b: (f32, f32), r: f32 },
}

impl Shape {
    fn contains(&self, u: f32, v: f32) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let du = (u - cx) / rx;
                let dv = (v - cy) / ry;
                du * du + dv * dv <= 1.0
            }
            Shape::Capsule { a, b, r } => {
                let (ex, ey) = (b.0 - a.0, b.1 - a.1);
                let len2 = ex * ex + ey * ey;
                let t = if len2 > 0.0 {
                    (((u - a.0) * ex + (v - a.1) * ey) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (a.0 + t * ex - u, a.1 + t * ey - v);
                px * px + py * py <= r * r
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Legs,
    Torso,
    Arms,
    Skin,
    Hair,
}

struct Skeleton {
    keypoints: [(f32, f32); NUM_KEYPOINTS],
    shapes: Vec<(Shape, Part)>,
}

fn skeleton(spec: &IdentitySpec, pose: &Pose) -> Skeleton {
    let s = pose.scale;
    let b = spec.build;
    let pelvis = (16.0 + pose.dx, 34.0 + pose.dy);
    let neck = (pelvis.0, pelvis.1 - 18.0 * s * spec.torso_len);
    let head = (neck.0, neck.1 - 6.0 * s);
    let at = |o: (f32, f32), dx: f32, dy: f32| (o.0 + dx, o.1 + dy);
    // side: +1 for the person's left (image right), -1 for the right.
    let limb = |o: (f32, f32), side: f32, angle: f32, len: f32| {
        (o.0 + side * len * Float::sin(angle), o.1 + len * Float::cos(angle))
    };

    let shoulder = [at(neck, 5.0 * s * b, 1.5 * s), at(neck, -5.0 * s * b, 1.5 * s)];
    let hip = [at(pelvis, 3.0 * s * b, 0.0), at(pelvis, -3.0 * s * b, 0.0)];
    let mut elbow = [(0.0, 0.0); 2];
    let mut wrist = [(0.0, 0.0); 2];
    let mut knee = [(0.0, 0.0); 2];
    let mut ankle = [(0.0, 0.0); 2];
    for (i, side) in [1.0f32, -1.0].into_iter().enumerate() {
        let upper = 9.0 * s * spec.limbs;
        let fore = 8.0 * s * spec.limbs;
        elbow[i] = limb(shoulder[i], side, pose.shoulder[i], upper);
        wrist[i] = limb(elbow[i], side, pose.shoulder[i] + pose.elbow[i], fore);
        let thigh = 13.0 * s * spec.limbs;
        let shin = 12.5 * s * spec.limbs;
        knee[i] = limb(hip[i], side, pose.hip[i], thigh);
        ankle[i] = limb(knee[i], side, pose.hip[i] + pose.knee[i], shin);
    }

    let keypoints = [
        at(head, 0.0, 1.0 * s),
        at(head, 1.6 * s, -0.6 * s),
        at(head, -1.6 * s, -0.6 * s),
        at(head, 3.3 * s, 0.0),
        at(head, -3.3 * s, 0.0),
        shoulder[0],
        shoulder[1],
        elbow[0],
        elbow[1],
        wrist[0],
        wrist[1],
        hip[0],
        hip[1],
        knee[0],
        knee[1],
        ankle[0],
        ankle[1],
    ];

    let arm_r = (1.7 * s * b).max(1.5);
    let leg_r = (2.2 * s * b).max(1.6);
    let mut shapes = Vec::with_capacity(16);
    for i in 0..2 {
        shapes.push((
            Shape::Capsule {
                a: hip[i],
                b: knee[i],
                r: leg_r,
            },
            Part::Legs,
        ));
        shapes.push((
            Shape::Capsule {
                a: knee[i],
                b: ankle[i],
                r: leg_r * 0.9,
            },
            Part::Legs,
        ));
    }
    shapes.push((
        Shape::Capsule {
            a: hip[0],
            b: hip[1],
            r: leg_r + 0.3,
        },
        Part::Legs,
    ));
    let torso_top = shoulder[0].1;
    shapes.push((
        Shape::Ellipse {
            cx: (neck.0 + pelvis.0) / 2.0,
            cy: (torso_top + pelvis.1) / 2.0,
            rx: 5.5 * s * b,
            ry: (pelvis.1 - torso_top) / 2.0 + 1.5,
        },
        Part::Torso,
    ));
    shapes.push((
        Shape::Capsule {
            a: shoulder[0],
            b: shoulder[1],
            r: 2.2 * s,
        },
        Part::Torso,
    ));
    shapes.push((
        Shape::Capsule {
            a: neck,
            b: at(neck, 0.0, -2.0 * s),
            r: 1.3 * s,
        },
        Part::Skin,
    ));
    for i in 0..2 {
        shapes.push((
            Shape::Capsule {
                a: shoulder[i],
                b: elbow[i],
                r: arm_r,
            },
            Part::Arms,
        ));
        shapes.push((
            Shape::Capsule {
                a: elbow[i],
                b: wrist[i],
                r: arm_r * 0.9,
            },
            Part::Arms,
        ));
        shapes.push((
            Shape::Ellipse {
                cx: wrist[i].0,
                cy: wrist[i].1,
                rx: arm_r,
                ry: arm_r,
            },
            Part::Skin,
        ));
    }
    shapes.push((
        Shape::Ellipse {
            cx: head.0,
            cy: head.1,
            rx: 4.2 * s,
            ry: 5.2 * s,
        },
        Part::Skin,
    ));
    shapes.push((
        Shape::Ellipse {
            cx: head.0,
            cy: head.1 - 3.4 * s,
            rx: 4.0 * s,
            ry: 2.2 * s,
        },
        Part::Hair,
    ));
    Skeleton { keypoints, shapes }
}

/// Draws `spec` in `pose` over `background`, as seen by `camera`.
///
/// `seed` drives the per-pixel shading noise only, so the same arguments
/// always yield the same sample.
pub fn render_person(
    spec: &IdentitySpec,
    pose: &Pose,
    camera: &CameraStyle,
    background: &BackgroundStyle,
    seed: u64,
) -> Result<Sample> {
    let sk = skeleton(spec, pose);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = IMAGE_H * IMAGE_W;
    let mut image = Tensor::zeros(&[3, IMAGE_H, IMAGE_W]);
    let mut mask = Tensor::zeros(&[1, IMAGE_H, IMAGE_W]);
    let torso_cx = sk.keypoints[5].0 * 0.5 + sk.keypoints[6].0 * 0.5;
    for v in 0..IMAGE_H {
        for u in 0..IMAGE_W {
            let (fu, fv) = (u as f32, v as f32);
            let hit = sk
                .shapes
                .iter()
                .rev()
                .find(|(sh, _)| sh.contains(fu, fv))
                .map(|&(_, p)| p);
            let mut rgb = match hit {
                None => background.colour_at(fu, fv),
                Some(part) => {
                    mask.data_mut()[v * IMAGE_W + u] = 1.0;
                    match part {
                        Part::Legs => spec.legs,
                        Part::Arms => spec.arms,
                        Part::Skin => spec.skin,
                        Part::Hair => spec.hair,
                        Part::Torso => match spec.pattern {
                            Pattern::Plain => spec.torso,
                            Pattern::Stripes { period, accent } => {
                                if (v / period as usize).is_multiple_of(2) {
                                    spec.torso
                                } else {
                                    accent
                                }
                            }
                            Pattern::Split { accent } => {
                                if fu < torso_cx {
                                    spec.torso
                                } else {
                                    accent
                                }
                            }
                        },
                    }
                }
            };
            let shade: f32 = 1.0 + rng.gen_range(-0.05..0.05);
            for (ch, c) in rgb.iter_mut().enumerate() {
                *c = (*c * shade * camera.gain[ch] + camera.offset).clamp(0.0, 1.0);
            }
            for (ch, c) in rgb.iter().enumerate() {
                image.data_mut()[ch * plane + v * IMAGE_W + u] = *c;
            }
        }
    }
    if mask.data().iter().all(|&m| m == 0.0) {
        return Err(Error::Generation(format!(
            "pose places identity {} entirely outside the {IMAGE_H}x{IMAGE_W} frame",
            spec.id
        )));
    }
    let mut keypoints = [Keypoint {
        x: 0.0,
        y: 0.0,
        visible: false,
    }; NUM_KEYPOINTS];
    let mut sample = Sample {
        image,
        mask,
        keypoints,
        identity: spec.id,
        camera: camera.camera,
        pose: *pose,
    };
    for (k, &(x, y)) in sk.keypoints.iter().enumerate() {
        keypoints[k] = Keypoint { x, y, visible: false };
        let (pu, pv) = keypoints[k].pixel();
        keypoints[k].visible = sample.mask_at(pu, pv);
    }
    sample.keypoints = keypoints;
    Ok(sample)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Top,
    Bottom,
    Left,
    Right,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Top, Side::Bottom, Side::Left, Side::Right];

    pub fn name(self) -> &'static str {
        match self {
            Side::Top => "top",
            Side::Bottom => "bottom",
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|side| side.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown occlusion side `{s}` (top, bottom, left, right)")))
    }
}

/// How an occluded strip is painted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Solid(Rgb),
    /// Uniform noise from the given seed.
    Noise(u64),
}

/// Covers a strip of `ceil(fraction * extent)` rows or columns (at least one)
/// on `side`. Keypoints under the strip become invisible and the mask is
/// cleared there; labels are untouched.
pub fn occlude(sample: &Sample, fraction: f64, side: Side, fill: Fill) -> Result<Sample> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "occlusion fraction {fraction} must lie in (0, 1)"
        )));
    }
    let extent = match side {
        Side::Top | Side::Bottom => IMAGE_H,
        Side::Left | Side::Right => IMAGE_W,
    };
    let strip = (Float::ceil(fraction * extent as f64) as usize).clamp(1, extent);
    let covered = |u: usize, v: usize| match side {
        Side::Top => v < strip,
        Side::Bottom => v >= IMAGE_H - strip,
        Side::Left => u < strip,
        Side::Right => u >= IMAGE_W - strip,
    };
    let mut out = sample.clone();
    let mut rng = match fill {
        Fill::Noise(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        Fill::Solid(_) => None,
    };
    let plane = IMAGE_H * IMAGE_W;
    for v in 0..IMAGE_H {
        for u in 0..IMAGE_W {
            if !covered(u, v) {
                continue;
            }
            let i = v * IMAGE_W + u;
            out.mask.data_mut()[i] = 0.0;
            for ch in 0..3 {
                out.image.data_mut()[ch * plane + i] = match (&mut rng, fill) {
                    (Some(r), _) => r.gen_range(0.0..1.0),
                    (None, Fill::Solid(c)) => c[ch],
                    (None, Fill::Noise(_)) => unreachable!(),
                };
            }
        }
    }
    for kp in out.keypoints.iter_mut() {
        let (pu, pv) = kp.pixel();
        let (cu, cv) = (
            pu.clamp(0, IMAGE_W as isize - 1) as usize,
            pv.clamp(0, IMAGE_H as isize - 1) as usize,
        );
        if covered(cu, cv) {
            kp.visible = false;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

/// Query occlusion applied at generation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryOcclusion {
    pub fraction: f64,
    pub side: Side,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub num_ids: u32,
    /// Identities `0..train_ids` train; the rest are test identities.
    pub train_ids: u32,
    pub images_per_id: u32,
    pub cameras: u32,
    pub seed: u64,
    pub pose: PoseRanges,
    /// Background clutter strength in `[0, 1]`.
    pub clutter: f32,
    pub query_occlusion: Option<QueryOcclusion>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_ids: 64,
            train_ids: 32,
            images_per_id: 20,
            cameras: 4,
            seed: 0,
            pose: PoseRanges::default(),
            clutter: 1.0,
            query_occlusion: None,
        }
    }
}

/// Everything needed to render one image of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleSpec {
    pub split: Split,
    pub identity: u32,
    pub camera: u32,
    /// Global image index; seeds pose, background and noise.
    pub index: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPlan {
    pub config: DatasetConfig,
    pub entries: Vec<SampleSpec>,
}

impl DatasetPlan {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleSpec> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Assigns every image an identity, camera and split.
///
/// Image `i` of an identity is seen by camera `(i + id) mod cameras`. Each
/// test identity contributes its first image from each of two distinct
/// cameras as queries; all its other images form the gallery.
pub fn plan_dataset(config: &DatasetConfig) -> Result<DatasetPlan> {
    let c = config;
    if c.num_ids < 2 || c.train_ids < 1 || c.train_ids >= c.num_ids {
        return Err(Error::Config(format!(
            "need at least one train and one test identity, got {} ids with {} for training",
            c.num_ids, c.train_ids
        )));
    }
    if c.images_per_id < 4 {
        return Err(Error::Config(format!("images_per_id {} is below 4", c.images_per_id)));
    }
    if c.cameras < 2 {
        return Err(Error::Config(format!(
            "{} camera(s); cross-camera retrieval needs at least 2",
            c.cameras
        )));
    }
    if !(0.0..=1.0).contains(&c.clutter) {
        return Err(Error::Config(format!("clutter {} must lie in [0, 1]", c.clutter)));
    }
    if let Some(q) = c.query_occlusion {
        if !(q.fraction > 0.0 && q.fraction < 1.0) {
            return Err(Error::Config(format!(
                "occlusion fraction {} must lie in (0, 1)",
                q.fraction
            )));
        }
    }
    let mut entries = Vec::with_capacity((c.num_ids * c.images_per_id) as usize);
    let mut index = 0u64;
    for id in 0..c.num_ids {
        let mut queried = Vec::new();
        for i in 0..c.images_per_id {
            let camera = (i + id) % c.cameras;
            let split = if id < c.train_ids {
                Split::Train
            } else if queried.len() < 2 && !queried.contains(&camera) {
                queried.push(camera);
                Split::Query
            } else {
                Split::Gallery
            };
            entries.push(SampleSpec {
                split,
                identity: id,
                camera,
                index,
            });
            index += 1;
        }
    }
    Ok(DatasetPlan {
        config: config.clone(),
        entries,
    })
}

/// Renders one planned image; a pure function of the config and the spec.
pub fn render_entry(config: &DatasetConfig, entry: &SampleSpec) -> Result<Sample> {
    let identity = IdentitySpec::generate(config.seed, entry.identity);
    let camera = CameraStyle::for_camera(config.seed, entry.camera);
    let mut rng = rng_for(config.seed, DOMAIN_SAMPLE, entry.index);
    let pose = config.pose.sample(&mut rng);
    let background = BackgroundStyle::random(&mut rng, config.clutter);
    let noise_seed: u64 = rng.gen();
    let sample = render_person(&identity, &pose, &camera, &background, noise_seed)?;
    match (entry.split, config.query_occlusion) {
        (Split::Query, Some(q)) => occlude(&sample, q.fraction, q.side, Fill::Noise(rng.gen())),
        _ => Ok(sample),
    }
}

/// Horizontal stripe `p` of `parts` equal stripes; sizes differ by at most one row.
pub fn stripe_rows(height: usize, parts: usize, p: usize) -> core::ops::Range<usize> {
    (p * height / parts)..((p + 1) * height / parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neutral_sample() -> Sample {
        let spec = IdentitySpec::generate(3, 5);
        render_person(
            &spec,
            &Pose::neutral(),
            &CameraStyle::identity(0),
            &BackgroundStyle::plain(0.5),
            9,
        )
        .unwrap()
    }

    #[test]
    fn neutral_ankles_are_mirror_symmetric() {
        let s = neutral_sample();
        let (l, r) = (s.keypoints[15], s.keypoints[16]);
        let axis = s.pose.dx + 16.0;
        assert!(((l.x - axis) + (r.x - axis)).abs() < 1.0);
        assert!((l.y - r.y).abs() < 1.0);
        assert_eq!(s.visible_count(), NUM_KEYPOINTS);
    }

    #[test]
    fn far_translation_is_a_generation_error() {
        let spec = IdentitySpec::generate(3, 5);
        let mut pose = Pose::neutral();
        pose.dx = 200.0;
        let r = render_person(&spec, &pose, &CameraStyle::identity(0), &BackgroundStyle::plain(0.5), 1);
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn stripes_cover_rows() {
        let mut next = 0;
        for p in 0..6 {
            let r = stripe_rows(64, 6, p);
            assert_eq!(r.start, next);
            assert!(r.len() == 10 || r.len() == 11);
            next = r.end;
        }
        assert_eq!(next, 64);
    }
}
