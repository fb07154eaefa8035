//! Datasets on disk.
//!
//! ```text
//! <root>/dataset.txt          generator settings (key = value)
//! <root>/<split>.txt          one record per image:
//!                             path identity camera x1 y1 v1 ... x17 y17 v17
//! <root>/<split>/<n>.ppm      image
//! <root>/<split>/<n>.mask.pgm body mask
//! ```
//!
//! Paths in manifests are relative to the root.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use daaf_core::model::NUM_KEYPOINTS;
use daaf_core::synth::{plan_dataset, render_entry, DatasetConfig, Keypoint, Pose, Sample, Split};
use daaf_core::training::TrainSet;
use daaf_core::Tensor;
use sha2::{Digest, Sha256};

use crate::config::{dataset_config_from_str, dataset_config_to_string};
use crate::pnm::Pnm;

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub path: String,
    pub identity: u32,
    pub camera: u32,
    pub keypoints: [Keypoint; NUM_KEYPOINTS],
}

impl Record {
    pub fn to_line(&self) -> String {
        let mut s = format!("{} {} {}", self.path, self.identity, self.camera);
        for k in &self.keypoints {
            s.push_str(&format!(" {} {} {}", k.x, k.y, u8::from(k.visible)));
        }
        s
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        ensure!(
            f.len() == 3 + 3 * NUM_KEYPOINTS,
            "expected {} fields, found {}",
            3 + 3 * NUM_KEYPOINTS,
            f.len()
        );
        let mut keypoints = [Keypoint {
            x: 0.0,
            y: 0.0,
            visible: false,
        }; NUM_KEYPOINTS];
        for (k, kp) in keypoints.iter_mut().enumerate() {
            let g = &f[3 + 3 * k..6 + 3 * k];
            kp.x = g[0].parse().with_context(|| format!("keypoint {k} x `{}`", g[0]))?;
            kp.y = g[1].parse().with_context(|| format!("keypoint {k} y `{}`", g[1]))?;
            kp.visible = match g[2] {
                "0" => false,
                "1" => true,
                v => bail!("keypoint {k} visibility `{v}` is not 0 or 1"),
            };
        }
        Ok(Self {
            path: f[0].to_string(),
            identity: f[1].parse().with_context(|| format!("identity `{}`", f[1]))?,
            camera: f[2].parse().with_context(|| format!("camera `{}`", f[2]))?,
            keypoints,
        })
    }

    pub fn mask_path(&self) -> String {
        mask_path_for(&self.path)
    }
}

fn mask_path_for(image: &str) -> String {
    match image.strip_suffix(".ppm") {
        Some(stem) => format!("{stem}.mask.pgm"),
        None => format!("{image}.mask.pgm"),
    }
}

pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.txt", split.name()))
}

/// What [`write_dataset`] produced.
#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub counts: [usize; 3],
    /// SHA-256 over the three manifests, in split order.
    pub manifest_hash: String,
}

/// Renders every image of `config` under `root`.
pub fn write_dataset(config: &DatasetConfig, root: &Path) -> Result<DatasetSummary> {
    let plan = plan_dataset(config).map_err(|e| anyhow::anyhow!("{e}"))?;
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    fs::write(root.join("dataset.txt"), dataset_config_to_string(config))
        .with_context(|| format!("writing {}", root.join("dataset.txt").display()))?;
    let mut counts = [0; 3];
    let mut hasher = Sha256::new();
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut manifest = String::new();
        for e in plan.split(split) {
            let s = render_entry(config, e).map_err(|err| anyhow::anyhow!("rendering image {}: {err}", e.index))?;
            let rel = format!("{}/{:06}.ppm", split.name(), e.index);
            Pnm::from_tensor(&s.image)?.write(&root.join(&rel))?;
            Pnm::from_tensor(&s.mask)?.write(&root.join(mask_path_for(&rel)))?;
            let rec = Record {
                path: rel,
                identity: s.identity,
                camera: s.camera,
                keypoints: s.keypoints,
            };
            manifest.push_str(&rec.to_line());
            manifest.push('\n');
            counts[si] += 1;
        }
        hasher.update(manifest.as_bytes());
        let path = manifest_path(root, split);
        fs::write(&path, manifest).with_context(|| format!("writing {}", path.display()))?;
    }
    let manifest_hash = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(DatasetSummary { counts, manifest_hash })
}

pub fn read_dataset_config(root: &Path) -> Result<DatasetConfig> {
    let path = root.join("dataset.txt");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    dataset_config_from_str(&text, DatasetConfig::default()).with_context(|| format!("in {}", path.display()))
}

pub fn read_manifest(root: &Path, split: Split) -> Result<Vec<Record>> {
    let path = manifest_path(root, split);
    let text = fs::read_to_string(&path).with_context(|| format!("reading manifest {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| Record::parse(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// Loads a split as samples. The pose is not stored on disk, so loaded
/// samples carry the neutral pose.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    read_manifest(root, split)?
        .into_iter()
        .map(|r| {
            let image = Pnm::read(&root.join(&r.path))?;
            let mask = Pnm::read(&root.join(r.mask_path()))?;
            ensure!(image.channels == 3, "{} is not a colour image", r.path);
            ensure!(mask.channels == 1, "{} is not a grey mask", r.mask_path());
            let mask = mask.to_tensor();
            let mask = Tensor::from_fn(mask.shape(), |i| if mask.data()[i] > 0.5 { 1.0 } else { 0.0 });
            Ok(Sample {
                image: image.to_tensor(),
                mask,
                keypoints: r.keypoints,
                identity: r.identity,
                camera: r.camera,
                pose: Pose::neutral(),
            })
        })
        .collect()
}

/// Query, gallery and train samples rendered in memory, quantised exactly as
/// [`write_dataset`] would store them.
pub struct InMemory {
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

pub fn render_in_memory(config: &DatasetConfig) -> Result<InMemory> {
    let plan = plan_dataset(config).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut out = InMemory {
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
    };
    for e in &plan.entries {
        let mut s = render_entry(config, e).map_err(|err| anyhow::anyhow!("rendering image {}: {err}", e.index))?;
        s.image = Pnm::from_tensor(&s.image)?.to_tensor();
        match e.split {
            Split::Train => out.train.push(s),
            Split::Query => out.query.push(s),
            Split::Gallery => out.gallery.push(s),
        }
    }
    Ok(out)
}

pub fn train_set(samples: &[Sample]) -> TrainSet {
    TrainSet::from_samples(samples)
}
