//! Ablation suites, branch-output dumps and the shuffle probe.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use daaf_core::model::{DecoderSharing, GroupingKind, ModelBundle, PabTarget, KEYPOINT_NAMES};
use daaf_core::probes::{branch_outputs, random_peak_rate, shuffle_probe, ShuffleMatrix};
use daaf_core::synth::{DatasetConfig, Sample};
use daaf_core::training::{heatmap_targets, part_image_targets, stack, TrainConfig};
use daaf_core::Tensor;

use crate::config::{dataset_config_to_string, train_config_to_string};
use crate::dataset::{train_set, InMemory};
use crate::eval::{evaluate, write_text};
use crate::pnm::Pnm;
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    HabPab,
    Grouping,
    Sharing,
    Supervision,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::HabPab, Suite::Grouping, Suite::Sharing, Suite::Supervision];

    pub fn name(self) -> &'static str {
        match self {
            Suite::HabPab => "hab-pab",
            Suite::Grouping => "grouping",
            Suite::Sharing => "sharing",
            Suite::Supervision => "supervision",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match Self::ALL.into_iter().find(|x| x.name() == s) {
            Some(x) => Ok(x),
            None => bail!("unknown suite `{s}` (hab-pab, grouping, sharing, supervision)"),
        }
    }

    /// Row names and configs; the baseline row always comes first.
    pub fn cells(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |hab: bool, pab: bool| TrainConfig {
            hab,
            pab,
            ..base.clone()
        };
        let mut rows = vec![("baseline".to_string(), with(false, false))];
        match self {
            Suite::HabPab => {
                rows.push(("+hab".into(), with(true, false)));
                rows.push(("+pab".into(), with(false, true)));
                rows.push(("+both".into(), with(true, true)));
            }
            Suite::Grouping => {
                for kind in GroupingKind::ALL_KINDS {
                    let m = kind.groups();
                    rows.push((
                        format!("m={m}"),
                        TrainConfig {
                            grouping: kind,
                            ..with(false, true)
                        },
                    ));
                }
            }
            Suite::Sharing => {
                for sharing in [DecoderSharing::Shared, DecoderSharing::Independent] {
                    rows.push((
                        crate::config::sharing_name(sharing).to_string(),
                        TrainConfig {
                            pab_decoder: sharing,
                            ..with(false, true)
                        },
                    ));
                }
            }
            Suite::Supervision => {
                for target in [PabTarget::Keypoints, PabTarget::PartImage] {
                    rows.push((
                        crate::config::target_name(target).to_string(),
                        TrainConfig {
                            pab_target: target,
                            grouping: GroupingKind::Six,
                            ..with(false, true)
                        },
                    ));
                }
            }
        }
        rows
    }
}

/// Retrieval quality of one trained cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellMetrics {
    pub map: f64,
    pub rank1: f64,
}

/// One configuration run over several seeds.
#[derive(Clone, Debug)]
pub struct ExperimentRecord {
    pub name: String,
    /// Training settings (without the seed) and dataset settings.
    pub config_snapshot: String,
    pub seeds: Vec<u64>,
    /// Per seed, the metrics or the failure message.
    pub per_seed: Vec<Result<CellMetrics, String>>,
    pub seconds: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl ExperimentRecord {
    fn completed(&self) -> impl Iterator<Item = &CellMetrics> {
        self.per_seed.iter().filter_map(|r| r.as_ref().ok())
    }

    /// Mean and sample standard deviation over completed seeds.
    pub fn aggregate(&self, metric: impl Fn(&CellMetrics) -> f64) -> (f64, f64) {
        mean_std(&self.completed().map(metric).collect::<Vec<_>>())
    }

    pub fn failures(&self) -> usize {
        self.per_seed.iter().filter(|r| r.is_err()).count()
    }

    /// Mean of `variant - baseline` over seeds where both completed.
    pub fn delta(&self, baseline: &ExperimentRecord, metric: impl Fn(&CellMetrics) -> f64) -> f64 {
        let d: Vec<f64> = self
            .per_seed
            .iter()
            .zip(&baseline.per_seed)
            .filter_map(|(v, b)| Some(metric(v.as_ref().ok()?) - metric(b.as_ref().ok()?)))
            .collect();
        mean_std(&d).0
    }
}

/// Trains `config` with `seed` on the train split and scores query against gallery.
pub fn run_cell(config: &TrainConfig, seed: u64, data: &InMemory) -> Result<CellMetrics> {
    let config = TrainConfig { seed, ..config.clone() };
    let set = train_set(&data.train);
    let run = train(&config, &set, None, None)?;
    let r = evaluate(&run.trainer.bundle, &data.query, &data.gallery)?.report;
    Ok(CellMetrics {
        map: r.map,
        rank1: r.rank1(),
    })
}

/// A finished suite: rows in [`Suite::cells`] order, baseline first.
pub struct AblationTable {
    pub suite: Suite,
    pub rows: Vec<ExperimentRecord>,
}

impl AblationTable {
    /// `row,seeds,completed,map_mean,map_std,rank1_mean,rank1_std,delta_map,delta_rank1,seconds`.
    pub fn csv(&self) -> String {
        let mut s =
            String::from("row,seeds,completed,map_mean,map_std,rank1_mean,rank1_std,delta_map,delta_rank1,seconds\n");
        let base = &self.rows[0];
        for r in &self.rows {
            let (mm, ms) = r.aggregate(|m| m.map);
            let (rm, rs) = r.aggregate(|m| m.rank1);
            let _ = writeln!(
                s,
                "{},{},{},{mm:.6},{ms:.6},{rm:.6},{rs:.6},{:.6},{:.6},{:.1}",
                r.name,
                r.seeds.len(),
                r.seeds.len() - r.failures(),
                r.delta(base, |m| m.map),
                r.delta(base, |m| m.rank1),
                r.seconds
            );
        }
        s
    }

    /// Every failed cell as `row,seed,message`.
    pub fn failures_csv(&self) -> String {
        let mut s = String::from("row,seed,message\n");
        for r in &self.rows {
            for (seed, res) in r.seeds.iter().zip(&r.per_seed) {
                if let Err(e) = res {
                    let _ = writeln!(s, "{},{seed},\"{}\"", r.name, e.replace('"', "'"));
                }
            }
        }
        s
    }
}

/// Runs every cell of `suite` for every seed. A failing cell is recorded and
/// the suite continues. `progress` sees each finished cell.
pub fn ablate(
    suite: Suite,
    base: &TrainConfig,
    dataset: &DatasetConfig,
    data: &InMemory,
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &Result<CellMetrics, String>),
) -> AblationTable {
    let rows = suite
        .cells(base)
        .into_iter()
        .map(|(name, cfg)| {
            let start = Instant::now();
            let per_seed = seeds
                .iter()
                .map(|&seed| {
                    let r = run_cell(&cfg, seed, data).map_err(|e| format!("{e:#}"));
                    progress(&name, seed, &r);
                    r
                })
                .collect();
            ExperimentRecord {
                config_snapshot: format!(
                    "# training\n{}# dataset\n{}",
                    train_config_to_string(&cfg),
                    dataset_config_to_string(dataset)
                ),
                name,
                seeds: seeds.to_vec(),
                per_seed,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    AblationTable { suite, rows }
}

/// Writes `<out>/<suite>.csv`, `<suite>-failures.csv` and one config
/// snapshot per row under `<out>/<suite>/`.
pub fn write_ablation(table: &AblationTable, out: &Path) -> Result<()> {
    let name = table.suite.name();
    let dir = out.join(name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&out.join(format!("{name}.csv")), &table.csv())?;
    write_text(&out.join(format!("{name}-failures.csv")), &table.failures_csv())?;
    for r in &table.rows {
        let file = r.name.replace(['+', '='], "");
        write_text(&dir.join(format!("{file}.txt")), &r.config_snapshot)?;
    }
    Ok(())
}

fn write_plane(data: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    let t = Tensor::new(&[1, h, w], data.to_vec())?;
    Pnm::from_tensor(&t)?.write(path)
}

fn image_of<T: daaf_core::Real>(t: &Tensor<T>, n: usize) -> Result<Tensor<f32>> {
    let [_, c, h, w] = t.dims4("image_of")?;
    let plane = c * h * w;
    Tensor::new(
        &[c, h, w],
        t.data()[n * plane..(n + 1) * plane]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect(),
    )
    .map_err(Into::into)
}

/// Writes branch predictions per sample, and ground truth under `gt/`.
///
/// Keypoint heads give one PGM per keypoint (`<n>_kp<k>_<name>.pgm`);
/// part-image heads give one PPM per stripe. Every sample also gets its HAB
/// mask (`<n>_mask.pgm`). Returns the number of prediction files.
pub fn branch_out(bundle: &ModelBundle<f32>, samples: &[Sample], out: &Path, sigma: f64) -> Result<usize> {
    let gt = out.join("gt");
    fs::create_dir_all(&gt).with_context(|| format!("creating {}", gt.display()))?;
    let cfg = &bundle.config;
    let scheme = cfg.scheme();
    let mut files = 0;
    for (c0, chunk) in samples.chunks(16).enumerate() {
        let refs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let out_b = branch_outputs(bundle, &stack(&refs)?)?;
        let [_, _, h, w] = out_b.mask.dims4("branch_out")?;
        for (n, s) in chunk.iter().enumerate() {
            let id = c0 * 16 + n;
            write_plane(
                &out_b.mask.data()[n * h * w..(n + 1) * h * w],
                h,
                w,
                &out.join(format!("{id:04}_mask.pgm")),
            )?;
            Pnm::from_tensor(&s.mask)?.write(&gt.join(format!("{id:04}_mask.pgm")))?;
            files += 1;
            match cfg.pab_target {
                PabTarget::Keypoints => {
                    for (p, part) in out_b.parts.iter().enumerate() {
                        let [_, c, _, _] = part.dims4("branch_out")?;
                        let target: Tensor<f32> = heatmap_targets(&[&s.keypoints], scheme.group(p), sigma, h, w);
                        for (j, &k) in scheme.group(p).iter().enumerate() {
                            let off = (n * c + j) * h * w;
                            let name = format!("{id:04}_kp{k:02}_{}.pgm", KEYPOINT_NAMES[k]);
                            write_plane(&part.data()[off..off + h * w], h, w, &out.join(&name))?;
                            write_plane(&target.data()[j * h * w..(j + 1) * h * w], h, w, &gt.join(&name))?;
                            files += 1;
                        }
                    }
                }
                PabTarget::PartImage => {
                    let targets = part_image_targets(&s.image, out_b.parts.len())?;
                    for (p, part) in out_b.parts.iter().enumerate() {
                        let name = format!("{id:04}_part{p}.ppm");
                        Pnm::from_tensor(&image_of(part, n)?)?.write(&out.join(&name))?;
                        Pnm::from_tensor(&targets[p])?.write(&gt.join(&name))?;
                        files += 1;
                    }
                }
            }
        }
    }
    Ok(files)
}

/// Match-rate matrices and their summary as CSV text.
pub fn shuffle_report(
    bundle: &ModelBundle<f32>,
    samples: &[Sample],
    radius: f64,
) -> Result<(ShuffleMatrix, String, String)> {
    let m = shuffle_probe(bundle, samples, radius)?;
    let mut matrices = String::from("feature_group,head_group,vs_feature,vs_head\n");
    for i in 0..m.groups {
        for j in 0..m.groups {
            let _ = writeln!(matrices, "{i},{j},{:.6},{:.6}", m.feature(i, j), m.head(i, j));
        }
    }
    let scheme = bundle.config.scheme();
    let [h, w] = [daaf_core::synth::IMAGE_H, daaf_core::synth::IMAGE_W];
    let chance: f64 = (0..m.groups)
        .map(|g| random_peak_rate(samples, scheme.group(g), radius, h, w))
        .sum::<f64>()
        / m.groups as f64;
    let mut summary = String::from("metric,value\n");
    let _ = writeln!(
        summary,
        "note,constructed quantification: peaks of head j on group i features within {radius} px of a visible keypoint"
    );
    let _ = writeln!(summary, "off_diagonal_ratio,{:.6}", m.off_diagonal_ratio());
    let _ = writeln!(summary, "decoupling_score,{:.6}", m.decoupling_score());
    let _ = writeln!(summary, "random_peak_rate,{chance:.6}");
    Ok((m, matrices, summary))
}
