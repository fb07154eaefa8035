//! Command-line entry point.
//!
//! Exit codes: 0 on success (including `--help`), 1 on usage errors, 2 on
//! runtime errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use daaf_core::attention::{ProbeLayer, Prober};
use daaf_core::model::ModelBundle;
use daaf_core::probes::{hab_iou, pab_peak_accuracy, MATCH_RADIUS};
use daaf_core::synth::{DatasetConfig, Sample, Side, Split};
use daaf_core::training::TrainConfig;

use crate::config::{dataset_config_from_str, load_train_config, parse_margin};
use crate::dataset::{load_split, read_dataset_config, train_set, write_dataset, InMemory};
use crate::eval::{cmc_csv, encode_distmat, evaluate, occlusion_csv, occlusion_eval, report_csv, write_text};
use crate::experiments::{ablate, branch_out, shuffle_report, write_ablation, Suite};
use crate::train::{read_checkpoint, train};
use crate::viz::export_heatmap;

#[derive(Parser, Debug)]
#[command(
    name = "daaf",
    version,
    about = "Attention-aware person re-identification on synthetic data"
)]
pub struct Cli {
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` configuration file (training, or dataset for gen-data).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset with manifests.
    GenData(GenData),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Score a checkpoint on the query and gallery splits.
    Eval(EvalArgs),
    /// Export attention heatmaps for query samples.
    Viz(VizArgs),
    /// Export HAB masks and PAB heatmaps next to ground truth.
    BranchOut(SampleArgs),
    /// Run an ablation suite over several seeds.
    Ablate(AblateArgs),
    /// Feed each channel group through every PAB head.
    Shuffle(SampleArgs),
}

#[derive(Args, Debug)]
pub struct GenData {
    /// Identities in total (default 64).
    #[arg(long)]
    pub ids: Option<u32>,
    /// Identities used for training; half of --ids when omitted.
    #[arg(long)]
    pub train_ids: Option<u32>,
    /// Images per identity (default 20).
    #[arg(long)]
    pub per_id: Option<u32>,
    /// Number of cameras (default 4).
    #[arg(long)]
    pub cameras: Option<u32>,
    /// Background clutter level in [0, 1] (default 1).
    #[arg(long)]
    pub clutter: Option<f32>,
}

#[derive(Args, Debug)]
pub struct DataArg {
    /// Dataset directory written by gen-data.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Training steps, overriding the configuration.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckpointArg {
    /// Checkpoint written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub ck: CheckpointArg,
    /// Also evaluate with this fraction of every query occluded.
    #[arg(long)]
    pub occlusion: Option<f64>,
    /// Occluded side: top, bottom, left or right.
    #[arg(long, default_value = "bottom")]
    pub side: String,
    /// Dump the distance matrix as binary.
    #[arg(long)]
    pub distmat: bool,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub ck: CheckpointArg,
    /// Query samples to visualise.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    /// block1 or block4.
    #[arg(long, default_value = "block1")]
    pub layer: String,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub ck: CheckpointArg,
    /// Query samples to use; all when omitted.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// hab-pab, grouping, sharing or supervision.
    #[arg(long)]
    pub suite: String,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Training steps per run, overriding the configuration.
    #[arg(long)]
    pub steps: Option<usize>,
    /// soft, hard or hard:<m>.
    #[arg(long)]
    pub margin: Option<String>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut c = match &cli.config {
        Some(path) => load_train_config(path, TrainConfig::default())?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        c.seed = seed;
    }
    Ok(c)
}

fn load_bundle(path: &Path) -> Result<ModelBundle<f32>> {
    read_checkpoint(path)?
        .bundle()
        .with_context(|| format!("loading model from {}", path.display()))
}

fn queries(data: &Path, limit: Option<usize>) -> Result<Vec<Sample>> {
    let mut q = load_split(data, Split::Query)?;
    if let Some(n) = limit {
        q.truncate(n);
    }
    if q.is_empty() {
        bail!("no query samples in {}", data.display());
    }
    Ok(q)
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData(a) => {
            let mut c = match &cli.config {
                Some(path) => {
                    let text =
                        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                    dataset_config_from_str(&text, DatasetConfig::default())
                        .with_context(|| format!("in config {}", path.display()))?
                }
                None => DatasetConfig::default(),
            };
            c.num_ids = a.ids.unwrap_or(c.num_ids);
            c.images_per_id = a.per_id.unwrap_or(c.images_per_id);
            c.cameras = a.cameras.unwrap_or(c.cameras);
            c.clutter = a.clutter.unwrap_or(c.clutter);
            c.seed = cli.seed.unwrap_or(c.seed);
            c.train_ids = a
                .train_ids
                .unwrap_or(if a.ids.is_some() { c.num_ids / 2 } else { c.train_ids });
            let s = write_dataset(&c, out)?;
            println!(
                "wrote {} train, {} query, {} gallery images to {}",
                s.counts[0],
                s.counts[1],
                s.counts[2],
                out.display()
            );
            println!("manifest sha256 {}", s.manifest_hash);
        }
        Command::Train(a) => {
            let mut c = train_config(cli)?;
            if let Some(steps) = a.steps {
                c.steps = steps;
            }
            c.validate()?;
            let set = train_set(&load_split(&a.data.data, Split::Train)?);
            let run = train(&c, &set, Some(out), a.resume.as_deref())?;
            if let Some(last) = run.losses.last() {
                println!(
                    "step {}: total {:.5} reid {:.5} mask {:.5} keypoint {:.5} ({:.1} s)",
                    run.trainer.step_count(),
                    last.total,
                    last.reid,
                    last.mask,
                    last.keypoint,
                    run.seconds
                );
            }
            println!("checkpoint {}", out.join("final.daaf").display());
        }
        Command::Eval(a) => {
            let bundle = load_bundle(&a.ck.checkpoint)?;
            let q = load_split(&a.data.data, Split::Query)?;
            let g = load_split(&a.data.data, Split::Gallery)?;
            create_out(out)?;
            let ev = evaluate(&bundle, &q, &g)?;
            write_text(&out.join("report.csv"), &report_csv(&ev.report))?;
            write_text(&out.join("cmc.csv"), &cmc_csv(&ev.report))?;
            if a.distmat {
                let path = out.join("distmat.bin");
                fs::write(&path, encode_distmat(&ev.distmat)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if ev.report.skipped > 0 {
                eprintln!(
                    "warning: {} queries have no cross-camera match and were skipped",
                    ev.report.skipped
                );
            }
            println!("mAP {:.4} rank-1 {:.4}", ev.report.map, ev.report.rank1());
            if let Some(fraction) = a.occlusion {
                let side = Side::parse(&a.side)?;
                let o = occlusion_eval(&bundle, &q, &g, fraction, side, cli.seed.unwrap_or(0))?;
                write_text(&out.join("occlusion.csv"), &occlusion_csv(&o))?;
                println!("occluded rank-1 {:.4} (drop {:.4})", o.occluded.rank1(), o.rank1_drop());
            }
        }
        Command::Viz(a) => {
            let bundle = load_bundle(&a.ck.checkpoint)?;
            let layer = ProbeLayer::parse(&a.layer)?;
            create_out(out)?;
            let samples = queries(&a.data.data, Some(a.samples))?;
            let mut written = 0;
            for (n, s) in samples.iter().enumerate() {
                let prober = Prober::new(&bundle, &s.image)?;
                let mut maps = vec![("holistic".to_string(), prober.holistic_map()?.values)];
                if layer == ProbeLayer::Block4 {
                    let all: Vec<usize> = (0..bundle.config.embed_dim).collect();
                    let comps = prober.component_maps(layer, &all)?;
                    maps[0].1 = daaf_core::attention::mean_map(&comps)?;
                }
                for g in 0..bundle.config.num_groups() {
                    maps.push((format!("group{g}"), prober.partial_map(g)?.values));
                }
                for (label, map) in maps {
                    let stem = format!("{n:04}_id{}_{}_{label}", s.identity, layer.name());
                    let pgm = out.join(format!("{stem}.pgm"));
                    let ppm = out.join(format!("{stem}_overlay.ppm"));
                    if export_heatmap(&map, &pgm, Some((&s.image, &ppm)))? {
                        eprintln!("warning: {} is constant; written as zeros", pgm.display());
                    }
                    written += 2;
                }
            }
            println!("wrote {written} files to {}", out.display());
        }
        Command::BranchOut(a) => {
            let bundle = load_bundle(&a.ck.checkpoint)?;
            let samples = queries(&a.data.data, a.samples)?;
            create_out(out)?;
            let sigma = train_config(cli)?.sigma;
            let n = branch_out(&bundle, &samples, out, sigma)?;
            println!(
                "wrote {n} prediction files (ground truth under {})",
                out.join("gt").display()
            );
            println!("hab iou {:.4}", hab_iou(&bundle, &samples)?);
            if let Ok(acc) = pab_peak_accuracy(&bundle, &samples, MATCH_RADIUS) {
                println!("pab peak accuracy {acc:.4}");
            }
        }
        Command::Ablate(a) => {
            let suite = Suite::parse(&a.suite)?;
            let mut base = train_config(cli)?;
            if let Some(steps) = a.steps {
                base.steps = steps;
            }
            if let Some(m) = &a.margin {
                base.weights.margin = parse_margin(m)?;
            }
            base.validate()?;
            if a.seeds.is_empty() {
                bail!("at least one seed is needed");
            }
            let dataset = read_dataset_config(&a.data.data)?;
            let data = InMemory {
                train: load_split(&a.data.data, Split::Train)?,
                query: load_split(&a.data.data, Split::Query)?,
                gallery: load_split(&a.data.data, Split::Gallery)?,
            };
            create_out(out)?;
            let table = ablate(suite, &base, &dataset, &data, &a.seeds, |name, seed, r| match r {
                Ok(m) => eprintln!("{name} seed {seed}: mAP {:.4} rank-1 {:.4}", m.map, m.rank1),
                Err(e) => eprintln!("{name} seed {seed}: failed: {e}"),
            });
            write_ablation(&table, out)?;
            print!("{}", table.csv());
        }
        Command::Shuffle(a) => {
            let bundle = load_bundle(&a.ck.checkpoint)?;
            let samples = queries(&a.data.data, a.samples)?;
            create_out(out)?;
            let (_, matrices, summary) = shuffle_report(&bundle, &samples, MATCH_RADIUS)?;
            write_text(&out.join("shuffle.csv"), &matrices)?;
            write_text(&out.join("shuffle-summary.csv"), &summary)?;
            print!("{summary}");
        }
    }
    Ok(())
}
