//! Training runs with on-disk artifacts.
//!
//! ```text
//! <out>/config.txt        training settings
//! <out>/metrics.csv       step,total,reid,mask,keypoint,seconds
//! <out>/ckpt-<step>.daaf  periodic checkpoints
//! <out>/final.daaf        last state, resumable
//! <out>/diagnostic.daaf   state before a step whose loss went non-finite
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use daaf_core::model::checkpoint::Checkpoint;
use daaf_core::training::{StepLoss, TrainConfig, TrainSet, Trainer};
use daaf_core::Error;

use crate::config::train_config_to_string;

pub const METRICS_HEADER: &str = "step,total,reid,mask,keypoint,seconds";

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Checkpoint::decode(&bytes).with_context(|| format!("decoding checkpoint {}", path.display()))
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ck.encode()).with_context(|| format!("writing checkpoint {}", path.display()))
}

/// A finished run.
pub struct Run {
    pub trainer: Trainer<f32>,
    /// Losses of the steps taken by this call, in order.
    pub losses: Vec<StepLoss>,
    pub seconds: f64,
}

/// Trains until `config.steps` updates have been applied.
///
/// With `out`, artifacts are written there; with `resume`, training continues
/// from that checkpoint and metrics are appended.
pub fn train(config: &TrainConfig, data: &TrainSet, out: Option<&Path>, resume: Option<&Path>) -> Result<Run> {
    let mut trainer = match resume {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            Trainer::resume(config.clone(), data, &ck).with_context(|| format!("resuming from {}", path.display()))?
        }
        None => Trainer::new(config.clone(), data)?,
    };
    let mut log = match out {
        Some(dir) => Some(open_outputs(dir, config, resume.is_some())?),
        None => None,
    };
    let start = Instant::now();
    let mut losses = Vec::new();
    while (trainer.step_count() as usize) < config.steps {
        let loss = match trainer.train_step(data) {
            Ok(l) => l,
            Err(e @ Error::Numerical(_)) => {
                if let Some(dir) = out {
                    let path = dir.join("diagnostic.daaf");
                    write_checkpoint(&trainer.checkpoint(), &path)?;
                    return Err(e).with_context(|| format!("training aborted; state saved to {}", path.display()));
                }
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        losses.push(loss);
        let step = trainer.step_count() as usize;
        if let (Some((w, path)), true) = (log.as_mut(), step.is_multiple_of(config.log_interval)) {
            let secs = start.elapsed().as_secs_f64();
            writeln!(
                w,
                "{step},{},{},{},{},{secs:.3}",
                loss.total, loss.reid, loss.mask, loss.keypoint
            )
            .with_context(|| format!("writing {}", path.display()))?;
        }
        if let (Some(dir), true) = (
            out,
            config.checkpoint_interval > 0 && step.is_multiple_of(config.checkpoint_interval),
        ) {
            write_checkpoint(&trainer.checkpoint(), &dir.join(format!("ckpt-{step:06}.daaf")))?;
        }
    }
    if let (Some(dir), Some((mut w, path))) = (out, log) {
        w.flush().with_context(|| format!("writing {}", path.display()))?;
        write_checkpoint(&trainer.checkpoint(), &dir.join("final.daaf"))?;
    }
    Ok(Run {
        trainer,
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn open_outputs(dir: &Path, config: &TrainConfig, append: bool) -> Result<(BufWriter<File>, PathBuf)> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let cfg_path = dir.join("config.txt");
    fs::write(&cfg_path, train_config_to_string(config)).with_context(|| format!("writing {}", cfg_path.display()))?;
    let path = dir.join("metrics.csv");
    let fresh = !append || !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{METRICS_HEADER}").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok((w, path))
}

/// Median of the total loss over a window of steps.
pub fn median_total(losses: &[StepLoss]) -> f64 {
    let mut v: Vec<f64> = losses.iter().map(|l| l.total).collect();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
