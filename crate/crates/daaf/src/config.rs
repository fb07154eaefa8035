//! Line-oriented `key = value` configuration files.
//!
//! Blank lines and text after `#` are ignored. Unknown keys are errors so a
//! typo never silently falls back to a default.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use daaf_core::losses::Reduction;
use daaf_core::model::{DecoderSharing, GroupingKind, PabTarget};
use daaf_core::synth::{DatasetConfig, QueryOcclusion, Side};
use daaf_core::tape::TripletMargin;
use daaf_core::training::TrainConfig;

/// Ordered `(key, value)` pairs with their line numbers.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", i + 1))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| anyhow!("line {line}: invalid value `{v}` for `{key}`"))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => bail!("line {line}: `{key}` must be true or false, got `{v}`"),
    }
}

pub fn margin_name(m: TripletMargin) -> String {
    match m {
        TripletMargin::Soft => "soft".into(),
        TripletMargin::Hard(v) => format!("hard:{v}"),
    }
}

pub fn parse_margin(v: &str) -> Result<TripletMargin> {
    match v {
        "soft" => Ok(TripletMargin::Soft),
        "hard" => Ok(TripletMargin::Hard(0.3)),
        _ => match v.strip_prefix("hard:") {
            Some(m) => Ok(TripletMargin::Hard(m.parse().map_err(|_| anyhow!("bad margin `{m}`"))?)),
            None => bail!("margin must be soft, hard or hard:<m>, got `{v}`"),
        },
    }
}

pub fn sharing_name(s: DecoderSharing) -> &'static str {
    match s {
        DecoderSharing::Shared => "shared",
        DecoderSharing::Independent => "independent",
    }
}

pub fn target_name(t: PabTarget) -> &'static str {
    match t {
        PabTarget::Keypoints => "keypoints",
        PabTarget::PartImage => "part-image",
    }
}

pub fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::Norm => "norm",
        Reduction::SquaredNorm => "squared",
    }
}

/// Applies the pairs of `text` on top of `base`.
pub fn train_config_from_str(text: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut c = base;
    for (line, key, v) in parse_pairs(text)? {
        let v = v.as_str();
        match key.as_str() {
            "p" => c.p = parse(line, &key, v)?,
            "k" => c.k = parse(line, &key, v)?,
            "lr" => c.lr = parse(line, &key, v)?,
            "steps" => c.steps = parse(line, &key, v)?,
            "lambda_h" => c.weights.lambda_h = parse(line, &key, v)?,
            "lambda_p" => c.weights.lambda_p = parse(line, &key, v)?,
            "margin" => c.weights.margin = parse_margin(v).with_context(|| format!("line {line}"))?,
            "hab" => c.hab = parse_bool(line, &key, v)?,
            "pab" => c.pab = parse_bool(line, &key, v)?,
            "groups" => {
                c.grouping =
                    GroupingKind::from_groups(parse(line, &key, v)?).map_err(|e| anyhow!("line {line}: {e}"))?
            }
            "decoder" => {
                c.pab_decoder = match v {
                    "shared" => DecoderSharing::Shared,
                    "independent" => DecoderSharing::Independent,
                    _ => bail!("line {line}: decoder must be shared or independent, got `{v}`"),
                }
            }
            "supervision" => {
                c.pab_target = match v {
                    "keypoints" => PabTarget::Keypoints,
                    "part-image" => PabTarget::PartImage,
                    _ => bail!("line {line}: supervision must be keypoints or part-image, got `{v}`"),
                }
            }
            "reduction" => {
                c.reduction = match v {
                    "norm" => Reduction::Norm,
                    "squared" => Reduction::SquaredNorm,
                    _ => bail!("line {line}: reduction must be norm or squared, got `{v}`"),
                }
            }
            "sigma" => c.sigma = parse(line, &key, v)?,
            "decoder_channels" => c.decoder_channels = parse(line, &key, v)?,
            "seed" => c.seed = parse(line, &key, v)?,
            "log_interval" => c.log_interval = parse(line, &key, v)?,
            "checkpoint_interval" => c.checkpoint_interval = parse(line, &key, v)?,
            _ => bail!("line {line}: unknown training key `{key}`"),
        }
    }
    c.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(c)
}

pub fn load_train_config(path: &Path, base: TrainConfig) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    train_config_from_str(&text, base).with_context(|| format!("in config {}", path.display()))
}

/// Every training field, in a form [`train_config_from_str`] reads back exactly.
pub fn train_config_to_string(c: &TrainConfig) -> String {
    let mut s = String::new();
    let w = &c.weights;
    let _ = writeln!(s, "p = {}\nk = {}\nlr = {}\nsteps = {}", c.p, c.k, c.lr, c.steps);
    let _ = writeln!(
        s,
        "lambda_h = {}\nlambda_p = {}\nmargin = {}",
        w.lambda_h,
        w.lambda_p,
        margin_name(w.margin)
    );
    let _ = writeln!(s, "hab = {}\npab = {}\ngroups = {}", c.hab, c.pab, c.grouping.groups());
    let _ = writeln!(
        s,
        "decoder = {}\nsupervision = {}",
        sharing_name(c.pab_decoder),
        target_name(c.pab_target)
    );
    let _ = writeln!(s, "reduction = {}\nsigma = {}", reduction_name(c.reduction), c.sigma);
    let _ = writeln!(s, "decoder_channels = {}\nseed = {}", c.decoder_channels, c.seed);
    let _ = writeln!(
        s,
        "log_interval = {}\ncheckpoint_interval = {}",
        c.log_interval, c.checkpoint_interval
    );
    s
}

pub fn dataset_config_from_str(text: &str, base: DatasetConfig) -> Result<DatasetConfig> {
    let mut c = base;
    let mut occ_fraction = None;
    let mut occ_side = Side::Bottom;
    for (line, key, v) in parse_pairs(text)? {
        let v = v.as_str();
        match key.as_str() {
            "ids" => c.num_ids = parse(line, &key, v)?,
            "train_ids" => c.train_ids = parse(line, &key, v)?,
            "per_id" => c.images_per_id = parse(line, &key, v)?,
            "cameras" => c.cameras = parse(line, &key, v)?,
            "seed" => c.seed = parse(line, &key, v)?,
            "clutter" => c.clutter = parse(line, &key, v)?,
            "query_occlusion" => {
                occ_fraction = match v {
                    "none" => None,
                    _ => Some(parse::<f64>(line, &key, v)?),
                }
            }
            "query_occlusion_side" => occ_side = Side::parse(v).map_err(|e| anyhow!("line {line}: {e}"))?,
            _ => bail!("line {line}: unknown dataset key `{key}`"),
        }
    }
    c.query_occlusion = occ_fraction.map(|fraction| QueryOcclusion {
        fraction,
        side: occ_side,
    });
    Ok(c)
}

pub fn dataset_config_to_string(c: &DatasetConfig) -> String {
    let mut s = format!(
        "ids = {}\ntrain_ids = {}\nper_id = {}\ncameras = {}\nseed = {}\nclutter = {}\n",
        c.num_ids, c.train_ids, c.images_per_id, c.cameras, c.seed, c.clutter
    );
    match c.query_occlusion {
        Some(q) => {
            let _ = writeln!(
                s,
                "query_occlusion = {}\nquery_occlusion_side = {}",
                q.fraction,
                q.side.name()
            );
        }
        None => s.push_str("query_occlusion = none\n"),
    }
    s
}
