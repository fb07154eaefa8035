//! Retrieval evaluation of a trained model.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use daaf_core::evaluation::{cmc_map, pairwise_distances, EvalReport, Labels};
use daaf_core::model::ModelBundle;
use daaf_core::synth::{occlude, Fill, Sample, Side};
use daaf_core::training::stack;
use daaf_core::Tensor;

pub const DEFAULT_BATCH: usize = 32;

/// `[N, D]` embeddings of `samples`, in order, computed `batch` at a time.
pub fn extract_embeddings(bundle: &ModelBundle<f32>, samples: &[Sample], batch: usize) -> Result<Tensor<f32>> {
    ensure!(batch > 0, "batch size must be positive");
    ensure!(!samples.is_empty(), "no samples to embed");
    let dim = bundle.config.embed_dim;
    let mut data = Vec::with_capacity(samples.len() * dim);
    for chunk in samples.chunks(batch) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let e = bundle.embed_images(&stack(&refs)?)?;
        data.extend_from_slice(e.data());
    }
    Ok(Tensor::new(&[samples.len(), dim], data)?)
}

/// Identity and camera labels of a sample list.
pub struct SampleLabels {
    pub ids: Vec<u32>,
    pub cams: Vec<u32>,
}

impl SampleLabels {
    pub fn of(samples: &[Sample]) -> Self {
        Self {
            ids: samples.iter().map(|s| s.identity).collect(),
            cams: samples.iter().map(|s| s.camera).collect(),
        }
    }

    pub fn labels(&self) -> Labels<'_> {
        Labels {
            ids: &self.ids,
            cams: &self.cams,
        }
    }
}

/// Query-by-gallery distances and the report they give.
pub struct Evaluation {
    pub distmat: Tensor<f32>,
    pub report: EvalReport,
}

/// Scores queries against a gallery of precomputed embeddings.
pub fn evaluate_embeddings(
    query: &Tensor<f32>,
    q: &[Sample],
    gallery: &Tensor<f32>,
    g: &[Sample],
) -> Result<Evaluation> {
    let distmat = pairwise_distances(query, gallery)?;
    let (ql, gl) = (SampleLabels::of(q), SampleLabels::of(g));
    let report = cmc_map(&distmat, ql.labels(), gl.labels())?;
    Ok(Evaluation { distmat, report })
}

pub fn evaluate(bundle: &ModelBundle<f32>, query: &[Sample], gallery: &[Sample]) -> Result<Evaluation> {
    let qe = extract_embeddings(bundle, query, DEFAULT_BATCH)?;
    let ge = extract_embeddings(bundle, gallery, DEFAULT_BATCH)?;
    evaluate_embeddings(&qe, query, &ge, gallery)
}

/// Clean versus occluded-query retrieval.
pub struct OcclusionReport {
    pub clean: EvalReport,
    pub occluded: EvalReport,
}

impl OcclusionReport {
    /// Rank-1 lost to occlusion; positive when occlusion hurts.
    pub fn rank1_drop(&self) -> f64 {
        self.clean.rank1() - self.occluded.rank1()
    }

    pub fn map_drop(&self) -> f64 {
        self.clean.map - self.occluded.map
    }
}

/// Queries occluded with a noise strip seeded by `seed` and the query index.
pub fn occluded_queries(query: &[Sample], fraction: f64, side: Side, seed: u64) -> Result<Vec<Sample>> {
    query
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(occlude(
                s,
                fraction,
                side,
                Fill::Noise(seed.wrapping_mul(1_000_003) ^ i as u64),
            )?)
        })
        .collect()
}

/// Evaluates clean queries and the same queries occluded; the gallery is shared.
pub fn occlusion_eval(
    bundle: &ModelBundle<f32>,
    query: &[Sample],
    gallery: &[Sample],
    fraction: f64,
    side: Side,
    seed: u64,
) -> Result<OcclusionReport> {
    let ge = extract_embeddings(bundle, gallery, DEFAULT_BATCH)?;
    let qe = extract_embeddings(bundle, query, DEFAULT_BATCH)?;
    let clean = evaluate_embeddings(&qe, query, &ge, gallery)?.report;
    let occ = occluded_queries(query, fraction, side, seed)?;
    let oe = extract_embeddings(bundle, &occ, DEFAULT_BATCH)?;
    let occluded = evaluate_embeddings(&oe, &occ, &ge, gallery)?.report;
    Ok(OcclusionReport { clean, occluded })
}

/// `metric,value` rows.
pub fn report_csv(r: &EvalReport) -> String {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "map,{}", r.map);
    for k in [1, 5, 10] {
        let _ = writeln!(s, "rank{k},{}", r.rank(k));
    }
    let _ = writeln!(s, "queries,{}", r.ap.len());
    let _ = writeln!(s, "skipped,{}", r.skipped);
    let _ = writeln!(s, "camera_exclusion,{}", r.camera_exclusion);
    s
}

pub fn occlusion_csv(o: &OcclusionReport) -> String {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "clean_map,{}\nclean_rank1,{}", o.clean.map, o.clean.rank1());
    let _ = writeln!(
        s,
        "occluded_map,{}\noccluded_rank1,{}",
        o.occluded.map,
        o.occluded.rank1()
    );
    let _ = writeln!(s, "map_drop,{}\nrank1_drop,{}", o.map_drop(), o.rank1_drop());
    s
}

/// `rank,accuracy` rows of the full curve.
pub fn cmc_csv(r: &EvalReport) -> String {
    let mut s = String::from("rank,accuracy\n");
    for (i, v) in r.cmc.iter().enumerate() {
        let _ = writeln!(s, "{},{v}", i + 1);
    }
    s
}

/// Rows and columns as little-endian `u32`, then the values as little-endian `f32`.
pub fn encode_distmat(d: &Tensor<f32>) -> Result<Vec<u8>> {
    let [q, g] = d.dims2("distmat")?;
    let mut out = Vec::with_capacity(8 + 4 * q * g);
    out.extend_from_slice(&u32::try_from(q)?.to_le_bytes());
    out.extend_from_slice(&u32::try_from(g)?.to_le_bytes());
    for v in d.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_distmat(bytes: &[u8]) -> Result<Tensor<f32>> {
    ensure!(bytes.len() >= 8, "distance matrix header truncated");
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (q, g) = (word(0), word(4));
    ensure!(
        bytes.len() == 8 + 4 * q * g,
        "distance matrix body has {} bytes, expected {}",
        bytes.len() - 8,
        4 * q * g
    );
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(&[q, g], data)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
