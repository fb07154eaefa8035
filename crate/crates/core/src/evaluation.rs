//! Retrieval metrics under the cross-camera protocol.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Euclidean distances between rows of `query` `[Q, D]` and `gallery` `[G, D]`.
pub fn pairwise_distances<T: Real>(query: &Tensor<T>, gallery: &Tensor<T>) -> Result<Tensor<T>> {
    let [q, d] = query.dims2("pairwise_distances")?;
    let [g, dg] = gallery.dims2("pairwise_distances")?;
    if d != dg {
        return Err(Error::dim("pairwise_distances", "D", d, dg));
    }
    let (qs, gs) = (query.data(), gallery.data());
    Ok(Tensor::from_fn(&[q, g], |i| {
        let (a, b) = (&qs[(i / g) * d..(i / g + 1) * d], &gs[(i % g) * d..(i % g + 1) * d]);
        a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
    }))
}

/// Labels of one side of a retrieval problem.
#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub ids: &'a [u32],
    pub cams: &'a [u32],
}

/// Retrieval quality of a distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `cmc[r]` is the fraction of scored queries matched within rank `r + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// AP of every query in input order; `None` when it had no valid match.
    pub ap: Vec<Option<f64>>,
    /// Queries with no valid cross-camera match.
    pub skipped: usize,
    pub camera_exclusion: bool,
}

impl EvalReport {
    /// CMC at rank `r` (1-based); rank beyond the curve saturates.
    pub fn rank(&self, r: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(r.max(1) - 1).min(self.cmc.len() - 1)]
    }

    pub fn rank1(&self) -> f64 {
        self.rank(1)
    }

    pub fn scored(&self) -> usize {
        self.ap.len() - self.skipped
    }
}

/// CMC curve and mAP.
///
/// Gallery items sharing both identity and camera with the query are
/// removed from its ranking. Ties in distance are broken by gallery index.
/// AP averages the precision at each correct hit over the number of correct
/// items. Queries with no valid match are skipped and counted.
pub fn cmc_map<T: Real>(distmat: &Tensor<T>, query: Labels<'_>, gallery: Labels<'_>) -> Result<EvalReport> {
    cmc_map_with(distmat, query, gallery, true)
}

/// [`cmc_map`] with the same-camera exclusion made optional.
pub fn cmc_map_with<T: Real>(
    distmat: &Tensor<T>,
    query: Labels<'_>,
    gallery: Labels<'_>,
    camera_exclusion: bool,
) -> Result<EvalReport> {
    let [q, g] = distmat.dims2("cmc_map")?;
    for (axis, n, labels) in [("Q", q, query), ("G", g, gallery)] {
        if labels.ids.len() != n {
            return Err(Error::dim("cmc_map", axis, n, labels.ids.len()));
        }
        if labels.cams.len() != n {
            return Err(Error::dim("cmc_map", axis, n, labels.cams.len()));
        }
    }
    if let Some(v) = distmat.data().iter().find(|v| v.is_nan()) {
        return Err(Error::Numerical(format!("distance matrix contains {v}")));
    }
    let mut hits = alloc::vec![0usize; g];
    let mut ap = Vec::with_capacity(q);
    let mut order: Vec<usize> = (0..g).collect();
    for i in 0..q {
        let row = &distmat.data()[i * g..(i + 1) * g];
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("no NaN").then(a.cmp(&b)));
        let (qid, qcam) = (query.ids[i], query.cams[i]);
        let mut rank = 0;
        let mut found = 0usize;
        let mut first = None;
        let mut precision_sum = 0.0;
        for &j in &order {
            if camera_exclusion && gallery.ids[j] == qid && gallery.cams[j] == qcam {
                continue;
            }
            rank += 1;
            if gallery.ids[j] == qid {
                found += 1;
                precision_sum += found as f64 / rank as f64;
                first.get_or_insert(rank);
            }
        }
        match first {
            Some(r) => {
                hits[r - 1] += 1;
                ap.push(Some(precision_sum / found as f64));
            }
            None => ap.push(None),
        }
    }
    let skipped = ap.iter().filter(|a| a.is_none()).count();
    let scored = q - skipped;
    let mut cmc = Vec::with_capacity(g);
    let mut acc = 0;
    for h in hits {
        acc += h;
        cmc.push(if scored == 0 { 0.0 } else { acc as f64 / scored as f64 });
    }
    let map = if scored == 0 {
        0.0
    } else {
        ap.iter().flatten().sum::<f64>() / scored as f64
    };
    Ok(EvalReport {
        cmc,
        map,
        ap,
        skipped,
        camera_exclusion,
    })
}
