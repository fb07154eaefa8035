//! Heatmap images: min-max normalised PGM plus an optional colour overlay.

use std::path::Path;

use anyhow::{ensure, Result};
use daaf_core::{Real, Tensor};

use crate::pnm::{quantize, Pnm};

/// Min-max normalisation of an `[h, w]` map to [0, 1].
///
/// A constant map has no range and normalises to zeros; the flag reports it.
pub fn normalize<T: Real>(map: &Tensor<T>) -> Result<(Tensor<f32>, bool)> {
    let [h, w] = map.dims2("normalize")?;
    let v: Vec<f64> = map.data().iter().map(|x| x.as_f64()).collect();
    ensure!(v.iter().all(|x| x.is_finite()), "heatmap contains non-finite values");
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let constant = range <= 0.0;
    let out = Tensor::from_fn(&[h, w], |i| if constant { 0.0 } else { ((v[i] - lo) / range) as f32 });
    Ok((out, constant))
}

/// Samples an `[h, w]` map at the centres of an `[height, width]` grid.
pub fn upsample_bilinear(map: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let [h, w] = map.dims2("upsample_bilinear")?;
    let d = map.data();
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), (x - i0 as f64) as f32)
    };
    Ok(Tensor::from_fn(&[height, width], |i| {
        let (y0, y1, fy) = coord(i / width, height, h);
        let (x0, x1, fx) = coord(i % width, width, w);
        let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
        let bottom = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Blue through green to red.
pub fn colormap(v: f32) -> [f32; 3] {
    let band = |c: f32| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [band(3.0), band(2.0), band(1.0)]
}

/// Half-and-half blend of the colour-mapped heatmap over a `[3, H, W]` image.
pub fn overlay(normalized: &Tensor<f32>, image: &Tensor<f32>) -> Result<Pnm> {
    ensure!(
        image.shape().len() == 3 && image.shape()[0] == 3,
        "overlay needs a [3, H, W] image, got {:?}",
        image.shape()
    );
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let up = upsample_bilinear(normalized, h, w)?;
    let mut data = Vec::with_capacity(3 * h * w);
    for (p, &v) in up.data().iter().enumerate() {
        for (ch, c) in colormap(v).into_iter().enumerate() {
            data.push(quantize(0.5 * image.data()[ch * h * w + p] + 0.5 * c));
        }
    }
    Ok(Pnm {
        width: w,
        height: h,
        channels: 3,
        data,
    })
}

/// Writes `map` as a PGM and, given an image, an overlay PPM.
///
/// Returns whether the map was constant (and so written as zeros).
pub fn export_heatmap<T: Real>(
    map: &Tensor<T>,
    path: &Path,
    overlay_on: Option<(&Tensor<f32>, &Path)>,
) -> Result<bool> {
    let (norm, constant) = normalize(map)?;
    let [h, w] = norm.dims2("export_heatmap")?;
    let grey = Pnm::from_tensor(&norm.clone().reshape(&[1, h, w])?)?;
    grey.write(path)?;
    if let Some((image, overlay_path)) = overlay_on {
        overlay(&norm, image)?.write(overlay_path)?;
    }
    Ok(constant)
}
