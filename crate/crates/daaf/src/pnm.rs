//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use daaf_core::Tensor;

/// A decoded image, samples interleaved per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Pnm {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            ensure!(pos > start, "truncated PNM header");
            fields.push(std::str::from_utf8(&bytes[start..pos]).context("PNM header is not ASCII")?);
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            m => bail!("unsupported PNM magic `{m}` (only P5 and P6)"),
        };
        let num = |s: &str, what: &str| s.parse::<usize>().with_context(|| format!("bad PNM {what} `{s}`"));
        let (width, height, max) = (
            num(fields[1], "width")?,
            num(fields[2], "height")?,
            num(fields[3], "maxval")?,
        );
        ensure!(max == 255, "only 8-bit PNM is supported, maxval is {max}");
        let len = width * height * channels;
        ensure!(bytes.len() >= pos + len, "PNM raster truncated: need {len} bytes");
        Ok(Self {
            width,
            height,
            channels,
            data: bytes[pos..pos + len].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).with_context(|| format!("writing {}", path.display()))
    }

    /// Planar `[C, H, W]` tensor in [0, 1].
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (c, plane) = (self.channels, self.width * self.height);
        Tensor::from_fn(&[c, self.height, self.width], |i| {
            f32::from(self.data[(i % plane) * c + i / plane]) / 255.0
        })
    }

    /// Quantises a planar `[C, H, W]` tensor (C = 1 or 3) with values in [0, 1].
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [c, h, w] = match *t.shape() {
            [c, h, w] if c == 1 || c == 3 => [c, h, w],
            ref s => bail!("cannot store a tensor of shape {s:?} as PNM"),
        };
        let plane = h * w;
        let data = (0..c * plane)
            .map(|i| quantize(t.data()[(i % c) * plane + i / c]))
            .collect();
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }
}

/// Nearest 8-bit level of a value in [0, 1]; out-of-range values saturate.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([7, 200]);
        let p = Pnm::decode(&bytes).unwrap();
        assert_eq!((p.width, p.height, p.channels, p.data), (2, 1, 1, vec![7, 200]));
    }

    #[test]
    fn rejects_unsupported_variants() {
        assert!(Pnm::decode(b"P2\n1 1\n255\n0").is_err());
        assert!(Pnm::decode(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(Pnm::decode(b"P6\n2 2\n255\n\0").is_err());
    }

    #[test]
    fn planar_interleaved_round_trip() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f32 / 11.0);
        let p = Pnm::from_tensor(&t).unwrap();
        assert_eq!(&p.data[..3], &[0, quantize(4.0 / 11.0), quantize(8.0 / 11.0)]);
        let back = p.to_tensor();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(Pnm::decode(&p.encode()).unwrap(), p);
    }
}
