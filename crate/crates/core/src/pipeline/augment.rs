//! Random flip, shift, zoom and blur with nearest sampling and edge
//! replication, so the output keeps the input size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Maximum shift as a fraction of each dimension.
    pub shift: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
    pub blur_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { enabled: true, flip_prob: 0.5, shift: 0.1, zoom_min: 0.9, zoom_max: 1.1, blur_prob: 0.3 }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self { enabled: false, flip_prob: 0.0, shift: 0.0, zoom_min: 1.0, zoom_max: 1.0, blur_prob: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("train.augment.{key}"), reason: reason.into() });
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.blur_prob) {
            return bad("blur_prob", "must lie in [0, 1]");
        }
        if !(0.0..0.5).contains(&self.shift) {
            return bad("shift", "must lie in [0, 0.5)");
        }
        if !(self.zoom_min > 0.0 && self.zoom_min <= self.zoom_max) {
            return bad("zoom_min", "need 0 < zoom_min <= zoom_max");
        }
        Ok(())
    }
}

/// The random choices of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip: bool,
    /// Shift in pixels along rows and columns.
    pub dy: f64,
    pub dx: f64,
    pub zoom: f64,
    pub blur: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { flip: false, dy: 0.0, dx: 0.0, zoom: 1.0, blur: false };

    pub fn sample(p: &AugmentParams, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        if !p.enabled {
            return Self::IDENTITY;
        }
        let mut sym = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let dy = sym(p.shift * h as f64);
        let dx = sym(p.shift * w as f64);
        Transform {
            flip: rng.gen_bool(p.flip_prob),
            dy,
            dx,
            zoom: if p.zoom_max > p.zoom_min { rng.gen_range(p.zoom_min..=p.zoom_max) } else { p.zoom_min },
            blur: rng.gen_bool(p.blur_prob),
        }
    }

    /// Applies the transform to a `[3, h, w]` image.
    pub fn apply(&self, img: &Tensor) -> Tensor {
        let s = img.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = img.data();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let coord = |o: usize, centre: f64, shift: f64, n: usize| -> usize {
            let v = ((o as f64 - centre - shift) / self.zoom + centre).round();
            v.clamp(0.0, (n - 1) as f64) as usize
        };
        let rows: Vec<usize> = (0..h).map(|y| coord(y, cy, self.dy, h)).collect();
        let cols: Vec<usize> = (0..w)
            .map(|x| {
                let sx = coord(x, cx, self.dx, w);
                if self.flip { w - 1 - sx } else { sx }
            })
            .collect();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for (y, &sy) in rows.iter().enumerate() {
                for (x, &sx) in cols.iter().enumerate() {
                    out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
                }
            }
        }
        if self.blur {
            out = box_blur(&out, c, h, w);
        }
        Tensor::new(s, out).expect("same shape")
    }
}

/// 3x3 box filter with edge replication.
pub fn box_blur(src: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in [-1i64, 0, 1] {
                    for dx in [-1i64, 0, 1] {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        s += src[(ch * h + yy) * w + xx];
                    }
                }
                out[(ch * h + y) * w + x] = s / 9.0;
            }
        }
    }
    out
}

/// Samples and applies one augmentation to a `[3, h, w]` image.
pub fn augment(img: &Tensor, rng: &mut impl Rng, p: &AugmentParams) -> Tensor {
    let s = img.shape();
    Transform::sample(p, s[1], s[2], rng).apply(img)
}
