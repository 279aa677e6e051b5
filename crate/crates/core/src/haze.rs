//! Atmospheric scattering model and the image priors built on it.
//!
//! Images are `3×H×W` tensors with values in `[0,1]`; depth and transmission
//! maps are `H×W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA_RANGE: (f64, f64) = (0.05, 5.0);
pub const DEFAULT_BETA_SAMPLING: (f64, f64) = (0.4, 1.6);
pub const DEFAULT_AIRLIGHT_SAMPLING: (f64, f64) = (0.5, 1.0);
pub const T_MIN: f64 = 0.05;
const DEGENERATE_NORM: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    pub beta: f64,
    pub airlight: [f64; 3],
}

impl HazeParams {
    pub fn new(beta: f64, airlight: [f64; 3]) -> Result<Self> {
        let p = HazeParams { beta, airlight };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(BETA_RANGE.0..=BETA_RANGE.1).contains(&self.beta) {
            return Err(Error::invalid(format!(
                "beta {} outside [{}, {}]",
                self.beta, BETA_RANGE.0, BETA_RANGE.1
            )));
        }
        if self.airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid(format!("airlight {:?} outside [0,1]", self.airlight)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DarkChannelConfig {
    pub patch: usize,
}

impl Default for DarkChannelConfig {
    fn default() -> Self {
        DarkChannelConfig { patch: 5 }
    }
}

impl DarkChannelConfig {
    pub fn new(patch: usize) -> Result<Self> {
        if patch == 0 || patch % 2 == 0 {
            return Err(Error::invalid(format!("dark channel patch must be odd and positive, got {patch}")));
        }
        Ok(DarkChannelConfig { patch })
    }
}

fn image_dims(img: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *img.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(Error::shape(op, format!("expected 3×H×W image, got {:?}", img.shape()))),
    }
}

fn check_map(map: &Tensor, h: usize, w: usize, op: &'static str) -> Result<()> {
    if map.shape() != [h, w] {
        return Err(Error::shape(op, format!("map {:?} vs image {h}×{w}", map.shape())));
    }
    Ok(())
}

pub fn transmission_from_depth(depth: &Tensor, beta: f64) -> Result<Tensor> {
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if depth.rank() != 2 {
        return Err(Error::shape("transmission_from_depth", format!("depth must be H×W, got {:?}", depth.shape())));
    }
    if let Some(d) = depth.data().iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
        return Err(Error::invalid(format!("depth values must be finite and non-negative, found {d}")));
    }
    Ok(depth.map(|d| (-beta * d).exp()))
}

/// `I = J·t + A·(1−t)` per channel.
pub fn synthesize_haze(clear: &Tensor, t: &Tensor, params: &HazeParams) -> Result<Tensor> {
    let (h, w) = image_dims(clear, "synthesize_haze")?;
    check_map(t, h, w, "synthesize_haze")?;
    let hw = h * w;
    let mut out = clear.clone();
    for (c, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let a = params.airlight[c];
        for (v, &tv) in plane.iter_mut().zip(t.data()) {
            *v = *v * tv + a * (1.0 - tv);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub image: Tensor,
    /// Number of pixels whose transmission was raised to [`T_MIN`].
    pub clamped_pixels: usize,
}

/// Algebraic inverse of [`synthesize_haze`], clamped to `[0,1]`.
pub fn invert_haze(hazy: &Tensor, t: &Tensor, params: &HazeParams) -> Result<Inversion> {
    let (h, w) = image_dims(hazy, "invert_haze")?;
    check_map(t, h, w, "invert_haze")?;
    let hw = h * w;
    let clamped_pixels = t.data().iter().filter(|&&v| v < T_MIN).count();
    let mut out = hazy.clone();
    for (c, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let a = params.airlight[c];
        for (v, &tv) in plane.iter_mut().zip(t.data()) {
            let tv = tv.max(T_MIN);
            *v = ((*v - a * (1.0 - tv)) / tv).clamp(0.0, 1.0);
        }
    }
    Ok(Inversion { image: out, clamped_pixels })
}

/// Minimum over a `patch × patch` window (valid sub-window at borders) of
/// the per-pixel channel minimum. Returns an `H×W` map.
pub fn dark_channel(img: &Tensor, cfg: &DarkChannelConfig) -> Result<Tensor> {
    let (h, w) = image_dims(img, "dark_channel")?;
    if cfg.patch == 0 || cfg.patch % 2 == 0 {
        return Err(Error::invalid(format!("dark channel patch must be odd and positive, got {}", cfg.patch)));
    }
    if cfg.patch > h && cfg.patch > w {
        return Err(Error::invalid(format!("patch {} exceeds image {h}×{w}", cfg.patch)));
    }
    let hw = h * w;
    let d = img.data();
    let cmin: Vec<f64> = (0..hw).map(|p| d[p].min(d[hw + p]).min(d[2 * hw + p])).collect();
    // separable min: rows then columns
    let r = cfg.patch / 2;
    let mut rowmin = vec![0.0; hw];
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            rowmin[y * w + x] = cmin[y * w + x0..=y * w + x1].iter().cloned().fold(f64::INFINITY, f64::min);
        }
    }
    let mut out = vec![0.0; hw];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (y0..=y1).map(|yy| rowmin[yy * w + x]).fold(f64::INFINITY, f64::min);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Dark-channel airlight estimate: among the brightest 0.1% of dark-channel
/// pixels (at least one), average the input colour of the most luminous
/// half (at least one).
pub fn estimate_airlight(hazy: &Tensor, cfg: &DarkChannelConfig) -> Result<[f64; 3]> {
    let (h, w) = image_dims(hazy, "estimate_airlight")?;
    let hw = h * w;
    let dc = dark_channel(hazy, cfg)?;
    let n_top = ((hw as f64) * 0.001).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..hw).collect();
    // stable sort keeps lowest index first among equal values
    order.sort_by(|&a, &b| dc.data()[b].total_cmp(&dc.data()[a]));
    order.truncate(n_top);
    let d = hazy.data();
    let lum = |p: usize| 0.299 * d[p] + 0.587 * d[hw + p] + 0.114 * d[2 * hw + p];
    order.sort_by(|&a, &b| lum(b).total_cmp(&lum(a)));
    let keep = order.len().div_ceil(2);
    let mut a = [0.0; 3];
    for &p in &order[..keep] {
        for (c, slot) in a.iter_mut().enumerate() {
            *slot += d[c * hw + p];
        }
    }
    Ok(a.map(|s| (s / keep as f64).clamp(0.0, 1.0)))
}

/// `1 − cos(J−A, I−A)` per pixel; 0 where either offset is (near) zero.
pub fn colinearity_residual(clear: &Tensor, hazy: &Tensor, airlight: &[f64; 3]) -> Result<Tensor> {
    let (h, w) = image_dims(clear, "colinearity_residual")?;
    if hazy.shape() != clear.shape() {
        return Err(Error::shape("colinearity_residual", format!("{:?} vs {:?}", clear.shape(), hazy.shape())));
    }
    let hw = h * w;
    let (j, i) = (clear.data(), hazy.data());
    let out = (0..hw)
        .map(|p| {
            let mut dot = 0.0;
            let mut nj = 0.0;
            let mut ni = 0.0;
            for c in 0..3 {
                let a = j[c * hw + p] - airlight[c];
                let b = i[c * hw + p] - airlight[c];
                dot += a * b;
                nj += a * a;
                ni += b * b;
            }
            let (nj, ni) = (nj.sqrt(), ni.sqrt());
            if nj < DEGENERATE_NORM || ni < DEGENERATE_NORM {
                0.0
            } else {
                1.0 - dot / (nj * ni)
            }
        })
        .collect();
    Tensor::new(vec![h, w], out)
}
