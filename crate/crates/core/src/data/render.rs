//! Procedural toy vehicles.
//!
//! Every random draw comes from a ChaCha8 stream keyed by
//! `(seed, purpose)` with the stream number set to an item index, so any
//! identity or view can be regenerated independently of the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Identity = 1,
    View = 2,
    Haze = 3,
    Split = 4,
    Sensor = 5,
}

/// Key bytes 0..8 hold `seed`, bytes 8..16 the purpose tag; the ChaCha
/// stream id is `index`.
pub fn stream_rng(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Stream index of view `view` of identity `id`.
pub fn view_index(id: u64, view: u32) -> u64 {
    (id << 16) | view as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub id: u64,
    /// Hue in `[0,1)`.
    pub body_hue: f64,
    pub saturation: f64,
    pub value: f64,
    /// Body width over body height.
    pub aspect: f64,
    pub wheel_layout: u8,
    pub marking_pattern: u8,
}

pub const WHEEL_LAYOUTS: u8 = 3;
pub const MARKING_PATTERNS: u8 = 6;

impl Identity {
    /// Coarse attribute tuple used for collision detection.
    pub fn signature(&self) -> (u32, u32, u32, u32, u8, u8) {
        (
            (self.body_hue * 36.0) as u32 % 36,
            ((self.saturation - 0.45) / 0.5 * 4.0).clamp(0.0, 3.0) as u32,
            ((self.value - 0.4) / 0.45 * 3.0).clamp(0.0, 2.0) as u32,
            ((self.aspect - 1.8) / 1.0 * 4.0).clamp(0.0, 3.0) as u32,
            self.wheel_layout,
            self.marking_pattern,
        )
    }
}

/// Draws identity attributes: hue U[0,1), saturation U[0.45,0.95],
/// value U[0.4,0.85], aspect U[1.8,2.8], wheel layout and marking pattern
/// uniform over their categories.
pub fn generate_identity<R: Rng + ?Sized>(id: u64, rng: &mut R) -> Identity {
    Identity {
        id,
        body_hue: rng.gen_range(0.0..1.0),
        saturation: rng.gen_range(0.45..0.95),
        value: rng.gen_range(0.4..0.85),
        aspect: rng.gen_range(1.8..2.8),
        wheel_layout: rng.gen_range(0..WHEEL_LAYOUTS),
        marking_pattern: rng.gen_range(0..MARKING_PATTERNS),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub size: usize,
    /// Scale of all per-view perturbations; 0 renders a canonical view.
    pub jitter: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { size: 64, jitter: 1.0 }
    }
}

/// Per-view pose, lighting and background draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewParams {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub illumination: f64,
    pub hue_shift: f64,
    pub facing: f64,
    pub horizon: f64,
    pub sky_tint: [f64; 3],
    pub ground_tint: [f64; 3],
    pub vehicle_depth: f64,
}

impl ViewParams {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, jitter: f64) -> Self {
        let mut u = |a: f64| rng.gen_range(-1.0..1.0) * a * jitter;
        let dx = u(0.08);
        let dy = u(0.04);
        let scale = 1.0 + u(0.12);
        let illumination = 1.0 + u(0.15);
        let hue_shift = u(0.01);
        let facing_draw = u(1.0);
        let horizon = 0.45 + u(0.04);
        let sky_tint = [u(0.08), u(0.08), u(0.08)];
        let ground_tint = [u(0.08), u(0.08), u(0.08)];
        let vehicle_depth = 0.32 + u(0.06);
        ViewParams {
            dx,
            dy,
            scale,
            illumination,
            hue_shift,
            facing: if facing_draw < 0.0 { -1.0 } else { 1.0 },
            horizon,
            sky_tint,
            ground_tint,
            vehicle_depth,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rendered {
    /// `3×S×S` in `[0,1]`.
    pub image: Tensor,
    /// `S×S` in `[0,1]` scene units.
    pub depth: Tensor,
    /// Per pixel: 0 background, 1 plain body paint, 2 other vehicle parts.
    pub mask: Vec<u8>,
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hue(c: [f64; 3]) -> f64 {
    let mx = c[0].max(c[1]).max(c[2]);
    let mn = c[0].min(c[1]).min(c[2]);
    let d = mx - mn;
    if d <= 0.0 {
        return 0.0;
    }
    let h = if mx == c[0] {
        ((c[1] - c[2]) / d).rem_euclid(6.0)
    } else if mx == c[1] {
        (c[2] - c[0]) / d + 2.0
    } else {
        (c[0] - c[1]) / d + 4.0
    };
    h / 6.0
}

/// Renders one view: sky and ground plane background, body rectangle,
/// cabin trapezoid, wheel discs and the identity's marking pattern.
pub fn render_instance<R: Rng + ?Sized>(identity: &Identity, view_rng: &mut R, cfg: &RenderConfig) -> Rendered {
    let vp = ViewParams::draw(view_rng, cfg.jitter);
    render_with(identity, &vp, cfg.size)
}

pub fn render_with(identity: &Identity, vp: &ViewParams, size: usize) -> Rendered {
    let s = size as f64;
    let hw = size * size;
    let mut img = vec![0.0; 3 * hw];
    let mut depth = vec![0.0; hw];
    let mut mask = vec![0u8; hw];

    let body = hsv_to_rgb(identity.body_hue + vp.hue_shift, identity.saturation, identity.value);
    let mark = hsv_to_rgb(identity.body_hue + 0.5, 0.25, 0.95);
    let bw = 0.62 * vp.scale;
    let bh = bw / identity.aspect;
    let cx = 0.5 + vp.dx;
    let vb = 0.8 + vp.dy;
    let (bx0, bx1, by0, by1) = (cx - bw / 2.0, cx + bw / 2.0, vb - bh, vb);
    let ch = 0.6 * bh;
    let co = 0.1 * bw * vp.facing;
    let wheel_r = if identity.wheel_layout == 2 { 0.34 * bh } else { 0.26 * bh };
    let wheel_x: &[f64] = match identity.wheel_layout {
        0 => &[0.2, 0.8],
        1 => &[0.15, 0.5, 0.85],
        _ => &[0.25, 0.75],
    };

    for py in 0..size {
        let v = (py as f64 + 0.5) / s;
        for px in 0..size {
            let u = (px as f64 + 0.5) / s;
            let p = py * size + px;
            // background
            let (mut rgb, mut d) = if v < vp.horizon {
                let k = v / vp.horizon;
                let base = [0.55 + 0.25 * k, 0.65 + 0.2 * k, 0.82 + 0.1 * k];
                (std::array::from_fn(|c| base[c] + vp.sky_tint[c]), 1.0)
            } else {
                let k = (v - vp.horizon) / (1.0 - vp.horizon);
                let lane = ((k * 6.0).fract() < 0.08) as u8 as f64 * 0.1;
                let base = 0.48 - 0.18 * k + lane;
                (std::array::from_fn(|c| base + vp.ground_tint[c]), 1.0 - 0.5 * k)
            };
            let mut part = 0u8;

            // cabin trapezoid on top of the body
            if v >= by0 - ch && v < by0 {
                let t = (v - (by0 - ch)) / ch;
                let half = bw * (0.22 + 0.14 * t);
                let c0 = cx + co;
                if (u - c0).abs() < half {
                    let window = (u - c0).abs() < half - 0.05 * bw && v > by0 - ch * 0.8;
                    rgb = if window { [0.22, 0.27, 0.33] } else { body.map(|b| b * 0.85) };
                    d = vp.vehicle_depth;
                    part = 2;
                }
            }
            // body
            if u >= bx0 && u < bx1 && v >= by0 && v < by1 {
                let bu = (u - bx0) / bw;
                let bu = if vp.facing < 0.0 { 1.0 - bu } else { bu };
                let bv = (v - by0) / bh;
                let marked = match identity.marking_pattern {
                    1 => (0.35..0.6).contains(&bv),
                    2 => [0.3, 0.5, 0.7].iter().any(|c| (bu - c).abs() < 0.045),
                    3 => {
                        let (gx, gy) = ((bu * 3.0).fract() - 0.5, (bv * 2.0).fract() - 0.5);
                        (gx * gx * 9.0 + gy * gy * 4.0).sqrt() < 0.5
                    }
                    4 => ((bu * 4.0) as u32 + (bv * 2.0) as u32) % 2 == 0,
                    5 => bv > 0.55,
                    _ => false,
                };
                rgb = match (identity.marking_pattern, marked) {
                    (5, true) => body.map(|b| b * 0.45),
                    (_, true) => mark,
                    _ => body,
                };
                part = if marked { 2 } else { 1 };
                d = vp.vehicle_depth;
            }
            // wheels straddle the bottom edge of the body
            for &wx in wheel_x {
                let wcx = bx0 + wx * bw;
                let r = ((u - wcx).powi(2) + (v - vb).powi(2)).sqrt();
                if r < wheel_r {
                    rgb = if r < 0.4 * wheel_r { [0.6, 0.6, 0.62] } else { [0.08, 0.08, 0.08] };
                    d = vp.vehicle_depth;
                    part = 2;
                }
            }
            for c in 0..3 {
                img[c * hw + p] = (rgb[c] * vp.illumination).clamp(0.0, 1.0);
            }
            depth[p] = d;
            mask[p] = part;
        }
    }
    Rendered {
        image: Tensor::new(vec![3, size, size], img).expect("render dims"),
        depth: Tensor::new(vec![size, size], depth).expect("render dims"),
        mask,
    }
}
