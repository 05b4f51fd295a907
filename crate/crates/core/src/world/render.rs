use std::f32::consts::TAU;

use rand::Rng;

use super::prompt::{Color, PromptSpec, Quadrant, Shape, Size};
use crate::error::{Error, Result};

/// Supersampling factor per axis.
const SUPERSAMPLE: usize = 4;
const TEXTURE_AMP: f32 = 0.06;
const TINT_JITTER: f32 = 0.08;
const OFFSET_JITTER: f32 = 0.02;
const OUTLINE_WIDTH: f32 = 0.07;

pub const RESOLUTIONS: [usize; 2] = [16, 32];

/// Square RGB raster, row-major `[y][x][c]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub res: usize,
    pub data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(res: usize, data: Vec<f32>) -> Result<Self> {
        check_resolution(res)?;
        if data.len() != res * res * 3 {
            return Err(Error::shape("ImageGrid", &[res, res, 3], &[data.len()]));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self { res, data })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.res + x) * 3 + c]
    }

    pub fn channel_means(&self) -> [f32; 3] {
        let mut m = [0.0f64; 3];
        for px in self.data.chunks(3) {
            for c in 0..3 {
                m[c] += px[c] as f64;
            }
        }
        let n = (self.res * self.res) as f64;
        [(m[0] / n) as f32, (m[1] / n) as f32, (m[2] / n) as f32]
    }

    pub fn mean_abs_diff(&self, other: &ImageGrid) -> f32 {
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        (s / self.data.len() as f64) as f32
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.res, self.res).into_bytes();
        out.extend(self.data.iter().map(|v| (v * 255.0).round() as u8));
        out
    }
}

pub(crate) fn check_resolution(res: usize) -> Result<()> {
    if RESOLUTIONS.contains(&res) {
        Ok(())
    } else {
        Err(Error::config("resolution", format!("{res} not in {RESOLUTIONS:?}")))
    }
}

/// Per-style background texture and placement jitter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleParams {
    pub freq: [f32; 2],
    pub phase: f32,
    pub tint: [f32; 3],
    pub offset: [f32; 2],
}

impl StyleParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let freq = [rng.random_range(2.0..6.0), rng.random_range(2.0..6.0)];
        let phase = rng.random_range(0.0..TAU);
        let tint = [0; 3].map(|_| 0.45 + rng.random_range(-TINT_JITTER..TINT_JITTER));
        let offset = [0; 2].map(|_| rng.random_range(-OFFSET_JITTER..OFFSET_JITTER));
        Self {
            freq,
            phase,
            tint,
            offset,
        }
    }
}

pub fn color_rgb(c: Color) -> [f32; 3] {
    match c {
        Color::Red => [0.9, 0.15, 0.1],
        Color::Green => [0.1, 0.8, 0.2],
        Color::Blue => [0.15, 0.25, 0.95],
        Color::Yellow => [0.95, 0.9, 0.1],
    }
}

fn quadrant_center(q: Quadrant) -> [f32; 2] {
    match q {
        Quadrant::TopLeft => [0.25, 0.25],
        Quadrant::TopRight => [0.75, 0.25],
        Quadrant::BottomLeft => [0.25, 0.75],
        Quadrant::BottomRight => [0.75, 0.75],
    }
}

fn half_size(s: Size) -> f32 {
    match s {
        Size::Small => 0.17,
        Size::Large => 0.24,
    }
}

/// Shape membership for offsets `(dx, dy)` from the center; `y` grows
/// downwards.
fn inside(shape: Shape, dx: f32, dy: f32, h: f32) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= (0.95 * h) * (0.95 * h),
        Shape::Square => {
            let r = dx.abs().max(dy.abs());
            r <= 0.95 * h && r >= 0.95 * h - OUTLINE_WIDTH
        }
        Shape::Triangle => dy <= 0.8 * h && dy >= -h && dx.abs() <= (dy + h) / 1.8,
        Shape::Cross => {
            (dx.abs() <= 0.3 * h && dy.abs() <= h) || (dy.abs() <= 0.3 * h && dx.abs() <= h)
        }
    }
}

/// Anti-aliased raster of `spec` under `style`.
pub fn render(spec: &PromptSpec, style: &StyleParams, res: usize) -> Result<ImageGrid> {
    check_resolution(res)?;
    let n = res * SUPERSAMPLE;
    let fg = color_rgb(spec.color);
    let [qx, qy] = quadrant_center(spec.quadrant);
    let (cx, cy) = (qx + style.offset[0], qy + style.offset[1]);
    let h = half_size(spec.size);
    let mut acc = vec![0.0f32; res * res * 3];
    for sy in 0..n {
        let y = (sy as f32 + 0.5) / n as f32;
        for sx in 0..n {
            let x = (sx as f32 + 0.5) / n as f32;
            let px = if inside(spec.shape, x - cx, y - cy, h) {
                fg
            } else {
                let wave = TEXTURE_AMP * (TAU * (style.freq[0] * x + style.freq[1] * y) + style.phase).sin();
                style.tint.map(|t| t + wave)
            };
            let base = ((sy / SUPERSAMPLE) * res + sx / SUPERSAMPLE) * 3;
            for c in 0..3 {
                acc[base + c] += px[c];
            }
        }
    }
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    ImageGrid::new(res, acc.into_iter().map(|v| v * inv).collect())
}
