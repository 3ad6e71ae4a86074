use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::InterpolationState;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Pure RGB anchors for red, green and blue.
pub const COLOR_ANCHORS: [[u8; 3]; 3] = [[255, 0, 0], [0, 255, 0], [0, 0, 255]];

const SUPERSAMPLE: usize = 4;

/// An RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

/// Placement of the ellipse. Lengths are in pixels; the minor axis follows
/// from the interpolation state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub center_x: f64,
    pub center_y: f64,
    pub semi_major: f64,
    pub rotation: f64,
}

impl Geometry {
    /// Semi-major axis U(8,12), center jitter +-3 and rotation U(0, pi), all
    /// at 32 px and scaled with the smaller image side.
    pub fn sample<R: Rng>(rng: &mut R, height: usize, width: usize) -> Self {
        let scale = height.min(width) as f64 / 32.0;
        let semi_major = rng.random_range(8.0..12.0) * scale;
        let jx = rng.random_range(-3.0..3.0) * scale;
        let jy = rng.random_range(-3.0..3.0) * scale;
        let rotation = rng.random_range(0.0..PI);
        Self {
            center_x: width as f64 / 2.0 + jx,
            center_y: height as f64 / 2.0 + jy,
            semi_major,
            rotation,
        }
    }

    pub fn centered(height: usize, width: usize, semi_major: f64) -> Self {
        Self {
            center_x: width as f64 / 2.0,
            center_y: height as f64 / 2.0,
            semi_major,
            rotation: 0.0,
        }
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < 16 || width < 16 {
        return Err(Error::InvalidArgument(format!("image size {height}x{width} below 16x16")));
    }
    Ok(())
}

/// Fill color: channelwise `(1 - t) * A + t * B`, rounded.
pub fn fill_color(state: &InterpolationState) -> [u8; 3] {
    let a = COLOR_ANCHORS[state.color_edge.0];
    let b = COLOR_ANCHORS[state.color_edge.1];
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let v = (1.0 - state.t_color) * a[ch] as f64 + state.t_color * b[ch] as f64;
        out[ch] = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Number of covered subsamples (0..=16) per pixel.
fn coverage_counts(axis_ratio: f64, geometry: &Geometry, height: usize, width: usize) -> Vec<u8> {
    let a = geometry.semi_major;
    let b = a * axis_ratio;
    let (sin, cos) = geometry.rotation.sin_cos();
    let (inv_a2, inv_b2) = (1.0 / (a * a), 1.0 / (b * b));
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut counts = vec![0u8; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut n = 0u8;
            for sy in 0..SUPERSAMPLE {
                let dy = y as f64 + (sy as f64 + 0.5) * step - geometry.center_y;
                for sx in 0..SUPERSAMPLE {
                    let dx = x as f64 + (sx as f64 + 0.5) * step - geometry.center_x;
                    let u = dx * cos + dy * sin;
                    let v = -dx * sin + dy * cos;
                    if u * u * inv_a2 + v * v * inv_b2 <= 1.0 {
                        n += 1;
                    }
                }
            }
            counts[y * width + x] = n;
        }
    }
    counts
}

/// Fractional pixel coverage of the shape, in `[0, 1]`.
pub fn coverage_mask(state: &InterpolationState, geometry: &Geometry, height: usize, width: usize) -> Result<Vec<f32>> {
    check_dims(height, width)?;
    let full = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    Ok(coverage_counts(1.0 - 0.5 * state.t_shape, geometry, height, width)
        .into_iter()
        .map(|n| n as f32 / full)
        .collect())
}

pub fn render_with_geometry(state: &InterpolationState, geometry: &Geometry, height: usize, width: usize) -> Result<Image> {
    check_dims(height, width)?;
    let fill = fill_color(state);
    let full = (SUPERSAMPLE * SUPERSAMPLE) as u32;
    let counts = coverage_counts(1.0 - 0.5 * state.t_shape, geometry, height, width);
    let mut pixels = vec![0u8; height * width * 3];
    for (px, &n) in pixels.chunks_exact_mut(3).zip(&counts) {
        for ch in 0..3 {
            px[ch] = ((n as u32 * fill[ch] as u32 + full / 2) / full) as u8;
        }
    }
    Ok(Image { height, width, pixels })
}

/// Renders `state` on a black background with geometry drawn from `rng_seed`.
pub fn render(state: &InterpolationState, height: usize, width: usize, rng_seed: u64) -> Result<Image> {
    check_dims(height, width)?;
    let geometry = Geometry::sample(&mut rng_for(rng_seed, stream::GEOMETRY, 0), height, width);
    render_with_geometry(state, &geometry, height, width)
}
