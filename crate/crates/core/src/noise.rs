//! Seeded 2-D Perlin gradient noise with octave summation.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_domain, Result};

/// Lattice cells across the image for the first octave of [`perlin_noise`].
pub const DEFAULT_BASE_CELLS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PerlinField {
    height: usize,
    width: usize,
    octaves: usize,
    values: Vec<f64>,
}

impl PerlinField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn octaves(&self) -> usize {
        self.octaves
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Empirical quantile, `q` in `[0, 1]` (nearest rank).
    pub fn quantile(&self, q: f64) -> f64 {
        let mut sorted = self.values.clone();
        sorted.sort_by(f64::total_cmp);
        let idx = ((sorted.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
        sorted[idx]
    }
}

/// Perlin noise with [`DEFAULT_BASE_CELLS`] cells on the first octave.
pub fn perlin_noise(height: usize, width: usize, seed: u64, octaves: usize) -> Result<PerlinField> {
    perlin_noise_with_cells(height, width, seed, octaves, DEFAULT_BASE_CELLS)
}

/// Sums `octaves` layers; layer `k` has `base_cells * 2^k` cells per axis and
/// amplitude `0.5^k`. The sum is divided by the total amplitude.
pub fn perlin_noise_with_cells(
    height: usize,
    width: usize,
    seed: u64,
    octaves: usize,
    base_cells: usize,
) -> Result<PerlinField> {
    ensure_domain!(height >= 1 && width >= 1, "noise field needs nonzero dims");
    ensure_domain!(octaves >= 1, "at least one octave required");
    ensure_domain!(base_cells >= 1, "at least one lattice cell required");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; height * width];
    let mut amplitude = 1.0;
    let mut total_amp = 0.0;
    for k in 0..octaves {
        let cells = base_cells << k;
        add_octave(&mut values, height, width, cells, amplitude, &mut rng);
        total_amp += amplitude;
        amplitude *= 0.5;
    }
    for v in &mut values {
        *v /= total_amp;
    }
    Ok(PerlinField {
        height,
        width,
        octaves,
        values,
    })
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn add_octave(out: &mut [f64], h: usize, w: usize, cells: usize, amp: f64, rng: &mut impl Rng) {
    let n = cells + 1;
    let grads: Vec<(f64, f64)> = (0..n * n)
        .map(|_| {
            let a = rng.random::<f64>() * TAU;
            (a.cos(), a.sin())
        })
        .collect();
    let dot = |gy: usize, gx: usize, dy: f64, dx: f64| {
        let (cy, cx) = grads[gy * n + gx];
        cy * dy + cx * dx
    };
    for y in 0..h {
        let py = y as f64 * cells as f64 / h as f64;
        let iy = py.floor() as usize;
        let fy = py - iy as f64;
        let u = fade(fy);
        for x in 0..w {
            let px = x as f64 * cells as f64 / w as f64;
            let ix = px.floor() as usize;
            let fx = px - ix as f64;
            let v = fade(fx);
            let n00 = dot(iy, ix, fy, fx);
            let n01 = dot(iy, ix + 1, fy, fx - 1.0);
            let n10 = dot(iy + 1, ix, fy - 1.0, fx);
            let n11 = dot(iy + 1, ix + 1, fy - 1.0, fx - 1.0);
            let top = n00 + v * (n01 - n00);
            let bottom = n10 + v * (n11 - n10);
            out[y * w + x] += amp * std::f64::consts::SQRT_2 * (top + u * (bottom - top));
        }
    }
}
