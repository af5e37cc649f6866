//! Procedural terrain synthesis: randomized smoothed ridges and bumps.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TerrainConfig;

/// Height field over (y, x) at cell centers, in metres above domain floor.
#[derive(Debug, Clone)]
pub struct TerrainField {
    pub heights: Array2<f64>,
    pub cell_size_xy: f64,
    pub seed: u64,
}

impl TerrainField {
    pub fn flat(ny: usize, nx: usize, cell_size_xy: f64) -> Self {
        TerrainField {
            heights: Array2::zeros((ny, nx)),
            cell_size_xy,
            seed: 0,
        }
    }

    /// Bilinear height at a physical (x, y) position, clamped to the grid.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let (ny, nx) = self.heights.dim();
        let fx = (x / self.cell_size_xy - 0.5).clamp(0.0, (nx - 1) as f64);
        let fy = (y / self.cell_size_xy - 0.5).clamp(0.0, (ny - 1) as f64);
        let ix = fx.floor() as usize;
        let iy = fy.floor() as usize;
        let ix1 = (ix + 1).min(nx - 1);
        let iy1 = (iy + 1).min(ny - 1);
        let wx = fx - ix as f64;
        let wy = fy - iy as f64;
        let h00 = self.heights[(iy, ix)];
        let h01 = self.heights[(iy, ix1)];
        let h10 = self.heights[(iy1, ix)];
        let h11 = self.heights[(iy1, ix1)];
        (1.0 - wy) * ((1.0 - wx) * h00 + wx * h01) + wy * ((1.0 - wx) * h10 + wx * h11)
    }

    pub fn max_height(&self) -> f64 {
        self.heights.iter().cloned().fold(0.0, f64::max)
    }
}

/// Deterministic terrain synthesis: `n_features` anisotropic Gaussian
/// ridges/bumps (some negative, carving valleys), rescaled so the relief
/// spans exactly `[0, amplitude]`. Feature widths are bounded below by a
/// fraction of the correlation length, which keeps the field band-limited.
pub fn generate_terrain(
    cfg: &TerrainConfig,
    ny: usize,
    nx: usize,
    cell_size_xy: f64,
    seed: u64,
) -> TerrainField {
    let mut heights = Array2::<f64>::zeros((ny, nx));
    if cfg.amplitude <= 0.0 || cfg.n_features == 0 {
        return TerrainField {
            heights,
            cell_size_xy,
            seed,
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext_x = nx as f64 * cell_size_xy;
    let ext_y = ny as f64 * cell_size_xy;

    struct Feature {
        cx: f64,
        cy: f64,
        cos_t: f64,
        sin_t: f64,
        inv_2sl2: f64,
        inv_2ss2: f64,
        amp: f64,
    }
    let features: Vec<Feature> = (0..cfg.n_features)
        .map(|_| {
            let cx = rng.random_range(0.0..ext_x);
            let cy = rng.random_range(0.0..ext_y);
            let sigma_long = cfg.correlation_length * rng.random_range(0.6..2.0);
            let sigma_short = sigma_long * rng.random_range(0.35..1.0);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let amp = rng.random_range(-1.0..1.0f64);
            Feature {
                cx,
                cy,
                cos_t: theta.cos(),
                sin_t: theta.sin(),
                inv_2sl2: 0.5 / (sigma_long * sigma_long),
                inv_2ss2: 0.5 / (sigma_short * sigma_short),
                amp,
            }
        })
        .collect();

    for iy in 0..ny {
        let y = (iy as f64 + 0.5) * cell_size_xy;
        for ix in 0..nx {
            let x = (ix as f64 + 0.5) * cell_size_xy;
            let mut h = 0.0;
            for f in &features {
                let dx = x - f.cx;
                let dy = y - f.cy;
                let along = dx * f.cos_t + dy * f.sin_t;
                let across = -dx * f.sin_t + dy * f.cos_t;
                h += f.amp * (-(along * along * f.inv_2sl2 + across * across * f.inv_2ss2)).exp();
            }
            heights[(iy, ix)] = h;
        }
    }

    let min = heights.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        let scale = cfg.amplitude / (max - min);
        heights.mapv_inplace(|h| (h - min) * scale);
    } else {
        heights.fill(0.0);
    }

    TerrainField {
        heights,
        cell_size_xy,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(amplitude: f64) -> TerrainConfig {
        TerrainConfig {
            amplitude,
            correlation_length: 900.0,
            n_features: 16,
        }
    }

    #[test]
    fn zero_amplitude_is_flat() {
        let t = generate_terrain(&cfg(0.0), 40, 40, 80.0, 5);
        assert!(t.heights.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_terrain(&cfg(400.0), 40, 40, 80.0, 5);
        let b = generate_terrain(&cfg(400.0), 40, 40, 80.0, 5);
        assert_eq!(a.heights, b.heights);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_terrain(&cfg(400.0), 40, 40, 80.0, 1);
        let b = generate_terrain(&cfg(400.0), 40, 40, 80.0, 2);
        assert!(a.heights.iter().zip(b.heights.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn heights_span_amplitude_and_stay_non_negative() {
        let t = generate_terrain(&cfg(400.0), 60, 60, 80.0, 9);
        let min = t.heights.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = t.max_height();
        assert!(min >= 0.0 && min < 1e-9);
        assert!((max - 400.0).abs() < 1e-9);
    }

    #[test]
    fn field_is_band_limited() {
        // No single-cell spikes: each cell stays close to its 4-neighbor mean.
        let t = generate_terrain(&cfg(400.0), 60, 60, 80.0, 13);
        let h = &t.heights;
        let mut worst = 0.0f64;
        for y in 1..59 {
            for x in 1..59 {
                let nb = (h[(y - 1, x)] + h[(y + 1, x)] + h[(y, x - 1)] + h[(y, x + 1)]) / 4.0;
                worst = worst.max((h[(y, x)] - nb).abs());
            }
        }
        assert!(worst < 0.05 * 400.0, "roughness {worst}");
    }
}
