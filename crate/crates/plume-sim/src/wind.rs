//! Terrain-following diagnostic wind field on a staggered (MAC) grid.
//!
//! The initial field is a log-law horizontal profile scaled to the sampled
//! speed at the reference height, zeroed at faces blocked by terrain. A
//! single pressure-projection pass (conjugate gradient on the cell-centered
//! Poisson problem) then removes the discrete divergence, which deflects the
//! flow over and around terrain while keeping no-penetration at the ground.

use ndarray::Array3;
use plume_core::WindCondition;

use crate::config::SimConfig;
use crate::error::SimError;
use crate::terrain::TerrainField;

/// Staggered velocity components plus the solid-cell mask.
///
/// `u` lives on x-faces `(nz, ny, nx+1)`, `v` on y-faces `(nz, ny+1, nx)`,
/// `w` on z-faces `(nz+1, ny, nx)`. Positive components point toward +x
/// (east), +y (north), +z (up).
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub u: Array3<f64>,
    pub v: Array3<f64>,
    pub w: Array3<f64>,
    pub solid: Array3<bool>,
    pub cell_size_zyx: [f64; 3],
}

impl VelocityField {
    /// All-zero field over open (terrain-free) cells.
    pub fn quiescent(nz: usize, ny: usize, nx: usize, cell_size_zyx: [f64; 3]) -> Self {
        VelocityField {
            u: Array3::zeros((nz, ny, nx + 1)),
            v: Array3::zeros((nz, ny + 1, nx)),
            w: Array3::zeros((nz + 1, ny, nx)),
            solid: Array3::from_elem((nz, ny, nx), false),
            cell_size_zyx,
        }
    }

    pub fn grid_shape(&self) -> [usize; 3] {
        let (nz, ny, nx) = self.solid.dim();
        [nz, ny, nx]
    }

    pub fn max_speed(&self) -> f64 {
        let m = |a: &Array3<f64>| a.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
        m(&self.u).max(m(&self.v)).max(m(&self.w))
    }

    /// Discrete divergence per fluid cell, max norm (1/s).
    pub fn max_divergence(&self) -> f64 {
        let [nz, ny, nx] = self.grid_shape();
        let [hz, hy, hx] = self.cell_size_zyx;
        let mut worst = 0.0f64;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if self.solid[(k, j, i)] {
                        continue;
                    }
                    let div = (self.u[(k, j, i + 1)] - self.u[(k, j, i)]) / hx
                        + (self.v[(k, j + 1, i)] - self.v[(k, j, i)]) / hy
                        + (self.w[(k + 1, j, i)] - self.w[(k, j, i)]) / hz;
                    worst = worst.max(div.abs());
                }
            }
        }
        worst
    }
}

/// Log-law speed at `agl` metres above ground, equal to `speed` at the
/// reference height and zero at or below the roughness length.
pub fn wind_profile(agl: f64, speed: f64, reference_height: f64, roughness_length: f64) -> f64 {
    let z0 = roughness_length;
    speed * (agl.max(z0) / z0).ln() / (reference_height / z0).ln()
}

/// Builds the mass-consistent wind field for one sampled condition.
pub fn build_wind_field(
    terrain: &TerrainField,
    condition: &WindCondition,
    config: &SimConfig,
) -> Result<VelocityField, SimError> {
    config.validate()?;
    let [nz, ny, nx] = config.grid_cells_zyx;
    let h = config.cell_size_zyx();
    let (tny, tnx) = terrain.heights.dim();
    if (tny, tnx) != (ny, nx) {
        return Err(SimError::invalid(format!(
            "terrain grid ({tny},{tnx}) does not match config ({ny},{nx})"
        )));
    }

    let (dir_x, dir_y) = condition.flow_direction_xy();
    let speed = condition.speed_ms;
    let z_ref = config.wind.reference_height;
    let z0 = config.wind.roughness_length;

    let solid = Array3::from_shape_fn((nz, ny, nx), |(k, j, i)| {
        let zc = (k as f64 + 0.5) * h[0];
        zc < terrain.heights[(j, i)]
    });

    let mut field = VelocityField {
        u: Array3::zeros((nz, ny, nx + 1)),
        v: Array3::zeros((nz, ny + 1, nx)),
        w: Array3::zeros((nz + 1, ny, nx)),
        solid,
        cell_size_zyx: h,
    };
    let is_fluid = |f: &VelocityField, k: isize, j: isize, i: isize| -> bool {
        k >= 0
            && j >= 0
            && i >= 0
            && (k as usize) < nz
            && (j as usize) < ny
            && (i as usize) < nx
            && !f.solid[(k as usize, j as usize, i as usize)]
    };

    // Initial horizontal flow from the profile; faces touching solid cells
    // stay zero (no-penetration at terrain and ground).
    for k in 0..nz {
        let zc = (k as f64 + 0.5) * h[0];
        for j in 0..ny {
            let yc = (j as f64 + 0.5) * h[1];
            for i in 0..=nx {
                let left = is_fluid(&field, k as isize, j as isize, i as isize - 1);
                let right = is_fluid(&field, k as isize, j as isize, i as isize);
                let open = if i == 0 {
                    right
                } else if i == nx {
                    left
                } else {
                    left && right
                };
                if !open {
                    continue;
                }
                let x = i as f64 * h[2];
                let agl = zc - terrain.height_at(x, yc);
                field.u[(k, j, i)] = dir_x * wind_profile(agl, speed, z_ref, z0);
            }
        }
        for j in 0..=ny {
            let y = j as f64 * h[1];
            for i in 0..nx {
                let south = is_fluid(&field, k as isize, j as isize - 1, i as isize);
                let north = is_fluid(&field, k as isize, j as isize, i as isize);
                let open = if j == 0 {
                    north
                } else if j == ny {
                    south
                } else {
                    south && north
                };
                if !open {
                    continue;
                }
                let xc = (i as f64 + 0.5) * h[2];
                let agl = zc - terrain.height_at(xc, y);
                field.v[(k, j, i)] = dir_y * wind_profile(agl, speed, z_ref, z0);
            }
        }
    }
    // w starts at rest; the projection introduces the vertical deflection.

    project_divergence_free(&mut field, speed, config)?;
    Ok(field)
}

/// Removes the discrete divergence with one conjugate-gradient pressure
/// solve. Open lateral/top boundaries use a zero ghost potential; ground and
/// terrain faces are blocked (Neumann), preserving no-penetration.
fn project_divergence_free(
    field: &mut VelocityField,
    speed: f64,
    config: &SimConfig,
) -> Result<(), SimError> {
    let [nz, ny, nx] = field.grid_shape();
    let [hz, hy, hx] = field.cell_size_zyx;
    let n = nz * ny * nx;
    let idx = |k: usize, j: usize, i: usize| (k * ny + j) * nx + i;

    let min_h = hx.min(hy).min(hz);
    let tolerance = (config.wind.projection_rel_tol * speed / min_h).max(1e-14);

    let solid: Vec<bool> = field.solid.iter().cloned().collect();
    let inv_hx2 = 1.0 / (hx * hx);
    let inv_hy2 = 1.0 / (hy * hy);
    let inv_hz2 = 1.0 / (hz * hz);

    // Right-hand side: -div(u), since the assembled operator below is the
    // negative Laplacian (the SPD form).
    let mut b = vec![0.0f64; n];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = idx(k, j, i);
                if solid[p] {
                    continue;
                }
                b[p] = -((field.u[(k, j, i + 1)] - field.u[(k, j, i)]) / hx
                    + (field.v[(k, j + 1, i)] - field.v[(k, j, i)]) / hy
                    + (field.w[(k + 1, j, i)] - field.w[(k, j, i)]) / hz);
            }
        }
    }

    // 7-point Laplacian; solid rows are identity so they stay decoupled.
    let apply = |phi: &[f64], out: &mut [f64]| {
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let p = idx(k, j, i);
                    if solid[p] {
                        out[p] = phi[p];
                        continue;
                    }
                    let mut acc = 0.0;
                    // x neighbors: open boundary -> ghost 0 (Dirichlet).
                    if i > 0 {
                        if !solid[p - 1] {
                            acc += (phi[p] - phi[p - 1]) * inv_hx2;
                        }
                    } else {
                        acc += phi[p] * inv_hx2;
                    }
                    if i + 1 < nx {
                        if !solid[p + 1] {
                            acc += (phi[p] - phi[p + 1]) * inv_hx2;
                        }
                    } else {
                        acc += phi[p] * inv_hx2;
                    }
                    if j > 0 {
                        if !solid[p - nx] {
                            acc += (phi[p] - phi[p - nx]) * inv_hy2;
                        }
                    } else {
                        acc += phi[p] * inv_hy2;
                    }
                    if j + 1 < ny {
                        if !solid[p + nx] {
                            acc += (phi[p] - phi[p + nx]) * inv_hy2;
                        }
                    } else {
                        acc += phi[p] * inv_hy2;
                    }
                    // z: ground is blocked (Neumann), top is open.
                    if k > 0 && !solid[p - nx * ny] {
                        acc += (phi[p] - phi[p - nx * ny]) * inv_hz2;
                    }
                    if k + 1 < nz {
                        if !solid[p + nx * ny] {
                            acc += (phi[p] - phi[p + nx * ny]) * inv_hz2;
                        }
                    } else {
                        acc += phi[p] * inv_hz2;
                    }
                    out[p] = acc;
                }
            }
        }
    };

    // Conjugate gradient to ||r||_inf below tolerance.
    let mut phi = vec![0.0f64; n];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0f64; n];
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let inf = |a: &[f64]| a.iter().fold(0.0f64, |m, &x| m.max(x.abs()));

    let mut rr = dot(&r, &r);
    let mut residual = inf(&r);
    let mut iterations = 0usize;
    while residual > tolerance {
        if iterations >= config.wind.projection_max_iter {
            return Err(SimError::ProjectionFailed {
                residual,
                tolerance,
            });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(SimError::ProjectionFailed {
                residual,
                tolerance,
            });
        }
        let alpha = rr / pap;
        for q in 0..n {
            phi[q] += alpha * p[q];
            r[q] -= alpha * ap[q];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for q in 0..n {
            p[q] = r[q] + beta * p[q];
        }
        residual = inf(&r);
        iterations += 1;
    }

    // Correct faces: u -= grad(phi), with ghost 0 outside open boundaries.
    let fluid = |k: isize, j: isize, i: isize| -> bool {
        k >= 0
            && j >= 0
            && i >= 0
            && (k as usize) < nz
            && (j as usize) < ny
            && (i as usize) < nx
            && !solid[idx(k as usize, j as usize, i as usize)]
    };
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..=nx {
                let l = fluid(k as isize, j as isize, i as isize - 1);
                let rt = fluid(k as isize, j as isize, i as isize);
                let open = (i == 0 && rt) || (i == nx && l) || (l && rt);
                if !open {
                    continue;
                }
                let phi_l = if i > 0 && l { phi[idx(k, j, i - 1)] } else { 0.0 };
                let phi_r = if i < nx && rt { phi[idx(k, j, i)] } else { 0.0 };
                field.u[(k, j, i)] -= (phi_r - phi_l) / hx;
            }
        }
        for j in 0..=ny {
            for i in 0..nx {
                let s = fluid(k as isize, j as isize - 1, i as isize);
                let nn = fluid(k as isize, j as isize, i as isize);
                let open = (j == 0 && nn) || (j == ny && s) || (s && nn);
                if !open {
                    continue;
                }
                let phi_s = if j > 0 && s { phi[idx(k, j - 1, i)] } else { 0.0 };
                let phi_n = if j < ny && nn { phi[idx(k, j, i)] } else { 0.0 };
                field.v[(k, j, i)] -= (phi_n - phi_s) / hy;
            }
        }
    }
    for k in 1..=nz {
        for j in 0..ny {
            for i in 0..nx {
                let below = fluid(k as isize - 1, j as isize, i as isize);
                let above = fluid(k as isize, j as isize, i as isize);
                let open = (k == nz && below) || (below && above);
                if !open {
                    continue;
                }
                let phi_b = phi[idx(k - 1, j, i)];
                let phi_a = if k < nz && above { phi[idx(k, j, i)] } else { 0.0 };
                field.w[(k, j, i)] -= (phi_a - phi_b) / hz;
            }
        }
    }

    Ok(())
}
