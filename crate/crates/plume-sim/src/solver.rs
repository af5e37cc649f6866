//! Explicit finite-volume transport: first-order upwind advection plus
//! centered diffusion, marched with a positivity-preserving update.
//!
//! Each substep writes the new concentration as a non-negative combination
//! of the old field (`keep * c + sum(gain_f * c_neighbor) + source`), so
//! concentrations can never go negative. Advective flux through open
//! lateral/top boundaries leaves the domain and is accumulated into the
//! mass ledger; ground and terrain faces are zero-flux. Injection leads
//! every transport substep, so frame 0 already carries one substep of mass.

use ndarray::Array4;
use plume_core::{ConcentrationSequence, SourceSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::SimConfig;
use crate::error::SimError;
use crate::terrain::TerrainField;
use crate::wind::VelocityField;

/// Per-output-step mass accounting in source units.
#[derive(Debug, Clone, Serialize)]
pub struct MassBalanceRecord {
    pub step: usize,
    pub injected: f64,
    pub retained: f64,
    pub outflow: f64,
    pub decayed: f64,
    /// `|injected - retained - outflow - decayed| / injected`
    pub residual_rel: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub sequence: ConcentrationSequence,
    pub mass: Vec<MassBalanceRecord>,
    pub dt_solver_used: f64,
    pub n_substeps_per_output: usize,
    pub source_cell_zyx: [usize; 3],
}

struct Coefficients {
    out_rate: Vec<f64>,
    gain_xm: Vec<f64>,
    gain_xp: Vec<f64>,
    gain_ym: Vec<f64>,
    gain_yp: Vec<f64>,
    gain_zm: Vec<f64>,
    gain_zp: Vec<f64>,
    /// (cell, advective outflow rate through open domain boundaries) in 1/s.
    boundary_out: Vec<(usize, f64)>,
    /// Stability bound: max over cells of the total outflow rate (1/s).
    max_rate: f64,
}

/// Builds per-cell transfer rates (1/s) from the staggered wind field.
fn build_rates(wind: &VelocityField, diffusivity: f64, decay_rate: f64) -> Coefficients {
    let [nz, ny, nx] = wind.grid_shape();
    let [hz, hy, hx] = wind.cell_size_zyx;
    let n = nz * ny * nx;
    let idx = |k: usize, j: usize, i: usize| (k * ny + j) * nx + i;

    let mut out_rate = vec![0.0f64; n];
    let mut gain_xm = vec![0.0f64; n];
    let mut gain_xp = vec![0.0f64; n];
    let mut gain_ym = vec![0.0f64; n];
    let mut gain_yp = vec![0.0f64; n];
    let mut gain_zm = vec![0.0f64; n];
    let mut gain_zp = vec![0.0f64; n];
    let mut boundary = vec![0.0f64; n];

    let solid = |k: usize, j: usize, i: usize| wind.solid[(k, j, i)];

    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if solid(k, j, i) {
                    continue;
                }
                let p = idx(k, j, i);

                // x faces. Low face i, high face i+1.
                let u_lo = wind.u[(k, j, i)];
                let u_hi = wind.u[(k, j, i + 1)];
                if i > 0 && !solid(k, j, i - 1) {
                    out_rate[p] += (-u_lo).max(0.0) / hx;
                    gain_xm[p] = u_lo.max(0.0) / hx;
                    out_rate[p] += diffusivity / (hx * hx);
                    gain_xm[p] += diffusivity / (hx * hx);
                } else if i == 0 {
                    let r = (-u_lo).max(0.0) / hx;
                    out_rate[p] += r;
                    boundary[p] += r;
                }
                if i + 1 < nx && !solid(k, j, i + 1) {
                    out_rate[p] += u_hi.max(0.0) / hx;
                    gain_xp[p] = (-u_hi).max(0.0) / hx;
                    out_rate[p] += diffusivity / (hx * hx);
                    gain_xp[p] += diffusivity / (hx * hx);
                } else if i + 1 == nx {
                    let r = u_hi.max(0.0) / hx;
                    out_rate[p] += r;
                    boundary[p] += r;
                }

                // y faces.
                let v_lo = wind.v[(k, j, i)];
                let v_hi = wind.v[(k, j + 1, i)];
                if j > 0 && !solid(k, j - 1, i) {
                    out_rate[p] += (-v_lo).max(0.0) / hy;
                    gain_ym[p] = v_lo.max(0.0) / hy;
                    out_rate[p] += diffusivity / (hy * hy);
                    gain_ym[p] += diffusivity / (hy * hy);
                } else if j == 0 {
                    let r = (-v_lo).max(0.0) / hy;
                    out_rate[p] += r;
                    boundary[p] += r;
                }
                if j + 1 < ny && !solid(k, j + 1, i) {
                    out_rate[p] += v_hi.max(0.0) / hy;
                    gain_yp[p] = (-v_hi).max(0.0) / hy;
                    out_rate[p] += diffusivity / (hy * hy);
                    gain_yp[p] += diffusivity / (hy * hy);
                } else if j + 1 == ny {
                    let r = v_hi.max(0.0) / hy;
                    out_rate[p] += r;
                    boundary[p] += r;
                }

                // z faces: ground (k = 0) and terrain are zero-flux; the top
                // is an open outflow boundary.
                let w_lo = wind.w[(k, j, i)];
                let w_hi = wind.w[(k + 1, j, i)];
                if k > 0 && !solid(k - 1, j, i) {
                    out_rate[p] += (-w_lo).max(0.0) / hz;
                    gain_zm[p] = w_lo.max(0.0) / hz;
                    out_rate[p] += diffusivity / (hz * hz);
                    gain_zm[p] += diffusivity / (hz * hz);
                }
                if k + 1 < nz && !solid(k + 1, j, i) {
                    out_rate[p] += w_hi.max(0.0) / hz;
                    gain_zp[p] = (-w_hi).max(0.0) / hz;
                    out_rate[p] += diffusivity / (hz * hz);
                    gain_zp[p] += diffusivity / (hz * hz);
                } else if k + 1 == nz {
                    let r = w_hi.max(0.0) / hz;
                    out_rate[p] += r;
                    boundary[p] += r;
                }

                out_rate[p] += decay_rate;
            }
        }
    }

    let max_rate = out_rate.iter().cloned().fold(0.0, f64::max);
    let boundary_out: Vec<(usize, f64)> = boundary
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > 0.0)
        .map(|(p, &r)| (p, r))
        .collect();

    Coefficients {
        out_rate,
        gain_xm,
        gain_xp,
        gain_ym,
        gain_yp,
        gain_zm,
        gain_zp,
        boundary_out,
        max_rate,
    }
}

/// Runs one release and returns the output sequence plus the mass ledger.
pub fn simulate_release(
    terrain: &TerrainField,
    wind: &VelocityField,
    source: &SourceSpec,
    config: &SimConfig,
) -> Result<SimulationRun, SimError> {
    config.validate()?;
    let [nz, ny, nx] = config.grid_cells_zyx;
    if wind.grid_shape() != [nz, ny, nx] {
        return Err(SimError::invalid("wind field grid does not match config"));
    }
    let h = config.cell_size_zyx();
    let [hz, hy, hx] = h;
    let cell_volume = hz * hy * hx;
    let ext = config.domain_extent_zyx;

    if !(source.x_release >= 0.0
        && source.x_release < ext[2]
        && source.y_release >= 0.0
        && source.y_release < ext[1])
    {
        return Err(SimError::invalid("source position outside domain"));
    }
    if !(source.emission_rate > 0.0) {
        return Err(SimError::invalid("emission rate must be positive"));
    }

    // Source cell: the column containing (x, y); height one cell above the
    // first open cell unless an explicit release height is given.
    let ix = ((source.x_release / hx) as usize).min(nx - 1);
    let iy = ((source.y_release / hy) as usize).min(ny - 1);
    let ground_k = (0..nz)
        .find(|&k| !wind.solid[(k, iy, ix)])
        .ok_or_else(|| SimError::invalid("source column is entirely solid"))?;
    let iz = match source.z_release {
        Some(z_agl) => {
            let h_terr = terrain.height_at(source.x_release, source.y_release);
            let k = (((h_terr + z_agl) / hz) as usize).min(nz - 1);
            k.max(ground_k)
        }
        None => (ground_k + 1).min(nz - 1),
    };

    let decay_rate = config.decay_rate();
    let coeffs = build_rates(wind, config.diffusivity, decay_rate);

    // Stability: keep = 1 - dt * rate must stay >= 0.1.
    let dt_max = if coeffs.max_rate > 0.0 {
        0.9 / coeffs.max_rate
    } else {
        config.dt_output
    };
    let (dt, n_sub) = match config.dt_solver {
        Some(dt) => {
            if dt > dt_max {
                return Err(SimError::CflViolation { dt, dt_max });
            }
            let n_sub = (config.dt_output / dt).round();
            if n_sub < 1.0 || (n_sub * dt - config.dt_output).abs() > 1e-9 * config.dt_output {
                return Err(SimError::InvalidConfig(format!(
                    "dt_solver {dt} does not divide dt_output {}",
                    config.dt_output
                )));
            }
            (dt, n_sub as usize)
        }
        None => {
            let n_sub = (config.dt_output / dt_max).ceil().max(1.0) as usize;
            (config.dt_output / n_sub as f64, n_sub)
        }
    };

    // dt-scaled update coefficients.
    let n = nz * ny * nx;
    let keep: Vec<f64> = coeffs.out_rate.iter().map(|r| 1.0 - dt * r).collect();
    debug_assert!(keep.iter().all(|&k| k >= 0.0999));
    let scale = |v: &[f64]| -> Vec<f64> { v.iter().map(|g| g * dt).collect() };
    let gxm = scale(&coeffs.gain_xm);
    let gxp = scale(&coeffs.gain_xp);
    let gym = scale(&coeffs.gain_ym);
    let gyp = scale(&coeffs.gain_yp);
    let gzm = scale(&coeffs.gain_zm);
    let gzp = scale(&coeffs.gain_zp);

    let src_p = (iz * ny + iy) * nx + ix;
    let src_add = source.emission_rate * dt / cell_volume;

    let mut c = vec![0.0f64; n];
    let mut c_next = vec![0.0f64; n];
    let mut injected = 0.0f64;
    let mut outflow = 0.0f64;
    let mut decayed = 0.0f64;

    let t_steps = config.n_output_steps;
    let mut frames = Array4::<f32>::zeros((t_steps, nz, ny, nx));
    let mut ledger = Vec::with_capacity(t_steps);

    let slab = ny * nx;
    let record = |step: usize,
                  c: &[f64],
                  injected: f64,
                  outflow: f64,
                  decayed: f64,
                  frames: &mut Array4<f32>,
                  ledger: &mut Vec<MassBalanceRecord>|
     -> Result<(), SimError> {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Numerical {
                step,
                detail: "non-finite concentration".into(),
            });
        }
        let retained: f64 = c.iter().sum::<f64>() * cell_volume;
        let residual_rel =
            (injected - retained - outflow - decayed).abs() / injected.max(f64::MIN_POSITIVE);
        let mut frame = frames.index_axis_mut(ndarray::Axis(0), step);
        for (dst, &src) in frame.iter_mut().zip(c.iter()) {
            *dst = src as f32;
        }
        ledger.push(MassBalanceRecord {
            step,
            injected,
            retained,
            outflow,
            decayed,
            residual_rel,
        });
        Ok(())
    };

    // Frame 0: the priming injection, before any transport.
    c[src_p] += src_add;
    injected += source.emission_rate * dt;
    record(0, &c, injected, outflow, decayed, &mut frames, &mut ledger)?;

    for step in 1..t_steps {
        for _ in 0..n_sub {
            // Boundary outflow and decay drawn from the pre-step field.
            let mut out_step = 0.0;
            for &(p, rate) in &coeffs.boundary_out {
                out_step += c[p] * rate;
            }
            outflow += out_step * dt * cell_volume;
            if decay_rate > 0.0 {
                let total: f64 = c.iter().sum();
                decayed += total * decay_rate * dt * cell_volume;
            }

            // Gather update, parallel over z slabs; every term non-negative.
            c_next
                .par_chunks_mut(slab)
                .enumerate()
                .for_each(|(k, out)| {
                    let base = k * slab;
                    for j in 0..ny {
                        for i in 0..nx {
                            let q = j * nx + i;
                            let p = base + q;
                            let mut acc = c[p] * keep[p];
                            if i > 0 {
                                acc += gxm[p] * c[p - 1];
                            }
                            if i + 1 < nx {
                                acc += gxp[p] * c[p + 1];
                            }
                            if j > 0 {
                                acc += gym[p] * c[p - nx];
                            }
                            if j + 1 < ny {
                                acc += gyp[p] * c[p + nx];
                            }
                            if k > 0 {
                                acc += gzm[p] * c[p - slab];
                            }
                            if k + 1 < nz {
                                acc += gzp[p] * c[p + slab];
                            }
                            out[q] = acc;
                        }
                    }
                });
            std::mem::swap(&mut c, &mut c_next);

            c[src_p] += src_add;
            injected += source.emission_rate * dt;
        }
        record(step, &c, injected, outflow, decayed, &mut frames, &mut ledger)?;
    }

    let sequence = ConcentrationSequence::new(frames, config.dt_output, h, [0.0, 0.0, 0.0]);
    Ok(SimulationRun {
        sequence,
        mass: ledger,
        dt_solver_used: dt,
        n_substeps_per_output: n_sub,
        source_cell_zyx: [iz, iy, ix],
    })
}
