//! Latin hypercube sampling of wind conditions.

use plume_core::WindCondition;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::SimError;

/// Latin hypercube sample: `n` points over the given ranges, exactly one
/// point per equal-width stratum in every dimension. Deterministic in `seed`.
pub fn latin_hypercube(
    n: usize,
    ranges: &[(f64, f64)],
    seed: u64,
) -> Result<Vec<Vec<f64>>, SimError> {
    if n == 0 {
        return Err(SimError::invalid("sample count must be at least 1"));
    }
    for &(lo, hi) in ranges {
        if !(hi > lo) {
            return Err(SimError::invalid(format!("bad range [{lo}, {hi}]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; ranges.len()]; n];
    for (d, &(lo, hi)) in ranges.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, point) in points.iter_mut().enumerate() {
            let u: f64 = rng.random::<f64>();
            point[d] = lo + (strata[i] as f64 + u) / n as f64 * (hi - lo);
        }
    }
    Ok(points)
}

/// Samples `n` wind conditions over the experimental-design ranges
/// (speed 1.5..10 m/s, direction 340..360 degrees).
pub fn sample_conditions(n: usize, seed: u64) -> Result<Vec<WindCondition>, SimError> {
    let points = latin_hypercube(
        n,
        &[WindCondition::SPEED_RANGE, WindCondition::DIRECTION_RANGE],
        seed,
    )?;
    Ok(points
        .into_iter()
        .map(|p| WindCondition {
            speed_ms: p[0],
            direction_deg: p[1],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_conditions_inside_ranges() {
        let conds = sample_conditions(100, 42).unwrap();
        assert_eq!(conds.len(), 100);
        for c in &conds {
            assert!((1.5..=10.0).contains(&c.speed_ms));
            assert!((340.0..=360.0).contains(&c.direction_deg));
        }
    }

    #[test]
    fn single_sample_inside_both_ranges() {
        let conds = sample_conditions(1, 9).unwrap();
        assert_eq!(conds.len(), 1);
        assert!((1.5..=10.0).contains(&conds[0].speed_ms));
        assert!((340.0..=360.0).contains(&conds[0].direction_deg));
    }

    #[test]
    fn one_sample_per_stratum() {
        // Brute-force bin count over the returned list for both parameters.
        let n = 10;
        let conds = sample_conditions(n, 7).unwrap();
        let mut speed_bins = vec![0usize; n];
        let mut dir_bins = vec![0usize; n];
        for c in &conds {
            let sb = ((c.speed_ms - 1.5) / 0.85).floor() as usize;
            let db = ((c.direction_deg - 340.0) / 2.0).floor() as usize;
            speed_bins[sb.min(n - 1)] += 1;
            dir_bins[db.min(n - 1)] += 1;
        }
        assert!(speed_bins.iter().all(|&b| b == 1), "{speed_bins:?}");
        assert!(dir_bins.iter().all(|&b| b == 1), "{dir_bins:?}");
    }

    #[test]
    fn deterministic_in_seed() {
        let a = sample_conditions(25, 3).unwrap();
        let b = sample_conditions(25, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.speed_ms, y.speed_ms);
            assert_eq!(x.direction_deg, y.direction_deg);
        }
        let c = sample_conditions(25, 4).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.speed_ms != y.speed_ms));
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(sample_conditions(0, 1).is_err());
    }
}
