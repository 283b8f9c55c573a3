//! Numerical certification of `(N, i)`-dominated splittings along sampled
//! orbits.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::cocycle::{hierarchy_indices, splittings_along_orbit, LyapunovSpectrum, SplittingAtPoint, SplittingParams};
use crate::error::{Error, Result};
use crate::linalg::{max_singular_value, min_singular_value};
use crate::seeds;
use crate::systems::{Dynamics, TorusPoint};

/// A splitting is dominated when the ratio is at most this.
pub const DOMINATION_BOUND: f64 = 0.5;
const SUBMULTIPLICATIVE_SLACK: f64 = 1e-9;
/// Orbit points of the first sample used for the `2N` spot check.
const SPOT_CHECK_POINTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct DominationCertificate {
    pub level: usize,
    /// Certified power.
    pub n: usize,
    /// Max over sampled orbit points of `||Df^N|_E|| / m(Df^N|_F)`.
    pub worst_ratio: f64,
    pub sample_count: usize,
    pub orbit_length: usize,
    /// The `2N` spot check `ratio_2N <= ratio_N(x) ratio_N(f^N x)` held.
    pub submultiplicative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DominationParams {
    pub samples: usize,
    pub orbit_length: usize,
    pub n_max: usize,
    pub splitting_steps: usize,
    pub seed: u64,
}

impl Default for DominationParams {
    fn default() -> Self {
        Self {
            samples: 100,
            orbit_length: 1_000,
            n_max: 64,
            splitting_steps: 1_000,
            seed: 0,
        }
    }
}

/// Jacobian of `f^n` at `x`.
pub fn jacobian_power<M: Dynamics + ?Sized>(map: &M, x: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let d = map.dim();
    let mut point = x.clone();
    let mut jac = DMatrix::identity(d, d);
    for _ in 0..n {
        jac = map.jacobian(&point) * jac;
        point = TorusPoint::from_lift(&map.lift_forward(&point)).to_vector();
    }
    jac
}

fn ratio_for(jac: &DMatrix<f64>, split: &SplittingAtPoint) -> Result<f64> {
    let weakest = min_singular_value(&(jac * &split.f_basis));
    if !(weakest > 1e-300) {
        return Err(Error::Singular(weakest));
    }
    let strongest = if split.e_basis.ncols() == 0 {
        0.0
    } else {
        max_singular_value(&(jac * &split.e_basis))
    };
    Ok(strongest / weakest)
}

/// `||Df^N|_E|| / m(Df^N|_F)` at the splitting's base point.
pub fn domination_ratio<M: Dynamics + ?Sized>(
    map: &M,
    splitting: &SplittingAtPoint,
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParameter("N must be >= 1".into()));
    }
    let jac = jacobian_power(map, &splitting.base.to_vector(), n);
    ratio_for(&jac, splitting)
}

fn sample_point(seed: u64, index: usize, d: usize) -> TorusPoint {
    let mut rng = seeds::stream(seed, "domination", index as u64);
    TorusPoint::new((0..d).map(|_| rng.random::<f64>()).collect())
}

/// Worst ratio at power `n` over every orbit point of every sample.
fn worst_ratio<M: Dynamics + ?Sized>(
    map: &M,
    orbits: &[Vec<SplittingAtPoint>],
    n: usize,
) -> Result<f64> {
    let per_sample: Vec<Result<f64>> = orbits
        .par_iter()
        .map(|orbit| {
            orbit.iter().try_fold(0.0f64, |worst, split| {
                Ok(worst.max(domination_ratio(map, split, n)?))
            })
        })
        .collect();
    per_sample
        .into_iter()
        .try_fold(0.0f64, |acc, r| Ok(acc.max(r?)))
}

/// Searches the smallest `N <= n_max` for which every sampled orbit point is
/// dominated.
pub fn certify_domination<M: Dynamics + ?Sized>(
    map: &M,
    spectrum: &LyapunovSpectrum,
    level: usize,
    params: &DominationParams,
) -> Result<DominationCertificate> {
    let (_, fast_dim) = hierarchy_indices(spectrum, level)?;
    if params.samples == 0 || params.orbit_length == 0 || params.n_max == 0 {
        return Err(Error::InvalidParameter(
            "samples, orbit_length and N_max must be >= 1".into(),
        ));
    }
    let d = map.dim();
    let orbits: Vec<Vec<SplittingAtPoint>> = (0..params.samples)
        .into_par_iter()
        .map(|s| {
            let x = sample_point(params.seed, s, d);
            let split_params = SplittingParams {
                steps: params.splitting_steps,
                seed: seeds::derive_seed(params.seed, "domination-splitting", s as u64),
            };
            splittings_along_orbit(map, &x, level, fast_dim, params.orbit_length, &split_params)
        })
        .collect::<Result<_>>()?;

    for n in 1..=params.n_max {
        let worst = worst_ratio(map, &orbits, n)?;
        if worst <= DOMINATION_BOUND {
            let submultiplicative = spot_check(map, &orbits[0], n, worst)?;
            return Ok(DominationCertificate {
                level,
                n,
                worst_ratio: worst,
                sample_count: params.samples,
                orbit_length: params.orbit_length,
                submultiplicative,
            });
        }
    }
    Err(Error::NotDominatedWithin(params.n_max))
}

fn spot_check<M: Dynamics + ?Sized>(
    map: &M,
    orbit: &[SplittingAtPoint],
    n: usize,
    worst: f64,
) -> Result<bool> {
    let mut ok = true;
    for j in 0..SPOT_CHECK_POINTS.min(orbit.len().saturating_sub(n)) {
        let here = domination_ratio(map, &orbit[j], n)?;
        let there = domination_ratio(map, &orbit[j + n], n)?;
        let doubled = domination_ratio(map, &orbit[j], 2 * n)?;
        ok &= doubled <= here * there + SUBMULTIPLICATIVE_SLACK;
        ok &= doubled <= worst * worst + SUBMULTIPLICATIVE_SLACK;
    }
    Ok(ok)
}
