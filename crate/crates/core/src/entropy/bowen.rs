//! Leaf Bowen balls `V^i(f, x, n, ε)`.

use nalgebra::{DMatrix, DVector};

use crate::entropy::rays::{stretch_preconditioner, BaseOrbit, RayQuadrature};
use crate::error::{Error, Result};
use crate::leaf::LeafPatch;
use crate::linalg::{min_singular_value, unit_ball_volume};
use crate::systems::{Dynamics, TorusPoint};

/// Pieces of the polyline that carries a radial leaf path forward.
const PATH_PIECES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct BowenBallRecord {
    pub base: TorusPoint,
    pub level: usize,
    pub n: usize,
    pub epsilon: f64,
    /// Leaf volume of the ball.
    pub volume: f64,
    /// Closed form rather than quadrature.
    pub exact: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct QuadratureOptions {
    /// Ray directions for two-dimensional leaves (random directions above).
    pub directions: usize,
    pub force_quadrature: bool,
    pub seed: u64,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            directions: 64,
            force_quadrature: false,
            seed: 0,
        }
    }
}

pub fn bowen_ball_volume<M: Dynamics + ?Sized>(
    map: &M,
    patch: &LeafPatch,
    n: usize,
    epsilon: f64,
) -> Result<BowenBallRecord> {
    bowen_ball_volume_with(map, patch, n, epsilon, &QuadratureOptions::default())
}

pub fn bowen_ball_volume_with<M: Dynamics + ?Sized>(
    map: &M,
    patch: &LeafPatch,
    n: usize,
    epsilon: f64,
    options: &QuadratureOptions,
) -> Result<BowenBallRecord> {
    check_ball(patch, n, epsilon)?;
    let record = |volume, exact| BowenBallRecord {
        base: patch.base.clone(),
        level: patch.level,
        n,
        epsilon,
        volume,
        exact,
    };
    if !options.force_quadrature {
        if let Some(volume) = closed_form(map, patch, n, epsilon) {
            return Ok(record(volume, true));
        }
    }
    let orbit = BaseOrbit::new(map, &patch.anchor(), n);
    let precond = stretch_preconditioner(&orbit.jacobian(map), &patch.tangent_at(&vec![0.0; patch.fast_dim()]))?;
    let quad = RayQuadrature::new(precond, options.directions, options.seed);
    let result = quad.volume(patch, |v, r| {
        path_lengths_below(map, &orbit, &radial_path(patch, v, r), epsilon)
    });
    if result.clipped {
        return Err(Error::PatchTooSmall);
    }
    Ok(record(result.volume, false))
}

pub(crate) fn check_ball(patch: &LeafPatch, n: usize, epsilon: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter("epsilon must be positive".into()));
    }
    if epsilon >= patch.radius {
        return Err(Error::EpsilonTooLarge {
            epsilon,
            radius: patch.radius,
        });
    }
    Ok(())
}

/// `V_k ε^k / |det C|^{n-1}` for an affine patch whose fast block `C`
/// expands every vector, so the time `n-1` constraint implies the others.
fn closed_form<M: Dynamics + ?Sized>(map: &M, patch: &LeafPatch, n: usize, epsilon: f64) -> Option<f64> {
    if !patch.is_affine() {
        return None;
    }
    let a = map.linear_part()?;
    let c: DMatrix<f64> = patch.f_basis.transpose() * a * &patch.f_basis;
    if min_singular_value(&c) < 1.0 {
        return None;
    }
    let k = patch.fast_dim();
    let det = c.determinant().abs();
    Some(unit_ball_volume(k) * epsilon.powi(k as i32) / det.powi(n as i32 - 1))
}

/// Leaf points along `t r v`, `t ∈ [0, 1]`.
pub(crate) fn radial_path(patch: &LeafPatch, v: &DVector<f64>, r: f64) -> Vec<DVector<f64>> {
    (0..=PATH_PIECES)
        .map(|j| {
            let w: Vec<f64> = (v * (r * j as f64 / PATH_PIECES as f64)).iter().copied().collect();
            patch.point_at(&w)
        })
        .collect()
}

fn polyline_length(points: &[DVector<f64>]) -> f64 {
    points.windows(2).map(|p| (&p[1] - &p[0]).norm()).sum()
}

/// Whether every image `f^k` of the path, `k < orbit.len()`, is shorter
/// than `epsilon`.
fn path_lengths_below<M: Dynamics + ?Sized>(
    map: &M,
    orbit: &BaseOrbit,
    path: &[DVector<f64>],
    epsilon: f64,
) -> bool {
    let mut points = path.to_vec();
    for k in 0..orbit.len() {
        if polyline_length(&points) >= epsilon {
            return false;
        }
        if k + 1 < orbit.len() {
            for p in points.iter_mut() {
                *p = orbit.advance(map, p, k);
            }
        }
    }
    true
}
