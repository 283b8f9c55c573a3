//! Shared machinery for leaf regions that are star-shaped about the base
//! point: co-iteration of nearby points with the base orbit, and volume by
//! bisection along rays in preconditioned fast coordinates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::leaf::LeafPatch;
use crate::linalg::unit_ball_volume;
use crate::seeds;
use crate::systems::Dynamics;

const BISECTION_STEPS: usize = 80;
const RADIAL_NODES: usize = 32;

/// Orbit of a base point kept in `[0,1)^d`, with the integer shifts applied at
/// every step so nearby lifted points can follow it without growing.
pub(crate) struct BaseOrbit {
    pub points: Vec<DVector<f64>>,
    shifts: Vec<DVector<f64>>,
}

impl BaseOrbit {
    pub fn new<M: Dynamics + ?Sized>(map: &M, anchor: &DVector<f64>, len: usize) -> Self {
        let mut points = Vec::with_capacity(len);
        let mut shifts = Vec::with_capacity(len);
        points.push(anchor.clone());
        for k in 1..len {
            let image = map.lift_forward(&points[k - 1]);
            let shift = image.map(f64::floor);
            points.push(image - &shift);
            shifts.push(shift);
        }
        Self { points, shifts }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Image of a nearby lifted point one step further along the orbit.
    pub fn advance<M: Dynamics + ?Sized>(&self, map: &M, y: &DVector<f64>, k: usize) -> DVector<f64> {
        map.lift_forward(y) - &self.shifts[k]
    }

    /// `Df^{len-1}` at the base point.
    pub fn jacobian<M: Dynamics + ?Sized>(&self, map: &M) -> DMatrix<f64> {
        let d = map.dim();
        self.points[..self.len() - 1]
            .iter()
            .fold(DMatrix::identity(d, d), |acc, p| map.jacobian(p) * acc)
    }
}

/// Preconditioner `P` with `w = P z` such that the leaf tangent stretched by
/// `jac` acts isometrically on `z`.
pub(crate) fn stretch_preconditioner(jac: &DMatrix<f64>, tangent: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let stretched = jac * tangent;
    let r = stretched.qr().r();
    r.try_inverse().ok_or(Error::Singular(0.0))
}

pub(crate) struct RayVolume {
    pub volume: f64,
    /// Some ray reached the patch boundary while still inside the region.
    pub clipped: bool,
}

pub(crate) struct RayQuadrature {
    k: usize,
    precond: DMatrix<f64>,
    det: f64,
    /// Unit directions in `z` space with quadrature weights.
    dirs: Vec<(DVector<f64>, f64)>,
}

impl RayQuadrature {
    pub fn new(precond: DMatrix<f64>, directions: usize, seed: u64) -> Self {
        let k = precond.ncols();
        let det = precond.determinant().abs();
        let dirs = match k {
            1 => vec![
                (DVector::from_element(1, 1.0), 1.0),
                (DVector::from_element(1, -1.0), 1.0),
            ],
            2 => {
                let m = directions.max(8);
                let step = std::f64::consts::TAU / m as f64;
                (0..m)
                    .map(|j| {
                        let t = (j as f64 + 0.5) * step;
                        (DVector::from_vec(vec![t.cos(), t.sin()]), step)
                    })
                    .collect()
            }
            _ => {
                let m = directions.max(8 * k);
                let area = k as f64 * unit_ball_volume(k);
                let mut rng = seeds::stream(seed, "ray-directions", k as u64);
                (0..m)
                    .map(|_| {
                        let v = loop {
                            let v = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
                            let n = v.norm();
                            if n > 1e-3 && n <= 1.0 {
                                break v / n;
                            }
                        };
                        (v, area / m as f64)
                    })
                    .collect()
            }
        };
        Self { k, precond, det, dirs }
    }

    /// Volume of `{w in patch : member(w)}`, assuming the region contains the
    /// base point and meets every ray from it in an interval `[0, r*)`.
    /// `member(v, r)` tests the point `r v` of the ray along `v = P u`.
    pub fn volume<P>(&self, patch: &LeafPatch, member: P) -> RayVolume
    where
        P: Fn(&DVector<f64>, f64) -> bool,
    {
        let mut volume = 0.0;
        let mut clipped = false;
        for (u, weight) in &self.dirs {
            let v = &self.precond * u;
            let r_max = patch.radius / v.norm();
            let r_star = if member(&v, r_max) {
                clipped = true;
                r_max
            } else {
                let (mut lo, mut hi) = (0.0, r_max);
                for _ in 0..BISECTION_STEPS {
                    let mid = 0.5 * (lo + hi);
                    if member(&v, mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-14 * r_max {
                        break;
                    }
                }
                0.5 * (lo + hi)
            };
            volume += weight * self.radial_integral(patch, &v, r_star);
        }
        RayVolume {
            volume: volume * self.det,
            clipped,
        }
    }

    fn radial_integral(&self, patch: &LeafPatch, v: &DVector<f64>, r: f64) -> f64 {
        let k = self.k as i32;
        if patch.is_affine() {
            return r.powi(k) / k as f64;
        }
        let dr = r / RADIAL_NODES as f64;
        (0..RADIAL_NODES)
            .map(|j| {
                let rho = (j as f64 + 0.5) * dr;
                let w: Vec<f64> = (v * rho).iter().copied().collect();
                patch.volume_element(&w) * rho.powi(k - 1) * dr
            })
            .sum()
    }
}
