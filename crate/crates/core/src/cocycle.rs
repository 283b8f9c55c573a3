//! Derivative cocycle: Lyapunov spectrum, hierarchy indices and Oseledec
//! fast/slow subspaces.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{min_singular_value, principal_angle, qr_step, random_frame};
use crate::seeds;
use crate::systems::{Dynamics, TorusPoint};

/// Smallest |R_ii| accepted by the QR cocycle before it is declared degenerate.
const R_DIAGONAL_FLOOR: f64 = 1e-300;
/// Frames whose last-10% iterates disagree by more than this angle are
/// reported as non-convergent.
pub const CONVERGENCE_ANGLE: f64 = 1e-6;
pub const MIN_STEPS: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exponent {
    pub value: f64,
    pub multiplicity: usize,
}

/// Distinct Lyapunov exponents in strictly decreasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSpectrum {
    pub exponents: Vec<Exponent>,
    /// Per-direction exponents, sorted descending.
    pub raw: Vec<f64>,
    /// Minimal gap between distinct exponents (infinite if there is only one).
    pub delta_star: f64,
    /// Number of positive distinct exponents.
    pub u: usize,
    pub total_dim: usize,
    /// Orbit average of `log |det Df|`.
    pub log_det_average: f64,
    /// Some adjacent raw gap fell within 10% of the cluster gap.
    pub cluster_ambiguity: bool,
}

impl LyapunovSpectrum {
    /// Groups raw per-direction exponents into distinct exponents: consecutive
    /// values closer than `cluster_gap` share one group valued at their mean.
    pub fn from_raw(mut raw: Vec<f64>, cluster_gap: f64, log_det_average: f64) -> Self {
        raw.sort_by(|a, b| b.partial_cmp(a).expect("finite exponents"));
        let mut groups: Vec<Vec<f64>> = Vec::new();
        let mut ambiguous = false;
        for (idx, &v) in raw.iter().enumerate() {
            if idx > 0 {
                let gap = raw[idx - 1] - v;
                if (gap - cluster_gap).abs() <= 0.1 * cluster_gap {
                    ambiguous = true;
                }
                if gap < cluster_gap {
                    groups.last_mut().expect("nonempty").push(v);
                    continue;
                }
            }
            groups.push(vec![v]);
        }
        let exponents: Vec<Exponent> = groups
            .iter()
            .map(|g| Exponent {
                value: g.iter().sum::<f64>() / g.len() as f64,
                multiplicity: g.len(),
            })
            .collect();
        let delta_star = exponents
            .windows(2)
            .map(|w| w[0].value - w[1].value)
            .fold(f64::INFINITY, f64::min);
        let u = exponents.iter().filter(|e| e.value > 0.0).count();
        Self {
            total_dim: raw.len(),
            exponents,
            raw,
            delta_star,
            u,
            log_det_average,
            cluster_ambiguity: ambiguous,
        }
    }

    /// `sum_{j <= u(i)} m_j lambda_j`, the expansion rate of the level-`i` leaves.
    pub fn unstable_sum(&self, level: usize) -> Result<f64> {
        let (u_of_i, _) = hierarchy_indices(self, level)?;
        Ok(self.exponents[..u_of_i]
            .iter()
            .map(|e| e.value * e.multiplicity as f64)
            .sum())
    }

    pub fn exponent_sum(&self) -> f64 {
        self.raw.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumParams {
    pub steps: usize,
    pub transient: usize,
    pub seed: u64,
    pub cluster_gap: f64,
}

impl Default for SpectrumParams {
    fn default() -> Self {
        Self {
            steps: 10_000,
            transient: 100,
            seed: 0,
            cluster_gap: 0.05,
        }
    }
}

fn random_point<R: Rng + ?Sized>(rng: &mut R, d: usize) -> TorusPoint {
    TorusPoint::new((0..d).map(|_| rng.random::<f64>()).collect())
}

fn reduced(v: DVector<f64>) -> DVector<f64> {
    TorusPoint::from_lift(&v).to_vector()
}

/// Lyapunov spectrum by QR reorthonormalization of the derivative cocycle
/// along one orbit started at a seed-random point.
pub fn lyapunov_spectrum<M: Dynamics + ?Sized>(
    map: &M,
    params: &SpectrumParams,
) -> Result<LyapunovSpectrum> {
    if params.steps < MIN_STEPS {
        return Err(Error::InvalidParameter(format!(
            "steps must be >= {MIN_STEPS}, got {}",
            params.steps
        )));
    }
    if !(params.cluster_gap > 0.0) {
        return Err(Error::InvalidParameter("cluster_gap must be > 0".into()));
    }
    let d = map.dim();
    let mut rng = seeds::stream(params.seed, "spectrum", 0);
    let mut x = random_point(&mut rng, d).to_vector();
    let mut q = random_frame(d, d, &mut rng);
    let mut sums = vec![0.0; d];
    let mut log_det = 0.0;
    for step in 0..params.transient + params.steps {
        let jac = map.jacobian(&x);
        let counted = step >= params.transient;
        if counted {
            log_det += jac.determinant().abs().ln();
        }
        let (next_q, diag) = qr_step(jac * q);
        for (s, r) in sums.iter_mut().zip(&diag) {
            let r = r.abs();
            if !(r > R_DIAGONAL_FLOOR) || !r.is_finite() {
                return Err(Error::DegenerateCocycle(r));
            }
            if counted {
                *s += r.ln();
            }
        }
        q = next_q;
        x = reduced(map.lift_forward(&x));
    }
    let n = params.steps as f64;
    let raw = sums.into_iter().map(|s| s / n).collect();
    Ok(LyapunovSpectrum::from_raw(raw, params.cluster_gap, log_det / n))
}

/// `(u(i), I(i))`: the number of distinct exponents in the level-`i` fast
/// bundle and its dimension.
pub fn hierarchy_indices(spectrum: &LyapunovSpectrum, level: usize) -> Result<(usize, usize)> {
    let u = spectrum.u;
    if level == 0 || level > u {
        return Err(Error::LevelOutOfRange { level, u });
    }
    let u_of_i = u - level + 1;
    let dim = spectrum.exponents[..u_of_i]
        .iter()
        .map(|e| e.multiplicity)
        .sum();
    Ok((u_of_i, dim))
}

/// Fast bundle `F` and slow bundle `E` at a point.
#[derive(Debug, Clone)]
pub struct SplittingAtPoint {
    pub base: TorusPoint,
    pub level: usize,
    /// `d x I(i)`, orthonormal columns.
    pub f_basis: DMatrix<f64>,
    /// `d x (d - I(i))`, orthonormal columns.
    pub e_basis: DMatrix<f64>,
}

impl SplittingAtPoint {
    pub fn fast_dim(&self) -> usize {
        self.f_basis.ncols()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplittingParams {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SplittingParams {
    fn default() -> Self {
        Self {
            steps: MIN_STEPS,
            seed: 0,
        }
    }
}

/// Orbit `x_0 = start, x_{k+1} = g(x_k)` reduced mod 1 at each step.
fn orbit<G: Fn(&DVector<f64>) -> DVector<f64>>(start: &DVector<f64>, len: usize, g: G) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(len + 1);
    out.push(start.clone());
    for k in 0..len {
        let next = reduced(g(&out[k]));
        out.push(next);
    }
    out
}

/// Pushes a frame along `jacobians` in order, re-orthonormalizing every step.
/// A second, independent frame joins for the final tenth of the transport; the
/// angle between the two results measures convergence.
fn transport<R, J>(
    d: usize,
    k: usize,
    count: usize,
    jacobian_at: J,
    rng: &mut R,
) -> Result<DMatrix<f64>>
where
    R: Rng + ?Sized,
    J: Fn(usize) -> DMatrix<f64>,
{
    let mut q = random_frame(d, d, rng);
    let late_start = count - count / 10;
    let mut late: Option<DMatrix<f64>> = None;
    for step in 0..count {
        if step == late_start {
            late = Some(random_frame(d, d, rng));
        }
        let jac = jacobian_at(step);
        q = qr_step(&jac * q).0;
        if let Some(l) = late.take() {
            late = Some(qr_step(&jac * l).0);
        }
    }
    let main = q.columns(0, k).into_owned();
    if let Some(l) = late {
        let angle = principal_angle(&main, &l.columns(0, k).into_owned());
        if angle > CONVERGENCE_ANGLE {
            return Err(Error::NonConvergent(angle));
        }
    }
    Ok(main)
}

/// Fast subspace of dimension `fast_dim` at `x` by forward transport along the
/// backward orbit.
pub fn fast_subspace<M: Dynamics + ?Sized, R: Rng + ?Sized>(
    map: &M,
    x: &DVector<f64>,
    fast_dim: usize,
    steps: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let back = orbit(x, steps, |v| map.lift_inverse(v));
    // Transport step s maps T at back[steps - s] to back[steps - s - 1].
    transport(
        map.dim(),
        fast_dim,
        steps,
        |s| map.jacobian(&back[steps - s]),
        rng,
    )
}

/// Slow subspace of dimension `slow_dim` at `x` by inverse-cocycle transport
/// along the forward orbit.
pub fn slow_subspace<M: Dynamics + ?Sized, R: Rng + ?Sized>(
    map: &M,
    x: &DVector<f64>,
    slow_dim: usize,
    steps: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let fwd = orbit(x, steps, |v| map.lift_forward(v));
    transport(
        map.dim(),
        slow_dim,
        steps,
        |s| map.inverse_jacobian(&fwd[steps - s]),
        rng,
    )
}

fn check_steps(steps: usize) -> Result<()> {
    if steps < MIN_STEPS {
        return Err(Error::InvalidParameter(format!(
            "steps must be >= {MIN_STEPS}, got {steps}"
        )));
    }
    Ok(())
}

/// Oseledec fast/slow splitting `F(x) ⊕ E(x)` for hierarchy level `level`.
pub fn oseledec_splitting<M: Dynamics + ?Sized>(
    map: &M,
    spectrum: &LyapunovSpectrum,
    point: &TorusPoint,
    level: usize,
    params: &SplittingParams,
) -> Result<SplittingAtPoint> {
    check_steps(params.steps)?;
    let (_, fast_dim) = hierarchy_indices(spectrum, level)?;
    let d = map.dim();
    if point.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: point.dim(),
        });
    }
    let mut rng = seeds::stream(params.seed, "splitting", 0);
    let x = point.to_vector();
    let f_basis = fast_subspace(map, &x, fast_dim, params.steps, &mut rng)?;
    let e_basis = slow_subspace(map, &x, d - fast_dim, params.steps, &mut rng)?;
    Ok(SplittingAtPoint {
        base: point.clone(),
        level,
        f_basis,
        e_basis,
    })
}

/// Splittings at `x, f(x), ..., f^{len-1}(x)`.
///
/// `F` is carried forward by one-step transport `Df F`; `E` is carried
/// backward from `f^{len-1+steps}(x)` by the inverse cocycle, because forward
/// transport of the slow bundle is numerically unstable.
pub fn splittings_along_orbit<M: Dynamics + ?Sized>(
    map: &M,
    point: &TorusPoint,
    level: usize,
    fast_dim: usize,
    len: usize,
    params: &SplittingParams,
) -> Result<Vec<SplittingAtPoint>> {
    check_steps(params.steps)?;
    if len == 0 {
        return Ok(Vec::new());
    }
    let d = map.dim();
    let mut rng = seeds::stream(params.seed, "orbit-splitting", 0);
    let x = point.to_vector();
    let fwd = orbit(&x, len - 1 + params.steps, |v| map.lift_forward(v));

    let mut fast = Vec::with_capacity(len);
    let mut f = fast_subspace(map, &x, fast_dim, params.steps, &mut rng)?;
    for j in 0..len {
        if j > 0 {
            f = qr_step(map.jacobian(&fwd[j - 1]) * f).0;
        }
        fast.push(f.clone());
    }

    let total = fwd.len() - 1;
    let slow_dim = d - fast_dim;
    let mut e = random_frame(d, d, &mut rng).columns(0, slow_dim).into_owned();
    let mut slow = vec![DMatrix::zeros(d, slow_dim); len];
    for k in (0..total).rev() {
        e = qr_step(map.inverse_jacobian(&fwd[k + 1]) * e).0;
        if k < len {
            slow[k] = e.clone();
        }
    }

    Ok(fast
        .into_iter()
        .zip(slow)
        .enumerate()
        .map(|(j, (f_basis, e_basis))| SplittingAtPoint {
            base: TorusPoint::from_lift(&fwd[j]),
            level,
            f_basis,
            e_basis,
        })
        .collect())
}

/// `m(A) = ||A^{-1}||^{-1}`, the smallest singular value.
pub fn minimal_norm(matrix: &DMatrix<f64>) -> Result<f64> {
    let s = min_singular_value(matrix);
    if !(s >= 1e-14) {
        return Err(Error::Singular(s));
    }
    Ok(s)
}
