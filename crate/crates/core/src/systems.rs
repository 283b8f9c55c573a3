//! Torus phase space and the catalog of test diffeomorphisms.
//!
//! Maps act on the d-torus `R^d / Z^d`. Every map here is the projection of a
//! map on the universal cover `R^d`; the `lift_*` methods expose that cover map
//! so leaf computations can work in flat chart coordinates around a base point
//! and reduce mod 1 only at the end.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest supported torus dimension.
pub const MAX_DIM: usize = 8;
/// Eigenvalue moduli within this distance of 1 are rejected as non-hyperbolic.
pub const HYPERBOLICITY_TOL: f64 = 1e-9;
/// Default cap on the shear amplitude of perturbed systems.
pub const DEFAULT_AMPLITUDE_CAP: f64 = 0.1;

/// Reduces a real coordinate to `[0, 1)`.
pub fn reduce(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Reduces a coordinate difference to `[-1/2, 1/2]`.
pub fn wrap_diff(x: f64) -> f64 {
    x - x.round()
}

/// A point of the d-torus with coordinates in `[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        Self {
            coords: coords.into_iter().map(reduce).collect(),
        }
    }

    pub fn from_lift(v: &DVector<f64>) -> Self {
        Self::new(v.iter().copied().collect())
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// The canonical lift in `[0,1)^d`.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.coords)
    }

    /// The lift of `self` closest to `anchor` in the universal cover.
    pub fn lift_near(&self, anchor: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.coords
                .iter()
                .zip(anchor.iter())
                .map(|(&c, &a)| a + wrap_diff(c - a)),
        )
    }
}

/// Euclidean length of the minimal coordinate-wise representative of `p - q`.
pub fn torus_distance(p: &TorusPoint, q: &TorusPoint) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    Ok(p.coords
        .iter()
        .zip(&q.coords)
        .map(|(a, b)| wrap_diff(a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// An invertible self-map of the torus with evaluable inverse and Jacobian.
pub trait Dynamics: Send + Sync {
    fn dim(&self) -> usize;

    /// The map on the universal cover.
    fn lift_forward(&self, v: &DVector<f64>) -> DVector<f64>;

    /// The inverse map on the universal cover.
    fn lift_inverse(&self, v: &DVector<f64>) -> DVector<f64>;

    /// `Df(v)`.
    fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64>;

    /// Jacobian of the inverse map at `v`, i.e. `Df(f^{-1} v)^{-1}`.
    fn inverse_jacobian(&self, v: &DVector<f64>) -> DMatrix<f64>;

    /// The constant Jacobian when the map is a linear automorphism.
    fn linear_part(&self) -> Option<DMatrix<f64>>;

    fn step(&self, p: &TorusPoint, direction: Direction) -> TorusPoint {
        let v = p.to_vector();
        let image = match direction {
            Direction::Forward => self.lift_forward(&v),
            Direction::Inverse => self.lift_inverse(&v),
        };
        TorusPoint::from_lift(&image)
    }

    fn is_linear(&self) -> bool {
        self.linear_part().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Linear,
    Perturbed,
}

/// `x -> A x mod 1`, optionally pre-composed with the sine shear
/// `s(x)_write = x_write + amplitude * sin(2 pi x_read)`.
#[derive(Debug, Clone)]
pub struct TorusMap {
    kind: MapKind,
    matrix: Vec<Vec<i64>>,
    inverse: Vec<Vec<i64>>,
    amplitude: f64,
    /// (read coordinate, write coordinate) of the shear.
    shear_axis: (usize, usize),
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
}

impl TorusMap {
    pub fn dimension(&self) -> usize {
        self.matrix.len()
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn matrix(&self) -> &[Vec<i64>] {
        &self.matrix
    }

    pub fn inverse_matrix(&self) -> &[Vec<i64>] {
        &self.inverse
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn shear_axis(&self) -> (usize, usize) {
        self.shear_axis
    }

    fn shear(&self, v: &mut DVector<f64>, sign: f64) {
        if self.amplitude != 0.0 {
            let (read, write) = self.shear_axis;
            v[write] += sign * self.amplitude * (2.0 * std::f64::consts::PI * v[read]).sin();
        }
    }

    fn shear_jacobian(&self, v: &DVector<f64>, sign: f64) -> DMatrix<f64> {
        let d = self.dimension();
        let mut ds = DMatrix::identity(d, d);
        if self.amplitude != 0.0 {
            let (read, write) = self.shear_axis;
            let tau = 2.0 * std::f64::consts::PI;
            ds[(write, read)] += sign * self.amplitude * tau * (tau * v[read]).cos();
        }
        ds
    }
}

impl Dynamics for TorusMap {
    fn dim(&self) -> usize {
        self.dimension()
    }

    fn lift_forward(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut s = v.clone();
        self.shear(&mut s, 1.0);
        &self.a * s
    }

    fn lift_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut u = &self.a_inv * v;
        self.shear(&mut u, -1.0);
        u
    }

    fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        match self.kind {
            MapKind::Linear => self.a.clone(),
            MapKind::Perturbed => &self.a * self.shear_jacobian(v, 1.0),
        }
    }

    fn inverse_jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        match self.kind {
            MapKind::Linear => self.a_inv.clone(),
            MapKind::Perturbed => {
                // The shear leaves the read coordinate fixed, so D(s^-1) can be
                // evaluated at A^-1 v directly.
                let u = &self.a_inv * v;
                self.shear_jacobian(&u, -1.0) * &self.a_inv
            }
        }
    }

    fn linear_part(&self) -> Option<DMatrix<f64>> {
        match self.kind {
            MapKind::Linear => Some(self.a.clone()),
            MapKind::Perturbed => None,
        }
    }
}

/// `f^m` by composition; Jacobians are chain-ruled along the orbit.
#[derive(Debug, Clone)]
pub struct Iterate<M> {
    base: M,
    power: usize,
}

impl<M: Dynamics> Iterate<M> {
    pub fn new(base: M, power: usize) -> Result<Self> {
        if power == 0 {
            return Err(Error::InvalidParameter("power must be >= 1".into()));
        }
        Ok(Self { base, power })
    }

    pub fn power(&self) -> usize {
        self.power
    }
}

impl<M: Dynamics> Dynamics for Iterate<M> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn lift_forward(&self, v: &DVector<f64>) -> DVector<f64> {
        (0..self.power).fold(v.clone(), |x, _| self.base.lift_forward(&x))
    }

    fn lift_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        (0..self.power).fold(v.clone(), |x, _| self.base.lift_inverse(&x))
    }

    fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut x = v.clone();
        let mut j = DMatrix::identity(d, d);
        for _ in 0..self.power {
            j = self.base.jacobian(&x) * j;
            x = self.base.lift_forward(&x);
        }
        j
    }

    fn inverse_jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut x = v.clone();
        let mut j = DMatrix::identity(d, d);
        for _ in 0..self.power {
            j = self.base.inverse_jacobian(&x) * j;
            x = self.base.lift_inverse(&x);
        }
        j
    }

    fn linear_part(&self) -> Option<DMatrix<f64>> {
        self.base.linear_part().map(|a| a.pow(self.power as u32))
    }
}

impl<M: Dynamics + ?Sized> Dynamics for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn lift_forward(&self, v: &DVector<f64>) -> DVector<f64> {
        (**self).lift_forward(v)
    }
    fn lift_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        (**self).lift_inverse(v)
    }
    fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        (**self).jacobian(v)
    }
    fn inverse_jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        (**self).inverse_jacobian(v)
    }
    fn linear_part(&self) -> Option<DMatrix<f64>> {
        (**self).linear_part()
    }
}

/// Exact determinant of an integer matrix (fraction-free Bareiss elimination).
pub fn integer_determinant(m: &[Vec<i64>]) -> i128 {
    let n = m.len();
    let mut a: Vec<Vec<i128>> = m
        .iter()
        .map(|r| r.iter().map(|&x| x as i128).collect())
        .collect();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..n {
        if a[k][k] == 0 {
            match (k + 1..n).find(|&r| a[r][k] != 0) {
                Some(r) => {
                    a.swap(k, r);
                    sign = -sign;
                }
                None => return 0,
            }
        }
        for i in k + 1..n {
            for j in k + 1..n {
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) / prev;
            }
        }
        prev = a[k][k];
    }
    sign * a[n - 1][n - 1]
}

fn validate_matrix(matrix: &[Vec<i64>]) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<Vec<i64>>)> {
    let d = matrix.len();
    if d == 0 || d > MAX_DIM {
        return Err(Error::InvalidParameter(format!(
            "dimension {d} outside 1..={MAX_DIM}"
        )));
    }
    if let Some(row) = matrix.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: row.len(),
        });
    }
    let det = integer_determinant(matrix);
    if det.abs() != 1 {
        return Err(Error::NonUnimodular(det as f64));
    }
    let a = DMatrix::from_fn(d, d, |i, j| matrix[i][j] as f64);
    for ev in a.complex_eigenvalues().iter() {
        let modulus = ev.norm();
        if (modulus - 1.0).abs() <= HYPERBOLICITY_TOL {
            return Err(Error::NotHyperbolic(modulus));
        }
    }
    let a_inv_f = a
        .clone()
        .try_inverse()
        .ok_or(Error::Singular(0.0))?;
    let inverse: Vec<Vec<i64>> = (0..d)
        .map(|i| (0..d).map(|j| a_inv_f[(i, j)].round() as i64).collect())
        .collect();
    let a_inv = DMatrix::from_fn(d, d, |i, j| inverse[i][j] as f64);
    Ok((a, a_inv, inverse))
}

/// `x -> A x mod 1` for a unimodular hyperbolic integer matrix.
pub fn make_linear_system(matrix: Vec<Vec<i64>>) -> Result<TorusMap> {
    let (a, a_inv, inverse) = validate_matrix(&matrix)?;
    Ok(TorusMap {
        kind: MapKind::Linear,
        matrix,
        inverse,
        amplitude: 0.0,
        shear_axis: (1, 0),
        a,
        a_inv,
    })
}

/// `A ∘ s` on the 2-torus with `s(x, y) = (x + amplitude sin(2 pi y), y)`.
pub fn make_perturbed_system(matrix: Vec<Vec<i64>>, amplitude: f64) -> Result<TorusMap> {
    make_perturbed_system_capped(matrix, amplitude, DEFAULT_AMPLITUDE_CAP)
}

pub fn make_perturbed_system_capped(
    matrix: Vec<Vec<i64>>,
    amplitude: f64,
    cap: f64,
) -> Result<TorusMap> {
    if matrix.len() != 2 {
        return Err(Error::Unsupported(format!(
            "perturbed systems are two-dimensional, got d = {}",
            matrix.len()
        )));
    }
    if !(amplitude >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "amplitude must be >= 0, got {amplitude}"
        )));
    }
    if amplitude > cap {
        return Err(Error::AmplitudeTooLarge { amplitude, cap });
    }
    let (a, a_inv, inverse) = validate_matrix(&matrix)?;
    Ok(TorusMap {
        kind: MapKind::Perturbed,
        matrix,
        inverse,
        amplitude,
        shear_axis: (1, 0),
        a,
        a_inv,
    })
}

/// Named members of the default catalog.
pub mod catalog {
    use super::*;

    pub fn cat_matrix() -> Vec<Vec<i64>> {
        vec![vec![2, 1], vec![1, 1]]
    }

    /// `diag(A^2, A)` with `A` the cat matrix.
    pub fn block_matrix() -> Vec<Vec<i64>> {
        vec![
            vec![5, 3, 0, 0],
            vec![3, 2, 0, 0],
            vec![0, 0, 2, 1],
            vec![0, 0, 1, 1],
        ]
    }

    pub fn cat_map() -> TorusMap {
        make_linear_system(cat_matrix()).expect("cat matrix is hyperbolic")
    }

    pub fn block_map() -> TorusMap {
        make_linear_system(block_matrix()).expect("block matrix is hyperbolic")
    }

    pub fn perturbed_cat(amplitude: f64) -> Result<TorusMap> {
        make_perturbed_system(cat_matrix(), amplitude)
    }
}
