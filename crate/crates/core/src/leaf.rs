//! Local unstable leaf patches `W^i(x, δ)`.
//!
//! A patch lives in the flat chart around its base point: a leaf point is
//! `anchor + F w + E ψ(w)` where `w` ranges over fast-bundle coordinates with
//! `|w| <= radius`. Linear systems use the exact affine leaf (`ψ = 0`,
//! `E` the slow bundle). Nonlinear systems carry `ψ` on a regular grid over
//! the cube `[-radius, radius]^k`, with `E` the orthogonal complement of `F`,
//! and grow it with the graph transform.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cocycle::{fast_subspace, hierarchy_indices, oseledec_splitting, LyapunovSpectrum, SplittingParams};
use crate::error::{Error, Result};
use crate::linalg::{max_singular_value, orthogonal_complement, orthonormalize, unit_ball_volume};
use crate::seeds;
use crate::systems::{Dynamics, TorusPoint};

/// Points farther than this from the patch surface are not on the leaf.
pub const ON_LEAF_TOL: f64 = 1e-8;
const NEWTON_TOL: f64 = 1e-15;
const NEWTON_MAX_ITER: usize = 60;
/// Successive grown patches closer than this are considered converged.
pub const GROWTH_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct LeafParams {
    pub radius: f64,
    pub c_max: f64,
    pub iterations: usize,
    /// Grid nodes per fast dimension.
    pub grid_nodes: usize,
    pub splitting_steps: usize,
    pub seed: u64,
    pub check_convergence: bool,
}

impl Default for LeafParams {
    fn default() -> Self {
        Self {
            radius: 0.1,
            c_max: 1.0,
            iterations: 30,
            grid_nodes: 513,
            splitting_steps: 1_000,
            seed: 0,
            check_convergence: true,
        }
    }
}

/// `ψ` sampled on a regular grid over `[-radius, radius]^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphGrid {
    k: usize,
    codim: usize,
    nodes: usize,
    radius: f64,
    spacing: f64,
    /// Node-major, `codim` values per node; node index is `Σ i_a nodes^a`.
    values: Vec<f64>,
}

impl GraphGrid {
    pub fn flat(k: usize, codim: usize, nodes: usize, radius: f64) -> Self {
        assert!(nodes >= 2, "grid needs at least two nodes per axis");
        let count = nodes.pow(k as u32);
        Self {
            k,
            codim,
            nodes,
            radius,
            spacing: 2.0 * radius / (nodes - 1) as f64,
            values: vec![0.0; count * codim],
        }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.nodes.pow(self.k as u32)
    }

    fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        (0..self.k)
            .map(|_| {
                let i = idx % self.nodes;
                idx /= self.nodes;
                i
            })
            .collect()
    }

    fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().rev().fold(0, |acc, &i| acc * self.nodes + i)
    }

    pub fn node_coords(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .into_iter()
            .map(|i| -self.radius + i as f64 * self.spacing)
            .collect()
    }

    pub fn node_value(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.codim..(idx + 1) * self.codim]
    }

    /// Cell containing `w` (clamped to the grid) and local coordinates, which
    /// fall outside `[0, 1]` when `w` is outside the grid (linear extrapolation).
    fn locate(&self, w: &[f64]) -> (Vec<usize>, Vec<f64>) {
        let mut cell = Vec::with_capacity(self.k);
        let mut frac = Vec::with_capacity(self.k);
        for &wa in w {
            let t = (wa + self.radius) / self.spacing;
            let c = (t.floor().max(0.0) as usize).min(self.nodes - 2);
            cell.push(c);
            frac.push(t - c as f64);
        }
        (cell, frac)
    }

    fn corner_index(&self, cell: &[usize], mask: usize) -> usize {
        let corner: Vec<usize> = cell
            .iter()
            .enumerate()
            .map(|(a, &c)| c + ((mask >> a) & 1))
            .collect();
        self.flat_index(&corner)
    }

    /// Multilinear interpolation of `ψ` at `w`.
    pub fn value(&self, w: &[f64]) -> DVector<f64> {
        let (cell, frac) = self.locate(w);
        let mut out = DVector::zeros(self.codim);
        for mask in 0..(1usize << self.k) {
            let weight: f64 = (0..self.k)
                .map(|a| if (mask >> a) & 1 == 1 { frac[a] } else { 1.0 - frac[a] })
                .product();
            if weight != 0.0 {
                let v = self.node_value(self.corner_index(&cell, mask));
                for (o, x) in out.iter_mut().zip(v) {
                    *o += weight * x;
                }
            }
        }
        out
    }

    /// `Dψ(w)` of the multilinear interpolant, `codim x k`.
    pub fn gradient(&self, w: &[f64]) -> DMatrix<f64> {
        let (cell, frac) = self.locate(w);
        let mut out = DMatrix::zeros(self.codim, self.k);
        for mask in 0..(1usize << self.k) {
            let v = self.node_value(self.corner_index(&cell, mask));
            for axis in 0..self.k {
                let weight: f64 = (0..self.k)
                    .map(|a| {
                        let bit = (mask >> a) & 1 == 1;
                        if a == axis {
                            if bit { 1.0 / self.spacing } else { -1.0 / self.spacing }
                        } else if bit {
                            frac[a]
                        } else {
                            1.0 - frac[a]
                        }
                    })
                    .product();
                for (row, x) in v.iter().enumerate() {
                    out[(row, axis)] += weight * x;
                }
            }
        }
        out
    }

    /// Centers of grid cells whose center lies within `limit` of the origin.
    fn cell_centers(&self, limit: f64) -> Vec<Vec<f64>> {
        let cells = self.nodes - 1;
        let count = cells.pow(self.k as u32);
        (0..count)
            .filter_map(|mut idx| {
                let c: Vec<f64> = (0..self.k)
                    .map(|_| {
                        let i = idx % cells;
                        idx /= cells;
                        -self.radius + (i as f64 + 0.5) * self.spacing
                    })
                    .collect();
                let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                (norm <= limit).then_some(c)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    /// `ψ = 0`, exact for linear systems.
    Affine,
    Graph(GraphGrid),
}

#[derive(Debug, Clone)]
pub struct LeafPatch {
    pub base: TorusPoint,
    pub level: usize,
    pub radius: f64,
    /// `d x k`, orthonormal.
    pub f_basis: DMatrix<f64>,
    /// `d x (d - k)`, orthonormal; the value space of `ψ`.
    pub e_basis: DMatrix<f64>,
    pub representation: Representation,
    /// Max Lipschitz slope of `ψ` over grid cells (0 for affine patches).
    pub dispersion: f64,
}

fn volume_element_of(grad: &DMatrix<f64>) -> f64 {
    let k = grad.ncols();
    let g = DMatrix::<f64>::identity(k, k) + grad.transpose() * grad;
    g.determinant().max(0.0).sqrt()
}

fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 1 || m.nrows() == 1 {
        m.norm()
    } else {
        max_singular_value(m)
    }
}

impl LeafPatch {
    pub fn fast_dim(&self) -> usize {
        self.f_basis.ncols()
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.representation, Representation::Affine)
    }

    pub fn grid(&self) -> Option<&GraphGrid> {
        match &self.representation {
            Representation::Affine => None,
            Representation::Graph(g) => Some(g),
        }
    }

    /// Chart coordinates of the base point.
    pub fn anchor(&self) -> DVector<f64> {
        self.base.to_vector()
    }

    pub fn psi(&self, w: &[f64]) -> DVector<f64> {
        match &self.representation {
            Representation::Affine => DVector::zeros(self.e_basis.ncols()),
            Representation::Graph(g) => g.value(w),
        }
    }

    pub fn psi_gradient(&self, w: &[f64]) -> DMatrix<f64> {
        match &self.representation {
            Representation::Affine => DMatrix::zeros(self.e_basis.ncols(), self.fast_dim()),
            Representation::Graph(g) => g.gradient(w),
        }
    }

    /// Offset of the leaf point over `w` from the base point.
    pub fn offset_at(&self, w: &[f64]) -> DVector<f64> {
        let wv = DVector::from_column_slice(w);
        match &self.representation {
            Representation::Affine => &self.f_basis * wv,
            Representation::Graph(g) => &self.f_basis * wv + &self.e_basis * g.value(w),
        }
    }

    /// Leaf point over `w` in chart coordinates.
    pub fn point_at(&self, w: &[f64]) -> DVector<f64> {
        self.anchor() + self.offset_at(w)
    }

    /// Tangent frame `F + E Dψ(w)` of the leaf at `w`.
    pub fn tangent_at(&self, w: &[f64]) -> DMatrix<f64> {
        match &self.representation {
            Representation::Affine => self.f_basis.clone(),
            Representation::Graph(g) => &self.f_basis + &self.e_basis * g.gradient(w),
        }
    }

    /// `sqrt(det(I + Dψᵀ Dψ))`.
    pub fn volume_element(&self, w: &[f64]) -> f64 {
        match &self.representation {
            Representation::Affine => 1.0,
            Representation::Graph(g) => volume_element_of(&g.gradient(w)),
        }
    }

    pub fn contains(&self, w: &[f64]) -> bool {
        w.iter().map(|x| x * x).sum::<f64>().sqrt() <= self.radius
    }

    /// Fast coordinates of a torus point assumed to lie on the patch.
    pub fn coordinates_of(&self, p: &TorusPoint) -> Result<Vec<f64>> {
        let anchor = self.anchor();
        if p.dim() != anchor.len() {
            return Err(Error::DimensionMismatch {
                expected: anchor.len(),
                got: p.dim(),
            });
        }
        let lifted = p.lift_near(&anchor);
        let w: Vec<f64> = (self.f_basis.transpose() * (&lifted - &anchor)).iter().copied().collect();
        let miss = (&lifted - self.point_at(&w)).norm();
        if miss > ON_LEAF_TOL {
            return Err(Error::NotOnLeaf(miss));
        }
        Ok(w)
    }

    /// Rows of `(w, ψ(w), leaf point)` at every grid node (or along a
    /// regular sampling of the fast coordinates for affine patches).
    pub fn dump_rows(&self, samples_per_axis: usize) -> Vec<Vec<f64>> {
        let grid = match &self.representation {
            Representation::Graph(g) => g.clone(),
            Representation::Affine => GraphGrid::flat(
                self.fast_dim(),
                self.e_basis.ncols(),
                samples_per_axis.max(2),
                self.radius,
            ),
        };
        (0..grid.node_count())
            .filter_map(|idx| {
                let w = grid.node_coords(idx);
                if !self.contains(&w) {
                    return None;
                }
                let psi = self.psi(&w);
                let p = TorusPoint::from_lift(&self.point_at(&w));
                Some(
                    w.iter()
                        .copied()
                        .chain(psi.iter().copied())
                        .chain(p.coords().iter().copied())
                        .collect(),
                )
            })
            .collect()
    }
}

/// Affine patch over the exact fast eigenspace sum of a linear system.
pub fn affine_leaf_patch<M: Dynamics + ?Sized>(
    map: &M,
    spectrum: &LyapunovSpectrum,
    x: &TorusPoint,
    level: usize,
    radius: f64,
) -> Result<LeafPatch> {
    hierarchy_indices(spectrum, level)?;
    if !map.is_linear() {
        return Err(Error::Unsupported(
            "affine leaf patches need a linear system".into(),
        ));
    }
    check_radius(radius)?;
    let split = oseledec_splitting(map, spectrum, x, level, &SplittingParams::default())?;
    Ok(LeafPatch {
        base: x.clone(),
        level,
        radius,
        f_basis: split.f_basis,
        e_basis: split.e_basis,
        representation: Representation::Affine,
        dispersion: 0.0,
    })
}

fn check_radius(radius: f64) -> Result<()> {
    if !(radius > 0.0 && radius < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "leaf radius must lie in (0, 0.5), got {radius}"
        )));
    }
    Ok(())
}

/// Flat (`ψ = 0`) graph patch over `f_basis` at `base`.
pub fn flat_graph_patch(
    base: TorusPoint,
    level: usize,
    radius: f64,
    f_basis: DMatrix<f64>,
    grid_nodes: usize,
) -> LeafPatch {
    let k = f_basis.ncols();
    let e_basis = orthogonal_complement(&f_basis);
    let grid = GraphGrid::flat(k, e_basis.ncols(), grid_nodes, radius);
    LeafPatch {
        base,
        level,
        radius,
        f_basis,
        e_basis,
        representation: Representation::Graph(grid),
        dispersion: 0.0,
    }
}

/// Max Lipschitz slope of `ψ` over cells near the patch domain.
pub fn measure_dispersion(grid: &GraphGrid) -> f64 {
    let limit = grid.radius + grid.spacing * (grid.k as f64).sqrt();
    grid.cell_centers(limit)
        .iter()
        .map(|c| operator_norm(&grid.gradient(c)))
        .fold(0.0, f64::max)
}

/// Solves `Fᵀ(f(anchor + F w + E ψ(w)) - image_anchor) = target` for `w`.
fn solve_source<M: Dynamics + ?Sized>(
    map: &M,
    patch: &LeafPatch,
    anchor: &DVector<f64>,
    image_anchor: &DVector<f64>,
    new_f: &DMatrix<f64>,
    start: DVector<f64>,
    target: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mut w = start;
    for _ in 0..NEWTON_MAX_ITER {
        let ws: Vec<f64> = w.iter().copied().collect();
        let y = anchor + patch.offset_at(&ws);
        let image = map.lift_forward(&y) - image_anchor;
        let residual = target - new_f.transpose() * &image;
        if residual.norm() <= NEWTON_TOL * (1.0 + target.norm()) {
            return Ok((w, image));
        }
        let jac = new_f.transpose() * map.jacobian(&y) * patch.tangent_at(&ws);
        let delta = jac
            .lu()
            .solve(&residual)
            .ok_or(Error::Singular(0.0))?;
        w += delta;
    }
    let ws: Vec<f64> = w.iter().copied().collect();
    let image = map.lift_forward(&(anchor + patch.offset_at(&ws))) - image_anchor;
    let residual = (target - new_f.transpose() * &image).norm();
    if residual <= 1e-12 * (1.0 + target.norm()) {
        Ok((w, image))
    } else {
        Err(Error::NonConvergent(residual))
    }
}

/// One graph-transform step: pushes the patch forward by `map`, re-expresses
/// it over the transported fast frame at the image base, re-grids and trims
/// to the patch radius.
pub fn graph_transform_step<M: Dynamics + ?Sized>(
    map: &M,
    patch: &LeafPatch,
    c_max: f64,
) -> Result<LeafPatch> {
    transform_onto(map, patch, c_max, None)
}

/// Graph transform whose image is re-anchored at `new_base` (a point within
/// rounding of `f(base)`), so long pseudo-orbits do not accumulate drift.
fn transform_onto<M: Dynamics + ?Sized>(
    map: &M,
    patch: &LeafPatch,
    c_max: f64,
    new_base: Option<&TorusPoint>,
) -> Result<LeafPatch> {
    if patch.dispersion > c_max {
        return Err(Error::DispersionExceeded {
            actual: patch.dispersion,
            bound: c_max,
        });
    }
    let anchor = patch.anchor();
    let image_anchor = map.lift_forward(&anchor);
    let base = new_base
        .cloned()
        .unwrap_or_else(|| TorusPoint::from_lift(&image_anchor));
    let jac = map.jacobian(&anchor);
    let new_f = orthonormalize(&(&jac * &patch.f_basis));

    let grid = match (&patch.representation, map.is_linear()) {
        (Representation::Affine, true) => {
            let new_e = orthonormalize(&(&jac * &patch.e_basis));
            return Ok(LeafPatch {
                base,
                level: patch.level,
                radius: patch.radius,
                f_basis: new_f,
                e_basis: new_e,
                representation: Representation::Affine,
                dispersion: 0.0,
            });
        }
        (Representation::Affine, false) => {
            return Err(Error::Unsupported(
                "affine patches can only be transformed by linear systems".into(),
            ))
        }
        (Representation::Graph(g), _) => g,
    };

    let new_e = orthogonal_complement(&new_f);
    let k = patch.fast_dim();
    let codim = new_e.ncols();
    let linear = (new_f.transpose() * &jac * &patch.f_basis)
        .try_inverse()
        .ok_or(Error::Singular(0.0))?;
    let mut next = GraphGrid::flat(k, codim, grid.nodes, patch.radius);
    let solved: Vec<Result<Vec<f64>>> = (0..next.node_count())
        .into_par_iter()
        .map(|idx| {
            let target = DVector::from_vec(next.node_coords(idx));
            let start = &linear * &target;
            let (_, image) = solve_source(map, patch, &anchor, &image_anchor, &new_f, start, &target)?;
            Ok((new_e.transpose() * image).iter().copied().collect())
        })
        .collect();
    for (idx, values) in solved.into_iter().enumerate() {
        next.values[idx * codim..(idx + 1) * codim].copy_from_slice(&values?);
    }
    let dispersion = measure_dispersion(&next);
    if dispersion > c_max {
        return Err(Error::DispersionExceeded {
            actual: dispersion,
            bound: c_max,
        });
    }
    Ok(LeafPatch {
        base,
        level: patch.level,
        radius: patch.radius,
        f_basis: new_f,
        e_basis: new_e,
        representation: Representation::Graph(next),
        dispersion,
    })
}

fn grow_once<M: Dynamics + ?Sized>(
    map: &M,
    backward: &[TorusPoint],
    fast_dim: usize,
    level: usize,
    iterations: usize,
    params: &LeafParams,
) -> Result<LeafPatch> {
    let seed_point = &backward[iterations];
    let mut rng = seeds::stream(params.seed, "leaf-seed-frame", iterations as u64);
    let f_basis = fast_subspace(
        map,
        &seed_point.to_vector(),
        fast_dim,
        params.splitting_steps,
        &mut rng,
    )?;
    let mut patch = flat_graph_patch(
        seed_point.clone(),
        level,
        params.radius,
        f_basis,
        params.grid_nodes,
    );
    for j in (0..iterations).rev() {
        patch = transform_onto(map, &patch, params.c_max, Some(&backward[j]))?;
    }
    Ok(patch)
}

/// Sup over the grid nodes of `a` of the distance to the leaf surface of `b`.
/// Both patches must share a base point; frames may differ in orientation.
fn sup_distance(a: &LeafPatch, b: &LeafPatch) -> f64 {
    let Some(grid) = a.grid() else {
        return 0.0;
    };
    (0..grid.node_count())
        .filter_map(|idx| {
            let w = grid.node_coords(idx);
            if !a.contains(&w) {
                return None;
            }
            let offset = a.offset_at(&w);
            let wb: Vec<f64> = (b.f_basis.transpose() * &offset).iter().copied().collect();
            b.contains(&wb).then(|| (&offset - b.offset_at(&wb)).norm())
        })
        .fold(0.0, f64::max)
}

/// Grows the level-`level` unstable patch at `x` by seeding a flat disk at
/// `f^{-iterations}(x)` and applying the graph transform `iterations` times
/// along the stored backward orbit.
pub fn grow_unstable_patch<M: Dynamics + ?Sized>(
    map: &M,
    spectrum: &LyapunovSpectrum,
    x: &TorusPoint,
    level: usize,
    params: &LeafParams,
) -> Result<LeafPatch> {
    let (_, fast_dim) = hierarchy_indices(spectrum, level)?;
    check_radius(params.radius)?;
    if params.iterations == 0 {
        return Err(Error::InvalidParameter("iterations must be >= 1".into()));
    }
    if params.grid_nodes < 3 {
        return Err(Error::InvalidParameter("grid needs >= 3 nodes per axis".into()));
    }
    let mut backward = Vec::with_capacity(params.iterations + 1);
    backward.push(x.clone());
    for j in 0..params.iterations {
        let prev = &backward[j];
        backward.push(map.step(prev, crate::systems::Direction::Inverse));
    }
    let patch = grow_once(map, &backward, fast_dim, level, params.iterations, params)?;
    if params.check_convergence && params.iterations >= 3 {
        let shorter = grow_once(map, &backward, fast_dim, level, params.iterations - 1, params)?;
        let d1 = sup_distance(&patch, &shorter);
        if d1 > GROWTH_TOL {
            let shortest = grow_once(map, &backward, fast_dim, level, params.iterations - 2, params)?;
            let d0 = sup_distance(&shorter, &shortest);
            if d1 >= d0 {
                return Err(Error::NonConvergent(d1));
            }
        }
    }
    Ok(patch)
}

/// Intrinsic distance between two points of the patch.
pub fn leaf_distance(patch: &LeafPatch, a: &TorusPoint, b: &TorusPoint) -> Result<f64> {
    let wa = patch.coordinates_of(a)?;
    let wb = patch.coordinates_of(b)?;
    Ok(leaf_distance_coords(patch, &wa, &wb))
}

/// Length of the lift to the leaf of the straight chord between two fast
/// coordinates (exact arclength for one-dimensional leaves).
pub fn leaf_distance_coords(patch: &LeafPatch, wa: &[f64], wb: &[f64]) -> f64 {
    let chord: f64 = wa.iter().zip(wb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    match &patch.representation {
        Representation::Affine => chord,
        Representation::Graph(g) => {
            if chord == 0.0 {
                return 0.0;
            }
            let pieces = ((chord / g.spacing) * 4.0).ceil().max(1.0) as usize;
            let at = |t: f64| -> Vec<f64> { wa.iter().zip(wb).map(|(x, y)| x + t * (y - x)).collect() };
            let mut prev = patch.offset_at(wa);
            let mut total = 0.0;
            for s in 1..=pieces {
                let next = patch.offset_at(&at(s as f64 / pieces as f64));
                total += (&next - &prev).norm();
                prev = next;
            }
            total
        }
    }
}

const GAUSS_NODES: [(f64, f64); 4] = [
    (0.069_431_844_202_973_71, 0.173_927_422_568_726_93),
    (0.330_009_478_207_571_87, 0.326_072_577_431_273_07),
    (0.669_990_521_792_428_1, 0.326_072_577_431_273_07),
    (0.930_568_155_797_026_3, 0.173_927_422_568_726_93),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardContraction {
    /// `(1/n) log d(f^{-n}x, f^{-n}y)`.
    pub rate: f64,
    /// Largest distance from `f^{-1}` of a tracked point to the next patch.
    pub max_residual: f64,
}

/// Follows the backward orbit of the leaf point `y` at fast coordinates `w`
/// of the patch at `x` for `n` steps.
///
/// Patches are built at every `f^{-k}x`. Each step carries the displacement
/// from the base orbit as `∫_0^1 Df^{-1}(x_k + t v_k) dt · v_k` and projects it
/// onto the next patch, recording the projection residual. Differencing two
/// separately rounded orbits would let the expanding slow direction swamp the
/// displacement long before `n = 20`.
pub fn backward_contraction<M: Dynamics + ?Sized>(
    map: &M,
    spectrum: &LyapunovSpectrum,
    x: &TorusPoint,
    level: usize,
    w: &[f64],
    n: usize,
    params: &LeafParams,
) -> Result<BackwardContraction> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    let build = |p: &TorusPoint| {
        if map.is_linear() {
            affine_leaf_patch(map, spectrum, p, level, params.radius)
        } else {
            grow_unstable_patch(map, spectrum, p, level, params)
        }
    };
    let mut patch = build(x)?;
    if !patch.contains(w) {
        return Err(Error::InvalidParameter("fast coordinates outside the patch".into()));
    }
    let mut v = patch.offset_at(w);
    let mut max_residual: f64 = 0.0;
    for _ in 0..n {
        let base = patch.anchor();
        let image = map.lift_inverse(&base);
        let next = build(&TorusPoint::from_lift(&image))?;
        let shift = image - next.anchor();
        let mut moved = shift.map(crate::systems::wrap_diff);
        for (t, weight) in GAUSS_NODES {
            moved += map.inverse_jacobian(&(&base + t * &v)) * &v * weight;
        }
        let coords: Vec<f64> = (next.f_basis.transpose() * &moved).iter().copied().collect();
        v = next.offset_at(&coords);
        max_residual = max_residual.max((&moved - &v).norm());
        patch = next;
    }
    Ok(BackwardContraction {
        rate: v.norm().ln() / n as f64,
        max_residual,
    })
}

/// Leaf volume of the whole patch `{|w| <= radius}`.
pub fn whole_volume(patch: &LeafPatch) -> f64 {
    let k = patch.fast_dim();
    match &patch.representation {
        Representation::Affine => unit_ball_volume(k) * patch.radius.powi(k as i32),
        Representation::Graph(_) => leaf_volume(patch, |_, _| true),
    }
}

/// Quadrature nodes per axis for affine patches.
const AFFINE_QUADRATURE_NODES: usize = 513;

/// `∫_U 1_region(w) sqrt(det(I + DψᵀDψ)) dw` by midpoint quadrature over the
/// patch grid. `region` receives the fast coordinates and the chart point.
pub fn leaf_volume<R>(patch: &LeafPatch, region: R) -> f64
where
    R: Fn(&[f64], &DVector<f64>) -> bool + Sync,
{
    let k = patch.fast_dim();
    let grid = match &patch.representation {
        Representation::Graph(g) => g.clone(),
        Representation::Affine => GraphGrid::flat(k, patch.e_basis.ncols(), AFFINE_QUADRATURE_NODES, patch.radius),
    };
    let cell = grid.spacing.powi(k as i32);
    let centers = grid.cell_centers(patch.radius);
    centers
        .par_iter()
        .map(|w| {
            let p = patch.point_at(w);
            if region(w, &p) {
                cell * patch.volume_element(w)
            } else {
                0.0
            }
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::{lyapunov_spectrum, SpectrumParams};
    use crate::linalg::principal_angle;
    use crate::systems::catalog::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn spectrum<M: Dynamics>(m: &M) -> LyapunovSpectrum {
        lyapunov_spectrum(m, &SpectrumParams::default()).unwrap()
    }

    #[test]
    fn affine_cat_segment() {
        let f = cat_map();
        let s = spectrum(&f);
        let x = TorusPoint::new(vec![0.0, 0.0]);
        let patch = affine_leaf_patch(&f, &s, &x, 1, 0.3).unwrap();
        assert_eq!(patch.dispersion, 0.0);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let dir = orthonormalize(&DMatrix::from_column_slice(2, 1, &[1.0, g]));
        assert!(principal_angle(&dir, &patch.f_basis) < 1e-8);
        let end_a = patch.point_at(&[-0.3]);
        let end_b = patch.point_at(&[0.3]);
        assert_relative_eq!((end_b - end_a).norm(), 0.6, epsilon = 1e-12);
        assert_relative_eq!(whole_volume(&patch), 0.6, epsilon = 1e-12);
        assert_relative_eq!(leaf_volume(&patch, |_, _| true), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn affine_block_patches() {
        let f = block_map();
        let s = spectrum(&f);
        let x = TorusPoint::new(vec![0.1, 0.2, 0.3, 0.4]);
        let disk = affine_leaf_patch(&f, &s, &x, 1, 0.2).unwrap();
        assert_eq!(disk.fast_dim(), 2);
        assert_relative_eq!(whole_volume(&disk), PI * 0.04, epsilon = 1e-12);
        assert_relative_eq!(whole_volume(&disk), 0.1256637, epsilon = 1e-7);
        // Midpoint quadrature of the disk converges to the same area.
        assert_relative_eq!(leaf_volume(&disk, |_, _| true), PI * 0.04, max_relative = 2e-3);
        let seg = affine_leaf_patch(&f, &s, &x, 2, 0.2).unwrap();
        assert_eq!(seg.fast_dim(), 1);
        assert_relative_eq!(whole_volume(&seg), 0.4, epsilon = 1e-12);
        assert!(matches!(
            affine_leaf_patch(&f, &s, &x, 3, 0.2),
            Err(Error::LevelOutOfRange { .. })
        ));
        let p = perturbed_cat(0.05).unwrap();
        assert!(matches!(
            affine_leaf_patch(&p, &spectrum(&p), &TorusPoint::new(vec![0.1, 0.1]), 1, 0.1),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn affine_transform_stays_affine() {
        let f = cat_map();
        let s = spectrum(&f);
        let patch = affine_leaf_patch(&f, &s, &TorusPoint::new(vec![0.2, 0.9]), 1, 0.1).unwrap();
        let next = graph_transform_step(&f, &patch, 1.0).unwrap();
        assert!(next.is_affine());
        assert_eq!(next.dispersion, 0.0);
        assert!(principal_angle(&next.f_basis, &patch.f_basis) < 1e-10);
    }

    #[test]
    fn flat_graph_matches_affine_volume() {
        let f = cat_map();
        let s = spectrum(&f);
        let patch = affine_leaf_patch(&f, &s, &TorusPoint::new(vec![0.5, 0.5]), 1, 0.25).unwrap();
        let flat = flat_graph_patch(patch.base.clone(), 1, 0.25, patch.f_basis.clone(), 513);
        assert!((whole_volume(&flat) - whole_volume(&patch)).abs() <= 1e-9);
    }

    #[test]
    fn zero_amplitude_transform_is_flat() {
        let f = perturbed_cat(0.0).unwrap();
        let s = spectrum(&f);
        let x = TorusPoint::new(vec![0.3, 0.6]);
        let split = oseledec_splitting(&f, &s, &x, 1, &SplittingParams::default()).unwrap();
        let patch = flat_graph_patch(x, 1, 0.05, split.f_basis, 129);
        let next = graph_transform_step(&f, &patch, 1.0).unwrap();
        assert!(next.dispersion <= 1e-12, "{}", next.dispersion);
    }

    #[test]
    fn perturbed_transform_keeps_dispersion() {
        let f = perturbed_cat(0.05).unwrap();
        let s = spectrum(&f);
        let x = TorusPoint::new(vec![0.3, 0.6]);
        let split = oseledec_splitting(&f, &s, &x, 1, &SplittingParams::default()).unwrap();
        let mut patch = flat_graph_patch(x, 1, 0.05, split.f_basis, 129);
        for _ in 0..50 {
            patch = graph_transform_step(&f, &patch, 1.0).unwrap();
            assert!(patch.dispersion <= 1.0);
        }
        // Too tight a bound is reported.
        assert!(matches!(
            graph_transform_step(&f, &patch, patch.dispersion * 0.5),
            Err(Error::DispersionExceeded { .. })
        ));
    }

    #[test]
    fn grown_linear_patch_matches_affine() {
        let f = cat_map();
        let s = spectrum(&f);
        let x = TorusPoint::new(vec![0.37, 0.11]);
        let params = LeafParams {
            grid_nodes: 129,
            ..Default::default()
        };
        let grown = grow_unstable_patch(&f, &s, &x, 1, &params).unwrap();
        let affine = affine_leaf_patch(&f, &s, &x, 1, params.radius).unwrap();
        let grid = grown.grid().unwrap();
        for idx in 0..grid.node_count() {
            let w = grid.node_coords(idx);
            let p = TorusPoint::from_lift(&grown.point_at(&w));
            let q = affine.coordinates_of(&p).unwrap();
            assert!((affine.point_at(&q) - p.lift_near(&affine.anchor())).norm() <= 1e-10);
        }
    }

    #[test]
    fn grown_perturbed_patch_converges_and_is_tangent() {
        let f = perturbed_cat(0.05).unwrap();
        let s = spectrum(&f);
        let x = TorusPoint::new(vec![0.62, 0.27]);
        let p30 = LeafParams {
            grid_nodes: 257,
            iterations: 30,
            ..Default::default()
        };
        let p60 = LeafParams { iterations: 60, ..p30 };
        let a = grow_unstable_patch(&f, &s, &x, 1, &p30).unwrap();
        let b = grow_unstable_patch(&f, &s, &x, 1, &p60).unwrap();
        assert!(sup_distance(&a, &b) <= 1e-6, "{}", sup_distance(&a, &b));
        assert!(a.dispersion <= 1.0);
        let split = oseledec_splitting(&f, &s, &x, 1, &SplittingParams::default()).unwrap();
        let tangent = orthonormalize(&a.tangent_at(&[0.0]));
        assert!(principal_angle(&tangent, &split.f_basis) <= 1e-4);
        assert!(a.psi(&[0.0]).norm() <= 1e-12);
    }

    #[test]
    fn backward_contraction_on_grown_leaf() {
        let f = perturbed_cat(0.05).unwrap();
        let s = spectrum(&f);
        let x = TorusPoint::new(vec![0.21, 0.58]);
        let params = LeafParams {
            grid_nodes: 257,
            ..Default::default()
        };
        for w in [-0.09, 0.05] {
            let c = backward_contraction(&f, &s, &x, 1, &[w], 20, &params).unwrap();
            assert!(c.rate <= -s.raw[0] + 0.05, "{c:?}");
            assert!(c.max_residual <= ON_LEAF_TOL, "{c:?}");
        }
        let lin = cat_map();
        let c = backward_contraction(&lin, &spectrum(&lin), &x, 1, &[0.1], 20, &params).unwrap();
        let expected = -0.9624236501192069 + 0.1f64.ln() / 20.0;
        assert!((c.rate - expected).abs() <= 1e-6, "{c:?}");
    }

    #[test]
    fn leaf_distances() {
        let f = cat_map();
        let s = spectrum(&f);
        let patch = affine_leaf_patch(&f, &s, &TorusPoint::new(vec![0.9, 0.95]), 1, 0.3).unwrap();
        let a = TorusPoint::from_lift(&patch.point_at(&[-0.2]));
        let b = TorusPoint::from_lift(&patch.point_at(&[0.15]));
        assert_relative_eq!(leaf_distance(&patch, &a, &b).unwrap(), 0.35, epsilon = 1e-12);
        assert_eq!(leaf_distance(&patch, &a, &a).unwrap(), 0.0);
        let off = TorusPoint::new(vec![0.5, 0.5]);
        assert!(matches!(leaf_distance(&patch, &a, &off), Err(Error::NotOnLeaf(_))));
    }

    #[test]
    fn graph_distance_bounded_by_dispersion() {
        let f = perturbed_cat(0.08).unwrap();
        let s = spectrum(&f);
        let x = TorusPoint::new(vec![0.13, 0.42]);
        let params = LeafParams {
            grid_nodes: 257,
            radius: 0.2,
            ..Default::default()
        };
        let patch = grow_unstable_patch(&f, &s, &x, 1, &params).unwrap();
        let c = patch.dispersion;
        for (wa, wb) in [(-0.15, 0.1), (0.0, 0.19), (-0.19, -0.05)] {
            let a = TorusPoint::from_lift(&patch.point_at(&[wa]));
            let b = TorusPoint::from_lift(&patch.point_at(&[wb]));
            let dist = leaf_distance(&patch, &a, &b).unwrap();
            assert!(dist <= (1.0 + c * c).sqrt() * (wa - wb).abs() + 1e-12);
            assert!(dist >= (wa - wb).abs() - 1e-12);
        }
    }

    #[test]
    fn volume_element_bounds() {
        let f = perturbed_cat(0.08).unwrap();
        let s = spectrum(&f);
        let params = LeafParams {
            grid_nodes: 257,
            radius: 0.2,
            ..Default::default()
        };
        let patch = grow_unstable_patch(&f, &s, &TorusPoint::new(vec![0.5, 0.5]), 1, &params).unwrap();
        let c = patch.dispersion;
        let grid = patch.grid().unwrap();
        for idx in 0..grid.node_count() {
            let e = patch.volume_element(&grid.node_coords(idx));
            assert!(e >= 1.0 - 1e-15 && e <= (1.0 + c * c).sqrt() + 1e-12);
        }
    }

    #[test]
    fn grid_interpolation_is_exact_for_multilinear_data() {
        let mut g = GraphGrid::flat(2, 1, 5, 1.0);
        for idx in 0..g.node_count() {
            let w = g.node_coords(idx);
            g.values[idx] = 2.0 * w[0] - 3.0 * w[1] + 0.5;
        }
        let v = g.value(&[0.3, -0.7]);
        assert_relative_eq!(v[0], 2.0 * 0.3 + 3.0 * 0.7 + 0.5, epsilon = 1e-12);
        let grad = g.gradient(&[0.1, 0.2]);
        assert_relative_eq!(grad[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(grad[(0, 1)], -3.0, epsilon = 1e-12);
        assert_relative_eq!(measure_dispersion(&g), 13f64.sqrt(), epsilon = 1e-12);
    }
}
