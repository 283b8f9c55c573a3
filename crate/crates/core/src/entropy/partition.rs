//! Leaf-volume fraction of the atom of `⋁_{k<n} f^{-k} α` containing the
//! base point, for `α` the partition of the torus into cubes of side `h`.

use nalgebra::DVector;

use crate::entropy::bowen::radial_path;
use crate::entropy::rays::{stretch_preconditioner, BaseOrbit, RayQuadrature};
use crate::error::{Error, Result};
use crate::leaf::LeafPatch;
use crate::systems::{reduce, Dynamics};

fn cube_of(p: &DVector<f64>, mesh: f64) -> Vec<i64> {
    p.iter().map(|&x| (reduce(x) / mesh).floor() as i64).collect()
}

/// Leaf volume of the atom containing the base point, restricted to the
/// part of it reached along straight rays from the base point.
pub fn partition_atom_volume<M: Dynamics + ?Sized>(
    map: &M,
    patch: &LeafPatch,
    n: usize,
    mesh: f64,
    directions: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 || !(mesh > 0.0) {
        return Err(Error::InvalidParameter(
            "partition atoms need n >= 1 and a positive mesh".into(),
        ));
    }
    let orbit = BaseOrbit::new(map, &patch.anchor(), n);
    let cubes: Vec<Vec<i64>> = orbit.points.iter().map(|p| cube_of(p, mesh)).collect();
    let precond = stretch_preconditioner(&orbit.jacobian(map), &patch.tangent_at(&vec![0.0; patch.fast_dim()]))?;
    let quad = RayQuadrature::new(precond, directions, seed);
    let result = quad.volume(patch, |v, r| {
        let mut points = radial_path(patch, v, r);
        for (k, cube) in cubes.iter().enumerate() {
            if points.iter().any(|p| &cube_of(p, mesh) != cube) {
                return false;
            }
            if k + 1 < cubes.len() {
                for p in points.iter_mut() {
                    *p = orbit.advance(map, p, k);
                }
            }
        }
        true
    });
    Ok(result.volume)
}
