//! Small dense linear-algebra helpers shared by the cocycle, domination and
//! leaf code. Everything here works on column bases stored as `DMatrix`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Orthonormal basis for the column span of `m` (thin QR).
pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().qr().q()
}

/// One QR step of the cocycle: returns the orthonormal factor and the
/// diagonal of R.
pub fn qr_step(m: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let qr = m.qr();
    let r = qr.r();
    let diag = (0..r.ncols().min(r.nrows())).map(|i| r[(i, i)]).collect();
    (qr.q(), diag)
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    m.clone().svd(false, false).singular_values
}

pub fn max_singular_value(m: &DMatrix<f64>) -> f64 {
    singular_values(m).max()
}

pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    singular_values(m).min()
}

/// Largest principal angle between the spans of two orthonormal bases of
/// equal dimension.
pub fn principal_angle(u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let residual = v - u * (u.transpose() * v);
    let s = if residual.ncols() == 0 {
        0.0
    } else {
        max_singular_value(&residual)
    };
    s.min(1.0).asin()
}

/// Orthonormal basis of the orthogonal complement of the span of `f`, which
/// must have orthonormal columns.
pub fn orthogonal_complement(f: &DMatrix<f64>) -> DMatrix<f64> {
    let d = f.nrows();
    let k = f.ncols();
    let mut basis: Vec<DVector<f64>> = f.column_iter().map(|c| c.into_owned()).collect();
    let mut out = Vec::with_capacity(d - k);
    // Candidate identity columns, most orthogonal to the current span first.
    for _ in 0..(d - k) {
        let mut best: Option<DVector<f64>> = None;
        let mut best_norm = 0.0;
        for j in 0..d {
            let mut e = DVector::<f64>::zeros(d);
            e[j] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let proj = b.dot(&e);
                    e.axpy(-proj, b, 1.0);
                }
            }
            let n = e.norm();
            if n > best_norm {
                best_norm = n;
                best = Some(e / n);
            }
        }
        let v = best.expect("complement exists for k < d");
        basis.push(v.clone());
        out.push(v);
    }
    if out.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&out)
    }
}

/// Random `d x k` frame with orthonormal columns.
pub fn random_frame<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0));
    orthonormalize(&m)
}

/// Volume of the unit ball in `R^k`.
pub fn unit_ball_volume(k: usize) -> f64 {
    match k {
        0 => 1.0,
        1 => 2.0,
        _ => unit_ball_volume(k - 2) * 2.0 * std::f64::consts::PI / k as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn complement_is_orthonormal_and_orthogonal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for d in 2..6 {
            for k in 1..d {
                let f = random_frame(d, k, &mut rng);
                let e = orthogonal_complement(&f);
                assert_eq!(e.ncols(), d - k);
                let gram = e.transpose() * &e;
                assert_relative_eq!(gram, DMatrix::identity(d - k, d - k), epsilon = 1e-12);
                assert!((f.transpose() * &e).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn principal_angle_of_axes() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let y = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let diag = DMatrix::from_column_slice(2, 1, &[0.5f64.sqrt(), 0.5f64.sqrt()]);
        assert_relative_eq!(principal_angle(&x, &x), 0.0, epsilon = 1e-15);
        assert_relative_eq!(principal_angle(&x, &y), std::f64::consts::FRAC_PI_2, epsilon = 1e-7);
        assert_relative_eq!(principal_angle(&x, &diag), std::f64::consts::FRAC_PI_4, epsilon = 1e-12);
    }

    #[test]
    fn ball_volumes() {
        assert_relative_eq!(unit_ball_volume(2), std::f64::consts::PI);
        assert_relative_eq!(unit_ball_volume(3), 4.0 / 3.0 * std::f64::consts::PI);
    }
}
