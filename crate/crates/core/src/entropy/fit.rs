//! Least-squares slopes and the ε plateau rule.

use crate::error::{Error, Result};

/// Relative agreement required between adjacent ε slopes.
pub const PLATEAU_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    /// Root mean square residual.
    pub rms_residual: f64,
}

/// Ordinary least squares of `y` against `x`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return Err(Error::InvalidParameter(
            "least squares needs at least two paired points".into(),
        ));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("abscissae must not all coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let stderr = if n > 2 { (sse / (nf - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(LineFit {
        slope,
        intercept,
        stderr,
        rms_residual: (sse / nf).sqrt(),
    })
}

/// Mean of per-sample fits: the stderr combines the spread of slopes across
/// samples with the individual fit errors.
pub fn combine(fits: &[LineFit]) -> LineFit {
    let s = fits.len() as f64;
    let mean = |f: &dyn Fn(&LineFit) -> f64| fits.iter().map(f).sum::<f64>() / s;
    let slope = mean(&|f| f.slope);
    let var = if fits.len() > 1 {
        fits.iter().map(|f| (f.slope - slope).powi(2)).sum::<f64>() / (s - 1.0)
    } else {
        0.0
    };
    let fit_var: f64 = fits.iter().map(|f| f.stderr * f.stderr).sum::<f64>() / (s * s);
    LineFit {
        slope,
        intercept: mean(&|f| f.intercept),
        stderr: (var / s + fit_var).sqrt(),
        rms_residual: mean(&|f| f.rms_residual),
    }
}

/// Index of the chosen ε in a descending grid: the smallest ε whose slope
/// is within the tolerance of the next larger ε.
pub fn plateau(slopes: &[(f64, f64)]) -> Result<usize> {
    for j in (1..slopes.len()).rev() {
        let (small, large) = (slopes[j].1, slopes[j - 1].1);
        let scale = small.abs().max(large.abs());
        if (small - large).abs() <= PLATEAU_TOLERANCE * scale {
            return Ok(j);
        }
    }
    Err(Error::NoPlateau {
        slopes: slopes.to_vec(),
    })
}
