//! Entropy along the `i`-th unstable foliation, estimated from leaf Bowen
//! ball volumes, separated and spanning counts, and partition atoms.

mod bowen;
mod counting;
pub mod fit;
mod partition;
mod rays;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

pub use bowen::{bowen_ball_volume, bowen_ball_volume_with, BowenBallRecord, QuadratureOptions};
pub use counting::{
    auto_spacing, check_budget, count_on, resolved_candidates, separated_count, spanning_count, CandidateSet, CountKind,
    CountOptions, GrowthCount, DEFAULT_CANDIDATE_BUDGET,
};
pub use partition::partition_atom_volume;

use crate::cocycle::{hierarchy_indices, LyapunovSpectrum};
use crate::error::{Error, Result};
use crate::leaf::{affine_leaf_patch, grow_unstable_patch, whole_volume, LeafParams, LeafPatch};
use crate::seeds;
use crate::systems::{Dynamics, Iterate, TorusPoint};
use fit::{combine, least_squares, plateau, LineFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Volume,
    Separated,
    Spanning,
    Partition,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Volume, Method::Separated, Method::Spanning, Method::Partition];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Volume => "volume",
            Method::Separated => "separated",
            Method::Spanning => "spanning",
            Method::Partition => "partition",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    pub samples: usize,
    /// Descending.
    pub epsilon_grid: Vec<f64>,
    /// Inclusive range of `n` for the volume estimator.
    pub n_range: (usize, usize),
    /// Inclusive range of `n` for the counting estimators.
    pub counting_n_range: (usize, usize),
    /// Leaf patch radius.
    pub delta: f64,
    pub c_max: f64,
    pub mesh: f64,
    pub partition_samples: usize,
    pub partition_n_range: (usize, usize),
    pub directions: usize,
    pub candidate_budget: usize,
    pub leaf_iterations: usize,
    pub grid_nodes: usize,
    pub splitting_steps: usize,
    pub seed: u64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            samples: 8,
            epsilon_grid: vec![0.1, 0.05, 0.025],
            n_range: (2, 12),
            counting_n_range: (2, 8),
            delta: 0.3,
            c_max: 1.0,
            mesh: 0.05,
            partition_samples: 64,
            partition_n_range: (1, 10),
            directions: 64,
            candidate_budget: DEFAULT_CANDIDATE_BUDGET,
            leaf_iterations: 30,
            grid_nodes: 513,
            splitting_steps: 1_000,
            seed: 0,
        }
    }
}

impl EstimatorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if self.samples == 0 || self.partition_samples == 0 {
            return bad("sample counts must be >= 1");
        }
        if self.epsilon_grid.is_empty() || self.epsilon_grid.iter().any(|e| !(*e > 0.0)) {
            return bad("epsilon grid must hold positive values");
        }
        if self.epsilon_grid.windows(2).any(|w| w[1] >= w[0]) {
            return bad("epsilon grid must descend");
        }
        for (lo, hi) in [self.n_range, self.counting_n_range, self.partition_n_range] {
            if lo == 0 || hi < lo + 3 {
                return bad("n ranges must start at >= 1 and hold >= 4 points");
            }
        }
        if self.epsilon_grid[0] >= self.delta {
            return Err(Error::EpsilonTooLarge {
                epsilon: self.epsilon_grid[0],
                radius: self.delta,
            });
        }
        Ok(())
    }

    fn leaf_params(&self, sample: usize) -> LeafParams {
        LeafParams {
            radius: self.delta,
            c_max: self.c_max,
            iterations: self.leaf_iterations,
            grid_nodes: self.grid_nodes,
            splitting_steps: self.splitting_steps,
            seed: seeds::derive_seed(self.seed, "leaf", sample as u64),
            check_convergence: true,
        }
    }

    fn quadrature(&self, sample: usize) -> QuadratureOptions {
        QuadratureOptions {
            directions: self.directions,
            force_quadrature: false,
            seed: seeds::derive_seed(self.seed, "directions", sample as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSlope {
    pub epsilon: f64,
    pub slope: f64,
    pub stderr: f64,
    pub rms_residual: f64,
    /// Agrees with the adjacent larger ε within the plateau tolerance.
    pub converged: bool,
}

/// Sample-averaged growth quantity at one `(ε, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub n: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyEstimate {
    pub level: usize,
    pub method: Method,
    pub per_epsilon: Vec<EpsilonSlope>,
    pub h_estimate: f64,
    pub stderr: f64,
    /// A plateau was found.
    pub converged: bool,
    pub sample_count: usize,
    pub curves: Vec<CurvePoint>,
}

/// Base point of sample `s`, uniform on the torus.
pub fn base_point(seed: u64, sample: usize, d: usize) -> TorusPoint {
    let mut rng = seeds::stream(seed, "base-points", sample as u64);
    TorusPoint::new((0..d).map(|_| rng.random::<f64>()).collect())
}

/// Exact affine patch for linear systems, grown graph patch otherwise.
pub fn sample_patch<M: Dynamics + ?Sized>(
    map: &M,
    spectrum: &LyapunovSpectrum,
    level: usize,
    params: &EstimatorParams,
    sample: usize,
) -> Result<LeafPatch> {
    let x = base_point(params.seed, sample, map.dim());
    if map.is_linear() {
        affine_leaf_patch(map, spectrum, &x, level, params.delta)
    } else {
        grow_unstable_patch(map, spectrum, &x, level, &params.leaf_params(sample))
    }
}

fn n_values((lo, hi): (usize, usize)) -> Vec<usize> {
    (lo..=hi).collect()
}

/// Per-sample curves indexed `[epsilon][n]` turned into an estimate.
fn assemble(
    level: usize,
    method: Method,
    epsilons: &[f64],
    ns: &[usize],
    per_sample: Vec<Vec<Vec<f64>>>,
    use_plateau: bool,
) -> Result<EntropyEstimate> {
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let samples = per_sample.len();
    let mut per_epsilon = Vec::with_capacity(epsilons.len());
    let mut curves = Vec::new();
    for (j, &epsilon) in epsilons.iter().enumerate() {
        let fits: Vec<LineFit> = per_sample
            .iter()
            .map(|curves| least_squares(&xs, &curves[j]))
            .collect::<Result<_>>()?;
        let fit = combine(&fits);
        per_epsilon.push(EpsilonSlope {
            epsilon,
            slope: fit.slope,
            stderr: fit.stderr,
            rms_residual: fit.rms_residual,
            converged: false,
        });
        for (t, &n) in ns.iter().enumerate() {
            let value = per_sample.iter().map(|c| c[j][t]).sum::<f64>() / samples as f64;
            curves.push(CurvePoint { epsilon, n, value });
        }
    }
    for j in 1..per_epsilon.len() {
        let (small, large) = (per_epsilon[j].slope, per_epsilon[j - 1].slope);
        per_epsilon[j].converged =
            (small - large).abs() <= fit::PLATEAU_TOLERANCE * small.abs().max(large.abs());
    }
    let (chosen, converged) = if use_plateau && per_epsilon.len() > 1 {
        let slopes: Vec<(f64, f64)> = per_epsilon.iter().map(|e| (e.epsilon, e.slope)).collect();
        (plateau(&slopes)?, true)
    } else {
        (per_epsilon.len() - 1, false)
    };
    Ok(EntropyEstimate {
        level,
        method,
        h_estimate: per_epsilon[chosen].slope,
        stderr: per_epsilon[chosen].stderr,
        per_epsilon,
        converged,
        sample_count: samples,
        curves,
    })
}

/// Slope of `-log(vol V^i(f, x, n, ε) / vol W^i(x, δ))` against `n`.
pub fn volume_entropy<M: Dynamics + ?Sized>(
    map: &M,
    spectrum: &LyapunovSpectrum,
    level: usize,
    params: &EstimatorParams,
) -> Result<EntropyEstimate> {
    params.validate()?;
    hierarchy_indices(spectrum, level)?;
    let ns = n_values(params.n_range);
    let per_sample: Vec<Vec<Vec<f64>>> = (0..params.samples)
        .into_par_iter()
        .map(|s| {
            let patch = sample_patch(map, spectrum, level, params, s)?;
            let whole = whole_volume(&patch);
            let quad = params.quadrature(s);
            params
                .epsilon_grid
                .iter()
                .map(|&eps| {
                    ns.iter()
                        .map(|&n| {
                            let rec = bowen_ball_volume_with(map, &patch, n, eps, &quad)?;
                            Ok(-(rec.volume / whole).ln())
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    assemble(level, Method::Volume, &params.epsilon_grid, &ns, per_sample, true)
}

/// Slope of `log` of the separated or spanning count against `n`.
pub fn counting_entropy<M: Dynamics + ?Sized>(
    map: &M,
    spectrum: &LyapunovSpectrum,
    level: usize,
    kind: CountKind,
    params: &EstimatorParams,
) -> Result<EntropyEstimate> {
    params.validate()?;
    hierarchy_indices(spectrum, level)?;
    let ns = n_values(params.counting_n_range);
    let options = CountOptions {
        spacing: None,
        candidate_budget: params.candidate_budget,
    };
    let per_sample: Vec<Vec<Vec<f64>>> = (0..params.samples)
        .into_par_iter()
        .map(|s| {
            let patch = sample_patch(map, spectrum, level, params, s)?;
            let (finest, longest) = (params.epsilon_grid[params.epsilon_grid.len() - 1], ns[ns.len() - 1]);
            check_budget(&patch, auto_spacing(map, &patch, longest, finest), params.candidate_budget)?;
            params
                .epsilon_grid
                .iter()
                .map(|&eps| {
                    ns.iter()
                        .map(|&n| {
                            let set = resolved_candidates(map, &patch, n, eps, &options)?;
                            Ok((count_on(&set, kind, eps).value as f64).ln())
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let method = match kind {
        CountKind::Separated => Method::Separated,
        CountKind::Spanning => Method::Spanning,
    };
    assemble(level, method, &params.epsilon_grid, &ns, per_sample, true)
}

/// Slope against `n` of `-log` of the normalized leaf volume of the atom of
/// `⋁_{k<n} f^{-k} α` through each sampled base point.
pub fn partition_conditional_entropy<M: Dynamics + ?Sized>(
    map: &M,
    spectrum: &LyapunovSpectrum,
    level: usize,
    params: &EstimatorParams,
) -> Result<EntropyEstimate> {
    params.validate()?;
    hierarchy_indices(spectrum, level)?;
    let coarsest = params.epsilon_grid[0];
    if !(params.mesh > 0.0) || params.mesh > coarsest {
        return Err(Error::MeshTooCoarse {
            mesh: params.mesh,
            epsilon: coarsest,
        });
    }
    let ns = n_values(params.partition_n_range);
    let per_sample: Vec<Vec<Vec<f64>>> = (0..params.partition_samples)
        .into_par_iter()
        .map(|s| {
            let patch = sample_patch(map, spectrum, level, params, s)?;
            let whole = whole_volume(&patch);
            let seed = seeds::derive_seed(params.seed, "directions", s as u64);
            let curve = ns
                .iter()
                .map(|&n| {
                    let v = partition_atom_volume(map, &patch, n, params.mesh, params.directions, seed)?;
                    Ok(-(v / whole).ln())
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(vec![curve])
        })
        .collect::<Result<_>>()?;
    assemble(level, Method::Partition, &[params.mesh], &ns, per_sample, false)
}

pub fn estimate<M: Dynamics + ?Sized>(
    map: &M,
    spectrum: &LyapunovSpectrum,
    level: usize,
    method: Method,
    params: &EstimatorParams,
) -> Result<EntropyEstimate> {
    match method {
        Method::Volume => volume_entropy(map, spectrum, level, params),
        Method::Separated => counting_entropy(map, spectrum, level, CountKind::Separated, params),
        Method::Spanning => counting_entropy(map, spectrum, level, CountKind::Spanning, params),
        Method::Partition => partition_conditional_entropy(map, spectrum, level, params),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerRule {
    pub h_f: f64,
    pub h_fm: f64,
    pub ratio: f64,
}

/// Volume entropy of `f` and of `f^m` at the same level.
pub fn power_rule_check<M: Dynamics>(
    map: &M,
    spectrum: &LyapunovSpectrum,
    level: usize,
    m: usize,
    params: &EstimatorParams,
) -> Result<PowerRule> {
    if m == 0 {
        return Err(Error::InvalidParameter("power must be >= 1".into()));
    }
    let h_f = volume_entropy(map, spectrum, level, params)?.h_estimate;
    let h_fm = if m == 1 {
        h_f
    } else {
        let iterate = Iterate::new(map, m)?;
        let scaled = LyapunovSpectrum::from_raw(
            spectrum.raw.iter().map(|l| l * m as f64).collect(),
            crate::cocycle::SpectrumParams::default().cluster_gap * m as f64,
            spectrum.log_det_average * m as f64,
        );
        volume_entropy(&iterate, &scaled, level, params)?.h_estimate
    };
    Ok(PowerRule {
        h_f,
        h_fm,
        ratio: h_fm / h_f,
    })
}
