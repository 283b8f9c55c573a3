//! Ruelle inequality and Pesin formula checks across a system catalog.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cocycle::{hierarchy_indices, lyapunov_spectrum, LyapunovSpectrum, SpectrumParams};
use crate::config::ExperimentConfig;
use crate::domination::{certify_domination, DominationCertificate, DominationParams};
use crate::entropy::{estimate, EntropyEstimate, EstimatorParams, Method};
use crate::error::{Error, Result};
use crate::seeds;
use crate::systems::Dynamics;

/// `|det Df| - 1` allowed at sampled points for the Pesin check.
pub const VOLUME_TOL: f64 = 1e-9;
const VOLUME_SAMPLES: usize = 100;

#[derive(Debug, Clone)]
pub struct VerifyParams {
    pub spectrum: SpectrumParams,
    pub domination: DominationParams,
    pub estimator: EstimatorParams,
    /// The first method supplies `h_estimate`; the rest feed the spread.
    pub methods: Vec<Method>,
    pub ruelle_margin: f64,
    /// Relative to the exponent sum.
    pub pesin_tolerance: f64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            spectrum: SpectrumParams::default(),
            domination: DominationParams::default(),
            estimator: EstimatorParams::default(),
            methods: vec![Method::Volume],
            ruelle_margin: 0.05,
            pesin_tolerance: 0.1,
        }
    }
}

impl VerifyParams {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        Self {
            spectrum: config.spectrum_params(),
            domination: config.domination_params(),
            estimator: config.estimator_params(),
            methods: config.methods(),
            ruelle_margin: config.verify.ruelle_margin,
            pesin_tolerance: config.verify.pesin_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationRow {
    pub system: String,
    pub level: usize,
    pub method: String,
    pub h_estimate: f64,
    pub stderr: f64,
    /// `Σ_{j<=u(i)} m_j λ_j` from the measured spectrum.
    pub rhs: f64,
    pub ruelle_ok: bool,
    pub pesin_gap: f64,
    pub pesin_ok: bool,
    /// Max minus min over the methods that produced an estimate.
    pub spread: f64,
    pub domination_n: Option<usize>,
    pub worst_ratio: Option<f64>,
    pub note: String,
}

impl VerificationRow {
    fn failed(system: &str, level: usize, method: &str, note: String) -> Self {
        Self {
            system: system.into(),
            level,
            method: method.into(),
            h_estimate: f64::NAN,
            stderr: f64::NAN,
            rhs: f64::NAN,
            ruelle_ok: false,
            pesin_gap: f64::NAN,
            pesin_ok: false,
            spread: f64::NAN,
            domination_n: None,
            worst_ratio: None,
            note,
        }
    }

    pub fn passed(&self) -> bool {
        self.ruelle_ok && self.pesin_ok
    }
}

fn join_note(note: &mut String, extra: &str) {
    if !note.is_empty() {
        note.push_str("; ");
    }
    note.push_str(extra);
}

/// Shortest round-trip text for a CSV cell, in exponent form when tiny.
pub fn format_number(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-4 {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

/// Max of `||det Df| - 1|` over sampled points.
pub fn volume_defect<M: Dynamics + ?Sized>(map: &M, seed: u64) -> f64 {
    let mut rng = seeds::stream(seed, "volume-check", 0);
    (0..VOLUME_SAMPLES)
        .map(|_| {
            let x = nalgebra::DVector::from_fn(map.dim(), |_, _| rng.random::<f64>());
            (map.jacobian(&x).determinant().abs() - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Estimates for one `(system, level)` and the fields shared by both checks.
fn evaluate<M: Dynamics + ?Sized>(
    name: &str,
    map: &M,
    spectrum: &LyapunovSpectrum,
    level: usize,
    params: &VerifyParams,
) -> Result<VerificationRow> {
    hierarchy_indices(spectrum, level)?;
    let rhs = spectrum.unstable_sum(level)?;
    let primary = *params.methods.first().unwrap_or(&Method::Volume);
    let mut note = String::new();
    let certificate: Option<DominationCertificate> = match certify_domination(map, spectrum, level, &params.domination) {
        Ok(c) => Some(c),
        Err(e) => {
            join_note(&mut note, &format!("assumption unverified: {e}"));
            None
        }
    };
    let mut methods = vec![primary];
    methods.extend(params.methods.iter().copied().filter(|m| *m != primary));
    let estimates: Vec<(Method, Result<EntropyEstimate>)> = methods
        .iter()
        .map(|&m| (m, estimate(map, spectrum, level, m, &params.estimator)))
        .collect();
    let main = match &estimates[0].1 {
        Ok(e) => e.clone(),
        Err(e) => return Err(e.clone()),
    };
    let mut values = Vec::new();
    for (m, est) in &estimates {
        match est {
            Ok(e) => {
                values.push(e.h_estimate);
                if !e.converged && *m != Method::Partition {
                    join_note(&mut note, &format!("{m}: no epsilon plateau"));
                }
            }
            Err(e) => join_note(&mut note, &format!("{m} failed: {e}")),
        }
    }
    let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - values.iter().cloned().fold(f64::INFINITY, f64::min);
    let pesin_gap = (main.h_estimate - rhs).abs();
    Ok(VerificationRow {
        system: name.into(),
        level,
        method: primary.to_string(),
        h_estimate: main.h_estimate,
        stderr: main.stderr,
        rhs,
        ruelle_ok: main.h_estimate <= rhs + params.ruelle_margin + main.stderr,
        pesin_gap,
        pesin_ok: pesin_gap <= params.pesin_tolerance * rhs.abs(),
        spread,
        domination_n: certificate.as_ref().map(|c| c.n),
        worst_ratio: certificate.as_ref().map(|c| c.worst_ratio),
        note,
    })
}

/// Row whose verdict is `h ≤ Σ m_j λ_j + margin + stderr`.
pub fn ruelle_check<M: Dynamics + ?Sized>(
    name: &str,
    map: &M,
    level: usize,
    params: &VerifyParams,
) -> Result<VerificationRow> {
    let spectrum = lyapunov_spectrum(map, &params.spectrum)?;
    evaluate(name, map, &spectrum, level, params)
}

/// Row whose verdict is `|h - Σ m_j λ_j| ≤ tolerance · Σ m_j λ_j`, for maps
/// preserving volume.
pub fn pesin_check<M: Dynamics + ?Sized>(
    name: &str,
    map: &M,
    level: usize,
    params: &VerifyParams,
) -> Result<VerificationRow> {
    let defect = volume_defect(map, params.spectrum.seed);
    if defect > VOLUME_TOL {
        return Err(Error::NotVolumePreserving(defect));
    }
    ruelle_check(name, map, level, params)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CatalogReport {
    pub rows: Vec<VerificationRow>,
}

impl CatalogReport {
    pub fn passed(&self) -> usize {
        self.rows.iter().filter(|r| r.passed()).count()
    }

    pub fn failed(&self) -> usize {
        self.rows.len() - self.passed()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "system",
            "level",
            "method",
            "h_estimate",
            "stderr",
            "rhs",
            "ruelle_ok",
            "pesin_gap",
            "pesin_ok",
            "spread",
            "domination_n",
            "worst_ratio",
            "note",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.system.clone(),
                r.level.to_string(),
                r.method.clone(),
                format_number(r.h_estimate),
                format_number(r.stderr),
                format_number(r.rhs),
                r.ruelle_ok.to_string(),
                format_number(r.pesin_gap),
                r.pesin_ok.to_string(),
                format_number(r.spread),
                r.domination_n.map(|n| n.to_string()).unwrap_or_default(),
                r.worst_ratio.map(format_number).unwrap_or_default(),
                r.note.clone(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            out.push_str(&format!(
                "{verdict} {} i={} h={:.4} rhs={:.4} ruelle={} pesin={}",
                r.system, r.level, r.h_estimate, r.rhs, r.ruelle_ok, r.pesin_ok
            ));
            if !r.note.is_empty() {
                out.push_str(&format!(" ({})", r.note));
            }
            out.push('\n');
        }
        out.push_str(&format!("{} rows: {} passed, {} failed\n", self.rows.len(), self.passed(), self.failed()));
        out
    }
}

/// Rows for one configured system; failures become rows with notes.
fn system_rows(config: &ExperimentConfig, index: usize, params: &VerifyParams) -> Vec<VerificationRow> {
    let spec = &config.systems[index];
    let method = params.methods.first().copied().unwrap_or(Method::Volume).to_string();
    let fallback_levels = |u: usize| spec.levels.resolve(u.max(1));
    let map = match spec.build(config.entropy.amplitude_cap) {
        Ok(m) => m,
        Err(e) => {
            return fallback_levels(1)
                .into_iter()
                .map(|l| VerificationRow::failed(&spec.name, l, &method, e.to_string()))
                .collect()
        }
    };
    let spectrum = match lyapunov_spectrum(&map, &params.spectrum) {
        Ok(s) => s,
        Err(e) => {
            return fallback_levels(1)
                .into_iter()
                .map(|l| VerificationRow::failed(&spec.name, l, &method, e.to_string()))
                .collect()
        }
    };
    let defect = volume_defect(&map, params.spectrum.seed);
    spec.levels
        .resolve(spectrum.u)
        .into_par_iter()
        .map(|level| {
            let row = evaluate(&spec.name, &map, &spectrum, level, params);
            match row {
                Ok(mut r) => {
                    if defect > VOLUME_TOL {
                        r.pesin_ok = false;
                        join_note(&mut r.note, &Error::NotVolumePreserving(defect).to_string());
                    }
                    r
                }
                Err(e) => VerificationRow::failed(&spec.name, level, &method, e.to_string()),
            }
        })
        .collect()
}

/// Spectrum, domination certificate, estimators and both checks for every
/// configured `(system, level)`.
pub fn run_catalog(config: &ExperimentConfig) -> CatalogReport {
    let params = VerifyParams::from_config(config);
    let rows: Vec<Vec<VerificationRow>> = (0..config.systems.len())
        .into_par_iter()
        .map(|i| system_rows(config, i, &params))
        .collect();
    CatalogReport {
        rows: rows.into_iter().flatten().collect(),
    }
}
