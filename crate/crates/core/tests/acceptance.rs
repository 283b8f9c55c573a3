//! Acceptance criteria, one PASS/FAIL line each.

mod common;

use std::time::{Duration, Instant};

use common::*;
use foliation_lab::cocycle::{lyapunov_spectrum, oseledec_splitting, LyapunovSpectrum, SpectrumParams, SplittingParams};
use foliation_lab::config::ExperimentConfig;
use foliation_lab::domination::{certify_domination, DominationParams};
use foliation_lab::entropy::{estimate, power_rule_check, EstimatorParams, Method};
use foliation_lab::leaf::{backward_contraction, flat_graph_patch, graph_transform_step, LeafParams, ON_LEAF_TOL};
use foliation_lab::systems::catalog::{block_map, cat_map, perturbed_cat};
use foliation_lab::systems::{Dynamics, TorusPoint};
use foliation_lab::verify::run_catalog;

const LOG_BETA: f64 = 0.9624236501192069;

type Verdict = Result<String, String>;

fn spectrum<M: Dynamics>(map: &M) -> LyapunovSpectrum {
    lyapunov_spectrum(map, &SpectrumParams::default()).expect("spectrum")
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target.abs()
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cat_pesin() -> Verdict {
    let start = Instant::now();
    let f = cat_map();
    let est = estimate(&f, &spectrum(&f), 1, Method::Volume, &EstimatorParams::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(
        within(est.h_estimate, LOG_BETA, 0.05) && elapsed <= Duration::from_secs(60),
        format!("h1 = {:.6} (target {LOG_BETA:.7}) in {:.1}s", est.h_estimate, elapsed.as_secs_f64()),
    )
}

fn block_hierarchy() -> Verdict {
    let f = block_map();
    let s = spectrum(&f);
    let params = EstimatorParams::default();
    let h1 = estimate(&f, &s, 1, Method::Volume, &params).map_err(|e| e.to_string())?.h_estimate;
    let h2 = estimate(&f, &s, 2, Method::Volume, &params).map_err(|e| e.to_string())?.h_estimate;
    check(
        within(h1, 2.8872710, 0.1) && within(h2, 1.9248473, 0.1),
        format!("h1 = {h1:.6} (target 2.8872710), h2 = {h2:.6} (target 1.9248473)"),
    )
}

fn ruelle() -> Verdict {
    let mut config = ExperimentConfig::default();
    config.entropy.methods = vec!["volume".into()];
    let report = run_catalog(&config);
    let bad: Vec<String> = report
        .rows
        .iter()
        .filter(|r| !r.ruelle_ok)
        .map(|r| format!("{} i={}: {} > {}", r.system, r.level, r.h_estimate, r.rhs))
        .collect();
    check(
        bad.is_empty() && !report.rows.is_empty(),
        if bad.is_empty() {
            format!("{} rows", report.rows.len())
        } else {
            bad.join("; ")
        },
    )
}

fn power_rule() -> Verdict {
    let f = cat_map();
    let rule = power_rule_check(&f, &spectrum(&f), 1, 2, &EstimatorParams::default()).map_err(|e| e.to_string())?;
    let gap = (rule.h_fm - 2.0 * rule.h_f).abs();
    check(
        gap <= 0.1,
        format!("h(f) = {:.6}, h(f^2) = {:.6}, gap {gap:.2e}", rule.h_f, rule.h_fm),
    )
}

fn domination() -> Verdict {
    let params = DominationParams::default();
    let cat = cat_map();
    let c = certify_domination(&cat, &spectrum(&cat), 1, &params).map_err(|e| e.to_string())?;
    let block = block_map();
    let b = certify_domination(&block, &spectrum(&block), 2, &params).map_err(|e| e.to_string())?;
    let perturbed = perturbed_cat(0.05).map_err(|e| e.to_string())?;
    let p = certify_domination(&perturbed, &spectrum(&perturbed), 1, &params).map_err(|e| e.to_string())?;
    let points = p.sample_count * p.orbit_length;
    check(
        c.n == 1
            && (c.worst_ratio - 0.1458980).abs() <= 1e-6
            && b.n == 1
            && (b.worst_ratio - 0.3819660).abs() <= 1e-6
            && p.n == 1
            && p.worst_ratio < 0.25
            && points >= 1_000,
        format!(
            "cat N={} {:.7}; block i=2 N={} {:.7}; perturbed N={} {:.4} over {points} points",
            c.n, c.worst_ratio, b.n, b.worst_ratio, p.n, p.worst_ratio
        ),
    )
}

fn spectra() -> Verdict {
    let cat = spectrum(&cat_map()).raw;
    let block = spectrum(&block_map()).raw;
    let perturbed = spectrum(&perturbed_cat(0.05).map_err(|e| e.to_string())?).raw;
    let cat_err = cat
        .iter()
        .zip([LOG_BETA, -LOG_BETA])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let block_err = block
        .iter()
        .zip([2.0 * LOG_BETA, LOG_BETA, -LOG_BETA, -2.0 * LOG_BETA])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let sum = perturbed.iter().sum::<f64>().abs();
    check(
        cat_err <= 1e-3 && block_err <= 1e-3 && sum <= 1e-3,
        format!("cat err {cat_err:.1e}, block err {block_err:.1e}, perturbed |sum| {sum:.1e}"),
    )
}

fn cross_agreement() -> Verdict {
    let f = cat_map();
    let s = spectrum(&f);
    let params = EstimatorParams::default();
    let mut values = Vec::new();
    for m in [Method::Volume, Method::Separated, Method::Partition] {
        values.push((m, estimate(&f, &s, 1, m, &params).map_err(|e| format!("{m}: {e}"))?.h_estimate));
    }
    let mut ok = true;
    for (i, (_, a)) in values.iter().enumerate() {
        for (_, b) in &values[i + 1..] {
            ok &= (a - b).abs() <= 0.1 * a.max(*b);
        }
    }
    let text: Vec<String> = values.iter().map(|(m, v)| format!("{m} {v:.4}")).collect();
    check(ok, text.join(", "))
}

fn graph_transform() -> Verdict {
    let f = perturbed_cat(0.05).map_err(|e| e.to_string())?;
    let s = spectrum(&f);
    let x = TorusPoint::new(vec![0.41, 0.17]);
    let split = oseledec_splitting(&f, &s, &x, 1, &SplittingParams::default()).map_err(|e| e.to_string())?;
    let mut patch = flat_graph_patch(x.clone(), 1, 0.05, split.f_basis, 129);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        patch = graph_transform_step(&f, &patch, 1.0).map_err(|e| e.to_string())?;
        worst = worst.max(patch.dispersion);
    }
    let bound = -s.raw[0] + 0.05;
    let mut rate: f64 = f64::NEG_INFINITY;
    let mut residual: f64 = 0.0;
    let params = LeafParams::default();
    for w in [-0.09, -0.04, 0.01, 0.06, 0.09] {
        let c = backward_contraction(&f, &s, &x, 1, &[w], 20, &params).map_err(|e| e.to_string())?;
        rate = rate.max(c.rate);
        residual = residual.max(c.max_residual);
    }
    check(
        worst <= 1.0 && rate <= bound && residual <= ON_LEAF_TOL,
        format!("max dispersion {worst:.3e}; worst rate {rate:.4} <= {bound:.4}; leaf residual {residual:.1e}"),
    )
}

fn property_suites() -> Verdict {
    let suites = [
        ("bowen monotonicity", bowen_monotonicity(BOWEN_CASES)),
        ("count monotonicity", count_monotonicity(COUNT_CASES)),
        ("sandwich", sandwich(SANDWICH_CASES)),
        ("inverse symmetry", inverse_symmetry(INVERSE_CASES)),
        ("jobs determinism", jobs_determinism(JOBS_CASES)),
    ];
    let total: u32 = suites.iter().map(|(_, o)| o.cases).sum();
    let failures: Vec<String> = suites
        .iter()
        .filter_map(|(name, o)| o.failure.as_ref().map(|f| format!("{name}: {f}")))
        .collect();
    check(
        failures.is_empty() && total >= 1_000,
        if failures.is_empty() {
            format!("{total} cases, 0 violations")
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("cat map Pesin formula", cat_pesin),
        ("block map hierarchy", block_hierarchy),
        ("Ruelle inequality", ruelle),
        ("power rule", power_rule),
        ("domination certificates", domination),
        ("Lyapunov spectra", spectra),
        ("estimator cross-agreement", cross_agreement),
        ("graph transform regime", graph_transform),
        ("property suites", property_suites),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = run();
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
