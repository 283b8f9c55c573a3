#![allow(dead_code)]

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use foliation_lab::cocycle::{lyapunov_spectrum, LyapunovSpectrum, SpectrumParams};
use foliation_lab::config::{ExperimentConfig, SystemSpec};
use foliation_lab::entropy::{bowen_ball_volume, resolved_candidates, separated_count, CountOptions};
use foliation_lab::leaf::{affine_leaf_patch, grow_unstable_patch, LeafParams, LeafPatch};
use foliation_lab::systems::catalog::{block_map, cat_map, perturbed_cat};
use foliation_lab::systems::{make_linear_system, TorusMap, TorusPoint};
use foliation_lab::Error;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub const BOWEN_CASES: u32 = 400;
pub const COUNT_CASES: u32 = 200;
pub const SANDWICH_CASES: u32 = 200;
pub const INVERSE_CASES: u32 = 200;
pub const JOBS_CASES: u32 = 4;

/// Cases run and the first violation, if any.
pub struct SuiteOutcome {
    pub cases: u32,
    pub failure: Option<String>,
}

fn run_suite<S, F>(cases: u32, strategy: S, test: F) -> SuiteOutcome
where
    S: Strategy,
    F: Fn(S::Value) -> Result<(), TestCaseError>,
{
    let config = Config {
        cases,
        failure_persistence: None,
        rng_algorithm: proptest::test_runner::RngAlgorithm::ChaCha,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(
        config,
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let failure = runner.run(&strategy, test).err().map(|e| e.to_string());
    SuiteOutcome { cases, failure }
}

pub struct Fixture {
    pub cat: TorusMap,
    pub cat_spectrum: LyapunovSpectrum,
    pub block: TorusMap,
    pub block_spectrum: LyapunovSpectrum,
    pub perturbed: TorusMap,
    pub perturbed_patches: Vec<LeafPatch>,
}

pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let params = SpectrumParams::default();
        let cat = cat_map();
        let block = block_map();
        let perturbed = perturbed_cat(0.05).unwrap();
        let cat_spectrum = lyapunov_spectrum(&cat, &params).unwrap();
        let block_spectrum = lyapunov_spectrum(&block, &params).unwrap();
        let perturbed_spectrum = lyapunov_spectrum(&perturbed, &params).unwrap();
        let leaf = LeafParams {
            radius: 0.3,
            grid_nodes: 257,
            ..Default::default()
        };
        let perturbed_patches = [[0.12, 0.71], [0.48, 0.33], [0.83, 0.9], [0.27, 0.05]]
            .iter()
            .map(|x| grow_unstable_patch(&perturbed, &perturbed_spectrum, &TorusPoint::new(x.to_vec()), 1, &leaf).unwrap())
            .collect();
        Fixture {
            cat,
            cat_spectrum,
            block,
            block_spectrum,
            perturbed,
            perturbed_patches,
        }
    })
}

fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, d)
}

/// Map and patch for case `which`: cat, block levels 1 and 2, or a grown
/// perturbed leaf.
fn case_patch(which: usize, x: &[f64], perturbed: usize) -> (&'static TorusMap, LeafPatch) {
    let fx = fixture();
    match which {
        0 => (&fx.cat, affine_leaf_patch(&fx.cat, &fx.cat_spectrum, &TorusPoint::new(x[..2].to_vec()), 1, 0.3).unwrap()),
        1 | 2 => (
            &fx.block,
            affine_leaf_patch(&fx.block, &fx.block_spectrum, &TorusPoint::new(x.to_vec()), which, 0.3).unwrap(),
        ),
        _ => (&fx.perturbed, fx.perturbed_patches[perturbed].clone()),
    }
}

fn skip_small(e: Error) -> TestCaseError {
    match e {
        Error::PatchTooSmall { .. } => TestCaseError::reject("ball reaches the patch boundary"),
        other => TestCaseError::fail(other.to_string()),
    }
}

/// Bowen volume is nonincreasing in n and nondecreasing in ε.
pub fn bowen_monotonicity(cases: u32) -> SuiteOutcome {
    let strategy = (0..4usize, point(4), 0..4usize, 1..10usize, 0.02..0.1f64, 1.0..1.5f64);
    run_suite(cases, strategy, |(which, x, p, n, eps, grow)| {
        let (map, patch) = case_patch(which, &x, p);
        let v = bowen_ball_volume(map, &patch, n, eps).map_err(skip_small)?.volume;
        let later = bowen_ball_volume(map, &patch, n + 1, eps).map_err(skip_small)?.volume;
        let wider = bowen_ball_volume(map, &patch, n, eps * grow).map_err(skip_small)?.volume;
        prop_assert!(later <= v, "n={n} eps={eps}: {later} > {v}");
        prop_assert!(v <= wider, "n={n} eps={eps}x{grow}: {v} > {wider}");
        Ok(())
    })
}

/// Separated counts are nondecreasing in n and nonincreasing in ε.
pub fn count_monotonicity(cases: u32) -> SuiteOutcome {
    let strategy = (prop::bool::ANY, point(2), 0..4usize, 2..5usize, 0.04..0.1f64, 1.0..1.5f64);
    run_suite(cases, strategy, |(perturbed, x, p, n, eps, grow)| {
        let (map, patch) = case_patch(if perturbed { 3 } else { 0 }, &x, p);
        let options = CountOptions::default();
        let now = separated_count(map, &patch, n, eps, &options).map_err(skip_small)?.value;
        let later = separated_count(map, &patch, n + 1, eps, &options).map_err(skip_small)?.value;
        prop_assert!(now <= later, "n={n} eps={eps}: {now} > {later}");
        let set = resolved_candidates(map, &patch, n, eps, &options).map_err(skip_small)?;
        let wider = set.separated(eps * grow);
        prop_assert!(wider <= now, "n={n} eps={eps}x{grow}: {wider} > {now}");
        Ok(())
    })
}

/// `spanning(ε) <= separated(ε) <= spanning(ε/2)` on one candidate grid.
pub fn sandwich(cases: u32) -> SuiteOutcome {
    let strategy = (prop::bool::ANY, point(2), 0..4usize, 1..6usize, 0.04..0.12f64);
    run_suite(cases, strategy, |(perturbed, x, p, n, eps)| {
        let (map, patch) = case_patch(if perturbed { 3 } else { 0 }, &x, p);
        let set = resolved_candidates(map, &patch, n, eps / 2.0, &CountOptions::default()).map_err(skip_small)?;
        let span = set.spanning(eps);
        let sep = set.separated(eps);
        let span_half = set.spanning(eps / 2.0);
        prop_assert!(span <= sep && sep <= span_half, "n={n} eps={eps}: {span} {sep} {span_half}");
        Ok(())
    })
}

/// Random hyperbolic element of SL(2, Z) as a word in the two elementary
/// shears.
fn sl2_word() -> impl Strategy<Value = [[i64; 2]; 2]> {
    prop::collection::vec((prop::bool::ANY, 1..3i64), 2..6).prop_filter_map("not hyperbolic", |word| {
        let mut m = [[1i64, 0], [0, 1]];
        for (upper, k) in word {
            let e = if upper { [[1, k], [0, 1]] } else { [[1, 0], [k, 1]] };
            m = [
                [m[0][0] * e[0][0] + m[0][1] * e[1][0], m[0][0] * e[0][1] + m[0][1] * e[1][1]],
                [m[1][0] * e[0][0] + m[1][1] * e[1][0], m[1][0] * e[0][1] + m[1][1] * e[1][1]],
            ];
        }
        let trace = m[0][0] + m[1][1];
        (trace.abs() > 2 && m.iter().flatten().all(|v| v.abs() <= 50)).then_some(m)
    })
}

fn embed(blocks: &[[[i64; 2]; 2]]) -> Vec<Vec<i64>> {
    let d = 2 * blocks.len();
    let mut rows = vec![vec![0; d]; d];
    for (b, m) in blocks.iter().enumerate() {
        for i in 0..2 {
            for j in 0..2 {
                rows[2 * b + i][2 * b + j] = m[i][j];
            }
        }
    }
    rows
}

/// The spectrum of `f^{-1}` is the negated, reversed spectrum of `f`.
pub fn inverse_symmetry(cases: u32) -> SuiteOutcome {
    let strategy = (sl2_word(), prop::option::of(sl2_word()), any::<u64>());
    run_suite(cases, strategy, |(a, b, seed)| {
        let blocks: Vec<_> = std::iter::once(a).chain(b).collect();
        let f = make_linear_system(embed(&blocks)).map_err(|e| TestCaseError::reject(e.to_string()))?;
        let g = make_linear_system(f.inverse_matrix().to_vec()).unwrap();
        let params = SpectrumParams {
            seed,
            ..Default::default()
        };
        let forward = lyapunov_spectrum(&f, &params).unwrap().raw;
        let backward = lyapunov_spectrum(&g, &params).unwrap().raw;
        for (p, q) in forward.iter().zip(backward.iter().rev()) {
            prop_assert!((p + q).abs() <= 1e-3, "{forward:?} vs {backward:?}");
        }
        Ok(())
    })
}

fn reduced_config(seed: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig {
        seed,
        systems: ["cat", "perturbed-cat"].iter().filter_map(|n| SystemSpec::catalog(n)).collect(),
        ..Default::default()
    };
    config.spectrum.steps = 2_000;
    config.domination.samples = 4;
    config.domination.orbit_length = 50;
    config.entropy.samples = 2;
    config.entropy.epsilon_grid = vec![0.1, 0.05];
    config.entropy.n_max = 6;
    config.entropy.counting_n_max = 5;
    config.entropy.partition_samples = 8;
    config.entropy.partition_n_max = 5;
    config.entropy.grid_nodes = 129;
    config.entropy.methods = vec!["volume".into(), "spanning".into(), "partition".into()];
    config
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_foliation-lab")
}

/// Runs the binary and returns its exit code and stderr.
pub fn run_bin(args: &[&str], dir: &Path) -> (i32, String) {
    let output = Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env("NO_COLOR", "1")
        .output()
        .expect("binary runs");
    (output.status.code().unwrap_or(-1), String::from_utf8_lossy(&output.stderr).into_owned())
}

fn csv_files(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<(String, String)> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let path = e.ok()?.path();
            (path.extension()? == "csv").then(|| {
                (
                    path.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read_to_string(&path).unwrap(),
                )
            })
        })
        .collect();
    files.sort();
    files
}

/// `--jobs 1` and `--jobs 8` write identical CSVs for a random seed.
pub fn jobs_determinism(cases: u32) -> SuiteOutcome {
    run_suite(cases, any::<u64>(), |seed| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("reduced.toml");
        std::fs::write(&config, reduced_config(seed).to_toml()).unwrap();
        let config = config.to_string_lossy().into_owned();
        let mut outputs = Vec::new();
        for jobs in ["1", "8"] {
            let out = dir.path().join(format!("jobs{jobs}"));
            let out_arg = out.to_string_lossy().into_owned();
            for command in [
                vec!["verify"],
                vec!["spectrum", "--system", "perturbed-cat"],
                vec!["dominate", "--system", "cat"],
                vec!["entropy", "--system", "perturbed-cat", "--method", "separated"],
            ] {
                let mut args = command.clone();
                args.extend(["--config", &config, "--out", &out_arg, "--jobs", jobs]);
                let (code, err) = run_bin(&args, dir.path());
                prop_assert!(code == 0 || code == 1, "{args:?} exited with {code}: {err}");
            }
            outputs.push(csv_files(&out));
        }
        prop_assert!(!outputs[0].is_empty());
        prop_assert_eq!(&outputs[0], &outputs[1], "seed {}", seed);
        Ok(())
    })
}
