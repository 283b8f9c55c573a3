//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::cocycle::{hierarchy_indices, lyapunov_spectrum, LyapunovSpectrum};
use crate::config::{parse_config, ConfigError, ExperimentConfig, SystemSpec};
use crate::domination::certify_domination;
use crate::entropy::{estimate, sample_patch, EntropyEstimate, Method};
use crate::error::Error;
use crate::systems::TorusMap;
use crate::verify::{format_number, run_catalog};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURES: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "foliation-lab", version, about = "Entropy along unstable foliations of torus maps")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML); defaults to the built-in catalog.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// System name from the config or the catalog (cat, block4, perturbed-cat).
    #[arg(long, global = true)]
    pub system: Option<String>,
    /// Hierarchy level i.
    #[arg(long, global = true)]
    pub level: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// volume, separated, spanning or partition.
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// QR steps for the Lyapunov spectrum.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lyapunov spectrum as `lambda,multiplicity`.
    Spectrum,
    /// Domination certificates as `level,N,worst_ratio,samples`.
    Dominate,
    /// Entropy curves and fits.
    Entropy,
    /// Ruelle and Pesin checks over the configured catalog.
    Verify,
    /// Sampled points of a leaf patch.
    LeafDump,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::LevelOutOfRange { .. } | Error::InvalidParameter(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

struct Context {
    config: ExperimentConfig,
    common: Common,
    out: PathBuf,
}

impl Context {
    fn new(common: Common) -> Result<Self, Failure> {
        let mut config = match &common.config {
            Some(path) => parse_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        if let Some(steps) = common.steps {
            if steps == 0 {
                return Err(Failure::Usage("--steps must be >= 1".into()));
            }
            config.spectrum.steps = steps;
        }
        if let Some(m) = &common.method {
            m.parse::<Method>().map_err(|e| Failure::Usage(e.to_string()))?;
            config.entropy.methods = vec![m.clone()];
        }
        let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&config.output));
        config.output = out.display().to_string();
        Ok(Self { config, common, out })
    }

    fn systems(&self) -> Result<Vec<SystemSpec>, Failure> {
        match &self.common.system {
            None => Ok(self.config.systems.clone()),
            Some(name) => self
                .config
                .system(name)
                .cloned()
                .or_else(|| SystemSpec::catalog(name))
                .map(|s| vec![s])
                .ok_or_else(|| Failure::Usage(format!("unknown system {name:?}"))),
        }
    }

    fn single_system(&self) -> Result<SystemSpec, Failure> {
        if self.common.system.is_none() {
            return Err(Failure::Usage("this subcommand needs --system".into()));
        }
        Ok(self.systems()?.remove(0))
    }

    fn build(&self, spec: &SystemSpec) -> Result<(TorusMap, LyapunovSpectrum), Failure> {
        let map = spec.build(self.config.entropy.amplitude_cap)?;
        let spectrum = lyapunov_spectrum(&map, &self.config.spectrum_params())?;
        Ok((map, spectrum))
    }

    fn levels(&self, spec: &SystemSpec, spectrum: &LyapunovSpectrum) -> Result<Vec<usize>, Failure> {
        let levels = match self.common.level {
            Some(l) => vec![l],
            None => spec.levels.resolve(spectrum.u),
        };
        for &l in &levels {
            hierarchy_indices(spectrum, l)?;
        }
        Ok(levels)
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), Failure> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join(name), contents)?;
        Ok(())
    }

    fn write_resolved(&self) -> Result<(), Failure> {
        self.write("resolved_config.toml", &self.config.to_toml())
    }
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

fn run_spectrum(ctx: &Context, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let spec = ctx.single_system()?;
    let (_, spectrum) = ctx.build(&spec)?;
    let rows: Vec<Vec<String>> = spectrum
        .exponents
        .iter()
        .map(|e| vec![format_number(e.value), e.multiplicity.to_string()])
        .collect();
    let text = csv_text(&["lambda", "multiplicity"], &rows);
    ctx.write(&format!("spectrum_{}.csv", spec.name), &text)?;
    ctx.write_resolved()?;
    stdout.write_all(text.as_bytes())?;
    Ok(EXIT_OK)
}

fn run_dominate(ctx: &Context, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let spec = ctx.single_system()?;
    let (map, spectrum) = ctx.build(&spec)?;
    let params = ctx.config.domination_params();
    let mut rows = Vec::new();
    let mut code = EXIT_OK;
    for level in ctx.levels(&spec, &spectrum)? {
        match certify_domination(&map, &spectrum, level, &params) {
            Ok(c) => rows.push(vec![
                level.to_string(),
                c.n.to_string(),
                format_number(c.worst_ratio),
                (c.sample_count * c.orbit_length).to_string(),
            ]),
            Err(e) => {
                eprintln!("level {level}: {e}");
                code = EXIT_FAILURES;
            }
        }
    }
    let text = csv_text(&["level", "N", "worst_ratio", "samples"], &rows);
    ctx.write(&format!("dominate_{}.csv", spec.name), &text)?;
    ctx.write_resolved()?;
    stdout.write_all(text.as_bytes())?;
    Ok(code)
}

fn run_entropy(ctx: &Context, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let params = ctx.config.estimator_params();
    params.validate()?;
    let methods = ctx.config.methods();
    let mut tasks = Vec::new();
    for spec in ctx.systems()? {
        let (map, spectrum) = ctx.build(&spec)?;
        for level in ctx.levels(&spec, &spectrum)? {
            tasks.push((spec.name.clone(), map.clone(), spectrum.clone(), level));
        }
    }
    let mut curves = Vec::new();
    let mut fits = Vec::new();
    let mut code = EXIT_OK;
    for (name, map, spectrum, level) in &tasks {
        for &m in &methods {
            let est: Result<EntropyEstimate, Error> = estimate(map, spectrum, *level, m, &params);
            match est {
                Ok(e) => {
                    for c in &e.curves {
                        curves.push(vec![
                            name.clone(),
                            level.to_string(),
                            m.to_string(),
                            format_number(c.epsilon),
                            c.n.to_string(),
                            format_number(c.value),
                        ]);
                    }
                    fits.push(vec![
                        name.clone(),
                        level.to_string(),
                        m.to_string(),
                        format_number(e.h_estimate),
                        format_number(e.stderr),
                    ]);
                    writeln!(stdout, "{name} i={level} {m}: h = {:.4} +- {:.4}", e.h_estimate, e.stderr)?;
                }
                Err(e) => {
                    writeln!(stdout, "{name} i={level} {m}: {e}")?;
                    code = EXIT_FAILURES;
                }
            }
        }
    }
    ctx.write(
        "entropy_curves.csv",
        &csv_text(&["system", "level", "method", "epsilon", "n", "value"], &curves),
    )?;
    ctx.write(
        "entropy_fits.csv",
        &csv_text(&["system", "level", "method", "h_estimate", "stderr"], &fits),
    )?;
    ctx.write_resolved()?;
    Ok(code)
}

fn run_verify(ctx: &Context, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let mut config = ctx.config.clone();
    if ctx.common.system.is_some() {
        config.systems = ctx.systems()?;
    }
    if let Some(level) = ctx.common.level {
        for s in &mut config.systems {
            s.levels = crate::config::Levels::List(vec![level]);
        }
    }
    let report = run_catalog(&config);
    ctx.write("report.csv", &report.to_csv())?;
    ctx.write_resolved()?;
    stdout.write_all(report.summary().as_bytes())?;
    Ok(if report.failed() == 0 { EXIT_OK } else { EXIT_FAILURES })
}

fn run_leaf_dump(ctx: &Context, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let spec = ctx.single_system()?;
    let (map, spectrum) = ctx.build(&spec)?;
    let params = ctx.config.estimator_params();
    let mut written = 0;
    for level in ctx.levels(&spec, &spectrum)? {
        let patch = sample_patch(&map, &spectrum, level, &params, 0)?;
        let k = patch.fast_dim();
        let c = patch.e_basis.ncols();
        let d = k + c;
        let mut header: Vec<String> = (1..=k).map(|a| format!("w{a}")).collect();
        header.extend((1..=c).map(|a| format!("psi{a}")));
        header.extend((1..=d).map(|a| format!("x{a}")));
        let rows: Vec<Vec<String>> = patch
            .dump_rows(if k == 1 { 201 } else { 41 })
            .into_iter()
            .map(|r| r.iter().map(|&v| format_number(v)).collect())
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let file = format!("leaf_{}_level{level}.csv", spec.name);
        ctx.write(&file, &csv_text(&header, &rows))?;
        writeln!(
            stdout,
            "{file}: {} points, dispersion {:.3e}",
            rows.len(),
            patch.dispersion
        )?;
        written += 1;
    }
    ctx.write_resolved()?;
    Ok(if written > 0 { EXIT_OK } else { EXIT_FAILURES })
}

fn configure_pool(jobs: Option<usize>) -> Result<(), Failure> {
    if let Some(k) = jobs {
        if k == 0 {
            return Err(Failure::Usage("--jobs must be >= 1".into()));
        }
        // A pool that already exists (repeated in-process runs) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    Ok(())
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(stdout, "{}", e.render());
            return EXIT_OK;
        }
    };
    let result = configure_pool(cli.common.jobs).and_then(|()| {
        let ctx = Context::new(cli.common)?;
        match cli.command {
            Command::Spectrum => run_spectrum(&ctx, stdout),
            Command::Dominate => run_dominate(&ctx, stdout),
            Command::Entropy => run_entropy(&ctx, stdout),
            Command::Verify => run_verify(&ctx, stdout),
            Command::LeafDump => run_leaf_dump(&ctx, stdout),
        }
    });
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_FAILURES
        }
    }
}

