//! Batch command-line surface over the chaos laboratory: sample Gaussian
//! fields, build chaos ensembles, run verification suites, and sweep
//! parameters. Exit codes: 0 success, 1 verification failure, 2 usage or
//! configuration error.

mod config;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmc_core::{
    build_chaos, build_grid, eval_kernel, kahan_sum, mollifier_distance_curve, run_suite,
    sample_field, suite_names, GFunction, GmcError, KernelSpec, Mollifier, SeedRecord,
    SuiteConfig,
};

use config::{config_hash, merge, PartialConfig, RunConfig};

#[derive(Parser)]
#[command(name = "gmc", about = "Gaussian multiplicative chaos laboratory", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample Gaussian fields and write one CSV per replica plus a manifest
    Sample(CommonArgs),
    /// Build chaos measures and write per-replica CSVs plus a moment summary
    Chaos(CommonArgs),
    /// Run verification suites; exit 1 if any report fails
    Verify(CommonArgs),
    /// Sweep a gamma or eps ladder and write one CSV row per value
    Sweep(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; fields set here must not also be set as flags
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    /// kernel family: kahane | log | zero
    #[arg(long)]
    kernel: Option<String>,
    /// Kahane-family cutoff
    #[arg(long = "C")]
    c: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// cells per axis
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    replicas: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// verification suites, comma separated
    #[arg(long = "suite", value_delimiter = ',')]
    suites: Option<Vec<String>>,
    /// mollifier profile: box | triangle
    #[arg(long)]
    mollifier: Option<String>,
    /// strictly decreasing epsilon ladder, comma separated
    #[arg(long = "eps-ladder", value_delimiter = ',')]
    eps_ladder: Option<Vec<f64>>,
    /// gamma ladder for sweeps, comma separated
    #[arg(long = "gamma-ladder", value_delimiter = ',')]
    gamma_ladder: Option<Vec<f64>>,
    /// output directory
    #[arg(long)]
    out: Option<String>,
    /// z-threshold for statistical verdicts
    #[arg(long)]
    z: Option<f64>,
}

impl CommonArgs {
    fn resolve(self) -> Result<RunConfig, String> {
        let file: PartialConfig = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| format!("invalid config {}: {e}", path.display()))?
            }
            None => PartialConfig::default(),
        };
        let flags = PartialConfig {
            kernel: self.kernel,
            c: self.c,
            gamma: self.gamma,
            n: self.n,
            dim: self.dim,
            replicas: self.replicas,
            seed: self.seed,
            suites: self.suites,
            mollifier: self.mollifier,
            eps_ladder: self.eps_ladder,
            gamma_ladder: self.gamma_ladder,
            pairs: None,
            out: self.out,
            z: self.z,
        };
        merge(file, flags)
    }
}

/// Errors that map to exit 2 (usage/config) as opposed to exit 1 (a
/// verification suite ran and failed).
struct UsageError(String);

impl From<String> for UsageError {
    fn from(s: String) -> Self {
        UsageError(s)
    }
}

impl From<GmcError> for UsageError {
    fn from(e: GmcError) -> Self {
        UsageError(e.to_string())
    }
}

impl From<std::io::Error> for UsageError {
    fn from(e: std::io::Error) -> Self {
        UsageError(e.to_string())
    }
}

fn kernel_spec(config: &RunConfig) -> Result<KernelSpec, UsageError> {
    match config.kernel.as_str() {
        "kahane" => Ok(KernelSpec::KahaneFamily {
            c: config.c,
            gamma: config.gamma,
        }),
        "log" => Ok(KernelSpec::LogKernel {
            gamma: config.gamma,
            g: GFunction::Zero,
        }),
        "zero" => {
            let cells = config.n.pow(config.dim as u32);
            Ok(KernelSpec::Explicit {
                entries: vec![vec![0.0; cells]; cells],
            })
        }
        other => Err(UsageError(format!(
            "unknown kernel '{other}' (expected kahane, log, or zero)"
        ))),
    }
}

fn mollifier_spec(name: &str) -> Result<Mollifier, UsageError> {
    match name {
        "box" => Ok(Mollifier::Box { radius: 1.0 }),
        "triangle" => Ok(Mollifier::Triangle { radius: 1.0 }),
        other => Err(UsageError(format!(
            "unknown mollifier '{other}' (expected box or triangle)"
        ))),
    }
}

fn grid_for(config: &RunConfig) -> Result<gmc_core::DomainGrid, UsageError> {
    Ok(build_grid(
        config.dim,
        &vec![(0.0, 1.0); config.dim],
        config.n,
        None,
    )?)
}

fn write_file(path: &Path, contents: &str) -> Result<(), UsageError> {
    fs::write(path, contents)
        .map_err(|e| UsageError(format!("cannot write {}: {e}", path.display())))
}

fn prepare_out(config: &RunConfig) -> Result<std::path::PathBuf, UsageError> {
    let dir = std::path::PathBuf::from(&config.out);
    fs::create_dir_all(&dir)
        .map_err(|e| UsageError(format!("cannot create output dir {}: {e}", dir.display())))?;
    Ok(dir)
}

#[derive(serde::Serialize)]
struct Manifest {
    config_hash: String,
    kernel_hash: String,
    master_seed: u64,
    replicas: u64,
    files: Vec<String>,
}

fn cmd_sample(config: &RunConfig) -> Result<u8, UsageError> {
    let dir = prepare_out(config)?;
    let grid = grid_for(config)?;
    let cov = eval_kernel(&kernel_spec(config)?, &grid)?;
    let hash = config_hash(config);
    let seed = SeedRecord::new(config.seed);
    let mut files = Vec::new();
    for r in 0..config.replicas {
        let x = sample_field(&cov, seed.substream(r));
        let name = format!("sample_{r:04}.csv");
        write_file(
            &dir.join(&name),
            &format!("# config_hash={hash}\n{}", x.to_csv()),
        )?;
        files.push(name);
    }
    let manifest = Manifest {
        config_hash: hash,
        kernel_hash: format!("{:016x}", cov.content_hash()),
        master_seed: config.seed,
        replicas: config.replicas,
        files,
    };
    write_file(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(0)
}

#[derive(serde::Serialize)]
struct PairMoment {
    i: usize,
    j: usize,
    empirical: f64,
    closed_form: f64,
}

#[derive(serde::Serialize)]
struct ChaosSummary {
    config_hash: String,
    kernel_hash: String,
    master_seed: u64,
    replicas: u64,
    mean_mass: f64,
    se_mass: f64,
    expected_mass: f64,
    pair_second_moments: Vec<PairMoment>,
    files: Vec<String>,
}

fn cmd_chaos(config: &RunConfig) -> Result<u8, UsageError> {
    let dir = prepare_out(config)?;
    let grid = grid_for(config)?;
    let cov = eval_kernel(&kernel_spec(config)?, &grid)?;
    let hash = config_hash(config);
    let seed = SeedRecord::new(config.seed);
    let mut files = Vec::new();
    let mut masses = Vec::new();
    let mut pair_sums = vec![0.0f64; config.pairs.len()];
    for r in 0..config.replicas {
        let x = sample_field(&cov, seed.substream(r));
        let m = build_chaos(&x, &cov, &grid)?;
        for (k, &(i, j)) in config.pairs.iter().enumerate() {
            if i >= grid.len() || j >= grid.len() {
                return Err(UsageError(format!("pair ({i},{j}) out of range")));
            }
            pair_sums[k] += m.weights[i] * m.weights[j];
        }
        masses.push(m.total_mass());
        let name = format!("chaos_{r:04}.csv");
        write_file(
            &dir.join(&name),
            &format!("# config_hash={hash}\n{}", m.to_csv()),
        )?;
        files.push(name);
    }
    let mf = config.replicas as f64;
    let mean = kahan_sum(masses.iter().copied()) / mf;
    let var = kahan_sum(masses.iter().map(|v| (v - mean) * (v - mean))) / mf;
    let summary = ChaosSummary {
        config_hash: hash,
        kernel_hash: format!("{:016x}", cov.content_hash()),
        master_seed: config.seed,
        replicas: config.replicas,
        mean_mass: mean,
        se_mass: (var / mf).sqrt(),
        expected_mass: grid.total_measure(),
        pair_second_moments: config
            .pairs
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| PairMoment {
                i,
                j,
                empirical: pair_sums[k] / mf,
                closed_form: cov.entry(i, j).exp() * grid.cell_measure[i] * grid.cell_measure[j],
            })
            .collect(),
        files,
    };
    write_file(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(0)
}

fn cmd_verify(config: &RunConfig) -> Result<u8, UsageError> {
    let suite_config = SuiteConfig {
        suites: config.suites.clone(),
        replicas: config.replicas,
        master_seed: config.seed,
        z: config.z,
    };
    let reports = match run_suite(&suite_config) {
        Ok(r) => r,
        Err(GmcError::UnknownSuite { name, .. }) => {
            return Err(UsageError(format!(
                "unknown suite '{name}'; valid suites: {}",
                suite_names().join(", ")
            )))
        }
        Err(e) => return Err(e.into()),
    };
    let hash = config_hash(config);
    let mut lines = String::new();
    let mut all_pass = true;
    for report in &reports {
        let tagged = report.clone().with_meta("config_hash", hash.clone());
        lines.push_str(&tagged.json_line());
        lines.push('\n');
        println!("{}", tagged.table_row());
        all_pass &= report.passed();
    }
    let dir = prepare_out(config)?;
    write_file(&dir.join("reports.jsonl"), &lines)?;
    Ok(if all_pass { 0 } else { 1 })
}

fn cmd_sweep(config: &RunConfig) -> Result<u8, UsageError> {
    let dir = prepare_out(config)?;
    let hash = config_hash(config);
    if !config.gamma_ladder.is_empty() {
        let grid = grid_for(config)?;
        let n = grid.len();
        let seed = SeedRecord::new(config.seed);
        let mut csv = format!(
            "# config_hash={hash}\n# columns: gamma, closed_form_second_moment, mean_mass, se_mass\n\
             gamma,closed_form_second_moment,mean_mass,se_mass\n"
        );
        for (k, &gamma) in config.gamma_ladder.iter().enumerate() {
            let spec = match config.kernel.as_str() {
                "kahane" => KernelSpec::KahaneFamily { c: config.c, gamma },
                "log" => KernelSpec::LogKernel {
                    gamma,
                    g: GFunction::Zero,
                },
                other => {
                    return Err(UsageError(format!(
                        "gamma sweep needs a kahane or log kernel, got '{other}'"
                    )))
                }
            };
            let cov = eval_kernel(&spec, &grid)?;
            let closed = kahan_sum((0..n).flat_map(|i| {
                let cov = &cov;
                let grid = &grid;
                (0..n).map(move |j| {
                    cov.entry(i, j).exp() * grid.cell_measure[i] * grid.cell_measure[j]
                })
            }));
            let sub = seed.substream(k as u64);
            let masses: Vec<f64> = (0..config.replicas)
                .map(|r| {
                    let x = sample_field(&cov, sub.substream(r));
                    build_chaos(&x, &cov, &grid).map(|m| m.total_mass())
                })
                .collect::<Result<_, _>>()?;
            let mf = config.replicas as f64;
            let mean = kahan_sum(masses.iter().copied()) / mf;
            let var = kahan_sum(masses.iter().map(|v| (v - mean) * (v - mean))) / mf;
            csv.push_str(&format!(
                "{gamma},{closed},{mean},{}\n",
                (var / mf).sqrt()
            ));
        }
        write_file(&dir.join("sweep_gamma.csv"), &csv)?;
        return Ok(0);
    }
    if !config.eps_ladder.is_empty() {
        // coupled Box-vs-Triangle mass distance along the eps ladder
        let coarse = grid_for(config)?;
        let fine = build_grid(config.dim, &vec![(0.0, 1.0); config.dim], config.n * 8, None)?;
        let fine_cov = eval_kernel(&kernel_spec(config)?, &fine)?;
        let other = if config.mollifier == "box" {
            "triangle"
        } else {
            "box"
        };
        let curve = mollifier_distance_curve(
            &fine_cov,
            &fine,
            &coarse,
            &mollifier_spec(&config.mollifier)?,
            &mollifier_spec(other)?,
            &config.eps_ladder,
            config.replicas,
            SeedRecord::new(config.seed),
        )?;
        let mut csv = format!(
            "# config_hash={hash}\n# columns: eps, mean_abs_mass_distance, se\n\
             eps,mean_abs_mass_distance,se\n"
        );
        for (eps, d, se) in curve {
            csv.push_str(&format!("{eps},{d},{se}\n"));
        }
        write_file(&dir.join("sweep_eps.csv"), &csv)?;
        return Ok(0);
    }
    Err(UsageError(
        "sweep needs a nonempty --gamma-ladder or --eps-ladder".into(),
    ))
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let (args, runner): (CommonArgs, fn(&RunConfig) -> Result<u8, UsageError>) = match cli.cmd {
        Cmd::Sample(a) => (a, cmd_sample),
        Cmd::Chaos(a) => (a, cmd_chaos),
        Cmd::Verify(a) => (a, cmd_verify),
        Cmd::Sweep(a) => (a, cmd_sweep),
    };
    let config = match args.resolve() {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    match runner(&config) {
        Ok(code) => ExitCode::from(code),
        Err(UsageError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
