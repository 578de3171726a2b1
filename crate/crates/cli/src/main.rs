mod job;
mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use job::{CostCvSpec, EstimateJob, Estimator, EvaluateJob, FitJob, GenerateConfig, Job};
use manifest::{digest_file, sha256_hex, FileDigest, Manifest};
use strategy_robust::estimators::PenaltyKind;
use strategy_robust::gmm::{default_lambda_grid, default_offdiag_grid, GmmOptions};
use strategy_robust::simulation::{SweepConfig, TableScenario};

#[derive(Parser, Debug)]
#[command(name = "srobust", version, about = "Strategy-robust decision rules: simulate, fit, estimate costs, replay")]
struct Cli {
    /// Seed for every random draw. Required except for `evaluate` and `replay`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also print the main report to standard output.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PenaltyArg {
    None,
    Ridge,
    Lasso,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo table from a scenario file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of replications, overriding the config.
        #[arg(long)]
        seeds: Option<usize>,
        /// Agents per draw, overriding the config.
        #[arg(long)]
        n_agents: Option<usize>,
    },
    /// Comparative-statics sweep, written as tidy CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_agents: Option<usize>,
    },
    /// Synthetic population or incentive panel.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_agents: Option<usize>,
    },
    /// Fit a decision rule.
    Fit {
        #[arg(long)]
        population: PathBuf,
        #[arg(long)]
        costs: PathBuf,
        #[arg(long, value_enum)]
        estimator: Estimator,
        /// Penalty of the strategy-robust fit.
        #[arg(long, value_enum, default_value = "none")]
        penalty: PenaltyArg,
        /// Penalty weight; chosen by cross-validation when omitted.
        #[arg(long)]
        lambda: Option<f64>,
        /// Largest number of behaviors the rule may use.
        #[arg(long)]
        support: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        welfare_weight: f64,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate manipulation costs from an incentive panel.
    EstimateCosts {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        covariates: Option<PathBuf>,
        /// TOML file of estimator options; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lambda_diag: Option<f64>,
        /// A number, or `inf` to force a diagonal matrix.
        #[arg(long, value_parser = parse_lambda)]
        lambda_offdiag: Option<f64>,
        /// Choose both penalties by cross-validation over agents.
        #[arg(long)]
        cv: bool,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        phi: Option<f64>,
        #[arg(long)]
        standard_errors: bool,
        #[arg(long)]
        include_complex: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score rules on a population.
    Evaluate {
        #[arg(long)]
        rule: PathBuf,
        #[arg(long)]
        population: PathBuf,
        #[arg(long)]
        costs: PathBuf,
        /// Score at best responses instead of bliss behavior.
        #[arg(long)]
        manipulated: bool,
        /// Naive rule CSV; reports the cost of disclosing the first rule instead.
        #[arg(long)]
        transparency: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        welfare_weight: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a manifest and check the outputs are byte-identical.
    Replay {
        manifest: PathBuf,
        /// Write the regenerated outputs here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_lambda(s: &str) -> Result<f64, String> {
    match s.to_ascii_lowercase().as_str() {
        "inf" | "infinity" => Ok(f64::INFINITY),
        t => t.parse::<f64>().map_err(|e| format!("{s}: {e}")),
    }
}

/// Replay found a difference.
#[derive(Debug)]
struct Mismatch(String);

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Mismatch {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Mismatch>().is_some() {
            return 1;
        }
        if let Some(se) = cause.downcast_ref::<strategy_robust::Error>() {
            return if se.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

struct Planned {
    job: Job,
    out: PathBuf,
    config_files: Vec<PathBuf>,
}

fn need_seed(seed: Option<u64>, cmd: &str) -> Result<u64> {
    seed.with_context(|| format!("{cmd} needs --seed; runs never draw entropy on their own"))
}

fn abs(p: PathBuf) -> PathBuf {
    manifest::absolute(&p)
}

fn plan(cli: Cli) -> Result<Planned> {
    let seed = cli.seed;
    Ok(match cli.command {
        Command::Simulate {
            config,
            out,
            seeds,
            n_agents,
        } => {
            let seed = need_seed(seed, "simulate")?;
            let mut scenario: TableScenario = load_toml(&config)?;
            if let Some(r) = seeds {
                scenario.replications = r;
            }
            if let Some(n) = n_agents {
                scenario.dgp.n_agents = n;
            }
            scenario.dgp.seed = seed;
            scenario.validate()?;
            Planned {
                job: Job::Simulate { scenario },
                out,
                config_files: vec![config],
            }
        }
        Command::Sweep { config, out, n_agents } => {
            let seed = need_seed(seed, "sweep")?;
            let mut sweep: SweepConfig = load_toml(&config)?;
            if let Some(n) = n_agents {
                sweep.dgp.n_agents = n;
            }
            sweep.dgp.seed = seed;
            sweep.validate()?;
            Planned {
                job: Job::Sweep { sweep },
                out,
                config_files: vec![config],
            }
        }
        Command::Generate { config, out, n_agents } => {
            let seed = need_seed(seed, "generate")?;
            let mut generate: GenerateConfig = load_toml(&config)?;
            if let Some(d) = generate.population.as_mut() {
                d.seed = seed;
                if let Some(n) = n_agents {
                    d.n_agents = n;
                }
            }
            if let Some(d) = generate.panel.as_mut() {
                d.seed = seed;
                if let Some(n) = n_agents {
                    d.n_agents = n;
                }
            }
            Planned {
                job: Job::Generate { generate },
                out,
                config_files: vec![config],
            }
        }
        Command::Fit {
            population,
            costs,
            estimator,
            penalty,
            lambda,
            support,
            welfare_weight,
            folds,
            out,
        } => {
            need_seed(seed, "fit")?;
            Planned {
                job: Job::Fit(FitJob {
                    population: abs(population),
                    costs: abs(costs),
                    estimator,
                    penalty: match penalty {
                        PenaltyArg::None => PenaltyKind::None,
                        PenaltyArg::Ridge => PenaltyKind::Ridge,
                        PenaltyArg::Lasso => PenaltyKind::Lasso,
                    },
                    lambda,
                    support,
                    welfare_weight,
                    folds,
                }),
                out,
                config_files: vec![],
            }
        }
        Command::EstimateCosts {
            panel,
            covariates,
            config,
            lambda_diag,
            lambda_offdiag,
            cv,
            folds,
            phi,
            standard_errors,
            include_complex,
            out,
        } => {
            need_seed(seed, "estimate-costs")?;
            let mut options: GmmOptions = match &config {
                Some(p) => load_toml(p)?,
                None => GmmOptions::default(),
            };
            if let Some(v) = lambda_diag {
                options.lambda_diag = v;
            }
            if let Some(v) = lambda_offdiag {
                options.lambda_offdiag = v;
            }
            if let Some(v) = phi {
                options.phi = v;
            }
            options.standard_errors |= standard_errors;
            options.include_complex |= include_complex;
            options.validate()?;
            let cv = cv.then(|| CostCvSpec {
                folds,
                diag_grid: default_lambda_grid(),
                offdiag_grid: match lambda_offdiag {
                    // a fixed diagonal restriction stays fixed under CV
                    Some(v) if v.is_infinite() => vec![f64::INFINITY],
                    _ => default_offdiag_grid(),
                },
            });
            Planned {
                job: Job::EstimateCosts(EstimateJob {
                    panel: abs(panel),
                    covariates: covariates.map(abs),
                    options,
                    cv,
                }),
                out,
                config_files: config.into_iter().collect(),
            }
        }
        Command::Evaluate {
            rule,
            population,
            costs,
            manipulated,
            transparency,
            welfare_weight,
            out,
        } => Planned {
            job: Job::Evaluate(EvaluateJob {
                rule: abs(rule),
                population: abs(population),
                costs: abs(costs),
                manipulated,
                welfare_weight,
                transparency: transparency.map(abs),
            }),
            out,
            config_files: vec![],
        },
        Command::Replay { .. } => unreachable!("replay is handled before planning"),
    })
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths.iter().map(|p| digest_file(p)).collect()
}

fn output_digests(files: &[(String, Vec<u8>)]) -> Vec<FileDigest> {
    files
        .iter()
        .map(|(name, bytes)| FileDigest {
            path: name.clone(),
            sha256: sha256_hex(bytes),
        })
        .collect()
}

/// Runs a job from its serialized snapshot, so a first run and a replay go
/// through the same deserialization.
fn execute(job: &Job, seed: Option<u64>) -> Result<job::Outcome> {
    let snapshot: Job = serde_json::from_value(serde_json::to_value(job)?)?;
    job::run(&snapshot, seed)
}

fn print_report(format: Option<Format>, report: &job::Report) -> Result<()> {
    let text = match format {
        None => return Ok(()),
        Some(Format::Csv) => report.csv.as_deref(),
        Some(Format::Md) => report.md.as_deref(),
        Some(Format::Json) => Some(report.json.as_str()),
    };
    let mut stdout = std::io::stdout().lock();
    match text {
        Some(t) => stdout.write_all(t.as_bytes())?,
        None => {
            log::warn!("no report in that format for this command; printing JSON");
            stdout.write_all(report.json.as_bytes())?;
        }
    }
    Ok(())
}

fn replay(manifest_path: &Path, out: Option<&Path>, format: Option<Format>) -> Result<()> {
    let m = manifest::read_manifest(manifest_path)?;
    for input in &m.inputs {
        let now = digest_file(Path::new(&input.path))?;
        if now.sha256 != input.sha256 {
            return Err(Mismatch(format!("input {} changed since the manifest was written", input.path)).into());
        }
    }
    for cfg in &m.config_files {
        if digest_file(Path::new(&cfg.path)).map(|d| d.sha256 != cfg.sha256).unwrap_or(true) {
            log::info!("config {} changed or is gone; replaying from the snapshot", cfg.path);
        }
    }
    log::info!("replaying {} with seed {:?}", m.subcommand, m.seed);
    let outcome = execute(&m.job, m.seed)?;
    let fresh = output_digests(&outcome.files);
    let mut differ = Vec::new();
    for (old, new) in m.outputs.iter().zip(&fresh) {
        if old != new {
            differ.push(old.path.clone());
        } else {
            log::info!("{} identical", old.path);
        }
    }
    if m.outputs.len() != fresh.len() {
        differ.push(format!("{} outputs recorded, {} produced", m.outputs.len(), fresh.len()));
    }
    if let Some(dir) = out {
        let fresh_manifest = Manifest {
            outputs: fresh,
            ..m.clone()
        };
        manifest::write_all(dir, &outcome.files, &fresh_manifest)?;
    }
    print_report(format, &outcome.report)?;
    if differ.is_empty() {
        Ok(())
    } else {
        Err(Mismatch(format!("replay differs: {}", differ.join(", "))).into())
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let format = cli.format;
    if let Command::Replay { manifest, out } = &cli.command {
        return replay(manifest, out.as_deref(), format);
    }
    let seed = cli.seed;
    let planned = plan(cli)?;
    let inputs = digests(&planned.job.inputs())?;
    let config_files = digests(&planned.config_files)?;
    let outcome = execute(&planned.job, seed)?;
    let m = Manifest {
        tool: "srobust".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: planned.job.name().into(),
        seed,
        config_files,
        inputs,
        outputs: output_digests(&outcome.files),
        job: planned.job,
    };
    manifest::write_all(&planned.out, &outcome.files, &m)?;
    log::info!("wrote {} files to {}", outcome.files.len() + 1, planned.out.display());
    print_report(format, &outcome.report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
