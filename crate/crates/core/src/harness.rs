//! Command-line front end and the multi-seed reproduction driver.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::blend::{rollout, rollout_shield, BlendedPolicy};
use crate::envmodel::{make_env, ENV_NAMES};
use crate::error::{Error, Result};
use crate::neural::grad_check_random;
use crate::revel::{
    train, write_outputs, Method, RevelConfig, RunMetrics, RunOutput, ShieldCheckpoint,
};
use crate::verifier::{verify_bounded, Verdict};

pub const SUMMARY_HEADER: &str =
    "env,method,seeds,final_cost_mean,final_cost_sd,violations,monitor_failures,zeta,network_update_secs,shield_update_secs";

/// Environment variable capping the number of concurrent runs in `reproduce`.
pub const THREADS_VAR: &str = "SHIELDCRAFT_THREADS";

/// Largest relative error `grad-check` accepts.
pub const GRAD_CHECK_GATE: f64 = 1e-4;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "shieldcraft",
    version,
    about = "Shielded reinforcement learning with certified piecewise-affine shields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a blended policy with shield projection.
    Train(RunArgs),
    /// Train one of the baselines.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Check a shield from the initial states (and from its invariant, if present).
    Verify {
        #[arg(long)]
        env: String,
        /// Shield or checkpoint JSON.
        #[arg(long)]
        shield: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Roll out a blended policy, or a shield alone.
    Rollout {
        #[arg(long)]
        env: String,
        /// Blended policy JSON, as written by `train`.
        #[arg(long, conflicts_with = "shield")]
        policy: Option<PathBuf>,
        /// Shield JSON; defaults to the shipped shield.
        #[arg(long)]
        shield: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print an environment model as JSON.
    DescribeEnv {
        #[arg(long)]
        env: String,
    },
    /// Compare backprop against finite differences on random networks.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every method on every environment over several seeds.
    Reproduce {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        steps: Option<usize>,
        /// Comma-separated subset of environments.
        #[arg(long, value_delimiter = ',')]
        envs: Option<Vec<String>>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BaselineKind {
    DdpgUnshielded,
    StaticShield,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file overriding the default configuration field by field.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Reads a configuration file; absent fields keep their defaults.
pub fn load_config(path: Option<&Path>) -> Result<RevelConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(RevelConfig::default()),
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RevelConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(env) = &self.env {
            cfg.env = env.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(steps) = self.steps {
            cfg.total_steps = steps;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::SafetyViolation(_) => EXIT_VERIFY,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train(run) => run_training(Method::Revel, &run),
        Command::Baseline { kind, run } => {
            let method = match kind {
                BaselineKind::DdpgUnshielded => Method::DdpgUnshielded,
                BaselineKind::StaticShield => Method::StaticShield,
            };
            run_training(method, &run)
        }
        Command::Verify {
            env,
            shield,
            horizon,
        } => {
            let env = make_env(&env)?;
            let ckpt: ShieldCheckpoint = serde_json::from_str(&fs::read_to_string(&shield)?)?;
            let horizon = horizon.unwrap_or(env.horizon);
            let mut starts = vec![env.init_box.clone()];
            if let Some(inv) = &ckpt.invariant {
                starts.extend(inv.boxes().cloned());
            }
            let mut verdicts = Vec::new();
            let mut certified = true;
            for start in &starts {
                let v = verify_bounded(&env, &ckpt.shield, start, horizon)?;
                certified &= v.is_certified();
                verdicts.push(v);
            }
            let verdicts: Vec<Verdict> = verdicts;
            if verdicts.len() == 1 {
                print_json(&verdicts[0])?;
            } else {
                print_json(&verdicts)?;
            }
            Ok(if certified { EXIT_OK } else { EXIT_VERIFY })
        }
        Command::Rollout {
            env,
            policy,
            shield,
            episodes,
            seed,
        } => {
            let env = make_env(&env)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stats = match (policy, shield) {
                (Some(p), _) => {
                    let h: BlendedPolicy = serde_json::from_str(&fs::read_to_string(p)?)?;
                    rollout(&h, &env, episodes, &mut rng)?
                }
                (None, Some(s)) => {
                    let ckpt: ShieldCheckpoint = serde_json::from_str(&fs::read_to_string(s)?)?;
                    rollout_shield(&ckpt.shield, &env, episodes, &mut rng)?
                }
                (None, None) => rollout_shield(
                    &crate::shield::shipped(&env.name)?,
                    &env,
                    episodes,
                    &mut rng,
                )?,
            };
            print_json(&stats)?;
            Ok(EXIT_OK)
        }
        Command::DescribeEnv { env } => {
            print_json(&make_env(&env)?)?;
            Ok(EXIT_OK)
        }
        Command::GradCheck { count, seed } => {
            let worst = grad_check_random(count, &mut ChaCha8Rng::seed_from_u64(seed));
            println!("max relative error over {count} networks: {worst:e}");
            Ok(if worst < GRAD_CHECK_GATE {
                EXIT_OK
            } else {
                EXIT_VERIFY
            })
        }
        Command::Reproduce {
            out,
            seeds,
            steps,
            envs,
            config,
        } => {
            let mut base = load_config(config.as_deref())?;
            if let Some(steps) = steps {
                base.total_steps = steps;
            }
            let envs = envs.unwrap_or_else(|| ENV_NAMES.iter().map(|s| s.to_string()).collect());
            let rows = reproduce_all(&out, &base, &envs, seeds)?;
            print!("{}", summary_csv(&rows));
            Ok(EXIT_OK)
        }
    }
}

fn run_training(method: Method, run: &RunArgs) -> Result<i32> {
    let cfg = run.resolve()?;
    let result = train(method, &cfg)?;
    if let Some(dir) = &cfg.out {
        write_outputs(dir, &result)?;
    }
    print_json(&result.metrics.summary())?;
    Ok(EXIT_OK)
}

/// One line of `summary.csv`: a method on an environment, aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub env: String,
    pub method: Method,
    pub seeds: usize,
    pub final_cost_mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub final_cost_sd: f64,
    pub violations: usize,
    pub monitor_failures: usize,
    pub zeta: f64,
    pub network_update_secs: f64,
    pub shield_update_secs: f64,
}

pub fn summarize(runs: &[&RunMetrics]) -> Option<SummaryRow> {
    let first = runs.first()?;
    let n = runs.len() as f64;
    let costs: Vec<f64> = runs.iter().map(|m| m.final_cost).collect();
    let mean = costs.iter().sum::<f64>() / n;
    let sd = if runs.len() > 1 {
        (costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(SummaryRow {
        env: first.env.clone(),
        method: first.method,
        seeds: runs.len(),
        final_cost_mean: mean,
        final_cost_sd: sd,
        violations: runs.iter().map(|m| m.violations).sum(),
        monitor_failures: runs.iter().map(|m| m.monitor_failures).sum(),
        zeta: runs.iter().map(|m| m.final_zeta).sum::<f64>() / n,
        network_update_secs: runs
            .iter()
            .map(|m| m.timing.network_update_secs)
            .sum::<f64>()
            / n,
        shield_update_secs: runs
            .iter()
            .map(|m| m.timing.shield_update_secs)
            .sum::<f64>()
            / n,
    })
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{},{},{:.4},{:.3},{:.3}",
            r.env,
            r.method.name(),
            r.seeds,
            r.final_cost_mean,
            r.final_cost_sd,
            r.violations,
            r.monitor_failures,
            r.zeta,
            r.network_update_secs,
            r.shield_update_secs
        );
    }
    out
}

/// Worker count for reproduction: `SHIELDCRAFT_THREADS` if set and positive,
/// otherwise the number of available cores.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Every (env, method, seed) run in a fixed order, executed on at most
/// [`thread_cap`] threads. Results come back in job order.
pub fn run_matrix(base: &RevelConfig, envs: &[String], seeds: u64) -> Result<Vec<RunOutput>> {
    let jobs: Vec<(String, Method, u64)> = envs
        .iter()
        .flat_map(|e| {
            Method::ALL
                .into_iter()
                .flat_map(move |m| (0..seeds).map(move |s| (e.clone(), m, s)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(env, method, seed)| {
                let cfg = RevelConfig {
                    env: env.clone(),
                    seed: *seed,
                    out: None,
                    ..base.clone()
                };
                train(*method, &cfg)
            })
            .collect()
    })
}

/// Groups runs by (env, method) in first-seen order.
pub fn summarize_runs(runs: &[RunOutput]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, Method)> = Vec::new();
    for r in runs {
        let k = (r.metrics.env.clone(), r.metrics.method);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.iter()
        .filter_map(|(env, method)| {
            let group: Vec<&RunMetrics> = runs
                .iter()
                .map(|r| &r.metrics)
                .filter(|m| &m.env == env && m.method == *method)
                .collect();
            summarize(&group)
        })
        .collect()
}

/// Writes each run under `out/<env>/<method>/seed_<k>/` and the aggregate
/// `out/summary.csv`. Fails if a shielded method recorded any violation.
pub fn write_reproduction(out: &Path, runs: &[RunOutput]) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(out)?;
    for r in runs {
        let m = &r.metrics;
        write_outputs(
            &out.join(&m.env)
                .join(m.method.name())
                .join(format!("seed_{}", m.seed)),
            r,
        )?;
    }
    let rows = summarize_runs(runs);
    fs::write(out.join("summary.csv"), summary_csv(&rows))?;
    if let Some(bad) = rows
        .iter()
        .find(|r| r.method.is_shielded() && r.violations > 0)
    {
        return Err(Error::SafetyViolation(format!(
            "{} on {} recorded {} violations",
            bad.method.name(),
            bad.env,
            bad.violations
        )));
    }
    Ok(rows)
}

pub fn reproduce_all(
    out: &Path,
    base: &RevelConfig,
    envs: &[String],
    seeds: u64,
) -> Result<Vec<SummaryRow>> {
    for env in envs {
        RevelConfig {
            env: env.clone(),
            ..base.clone()
        }
        .validate()?;
    }
    let runs = run_matrix(base, envs, seeds)?;
    write_reproduction(out, &runs)
}
