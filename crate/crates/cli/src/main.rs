//! `nacb`: fixtures, exact analysis, training runs, the verification suite
//! and regret sweeps.
//!
//! Exit status is 0 on success, 1 when a verification check or sweep cell
//! fails, and 2 on bad input.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nacb_core::chain::{assumption_constants, optimal_gain, PolicyEvaluation, DEFAULT_ENUMERATION_CAP};
use nacb_core::envs::{build, EnvSpec};
use nacb_core::format::{mdp_to_json, read_features, read_mdp};
use nacb_core::nacb::{run_seeded, schedule_for_horizon, NacbConfig};
use nacb_core::policy::PolicyFeatures;
use nacb_core::{Features, Mdp, Policy};
use nacb_harness::{regret_sweep, verify_suite, Level, SuiteConfig, SweepConfig, VerifyReport};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "nacb", version, about = "Natural actor-critic with batching for average-reward MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the built-in environments, or write one in the MDP file format.
    Envs {
        /// Environment to write, e.g. `bandit` or `rand:8:3:2:7`.
        #[arg(long)]
        write: Option<String>,
        /// Output file (stdout when omitted).
        #[arg(long, requires = "write")]
        out: Option<PathBuf>,
    },
    /// Exact chain structure, values and assumption constants of one policy, as JSON.
    Analyze {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One learning run: per-step CSV trace and per-epoch JSON diagnostics.
    Train {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Run configuration (JSON); missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Sets epochs, inner iterations and batch size from a target horizon.
        #[arg(long)]
        horizon: Option<usize>,
        /// CSV trace `step,reward,cumulative_regret` (stdout when omitted).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// JSON run summary with per-epoch diagnostics.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Run the verification suite.
    Verify {
        #[arg(long, default_value = "fast")]
        level: Level,
        /// Write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Regret over a geometric grid of horizons, one row per (horizon, seed).
    Sweep {
        #[arg(long)]
        env: EnvSpec,
        #[arg(long)]
        tmin: usize,
        #[arg(long)]
        tmax: usize,
        #[arg(long, default_value_t = 7)]
        points: usize,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// CSV `env,target,effective,seed,regret,regret_per_step,error`.
        #[arg(long)]
        out: PathBuf,
        /// Base run configuration (JSON); schedule and seed are set per run.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid points, slope fit and monotonicity flags as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// MDP file in the JSON format written by `envs --write`.
    #[arg(long)]
    mdp: Option<PathBuf>,
    /// Built-in environment name.
    #[arg(long)]
    env: Option<EnvSpec>,
}

#[derive(Args)]
struct PolicyArgs {
    /// Policy parameters, comma separated (zeros when omitted).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    /// Policy feature file; tabular softmax when omitted.
    #[arg(long)]
    policy_features: Option<PathBuf>,
}

impl Source {
    fn load(&self) -> Result<Mdp> {
        match (&self.mdp, &self.env) {
            (Some(path), _) => read_mdp(path).with_context(|| format!("reading {}", path.display())),
            (None, Some(spec)) => Ok(build(spec)?),
            (None, None) => bail!("one of --mdp or --env is required"),
        }
    }
}

impl PolicyArgs {
    fn policy(&self, mdp: &Mdp) -> Result<Policy> {
        let features = match &self.policy_features {
            Some(path) => read_features(path).with_context(|| format!("reading {}", path.display()))?,
            None => PolicyFeatures::tabular(mdp.n_states(), mdp.n_actions()),
        };
        if features.n_states() != mdp.n_states() || features.n_actions() != mdp.n_actions() {
            bail!("policy features do not match the MDP's state and action counts");
        }
        let theta = match &self.theta {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(features.dim()),
        };
        Ok(Policy::new(features, theta)?)
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Serialize)]
struct ChainReport {
    recurrent_class: Vec<usize>,
    transient_states: Vec<usize>,
    period: usize,
    stationary_dist: Vec<f64>,
    entry_times: Vec<f64>,
    c_hit: f64,
    c_tar: f64,
}

#[derive(Serialize)]
struct ValuesReport {
    gain: f64,
    v: Vec<f64>,
    q: Vec<Vec<f64>>,
    adv: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct ConstantsReport {
    lambda: Option<f64>,
    mu: Option<f64>,
    g1: f64,
    g2: f64,
    c_hit: f64,
    c_tar: f64,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct AnalyzeReport {
    n_states: usize,
    n_actions: usize,
    theta: Vec<f64>,
    policy: Vec<Vec<f64>>,
    chain: ChainReport,
    values: ValuesReport,
    constants: ConstantsReport,
    /// Optimal gain by enumeration; absent when there are too many policies.
    j_star: Option<f64>,
    optimal_actions: Option<Vec<usize>>,
}

fn analyze(mdp: &Mdp, policy: &Policy) -> Result<AnalyzeReport> {
    let eval = PolicyEvaluation::new(mdp, policy)?;
    let a = &eval.analysis;
    let v = &eval.values;
    let features = Features::one_hot(mdp.n_states());
    let c = assumption_constants(mdp, std::slice::from_ref(policy), &features)?;
    let optimal = optimal_gain(mdp, DEFAULT_ENUMERATION_CAP).ok();
    let probs = DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, act| eval.table.prob(s, act));
    Ok(AnalyzeReport {
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        theta: policy.theta().iter().copied().collect(),
        policy: rows(&probs),
        chain: ChainReport {
            recurrent_class: a.recurrent_class().to_vec(),
            transient_states: a.transient_states().to_vec(),
            period: a.period(),
            stationary_dist: a.stationary_dist().iter().copied().collect(),
            entry_times: a.entry_times().iter().copied().collect(),
            c_hit: a.c_hit(),
            c_tar: a.c_tar(),
        },
        values: ValuesReport { gain: v.gain, v: v.v.iter().copied().collect(), q: rows(&v.q), adv: rows(&v.adv) },
        constants: ConstantsReport {
            lambda: c.lambda,
            mu: c.mu,
            g1: c.g1,
            g2: c.g2,
            c_hit: c.c_hit,
            c_tar: c.c_tar,
            warnings: c.warnings,
        },
        j_star: optimal.as_ref().map(|o| o.j_star),
        optimal_actions: optimal.map(|o| o.actions),
    })
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a NacbConfig,
    horizon: usize,
    j_star: f64,
    regret: f64,
    rates: nacb_core::nacb::Rates,
    final_theta: Vec<f64>,
    epochs: &'a [nacb_core::nacb::EpochDiagnostics],
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(out.flush()?)
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<NacbConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(NacbConfig::default()),
    }
}

fn print_report(report: &VerifyReport) {
    for check in &report.checks {
        let status = if check.passed() { "PASS" } else { "FAIL" };
        let measured: Vec<String> = check.measured.iter().map(|(k, v)| format!("{k}={v:.4e}")).collect();
        println!("{status} {:<26} {:>7.1}s  {}", check.id, check.runtime_secs, measured.join(" "));
        println!("     {} [{}]", check.reference, check.tolerance);
        for line in &check.detail {
            println!("     - {line}");
        }
    }
    let failed = report.checks.iter().filter(|c| !c.passed()).count();
    println!("{} checks, {failed} failed", report.checks.len());
}

/// Returns whether everything the command checked passed.
fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Envs { write: None, .. } => {
            for spec in EnvSpec::fixtures() {
                let mdp: Mdp = build(&spec)?;
                println!("{:<16} {:>3} states {:>2} actions  {}", spec.to_string(), mdp.n_states(), mdp.n_actions(), spec.describe());
            }
            println!("rand:N:M:T:SEED  random unichain with N states, M actions and T transient states");
            Ok(true)
        }
        Command::Envs { write: Some(name), out } => {
            let spec: EnvSpec = name.parse()?;
            let mdp: Mdp = build(&spec)?;
            write_output(out.as_deref(), &(mdp_to_json(&mdp) + "\n"))?;
            Ok(true)
        }
        Command::Analyze { source, policy, out } => {
            let mdp = source.load()?;
            let report = analyze(&mdp, &policy.policy(&mdp)?)?;
            write_output(out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
            Ok(true)
        }
        Command::Train { source, policy, config, seed, horizon, trace, diagnostics } => {
            let mdp = source.load()?;
            let policy = policy.policy(&mdp)?;
            let mut config = read_config(config.as_deref())?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(t) = horizon {
                config = config.with_schedule(schedule_for_horizon(t)?);
            }
            let features = Features::one_hot(mdp.n_states());
            let run = run_seeded(&mdp, &policy, &features, &config)?;
            let mut csv = String::from("step,reward,cumulative_regret\n");
            for (t, (r, reg)) in run.rewards.iter().zip(run.cumulative_regret()).enumerate() {
                csv.push_str(&format!("{t},{r},{reg}\n"));
            }
            write_output(trace.as_deref(), &csv)?;
            if let Some(path) = diagnostics {
                let summary = TrainSummary {
                    config: &config,
                    horizon: run.len(),
                    j_star: run.j_star,
                    regret: run.regret(),
                    rates: run.rates,
                    final_theta: run.final_theta.iter().copied().collect(),
                    epochs: &run.epochs,
                };
                write_output(Some(&path), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
            }
            Ok(true)
        }
        Command::Verify { level, json, seed } => {
            let mut suite = SuiteConfig::new(level);
            suite.seed = seed;
            let report = verify_suite(&suite);
            print_report(&report);
            if let Some(path) = json {
                write_output(Some(&path), &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
            Ok(report.passed())
        }
        Command::Sweep { env, tmin, tmax, points, seeds, out, config, json } => {
            if tmin == 0 || tmax < tmin || points == 0 || seeds == 0 {
                bail!("need 0 < tmin <= tmax and positive --points and --seeds");
            }
            let mut sweep = SweepConfig::geometric(env, tmin, tmax, points, seeds);
            sweep.base = read_config(config.as_deref())?;
            sweep.j_star = sweep.base.j_star;
            let result = regret_sweep(&sweep)?;
            write_output(Some(&out), &result.to_csv())?;
            for p in &result.points {
                println!(
                    "T'={:<9} K={:<5} H={:<3} B={:<5} runs={:<3} mean Reg={:.4} (sd {:.4})  Reg/T'={:.3e}",
                    p.effective,
                    p.epochs,
                    p.inner,
                    p.batch,
                    p.runs,
                    p.mean_regret,
                    p.std_regret,
                    p.mean_regret / p.effective as f64
                );
            }
            match (&result.fit, &result.fit_skipped) {
                (Some(f), _) => println!("slope {:.3} (95% CI {:.3} to {:.3})", f.slope, f.ci_low, f.ci_high),
                (None, Some(why)) => println!("slope not fitted: {why}"),
                (None, None) => {}
            }
            println!("Reg/T' strictly decreasing: {}", result.per_step_decreasing);
            if let Some(path) = json {
                write_output(Some(&path), &(serde_json::to_string_pretty(&result)? + "\n"))?;
            }
            let failed = result.failed_cells();
            if failed > 0 {
                eprintln!("{failed} runs failed; see the error column of {}", out.display());
            }
            Ok(failed == 0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
