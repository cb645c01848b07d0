//! `merge-cpe` command line.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error (or a
//! failing `validate` check).

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::checks::run_invariant_suite;
use crate::config::{parse_number_list, ExperimentConfig, KArg, PolicySource};
use crate::cpe::{evaluate, GateSettings};
use crate::error::{CpeError, Result};
use crate::report::{metrics_csv, write_reports, RunOutputs};
use crate::runner::{episode_seed, run_episode, scenario_for_seed, sweep_rho, EpisodeSettings};

/// Comma-separated numbers; `...` expands a progression.
#[derive(Debug, Clone, PartialEq)]
pub struct NumList(pub Vec<f64>);

impl FromStr for NumList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_number_list(s).map(NumList)
    }
}

#[derive(Debug, Parser)]
#[command(name = "merge-cpe", version, about = "Counterfactual safety gating for a highway-merge policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one gated episode and print its result as JSON.
    Episode {
        #[command(flatten)]
        common: Common,
        /// Episode index within the run seeded by --seed.
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Sweep rho_max and print the metrics table as CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Also write every episode to episodes.jsonl.
        #[arg(long)]
        episodes_out: bool,
    },
    /// Evaluate the gate once at the start of an episode and print the report.
    Influence {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Run the invariant suite on sampled worlds.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Number of probe worlds.
        #[arg(long, default_value_t = 20)]
        worlds: usize,
    },
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Threshold or list of thresholds, e.g. 0,0.1,...,1.0
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<NumList>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Counterfactual horizon in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    /// Constant accelerations of the replacement pool, e.g. -2,0,2
    #[arg(long, allow_hyphen_values = true)]
    pool: Option<NumList>,
    /// Number of nearest vehicles to replace, or "all".
    #[arg(long)]
    k: Option<KArg>,
    /// scripted, risky, or a policy file.
    #[arg(long)]
    policy: Option<PolicySource>,
    /// Re-run the gate every this many steps.
    #[arg(long)]
    gate_period: Option<usize>,
    /// Always execute the policy under test.
    #[arg(long)]
    ungated: bool,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for data files and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.scenario.seed = s;
        }
        if let Some(r) = &self.rho {
            cfg.rho = r.0.clone();
        }
        if let Some(e) = self.episodes {
            cfg.episodes = e;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(p) = &self.pool {
            cfg.pool_accelerations = p.0.clone();
        }
        if let Some(k) = self.k {
            cfg.k = k.0;
        }
        if let Some(p) = &self.policy {
            cfg.policy = p.clone();
        }
        if self.ungated {
            cfg.gated = false;
        }
        if let Some(g) = self.gate_period {
            cfg.gate_period_steps = g;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn settings(cfg: &ExperimentConfig, rho_max: f64) -> EpisodeSettings {
        EpisodeSettings {
            gate: GateSettings {
                rho_max,
                k: cfg.k,
                horizon: cfg.horizon,
                ..Default::default()
            },
            gated: cfg.gated,
            gate_period_steps: cfg.gate_period_steps,
            ..Default::default()
        }
    }
}

fn single_rho(cfg: &ExperimentConfig) -> Result<f64> {
    match cfg.rho.as_slice() {
        [r] => Ok(*r),
        _ => Err(CpeError::InvalidConfig("this command takes a single --rho value".into())),
    }
}

fn outputs(command: &str, cfg: &ExperimentConfig) -> RunOutputs {
    RunOutputs {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.scenario.seed,
        ..Default::default()
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Episode { common, index } => {
            let cfg = common.resolve()?;
            let put = Arc::new(cfg.policy.load()?);
            let seed = episode_seed(cfg.scenario.seed, index);
            let result = run_episode(&cfg.scenario, seed, &cfg.pool()?, put, &Common::settings(&cfg, single_rho(&cfg)?))?;
            println!("{}", to_json(&result));
            if let Some(dir) = &common.out {
                let mut out = outputs("episode", &cfg);
                out.episodes = vec![result];
                write_reports(&out, dir)?;
            }
            Ok(0)
        }
        Command::Sweep { common, episodes_out } => {
            let cfg = common.resolve()?;
            let put = Arc::new(cfg.policy.load()?);
            let settings = Common::settings(&cfg, 0.0);
            log::info!("sweeping {} thresholds x {} episodes", cfg.rho.len(), cfg.episodes);
            let result = sweep_rho(&cfg.scenario, &cfg.pool()?, put, &cfg.rho, cfg.episodes, &settings)?;
            print!("{}", metrics_csv(&result.rows));
            if let Some(dir) = &common.out {
                let mut out = outputs("sweep", &cfg);
                out.metrics = result.rows;
                if episodes_out {
                    out.episodes = result.episodes.into_iter().flatten().collect();
                }
                write_reports(&out, dir)?;
            }
            Ok(0)
        }
        Command::Influence { common, index } => {
            let cfg = common.resolve()?;
            let put = Arc::new(cfg.policy.load()?);
            let world = scenario_for_seed(&cfg.scenario, put, episode_seed(cfg.scenario.seed, index))?;
            let gate = Common::settings(&cfg, single_rho(&cfg)?).gate;
            let report = evaluate(&world, &cfg.pool()?, &gate)?.report;
            println!("{}", to_json(&report));
            if let Some(dir) = &common.out {
                let mut out = outputs("influence", &cfg);
                out.report = Some(report);
                write_reports(&out, dir)?;
            }
            Ok(0)
        }
        Command::Validate { common, worlds } => {
            let cfg = common.resolve()?;
            let put = Arc::new(cfg.policy.load()?);
            let gate = Common::settings(&cfg, cfg.rho.first().copied().unwrap_or(0.0)).gate;
            let checks = run_invariant_suite(&cfg.scenario, &cfg.pool()?, put, &gate, cfg.scenario.seed, worlds)?;
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if checks.iter().all(|c| c.passed) { 0 } else { 2 })
        }
    }
}

fn jobs(command: &Command) -> Option<usize> {
    match command {
        Command::Episode { common, .. }
        | Command::Sweep { common, .. }
        | Command::Influence { common, .. }
        | Command::Validate { common, .. } => common.jobs,
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = jobs(&cli.command);
    let run = || execute(cli.command);
    let result = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => {
                eprintln!("error: {e}");
                return 2;
            }
        },
        None => run(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
