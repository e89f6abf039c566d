use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ringflow::experiments::{
    cmd_compare, cmd_evaluate, cmd_hysteresis, cmd_mpr_calc, cmd_train, reward_trend, run_seeds, trend_improved,
    ExperimentError, Profile, ScenarioConfig,
};
use ringflow::metrics::peak_flow;
use ringflow::mpr::HeadwayScenario;

/// Ring-road traffic experiments: hysteresis, Double-DQN CAV control and baselines.
#[derive(Debug, Parser)]
#[command(name = "ringflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the ring, then unload it one vehicle at a time (all human drivers).
    Hysteresis(Common),
    /// Train a Double-DQN controller on the post-removal scenario.
    Train(Common),
    /// Greedy rollout of a trained checkpoint against the IDM-only recovery.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Trained network checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// IDM-only vs speed-limit branches, plus switch-back when a checkpoint is given.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Minimum number of CAVs restoring the pre-departure average headway.
    MprCalc {
        /// Average time headway before the departure, s.
        #[arg(long, allow_negative_numbers = true)]
        prev: f64,
        /// Average time headway after the departure, s.
        #[arg(long, allow_negative_numbers = true)]
        cur: f64,
        /// Vehicles remaining on the road.
        #[arg(long)]
        total: u32,
        /// Desired CAV time headway, s.
        #[arg(long, allow_negative_numbers = true)]
        cav: f64,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario preset: mpr33, mpr15, mpr66 or two-step.
    #[arg(long, default_value = "mpr33")]
    preset: String,
    /// TOML scenario file; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learner budget profile (full or desk); overrides the config's.
    #[arg(long)]
    profile: Option<Profile>,
    /// Random seed; overrides the config's.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds run as independent experiments.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output root; runs are written to <out>/<label>/seed-<n>/<command>.
    #[arg(long, env = "RINGFLOW_OUT")]
    out: Option<PathBuf>,
    /// Worker threads for multi-seed runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn base_config(&self) -> Result<ScenarioConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::preset(&self.preset, Profile::Desk)?,
        };
        if let Some(profile) = self.profile {
            cfg.apply_profile(profile);
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_root(&self, cfg: &ScenarioConfig) -> PathBuf {
        self.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Runs `f` once per requested seed and prints its report lines in seed order.
    fn for_each_seed<F>(&self, command: &str, f: F) -> Result<(), ExperimentError>
    where
        F: Fn(&ScenarioConfig, &Path) -> Result<String, ExperimentError> + Sync,
    {
        let base = self.base_config()?;
        let seeds = if self.seeds.is_empty() { vec![base.seed] } else { self.seeds.clone() };
        let root = self.out_root(&base);
        let results = run_seeds(&seeds, self.jobs, |seed| {
            let cfg = ScenarioConfig { seed, ..base.clone() };
            let dir = root.join(&cfg.label).join(format!("seed-{seed}")).join(command);
            f(&cfg, &dir).map(|report| format!("[seed {seed}] {}\n{report}", dir.display()))
        });
        let mut first_error = None;
        for result in results {
            match result {
                Ok(text) => print!("{text}"),
                Err(e) if first_error.is_none() => first_error = Some(e),
                Err(e) => eprintln!("error: {e}"),
            }
        }
        first_error.map_or(Ok(()), Err)
    }
}

fn run(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::Hysteresis(common) => common.for_each_seed("hysteresis", |cfg, dir| {
            let h = cmd_hysteresis(cfg, dir)?;
            let peak = peak_flow(&h.loading)?;
            Ok(format!(
                "loading peak {:.1} veh/h at {} veh/km; {} loading and {} unloading samples\n",
                peak.flow,
                peak.density,
                h.loading.len(),
                h.unloading.len()
            ))
        }),
        Command::Train(common) => common.for_each_seed("train", |cfg, dir| {
            let report = cmd_train(cfg, dir)?;
            let outcome = &report.outcome;
            let mut text = format!(
                "{} episodes, {} env steps, {} learner steps; checkpoint {}\n",
                outcome.episodes.len(),
                outcome.env_steps,
                outcome.learner_steps,
                report.checkpoint.display()
            );
            if let Some((first, last)) = reward_trend(&outcome.episodes) {
                text.push_str(&format!(
                    "reward first 10% {first:.1}, last 10% {last:.1}, improved {}\n",
                    trend_improved(first, last)
                ));
            }
            Ok(text)
        }),
        Command::Evaluate { common, checkpoint } => common.for_each_seed("evaluate", |cfg, dir| {
            let r = cmd_evaluate(cfg, &checkpoint, dir)?;
            Ok(format!(
                "steady speed {:.3} m/s vs IDM plateau {:.3} m/s (ratio {:.3}); success step {:?}; collision {:?}\n",
                r.steady_speed,
                r.idm_plateau,
                r.speed_ratio(),
                r.rollout.first_success_step,
                r.rollout.collision.map(|c| c.step)
            ))
        }),
        Command::Compare { common, checkpoint } => common.for_each_seed("compare", |cfg, dir| {
            let r = cmd_compare(cfg, checkpoint.as_deref(), dir)?;
            let (fraction, n) = r.vsl_not_better_fraction(0.0, f64::INFINITY);
            let mut text =
                format!("speed-limit unloading flow <= IDM-only at {:.1}% of {n} densities\n", 100.0 * fraction);
            for s in &r.summaries {
                text.push_str(&format!("{:<16} peak {:8.1} final {:8.1} veh/h\n", s.branch, s.peak_flow, s.final_flow));
            }
            Ok(text)
        }),
        Command::MprCalc { prev, cur, total, cav } => {
            let scenario = HeadwayScenario::new(prev, cur, total, cav)?;
            let (text, _) = cmd_mpr_calc(&scenario)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage_error { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
