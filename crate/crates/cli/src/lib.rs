//! `curistack` subcommands: train, eval, replay-episode, print-config.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use curistack::agent::{Agent, PolicyId};
use curistack::blockworld::{self, Action, BlockWorld, EnvConfig, RewardMode, Stage, TraceStep};
use curistack::config::{Preset, RunConfig};
use curistack::ndmath::Checkpoint;
use curistack::trainer::{Trainer, CSV_HEADER};

pub const SUMMARY_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "curistack", version, about = "Train and inspect goal-conditioned block-stacking agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from a TOML run configuration.
    Train {
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_env_steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Noiseless exploit-policy rollouts from a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Curriculum stage (1-3); defaults to the target task.
        #[arg(long, default_value_t = 3)]
        stage: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON summary here as well as to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write one deterministic episode as JSON lines.
    ReplayEpisode {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        stage: u8,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print a preset, or the fully resolved form of a config file.
    PrintConfig {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PresetArg::All3)]
        preset: PresetArg,
        #[arg(long, default_value_t = 2)]
        n_blocks: usize,
        #[arg(long, value_enum, default_value_t = RewardArg::Incremental)]
        reward_mode: RewardArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    All3,
    NoCuriosity,
    NoMultiCriteria,
    NoCurriculum,
    CurriculumOnly,
    Vanilla,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::All3 => Preset::All3,
            PresetArg::NoCuriosity => Preset::NoCuriosity,
            PresetArg::NoMultiCriteria => Preset::NoMultiCriteria,
            PresetArg::NoCurriculum => Preset::NoCurriculum,
            PresetArg::CurriculumOnly => Preset::CurriculumOnly,
            PresetArg::Vanilla => Preset::Vanilla,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RewardArg {
    Binary,
    Incremental,
}

impl From<RewardArg> for RewardMode {
    fn from(r: RewardArg) -> Self {
        match r {
            RewardArg::Binary => RewardMode::Binary,
            RewardArg::Incremental => RewardMode::Incremental,
        }
    }
}

/// 2 for configuration and usage problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<curistack::Error>() {
        Some(curistack::Error::Config(_)) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            output,
            epochs,
            max_env_steps,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if max_env_steps.is_some() {
                cfg.train.max_env_steps = max_env_steps;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            train(&cfg)
        }
        Command::Eval {
            checkpoint,
            episodes,
            stage,
            seed,
            output,
        } => {
            let summary = eval(&checkpoint, episodes, parse_stage(stage)?, seed)?;
            let text = serde_json::to_string_pretty(&summary)?;
            println!("{text}");
            if let Some(path) = output {
                fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::ReplayEpisode {
            checkpoint,
            seed,
            stage,
            output,
        } => {
            let trace = replay_episode(&checkpoint, seed, parse_stage(stage)?)?;
            match output {
                Some(path) => {
                    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    write_trace(BufWriter::new(f), &trace)
                }
                None => write_trace(std::io::stdout().lock(), &trace),
            }
        }
        Command::PrintConfig {
            config,
            preset,
            n_blocks,
            reward_mode,
        } => {
            let cfg = match config {
                Some(path) => RunConfig::load(path)?,
                None => {
                    let cfg = RunConfig::preset(preset.into(), n_blocks, reward_mode.into());
                    cfg.validate()?;
                    cfg
                }
            };
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
    }
}

fn parse_stage(s: u8) -> Result<Stage> {
    Stage::try_from(s).map_err(|e| curistack::Error::Config(format!("--stage: {e}")).into())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.resolved.toml"), cfg.to_toml_string()?)?;
    let mut csv = BufWriter::new(File::create(out.join("metrics.csv"))?);
    writeln!(csv, "{CSV_HEADER}")?;
    csv.flush()?;

    let mut trainer = Trainer::new(cfg.trainer_setup()?)?;
    let result = trainer.run(|t, stats, stage_changed| {
        writeln!(csv, "{}", stats.csv_row())?;
        csv.flush()?;
        eprintln!(
            "epoch {:>4}  steps {:>9}  stage {}  success {:.2}",
            stats.epoch,
            stats.env_steps,
            stats.stage.index(),
            stats.success_rate
        );
        t.save_checkpoint(out.join("checkpoint.ckpt"))?;
        if stage_changed {
            t.save_checkpoint(out.join(format!("stage{}.ckpt", t.stage().index())))?;
        }
        Ok(())
    });
    match result {
        Ok(_) => {
            trainer.save_checkpoint(out.join("final.ckpt"))?;
            Ok(())
        }
        Err(e) => {
            // keep whatever state the run reached
            let _ = trainer.save_checkpoint(out.join("failed.ckpt"));
            Err(e.into())
        }
    }
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub version: u32,
    pub checkpoint: String,
    pub episodes: usize,
    pub stage: u8,
    pub seed: u64,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub min_reward: f64,
    pub max_reward: f64,
}

fn load_agent(path: &Path) -> Result<(Agent, EnvConfig)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let agent = Agent::read_checkpoint(&ckpt)?;
    let env: EnvConfig = serde_json::from_value(
        ckpt.meta("env")
            .cloned()
            .context("checkpoint has no environment metadata")?,
    )?;
    let d = agent.dims();
    if d.obs != env.obs_dim() || d.goal != env.goal_dim() {
        bail!(
            "checkpoint networks expect obs {} / goal {}, but its environment has obs {} / goal {}",
            d.obs,
            d.goal,
            env.obs_dim(),
            env.goal_dim()
        );
    }
    Ok((agent, env))
}

fn run_episode(agent: &Agent, env: &mut BlockWorld, rng: &mut ChaCha8Rng) -> Result<Vec<TraceStep>> {
    let (mut obs, goal) = env.reset();
    let mut trace = Vec::with_capacity(env.config().horizon);
    loop {
        let a = agent.select_action(PolicyId::Exploit, &obs, Some(goal.as_slice()), None, rng)?;
        let out = env.step(&Action::from_slice(&a)?);
        trace.push(TraceStep {
            t: env.state().t - 1,
            obs,
            goal: goal.clone(),
            action: a,
            reward: out.reward,
            criteria_satisfied: out.info.criteria_satisfied,
            is_success: out.info.is_success,
        });
        obs = out.obs;
        if out.done {
            return Ok(trace);
        }
    }
}

pub fn eval(checkpoint: &Path, episodes: usize, stage: Stage, seed: u64) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(curistack::Error::Config("--episodes must be at least 1".into()).into());
    }
    let (agent, mut env_cfg) = load_agent(checkpoint)?;
    env_cfg.stage = stage;
    env_cfg.seed = seed;
    let mut env = BlockWorld::new(env_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rewards = Vec::with_capacity(episodes);
    let mut successes = 0;
    for _ in 0..episodes {
        let trace = run_episode(&agent, &mut env, &mut rng)?;
        successes += trace.last().is_some_and(|s| s.is_success) as usize;
        rewards.push(trace.iter().map(|s| s.reward).sum::<f64>());
    }
    Ok(EvalSummary {
        version: SUMMARY_VERSION,
        checkpoint: checkpoint.display().to_string(),
        episodes,
        stage: stage.index(),
        seed,
        success_rate: successes as f64 / episodes as f64,
        mean_reward: rewards.iter().sum::<f64>() / episodes as f64,
        min_reward: rewards.iter().copied().fold(f64::INFINITY, f64::min),
        max_reward: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

pub fn replay_episode(checkpoint: &Path, seed: u64, stage: Stage) -> Result<Vec<TraceStep>> {
    let (agent, mut env_cfg) = load_agent(checkpoint)?;
    env_cfg.stage = stage;
    env_cfg.seed = seed;
    let mut env = BlockWorld::new(env_cfg)?;
    run_episode(&agent, &mut env, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn write_trace(mut w: impl Write, trace: &[TraceStep]) -> Result<()> {
    for step in trace {
        serde_json::to_writer(&mut w, step)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reward of a trace step recomputed from the environment's reward function.
pub fn recompute_trace_rewards(trace: &[TraceStep], env: &EnvConfig) -> Vec<f64> {
    let params = env.reward_params();
    trace
        .windows(2)
        .map(|w| {
            let next = &w[1].obs;
            let gripper = &next[0..3];
            let blocks: Vec<f64> = (0..env.n_blocks)
                .flat_map(|i| next[7 + 6 * i..7 + 6 * i + 3].to_vec())
                .collect();
            blockworld::reward_from_positions(&blocks, gripper, w[0].goal.as_slice(), &params)
        })
        .collect()
}
