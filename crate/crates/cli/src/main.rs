use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use vfm_core::config::{Preset, RunConfig};
use vfm_core::pipeline::{self, Mode};
use vfm_core::training::Objective;

#[derive(Parser)]
#[command(name = "vfm", version, about = "Variational mean-flow training, sampling and evaluation")]
struct Cli {
    #[command(subcommand)]
    mode: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: PresetArg,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fixed work chunking and no timings in the outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    /// Generator checkpoint to initialize a training stage from.
    #[arg(long, global = true)]
    init: Option<PathBuf>,
    /// Checkpoint of the same stage to continue.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Model to sample from or evaluate.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Second model to evaluate alongside --model.
    #[arg(long, global = true)]
    baseline: Option<PathBuf>,
    /// Sampling steps K.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Iterations of the selected training stage.
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Evaluation observations.
    #[arg(long, global = true)]
    b: Option<usize>,
    /// Posterior samples per observation.
    #[arg(long, global = true)]
    j: Option<usize>,
    /// Prior samples for the prior MMD.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Reference samples for the posterior MMD.
    #[arg(long, global = true)]
    m: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Flow-matching pretraining.
    PretrainFm,
    /// MeanFlow training of the generator.
    TrainMf,
    /// Joint generator and noise-adapter training.
    TrainVfm,
    /// Noise-adapter training with the generator held fixed.
    TrainFrozen,
    /// Reward fine-tuning of the adapter.
    TrainReward,
    /// Prior and posterior samples with plots.
    Sample,
    /// Posterior and prior metrics.
    Eval,
    /// Linear-Gaussian closed-form checks.
    LingaussVerify,
    /// Sweep over tau, alpha and EMA.
    Ablate,
}

impl Command {
    fn mode(self) -> Mode {
        match self {
            Command::PretrainFm => Mode::PretrainFm,
            Command::TrainMf => Mode::TrainMf,
            Command::TrainVfm => Mode::TrainVfm,
            Command::TrainFrozen => Mode::TrainFrozen,
            Command::TrainReward => Mode::TrainReward,
            Command::Sample => Mode::Sample,
            Command::Eval => Mode::Eval,
            Command::LingaussVerify => Mode::LingaussVerify,
            Command::Ablate => Mode::Ablate,
        }
    }
}

fn build_config(c: &Common, mode: Mode) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(match c.preset {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        })?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.deterministic |= c.deterministic;
    if c.sequential {
        cfg.execution = vfm_core::par::Execution::Sequential;
    }
    for (slot, v) in [
        (&mut cfg.inputs.init, &c.init),
        (&mut cfg.inputs.resume, &c.resume),
        (&mut cfg.inputs.model, &c.model),
        (&mut cfg.inputs.baseline, &c.baseline),
    ] {
        if v.is_some() {
            slot.clone_from(v);
        }
    }
    if let Some(k) = c.steps {
        cfg.steps = k;
    }
    if let Some(n) = c.iters {
        match mode.objective() {
            Some(obj) => {
                let s = match obj {
                    Objective::FlowMatching => &mut cfg.stages.pretrain_fm,
                    Objective::MeanFlow => &mut cfg.stages.train_mf,
                    Objective::Vfm => &mut cfg.stages.train_vfm,
                    Objective::FrozenTheta => &mut cfg.stages.train_frozen,
                    Objective::Reward => &mut cfg.stages.train_reward,
                };
                s.iters = n;
            }
            None if mode == Mode::Ablate => cfg.ablate.iters = n,
            None => anyhow::bail!("--iters only applies to training stages and ablate"),
        }
    }
    let e = if mode == Mode::Ablate { &mut cfg.ablate.eval } else { &mut cfg.eval };
    for (slot, v) in [(&mut e.b, c.b), (&mut e.j, c.j), (&mut e.n, c.n), (&mut e.m, c.m)] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let mode = cli.mode.mode();
    let cfg = build_config(&cli.common, mode)?;
    match mode {
        Mode::Eval => {
            let (rep, base) = pipeline::eval(&cfg)?;
            println!("{}", rep.to_json()?);
            if let Some(b) = base {
                println!("baseline:\n{}", b.to_json()?);
            }
        }
        Mode::LingaussVerify => {
            let rep = pipeline::lingauss_verify(&cfg)?;
            print!("{}", rep.table());
            return Ok(rep.all_passed());
        }
        Mode::Ablate => {
            let rows = pipeline::ablate(&cfg)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} ablation rows, {failed} failed; see {}", rows.len(), cfg.out.join("ablate.csv").display());
        }
        m => {
            pipeline::run(&cfg, m).with_context(|| format!("{m:?} failed"))?;
            println!("outputs in {}", cfg.out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
