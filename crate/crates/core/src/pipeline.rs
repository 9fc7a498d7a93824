//! Stage orchestration for the checkerboard experiments: training stages,
//! sampling, evaluation, the linear-Gaussian verification and ablations.
//!
//! Every stage reads a [`RunConfig`] and writes its artifacts into
//! `cfg.out`. Nothing written depends on wall-clock time when
//! `cfg.deterministic` is set.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lingauss::{verify_suite, NumericTrainerConfig, VerifyReport};
use crate::metrics::{evaluate_suite, task_rng, write_observation_csv, EvalConfig, MetricReport};
use crate::nets::{MeanFlowNet, NoiseAdapter};
use crate::plot::{lines_svg, plot_scatter, Coloring, ObservationLine, Series};
use crate::problems::{checkerboard_families, checkerboard_sample, load_points, save_points, OperatorFamily};
use crate::sampling::{adapter_noise, euler_transport, posterior_ensemble, unconditional_batch, TimePartition};
use crate::training::{
    mean_reward, run_training, CenterReward, Objective, Reward, TrainConfig, TrainData, TrainLog, TrainState,
};
use crate::SimRng;

/// Pipeline stages, named as on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    PretrainFm,
    TrainMf,
    TrainVfm,
    TrainFrozen,
    TrainReward,
    Sample,
    Eval,
    LingaussVerify,
    Ablate,
}

impl Mode {
    pub fn objective(self) -> Option<Objective> {
        Some(match self {
            Mode::PretrainFm => Objective::FlowMatching,
            Mode::TrainMf => Objective::MeanFlow,
            Mode::TrainVfm => Objective::Vfm,
            Mode::TrainFrozen => Objective::FrozenTheta,
            Mode::TrainReward => Objective::Reward,
            _ => return None,
        })
    }
}

fn tag(obj: Objective) -> &'static str {
    match obj {
        Objective::FlowMatching => "fm",
        Objective::MeanFlow => "mf",
        Objective::Vfm => "vfm",
        Objective::FrozenTheta => "frozen",
        Objective::Reward => "reward",
    }
}

// Rng streams, one per purpose.
const STREAM_DATA: u64 = 1 << 20;
const STREAM_TRAIN: u64 = 2 << 20;
const STREAM_SAMPLE: u64 = 3 << 20;
const STREAM_REWARD_EVAL: u64 = 4 << 20;

fn stream_of(obj: Objective) -> u64 {
    match obj {
        Objective::FlowMatching => 0,
        Objective::MeanFlow => 1,
        Objective::Vfm => 2,
        Objective::FrozenTheta => 3,
        Objective::Reward => 4,
    }
}

fn stage_config(cfg: &RunConfig, obj: Objective) -> TrainConfig {
    let base = match obj {
        Objective::FlowMatching => &cfg.stages.pretrain_fm,
        Objective::MeanFlow => &cfg.stages.train_mf,
        Objective::Vfm => &cfg.stages.train_vfm,
        Objective::FrozenTheta => &cfg.stages.train_frozen,
        Objective::Reward => &cfg.stages.train_reward,
    };
    cfg.stage(base)
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

/// Training points and the two checkerboard operator classes.
pub fn build_data(cfg: &RunConfig) -> Result<TrainData> {
    let x = match &cfg.data.path {
        Some(p) => load_points(p)?,
        None => checkerboard_sample(cfg.data.n_train, &mut task_rng(cfg.seed, STREAM_DATA)),
    };
    TrainData::new(x, checkerboard_families(cfg.data.sigma)?)
}

fn fresh_adapter(cfg: &RunConfig, obj: Objective, data: &TrainData) -> Result<NoiseAdapter> {
    let classes = if obj == Objective::Reward {
        cfg.model.reward_classes
    } else {
        data.families.len()
    };
    NoiseAdapter::new(
        data.obs_dim(),
        data.dim(),
        classes,
        cfg.model.embed_dim,
        &cfg.model.adapter_hidden,
        cfg.seed.wrapping_add(17),
    )
}

/// Generator a downstream stage starts from: the EMA shadow of `ckpt`.
pub fn generator_of(ckpt: &Checkpoint) -> MeanFlowNet {
    ckpt.state.ema_net()
}

/// Initial state for a training stage, either resumed or fresh.
pub fn initial_state(
    cfg: &RunConfig,
    obj: Objective,
    data: &TrainData,
) -> Result<(TrainState, SimRng)> {
    let stage = stage_config(cfg, obj);
    if let Some(path) = &cfg.inputs.resume {
        let ck = Checkpoint::load(path)?;
        if ck.kind != obj {
            return Err(Error::Config(format!(
                "{} holds a {:?} run, cannot resume it as {obj:?}",
                path.display(),
                ck.kind
            )));
        }
        return Ok((ck.state, ck.rng));
    }
    let theta = match &cfg.inputs.init {
        Some(path) => generator_of(&Checkpoint::load(path)?),
        None if matches!(obj, Objective::FlowMatching | Objective::MeanFlow) => {
            MeanFlowNet::new(data.dim(), &cfg.model.mf_hidden, cfg.seed)?
        }
        None => {
            return Err(Error::Config(format!(
                "{obj:?} needs a pretrained generator (inputs.init / --init)"
            )))
        }
    };
    if theta.dim != data.dim() {
        return Err(Error::Config("generator dimension does not match the data".into()));
    }
    let phi = if obj.uses_adapter() {
        Some(fresh_adapter(cfg, obj, data)?)
    } else {
        None
    };
    let state = TrainState::new(theta, phi, &stage)?;
    Ok((state, task_rng(cfg.seed, STREAM_TRAIN + stream_of(obj))))
}

/// Mean reward of one-step samples and the smallest adapter sigma, both on a
/// fixed evaluation batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardPoint {
    pub step: u64,
    pub mean_reward: f64,
    pub min_sigma: f64,
}

pub fn reward_probe(state: &TrainState, reward: &dyn Reward, seed: u64) -> Result<RewardPoint> {
    let phi = state.adapter()?;
    let mut rng = task_rng(seed, STREAM_REWARD_EVAL);
    let mean = mean_reward(&state.theta, phi, reward, 256, &mut rng)?;
    let y = ndarray::Array2::zeros((phi.n_classes(), phi.obs_dim));
    let classes: Vec<usize> = (0..phi.n_classes()).collect();
    let (_, sigma) = phi.forward_batch(&y, &classes)?;
    Ok(RewardPoint {
        step: state.step,
        mean_reward: mean,
        min_sigma: sigma.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Artifacts of a training stage.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: PathBuf,
    pub final_state: Checkpoint,
    pub reward_trace: Vec<RewardPoint>,
}

/// Runs one training stage to `iters` steps, writing `train_log.csv`,
/// periodic and final checkpoints, samples and plots.
pub fn train(cfg: &RunConfig, obj: Objective) -> Result<StageOutput> {
    cfg.check_inputs()?;
    ensure_out(cfg)?;
    let data = build_data(cfg)?;
    let stage = stage_config(cfg, obj);
    let (mut state, mut rng) = initial_state(cfg, obj, &data)?;
    let reward = if obj == Objective::Reward {
        Some(CenterReward::checkerboard(state.adapter()?.n_classes())?)
    } else {
        None
    };
    let reward_ref: Option<&dyn Reward> = reward.as_ref().map(|r| r as &dyn Reward);
    let name = tag(obj);
    let mut log = TrainLog::create(&cfg.out.join("train_log.csv"), cfg.deterministic)?;
    let every = if stage.checkpoint_every > 0 {
        stage.checkpoint_every
    } else {
        stage.iters
    };
    let mut trace = Vec::new();
    if let Some(r) = reward_ref {
        trace.push(reward_probe(&state, r, cfg.seed)?);
    }
    let started = Instant::now();
    while (state.step as usize) < stage.iters {
        let next = ((state.step as usize / every) + 1) * every;
        let sub = TrainConfig {
            iters: next.min(stage.iters),
            ..stage.clone()
        };
        let before = (state.clone(), rng.clone());
        let res = run_training(obj, &mut state, &data, &sub, reward_ref, cfg.execution, &mut rng, Some(&mut log), |_, _| Ok(()));
        if let Err(e) = res {
            dump_divergence(cfg, obj, before, &stage, &e)?;
            return Err(e);
        }
        let ck = Checkpoint {
            kind: obj,
            state: state.clone(),
            config: stage.clone(),
            rng: rng.clone(),
        };
        if (state.step as usize) < stage.iters {
            ck.save(&cfg.out.join(format!("checkpoint_{name}_{}.ckpt", state.step)))?;
        }
        if let Some(r) = reward_ref {
            trace.push(reward_probe(&state, r, cfg.seed)?);
        }
    }
    log::info!("{obj:?}: {} steps in {:.1?}", state.step, started.elapsed());
    let final_state = Checkpoint {
        kind: obj,
        state,
        config: stage,
        rng,
    };
    let path = cfg.out.join(format!("checkpoint_{name}.ckpt"));
    final_state.save(&path)?;
    if !trace.is_empty() {
        let mut w = csv::Writer::from_path(cfg.out.join("reward_log.csv"))?;
        for p in &trace {
            w.serialize(p)?;
        }
        w.flush()?;
    }
    write_samples(cfg, &final_state)?;
    Ok(StageOutput {
        checkpoint: path,
        final_state,
        reward_trace: trace,
    })
}

fn dump_divergence(
    cfg: &RunConfig,
    obj: Objective,
    (state, rng): (TrainState, SimRng),
    stage: &TrainConfig,
    e: &Error,
) -> Result<()> {
    let ck = Checkpoint {
        kind: obj,
        state,
        config: stage.clone(),
        rng,
    };
    let before = &ck.state;
    ck.save(&cfg.out.join("diverged.ckpt"))?;
    let diag = serde_json::json!({
        "objective": obj,
        "error": e.to_string(),
        "last_saved_step": before.step,
        "theta_finite": crate::nets::ParamSet::all_finite(&before.theta.params),
    });
    fs::write(cfg.out.join("divergence.json"), serde_json::to_string_pretty(&diag)?)?;
    log::error!("{obj:?} diverged: {e}; state before the failing segment saved to diverged.ckpt");
    Ok(())
}

fn fmt_y(y: f64) -> String {
    format!("{y}")
}

fn observation_line(class: usize, y: f64) -> Option<ObservationLine> {
    match class {
        0 => Some(ObservationLine::Vertical(y)),
        1 => Some(ObservationLine::Horizontal(y)),
        _ => None,
    }
}

/// Writes prior (and, with an adapter, posterior and noise-space) samples
/// with their plots.
pub fn write_samples(cfg: &RunConfig, ck: &Checkpoint) -> Result<()> {
    let net = generator_of(ck);
    let mut rng = task_rng(cfg.seed, STREAM_SAMPLE);
    let n = cfg.sample.n;
    let prior = if ck.kind == Objective::FlowMatching {
        let z = crate::sampling::normal_matrix(n, net.dim, &mut rng);
        euler_transport(&net, &z, &TimePartition::uniform(50)?)?
    } else {
        unconditional_batch(&net, &TimePartition::uniform(cfg.steps)?, n, &mut rng)?
    };
    let name = tag(ck.kind);
    save_points(&cfg.out.join(format!("samples_{name}_prior.csv")), &prior)?;
    if net.dim == 2 {
        plot_scatter(&prior, Coloring::CellParity, None, &format!("{name} prior"), &cfg.out.join(format!("{name}_prior.svg")))?;
    }
    let Some(phi) = &ck.state.phi else {
        return Ok(());
    };
    let part = TimePartition::uniform(cfg.steps)?;
    if ck.kind == Objective::Reward {
        for c in 0..phi.n_classes() {
            let x = posterior_ensemble(&[0.0], c, phi, &ck.state.theta, &TimePartition::uniform(1)?, n / phi.n_classes().max(1), &mut rng)?;
            save_points(&cfg.out.join(format!("samples_reward_c{c}.csv")), &x)?;
            if net.dim == 2 {
                plot_scatter(&x, Coloring::CellParity, None, &format!("reward class {c}"), &cfg.out.join(format!("reward_c{c}.svg")))?;
            }
        }
        return Ok(());
    }
    for &(c, y) in &cfg.sample.observations {
        if c >= phi.n_classes() {
            continue;
        }
        let z = adapter_noise(&[y], c, phi, n, &mut rng)?;
        let x = crate::sampling::transport(&net, &z, &part)?;
        let stem = format!("{name}_posterior_c{c}_y{}", fmt_y(y));
        save_points(&cfg.out.join(format!("samples_{stem}.csv")), &x)?;
        if net.dim == 2 {
            plot_scatter(&x, Coloring::CellParity, observation_line(c, y), &stem, &cfg.out.join(format!("{stem}.svg")))?;
            let lat = format!("{name}_noise_c{c}_y{}", fmt_y(y));
            plot_scatter(&z, Coloring::Plain, None, &lat, &cfg.out.join(format!("{lat}.svg")))?;
        }
    }
    Ok(())
}

/// `sample` stage: samples and plots for `inputs.model`.
pub fn sample(cfg: &RunConfig) -> Result<()> {
    cfg.check_inputs()?;
    ensure_out(cfg)?;
    let path = cfg
        .inputs
        .model
        .as_ref()
        .ok_or_else(|| Error::Config("sample needs inputs.model / --model".into()))?;
    write_samples(cfg, &Checkpoint::load(path)?)
}

fn eval_config(cfg: &RunConfig, base: &EvalConfig, steps: usize) -> EvalConfig {
    EvalConfig {
        seed: cfg.seed,
        steps,
        ..base.clone()
    }
}

pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    families: &[OperatorFamily],
    ecfg: &EvalConfig,
    cfg: &RunConfig,
) -> Result<(MetricReport, Vec<crate::metrics::ObservationRow>)> {
    let phi = ck.state.adapter()?;
    evaluate_suite(&generator_of(ck), phi, families, ecfg, cfg.execution)
}

/// `eval` stage: `metrics.json` (and `metrics_baseline.json`) plus
/// per-observation CSVs.
pub fn eval(cfg: &RunConfig) -> Result<(MetricReport, Option<MetricReport>)> {
    cfg.check_inputs()?;
    ensure_out(cfg)?;
    let families = checkerboard_families(cfg.data.sigma)?;
    let ecfg = eval_config(cfg, &cfg.eval, cfg.steps);
    let model = cfg
        .inputs
        .model
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs inputs.model / --model".into()))?;
    let (rep, rows) = evaluate_checkpoint(&Checkpoint::load(model)?, &families, &ecfg, cfg)?;
    fs::write(cfg.out.join("metrics.json"), rep.to_json()?)?;
    write_observation_csv(&cfg.out.join("metrics_per_obs.csv"), &rows)?;
    let base = match &cfg.inputs.baseline {
        Some(p) => {
            let (b, rows) = evaluate_checkpoint(&Checkpoint::load(p)?, &families, &ecfg, cfg)?;
            fs::write(cfg.out.join("metrics_baseline.json"), b.to_json()?)?;
            write_observation_csv(&cfg.out.join("metrics_baseline_per_obs.csv"), &rows)?;
            Some(b)
        }
        None => None,
    };
    Ok((rep, base))
}

/// `lingauss-verify` stage.
pub fn lingauss_verify(cfg: &RunConfig) -> Result<VerifyReport> {
    ensure_out(cfg)?;
    let rep = verify_suite(cfg.seed, &NumericTrainerConfig::default())?;
    fs::write(cfg.out.join("lingauss_report.json"), serde_json::to_string_pretty(&rep)?)?;
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub tau: f64,
    pub alpha: f64,
    pub ema: bool,
    pub steps: usize,
    pub nlpd: Option<f64>,
    pub crps: Option<f64>,
    pub mmd_prior: Option<f64>,
    pub mmd_posterior: Option<f64>,
    pub sacc_prior: Option<f64>,
    pub sacc_posterior: Option<f64>,
    /// No-EMA at large tau, the configuration expected to degrade.
    pub expected_degradation: bool,
    pub error: Option<String>,
}

impl AblationRow {
    fn new(model: &str, tau: f64, alpha: f64, ema: bool, steps: usize) -> Self {
        Self {
            model: model.into(),
            tau,
            alpha,
            ema,
            steps,
            nlpd: None,
            crps: None,
            mmd_prior: None,
            mmd_posterior: None,
            sacc_prior: None,
            sacc_posterior: None,
            expected_degradation: !ema && tau >= 100.0,
            error: None,
        }
    }

    fn fill(&mut self, r: &MetricReport) {
        self.nlpd = Some(r.nlpd);
        self.crps = Some(r.crps);
        self.mmd_prior = Some(r.mmd_prior);
        self.mmd_posterior = Some(r.mmd_posterior);
        self.sacc_prior = Some(r.sacc_prior);
        self.sacc_posterior = Some(r.sacc_posterior);
    }
}

fn ablate_cell(cfg: &RunConfig, obj: Objective, tc: TrainConfig, dir: &Path) -> Result<Checkpoint> {
    let mut sub = cfg.clone();
    sub.out = dir.to_path_buf();
    sub.inputs.resume = None;
    match obj {
        Objective::Vfm => sub.stages.train_vfm = tc,
        Objective::FrozenTheta => sub.stages.train_frozen = tc,
        _ => return Err(Error::invalid("ablation trains VFM or frozen-generator cells")),
    }
    sub.sample.n = sub.sample.n.min(2000);
    Ok(train(&sub, obj)?.final_state)
}

/// `ablate` stage: one VFM model per (tau, alpha, ema) cell plus a
/// frozen-generator baseline, each evaluated at every `K` in
/// `ablate.steps`. Failed cells are recorded and skipped.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.check_inputs()?;
    ensure_out(cfg)?;
    if cfg.inputs.init.is_none() {
        return Err(Error::Config("ablate needs a pretrained generator (inputs.init / --init)".into()));
    }
    let families = checkerboard_families(cfg.data.sigma)?;
    let mut rows = Vec::new();
    let mut run_cell = |model: &str, obj: Objective, tau: f64, alpha: f64, ema: bool| {
        let base = if obj == Objective::Vfm {
            &cfg.stages.train_vfm
        } else {
            &cfg.stages.train_frozen
        };
        let tc = TrainConfig {
            tau,
            alpha,
            use_ema: ema,
            iters: cfg.ablate.iters,
            checkpoint_every: 0,
            ..base.clone()
        };
        let dir = cfg.out.join(format!("{model}_tau{tau}_alpha{alpha}_ema{}", u8::from(ema)));
        let trained = fs::create_dir_all(&dir).map_err(Error::from).and_then(|_| ablate_cell(cfg, obj, tc, &dir));
        for &k in &cfg.ablate.steps {
            let mut row = AblationRow::new(model, tau, alpha, ema, k);
            match &trained {
                Ok(ck) => match evaluate_checkpoint(ck, &families, &eval_config(cfg, &cfg.ablate.eval, k), cfg) {
                    Ok((r, _)) => row.fill(&r),
                    Err(e) => row.error = Some(e.to_string()),
                },
                Err(e) => row.error = Some(e.to_string()),
            }
            if let Some(e) = &row.error {
                log::warn!("ablation cell {model} tau={tau} alpha={alpha} ema={ema} K={k} failed: {e}");
            }
            rows.push(row);
        }
    };
    let frozen = &cfg.stages.train_frozen;
    run_cell("frozen", Objective::FrozenTheta, frozen.tau, frozen.alpha, frozen.use_ema);
    for &tau in &cfg.ablate.taus {
        for &alpha in &cfg.ablate.alphas {
            for &ema in &cfg.ablate.ema {
                run_cell("vfm", Objective::Vfm, tau, alpha, ema);
            }
        }
    }
    fs::write(cfg.out.join("ablate.json"), serde_json::to_string_pretty(&rows)?)?;
    let mut w = csv::Writer::from_path(cfg.out.join("ablate.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_ablation_plots(cfg, &rows)?;
    Ok(rows)
}

type Metric = fn(&AblationRow) -> Option<f64>;

const METRICS: [(&str, Metric); 6] = [
    ("nlpd", |r| r.nlpd),
    ("crps", |r| r.crps),
    ("mmd_prior", |r| r.mmd_prior),
    ("mmd_posterior", |r| r.mmd_posterior),
    ("sacc_prior", |r| r.sacc_prior),
    ("sacc_posterior", |r| r.sacc_posterior),
];

fn write_ablation_plots(cfg: &RunConfig, rows: &[AblationRow]) -> Result<()> {
    let vfm: Vec<&AblationRow> = rows.iter().filter(|r| r.model == "vfm").collect();
    let alphas = &cfg.ablate.alphas;
    let tau_ref = cfg.ablate.taus.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (metric, get) in METRICS {
        // tau sweep, one plot per alpha.
        for &alpha in alphas {
            let mut series = Vec::new();
            for &ema in &cfg.ablate.ema {
                for &k in &cfg.ablate.steps {
                    let pts: Vec<(f64, f64)> = vfm
                        .iter()
                        .filter(|r| r.alpha == alpha && r.ema == ema && r.steps == k)
                        .filter_map(|r| get(r).map(|v| (r.tau, v)))
                        .collect();
                    series.push(Series {
                        label: format!("{} K={k}", if ema { "EMA" } else { "no EMA" }),
                        points: pts,
                        dashed: k > 1,
                    });
                }
            }
            for &k in &cfg.ablate.steps {
                if let Some(v) = rows.iter().find(|r| r.model == "frozen" && r.steps == k).and_then(get) {
                    series.push(Series {
                        label: format!("frozen K={k}"),
                        points: cfg.ablate.taus.iter().map(|&t| (t, v)).collect(),
                        dashed: k > 1,
                    });
                }
            }
            let svg = lines_svg(&series, true, &format!("{metric}, alpha = {alpha}"), metric)?;
            fs::write(cfg.out.join(format!("tau_sweep_{metric}_alpha{alpha}.svg")), svg)?;
        }
        // alpha sweep at the largest tau.
        let mut series = Vec::new();
        for &ema in &cfg.ablate.ema {
            for &k in &cfg.ablate.steps {
                series.push(Series {
                    label: format!("{} K={k}", if ema { "EMA" } else { "no EMA" }),
                    points: vfm
                        .iter()
                        .filter(|r| r.tau == tau_ref && r.ema == ema && r.steps == k)
                        .filter_map(|r| get(r).map(|v| (r.alpha, v)))
                        .collect(),
                    dashed: k > 1,
                });
            }
        }
        let svg = lines_svg(&series, false, &format!("{metric}, tau = {tau_ref}"), metric)?;
        fs::write(cfg.out.join(format!("alpha_sweep_{metric}.svg")), svg)?;
    }
    Ok(())
}

/// Runs the stage selected by `mode`.
pub fn run(cfg: &RunConfig, mode: Mode) -> Result<()> {
    match mode {
        Mode::Sample => sample(cfg),
        Mode::Eval => eval(cfg).map(|_| ()),
        Mode::LingaussVerify => lingauss_verify(cfg).map(|_| ()),
        Mode::Ablate => ablate(cfg).map(|_| ()),
        m => train(cfg, m.objective().expect("training mode")).map(|_| ()),
    }
}
