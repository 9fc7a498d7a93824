use proptest::prelude::*;

use vfm_core::nets::{MeanFlowNet, MlpParams, NoiseAdapter};
use vfm_core::par::Execution;
use vfm_core::problems::{checkerboard_families, checkerboard_sample};
use vfm_core::seeded_rng;
use vfm_core::training::steps::StepDraws;
use vfm_core::training::{train_step, Objective, TrainConfig, TrainData, TrainState};

fn data() -> TrainData {
    TrainData::new(checkerboard_sample(2000, &mut seeded_rng(0)), checkerboard_families(0.1).unwrap()).unwrap()
}

fn state(cfg: &TrainConfig, seed: u64) -> TrainState {
    let theta = MeanFlowNet::new(2, &[16, 16], seed).unwrap();
    let phi = NoiseAdapter::new(1, 2, 2, 4, &[8], seed + 1).unwrap();
    TrainState::new(theta, Some(phi), cfg).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch: 16,
        chunks: 4,
        lr_theta: 1e-3,
        lr_phi: 1e-3,
        ..TrainConfig::default()
    }
}

fn flat(p: &MlpParams) -> Vec<f64> {
    p.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn losses_are_nonnegative_and_total_adds_up(seed in 0u64..1000, tau in 0.5f64..200.0, sigma in 0.05f64..1.0, alpha in 0.0f64..=1.0) {
        let cfg = TrainConfig { tau, sigma, alpha, ..small_cfg() };
        let mut st = state(&cfg, seed);
        let l = train_step(Objective::Vfm, &mut st, &data(), &cfg, None, Execution::Sequential, &mut seeded_rng(seed)).unwrap();
        prop_assert!(l.mf >= 0.0 && l.obs >= 0.0 && l.kl >= 0.0);
        let expect = 0.5 / (tau * tau) * l.mf + 0.5 / (sigma * sigma) * l.obs + l.kl;
        prop_assert!((l.total_raw - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        // Each weighted sample loss is L / (L + gamma) < 1.
        prop_assert!(l.total_scaled < 1.0);
    }

    /// With the EMA generator in the observation term and no adapter noise in
    /// the flow term, the observation weight cannot reach the generator update.
    #[test]
    fn ema_observation_term_gives_no_generator_gradient(seed in 0u64..1000, s1 in 0.05f64..1.0, s2 in 0.05f64..1.0) {
        let run = |sigma: f64, use_ema: bool| {
            let cfg = TrainConfig { sigma, alpha: 0.0, adaptive: false, use_ema, ..small_cfg() };
            let mut st = state(&cfg, seed);
            train_step(Objective::Vfm, &mut st, &data(), &cfg, None, Execution::Sequential, &mut seeded_rng(seed)).unwrap();
            flat(&st.theta.params)
        };
        prop_assert_eq!(run(s1, true), run(s2, true));
        if (s1 - s2).abs() > 1e-3 {
            prop_assert_ne!(run(s1, false), run(s2, false));
        }
    }

    #[test]
    fn frozen_mode_leaves_generator_untouched(seed in 0u64..1000) {
        let cfg = small_cfg();
        let mut st = state(&cfg, seed);
        let (theta, shadow) = (flat(&st.theta.params), flat(&st.ema.shadow));
        train_step(Objective::FrozenTheta, &mut st, &data(), &cfg, None, Execution::Sequential, &mut seeded_rng(seed)).unwrap();
        prop_assert_eq!(flat(&st.theta.params), theta);
        prop_assert_eq!(flat(&st.ema.shadow), shadow);
    }

    #[test]
    fn keep_fraction_tracks_alpha(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let d = data();
        let n = 4000;
        let draws = StepDraws::draw(&d, d.families.len(), true, n, alpha, 0.25, &mut seeded_rng(seed)).unwrap();
        let frac = draws.keep.iter().filter(|&&k| k).count() as f64 / n as f64;
        let se = (alpha * (1.0 - alpha) / n as f64).sqrt();
        prop_assert!((frac - alpha).abs() <= 3.0 * se + 1e-12, "frac {frac} alpha {alpha}");
    }
}

#[test]
fn runs_are_deterministic_across_execution_modes() {
    let cfg = small_cfg();
    let d = data();
    let run = |exec: Execution| {
        let mut st = state(&cfg, 9);
        let mut rng = seeded_rng(11);
        let losses: Vec<_> = (0..5)
            .map(|_| train_step(Objective::Vfm, &mut st, &d, &cfg, None, exec, &mut rng).unwrap().total_raw.to_bits())
            .collect();
        (losses, flat(&st.theta.params), flat(&st.adapter().unwrap().params), flat(&st.ema.shadow))
    };
    let a = run(Execution::Sequential);
    assert_eq!(a, run(Execution::Sequential));
    assert_eq!(a, run(Execution::Parallel));
}
