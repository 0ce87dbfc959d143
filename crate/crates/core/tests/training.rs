use mpcrrl_core::dynamics::DynamicsParams;
use mpcrrl_core::envsim::{Env, EnvConfig, GroundTruthParams, Perturbation};
use mpcrrl_core::mpc::MpcConfig;
use mpcrrl_core::policy::{action_scale, Policy, PolicyConfig, ValueConfig};
use mpcrrl_core::training::{collect_sysid_data, fit_sysid, rollout, train, CollectConfig, ControlContext, FitConfig, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick_base() -> DynamicsParams {
    let ds = collect_sysid_data(3000, 11, &GroundTruthParams::default(), &CollectConfig::default()).unwrap();
    let init = DynamicsParams::init(1.5, &mut ChaCha8Rng::seed_from_u64(0));
    fit_sysid(&ds, &init, &FitConfig { max_epochs: 40, refine_iters: 0, ..FitConfig::default() }).unwrap().theta
}

/// Mean stochastic return over a fixed set of episodes.
fn fixed_return(policy: &Policy, ctx: &ControlContext, cfg: &TrainConfig, env_cfg: &EnvConfig) -> f64 {
    let seeds = 0..8u64;
    let n = seeds.clone().count() as f64;
    seeds
        .map(|s| {
            let (mut env, x0) = Env::reset(&cfg.train_perturbations[0], 500 + s, env_cfg.clone()).unwrap();
            let b = rollout(Some(policy), ctx, &mut env, x0, true, &mut ChaCha8Rng::seed_from_u64(s));
            assert!(b.valid);
            b.returns[0]
        })
        .sum::<f64>()
        / n
}

#[test]
fn training_improves_return_on_a_stationary_task() {
    let base = quick_base();
    let env_cfg = EnvConfig {
        max_steps: 40,
        ..EnvConfig::default()
    };
    for seed in 0..3 {
        let cfg = TrainConfig {
            iterations: 10,
            episodes: 8,
            max_steps: 40,
            policy_lr: 3e-3,
            seed,
            train_perturbations: vec![vec!["moi=1.0".parse::<Perturbation>().unwrap()]],
            policy: PolicyConfig {
                embed: 16,
                hidden: 16,
                log_std_init: -1.0,
                ..PolicyConfig::default()
            },
            value: ValueConfig { hidden: 16 },
            ..TrainConfig::default()
        };
        let ctx = ControlContext::new(base.clone(), action_scale(&base, &cfg.policy), MpcConfig::default()).unwrap();
        let initial = Policy::new(cfg.policy_kind, cfg.policy.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let out = train(&cfg, &base, &MpcConfig::default(), &env_cfg, None, |_| {}).unwrap();
        let before = fixed_return(&initial, &ctx, &cfg, &env_cfg);
        let after = fixed_return(&out.policy, &ctx, &cfg, &env_cfg);
        println!("seed {seed}: {before:.4} -> {after:.4}");
        assert!(after > before, "seed {seed}: {after} ≤ {before}");
    }
}
