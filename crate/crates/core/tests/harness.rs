use std::fs;
use std::path::Path;

use crl_core::harness::{
    evaluate, generate_expert_dataset, load_agent, read_metrics, resume_online, train_offline,
    train_online, AgentKind, Checkpoint, EnvConfig, ExperimentConfig, ExpertConfig, UniformPolicy,
    FINAL_CHECKPOINT, METRICS_FILE,
};
use crl_core::numcore::Parameterized;
use crl_core::replay::{sidecar_path, write_dataset};
use crl_core::Error;

fn small(variant: AgentKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 11;
    c.agent.variant = variant;
    c.agent.hidden = vec![16, 16];
    c.agent.repr_dim = 8;
    c.agent.batch_size = 16;
    c.agent.lr = 1e-3;
    c.env.horizon = 20;
    c.schedule.initial_random_steps = 100;
    c.schedule.total_env_steps = 400;
    c.schedule.train_collect_interval = 10;
    c.schedule.samples_per_insert = 24;
    c.schedule.eval_interval = 200;
    c.schedule.eval_episodes = 8;
    c.schedule.log_interval = 5;
    c.schedule.replay_capacity = 10_000;
    c
}

#[test]
fn every_variant_runs_and_logs() {
    for (variant, env) in [
        (AgentKind::Nce, "empty_5x5"),
        (AgentKind::Cpc, "empty_5x5"),
        (AgentKind::CLearning, "empty_5x5"),
        (AgentKind::NcePlusC, "empty_5x5"),
        (AgentKind::Gcbc, "empty_5x5"),
        (AgentKind::ModelBased, "empty_5x5"),
        (AgentKind::Nce, "grid:empty_5x5"),
        (AgentKind::ModelBased, "grid:nine_rooms"),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(variant);
        c.env.name = env.into();
        let summary =
            train_online(&c, dir.path()).unwrap_or_else(|e| panic!("{variant} on {env}: {e}"));
        // 30 bursts of 10 * 24 / 16 = 15 steps
        assert_eq!(summary.grad_steps, 450, "{variant}");
        let recs = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert!(recs.windows(2).all(|w| w[0].env_steps <= w[1].env_steps));
        assert!(recs.iter().all(|r| r.value.is_finite() && r.seed == 11));
        assert!(recs
            .iter()
            .any(|r| r.name == "eval/success_rate" && r.env_steps == 400));
        let has_critic = variant != AgentKind::Gcbc;
        assert_eq!(
            recs.iter().any(|r| r.name == "train/critic_loss"),
            has_critic,
            "{variant}"
        );
    }
}

#[test]
fn warm_up_only_run_takes_no_gradient_steps() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(AgentKind::Nce);
    c.schedule.total_env_steps = c.schedule.initial_random_steps;
    let s = train_online(&c, dir.path()).unwrap();
    assert_eq!(s.grad_steps, 0);
    assert_eq!(s.env_steps, 100);
    let (_, agent, ckpt) = load_agent(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ckpt.counters.episodes, 5);
    assert_eq!(agent.policy_opt.step_count, 0);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let c = small(AgentKind::Nce);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_online(&c, a.path()).unwrap();
    train_online(&c, b.path()).unwrap();
    let read = |d: &Path| fs::read(d.join(METRICS_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let ca = fs::read(a.path().join(FINAL_CHECKPOINT)).unwrap();
    let cb = fs::read(b.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    for variant in [AgentKind::Nce, AgentKind::NcePlusC] {
        let mut c = small(variant);
        // 135 and 270 fall mid-episode
        c.schedule.checkpoint_interval = 135;
        c.agent.filter_enabled = variant == AgentKind::Nce;
        c.agent.filter_epsilon = 5.0;
        let full = tempfile::tempdir().unwrap();
        train_online(&c, full.path()).unwrap();
        let resumed = tempfile::tempdir().unwrap();
        fs::copy(
            full.path().join(METRICS_FILE),
            resumed.path().join(METRICS_FILE),
        )
        .unwrap();
        let ckpt = full.path().join("checkpoints/step_0000000270.ckpt");
        let partial = Checkpoint::load(&ckpt).unwrap();
        assert!(partial.partial_episode.is_some());
        assert_eq!(partial.counters.env_steps, 270);
        resume_online(&ckpt, resumed.path()).unwrap();
        let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
        let text = |d: &Path| fs::read_to_string(d.join(METRICS_FILE)).unwrap();
        let (a, b) = (text(full.path()), text(resumed.path()));
        for (x, y) in a.lines().zip(b.lines()) {
            assert_eq!(x, y, "{variant}");
        }
        assert_eq!(a.lines().count(), b.lines().count(), "{variant}");
        assert_eq!(
            read(full.path(), FINAL_CHECKPOINT),
            read(resumed.path(), FINAL_CHECKPOINT),
            "{variant}"
        );
    }
}

#[test]
fn invalid_config_lists_every_problem() {
    let mut c = small(AgentKind::Nce);
    c.agent.batch_size = 1;
    c.env.gamma = 1.5;
    let dir = tempfile::tempdir().unwrap();
    match train_online(&c, dir.path()) {
        Err(Error::Config(msg)) => {
            assert!(msg.contains("batch_size") && msg.contains("gamma"), "{msg}");
        }
        other => panic!("expected config error, got {other:?}"),
    }
}

fn expert_dataset(dir: &Path, env: &EnvConfig) -> std::path::PathBuf {
    let (meta, trajs) = generate_expert_dataset(
        env,
        &ExpertConfig {
            episodes: 30,
            action_noise: 0.3,
            seed: 4,
        },
    )
    .unwrap();
    let p = dir.join("expert.bin");
    write_dataset(&p, &meta, &trajs).unwrap();
    p
}

fn offline(variant: AgentKind, lambda: f64, critics: usize, steps: u64) -> ExperimentConfig {
    let mut c = small(variant);
    c.offline.lambda = lambda;
    c.offline.num_critics = critics;
    c.offline.train_steps = steps;
    c.offline.eval_interval = 0;
    c.schedule.log_interval = 1;
    c
}

fn policy_params(dir: &Path) -> Vec<f64> {
    let (_, agent, _) = load_agent(&dir.join(FINAL_CHECKPOINT)).unwrap();
    agent
        .policy
        .params()
        .iter()
        .flat_map(|(_, p)| p.to_vec())
        .collect()
}

#[test]
fn offline_lambda_one_matches_gcbc() {
    let data = tempfile::tempdir().unwrap();
    let ds = expert_dataset(data.path(), &small(AgentKind::Nce).env);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_offline(&offline(AgentKind::Nce, 1.0, 2, 200), &ds, a.path()).unwrap();
    train_offline(&offline(AgentKind::Gcbc, 1.0, 1, 200), &ds, b.path()).unwrap();
    let actor = |d: &Path| -> Vec<u64> {
        read_metrics(&d.join(METRICS_FILE))
            .unwrap()
            .iter()
            .filter(|r| r.name == "train/actor_loss")
            .map(|r| r.value.to_bits())
            .collect()
    };
    assert_eq!(actor(a.path()).len(), 200);
    assert_eq!(actor(a.path()), actor(b.path()));
    let (pa, pb) = (policy_params(a.path()), policy_params(b.path()));
    assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn extra_critic_changes_the_actor_only_after_it_is_used() {
    let data = tempfile::tempdir().unwrap();
    let ds = expert_dataset(data.path(), &small(AgentKind::Nce).env);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_offline(&offline(AgentKind::Nce, 0.5, 1, 3), &ds, a.path()).unwrap();
    train_offline(&offline(AgentKind::Nce, 0.5, 2, 3), &ds, b.path()).unwrap();
    let critic0 = |d: &Path| {
        let (_, agent, _) = load_agent(&d.join(FINAL_CHECKPOINT)).unwrap();
        agent.critics[0]
            .params()
            .iter()
            .flat_map(|(_, p)| p.to_vec())
            .collect::<Vec<f64>>()
    };
    // the first critic trains identically; the actor sees the minimum
    assert_eq!(critic0(a.path()), critic0(b.path()));
    assert_ne!(policy_params(a.path()), policy_params(b.path()));
}

#[test]
fn offline_rejects_mismatched_dataset() {
    let data = tempfile::tempdir().unwrap();
    let ds = expert_dataset(data.path(), &small(AgentKind::Nce).env);
    let mut c = offline(AgentKind::Nce, 0.5, 1, 3);
    c.env.name = "nine_rooms".into();
    let out = tempfile::tempdir().unwrap();
    assert!(matches!(
        train_offline(&c, &ds, out.path()),
        Err(Error::Dataset(_))
    ));
    fs::remove_file(sidecar_path(&ds)).unwrap();
    assert!(train_offline(&offline(AgentKind::Nce, 0.5, 1, 3), &ds, out.path()).is_err());
}

#[test]
fn repeated_evaluation_is_identical() {
    let env = EnvConfig {
        name: "nine_rooms".into(),
        ..EnvConfig::default()
    };
    let a = evaluate(&env, &UniformPolicy, 30, 2, 3).unwrap();
    let b = evaluate(&env, &UniformPolicy, 30, 2, 1).unwrap();
    assert_eq!(a, b);
}
