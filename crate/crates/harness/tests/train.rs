//! End-to-end trainer behavior on tiny budgets.

use std::fs;

use curl_core::envs::EnvId;
use curl_harness::ablate::{run_matrix, Variant};
use curl_harness::checkpoint;
use curl_harness::config::{AgentKind, ExperimentConfig, Profile};
use curl_harness::train::{evaluate_checkpoint, load_agent, train, Trainer};

fn tiny(env: EnvId, agent: AgentKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::profile(Profile::Quick, env, agent);
    c.train.env_steps = if env == EnvId::GridChase { 120 } else { 480 };
    c.train.initial_steps = 20;
    c.train.min_replay = 20;
    c.train.batch_size = 8;
    c.train.eval_every = if env == EnvId::GridChase { 40 } else { 160 };
    c.train.eval_episodes = 2;
    c.train.record_wall_clock = false;
    c.env.episode_length = 15;
    c.sac.hidden = 16;
    c.dqn.hidden = 16;
    c
}

#[test]
fn resume_matches_uninterrupted_run() {
    for (env, agent) in [(EnvId::PointMass, AgentKind::Sac), (EnvId::GridChase, AgentKind::Dqn), (EnvId::PointMass, AgentKind::StateSacOracle)] {
        let config = tiny(env, agent);
        let mut full = Trainer::new(config.clone()).unwrap();
        full.run().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = Trainer::new(config).unwrap();
        // Stop mid-episode and mid-accumulation.
        first.run_until(first.total_interactions() / 2 + 3).unwrap();
        first.save(dir.path()).unwrap();
        drop(first);
        let mut resumed = Trainer::resume(dir.path()).unwrap();
        resumed.run().unwrap();

        assert_eq!(resumed.metrics_csv(), full.metrics_csv(), "{env} {agent}");
        assert_eq!(resumed.agent.entries(), full.agent.entries(), "{env} {agent}");
        assert_eq!(resumed.counts, full.counts);
    }
}

#[test]
fn zero_budget_writes_one_row() {
    let mut c = tiny(EnvId::PointMass, AgentKind::Sac);
    c.train.env_steps = 0;
    let mut t = Trainer::new(c).unwrap();
    t.run().unwrap();
    assert_eq!(t.rows().len(), 1);
    assert_eq!((t.rows()[0].env_step, t.rows()[0].interaction_step), (0, 0));
    assert!(t.rows()[0].eval_mean.is_some());
}

#[test]
fn rows_account_env_steps() {
    for (env, agent) in [(EnvId::PointMass, AgentKind::Sac), (EnvId::Pendulum, AgentKind::Sac), (EnvId::GridChase, AgentKind::Dqn)] {
        let c = tiny(env, agent);
        let repeat = c.env.action_repeat as u64;
        let mut t = Trainer::new(c.clone()).unwrap();
        t.run().unwrap();
        let rows = t.rows();
        assert_eq!(rows.first().unwrap().interaction_step, 0);
        assert_eq!(rows.last().unwrap().interaction_step, c.interaction_steps());
        for r in rows {
            assert_eq!(r.env_step, r.interaction_step * repeat);
        }
        assert!(rows.windows(2).all(|w| w[0].interaction_step < w[1].interaction_step));
    }
}

#[test]
fn contrastive_and_rl_updates_are_one_to_one() {
    let mut t = Trainer::new(tiny(EnvId::PointMass, AgentKind::Sac)).unwrap();
    t.run().unwrap();
    assert!(t.counts.rl > 0);
    assert_eq!(t.counts.rl, t.counts.curl);

    let mut c = tiny(EnvId::PointMass, AgentKind::Sac);
    c.ablation.no_curl = true;
    let mut t = Trainer::new(c).unwrap();
    t.run().unwrap();
    assert_eq!(t.counts.curl, 0);
}

#[test]
fn state_oracle_has_no_encoder() {
    let mut t = Trainer::new(tiny(EnvId::PointMass, AgentKind::StateSacOracle)).unwrap();
    assert!(t.agent.pair().is_none());
    t.run().unwrap();
    assert_eq!(t.counts.curl, 0);
    assert!(t.rows().iter().all(|r| r.curl_loss.is_none()));
}

#[test]
fn checkpoint_round_trip_and_evaluation() {
    let out = tempfile::tempdir().unwrap();
    let (_, ckpt) = train(tiny(EnvId::PointMass, AgentKind::Sac), out.path()).unwrap();
    assert!(out.path().join(checkpoint::METRICS).exists());

    // save -> load -> save is byte-identical, optimizer moments included.
    let again = tempfile::tempdir().unwrap();
    Trainer::resume(&ckpt).unwrap().save(again.path()).unwrap();
    for f in [checkpoint::PARAMS, checkpoint::MANIFEST, checkpoint::STATE, checkpoint::REPLAY, checkpoint::CONFIG] {
        assert!(fs::read(ckpt.join(f)).unwrap() == fs::read(again.path().join(f)).unwrap(), "{f} differs");
    }
    // Parameters alone load without the optimizer state.
    let (_, agent) = load_agent(&ckpt).unwrap();
    let saved = checkpoint::read_entries(&ckpt).unwrap();
    for e in agent.entries().iter().filter(|e| !e.name.starts_with("adam.")) {
        assert!(saved.contains(e), "{} not restored", e.name);
    }

    let (_, std) = evaluate_checkpoint(&ckpt, 1, 0, None).unwrap();
    assert_eq!(std, 0.0);
    let a = evaluate_checkpoint(&ckpt, 3, 5, Some(EnvId::PointMass)).unwrap();
    let b = evaluate_checkpoint(&ckpt, 3, 5, None).unwrap();
    assert_eq!(a, b);
    assert!(evaluate_checkpoint(&ckpt, 1, 0, Some(EnvId::GridChase)).is_err());
    assert!(evaluate_checkpoint(&ckpt, 0, 0, None).is_err());
}

#[test]
fn strict_failure_leaves_diagnostic() {
    let mut c = tiny(EnvId::PointMass, AgentKind::Sac);
    c.train.strict = true;
    // A huge learning rate blows the critic up quickly.
    c.sac.lr = 1e12;
    let out = tempfile::tempdir().unwrap();
    let err = train(c, out.path()).unwrap_err();
    assert!(format!("{err:#}").contains("diagnostic"), "{err:#}");
    assert!(out.path().join("diagnostic").join(checkpoint::MANIFEST).exists());
}

#[test]
fn ablation_matrix_is_ordered_and_paired() {
    let base = tiny(EnvId::PointMass, AgentKind::Sac);
    let variants = [Variant::PixelSac, Variant::StateSac];
    let one = run_matrix(&base, &variants, &[3, 1], 1).unwrap();
    let two = run_matrix(&base, &variants, &[3, 1], 2).unwrap();
    let order: Vec<(Variant, u64)> = one.iter().map(|r| (r.variant, r.seed)).collect();
    assert_eq!(order, [(Variant::PixelSac, 3), (Variant::PixelSac, 1), (Variant::StateSac, 3), (Variant::StateSac, 1)]);
    for (a, b) in one.iter().zip(&two) {
        assert_eq!(a.rows, b.rows);
    }
    assert!(run_matrix(&base, &[Variant::Curl], &[], 1).is_err());
}

#[test]
fn conflicting_flags_are_rejected() {
    let mut c = tiny(EnvId::PointMass, AgentKind::Sac);
    c.ablation.no_curl = true;
    c.ablation.detach_encoder = true;
    assert!(Trainer::new(c).is_err());
    assert!(Trainer::new(tiny(EnvId::GridChase, AgentKind::Sac)).is_err());
}
