//! SAC oracles: policy density, actor convergence on a known critic,
//! temperature direction, Bellman edge cases and joint-gradient bookkeeping.

use curl_core::agents::sac::{squashed_gaussian, SacAgent, SacConfig};
use curl_core::agents::{LossParts, ObsBatch, RlBatch, UpdateFlags};
use curl_core::augment::FrameStack;
use curl_core::autodiff::Tape;
use curl_core::nn::EncoderConfig;
use curl_core::replay::{Action, ReplayBuffer, RlView, Transition};
use curl_core::rng::{stream, Stream};
use rand::Rng as _;

/// Density of the squashed Gaussian evaluated at `actions`.
fn density(mu: f64, raw: f64, actions: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let n = actions.len();
    let log_std = lo + 0.5 * (hi - lo) * (raw.tanh() + 1.0);
    let sigma = log_std.exp();
    let noise: Vec<f64> = actions.iter().map(|a| (a.atanh() - mu) / sigma).collect();
    let mut tape = Tape::<f64>::no_grad();
    let head = tape.constant([n, 2], (0..n).flat_map(|_| [mu, raw]).collect()).unwrap();
    let noise = tape.constant([n, 1], noise).unwrap();
    let s = squashed_gaussian(&mut tape, head, noise, lo, hi).unwrap();
    for (a, b) in tape.value(s.action).iter().zip(actions) {
        assert!((a - b).abs() < 1e-9);
    }
    tape.value(s.log_prob).iter().map(|l| l.exp()).collect()
}

#[test]
fn squashed_density_integrates_to_one() {
    for &(mu, raw) in &[(0.0, 0.0), (0.4, -0.3), (-0.8, 0.5), (1.2, -1.0)] {
        let n = 200_000;
        let h = 2.0 / n as f64;
        let grid: Vec<f64> = (0..n).map(|i| -1.0 + (i as f64 + 0.5) * h).collect();
        let mass: f64 = density(mu, raw, &grid, -2.0, 1.0).iter().sum::<f64>() * h;
        assert!((mass - 1.0).abs() < 1e-3, "mu={mu} raw={raw}: {mass}");
    }
}

fn bandit_agent(seed: u64) -> SacAgent<f64> {
    let mut cfg = SacConfig::new(1, None, 1);
    cfg.hidden = 64;
    cfg.init_temperature = 1e-3;
    cfg.actor_update_period = 1;
    cfg.target_update_period = 1;
    SacAgent::new(cfg, &mut stream(seed, Stream::Init)).unwrap()
}

fn bandit_batch(n: usize, rng: &mut curl_core::rng::Rng) -> RlBatch<f64> {
    let ts: Vec<Transition<Vec<f32>>> = (0..n)
        .map(|_| {
            let a: f32 = rng.random_range(-1.0..1.0);
            Transition::new(vec![1.0], Action::Continuous(vec![a]), -(a - 0.3) * (a - 0.3), vec![1.0], true)
        })
        .collect();
    let refs: Vec<&Transition<Vec<f32>>> = ts.iter().collect();
    RlBatch::from_states(&refs)
}

#[test]
fn actor_finds_argmax_of_quadratic_critic() {
    // One-state bandit with Q(a) = -(a - 0.3)^2; the deterministic action
    // should settle at the maximizer.
    let mut agent = bandit_agent(0);
    let mut rng = stream(0, Stream::Agent);
    for _ in 0..3000 {
        let b = bandit_batch(128, &mut rng);
        agent.update(&b, &UpdateFlags::default(), &mut rng).unwrap();
    }
    let obs = ObsBatch::from_states(&[&[1.0f32][..]]);
    let a = agent.act(&obs, true, &mut rng).unwrap()[0];
    assert!((a - 0.3).abs() < 0.05, "deterministic action {a}");
}

#[test]
fn temperature_moves_toward_target_entropy() {
    let mut agent = bandit_agent(1);
    let a0 = agent.alpha();
    // Positive gap: entropy below target, so alpha should grow.
    agent.update_alpha(0.5).unwrap();
    let a1 = agent.alpha();
    assert!(a1 > a0, "{a0} -> {a1}");
    for _ in 0..3 {
        agent.update_alpha(-0.5).unwrap();
    }
    assert!(agent.alpha() < a1);
}

#[test]
fn bellman_targets_reduce_to_reward() {
    let mut rng = stream(2, Stream::Agent);
    let mut agent = bandit_agent(2);
    let b = bandit_batch(16, &mut rng);
    // Terminal transitions bootstrap nothing.
    let y = agent.critic_targets(&b, &mut rng).unwrap();
    assert_eq!(y, b.rewards);
    // Non-terminal with zero discount.
    let mut b2 = b.clone();
    b2.not_done = vec![1.0; b2.len()];
    agent.config.gamma = 0.0;
    let y = agent.critic_targets(&b2, &mut rng).unwrap();
    assert_eq!(y, b.rewards);
}

fn pixel_setup(seed: u64) -> (SacAgent<f64>, RlBatch<f64>, Vec<f64>) {
    let side = 19;
    let enc = EncoderConfig { frames: 2, input_size: 15, single_frame_head: false };
    let mut cfg = SacConfig::new(2, Some(enc), 0);
    cfg.hidden = 32;
    let agent = SacAgent::<f64>::new(cfg, &mut stream(seed, Stream::Init)).unwrap();
    let mut rng = stream(seed, Stream::Env);
    let frames = |rng: &mut curl_core::rng::Rng| {
        FrameStack::new(2, side, side, (0..2 * side * side).map(|_| rng.random()).collect()).unwrap()
    };
    let mut buf = ReplayBuffer::new(32).unwrap();
    for _ in 0..16 {
        let o = frames(&mut rng);
        let n = frames(&mut rng);
        let a = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        buf.push(Transition::new(o, Action::Continuous(a), rng.random(), n, false));
    }
    let pb = buf.sample_rl_and_curl(8, 15, 8, RlView::Augmented, &mut rng).unwrap();
    let batch = RlBatch::from_pixels(&pb, agent.pair.as_ref(), false).unwrap();
    let targets = agent.critic_targets(&batch, &mut rng).unwrap();
    (agent, batch, targets)
}

#[test]
fn joint_gradient_is_sum_of_parts() {
    let (agent, batch, targets) = pixel_setup(3);
    let flags = UpdateFlags::default();
    let both = agent.encoder_gradients(&batch, &targets, &flags, LossParts::BOTH).unwrap();
    let rl = agent.encoder_gradients(&batch, &targets, &flags, LossParts { rl: true, curl: false }).unwrap();
    let curl = agent.encoder_gradients(&batch, &targets, &flags, LossParts { rl: false, curl: true }).unwrap();
    let mut max_err = 0.0f64;
    let mut max_mag = 0.0f64;
    for ((b, r), c) in both.iter().zip(&rl).zip(&curl) {
        for ((b, r), c) in b.iter().zip(r).zip(c) {
            max_err = max_err.max((b - r - c).abs());
            max_mag = max_mag.max(b.abs());
        }
    }
    assert!(max_mag > 0.0);
    assert!(max_err <= 1e-10 * max_mag.max(1.0), "err {max_err} vs scale {max_mag}");
}

#[test]
fn detached_encoder_gets_no_rl_gradient_in_conv() {
    let (agent, batch, targets) = pixel_setup(4);
    let flags = UpdateFlags { detach_encoder: true, ..Default::default() };
    let rl = agent.encoder_gradients(&batch, &targets, &flags, LossParts { rl: true, curl: false }).unwrap();
    let pair = agent.pair.as_ref().unwrap();
    let mut head_grad = 0.0f64;
    for ((_, name, _), g) in pair.query.iter().zip(&rl) {
        let norm: f64 = g.iter().map(|x| x * x).sum();
        if name.starts_with("encoder.conv") {
            assert_eq!(norm, 0.0, "{name} received RL gradient");
        } else {
            head_grad += norm;
        }
    }
    assert!(head_grad > 0.0, "projection head should still train from the critic");
    // The contrastive term still reaches the trunk.
    let both = agent.encoder_gradients(&batch, &targets, &flags, LossParts::BOTH).unwrap();
    let conv: f64 = pair
        .query
        .iter()
        .zip(&both)
        .filter(|((_, n, _), _)| n.starts_with("encoder.conv"))
        .flat_map(|(_, g)| g.iter().map(|x| x * x))
        .sum();
    assert!(conv > 0.0);
}
