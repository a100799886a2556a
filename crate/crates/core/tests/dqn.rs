//! Double DQN on gridchase true state against a value-iteration oracle.

use curl_core::agents::dqn::double_q_targets;
use curl_core::agents::{DqnAgent, DqnConfig, ObsBatch, RlBatch, UpdateFlags};
use curl_core::envs::{grid_move, Env, EnvConfig, EnvId, GRID_MOVES};
use curl_core::replay::{Action, ReplayBuffer, Transition};
use curl_core::rng::{stream, Stream};
use rand::Rng as _;

type Cell = [usize; 2];

fn cells(size: usize) -> impl Iterator<Item = Cell> + Clone {
    (0..size).flat_map(move |r| (0..size).map(move |c| [r, c]))
}

/// Optimal action sets from value iteration on `(agent, target)` pairs.
/// Entering the target pays 1 and ends the episode.
fn value_iteration(size: usize, gamma: f64) -> Vec<(Cell, Cell, Vec<usize>)> {
    let idx = |a: Cell, t: Cell| ((a[0] * size + a[1]) * size + t[0]) * size + t[1];
    let mut v = vec![0.0f64; size.pow(4)];
    let q = |v: &[f64], a: Cell, t: Cell, act: usize| {
        let n = grid_move(a, act, size);
        if n == t {
            1.0
        } else {
            gamma * v[idx(n, t)]
        }
    };
    for _ in 0..100 {
        let mut next = v.clone();
        for a in cells(size) {
            for t in cells(size).filter(|&t| t != a) {
                next[idx(a, t)] = (0..GRID_MOVES.len()).map(|k| q(&v, a, t, k)).fold(f64::MIN, f64::max);
            }
        }
        v = next;
    }
    let mut out = Vec::new();
    for a in cells(size) {
        for t in cells(size).filter(|&t| t != a) {
            let qs: Vec<f64> = (0..GRID_MOVES.len()).map(|k| q(&v, a, t, k)).collect();
            let best = qs.iter().copied().fold(f64::MIN, f64::max);
            out.push((a, t, (0..qs.len()).filter(|&k| qs[k] > best - 1e-9).collect()));
        }
    }
    out
}

#[test]
fn value_iteration_moves_toward_target() {
    // Any move that shortens the Manhattan distance is optimal, and only those.
    for (a, t, best) in value_iteration(5, 0.9) {
        let d = |c: Cell| c[0].abs_diff(t[0]) + c[1].abs_diff(t[1]);
        let shorter: Vec<usize> = (0..4).filter(|&k| d(grid_move(a, k, 5)) < d(a)).collect();
        assert_eq!(best, shorter, "agent {a:?} target {t:?}");
    }
}

#[test]
fn double_q_target_uses_online_argmax() {
    // Online picks action 1; the target net's value for action 1 is used.
    let y = double_q_targets(&[0.5f64], &[1.0], &[1], &[0.0, 2.0, 1.0], &[9.0, 3.0, 7.0], 3, 0.9);
    assert!((y[0] - (0.5 + 0.9 * 3.0)).abs() < 1e-12);
    let y = double_q_targets(&[0.5f64], &[1.0], &[3], &[0.0, 2.0, 1.0], &[9.0, 3.0, 7.0], 3, 0.9);
    assert!((y[0] - (0.5 + 0.729 * 3.0)).abs() < 1e-12);
    let y = double_q_targets(&[0.5f64], &[0.0], &[1], &[0.0, 2.0, 1.0], &[9.0, 3.0, 7.0], 3, 0.9);
    assert_eq!(y, [0.5]);
}

/// Trains double DQN from random-policy replay and returns the fraction of
/// states where the greedy action is optimal.
fn gridchase_agreement(seed: u64) -> f64 {
    let size = 5;
    let gamma = 0.9;
    let mut env_rng = stream(seed, Stream::Env);
    let mut rng = stream(seed, Stream::Agent);
    let config = EnvConfig { episode_length: 50, ..EnvConfig::new(EnvId::GridChase) };
    let mut env = Env::new(config, &mut env_rng).unwrap();
    let mut buf = ReplayBuffer::new(20_000).unwrap();
    let state = |env: &Env| env.true_state().into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let mut obs = state(&env);
    while buf.len() < buf.capacity() {
        let a = rng.random_range(0..GRID_MOVES.len());
        let out = env.step(&Action::Discrete(a)).unwrap();
        let next = state(&env);
        buf.push(Transition::new(obs.clone(), Action::Discrete(a), out.reward as f32, next.clone(), out.terminal));
        obs = if out.done() {
            env.reset(&mut env_rng);
            state(&env)
        } else {
            next
        };
    }

    let mut cfg = DqnConfig::new(GRID_MOVES.len(), None, 4);
    cfg.gamma = gamma;
    cfg.n_step = 1;
    cfg.lr = 1e-3;
    cfg.target_update_period = 250;
    let mut agent = DqnAgent::<f32>::new(cfg, &mut stream(seed, Stream::Init)).unwrap();
    for _ in 0..8000 {
        let b = buf.sample(128, 128, &mut rng).unwrap();
        agent.update(&RlBatch::from_states(&b), &UpdateFlags::default()).unwrap();
    }

    let oracle = value_iteration(size, gamma);
    let states: Vec<Vec<f32>> =
        oracle.iter().map(|(a, t, _)| [a[0], a[1], t[0], t[1]].iter().map(|&x| x as f32).collect()).collect();
    let refs: Vec<&[f32]> = states.iter().map(Vec::as_slice).collect();
    let greedy = agent.greedy(&ObsBatch::from_states(&refs)).unwrap();
    let hits = oracle.iter().zip(&greedy).filter(|((_, _, best), g)| best.contains(g)).count();
    hits as f64 / oracle.len() as f64
}

#[test]
fn dqn_matches_value_iteration_on_5x5() {
    let frac = gridchase_agreement(0);
    assert!(frac >= 0.95, "greedy matches the optimal policy on {:.1}% of states", 100.0 * frac);
}
