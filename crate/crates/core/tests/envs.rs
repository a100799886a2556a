//! Environment oracles: BFS on the grid, bounds, renderer purity.

use std::collections::VecDeque;

use curl_core::envs::{grid_move, grid_optimal_actions, pointmass, render, Env, EnvConfig, EnvId, EnvState, GRID_MOVES};
use curl_core::replay::Action;
use curl_core::rng::{stream, Stream};
use proptest::prelude::*;

/// BFS distances from every cell to `target`.
fn bfs(target: [usize; 2], size: usize) -> Vec<Vec<usize>> {
    let mut dist = vec![vec![usize::MAX; size]; size];
    dist[target[0]][target[1]] = 0;
    let mut queue = VecDeque::from([target]);
    while let Some(c) = queue.pop_front() {
        for a in 0..GRID_MOVES.len() {
            let n = grid_move(c, a, size);
            if dist[n[0]][n[1]] == usize::MAX {
                dist[n[0]][n[1]] = dist[c[0]][c[1]] + 1;
                queue.push_back(n);
            }
        }
    }
    dist
}

#[test]
fn greedy_policy_captures_within_8_steps() {
    let size = 5;
    let mut rng = stream(0, Stream::Env);
    let config = EnvConfig { action_repeat: 1, episode_length: 100, ..EnvConfig::new(EnvId::GridChase) };
    let mut env = Env::new(config, &mut rng).unwrap();
    for agent in (0..size).flat_map(|r| (0..size).map(move |c| [r, c])) {
        for target in (0..size).flat_map(|r| (0..size).map(move |c| [r, c])) {
            if agent == target {
                continue;
            }
            let dist = bfs(target, size);
            let stack = env.observation().clone();
            env.set_state(EnvState::GridChase { agent, target, size }, stack, 0).unwrap();
            let mut steps = 0;
            let mut here = agent;
            loop {
                let a = grid_optimal_actions(here, target, size)[0];
                let out = env.step(&Action::Discrete(a)).unwrap();
                steps += 1;
                let EnvState::GridChase { agent: now, .. } = out.state else { unreachable!() };
                here = now;
                if out.terminal {
                    assert_eq!(out.reward, 1.0);
                    break;
                }
            }
            assert_eq!(steps, dist[agent[0]][agent[1]]);
            assert!(steps <= 8);
        }
    }
}

#[test]
fn pointmass_stays_in_arena() {
    let mut rng = stream(1, Stream::Env);
    let mut env = Env::new(EnvConfig::new(EnvId::PointMass), &mut rng).unwrap();
    for i in 0..10_000 {
        let (_, s) = env.reset(&mut rng);
        let EnvState::PointMass { pos, .. } = s else { unreachable!() };
        assert!(pos.iter().all(|p| p.abs() <= pointmass::ARENA));
        if i % 100 == 0 {
            for _ in 0..30 {
                let a = Action::Continuous(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                let out = env.step(&a).unwrap();
                let EnvState::PointMass { pos, .. } = out.state else { unreachable!() };
                assert!(pos.iter().all(|p| p.abs() <= pointmass::ARENA));
                assert!((0.0..=4.0).contains(&out.reward));
            }
        }
    }
}

#[test]
fn pendulum_speed_is_capped() {
    let mut rng = stream(2, Stream::Env);
    let mut env = Env::new(EnvConfig::new(EnvId::Pendulum), &mut rng).unwrap();
    for _ in 0..2000 {
        let out = env.step(&Action::Continuous(vec![1.0])).unwrap();
        let EnvState::Pendulum { velocity, angle } = out.state else { unreachable!() };
        assert!(velocity.abs() <= curl_core::envs::pendulum::MAX_SPEED);
        assert!(angle > -std::f64::consts::PI && angle <= std::f64::consts::PI);
        if out.done() {
            env.reset(&mut rng);
        }
    }
}

proptest! {
    #[test]
    fn different_positions_render_differently(a in prop::array::uniform2(-0.9f64..0.9), b in prop::array::uniform2(-0.9f64..0.9)) {
        prop_assume!((a[0] - b[0]).abs() + (a[1] - b[1]).abs() > 0.2);
        let s = |pos| EnvState::PointMass { pos, vel: [0.0; 2], goal: [0.0, 0.0] };
        prop_assert_ne!(render(&s(a), 50), render(&s(b), 50));
    }

    #[test]
    fn state_vector_round_trips(pos in prop::array::uniform2(-1.0f64..1.0), vel in prop::array::uniform2(-5.0f64..5.0), goal in prop::array::uniform2(-0.8f64..0.8)) {
        let s = EnvState::PointMass { pos, vel, goal };
        prop_assert_eq!(EnvState::from_vector(EnvId::PointMass, &s.to_vector(), 5).unwrap(), s);
    }
}
