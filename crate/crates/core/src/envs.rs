//! Procedurally rendered pixel-control environments.
//!
//! * `pointmass`: drive a damped point onto a goal in `[-1, 1]^2`.
//! * `pendulum`: torque-limited swing-up; angle 0 is upright, `pi` hangs down.
//! * `gridchase`: discrete moves on an `N x N` grid toward a fixed target.
//!
//! Frames are grayscale, black background; observations stack the last `S`
//! frames.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;

use crate::augment::FrameStack;
use crate::error::{Error, Result};
use crate::replay::Action;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvId {
    PointMass,
    Pendulum,
    GridChase,
}

impl EnvId {
    pub const ALL: [EnvId; 3] = [EnvId::PointMass, EnvId::Pendulum, EnvId::GridChase];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::PointMass => "pointmass",
            EnvId::Pendulum => "pendulum",
            EnvId::GridChase => "gridchase",
        }
    }

    pub fn action_space(self) -> ActionSpace {
        match self {
            EnvId::PointMass => ActionSpace::Continuous { dim: 2 },
            EnvId::Pendulum => ActionSpace::Continuous { dim: 1 },
            EnvId::GridChase => ActionSpace::Discrete { n: 4 },
        }
    }

    /// Length of [`EnvState::to_vector`] for this env.
    pub fn state_dim(self) -> usize {
        match self {
            EnvId::PointMass => 6,
            EnvId::Pendulum => 2,
            EnvId::GridChase => 4,
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown env id `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Continuous { dim: usize },
    Discrete { n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvConfig {
    pub id: EnvId,
    pub render_size: usize,
    pub frame_stack: usize,
    pub action_repeat: usize,
    /// Interaction steps per episode.
    pub episode_length: usize,
    pub grid_size: usize,
}

impl EnvConfig {
    pub fn new(id: EnvId) -> Self {
        let (frame_stack, action_repeat) = match id {
            EnvId::GridChase => (4, 1),
            _ => (3, 4),
        };
        Self { id, render_size: 50, frame_stack, action_repeat, episode_length: 100, grid_size: 5 }
    }

    pub fn validate(&self, crop: usize) -> Result<()> {
        if self.render_size < crop {
            return Err(Error::InvalidArgument(format!("render size {} below crop {crop}", self.render_size)));
        }
        if self.frame_stack == 0 || self.action_repeat == 0 || self.episode_length == 0 {
            return Err(Error::InvalidArgument("frame stack, action repeat and episode length must be >= 1".into()));
        }
        if self.id == EnvId::GridChase && (self.grid_size < 2 || self.grid_size > self.render_size) {
            return Err(Error::InvalidArgument(format!("grid size {} invalid for render {}", self.grid_size, self.render_size)));
        }
        Ok(())
    }
}

/// Ground-truth simulator state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvState {
    PointMass { pos: [f64; 2], vel: [f64; 2], goal: [f64; 2] },
    Pendulum { angle: f64, velocity: f64 },
    GridChase { agent: [usize; 2], target: [usize; 2], size: usize },
}

impl EnvState {
    pub fn id(&self) -> EnvId {
        match self {
            EnvState::PointMass { .. } => EnvId::PointMass,
            EnvState::Pendulum { .. } => EnvId::Pendulum,
            EnvState::GridChase { .. } => EnvId::GridChase,
        }
    }

    /// Fixed-order flattening: pointmass `[px, py, vx, vy, gx, gy]`,
    /// pendulum `[angle, velocity]`, gridchase `[agent_row, agent_col,
    /// target_row, target_col]`.
    pub fn to_vector(&self) -> Vec<f64> {
        match *self {
            EnvState::PointMass { pos, vel, goal } => vec![pos[0], pos[1], vel[0], vel[1], goal[0], goal[1]],
            EnvState::Pendulum { angle, velocity } => vec![angle, velocity],
            EnvState::GridChase { agent, target, .. } => {
                vec![agent[0] as f64, agent[1] as f64, target[0] as f64, target[1] as f64]
            }
        }
    }

    pub fn from_vector(id: EnvId, v: &[f64], grid_size: usize) -> Result<Self> {
        if v.len() != id.state_dim() {
            return Err(Error::InvalidArgument(format!("{id} state has {} entries, got {}", id.state_dim(), v.len())));
        }
        Ok(match id {
            EnvId::PointMass => EnvState::PointMass { pos: [v[0], v[1]], vel: [v[2], v[3]], goal: [v[4], v[5]] },
            EnvId::Pendulum => EnvState::Pendulum { angle: v[0], velocity: v[1] },
            EnvId::GridChase => {
                let cell = |x: f64| -> Result<usize> {
                    if x >= 0.0 && libm::trunc(x) == x && (x as usize) < grid_size {
                        Ok(x as usize)
                    } else {
                        Err(Error::InvalidArgument(format!("grid coordinate {x} outside 0..{grid_size}")))
                    }
                };
                EnvState::GridChase {
                    agent: [cell(v[0])?, cell(v[1])?],
                    target: [cell(v[2])?, cell(v[3])?],
                    size: grid_size,
                }
            }
        })
    }
}

// ---- physics -------------------------------------------------------------

pub mod pointmass {
    pub const ARENA: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const ACCEL: f64 = 4.0;
    pub const DAMPING: f64 = 2.0;
    pub const RADIUS: f64 = 0.15;
}

pub mod pendulum {
    pub const DT: f64 = 0.05;
    pub const GRAVITY: f64 = 10.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const BOB_RADIUS: f64 = 0.2;
    pub const ROD_LENGTH: f64 = 0.7;
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = libm::fmod(a + PI, 2.0 * PI);
    if x < 0.0 {
        x += 2.0 * PI;
    }
    let w = x - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}

/// Per-substep reward, always in `[0, 1]`.
pub fn reward(state: &EnvState) -> f64 {
    match *state {
        EnvState::PointMass { pos, goal, .. } => 1.0 - dist(pos, goal).min(1.0),
        EnvState::Pendulum { angle, .. } => (1.0 + libm::cos(angle)) / 2.0,
        EnvState::GridChase { agent, target, .. } => f64::from(u8::from(agent == target)),
    }
}

/// Discrete grid moves: up, down, left, right.
pub const GRID_MOVES: [[isize; 2]; 4] = [[-1, 0], [1, 0], [0, -1], [0, 1]];

pub fn grid_move(cell: [usize; 2], action: usize, size: usize) -> [usize; 2] {
    let d = GRID_MOVES[action];
    let clamp = |x: usize, dx: isize| (x as isize + dx).clamp(0, size as isize - 1) as usize;
    [clamp(cell[0], d[0]), clamp(cell[1], d[1])]
}

/// Advances one environment substep. Continuous actions are clipped to
/// `[-1, 1]`.
fn substep(state: &mut EnvState, action: &Action) -> Result<()> {
    match state {
        EnvState::PointMass { pos, vel, .. } => {
            let a = action
                .as_continuous()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| Error::InvalidArgument("pointmass expects a 2-d continuous action".into()))?;
            use pointmass::*;
            for i in 0..2 {
                let u = f64::from(a[i]).clamp(-1.0, 1.0);
                vel[i] += (ACCEL * u - DAMPING * vel[i]) * DT;
                pos[i] += vel[i] * DT;
                if pos[i].abs() > ARENA {
                    pos[i] = pos[i].clamp(-ARENA, ARENA);
                    vel[i] = 0.0;
                }
            }
        }
        EnvState::Pendulum { angle, velocity } => {
            let a = action
                .as_continuous()
                .filter(|a| a.len() == 1)
                .ok_or_else(|| Error::InvalidArgument("pendulum expects a 1-d continuous action".into()))?;
            use pendulum::*;
            let u = f64::from(a[0]).clamp(-1.0, 1.0) * MAX_TORQUE;
            let acc = 1.5 * GRAVITY * libm::sin(*angle) + 3.0 * u;
            *velocity = (*velocity + acc * DT).clamp(-MAX_SPEED, MAX_SPEED);
            *angle = wrap_angle(*angle + *velocity * DT);
        }
        EnvState::GridChase { agent, size, .. } => {
            let a = action
                .as_discrete()
                .ok_or_else(|| Error::InvalidArgument("gridchase expects a discrete action".into()))?;
            if a >= GRID_MOVES.len() {
                return Err(Error::InvalidAction { action: a, num_actions: GRID_MOVES.len() });
            }
            *agent = grid_move(*agent, a, *size);
        }
    }
    Ok(())
}

fn is_terminal(state: &EnvState) -> bool {
    matches!(state, EnvState::GridChase { agent, target, .. } if agent == target)
}

// ---- rendering -------------------------------------------------------------

fn to_pixel(coord: f64, size: usize) -> f64 {
    (coord + 1.0) / 2.0 * size as f64
}

fn fill_circle(frame: &mut [u8], size: usize, center: [f64; 2], radius: f64, value: u8) {
    // `center` is (x, y) in arena units with y pointing up.
    let cx = to_pixel(center[0], size);
    let cy = to_pixel(-center[1], size);
    let r = radius / 2.0 * size as f64;
    let lo = |c: f64| libm::floor(c - r).max(0.0) as usize;
    let hi = |c: f64| (libm::ceil(c + r) as usize).min(size);
    for row in lo(cy)..hi(cy) {
        for col in lo(cx)..hi(cx) {
            let dx = col as f64 + 0.5 - cx;
            let dy = row as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                frame[row * size + col] = value;
            }
        }
    }
}

fn fill_cell(frame: &mut [u8], size: usize, grid: usize, cell: [usize; 2], value: u8) {
    let px = size / grid;
    let offset = (size - px * grid) / 2;
    for row in 0..px {
        for col in 0..px {
            frame[(offset + cell[0] * px + row) * size + offset + cell[1] * px + col] = value;
        }
    }
}

/// Rasterizes one grayscale frame of `size x size` pixels.
pub fn render(state: &EnvState, size: usize) -> Vec<u8> {
    let mut frame = vec![0u8; size * size];
    match *state {
        EnvState::PointMass { pos, goal, .. } => {
            fill_circle(&mut frame, size, goal, pointmass::RADIUS, 110);
            fill_circle(&mut frame, size, pos, pointmass::RADIUS, 255);
        }
        EnvState::Pendulum { angle, .. } => {
            use pendulum::*;
            let tip = |len: f64| [len * libm::sin(angle), len * libm::cos(angle)];
            let steps = 12;
            for i in 0..=steps {
                let p = tip(ROD_LENGTH * i as f64 / steps as f64);
                fill_circle(&mut frame, size, p, 0.06, 150);
            }
            fill_circle(&mut frame, size, tip(ROD_LENGTH), BOB_RADIUS, 255);
        }
        EnvState::GridChase { agent, target, size: grid } => {
            fill_cell(&mut frame, size, grid, target, 110);
            fill_cell(&mut frame, size, grid, agent, 255);
        }
    }
    frame
}

// ---- environment -------------------------------------------------------------

/// Result of one interaction step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: FrameStack,
    /// Sum of substep rewards.
    pub reward: f64,
    /// True terminal state; the bootstrap is masked.
    pub terminal: bool,
    /// Episode ended on the step limit.
    pub truncated: bool,
    pub state: EnvState,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    state: EnvState,
    stack: FrameStack,
    episode_step: usize,
    interaction_steps: u64,
    env_steps: u64,
}

fn initial_state(config: &EnvConfig, rng: &mut Rng) -> EnvState {
    match config.id {
        EnvId::PointMass => {
            let mut u = |lim: f64| rng.random_range(-lim..lim);
            EnvState::PointMass { pos: [u(0.9), u(0.9)], vel: [0.0, 0.0], goal: [u(0.8), u(0.8)] }
        }
        EnvId::Pendulum => EnvState::Pendulum {
            angle: wrap_angle(rng.random_range(-PI..PI)),
            velocity: rng.random_range(-1.0..1.0),
        },
        EnvId::GridChase => {
            let n = config.grid_size;
            let target = [rng.random_range(0..n), rng.random_range(0..n)];
            let agent = loop {
                let a = [rng.random_range(0..n), rng.random_range(0..n)];
                if a != target {
                    break a;
                }
            };
            EnvState::GridChase { agent, target, size: n }
        }
    }
}

impl Env {
    /// Builds and resets an environment.
    pub fn new(config: EnvConfig, rng: &mut Rng) -> Result<Self> {
        config.validate(1)?;
        let state = initial_state(&config, rng);
        let stack = FrameStack::repeated(&render(&state, config.render_size), config.frame_stack, config.render_size, config.render_size)?;
        Ok(Self { config, state, stack, episode_step: 0, interaction_steps: 0, env_steps: 0 })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn observation(&self) -> &FrameStack {
        &self.stack
    }

    pub fn true_state(&self) -> Vec<f64> {
        self.state.to_vector()
    }

    pub fn interaction_steps(&self) -> u64 {
        self.interaction_steps
    }

    /// Nominal environment steps: interaction steps times action repeat.
    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episode_step(&self) -> usize {
        self.episode_step
    }

    /// Samples a fresh initial state; the stack holds `S` copies of its frame.
    pub fn reset(&mut self, rng: &mut Rng) -> (FrameStack, EnvState) {
        self.state = initial_state(&self.config, rng);
        self.episode_step = 0;
        let n = self.config.render_size;
        self.stack = FrameStack::repeated(&render(&self.state, n), self.config.frame_stack, n, n)
            .expect("render size matches the frame stack");
        (self.stack.clone(), self.state)
    }

    /// Places the environment in a given state (frames are re-rendered).
    pub fn set_state(&mut self, state: EnvState, stack: FrameStack, episode_step: usize) -> Result<()> {
        if state.id() != self.config.id || stack.height() != self.config.render_size || stack.frames() != self.config.frame_stack {
            return Err(Error::InvalidArgument("state does not match environment config".into()));
        }
        self.state = state;
        self.stack = stack;
        self.episode_step = episode_step;
        Ok(())
    }

    pub fn set_counters(&mut self, interaction_steps: u64) {
        self.interaction_steps = interaction_steps;
        self.env_steps = interaction_steps * self.config.action_repeat as u64;
    }

    /// Repeats `action` for `action_repeat` substeps, summing rewards and
    /// stopping early on a terminal state.
    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        let mut total = 0.0;
        let mut terminal = false;
        for _ in 0..self.config.action_repeat {
            substep(&mut self.state, action)?;
            total += reward(&self.state);
            if is_terminal(&self.state) {
                terminal = true;
                break;
            }
        }
        self.episode_step += 1;
        self.interaction_steps += 1;
        self.env_steps += self.config.action_repeat as u64;
        let frame = render(&self.state, self.config.render_size);
        self.stack.push_frame(&frame)?;
        let truncated = !terminal && self.episode_step >= self.config.episode_length;
        Ok(StepOutcome { obs: self.stack.clone(), reward: total, terminal, truncated, state: self.state })
    }
}

/// Actions on a 5x5 (or any) grid that reduce Manhattan distance to the
/// target; the optimal set for gridchase.
pub fn grid_optimal_actions(agent: [usize; 2], target: [usize; 2], size: usize) -> Vec<usize> {
    let manhattan = |a: [usize; 2]| a[0].abs_diff(target[0]) + a[1].abs_diff(target[1]);
    let d = manhattan(agent);
    (0..GRID_MOVES.len()).filter(|&a| manhattan(grid_move(agent, a, size)) < d).collect()
}

/// Describes an env for logs.
pub fn describe(config: &EnvConfig) -> String {
    format!(
        "{} render={} stack={} repeat={} episode={}",
        config.id, config.render_size, config.frame_stack, config.action_repeat, config.episode_length
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn env_ids_round_trip() {
        for id in EnvId::ALL {
            assert_eq!(id.as_str().parse::<EnvId>().unwrap(), id);
        }
        assert!("cartpole".parse::<EnvId>().is_err());
    }

    #[test]
    fn reset_is_deterministic_and_stack_repeats_first_frame() {
        for id in EnvId::ALL {
            let cfg = EnvConfig::new(id);
            let mut a = Env::new(cfg, &mut stream(3, Stream::Env)).unwrap();
            let mut b = Env::new(cfg, &mut stream(3, Stream::Env)).unwrap();
            let (sa, xa) = a.reset(&mut stream(9, Stream::Env));
            let (sb, xb) = b.reset(&mut stream(9, Stream::Env));
            assert_eq!(sa, sb);
            assert_eq!(xa, xb);
            for f in 1..sa.frames() {
                assert_eq!(sa.frame(f), sa.frame(0));
            }
        }
    }

    #[test]
    fn pointmass_rest_is_fixed_point() {
        let cfg = EnvConfig::new(EnvId::PointMass);
        let mut env = Env::new(cfg, &mut stream(0, Stream::Env)).unwrap();
        let start = EnvState::PointMass { pos: [0.2, -0.1], vel: [0.0, 0.0], goal: [0.5, 0.3] };
        let stack = FrameStack::repeated(&render(&start, 50), 3, 50, 50).unwrap();
        env.set_state(start, stack, 0).unwrap();
        let out = env.step(&Action::Continuous(vec![0.0, 0.0])).unwrap();
        assert_eq!(out.state, start);
        let per_step = 1.0 - libm::hypot(0.3, 0.4);
        assert!((out.reward - 4.0 * per_step).abs() < 1e-12);
    }

    #[test]
    fn action_repeat_advances_env_steps() {
        let cfg = EnvConfig::new(EnvId::Pendulum);
        let mut env = Env::new(cfg, &mut stream(0, Stream::Env)).unwrap();
        for i in 1..=5 {
            env.step(&Action::Continuous(vec![0.3])).unwrap();
            assert_eq!(env.env_steps(), 4 * i);
            assert_eq!(env.interaction_steps(), i);
        }
    }

    #[test]
    fn out_of_range_actions() {
        let mut env = Env::new(EnvConfig::new(EnvId::GridChase), &mut stream(0, Stream::Env)).unwrap();
        assert_eq!(env.step(&Action::Discrete(4)).unwrap_err(), Error::InvalidAction { action: 4, num_actions: 4 });
        let mut env = Env::new(EnvConfig::new(EnvId::PointMass), &mut stream(0, Stream::Env)).unwrap();
        let s0 = *env.state();
        let mut clipped = env.clone();
        env.step(&Action::Continuous(vec![5.0, -7.0])).unwrap();
        clipped.step(&Action::Continuous(vec![1.0, -1.0])).unwrap();
        assert_eq!(env.state(), clipped.state());
        assert_ne!(*env.state(), s0);
    }

    #[test]
    fn background_is_black_and_render_is_pure() {
        let s = EnvState::PointMass { pos: [0.9, 0.9], vel: [0.0, 0.0], goal: [0.7, 0.7] };
        let f = render(&s, 50);
        assert_eq!(f, render(&s, 50));
        // bottom-left corner is far from both sprites
        assert_eq!(f[49 * 50], 0);
        assert!(f.iter().any(|&p| p == 255));
    }

    #[test]
    fn pendulum_down_convention() {
        let s = EnvState::Pendulum { angle: PI, velocity: 0.0 };
        assert_eq!(s.to_vector(), vec![PI, 0.0]);
        assert_eq!(reward(&s), 0.0);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn state_vectors_decode() {
        for id in EnvId::ALL {
            let env = Env::new(EnvConfig::new(id), &mut stream(4, Stream::Env)).unwrap();
            let v = env.true_state();
            assert_eq!(v.len(), id.state_dim());
            assert_eq!(EnvState::from_vector(id, &v, 5).unwrap(), *env.state());
        }
        assert!(EnvState::from_vector(EnvId::GridChase, &[0.0, 5.0, 1.0, 1.0], 5).is_err());
    }

    #[test]
    fn gridchase_capture_is_terminal() {
        let cfg = EnvConfig::new(EnvId::GridChase);
        let mut env = Env::new(cfg, &mut stream(0, Stream::Env)).unwrap();
        let s = EnvState::GridChase { agent: [0, 0], target: [0, 1], size: 5 };
        env.set_state(s, FrameStack::repeated(&render(&s, 50), 4, 50, 50).unwrap(), 0).unwrap();
        let out = env.step(&Action::Discrete(3)).unwrap();
        assert!(out.terminal && out.done());
        assert_eq!(out.reward, 1.0);
    }

    #[test]
    fn truncation_after_episode_length() {
        let mut cfg = EnvConfig::new(EnvId::Pendulum);
        cfg.episode_length = 3;
        let mut env = Env::new(cfg, &mut stream(0, Stream::Env)).unwrap();
        let outs: Vec<bool> = (0..3).map(|_| env.step(&Action::Continuous(vec![0.0])).unwrap().truncated).collect();
        assert_eq!(outs, [false, false, true]);
    }
}
