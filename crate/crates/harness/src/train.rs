//! Training loop, evaluation protocol and resumable run state.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use curl_core::agents::{DqnAgent, EpsilonSchedule, ObsBatch, RlBatch, SacAgent, UpdateFlags, UpdateMetrics};
use curl_core::augment::{center_crop_stack, random_crop_stack, FrameStack};
use curl_core::envs::{ActionSpace, Env, EnvState};
use curl_core::replay::{Action, NStepAccumulator, ReplayBuffer, RlView, Transition};
use curl_core::rng::{stream, substream, Rng, RngState, Stream};
use rand::Rng as _;

use crate::checkpoint::{self, Entry, Reader, Writer};
use crate::config::{AgentKind, ExperimentConfig};
use crate::metrics::{self, mean_std, Mean, MetricsRow};
use crate::pgm;

/// A trained or training agent.
#[derive(Debug, Clone)]
pub enum Agent {
    Sac(SacAgent<f32>),
    Dqn(DqnAgent<f32>),
}

impl Agent {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let mut rng = stream(config.seed, Stream::Init);
        let mut agent = match config.agent {
            AgentKind::Sac | AgentKind::StateSacOracle => Agent::Sac(SacAgent::new(config.sac_config(), &mut rng).map_err(|e| anyhow!("{e}"))?),
            AgentKind::Dqn => Agent::Dqn(DqnAgent::new(config.dqn_config(), &mut rng).map_err(|e| anyhow!("{e}"))?),
        };
        match &mut agent {
            Agent::Sac(a) => a.set_strict(config.train.strict),
            Agent::Dqn(a) => a.set_strict(config.train.strict),
        }
        Ok(agent)
    }

    pub fn entries(&self) -> Vec<Entry> {
        match self {
            Agent::Sac(a) => checkpoint::collect_entries(&a.named_sets(), &a.optimizers()),
            Agent::Dqn(a) => checkpoint::collect_entries(&a.named_sets(), &a.optimizers()),
        }
    }

    pub fn adam_steps(&self) -> Vec<(String, u64)> {
        let opts = match self {
            Agent::Sac(a) => a.optimizers().into_iter().map(|(n, o)| (n.to_string(), o.step_count())).collect(),
            Agent::Dqn(a) => a.optimizers().into_iter().map(|(n, o)| (n.to_string(), o.step_count())).collect(),
        };
        opts
    }

    pub fn load(&mut self, entries: &[Entry], adam_steps: Option<&[(String, u64)]>) -> Result<()> {
        match self {
            Agent::Sac(a) => {
                checkpoint::apply_entries(entries, &mut a.named_sets_mut(), &mut [], None)?;
                if let Some(steps) = adam_steps {
                    let layout: Vec<(String, ParamNames)> = a.named_sets().iter().map(|(n, s)| (n.to_string(), names_of(s))).collect();
                    restore_moments(entries, &layout, &mut a.optimizers_mut(), steps)?;
                }
            }
            Agent::Dqn(a) => {
                checkpoint::apply_entries(entries, &mut a.named_sets_mut(), &mut [], None)?;
                if let Some(steps) = adam_steps {
                    let layout: Vec<(String, ParamNames)> = a.named_sets().iter().map(|(n, s)| (n.to_string(), names_of(s))).collect();
                    restore_moments(entries, &layout, &mut a.optimizers_mut(), steps)?;
                }
            }
        }
        Ok(())
    }

    pub fn updates(&self) -> u64 {
        match self {
            Agent::Sac(a) => a.updates(),
            Agent::Dqn(a) => a.updates(),
        }
    }

    fn set_updates(&mut self, n: u64) {
        match self {
            Agent::Sac(a) => a.set_updates(n),
            Agent::Dqn(a) => a.set_updates(n),
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            Agent::Sac(a) => Some(a.alpha()),
            Agent::Dqn(_) => None,
        }
    }

    /// Encoder query parameters, when the agent has one.
    pub fn pair(&self) -> Option<&curl_core::contrastive::ContrastivePair<f32>> {
        match self {
            Agent::Sac(a) => a.pair.as_ref(),
            Agent::Dqn(a) => a.pair.as_ref(),
        }
    }
}

type ParamNames = Vec<String>;

fn names_of(set: &curl_core::autodiff::ParamSet<f32>) -> ParamNames {
    set.iter().map(|(_, n, _)| n.to_string()).collect()
}

fn restore_moments(
    entries: &[Entry],
    layout: &[(String, ParamNames)],
    opts: &mut [(&'static str, &mut curl_core::autodiff::Adam<f32>)],
    steps: &[(String, u64)],
) -> Result<()> {
    for (opt_name, opt) in opts.iter_mut() {
        let names = &layout.iter().find(|(n, _)| n == opt_name).with_context(|| format!("no set for optimizer {opt_name}"))?.1;
        let get = |kind: &str, p: &str| -> Result<Vec<f32>> {
            let key = format!("adam.{opt_name}.{kind}/{p}");
            Ok(entries.iter().find(|e| e.name == key).with_context(|| format!("checkpoint lacks `{key}`"))?.data.clone())
        };
        let m = names.iter().map(|p| get("m", p)).collect::<Result<Vec<_>>>()?;
        let v = names.iter().map(|p| get("v", p)).collect::<Result<Vec<_>>>()?;
        let step = steps.iter().find(|(n, _)| n == opt_name).map(|(_, s)| *s).with_context(|| format!("no step count for {opt_name}"))?;
        opt.restore(step, m, v).map_err(|e| anyhow!("{e}"))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Replay {
    Pixels(ReplayBuffer<FrameStack>),
    States(ReplayBuffer<Vec<f32>>),
}

impl Replay {
    fn len(&self) -> usize {
        match self {
            Replay::Pixels(r) => r.len(),
            Replay::States(r) => r.len(),
        }
    }
}

/// Observation handed to a policy.
pub enum PolicyInput {
    Pixels(FrameStack),
    State(Vec<f32>),
}

fn state_f32(env: &Env) -> Vec<f32> {
    env.true_state().into_iter().map(|x| x as f32).collect()
}

fn random_action(space: ActionSpace, rng: &mut Rng) -> Action {
    match space {
        ActionSpace::Continuous { dim } => Action::Continuous((0..dim).map(|_| rng.random_range(-1.0f32..=1.0)).collect()),
        ActionSpace::Discrete { n } => Action::Discrete(rng.random_range(0..n)),
    }
}

/// Policy action. `explore` samples (SAC) or applies `epsilon` (DQN).
pub fn policy_action(agent: &Agent, input: &PolicyInput, explore: bool, epsilon: f64, rng: &mut Rng) -> Result<Action> {
    let obs: ObsBatch<f32> = match input {
        PolicyInput::Pixels(s) => ObsBatch::from_stack(s).map_err(|e| anyhow!("{e}"))?,
        PolicyInput::State(v) => ObsBatch::from_states(&[v.as_slice()]),
    };
    match agent {
        Agent::Sac(a) => Ok(Action::Continuous(a.act(&obs, !explore, rng).map_err(|e| anyhow!("{e}"))?)),
        Agent::Dqn(a) => {
            let eps = if explore { epsilon } else { 0.0 };
            Ok(Action::Discrete(a.act(&obs, eps, rng).map_err(|e| anyhow!("{e}"))?[0]))
        }
    }
}

/// Runs `episodes` deterministic evaluation episodes on center-cropped
/// observations. Resets draw from `rng`.
pub fn evaluate_agent(agent: &Agent, config: &ExperimentConfig, episodes: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut env = Env::new(config.env_config(), rng).map_err(|e| anyhow!("{e}"))?;
    let crop = config.train.crop_size;
    let mut returns = Vec::with_capacity(episodes);
    let mut dummy = stream(0, Stream::Eval);
    for _ in 0..episodes {
        let (mut obs, _) = env.reset(rng);
        let mut total = 0.0;
        loop {
            let input = if config.agent.uses_pixels() {
                PolicyInput::Pixels(center_crop_stack(&obs, crop, crop).map_err(|e| anyhow!("{e}"))?)
            } else {
                PolicyInput::State(state_f32(&env))
            };
            let action = policy_action(agent, &input, false, 0.0, &mut dummy)?;
            let out = env.step(&action).map_err(|e| anyhow!("{e}"))?;
            total += out.reward;
            let done = out.done();
            obs = out.obs;
            if done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Per-row accumulators.
#[derive(Debug, Clone, Default)]
struct Accum {
    returns: Vec<f64>,
    curl_loss: Mean,
    curl_acc: Mean,
    critic_loss: Mean,
    actor_loss: Mean,
}

/// Counts of gradient updates, for 1:1 accounting checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub rl: u64,
    pub curl: u64,
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub agent: Agent,
    replay: Replay,
    nstep: Option<NStepAccumulator<FrameStack>>,
    env: Env,
    env_rng: Rng,
    agent_rng: Rng,
    aug_rng: Rng,
    interaction: u64,
    episode_return: f64,
    episodes_done: u64,
    accum: Accum,
    rows: Vec<MetricsRow>,
    last_row_at: Option<u64>,
    eval_round: u64,
    pub counts: UpdateCounts,
    started: Instant,
    wall_offset: f64,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut env_rng = stream(config.seed, Stream::Env);
        let env = Env::new(config.env_config(), &mut env_rng).map_err(|e| anyhow!("{e}"))?;
        let agent = Agent::new(&config)?;
        let cap = config.train.replay_capacity;
        let replay = if config.agent.uses_pixels() {
            Replay::Pixels(ReplayBuffer::new(cap).map_err(|e| anyhow!("{e}"))?)
        } else {
            Replay::States(ReplayBuffer::new(cap).map_err(|e| anyhow!("{e}"))?)
        };
        let nstep = (config.agent == AgentKind::Dqn)
            .then(|| NStepAccumulator::new(config.dqn.n_step, config.dqn.gamma as f32))
            .transpose()
            .map_err(|e| anyhow!("{e}"))?;
        Ok(Self {
            agent_rng: stream(config.seed, Stream::Agent),
            aug_rng: stream(config.seed, Stream::Augment),
            config,
            agent,
            replay,
            nstep,
            env,
            env_rng,
            interaction: 0,
            episode_return: 0.0,
            episodes_done: 0,
            accum: Accum::default(),
            rows: Vec::new(),
            last_row_at: None,
            eval_round: 0,
            counts: UpdateCounts::default(),
            started: Instant::now(),
            wall_offset: 0.0,
        })
    }

    pub fn total_interactions(&self) -> u64 {
        self.config.interaction_steps()
    }

    pub fn interaction(&self) -> u64 {
        self.interaction
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    pub fn metrics_csv(&self) -> String {
        metrics::to_csv(&self.rows)
    }

    fn eval_interval(&self) -> u64 {
        (self.config.train.eval_every / self.config.env.action_repeat as u64).max(1)
    }

    fn flags(&self) -> UpdateFlags {
        self.config.ablation
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_interactions())
    }

    /// Advances to interaction step `until` (clamped to the budget), writing
    /// every due metrics row, including the one at `until`.
    pub fn run_until(&mut self, until: u64) -> Result<()> {
        let until = until.min(self.total_interactions());
        loop {
            self.maybe_row()?;
            if self.interaction >= until {
                return Ok(());
            }
            self.step_once()?;
        }
    }

    fn maybe_row(&mut self) -> Result<()> {
        let t = self.interaction;
        let due = t % self.eval_interval() == 0 || t == self.total_interactions();
        if !due || self.last_row_at == Some(t) {
            return Ok(());
        }
        let mut rng = substream(self.config.seed, Stream::Eval, self.eval_round);
        let returns = evaluate_agent(&self.agent, &self.config, self.config.train.eval_episodes, &mut rng)?;
        let (mean, std) = mean_std(&returns);
        self.eval_round += 1;
        let a = &mut self.accum;
        let train_return = (!a.returns.is_empty()).then(|| mean_std(&a.returns).0);
        a.returns.clear();
        let wall_s = if self.config.train.record_wall_clock { self.wall_offset + self.started.elapsed().as_secs_f64() } else { 0.0 };
        let row = MetricsRow {
            env_step: t * self.config.env.action_repeat as u64,
            interaction_step: t,
            train_return,
            eval_mean: Some(mean),
            eval_std: Some(std),
            curl_loss: a.curl_loss.take(),
            curl_acc: a.curl_acc.take(),
            critic_loss: a.critic_loss.take(),
            actor_loss: a.actor_loss.take(),
            alpha: self.agent.alpha(),
            wall_s,
        };
        log::info!(
            "{} step {} eval {:.3} +- {:.3} critic {:?} curl {:?}/{:?}",
            self.config.env.id,
            row.env_step,
            mean,
            std,
            row.critic_loss,
            row.curl_loss,
            row.curl_acc
        );
        self.rows.push(row);
        self.last_row_at = Some(t);
        Ok(())
    }

    fn rl_view(&self) -> RlView {
        if self.config.ablation.no_aug_rl {
            RlView::Center
        } else {
            RlView::Augmented
        }
    }

    fn policy_input(&mut self) -> Result<PolicyInput> {
        if !self.config.agent.uses_pixels() {
            return Ok(PolicyInput::State(state_f32(&self.env)));
        }
        let crop = self.config.train.crop_size;
        let obs = self.env.observation();
        let cropped = match self.rl_view() {
            RlView::Augmented => random_crop_stack(obs, crop, crop, &mut self.aug_rng).map_err(|e| anyhow!("{e}"))?.0,
            RlView::Center => center_crop_stack(obs, crop, crop).map_err(|e| anyhow!("{e}"))?,
        };
        Ok(PolicyInput::Pixels(cropped))
    }

    fn epsilon(&self) -> f64 {
        let d = &self.config.dqn;
        EpsilonSchedule { start: d.eps_start, end: d.eps_end, decay_steps: d.eps_decay_steps }.value(self.interaction)
    }

    fn step_once(&mut self) -> Result<()> {
        let warmup = self.interaction < self.config.train.initial_steps;
        let action = if warmup {
            random_action(self.config.env.id.action_space(), &mut self.agent_rng)
        } else {
            let input = self.policy_input()?;
            let eps = self.epsilon();
            policy_action(&self.agent, &input, true, eps, &mut self.agent_rng)?
        };
        let obs = self.env.observation().clone();
        let state = state_f32(&self.env);
        let out = self.env.step(&action).map_err(|e| anyhow!("{e}"))?;
        if !self.config.train.frame_dump.is_empty() && self.episodes_done == 0 {
            let dir = Path::new(&self.config.train.frame_dump);
            let f = out.obs.frame(out.obs.frames() - 1);
            pgm::write_pgm(&dir.join(format!("frame_{:05}.pgm", self.interaction)), out.obs.width(), out.obs.height(), f)?;
        }
        self.episode_return += out.reward;
        let reward = out.reward as f32;
        match &mut self.replay {
            Replay::Pixels(r) => {
                let t = Transition::new(obs, action, reward, out.obs.clone(), out.terminal);
                match &mut self.nstep {
                    Some(acc) => acc.push(t, out.done()).into_iter().for_each(|t| r.push(t)),
                    None => r.push(t),
                }
            }
            Replay::States(r) => r.push(Transition::new(state, action, reward, state_f32(&self.env), out.terminal)),
        }
        if out.done() {
            self.accum.returns.push(self.episode_return);
            self.episode_return = 0.0;
            self.episodes_done += 1;
            self.env.reset(&mut self.env_rng);
        }
        self.interaction += 1;
        if !warmup {
            for _ in 0..self.config.train.updates_per_step {
                if let Some(m) = self.update_once()? {
                    self.record(&m)?;
                }
            }
        }
        Ok(())
    }

    fn record(&mut self, m: &UpdateMetrics) -> Result<()> {
        if self.config.train.strict {
            let vals = [Some(m.critic_loss), m.actor_loss, m.curl_loss, Some(m.alpha)];
            if vals.iter().flatten().any(|v| !v.is_finite()) {
                bail!("non-finite loss at interaction step {}: {m:?}", self.interaction);
            }
        }
        self.counts.rl += 1;
        if m.curl_loss.is_some() {
            self.counts.curl += 1;
        }
        let a = &mut self.accum;
        a.critic_loss.push(Some(m.critic_loss));
        a.actor_loss.push(m.actor_loss);
        a.curl_loss.push(m.curl_loss);
        a.curl_acc.push(m.curl_acc);
        Ok(())
    }

    fn update_once(&mut self) -> Result<Option<UpdateMetrics>> {
        let tc = &self.config.train;
        let min_fill = tc.min_replay.max(tc.batch_size);
        if self.replay.len() < min_fill {
            return Ok(None);
        }
        let flags = self.flags();
        let view = self.rl_view();
        let m = match (&mut self.agent, &self.replay) {
            (Agent::Sac(a), Replay::Pixels(r)) => {
                let pb = r.sample_rl_and_curl(tc.batch_size, tc.crop_size, min_fill, view, &mut self.aug_rng).map_err(|e| anyhow!("{e}"))?;
                let pair = if flags.no_curl { None } else { a.pair.as_ref() };
                let batch = RlBatch::from_pixels(&pb, pair, flags.first_frame_contrastive).map_err(|e| anyhow!("{e}"))?;
                a.update(&batch, &flags, &mut self.agent_rng).map_err(|e| anyhow!("{e}"))?
            }
            (Agent::Sac(a), Replay::States(r)) => {
                let picked = r.sample(tc.batch_size, min_fill, &mut self.aug_rng).map_err(|e| anyhow!("{e}"))?;
                let batch = RlBatch::from_states(&picked);
                a.update(&batch, &flags, &mut self.agent_rng).map_err(|e| anyhow!("{e}"))?
            }
            (Agent::Dqn(a), Replay::Pixels(r)) => {
                let pb = r.sample_rl_and_curl(tc.batch_size, tc.crop_size, min_fill, view, &mut self.aug_rng).map_err(|e| anyhow!("{e}"))?;
                let pair = if flags.no_curl { None } else { a.pair.as_ref() };
                let batch = RlBatch::from_pixels(&pb, pair, flags.first_frame_contrastive).map_err(|e| anyhow!("{e}"))?;
                a.update(&batch, &flags).map_err(|e| anyhow!("{e}"))?
            }
            (Agent::Dqn(_), Replay::States(_)) => bail!("dqn runs on pixels"),
        };
        Ok(Some(m))
    }

    // ---- checkpoints ----------------------------------------------------------

    /// Writes parameters, optimizer state, config, run state, replay and
    /// metrics into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::write_entries(dir, &self.agent.entries())?;
        fs::write(dir.join(checkpoint::CONFIG), self.config.to_text())?;
        fs::write(dir.join(checkpoint::METRICS), self.metrics_csv())?;
        fs::write(dir.join(checkpoint::STATE), self.state_text())?;
        let f = fs::File::create(dir.join(checkpoint::REPLAY))?;
        let mut w = Writer(BufWriter::new(f));
        self.write_replay(&mut w)?;
        Ok(())
    }

    fn state_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k}={v}\n"));
        kv("interaction", self.interaction.to_string());
        kv("episode_return", format!("{:016x}", self.episode_return.to_bits()));
        kv("episodes_done", self.episodes_done.to_string());
        kv("eval_round", self.eval_round.to_string());
        kv("last_row_at", self.last_row_at.map_or_else(|| "none".into(), |t| t.to_string()));
        kv("agent_updates", self.agent.updates().to_string());
        kv("counts", format!("{},{}", self.counts.rl, self.counts.curl));
        let wall = if self.config.train.record_wall_clock { self.wall_offset + self.started.elapsed().as_secs_f64() } else { 0.0 };
        kv("wall_s", format!("{:016x}", wall.to_bits()));
        for (name, rng) in [("rng.env", &self.env_rng), ("rng.agent", &self.agent_rng), ("rng.augment", &self.aug_rng)] {
            kv(name, rng_text(&RngState::capture(rng)));
        }
        for (name, step) in self.agent.adam_steps() {
            kv(&format!("adam_step.{name}"), step.to_string());
        }
        let st: Vec<String> = self.env.true_state().iter().map(|x| format!("{:016x}", x.to_bits())).collect();
        kv("env.state", st.join(","));
        kv("env.episode_step", self.env.episode_step().to_string());
        let a = &self.accum;
        kv("accum.returns", a.returns.iter().map(|x| format!("{:016x}", x.to_bits())).collect::<Vec<_>>().join(","));
        for (name, m) in [("accum.curl_loss", &a.curl_loss), ("accum.curl_acc", &a.curl_acc), ("accum.critic_loss", &a.critic_loss), ("accum.actor_loss", &a.actor_loss)] {
            let (sum, n) = m.parts();
            kv(name, format!("{:016x},{n}", sum.to_bits()));
        }
        s
    }

    fn write_replay<W: std::io::Write>(&self, w: &mut Writer<W>) -> Result<()> {
        write_stack(w, self.env.observation())?;
        match &self.replay {
            Replay::Pixels(r) => {
                w.u8(0)?;
                write_slots(w, r.capacity(), r.cursor(), r.slots(), write_stack)?;
                let window = self.nstep.as_ref().map(NStepAccumulator::pending).unwrap_or_default();
                write_slots(w, 0, 0, &window, write_stack)?;
            }
            Replay::States(r) => {
                w.u8(1)?;
                write_slots(w, r.capacity(), r.cursor(), r.slots(), write_vec)?;
            }
        }
        Ok(())
    }

    /// Rebuilds a trainer from a directory written by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(&dir.join(checkpoint::CONFIG))?;
        let mut t = Trainer::new(config)?;
        let state = fs::read_to_string(dir.join(checkpoint::STATE)).context("reading run state")?;
        let kv: Vec<(String, String)> = crate::config::parse_pairs(&state)?;
        let get = |k: &str| kv.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str()).with_context(|| format!("run state lacks `{k}`"));
        let steps: Vec<(String, u64)> = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("adam_step.").map(|n| (n.to_string(), v.parse().unwrap_or(0))))
            .collect();
        let entries = checkpoint::read_entries(dir)?;
        t.agent.load(&entries, Some(&steps))?;
        t.agent.set_updates(get("agent_updates")?.parse()?);
        t.interaction = get("interaction")?.parse()?;
        t.episode_return = f64_bits(get("episode_return")?)?;
        t.episodes_done = get("episodes_done")?.parse()?;
        t.eval_round = get("eval_round")?.parse()?;
        t.last_row_at = match get("last_row_at")? {
            "none" => None,
            v => Some(v.parse()?),
        };
        let (rl, curl) = get("counts")?.split_once(',').context("bad counts")?;
        t.counts = UpdateCounts { rl: rl.parse()?, curl: curl.parse()? };
        t.wall_offset = f64_bits(get("wall_s")?)?;
        t.env_rng = parse_rng(get("rng.env")?)?.restore();
        t.agent_rng = parse_rng(get("rng.agent")?)?.restore();
        t.aug_rng = parse_rng(get("rng.augment")?)?.restore();
        let a = &mut t.accum;
        a.returns = split_bits(get("accum.returns")?)?;
        for (name, m) in [("accum.curl_loss", &mut a.curl_loss), ("accum.curl_acc", &mut a.curl_acc), ("accum.critic_loss", &mut a.critic_loss), ("accum.actor_loss", &mut a.actor_loss)] {
            let (sum, n) = get(name)?.split_once(',').context("bad accumulator")?;
            *m = Mean::from_parts(f64_bits(sum)?, n.parse()?);
        }
        t.rows = metrics::parse_csv(&fs::read_to_string(dir.join(checkpoint::METRICS))?)?;

        let f = fs::File::open(dir.join(checkpoint::REPLAY))?;
        let mut r = Reader(BufReader::new(f));
        let stack = read_stack(&mut r)?;
        let env_state = EnvState::from_vector(t.config.env.id, &split_bits(get("env.state")?)?, t.config.env.grid_size).map_err(|e| anyhow!("{e}"))?;
        t.env.set_state(env_state, stack, get("env.episode_step")?.parse()?).map_err(|e| anyhow!("{e}"))?;
        t.env.set_counters(t.interaction);
        match r.u8()? {
            0 => {
                let (cap, cursor, slots) = read_slots(&mut r, read_stack)?;
                t.replay = Replay::Pixels(ReplayBuffer::from_slots(cap, slots, cursor).map_err(|e| anyhow!("{e}"))?);
                let (_, _, window) = read_slots(&mut r, read_stack)?;
                if let Some(acc) = &mut t.nstep {
                    acc.restore_pending(window);
                }
            }
            1 => {
                let (cap, cursor, slots) = read_slots(&mut r, read_vec)?;
                t.replay = Replay::States(ReplayBuffer::from_slots(cap, slots, cursor).map_err(|e| anyhow!("{e}"))?);
            }
            k => bail!("unknown replay kind {k}"),
        }
        Ok(t)
    }
}

fn f64_bits(s: &str) -> Result<f64> {
    Ok(f64::from_bits(u64::from_str_radix(s, 16).with_context(|| format!("bad float bits `{s}`"))?))
}

fn split_bits(s: &str) -> Result<Vec<f64>> {
    s.split(',').filter(|x| !x.is_empty()).map(f64_bits).collect()
}

fn rng_text(s: &RngState) -> String {
    let seed: String = s.seed.iter().map(|b| format!("{b:02x}")).collect();
    format!("{seed}:{}:{}", s.stream, s.word_pos)
}

fn parse_rng(s: &str) -> Result<RngState> {
    let parts: Vec<&str> = s.split(':').collect();
    ensure!(parts.len() == 3 && parts[0].len() == 64, "bad rng state `{s}`");
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&parts[0][2 * i..2 * i + 2], 16)?;
    }
    Ok(RngState { seed, stream: parts[1].parse()?, word_pos: parts[2].parse()? })
}

fn write_stack<W: std::io::Write>(w: &mut Writer<W>, s: &FrameStack) -> Result<()> {
    w.u32(s.frames() as u32)?;
    w.u32(s.height() as u32)?;
    w.u32(s.width() as u32)?;
    w.bytes(s.data())
}

fn read_stack<R: std::io::Read>(r: &mut Reader<R>) -> Result<FrameStack> {
    let (f, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    FrameStack::new(f, h, w, r.bytes()?).map_err(|e| anyhow!("{e}"))
}

fn write_vec<W: std::io::Write>(w: &mut Writer<W>, v: &Vec<f32>) -> Result<()> {
    w.u32(v.len() as u32)?;
    v.iter().try_for_each(|&x| w.f32(x))
}

fn read_vec<R: std::io::Read>(r: &mut Reader<R>) -> Result<Vec<f32>> {
    let n = r.u32()? as usize;
    (0..n).map(|_| r.f32()).collect()
}

fn write_action<W: std::io::Write>(w: &mut Writer<W>, a: &Action) -> Result<()> {
    match a {
        Action::Continuous(v) => {
            w.u8(0)?;
            write_vec(w, v)
        }
        Action::Discrete(i) => {
            w.u8(1)?;
            w.u64(*i as u64)
        }
    }
}

fn read_action<R: std::io::Read>(r: &mut Reader<R>) -> Result<Action> {
    match r.u8()? {
        0 => Ok(Action::Continuous(read_vec(r)?)),
        1 => Ok(Action::Discrete(r.u64()? as usize)),
        k => bail!("unknown action tag {k}"),
    }
}

type WriteObs<W, O> = fn(&mut Writer<W>, &O) -> Result<()>;
type ReadObs<R, O> = fn(&mut Reader<R>) -> Result<O>;

fn write_slots<W: std::io::Write, O>(w: &mut Writer<W>, cap: usize, cursor: usize, slots: &[Transition<O>], obs: WriteObs<W, O>) -> Result<()> {
    w.u64(cap as u64)?;
    w.u64(cursor as u64)?;
    w.u64(slots.len() as u64)?;
    for t in slots {
        obs(w, &t.obs)?;
        write_action(w, &t.action)?;
        w.f32(t.reward)?;
        obs(w, &t.next_obs)?;
        w.u8(u8::from(t.done))?;
        w.u32(t.horizon)?;
    }
    Ok(())
}

fn read_slots<R: std::io::Read, O>(r: &mut Reader<R>, obs: ReadObs<R, O>) -> Result<(usize, usize, Vec<Transition<O>>)> {
    let cap = r.u64()? as usize;
    let cursor = r.u64()? as usize;
    let n = r.u64()? as usize;
    let mut slots = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let o = obs(r)?;
        let action = read_action(r)?;
        let reward = r.f32()?;
        let next_obs = obs(r)?;
        let done = r.u8()? != 0;
        let horizon = r.u32()?;
        slots.push(Transition { obs: o, action, reward, next_obs, done, horizon });
    }
    Ok((cap, cursor, slots))
}

/// Trains `config` to its budget, writing `metrics.csv` and a checkpoint into
/// `out`. Under strict checks a failure leaves a diagnostic checkpoint in
/// `out/diagnostic`.
pub fn train(config: ExperimentConfig, out: &Path) -> Result<(MetricsRow, PathBuf)> {
    fs::create_dir_all(out)?;
    let mut t = Trainer::new(config)?;
    if let Err(e) = t.run() {
        if t.config.train.strict {
            let diag = out.join("diagnostic");
            t.save(&diag).with_context(|| "writing diagnostic checkpoint")?;
            return Err(e.context(format!("diagnostic checkpoint written to {}", diag.display())));
        }
        return Err(e);
    }
    fs::write(out.join(checkpoint::METRICS), t.metrics_csv())?;
    let ckpt = out.join("checkpoint");
    t.save(&ckpt)?;
    let last = *t.rows().last().context("training produced no metrics rows")?;
    Ok((last, ckpt))
}

/// Loads the agent stored in a checkpoint directory.
pub fn load_agent(dir: &Path) -> Result<(ExperimentConfig, Agent)> {
    let config = ExperimentConfig::load(&dir.join(checkpoint::CONFIG))?;
    let mut agent = Agent::new(&config)?;
    agent.load(&checkpoint::read_entries(dir)?, None)?;
    Ok((config, agent))
}

/// Mean and std of deterministic returns for a checkpoint.
pub fn evaluate_checkpoint(dir: &Path, episodes: usize, eval_seed: u64, env_override: Option<curl_core::envs::EnvId>) -> Result<(f64, f64)> {
    let (config, agent) = load_agent(dir)?;
    if let Some(id) = env_override {
        ensure!(id == config.env.id, "checkpoint was trained on {}, not {id}", config.env.id);
    }
    ensure!(episodes > 0, "need at least one evaluation episode");
    let mut rng = substream(eval_seed, Stream::Eval, u64::MAX);
    let returns = evaluate_agent(&agent, &config, episodes, &mut rng)?;
    Ok(mean_std(&returns))
}
