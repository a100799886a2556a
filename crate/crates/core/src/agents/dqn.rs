//! Double DQN with multi-step returns and epsilon-greedy exploration.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{features_no_grad, joint_forward, LossParts, ObsBatch, RlBatch, UpdateFlags, UpdateMetrics};
use crate::autodiff::{clip_grad_norm, Adam, AdamConfig, ParamSet, Scalar, Tape};
use crate::contrastive::ContrastivePair;
use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, Mlp, LATENT_DIM};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DqnConfig {
    pub num_actions: usize,
    pub encoder: Option<EncoderConfig>,
    pub state_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub gamma: f64,
    pub n_step: usize,
    pub lr: f64,
    pub adam_eps: f64,
    /// Hard target copy every this many updates.
    pub target_update_period: u64,
    /// Key-encoder EMA rate; momentum is `1 - tau_enc`.
    pub tau_enc: f64,
    pub curl_weight: f64,
    pub max_grad_norm: Option<f64>,
    /// Select the bootstrap action with the online network.
    pub double: bool,
}

impl DqnConfig {
    pub fn new(num_actions: usize, encoder: Option<EncoderConfig>, state_dim: usize) -> Self {
        Self {
            num_actions,
            encoder,
            state_dim,
            hidden: 256,
            hidden_layers: 1,
            gamma: 0.99,
            n_step: 3,
            lr: 1e-4,
            adam_eps: 1.5e-5,
            target_update_period: 2000,
            tau_enc: 0.001,
            curl_weight: 1.0,
            max_grad_norm: Some(10.0),
            double: true,
        }
    }

    pub fn feature_dim(&self) -> usize {
        if self.encoder.is_some() {
            LATENT_DIM
        } else {
            self.state_dim
        }
    }
}

/// Linear decay from `start` to `end` over `decay_steps` interaction steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// `y = R + gamma^h * (1 - d) * Q_target(o', argmax_a Q_select(o', a))`.
/// Pass the target values as `q_select` for vanilla (non-double) DQN.
pub fn double_q_targets<T: Scalar>(
    rewards: &[T],
    not_done: &[T],
    horizons: &[u32],
    q_select: &[T],
    q_target: &[T],
    num_actions: usize,
    gamma: f64,
) -> Vec<T> {
    (0..rewards.len())
        .map(|i| {
            let boot = T::from_f64(libm::pow(gamma, f64::from(horizons[i]))) * not_done[i];
            if boot == T::zero() {
                return rewards[i];
            }
            let row = &q_select[i * num_actions..(i + 1) * num_actions];
            let a = argmax(row);
            rewards[i] + boot * q_target[i * num_actions + a]
        })
        .collect()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct DqnAgent<T: Scalar> {
    pub config: DqnConfig,
    pub pair: Option<ContrastivePair<T>>,
    /// Snapshot of the query encoder used by the target network.
    pub target_encoder: Option<ParamSet<T>>,
    pub q_net: Mlp,
    pub q: ParamSet<T>,
    pub q_target: ParamSet<T>,
    opt_q: Adam<T>,
    opt_encoder: Option<Adam<T>>,
    opt_bilinear: Option<Adam<T>>,
    updates: u64,
}

impl<T: Scalar> DqnAgent<T> {
    pub fn new(config: DqnConfig, rng: &mut Rng) -> Result<Self> {
        if config.num_actions == 0 || config.n_step == 0 || config.target_update_period == 0 {
            return Err(Error::InvalidArgument("dqn: num_actions, n_step and target period must be positive".into()));
        }
        if config.encoder.is_none() && config.state_dim == 0 {
            return Err(Error::InvalidArgument("dqn: state_dim must be positive without an encoder".into()));
        }
        let pair = match config.encoder {
            Some(ec) => Some(ContrastivePair::new(ec, 1.0 - config.tau_enc, rng)?),
            None => None,
        };
        let target_encoder = pair.as_ref().map(|p| {
            let mut t = p.query.clone();
            t.set_requires_grad(false);
            t
        });
        let mut dims = vec![config.feature_dim()];
        dims.extend(core::iter::repeat_n(config.hidden, config.hidden_layers));
        dims.push(config.num_actions);
        let mut q = ParamSet::new();
        let q_net = Mlp::new(&mut q, "q", &dims, rng)?;
        let mut q_target = q.clone();
        q_target.set_requires_grad(false);
        let adam = AdamConfig { eps: config.adam_eps, ..AdamConfig::new(config.lr) };
        Ok(Self {
            opt_q: Adam::new(adam, &q)?,
            opt_encoder: pair.as_ref().map(|p| Adam::new(adam, &p.query)).transpose()?,
            opt_bilinear: pair.as_ref().map(|p| Adam::new(adam, &p.bilinear)).transpose()?,
            config,
            pair,
            target_encoder,
            q_net,
            q,
            q_target,
            updates: 0,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn set_updates(&mut self, n: u64) {
        self.updates = n;
    }

    pub fn named_sets(&self) -> Vec<(&'static str, &ParamSet<T>)> {
        let mut v = vec![("q", &self.q), ("q_target", &self.q_target)];
        if let (Some(p), Some(t)) = (&self.pair, &self.target_encoder) {
            v.extend([("encoder", &p.query), ("encoder_key", &p.key), ("encoder_target", t), ("curl", &p.bilinear)]);
        }
        v
    }

    pub fn named_sets_mut(&mut self) -> Vec<(&'static str, &mut ParamSet<T>)> {
        let mut v: Vec<(&'static str, &mut ParamSet<T>)> = vec![("q", &mut self.q), ("q_target", &mut self.q_target)];
        if let (Some(p), Some(t)) = (&mut self.pair, &mut self.target_encoder) {
            v.extend([("encoder", &mut p.query), ("encoder_key", &mut p.key), ("encoder_target", t), ("curl", &mut p.bilinear)]);
        }
        v
    }

    pub fn optimizers(&self) -> Vec<(&'static str, &Adam<T>)> {
        let mut v = vec![("q", &self.opt_q)];
        if let (Some(e), Some(b)) = (&self.opt_encoder, &self.opt_bilinear) {
            v.extend([("encoder", e), ("curl", b)]);
        }
        v
    }

    pub fn optimizers_mut(&mut self) -> Vec<(&'static str, &mut Adam<T>)> {
        let mut v: Vec<(&'static str, &mut Adam<T>)> = vec![("q", &mut self.opt_q)];
        if let (Some(e), Some(b)) = (&mut self.opt_encoder, &mut self.opt_bilinear) {
            v.extend([("encoder", e), ("curl", b)]);
        }
        v
    }

    pub fn set_strict(&mut self, strict: bool) {
        for (_, o) in self.optimizers_mut() {
            o.strict = strict;
        }
    }

    fn q_values_with(&self, encoder: Option<&ParamSet<T>>, q: &ParamSet<T>, obs: &ObsBatch<T>) -> Result<Vec<T>> {
        let z = match (&self.pair, encoder) {
            (Some(p), Some(set)) => {
                let side = p.encoder.config.input_size;
                let mut ng = Tape::no_grad();
                let x = ng.constant([obs.batch, side, side, p.encoder.config.frames], obs.values.clone())?;
                let z = p.encoder.encode(set, &mut ng, x)?;
                ng.value(z).to_vec()
            }
            _ => features_no_grad(None, false, obs)?,
        };
        let mut ng = Tape::no_grad();
        let f = ng.constant([obs.batch, self.config.feature_dim()], z)?;
        let out = self.q_net.forward(q, &mut ng, f)?;
        Ok(ng.value(out).to_vec())
    }

    /// Online Q-values, `[B, |A|]`.
    pub fn q_values(&self, obs: &ObsBatch<T>) -> Result<Vec<T>> {
        self.q_values_with(self.pair.as_ref().map(|p| &p.query), &self.q, obs)
    }

    pub fn greedy(&self, obs: &ObsBatch<T>) -> Result<Vec<usize>> {
        let q = self.q_values(obs)?;
        Ok(q.chunks_exact(self.config.num_actions).map(argmax).collect())
    }

    /// Epsilon-greedy actions.
    pub fn act(&self, obs: &ObsBatch<T>, epsilon: f64, rng: &mut Rng) -> Result<Vec<usize>> {
        let greedy = self.greedy(obs)?;
        Ok(greedy
            .into_iter()
            .map(|g| if rng.random::<f64>() < epsilon { rng.random_range(0..self.config.num_actions) } else { g })
            .collect())
    }

    pub fn td_targets(&self, batch: &RlBatch<T>) -> Result<Vec<T>> {
        let target = self.q_values_with(self.target_encoder.as_ref(), &self.q_target, &batch.next_obs)?;
        let select = if self.config.double { self.q_values(&batch.next_obs)? } else { target.clone() };
        Ok(double_q_targets(
            &batch.rewards,
            &batch.not_done,
            &batch.horizons,
            &select,
            &target,
            self.config.num_actions,
            self.config.gamma,
        ))
    }

    pub fn target_update(&mut self) -> Result<()> {
        self.q_target.copy_from(&self.q)?;
        if let (Some(p), Some(t)) = (&self.pair, &mut self.target_encoder) {
            t.copy_from(&p.query)?;
        }
        Ok(())
    }

    /// Squared TD loss (+ contrastive loss) through the shared encoder.
    pub fn update(&mut self, batch: &RlBatch<T>, flags: &UpdateFlags) -> Result<UpdateMetrics> {
        flags.validate()?;
        let b = batch.len();
        let n = self.config.num_actions;
        if b == 0 || batch.discrete_actions.len() != b {
            return Err(Error::InvalidArgument(format!("dqn batch needs {b} discrete actions")));
        }
        if let Some(&a) = batch.discrete_actions.iter().find(|&&a| a >= n) {
            return Err(Error::InvalidAction { action: a, num_actions: n });
        }
        let flags = if self.pair.is_none() { UpdateFlags { no_curl: true, detach_encoder: false, ..*flags } } else { *flags };
        let y = self.td_targets(batch)?;
        let mut tape = Tape::new();
        let fwd = joint_forward(self.pair.as_ref(), &mut tape, &batch.obs, batch.curl.as_ref(), batch.obs_is_query, &flags, LossParts::BOTH)?;
        let q = self.q_net.forward(&self.q, &mut tape, fwd.rl_features)?;
        let mut onehot = vec![T::zero(); b * n];
        for (i, &a) in batch.discrete_actions.iter().enumerate() {
            onehot[i * n + a] = T::one();
        }
        let mask = tape.constant([b, n], onehot)?;
        let picked = tape.mul(q, mask)?;
        let picked = tape.sum_rows(picked)?;
        let yv = tape.constant([b], y)?;
        let d = tape.sub(picked, yv)?;
        let sq = tape.square(d)?;
        let td = tape.mean(sq)?;
        let td_value = tape.value(td)[0].to_f64();
        let mut total = td;
        let mut curl = None;
        if let Some(c) = fwd.curl {
            let w = tape.scale(c.loss, T::from_f64(self.config.curl_weight))?;
            total = tape.add(total, w)?;
            curl = Some((tape.value(c.loss)[0].to_f64(), c.accuracy));
        }
        tape.backward(total)?;
        self.q.accumulate_from(&tape)?;
        if let Some(p) = &mut self.pair {
            p.query.accumulate_from(&tape)?;
            p.bilinear.accumulate_from(&tape)?;
        }
        if let Some(max) = self.config.max_grad_norm {
            let mut sets: Vec<&mut ParamSet<T>> = vec![&mut self.q];
            if let Some(p) = &mut self.pair {
                sets.push(&mut p.query);
            }
            clip_grad_norm(&mut sets, max);
        }
        self.opt_q.step(&mut self.q)?;
        if let Some(p) = &mut self.pair {
            self.opt_encoder.as_mut().expect("pixel agent").step(&mut p.query)?;
            if curl.is_some() {
                self.opt_bilinear.as_mut().expect("pixel agent").step(&mut p.bilinear)?;
                p.momentum_update()?;
            }
        }
        self.updates += 1;
        if self.updates % self.config.target_update_period == 0 {
            self.target_update()?;
        }
        Ok(UpdateMetrics { critic_loss: td_value, curl_loss: curl.map(|c| c.0), curl_acc: curl.map(|c| c.1), ..Default::default() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabular_double_q() {
        // Online picks action 2 for row 0, target evaluates it at 0.5.
        let select = [0.1f64, 0.2, 0.9, 3.0, 1.0, 0.0];
        let target = [5.0f64, 5.0, 0.5, 0.7, 9.0, 9.0];
        let y = double_q_targets(&[1.0, 0.0], &[1.0, 1.0], &[1, 1], &select, &target, 3, 0.9);
        assert!((y[0] - (1.0 + 0.9 * 0.5)).abs() < 1e-12);
        assert!((y[1] - 0.9 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn terminal_drops_bootstrap() {
        let y = double_q_targets(&[0.7f64], &[0.0], &[3], &[1.0, 2.0], &[f64::NAN, 4.0], 2, 0.99);
        assert_eq!(y, [0.7]);
    }

    #[test]
    fn multi_step_discount() {
        let y = double_q_targets(&[1.0f64], &[1.0], &[3], &[0.0, 1.0], &[0.0, 2.0], 2, 0.5);
        assert!((y[0] - (1.0 + 0.125 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn epsilon_decays_linearly() {
        let e = EpsilonSchedule { start: 1.0, end: 0.1, decay_steps: 10 };
        assert_eq!(e.value(0), 1.0);
        assert!((e.value(5) - 0.55).abs() < 1e-12);
        assert_eq!(e.value(100), 0.1);
    }
}
