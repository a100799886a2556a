//! Soft actor-critic with twin critics, a squashed Gaussian policy and a
//! learned temperature.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::StandardNormal;
use rand::Rng as _;

use super::{features_no_grad, joint_forward, LossParts, ObsBatch, RlBatch, UpdateFlags, UpdateMetrics};
use crate::autodiff::{Adam, AdamConfig, ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use crate::contrastive::ContrastivePair;
use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, Mlp, LATENT_DIM};
use crate::rng::Rng;

/// Stabilizer inside the tanh log-det correction.
pub const TANH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SacConfig {
    pub action_dim: usize,
    /// `None` runs on state features of width `state_dim`.
    pub encoder: Option<EncoderConfig>,
    pub state_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub gamma: f64,
    pub tau_q: f64,
    pub tau_enc: f64,
    pub target_update_period: u64,
    pub actor_update_period: u64,
    pub init_temperature: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub target_entropy: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub curl_weight: f64,
}

impl SacConfig {
    pub fn new(action_dim: usize, encoder: Option<EncoderConfig>, state_dim: usize) -> Self {
        Self {
            action_dim,
            encoder,
            state_dim,
            hidden: 1024,
            hidden_layers: 2,
            gamma: 0.99,
            tau_q: 0.01,
            tau_enc: 0.05,
            target_update_period: 2,
            actor_update_period: 2,
            init_temperature: 0.1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            alpha_lr: 1e-4,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            target_entropy: -(action_dim as f64),
            log_std_min: -10.0,
            log_std_max: 2.0,
            curl_weight: 1.0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        if self.encoder.is_some() {
            LATENT_DIM
        } else {
            self.state_dim
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("sac: {what}")));
        if self.action_dim == 0 || self.hidden == 0 {
            return bad("action_dim and hidden must be positive");
        }
        if self.encoder.is_none() && self.state_dim == 0 {
            return bad("state_dim must be positive without an encoder");
        }
        if !(0.0..=1.0).contains(&self.tau_q) || !(0.0..=1.0).contains(&self.tau_enc) {
            return bad("EMA rates must lie in [0, 1]");
        }
        if self.init_temperature <= 0.0 {
            return bad("initial temperature must be positive");
        }
        if self.target_update_period == 0 || self.actor_update_period == 0 {
            return bad("update periods must be >= 1");
        }
        if self.log_std_min >= self.log_std_max {
            return bad("log_std_min must be below log_std_max");
        }
        Ok(())
    }

    fn mlp_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(core::iter::repeat_n(self.hidden, self.hidden_layers));
        dims.push(output);
        dims
    }
}

/// Reparameterized sample from the squashed Gaussian policy head.
#[derive(Debug, Clone, Copy)]
pub struct PolicySample {
    /// `tanh(mu + sigma * noise)`, `[B, d]`.
    pub action: Var,
    /// Log-density of `action`, `[B]`.
    pub log_prob: Var,
    /// `tanh(mu)`, `[B, d]`.
    pub mean_action: Var,
    pub log_std: Var,
}

/// Splits a `[B, 2d]` head into mean and log-std, squashes log-std into
/// `[lo, hi]` with tanh and samples with the given standard-normal noise.
pub fn squashed_gaussian<T: Scalar>(tape: &mut Tape<T>, head: Var, noise: Var, lo: f64, hi: f64) -> Result<PolicySample> {
    let d2 = tape.shape(head)[1];
    let d = d2 / 2;
    let mu = tape.slice(head, 1, 0, d)?;
    let raw = tape.slice(head, 1, d, d2)?;
    let t = tape.tanh(raw)?;
    let t = tape.add_scalar(t, T::one())?;
    let t = tape.scale(t, T::from_f64(0.5 * (hi - lo)))?;
    let log_std = tape.add_scalar(t, T::from_f64(lo))?;
    let std = tape.exp(log_std)?;
    let spread = tape.mul(std, noise)?;
    let u = tape.add(mu, spread)?;
    let action = tape.tanh(u)?;
    let gauss = tape.gaussian_log_prob(u, mu, log_std)?;
    let sq = tape.square(action)?;
    let one_minus = tape.scale(sq, -T::one())?;
    let one_minus = tape.add_scalar(one_minus, T::from_f64(1.0 + TANH_EPS))?;
    let log_det = tape.log(one_minus)?;
    let log_det = tape.sum_rows(log_det)?;
    let log_prob = tape.sub(gauss, log_det)?;
    let mean_action = tape.tanh(mu)?;
    Ok(PolicySample { action, log_prob, mean_action, log_std })
}

/// `y = r + gamma^h * (1 - d) * (min(q1, q2) - alpha * log_pi)`.
pub fn soft_bellman_targets<T: Scalar>(
    rewards: &[T],
    not_done: &[T],
    horizons: &[u32],
    q1: &[T],
    q2: &[T],
    next_log_pi: &[T],
    alpha: f64,
    gamma: f64,
) -> Vec<T> {
    (0..rewards.len())
        .map(|i| {
            let soft = q1[i].min(q2[i]) - T::from_f64(alpha) * next_log_pi[i];
            let disc = T::from_f64(libm::pow(gamma, f64::from(horizons[i])));
            let boot = disc * not_done[i];
            // A zero factor must drop the bootstrap even when it is infinite.
            if boot == T::zero() {
                rewards[i]
            } else {
                rewards[i] + boot * soft
            }
        })
        .collect()
}

fn standard_normal<T: Scalar>(n: usize, rng: &mut Rng) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal))).collect()
}

#[derive(Debug, Clone)]
struct SacOptimizers<T> {
    actor: Adam<T>,
    critic: Adam<T>,
    alpha: Adam<T>,
    encoder: Option<Adam<T>>,
    bilinear: Option<Adam<T>>,
}

/// Policy, twin critics with EMA targets, temperature and (for pixels) the
/// contrastive pair whose query encoder the critics share.
#[derive(Debug, Clone)]
pub struct SacAgent<T: Scalar> {
    pub config: SacConfig,
    /// Query encoder = shared RL encoder; key encoder = critic-target encoder.
    pub pair: Option<ContrastivePair<T>>,
    pub actor_net: Mlp,
    pub actor: ParamSet<T>,
    pub critic_nets: [Mlp; 2],
    pub critic: ParamSet<T>,
    pub critic_target: ParamSet<T>,
    pub log_alpha: ParamSet<T>,
    log_alpha_id: ParamId,
    opt: SacOptimizers<T>,
    updates: u64,
}

impl<T: Scalar> SacAgent<T> {
    pub fn new(config: SacConfig, rng: &mut Rng) -> Result<Self> {
        config.check()?;
        let pair = match config.encoder {
            Some(ec) => Some(ContrastivePair::new(ec, 1.0 - config.tau_enc, rng)?),
            None => None,
        };
        let f = config.feature_dim();
        let a = config.action_dim;
        let mut actor = ParamSet::new();
        let actor_net = Mlp::new(&mut actor, "actor", &config.mlp_dims(f, 2 * a), rng)?;
        let mut critic = ParamSet::new();
        let q1 = Mlp::new(&mut critic, "critic.q1", &config.mlp_dims(f + a, 1), rng)?;
        let q2 = Mlp::new(&mut critic, "critic.q2", &config.mlp_dims(f + a, 1), rng)?;
        let mut critic_target = critic.clone();
        critic_target.set_requires_grad(false);
        let mut log_alpha = ParamSet::new();
        let log_alpha_id = log_alpha.add("log_alpha", Tensor::scalar(T::from_f64(libm::log(config.init_temperature))));
        let adam = AdamConfig::new(config.lr).with_betas(config.beta1, config.beta2);
        let opt = SacOptimizers {
            actor: Adam::new(adam, &actor)?,
            critic: Adam::new(adam, &critic)?,
            alpha: Adam::new(AdamConfig::new(config.alpha_lr).with_betas(config.alpha_beta1, config.alpha_beta2), &log_alpha)?,
            encoder: pair.as_ref().map(|p| Adam::new(adam, &p.query)).transpose()?,
            bilinear: pair.as_ref().map(|p| Adam::new(adam, &p.bilinear)).transpose()?,
        };
        Ok(Self { config, pair, actor_net, actor, critic_nets: [q1, q2], critic, critic_target, log_alpha, log_alpha_id, opt, updates: 0 })
    }

    pub fn alpha(&self) -> f64 {
        libm::exp(self.log_alpha.get(self.log_alpha_id).values()[0].to_f64())
    }

    pub fn log_alpha_id(&self) -> ParamId {
        self.log_alpha_id
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn set_updates(&mut self, n: u64) {
        self.updates = n;
    }

    /// Every parameter set with a stable name, for checkpoints.
    pub fn named_sets(&self) -> Vec<(&'static str, &ParamSet<T>)> {
        let mut v = vec![("actor", &self.actor), ("critic", &self.critic), ("critic_target", &self.critic_target), ("alpha", &self.log_alpha)];
        if let Some(p) = &self.pair {
            v.extend([("encoder", &p.query), ("encoder_target", &p.key), ("curl", &p.bilinear)]);
        }
        v
    }

    pub fn named_sets_mut(&mut self) -> Vec<(&'static str, &mut ParamSet<T>)> {
        let mut v: Vec<(&'static str, &mut ParamSet<T>)> = vec![
            ("actor", &mut self.actor),
            ("critic", &mut self.critic),
            ("critic_target", &mut self.critic_target),
            ("alpha", &mut self.log_alpha),
        ];
        if let Some(p) = &mut self.pair {
            v.extend([("encoder", &mut p.query), ("encoder_target", &mut p.key), ("curl", &mut p.bilinear)]);
        }
        v
    }

    /// Optimizer states by name, in a fixed order.
    pub fn optimizers(&self) -> Vec<(&'static str, &Adam<T>)> {
        let mut v = vec![("actor", &self.opt.actor), ("critic", &self.opt.critic), ("alpha", &self.opt.alpha)];
        if let Some(e) = &self.opt.encoder {
            v.push(("encoder", e));
        }
        if let Some(b) = &self.opt.bilinear {
            v.push(("curl", b));
        }
        v
    }

    pub fn optimizers_mut(&mut self) -> Vec<(&'static str, &mut Adam<T>)> {
        let o = &mut self.opt;
        let mut v: Vec<(&'static str, &mut Adam<T>)> = vec![("actor", &mut o.actor), ("critic", &mut o.critic), ("alpha", &mut o.alpha)];
        if let Some(e) = &mut o.encoder {
            v.push(("encoder", e));
        }
        if let Some(b) = &mut o.bilinear {
            v.push(("curl", b));
        }
        v
    }

    /// Turns strict NaN checks on every optimizer on or off.
    pub fn set_strict(&mut self, strict: bool) {
        for (_, o) in self.optimizers_mut() {
            o.strict = strict;
        }
    }

    fn policy_on(&self, tape: &mut Tape<T>, features: Var, noise: Vec<T>) -> Result<PolicySample> {
        let b = tape.shape(features)[0];
        let head = self.actor_net.forward(&self.actor, tape, features)?;
        let noise = tape.constant([b, self.config.action_dim], noise)?;
        squashed_gaussian(tape, head, noise, self.config.log_std_min, self.config.log_std_max)
    }

    fn critics_on(&self, set: &ParamSet<T>, tape: &mut Tape<T>, features: Var, actions: Var) -> Result<(Var, Var)> {
        let b = tape.shape(features)[0];
        let x = tape.concat(&[features, actions], 1)?;
        let q1 = self.critic_nets[0].forward(set, tape, x)?;
        let q2 = self.critic_nets[1].forward(set, tape, x)?;
        Ok((tape.reshape(q1, [b])?, tape.reshape(q2, [b])?))
    }

    /// Actions for a batch of observations (center-cropped pixels or states).
    /// Returns `[B, d]` values strictly inside `(-1, 1)` up to rounding.
    pub fn act(&self, obs: &ObsBatch<T>, deterministic: bool, rng: &mut Rng) -> Result<Vec<T>> {
        let z = features_no_grad(self.pair.as_ref(), false, obs)?;
        let mut ng = Tape::no_grad();
        let f = ng.constant([obs.batch, self.config.feature_dim()], z)?;
        let noise = if deterministic {
            vec![T::zero(); obs.batch * self.config.action_dim]
        } else {
            standard_normal(obs.batch * self.config.action_dim, rng)
        };
        let s = self.policy_on(&mut ng, f, noise)?;
        let out = if deterministic { s.mean_action } else { s.action };
        Ok(ng.value(out).to_vec())
    }

    /// Bellman targets for a batch, computed without gradients.
    pub fn critic_targets(&self, batch: &RlBatch<T>, rng: &mut Rng) -> Result<Vec<T>> {
        let b = batch.len();
        let f = self.config.feature_dim();
        let z_online = features_no_grad(self.pair.as_ref(), false, &batch.next_obs)?;
        let z_target = if self.pair.is_some() { features_no_grad(self.pair.as_ref(), true, &batch.next_obs)? } else { z_online.clone() };
        let mut ng = Tape::no_grad();
        let zo = ng.constant([b, f], z_online)?;
        let s = self.policy_on(&mut ng, zo, standard_normal(b * self.config.action_dim, rng))?;
        let zt = ng.constant([b, f], z_target)?;
        let (q1, q2) = self.critics_on(&self.critic_target, &mut ng, zt, s.action)?;
        Ok(soft_bellman_targets(
            &batch.rewards,
            &batch.not_done,
            &batch.horizons,
            ng.value(q1),
            ng.value(q2),
            ng.value(s.log_prob),
            self.alpha(),
            self.config.gamma,
        ))
    }

    /// Records `critic_loss + curl_weight * curl_loss` on `tape` (either term
    /// may be left out via `parts`). Returns the total, the critic loss, the
    /// contrastive stats and the detached RL features.
    fn joint_loss(
        &self,
        tape: &mut Tape<T>,
        batch: &RlBatch<T>,
        targets: &[T],
        flags: &UpdateFlags,
        parts: LossParts,
    ) -> Result<(Var, f64, Option<(f64, f64)>, Vec<T>)> {
        let b = batch.len();
        let fwd = joint_forward(self.pair.as_ref(), tape, &batch.obs, batch.curl.as_ref(), batch.obs_is_query, flags, parts)?;
        let actions = tape.constant([b, self.config.action_dim], batch.actions.clone())?;
        let critic_set = &self.critic;
        let (q1, q2) = self.critics_on(critic_set, tape, fwd.rl_features, actions)?;
        let y = tape.constant([b], targets.to_vec())?;
        let mut critic_loss = None;
        for q in [q1, q2] {
            let d = tape.sub(q, y)?;
            let sq = tape.square(d)?;
            let m = tape.mean(sq)?;
            critic_loss = Some(match critic_loss {
                None => m,
                Some(acc) => tape.add(acc, m)?,
            });
        }
        let critic_loss = critic_loss.expect("two critics");
        let critic_value = tape.value(critic_loss)[0].to_f64();
        let mut total = if parts.rl { Some(critic_loss) } else { None };
        let mut curl_stats = None;
        if let Some(c) = fwd.curl {
            let weighted = tape.scale(c.loss, T::from_f64(self.config.curl_weight))?;
            total = Some(match total {
                None => weighted,
                Some(t) => tape.add(t, weighted)?,
            });
            curl_stats = Some((tape.value(c.loss)[0].to_f64(), c.accuracy));
        }
        let total = total.ok_or_else(|| Error::InvalidArgument("joint loss with no active terms".into()))?;
        Ok((total, critic_value, curl_stats, tape.value(fwd.rl_features).to_vec()))
    }

    /// Query-encoder gradients of the selected joint-loss terms, without
    /// applying them. Used to check that joint gradients add up.
    pub fn encoder_gradients(&self, batch: &RlBatch<T>, targets: &[T], flags: &UpdateFlags, parts: LossParts) -> Result<Vec<Vec<T>>> {
        let pair = self.pair.as_ref().ok_or_else(|| Error::InvalidArgument("state agent has no encoder".into()))?;
        let mut tape = Tape::new();
        let (total, ..) = self.joint_loss(&mut tape, batch, targets, flags, parts)?;
        tape.backward(total)?;
        let mut grads: Vec<Vec<T>> = pair.query.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        for (id, var) in tape.param_leaves(pair.query.id()) {
            if let Some(g) = tape.grad(var) {
                grads[id.index()].copy_from_slice(g);
            }
        }
        Ok(grads)
    }

    /// Actor and temperature step on fixed (detached) features.
    pub fn update_actor_and_alpha(&mut self, features: Vec<T>, rng: &mut Rng) -> Result<(f64, f64)> {
        let f = self.config.feature_dim();
        let b = features.len() / f;
        let alpha = self.alpha();
        let noise = standard_normal(b * self.config.action_dim, rng);
        let mut tape = Tape::new();
        let z = tape.constant([b, f], features)?;
        let s = self.policy_on(&mut tape, z, noise)?;
        let (q1, q2) = self.critics_on(&self.critic, &mut tape, z, s.action)?;
        let q = tape.minimum(q1, q2)?;
        let ent = tape.scale(s.log_prob, T::from_f64(alpha))?;
        let per = tape.sub(ent, q)?;
        let actor_loss = tape.mean(per)?;
        tape.backward(actor_loss)?;
        self.actor.accumulate_from(&tape)?;
        self.opt.actor.step(&mut self.actor)?;
        let actor_value = tape.value(actor_loss)[0].to_f64();

        let lp = tape.value(s.log_prob);
        let gap = lp.iter().map(|&x| x.to_f64()).sum::<f64>() / b as f64 + self.config.target_entropy;
        let alpha_value = self.update_alpha(gap)?;
        Ok((actor_value, alpha_value))
    }

    /// One temperature step on `mean(log_pi) + target_entropy`. The loss is
    /// `-log_alpha * gap`, so alpha grows when entropy is below target.
    pub fn update_alpha(&mut self, gap: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let la = tape.param(&self.log_alpha, self.log_alpha_id);
        let loss = tape.scale(la, T::from_f64(-gap))?;
        let loss = tape.sum(loss)?;
        tape.backward(loss)?;
        self.log_alpha.accumulate_from(&tape)?;
        self.opt.alpha.step(&mut self.log_alpha)?;
        Ok(tape.value(loss)[0].to_f64())
    }

    /// Critic targets move by `tau_q`; the key (critic-target) encoder by `tau_enc`.
    pub fn target_update(&mut self) -> Result<()> {
        self.critic_target.lerp_towards(&self.critic, T::from_f64(self.config.tau_q))?;
        if let Some(p) = &mut self.pair {
            p.key.lerp_towards(&p.query, T::from_f64(self.config.tau_enc))?;
        }
        Ok(())
    }

    /// One joint step: critic (+ contrastive) update through the shared
    /// encoder, then the periodic actor/temperature and target updates.
    pub fn update(&mut self, batch: &RlBatch<T>, flags: &UpdateFlags, rng: &mut Rng) -> Result<UpdateMetrics> {
        flags.validate()?;
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let flags = if self.pair.is_none() { UpdateFlags { no_curl: true, detach_encoder: false, ..*flags } } else { *flags };
        let targets = self.critic_targets(batch, rng)?;
        let mut tape = Tape::new();
        let (total, critic_loss, curl, features) = self.joint_loss(&mut tape, batch, &targets, &flags, LossParts::BOTH)?;
        tape.backward(total)?;
        self.critic.accumulate_from(&tape)?;
        self.opt.critic.step(&mut self.critic)?;
        if let Some(p) = &mut self.pair {
            p.query.accumulate_from(&tape)?;
            p.bilinear.accumulate_from(&tape)?;
            self.opt.encoder.as_mut().expect("pixel agent").step(&mut p.query)?;
            if curl.is_some() {
                self.opt.bilinear.as_mut().expect("pixel agent").step(&mut p.bilinear)?;
            }
        }
        drop(tape);
        self.updates += 1;
        let mut m = UpdateMetrics { critic_loss, curl_loss: curl.map(|c| c.0), curl_acc: curl.map(|c| c.1), ..Default::default() };
        if self.updates % self.config.actor_update_period == 0 {
            let (a, l) = self.update_actor_and_alpha(features, rng)?;
            m.actor_loss = Some(a);
            m.alpha_loss = Some(l);
        }
        if self.updates % self.config.target_update_period == 0 {
            self.target_update()?;
        }
        m.alpha = self.alpha();
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bellman_terminal_and_zero_discount() {
        let r = [0.5f64, -1.0];
        let y = soft_bellman_targets(&r, &[0.0, 0.0], &[1, 1], &[10.0, 3.0], &[2.0, 7.0], &[0.1, 0.2], 0.1, 0.99);
        assert_eq!(y, r);
        let y = soft_bellman_targets(&r, &[1.0, 1.0], &[1, 1], &[10.0, 3.0], &[2.0, 7.0], &[0.1, 0.2], 0.1, 0.0);
        assert_eq!(y, r);
        let y = soft_bellman_targets(&[1.0f64], &[0.0], &[1], &[f64::INFINITY], &[f64::NAN], &[0.0], 0.1, 0.99);
        assert_eq!(y, [1.0]);
    }

    #[test]
    fn bellman_hand_value() {
        // r + g * (min(q1, q2) - alpha * logp) = 0.3 + 0.99 * (1.5 - 0.2 * (-0.7))
        let y = soft_bellman_targets(&[0.3f64], &[1.0], &[1], &[2.0], &[1.5], &[-0.7], 0.2, 0.99);
        assert!((y[0] - (0.3 + 0.99 * (1.5 + 0.14))).abs() < 1e-12);
    }

    #[test]
    fn deterministic_zero_mean_acts_zero() {
        let mut tape = Tape::<f64>::no_grad();
        let head = tape.constant([1, 2], vec![0.0, 0.5]).unwrap();
        let noise = tape.constant([1, 1], vec![0.7]).unwrap();
        let s = squashed_gaussian(&mut tape, head, noise, -10.0, 2.0).unwrap();
        assert_eq!(tape.value(s.mean_action), &[0.0]);
    }

    #[test]
    fn squashed_log_std_range() {
        let mut tape = Tape::<f64>::no_grad();
        let head = tape.constant([1, 4], vec![0.0, 0.0, -1e3, 1e3]).unwrap();
        let noise = tape.constant([1, 2], vec![0.0, 0.0]).unwrap();
        let s = squashed_gaussian(&mut tape, head, noise, -10.0, 2.0).unwrap();
        assert_eq!(tape.value(s.log_std), &[-10.0, 2.0]);
        assert!(tape.value(s.log_prob)[0].is_finite());
    }
}
