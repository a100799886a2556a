//! Off-policy agents trained jointly with the contrastive objective.

pub mod dqn;
pub mod sac;

use alloc::format;
use alloc::vec::Vec;

use crate::augment::FrameStack;
use crate::autodiff::{Scalar, Tape, Var};
use crate::contrastive::{ContrastivePair, CurlLoss};
use crate::error::{shape_err, Error, Result};
use crate::nn::stacks_to_nhwc;
use crate::replay::{Action, PixelBatch, Transition};

pub use dqn::{DqnAgent, DqnConfig, EpsilonSchedule};
pub use sac::{SacAgent, SacConfig};

/// Ablation switches for [`SacAgent::update`] and [`DqnAgent::update`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateFlags {
    /// Drop the contrastive loss entirely.
    pub no_curl: bool,
    /// Stop RL gradients at the conv trunk.
    pub detach_encoder: bool,
    /// Contrastive inputs are frame 0 of each stack only.
    pub first_frame_contrastive: bool,
    /// RL branch sees center crops; only the contrastive branch is augmented.
    pub no_aug_rl: bool,
}

impl UpdateFlags {
    pub fn validate(&self) -> Result<()> {
        if self.no_curl && self.detach_encoder {
            return Err(Error::ConflictingFlags("detach_encoder leaves no loss to train the encoder without CURL"));
        }
        if self.no_curl && self.first_frame_contrastive {
            return Err(Error::ConflictingFlags("first_frame_contrastive needs the contrastive loss"));
        }
        Ok(())
    }

    pub fn curl_enabled(&self) -> bool {
        !self.no_curl
    }
}

/// Scalars reported by one update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateMetrics {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub alpha_loss: Option<f64>,
    pub alpha: f64,
    pub curl_loss: Option<f64>,
    pub curl_acc: Option<f64>,
}

/// Flat observation batch: NHWC pixels in `[0, 1]` or state features.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsBatch<T> {
    pub batch: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> ObsBatch<T> {
    pub fn from_stacks(stacks: &[FrameStack]) -> Result<Self> {
        let first = stacks.first().ok_or_else(|| Error::InvalidArgument("empty observation batch".into()))?;
        if first.height() != first.width() {
            return Err(Error::InvalidArgument(format!("non-square frames {}x{}", first.height(), first.width())));
        }
        let refs: Vec<&[u8]> = stacks.iter().map(FrameStack::data).collect();
        Ok(Self { batch: stacks.len(), values: stacks_to_nhwc(&refs, first.frames(), first.height()) })
    }

    pub fn from_stack(stack: &FrameStack) -> Result<Self> {
        Self::from_stacks(core::slice::from_ref(stack))
    }

    pub fn from_states(states: &[&[f32]]) -> Self {
        Self { batch: states.len(), values: states.iter().flat_map(|s| s.iter().map(|&x| T::from_f64(f64::from(x)))).collect() }
    }
}

/// Contrastive inputs in encoder layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CurlInputs<T> {
    pub queries: Vec<T>,
    pub keys: Vec<T>,
    pub channels: usize,
}

/// One training batch in agent-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct RlBatch<T> {
    pub obs: ObsBatch<T>,
    pub next_obs: ObsBatch<T>,
    /// `[B, d]` continuous actions (empty for discrete agents).
    pub actions: Vec<T>,
    pub discrete_actions: Vec<usize>,
    pub rewards: Vec<T>,
    /// `1 - done`.
    pub not_done: Vec<T>,
    pub horizons: Vec<u32>,
    pub curl: Option<CurlInputs<T>>,
    pub obs_is_query: bool,
}

impl<T: Scalar> RlBatch<T> {
    pub fn len(&self) -> usize {
        self.obs.batch
    }

    pub fn is_empty(&self) -> bool {
        self.obs.batch == 0
    }

    fn from_parts(actions: &[Action], rewards: &[f32], dones: &[bool], horizons: &[u32]) -> (Vec<T>, Vec<usize>, Vec<T>, Vec<T>, Vec<u32>) {
        let mut cont = Vec::new();
        let mut disc = Vec::new();
        for a in actions {
            match a {
                Action::Continuous(v) => cont.extend(v.iter().map(|&x| T::from_f64(f64::from(x)))),
                Action::Discrete(i) => disc.push(*i),
            }
        }
        let rewards = rewards.iter().map(|&r| T::from_f64(f64::from(r))).collect();
        let not_done = dones.iter().map(|&d| if d { T::zero() } else { T::one() }).collect();
        (cont, disc, rewards, not_done, horizons.to_vec())
    }

    /// Converts a replay draw; contrastive inputs are built when `pair` is given.
    pub fn from_pixels(pb: &PixelBatch, pair: Option<&ContrastivePair<T>>, first_frame: bool) -> Result<Self> {
        let (actions, discrete_actions, rewards, not_done, horizons) =
            Self::from_parts(&pb.actions, &pb.rewards, &pb.dones, &pb.horizons);
        let curl = match pair {
            Some(p) => {
                let (queries, keys, channels) = p.prepare(&pb.curl, first_frame)?;
                Some(CurlInputs { queries, keys, channels })
            }
            None => None,
        };
        Ok(Self {
            obs: ObsBatch::from_stacks(&pb.obs)?,
            next_obs: ObsBatch::from_stacks(&pb.next_obs)?,
            actions,
            discrete_actions,
            rewards,
            not_done,
            horizons,
            curl,
            obs_is_query: pb.obs_is_query && !first_frame,
        })
    }

    pub fn from_states(batch: &[&Transition<Vec<f32>>]) -> Self {
        let actions: Vec<Action> = batch.iter().map(|t| t.action.clone()).collect();
        let rewards: Vec<f32> = batch.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();
        let horizons: Vec<u32> = batch.iter().map(|t| t.horizon).collect();
        let (actions, discrete_actions, rewards, not_done, horizons) = Self::from_parts(&actions, &rewards, &dones, &horizons);
        let obs: Vec<&[f32]> = batch.iter().map(|t| t.obs.as_slice()).collect();
        let next: Vec<&[f32]> = batch.iter().map(|t| t.next_obs.as_slice()).collect();
        Self {
            obs: ObsBatch::from_states(&obs),
            next_obs: ObsBatch::from_states(&next),
            actions,
            discrete_actions,
            rewards,
            not_done,
            horizons,
            curl: None,
            obs_is_query: false,
        }
    }
}

/// Which terms of the joint loss get recorded; used to compare gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossParts {
    pub rl: bool,
    pub curl: bool,
}

impl LossParts {
    pub const BOTH: LossParts = LossParts { rl: true, curl: true };
}

/// Features for the RL heads plus the contrastive loss, all on one tape.
pub(crate) struct JointForward {
    pub rl_features: Var,
    pub curl: Option<CurlLoss>,
}

/// Encodes `obs` with the query encoder and, when enabled, evaluates the
/// contrastive loss. The encoder forward pass is shared with the contrastive
/// branch when the RL observation is the query crop.
pub(crate) fn joint_forward<T: Scalar>(
    pair: Option<&ContrastivePair<T>>,
    tape: &mut Tape<T>,
    obs: &ObsBatch<T>,
    curl: Option<&CurlInputs<T>>,
    obs_is_query: bool,
    flags: &UpdateFlags,
    parts: LossParts,
) -> Result<JointForward> {
    let Some(pair) = pair else {
        let d = obs.values.len() / obs.batch.max(1);
        let x = tape.constant([obs.batch, d], obs.values.clone())?;
        return Ok(JointForward { rl_features: x, curl: None });
    };
    let enc = &pair.encoder;
    let side = enc.config.input_size;
    let frames = enc.config.frames;
    let x = tape.constant([obs.batch, side, side, frames], obs.values.clone())?;
    let use_curl = flags.curl_enabled() && parts.curl;
    let share = use_curl && obs_is_query && !flags.first_frame_contrastive && parts.rl;

    let h = enc.forward_conv(&pair.query, tape, x, false)?;
    let (rl_features, shared_q) = if flags.detach_encoder {
        let hd = tape.detach(h);
        let z = enc.forward_head(&pair.query, tape, hd)?;
        let q = if share { Some(enc.forward_head(&pair.query, tape, h)?) } else { None };
        (z, q)
    } else {
        let z = enc.forward_head(&pair.query, tape, h)?;
        (z, share.then_some(z))
    };
    let rl_features = if parts.rl { rl_features } else { tape.detach(rl_features) };

    let curl_loss = if use_curl {
        let ci = curl.ok_or_else(|| Error::InvalidArgument("contrastive loss enabled but batch has no curl inputs".into()))?;
        let batch = obs.batch;
        let single = flags.first_frame_contrastive;
        if single && ci.channels != 1 {
            return Err(shape_err("joint_forward", format!("first-frame inputs must have 1 channel, got {}", ci.channels)));
        }
        let zq = match shared_q {
            Some(q) => q,
            None => {
                let xq = tape.constant([batch, side, side, ci.channels], ci.queries.clone())?;
                if single {
                    enc.encode_single_frame(&pair.query, tape, xq)?
                } else {
                    enc.encode(&pair.query, tape, xq)?
                }
            }
        };
        let zk = pair.encode_keys(&ci.keys, batch, ci.channels, single)?;
        Some(pair.loss_from_latents(tape, zq, zk)?)
    } else {
        None
    };
    Ok(JointForward { rl_features, curl: curl_loss })
}

/// Latents (or raw features) computed off-tape with the given parameters.
pub(crate) fn features_no_grad<T: Scalar>(
    pair: Option<&ContrastivePair<T>>,
    use_key: bool,
    obs: &ObsBatch<T>,
) -> Result<Vec<T>> {
    match pair {
        None => Ok(obs.values.clone()),
        Some(p) => {
            let side = p.encoder.config.input_size;
            let mut ng = Tape::no_grad();
            let x = ng.constant([obs.batch, side, side, p.encoder.config.frames], obs.values.clone())?;
            let set = if use_key { &p.key } else { &p.query };
            let z = p.encoder.encode(set, &mut ng, x)?;
            Ok(ng.value(z).to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conflicting_flags() {
        let f = UpdateFlags { no_curl: true, detach_encoder: true, ..Default::default() };
        assert!(matches!(f.validate(), Err(Error::ConflictingFlags(_))));
        assert!(UpdateFlags::default().validate().is_ok());
        assert!(UpdateFlags { no_curl: true, no_aug_rl: true, ..Default::default() }.validate().is_ok());
    }
}
