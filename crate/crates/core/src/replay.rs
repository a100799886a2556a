//! Ring-buffer experience replay.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::augment::{make_query_key, CropSpec, FrameStack, QueryKeyBatch};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Continuous(Vec<f32>),
    Discrete(usize),
}

impl Action {
    pub fn as_continuous(&self) -> Option<&[f32]> {
        match self {
            Action::Continuous(a) => Some(a),
            Action::Discrete(_) => None,
        }
    }

    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }
}

/// One (possibly multi-step) transition.
///
/// `done` marks a true terminal state (bootstrap masked); time-limit
/// truncation is not terminal. `horizon` counts the rewards folded into
/// `reward`, so the bootstrap discount is `gamma^horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<O> {
    pub obs: O,
    pub action: Action,
    pub reward: f32,
    pub next_obs: O,
    pub done: bool,
    pub horizon: u32,
}

impl<O> Transition<O> {
    pub fn new(obs: O, action: Action, reward: f32, next_obs: O, done: bool) -> Self {
        Self { obs, action, reward, next_obs, done, horizon: 1 }
    }
}

/// Fixed-capacity FIFO store with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<O> {
    capacity: usize,
    slots: Vec<Transition<O>>,
    cursor: usize,
}

impl<O: Clone> ReplayBuffer<O> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, slots: Vec::new(), cursor: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Slot the next push writes to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn push(&mut self, t: Transition<O>) {
        if !t.reward.is_finite() {
            log::warn!("storing a transition with non-finite reward {}", t.reward);
        }
        if self.slots.len() < self.capacity {
            self.slots.push(t);
        } else {
            self.slots[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, index: usize) -> Option<&Transition<O>> {
        self.slots.get(index)
    }

    /// Stored transitions in slot order.
    pub fn slots(&self) -> &[Transition<O>] {
        &self.slots
    }

    /// Rebuilds a buffer from slots in slot order and a write cursor.
    pub fn from_slots(capacity: usize, slots: Vec<Transition<O>>, cursor: usize) -> Result<Self> {
        if capacity == 0 || slots.len() > capacity || cursor >= capacity || (slots.len() < capacity && cursor != slots.len() % capacity) {
            return Err(Error::InvalidArgument("inconsistent replay buffer snapshot".into()));
        }
        Ok(Self { capacity, slots, cursor })
    }

    /// `batch` indices drawn uniformly with replacement over filled slots.
    pub fn sample_indices(&self, batch: usize, min_fill: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        let required = min_fill.max(1);
        if self.slots.len() < required || batch == 0 {
            return Err(Error::NotEnoughSamples { fill: self.slots.len(), required });
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.slots.len())).collect())
    }

    pub fn sample(&self, batch: usize, min_fill: usize, rng: &mut Rng) -> Result<Vec<&Transition<O>>> {
        Ok(self.sample_indices(batch, min_fill, rng)?.into_iter().map(|i| &self.slots[i]).collect())
    }
}

/// How the RL branch sees sampled observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlView {
    /// The query crop of `obs` and an independent random crop of `next_obs`.
    Augmented,
    /// Center crops of both.
    Center,
}

/// One draw serving both the RL update and the contrastive update.
#[derive(Debug, Clone)]
pub struct PixelBatch {
    pub indices: Vec<usize>,
    pub obs: Vec<FrameStack>,
    pub next_obs: Vec<FrameStack>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    pub horizons: Vec<u32>,
    pub curl: QueryKeyBatch,
    /// True when `obs[i]` is exactly `curl.queries[i]`.
    pub obs_is_query: bool,
}

impl PixelBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

impl ReplayBuffer<FrameStack> {
    pub fn sample_rl_and_curl(
        &self,
        batch: usize,
        crop: usize,
        min_fill: usize,
        view: RlView,
        rng: &mut Rng,
    ) -> Result<PixelBatch> {
        let indices = self.sample_indices(batch, min_fill, rng)?;
        let picked: Vec<&Transition<FrameStack>> = indices.iter().map(|&i| &self.slots[i]).collect();
        let obs_refs: Vec<&FrameStack> = picked.iter().map(|t| &t.obs).collect();
        let curl = make_query_key(&obs_refs, crop, rng)?;
        let (obs, next_obs) = match view {
            RlView::Augmented => {
                let mut next = Vec::with_capacity(batch);
                for t in &picked {
                    let s = &t.next_obs;
                    next.push(CropSpec::random(s.height(), s.width(), crop, crop, rng)?.apply(s)?);
                }
                (curl.queries.clone(), next)
            }
            RlView::Center => {
                let center = |s: &FrameStack| CropSpec::center(s.height(), s.width(), crop, crop)?.apply(s);
                let obs = picked.iter().map(|t| center(&t.obs)).collect::<Result<Vec<_>>>()?;
                let next = picked.iter().map(|t| center(&t.next_obs)).collect::<Result<Vec<_>>>()?;
                (obs, next)
            }
        };
        Ok(PixelBatch {
            obs,
            next_obs,
            actions: picked.iter().map(|t| t.action.clone()).collect(),
            rewards: picked.iter().map(|t| t.reward).collect(),
            dones: picked.iter().map(|t| t.done).collect(),
            horizons: picked.iter().map(|t| t.horizon).collect(),
            curl,
            obs_is_query: view == RlView::Augmented,
            indices,
        })
    }
}

/// Folds consecutive one-step transitions into `n`-step transitions.
#[derive(Debug, Clone)]
pub struct NStepAccumulator<O> {
    n: usize,
    gamma: f32,
    window: VecDeque<Transition<O>>,
}

impl<O: Clone> NStepAccumulator<O> {
    pub fn new(n: usize, gamma: f32) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("n-step horizon must be at least 1".into()));
        }
        Ok(Self { n, gamma, window: VecDeque::with_capacity(n) })
    }

    fn fold(&self, len: usize) -> Transition<O> {
        let first = &self.window[0];
        let last = &self.window[len - 1];
        let mut reward = 0.0;
        let mut discount = 1.0;
        for t in self.window.iter().take(len) {
            reward += discount * t.reward;
            discount *= self.gamma;
        }
        Transition {
            obs: first.obs.clone(),
            action: first.action.clone(),
            reward,
            next_obs: last.next_obs.clone(),
            done: last.done,
            horizon: len as u32,
        }
    }

    /// Steps waiting for their horizon to fill, oldest first.
    pub fn pending(&self) -> Vec<Transition<O>> {
        self.window.iter().cloned().collect()
    }

    /// Replaces the pending window, e.g. when resuming a run.
    pub fn restore_pending(&mut self, window: Vec<Transition<O>>) {
        self.window = window.into();
    }

    /// Adds the next step; returns every transition that became complete.
    /// `episode_end` flushes the window (terminal or truncated).
    pub fn push(&mut self, t: Transition<O>, episode_end: bool) -> Vec<Transition<O>> {
        let episode_end = episode_end || t.done;
        self.window.push_back(t);
        let mut out = Vec::new();
        if episode_end {
            while !self.window.is_empty() {
                out.push(self.fold(self.window.len()));
                self.window.pop_front();
            }
        } else if self.window.len() == self.n {
            out.push(self.fold(self.n));
            self.window.pop_front();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn t(v: u8, r: f32, done: bool) -> Transition<u8> {
        Transition::new(v, Action::Discrete(v as usize), r, v + 1, done)
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..4 {
            buf.push(t(i, 0.0, false));
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.get(0).unwrap().obs, 3);
        assert_eq!(buf.get(1).unwrap().obs, 1);
        assert_eq!(buf.cursor(), 1);
    }

    #[test]
    fn single_item_sample() {
        let mut buf = ReplayBuffer::new(5).unwrap();
        buf.push(t(9, 1.5, true));
        let mut rng = stream(0, Stream::Agent);
        let s = buf.sample(1, 1, &mut rng).unwrap();
        assert_eq!(s[0], &t(9, 1.5, true));
    }

    #[test]
    fn underfilled_buffer_errors() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        buf.push(t(0, 0.0, false));
        let mut rng = stream(0, Stream::Agent);
        assert_eq!(buf.sample(4, 2, &mut rng).unwrap_err(), Error::NotEnoughSamples { fill: 1, required: 2 });
        assert!(ReplayBuffer::<u8>::new(0).is_err());
    }

    #[test]
    fn interleaved_push_sample_reproducible() {
        let run = || {
            let mut buf = ReplayBuffer::new(16).unwrap();
            let mut rng = stream(5, Stream::Agent);
            let mut seen = Vec::new();
            for i in 0..40u8 {
                buf.push(t(i, i as f32, false));
                if i % 3 == 0 {
                    seen.extend(buf.sample(4, 1, &mut rng).unwrap().iter().map(|x| x.obs));
                }
            }
            seen
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nstep_folds_and_flushes() {
        let mut acc = NStepAccumulator::new(3, 0.5).unwrap();
        assert!(acc.push(t(0, 1.0, false), false).is_empty());
        assert!(acc.push(t(1, 1.0, false), false).is_empty());
        let out = acc.push(t(2, 1.0, false), false);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].obs, out[0].next_obs, out[0].horizon), (0, 3, 3));
        assert!((out[0].reward - 1.75).abs() < 1e-6);
        // terminal inside the window flushes every pending start
        let out = acc.push(t(3, 4.0, true), false);
        assert_eq!(out.len(), 3);
        assert_eq!(out.iter().map(|x| x.horizon).collect::<Vec<_>>(), [3, 2, 1]);
        assert!(out.iter().all(|x| x.done && x.next_obs == 4));
        assert!((out[2].reward - 4.0).abs() < 1e-6);
    }

    #[test]
    fn done_flag_round_trips() {
        let mut buf = ReplayBuffer::new(4).unwrap();
        buf.push(t(1, 0.0, true));
        buf.push(t(2, 0.0, false));
        assert!(buf.get(0).unwrap().done);
        assert!(!buf.get(1).unwrap().done);
    }
}
