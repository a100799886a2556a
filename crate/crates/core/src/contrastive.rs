//! Bilinear InfoNCE with a momentum key encoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::augment::{FrameStack, QueryKeyBatch};
use crate::autodiff::{Adam, AdamConfig, ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{stacks_to_nhwc, Encoder, EncoderConfig, LATENT_DIM};
use crate::rng::Rng;

/// `logits[i][j] = q_i^T W k_j`, each row shifted by its maximum.
pub fn bilinear_logits<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, w: Var) -> Result<Var> {
    let (sq, sk, sw) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(w).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] || sw != [sq[1], sq[1]] {
        return Err(shape_err("bilinear_logits", format!("q {sq:?}, k {sk:?}, W {sw:?}")));
    }
    let proj = tape.matmul(q, w)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(proj, kt)?;
    tape.sub_row_max(logits)
}

/// Index of the largest element, lowest index on ties.
fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Fraction of rows whose argmax is the diagonal entry.
pub fn diagonal_accuracy<T: Scalar>(logits: &[T], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let hits = logits.chunks_exact(n).enumerate().filter(|(i, row)| argmax(row) == *i).count();
    hits as f64 / n as f64
}

/// Softmax cross-entropy over square logits with the diagonal as labels.
/// Returns the loss node and the batch accuracy.
pub fn infonce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<(Var, f64)> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
        return Err(shape_err("infonce_loss", format!("logits must be square and non-empty, got {s:?}")));
    }
    let n = s[0];
    let accuracy = diagonal_accuracy(tape.value(logits), n);
    let labels: Vec<usize> = (0..n).collect();
    Ok((tape.softmax_cross_entropy(logits, &labels)?, accuracy))
}

/// Query encoder, momentum key encoder and bilinear matrix `W`.
#[derive(Debug)]
pub struct ContrastivePair<T> {
    pub encoder: Encoder,
    /// Query encoder parameters, shared with the RL agent.
    pub query: ParamSet<T>,
    /// Key encoder parameters; never on a gradient tape.
    pub key: ParamSet<T>,
    pub bilinear: ParamSet<T>,
    w: ParamId,
    momentum: f64,
}

impl<T: Scalar> Clone for ContrastivePair<T> {
    fn clone(&self) -> Self {
        Self {
            encoder: self.encoder.clone(),
            query: self.query.clone(),
            key: self.key.clone(),
            bilinear: self.bilinear.clone(),
            w: self.w,
            momentum: self.momentum,
        }
    }
}

/// Output of one contrastive loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CurlLoss {
    pub loss: Var,
    pub accuracy: f64,
}

/// Scalar summary of one contrastive update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurlStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Adam state for the contrastive parameters.
#[derive(Debug, Clone)]
pub struct CurlOptimizer<T> {
    pub encoder: Adam<T>,
    pub bilinear: Adam<T>,
}

impl<T: Scalar> CurlOptimizer<T> {
    pub fn new(config: AdamConfig, pair: &ContrastivePair<T>) -> Result<Self> {
        Ok(Self { encoder: Adam::new(config, &pair.query)?, bilinear: Adam::new(config, &pair.bilinear)? })
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("momentum must lie in [0, 1], got {m}")))
    }
}

impl<T: Scalar> ContrastivePair<T> {
    /// Fresh query encoder, a key encoder copied from it, and `W ~ U[0, 1)`.
    pub fn new(config: EncoderConfig, momentum: f64, rng: &mut Rng) -> Result<Self> {
        check_momentum(momentum)?;
        let mut query = ParamSet::new();
        let encoder = Encoder::new(&mut query, config, rng)?;
        let mut key = query.clone();
        key.set_requires_grad(false);
        let mut bilinear = ParamSet::new();
        let w = bilinear.add(
            "curl.W",
            Tensor::from_fn([LATENT_DIM, LATENT_DIM], |_| T::from_f64(rng.random::<f64>())),
        );
        Ok(Self { encoder, query, key, bilinear, w, momentum })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn set_momentum(&mut self, m: f64) -> Result<()> {
        check_momentum(m)?;
        self.momentum = m;
        Ok(())
    }

    pub fn w_id(&self) -> ParamId {
        self.w
    }

    /// `key <- m * key + (1 - m) * query`.
    pub fn momentum_update(&mut self) -> Result<()> {
        check_momentum(self.momentum)?;
        self.key.lerp_towards(&self.query, T::from_f64(1.0 - self.momentum))
    }

    /// Query latents for full stacks, computed off-tape.
    pub fn encode_queries(&self, stacks: &[&FrameStack]) -> Result<Vec<T>> {
        let side = self.encoder.config.input_size;
        let frames = self.encoder.config.frames;
        let raw: Vec<&[u8]> = stacks.iter().map(|s| s.data()).collect();
        let mut ng = Tape::no_grad();
        let x = ng.constant([stacks.len(), side, side, frames], stacks_to_nhwc(&raw, frames, side))?;
        let z = self.encoder.encode(&self.query, &mut ng, x)?;
        Ok(ng.value(z).to_vec())
    }

    /// Key latents, computed off-tape.
    pub fn encode_keys(&self, keys: &[T], batch: usize, channels: usize, single_frame: bool) -> Result<Vec<T>> {
        let side = self.encoder.config.input_size;
        let mut ng = Tape::no_grad();
        let x = ng.constant([batch, side, side, channels], keys.to_vec())?;
        let z = if single_frame {
            self.encoder.encode_single_frame(&self.key, &mut ng, x)?
        } else {
            self.encoder.encode(&self.key, &mut ng, x)?
        };
        Ok(ng.value(z).to_vec())
    }

    /// InfoNCE between query latents already on `tape` and key latents.
    pub fn loss_from_latents(&self, tape: &mut Tape<T>, q: Var, key_latents: Vec<T>) -> Result<CurlLoss> {
        let batch = tape.shape(q)[0];
        let k = tape.constant([batch, LATENT_DIM], key_latents)?;
        let w = tape.param(&self.bilinear, self.w);
        let logits = bilinear_logits(tape, q, k, w)?;
        let (loss, accuracy) = infonce_loss(tape, logits)?;
        Ok(CurlLoss { loss, accuracy })
    }

    /// Contrastive loss on cropped stacks. With `first_frame`, only frame 0 of
    /// each stack reaches the encoder, through its single-frame head.
    pub fn loss(&self, tape: &mut Tape<T>, qk: &QueryKeyBatch, first_frame: bool) -> Result<CurlLoss> {
        let (q, keys, c) = self.prepare(qk, first_frame)?;
        let side = self.encoder.config.input_size;
        let batch = qk.len();
        let x = tape.constant([batch, side, side, c], q)?;
        let zq = if first_frame {
            self.encoder.encode_single_frame(&self.query, tape, x)?
        } else {
            self.encoder.encode(&self.query, tape, x)?
        };
        let zk = self.encode_keys(&keys, batch, c, first_frame)?;
        self.loss_from_latents(tape, zq, zk)
    }

    /// NHWC query and key inputs plus the channel count the encoder sees.
    pub fn prepare(&self, qk: &QueryKeyBatch, first_frame: bool) -> Result<(Vec<T>, Vec<T>, usize)> {
        if qk.is_empty() {
            return Err(Error::InvalidArgument("empty contrastive batch".into()));
        }
        let side = self.encoder.config.input_size;
        let convert = |stacks: &[FrameStack]| -> (Vec<T>, usize) {
            if first_frame {
                let firsts: Vec<&[u8]> = stacks.iter().map(|s| s.frame(0)).collect();
                (stacks_to_nhwc(&firsts, 1, side), 1)
            } else {
                let all: Vec<&[u8]> = stacks.iter().map(FrameStack::data).collect();
                (stacks_to_nhwc(&all, stacks[0].frames(), side), stacks[0].frames())
            }
        };
        for s in qk.queries.iter().chain(&qk.keys) {
            if s.height() != side || s.width() != side {
                return Err(Error::WrongInputSize { expected_h: side, expected_w: side, got_h: s.height(), got_w: s.width() });
            }
        }
        let (q, c) = convert(&qk.queries);
        let (k, _) = convert(&qk.keys);
        Ok((q, k, c))
    }

    /// One standalone contrastive step: gradients into the query encoder and
    /// `W`, then one momentum update of the key encoder.
    pub fn update(&mut self, qk: &QueryKeyBatch, opt: &mut CurlOptimizer<T>, first_frame: bool) -> Result<CurlStats> {
        if qk.len() < 2 {
            log::warn!("contrastive batch of size {} has no negatives; loss is vacuously 0", qk.len());
        }
        let mut tape = Tape::new();
        let out = self.loss(&mut tape, qk, first_frame)?;
        tape.backward(out.loss)?;
        self.query.accumulate_from(&tape)?;
        self.bilinear.accumulate_from(&tape)?;
        opt.encoder.step(&mut self.query)?;
        opt.bilinear.step(&mut self.bilinear)?;
        self.momentum_update()?;
        Ok(CurlStats { loss: tape.value(out.loss)[0].to_f64(), accuracy: out.accuracy })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_w_gives_uniform_rows() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant([3, 2], alloc::vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.3]).unwrap();
        let k = tape.constant([3, 2], alloc::vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let w = tape.constant([2, 2], alloc::vec![0.0; 4]).unwrap();
        let logits = bilinear_logits(&mut tape, q, k, w).unwrap();
        assert!(tape.value(logits).iter().all(|&v| v == 0.0));
        let (loss, _) = infonce_loss(&mut tape, logits).unwrap();
        assert!((tape.value(loss)[0] - libm::log(3.0)).abs() < 1e-12);
    }

    #[test]
    fn non_square_logits_rejected() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant([2, 3], alloc::vec![0.0; 6]).unwrap();
        assert!(infonce_loss(&mut tape, l).is_err());
    }

    #[test]
    fn accuracy_ties_pick_lowest_index() {
        // Row 1 ties columns 0 and 1: lowest index (0) wins, so it misses.
        let logits = [1.0f64, 0.0, 2.0, 2.0];
        assert_eq!(diagonal_accuracy(&logits, 2), 0.5);
    }

    #[test]
    fn momentum_outside_unit_interval_rejected() {
        let cfg = EncoderConfig { frames: 1, input_size: 15, single_frame_head: false };
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Init);
        assert!(ContrastivePair::<f32>::new(cfg, 1.5, &mut rng).is_err());
        let mut pair = ContrastivePair::<f32>::new(cfg, 0.9, &mut rng).unwrap();
        assert!(pair.set_momentum(-0.1).is_err());
        assert_eq!(pair.momentum(), 0.9);
    }
}
