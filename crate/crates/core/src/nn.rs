//! Convolutional pixel encoder and dense heads.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::{Padding, ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

pub const LATENT_DIM: usize = 50;
pub const NUM_CONV_LAYERS: usize = 4;
pub const NUM_FILTERS: usize = 32;
const KERNEL: usize = 3;
const LAYER_NORM_EPS: f64 = 1e-5;

fn gaussian(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Orthogonal `[rows, cols]` matrix (orthonormal along the shorter side).
pub fn orthogonal<T: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<T> {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // Modified Gram-Schmidt on `short` random vectors of length `long`.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Tensor::from_fn([rows, cols], |idx| {
        let (r, c) = (idx / cols, idx % cols);
        let v = if rows >= cols { basis[c][r] } else { basis[r][c] };
        T::from_f64(v)
    })
}

fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.random_range(-bound..bound)))
}

/// Affine layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(set: &mut ParamSet<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let weight = set.add(format!("{name}.weight"), orthogonal(in_dim, out_dim, rng));
        let bias = set.add(format!("{name}.bias"), Tensor::zeros([out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, set: &ParamSet<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(shape_err("linear", format!("expected [_, {}], got {s:?}", self.in_dim)));
        }
        let w = tape.param(set, self.weight);
        let b = tape.param(set, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// ReLU multilayer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [input, hidden.., output]`.
    pub fn new<T: Scalar>(set: &mut ParamSet<T>, name: &str, dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(format!("mlp needs at least input and output dims, got {dims:?}")));
        }
        let layers =
            dims.windows(2).enumerate().map(|(i, w)| Linear::new(set, &format!("{name}.{i}"), w[0], w[1], rng)).collect();
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward<T: Scalar>(&self, set: &ParamSet<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(set, tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Encoder geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Input channels, one per stacked grayscale frame.
    pub frames: usize,
    /// Square input side (the crop size).
    pub input_size: usize,
    /// Adds a 1-channel first layer for single-frame contrastive inputs.
    pub single_frame_head: bool,
}

impl EncoderConfig {
    /// Side of the last conv feature map.
    pub fn feature_side(&self) -> Option<usize> {
        let mut side = self.input_size.checked_sub(KERNEL)? / 2 + 1;
        for _ in 1..NUM_CONV_LAYERS {
            side = side.checked_sub(KERNEL - 1).filter(|&s| s > 0)?;
        }
        Some(side)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

impl ConvLayer {
    fn new<T: Scalar>(set: &mut ParamSet<T>, name: &str, in_c: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = KERNEL * KERNEL * in_c;
        let weight = set.add(format!("{name}.weight"), fan_in_uniform(&[KERNEL, KERNEL, in_c, NUM_FILTERS], fan_in, rng));
        let bias = set.add(format!("{name}.bias"), fan_in_uniform(&[NUM_FILTERS], fan_in, rng));
        Self { weight, bias, stride }
    }

    fn forward<T: Scalar>(&self, set: &ParamSet<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(set, self.weight);
        let b = tape.param(set, self.bias);
        let y = tape.conv2d(x, w, Some(b), self.stride, Padding::Valid)?;
        tape.relu(y)
    }
}

/// Four 3x3 conv layers (stride 2, then 1), a dense projection to the
/// latent, layer norm and tanh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    pub config: EncoderConfig,
    convs: Vec<ConvLayer>,
    single_frame: Option<ConvLayer>,
    proj: Linear,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

impl Encoder {
    pub fn new<T: Scalar>(set: &mut ParamSet<T>, config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        if config.frames == 0 {
            return Err(Error::InvalidArgument("encoder needs at least one input frame".into()));
        }
        let side = config
            .feature_side()
            .ok_or_else(|| Error::InvalidArgument(format!("input size {} too small for the encoder", config.input_size)))?;
        let mut convs = Vec::with_capacity(NUM_CONV_LAYERS);
        for i in 0..NUM_CONV_LAYERS {
            let (in_c, stride) = if i == 0 { (config.frames, 2) } else { (NUM_FILTERS, 1) };
            convs.push(ConvLayer::new(set, &format!("encoder.conv{i}"), in_c, stride, rng));
        }
        let single_frame =
            config.single_frame_head.then(|| ConvLayer::new(set, "encoder.conv0_single", 1, 2, rng));
        let proj = Linear::new(set, "encoder.proj", side * side * NUM_FILTERS, LATENT_DIM, rng);
        let ln_gamma = set.add("encoder.ln.gamma", Tensor::from_fn([LATENT_DIM], |_| T::one()));
        let ln_beta = set.add("encoder.ln.beta", Tensor::zeros([LATENT_DIM]));
        Ok(Self { config, convs, single_frame, proj, ln_gamma, ln_beta })
    }

    pub fn flat_dim(&self) -> usize {
        self.proj.in_dim
    }

    /// Conv trunk: `[B, H, W, C] -> [B, flat]`. With `single_frame`, the input
    /// must have one channel and goes through the single-frame first layer.
    pub fn forward_conv<T: Scalar>(&self, set: &ParamSet<T>, tape: &mut Tape<T>, x: Var, single_frame: bool) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let n = self.config.input_size;
        if s.len() != 4 {
            return Err(shape_err("encode", format!("expected [B, H, W, C], got {s:?}")));
        }
        if s[1] != n || s[2] != n {
            return Err(Error::WrongInputSize { expected_h: n, expected_w: n, got_h: s[1], got_w: s[2] });
        }
        let first = if single_frame {
            self.single_frame
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("encoder was built without a single-frame head".into()))?
        } else {
            &self.convs[0]
        };
        let channels = if single_frame { 1 } else { self.config.frames };
        if s[3] != channels {
            return Err(shape_err("encode", format!("expected {channels} input channels, got {}", s[3])));
        }
        let mut h = first.forward(set, tape, x)?;
        for layer in &self.convs[1..] {
            h = layer.forward(set, tape, h)?;
        }
        let batch = s[0];
        tape.reshape(h, [batch, self.flat_dim()])
    }

    /// Dense projection, layer norm and tanh: `[B, flat] -> [B, 50]`.
    pub fn forward_head<T: Scalar>(&self, set: &ParamSet<T>, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let z = self.proj.forward(set, tape, h)?;
        let g = tape.param(set, self.ln_gamma);
        let b = tape.param(set, self.ln_beta);
        let z = tape.layer_norm(z, g, b, T::from_f64(LAYER_NORM_EPS))?;
        tape.tanh(z)
    }

    pub fn encode<T: Scalar>(&self, set: &ParamSet<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.forward_conv(set, tape, x, false)?;
        self.forward_head(set, tape, h)
    }

    pub fn encode_single_frame<T: Scalar>(&self, set: &ParamSet<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.forward_conv(set, tape, x, true)?;
        self.forward_head(set, tape, h)
    }

    /// Parameter ids of the conv trunk only.
    pub fn conv_params(&self) -> Vec<ParamId> {
        self.convs
            .iter()
            .chain(self.single_frame.iter())
            .flat_map(|c| [c.weight, c.bias])
            .collect()
    }
}

/// Converts batches of `[S, H, W]` u8 frame stacks into NHWC floats in `[0, 1]`.
pub fn stacks_to_nhwc<T: Scalar>(stacks: &[&[u8]], frames: usize, side: usize) -> Vec<T> {
    let plane = side * side;
    let scale = T::from_f64(1.0 / 255.0);
    let mut out = Vec::with_capacity(stacks.len() * plane * frames);
    for s in stacks {
        debug_assert_eq!(s.len(), plane * frames);
        for p in 0..plane {
            for f in 0..frames {
                out.push(T::from_f64(f64::from(s[f * plane + p])) * scale);
            }
        }
    }
    out
}
