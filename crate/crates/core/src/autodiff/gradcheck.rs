//! Central finite-difference gradient checks, run in `f64`.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{Padding, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Builds an op's output from its input leaves.
pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// One random instance of an op under test.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Build>,
}

pub const STEP: f64 = 1e-5;

/// `sum(out * proj)` and its analytic input gradients.
fn projected(inputs: &[Tensor<f64>], build: &Build, proj: &mut Option<Vec<f64>>, rng: &mut Rng) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars)?;
    let n = tape.value(out).len();
    let r = proj.get_or_insert_with(|| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).clone();
    let rv = tape.constant(tape.shape(out).to_vec(), r)?;
    let prod = tape.mul(out, rv)?;
    let l = tape.sum(prod)?;
    let value = tape.value(l)[0];
    tape.backward(l)?;
    let grads = vars.iter().map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec)).collect();
    Ok((value, grads))
}

/// Largest relative error `|a - n| / max(|a| + |n|, 1e-6)` between the
/// analytic and central-difference gradients over every input entry.
pub fn max_relative_error(case: &Case, rng: &mut Rng) -> Result<f64> {
    let mut proj = None;
    let (_, analytic) = projected(&case.inputs, &*case.build, &mut proj, rng)?;
    let mut worst = 0.0f64;
    for (k, t) in case.inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut eval = |d: f64| -> Result<f64> {
                let mut moved = case.inputs.clone();
                moved[k].values_mut()[i] += d;
                Ok(projected(&moved, &*case.build, &mut proj, rng)?.0)
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            let a = analytic[k][i];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

fn tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape matches")
        .with_requires_grad(true)
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

fn unary(rng: &mut Rng, lo: f64, hi: f64, f: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Case {
    let (r, c) = dims(rng);
    Case { inputs: vec![tensor(rng, &[r, c], lo, hi)], build: Box::new(move |t, v| f(t, v[0])) }
}

fn binary(rng: &mut Rng, f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Case {
    let (r, c) = dims(rng);
    Case { inputs: vec![tensor(rng, &[r, c], -2.0, 2.0), tensor(rng, &[r, c], -2.0, 2.0)], build: Box::new(move |t, v| f(t, v[0], v[1])) }
}

/// Draws one instance of a named op whose inputs stay away from kinks with
/// probability one.
pub type MakeCase = fn(&mut Rng) -> Case;

/// Every differentiable op on the tape.
pub const OPS: &[(&str, MakeCase)] = &[
    ("relu", |r| unary(r, -2.0, 2.0, Tape::relu)),
    ("tanh", |r| unary(r, -3.0, 3.0, Tape::tanh)),
    ("exp", |r| unary(r, -2.0, 2.0, Tape::exp)),
    ("log", |r| unary(r, 0.2, 3.0, Tape::log)),
    ("square", |r| unary(r, -2.0, 2.0, Tape::square)),
    ("sum", |r| unary(r, -2.0, 2.0, Tape::sum)),
    ("mean", |r| unary(r, -2.0, 2.0, Tape::mean)),
    ("sum_rows", |r| unary(r, -2.0, 2.0, Tape::sum_rows)),
    ("sub_row_max", |r| unary(r, -2.0, 2.0, Tape::sub_row_max)),
    ("transpose", |r| unary(r, -2.0, 2.0, Tape::transpose)),
    ("add", |r| binary(r, Tape::add)),
    ("sub", |r| binary(r, Tape::sub)),
    ("mul", |r| binary(r, Tape::mul)),
    ("minimum", |r| binary(r, Tape::minimum)),
    ("scale+add_scalar", |rng| {
        let (r, c) = dims(rng);
        let k = rng.random_range(-3.0..3.0);
        Case {
            inputs: vec![tensor(rng, &[r, c], -2.0, 2.0)],
            build: Box::new(move |t, v| {
                let s = t.scale(v[0], k)?;
                t.add_scalar(s, 0.5)
            }),
        }
    }),
    ("scale_by", |rng| {
        let (r, c) = dims(rng);
        Case { inputs: vec![tensor(rng, &[r, c], -2.0, 2.0), tensor(rng, &[1], -2.0, 2.0)], build: Box::new(|t, v| t.scale_by(v[0], v[1])) }
    }),
    ("matmul", |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..5);
        Case { inputs: vec![tensor(rng, &[m, k], -1.0, 1.0), tensor(rng, &[k, n], -1.0, 1.0)], build: Box::new(|t, v| t.matmul(v[0], v[1])) }
    }),
    ("add_bias", |rng| {
        let (r, c) = dims(rng);
        Case { inputs: vec![tensor(rng, &[r, c], -1.0, 1.0), tensor(rng, &[c], -1.0, 1.0)], build: Box::new(|t, v| t.add_bias(v[0], v[1])) }
    }),
    ("conv2d", |rng| {
        let b = rng.random_range(1..3);
        let hw = rng.random_range(4..7);
        let c = rng.random_range(1..3);
        let f = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let pad = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        Case {
            inputs: vec![tensor(rng, &[b, hw, hw, c], -1.0, 1.0), tensor(rng, &[3, 3, c, f], -1.0, 1.0), tensor(rng, &[f], -1.0, 1.0)],
            build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
        }
    }),
    ("layer_norm", |rng| {
        let r = rng.random_range(1..4);
        let c = rng.random_range(2..7);
        Case {
            inputs: vec![tensor(rng, &[r, c], -2.0, 2.0), tensor(rng, &[c], 0.5, 1.5), tensor(rng, &[c], -0.5, 0.5)],
            build: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        }
    }),
    ("gaussian_log_prob", |rng| {
        let (r, c) = dims(rng);
        Case {
            inputs: vec![tensor(rng, &[r, c], -2.0, 2.0), tensor(rng, &[r, c], -1.0, 1.0), tensor(rng, &[r, c], -1.0, 0.5)],
            build: Box::new(|t, v| t.gaussian_log_prob(v[0], v[1], v[2])),
        }
    }),
    ("softmax_cross_entropy", |rng| {
        let r = rng.random_range(1..5);
        let c = rng.random_range(2..6);
        let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        Case { inputs: vec![tensor(rng, &[r, c], -3.0, 3.0)], build: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)) }
    }),
    ("reshape+slice+concat", |rng| {
        let r = rng.random_range(2..5);
        let c = rng.random_range(2..5);
        Case {
            inputs: vec![tensor(rng, &[r, c], -1.0, 1.0), tensor(rng, &[r, 2], -1.0, 1.0)],
            build: Box::new(move |t, v| {
                let s = t.slice(v[0], 1, 1, c)?;
                let j = t.concat(&[s, v[1]], 1)?;
                let sq = t.square(j)?;
                t.reshape(sq, [r * (c + 1)])
            }),
        }
    }),
    ("shared_leaf", |rng| {
        let (r, c) = dims(rng);
        Case {
            inputs: vec![tensor(rng, &[r, c], -2.0, 2.0)],
            build: Box::new(|t, v| {
                let e = t.exp(v[0])?;
                t.mul(e, v[0])
            }),
        }
    }),
];

/// Worst error of `instances` random draws of an op.
pub fn check_op(make: MakeCase, instances: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(max_relative_error(&make(rng), rng)?);
    }
    Ok(worst)
}
