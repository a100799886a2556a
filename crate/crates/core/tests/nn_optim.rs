//! Conv, MLP, encoder and Adam against hand-computed values.

use curl_core::autodiff::{Adam, AdamConfig, Padding, ParamSet, Tape, Tensor};
use curl_core::nn::{orthogonal, Encoder, EncoderConfig, Mlp, LATENT_DIM};
use curl_core::rng::{stream, Stream};
use proptest::prelude::*;

#[test]
fn conv_all_ones_gives_nines() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant([1, 5, 5, 1], vec![1.0; 25]).unwrap();
    let w = tape.constant([3, 3, 1, 1], vec![1.0; 9]).unwrap();
    let y = tape.conv2d(x, w, None, 1, Padding::Valid).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 3, 1]);
    assert!(tape.value(y).iter().all(|&v| v == 9.0));
    // Same padding: corners see 4 ones, edges 6, interior 9.
    let y = tape.conv2d(x, w, None, 1, Padding::Same).unwrap();
    let v = tape.value(y);
    assert_eq!((v[0], v[1], v[6]), (4.0, 6.0, 9.0));
}

#[test]
fn conv_matches_direct_loop() {
    let xs: Vec<f64> = (0..2 * 6 * 6 * 2).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
    let ws: Vec<f64> = (0..3 * 3 * 2 * 3).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.constant([2, 6, 6, 2], xs.clone()).unwrap();
    let w = tape.constant([3, 3, 2, 3], ws.clone()).unwrap();
    let y = tape.conv2d(x, w, None, 2, Padding::Valid).unwrap();
    assert_eq!(tape.shape(y), &[2, 2, 2, 3]);
    let out = tape.value(y);
    for b in 0..2 {
        for oy in 0..2 {
            for ox in 0..2 {
                for f in 0..3 {
                    let mut s = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for c in 0..2 {
                                s += xs[((b * 6 + oy * 2 + ky) * 6 + ox * 2 + kx) * 2 + c] * ws[((ky * 3 + kx) * 2 + c) * 3 + f];
                            }
                        }
                    }
                    assert_eq!(out[((b * 2 + oy) * 2 + ox) * 3 + f], s);
                }
            }
        }
    }
}

#[test]
fn mlp_matches_hand_forward() {
    let mut set = ParamSet::<f64>::new();
    let mlp = Mlp::new(&mut set, "m", &[2, 3, 1], &mut stream(0, Stream::Init)).unwrap();
    let p = |name: &str| set.get(set.find(name).unwrap()).values().to_vec();
    let (w0, b0, w1, b1) = (p("m.0.weight"), p("m.0.bias"), p("m.1.weight"), p("m.1.bias"));
    let x = [0.3, -1.2];
    let h: Vec<f64> = (0..3).map(|j| (x[0] * w0[j] + x[1] * w0[3 + j] + b0[j]).max(0.0)).collect();
    let expect = (0..3).map(|j| h[j] * w1[j]).sum::<f64>() + b1[0];
    let mut tape = Tape::new();
    let xv = tape.constant([1, 2], x.to_vec()).unwrap();
    let y = mlp.forward(&set, &mut tape, xv).unwrap();
    assert!((tape.value(y)[0] - expect).abs() < 1e-12);
}

#[test]
fn orthogonal_columns() {
    let w: Tensor<f64> = orthogonal(8, 5, &mut stream(1, Stream::Init));
    let v = w.values();
    for a in 0..5 {
        for b in 0..5 {
            let dot: f64 = (0..8).map(|r| v[r * 5 + a] * v[r * 5 + b]).sum();
            assert!((dot - f64::from(u8::from(a == b))).abs() < 1e-9);
        }
    }
}

#[test]
fn encoder_output_is_normalized_latent() {
    let cfg = EncoderConfig { frames: 3, input_size: 21, single_frame_head: false };
    let mut set = ParamSet::<f64>::new();
    let enc = Encoder::new(&mut set, cfg, &mut stream(2, Stream::Init)).unwrap();
    let mut tape = Tape::new();
    let vals: Vec<f64> = (0..2 * 21 * 21 * 3).map(|i| ((i * 7919) % 256) as f64 / 255.0).collect();
    let x = tape.constant([2, 21, 21, 3], vals).unwrap();
    let z = enc.encode(&set, &mut tape, x).unwrap();
    assert_eq!(tape.shape(z), &[2, LATENT_DIM]);
    for row in tape.value(z).chunks(LATENT_DIM) {
        assert!(row.iter().all(|v| v.abs() < 1.0));
        // Fresh layer norm has unit gain and zero shift, so atanh(z) has zero
        // mean and variance v / (v + eps) <= 1 for the raw variance v.
        let pre: Vec<f64> = row.iter().map(|v| v.atanh()).collect();
        let mean = pre.iter().sum::<f64>() / LATENT_DIM as f64;
        let var = pre.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / LATENT_DIM as f64;
        assert!(mean.abs() < 1e-6 && var <= 1.0 && var > 0.9, "{mean} {var}");
    }
}

#[test]
fn encoder_rejects_wrong_size() {
    let cfg = EncoderConfig { frames: 3, input_size: 21, single_frame_head: false };
    let mut set = ParamSet::<f32>::new();
    let enc = Encoder::new(&mut set, cfg, &mut stream(2, Stream::Init)).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant([1, 20, 20, 3], vec![0.0; 1200]).unwrap();
    assert!(enc.encode(&set, &mut tape, x).is_err());
}

fn one_param(v: f64, g: f64) -> ParamSet<f64> {
    let mut set = ParamSet::new();
    let id = set.add("p", Tensor::new([1], vec![v]).unwrap().with_requires_grad(true));
    set.get_mut(id).accumulate_grad(&[g]).unwrap();
    set
}

#[test]
fn adam_first_steps_by_hand() {
    let cfg = AdamConfig::new(0.1);
    let mut set = one_param(1.0, 2.0);
    let mut opt = Adam::new(cfg, &set).unwrap();
    opt.step(&mut set).unwrap();
    // Step 1: mhat = g, vhat = g^2, so the move is lr * g / (|g| + eps).
    let after1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
    assert!((set.tensors()[0].values()[0] - after1).abs() < 1e-12);
    set.tensors_mut()[0].accumulate_grad(&[-1.0]).unwrap();
    opt.step(&mut set).unwrap();
    let m = 0.9 * (0.1 * 2.0) + 0.1 * -1.0;
    let v = 0.999 * (0.001 * 4.0) + 0.001 * 1.0;
    let mhat = m / (1.0 - 0.81);
    let vhat = v / (1.0 - 0.999f64.powi(2));
    let after2 = after1 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
    assert!((set.tensors()[0].values()[0] - after2).abs() < 1e-12);
}

proptest! {
    #[test]
    fn adam_first_step_size_is_lr(g in prop::num::f64::NORMAL.prop_filter("moderate", |g| g.abs() > 1e-3 && g.abs() < 1e6), lr in 1e-5f64..1.0) {
        let mut set = one_param(0.0, g);
        let mut opt = Adam::new(AdamConfig::new(lr), &set).unwrap();
        opt.step(&mut set).unwrap();
        let moved = set.tensors()[0].values()[0];
        prop_assert!((moved.abs() - lr).abs() < lr * 1e-4);
        prop_assert!(moved.signum() == -g.signum());
    }
}
