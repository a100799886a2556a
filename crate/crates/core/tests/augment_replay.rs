//! Crop and replay sampling statistics.

use curl_core::augment::{random_crop_stack, CropSpec, FrameStack};
use curl_core::replay::{Action, NStepAccumulator, ReplayBuffer, Transition};
use curl_core::rng::{stream, Stream};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Frame `f`, pixel `(r, c)` holds a value unique to its position and frame.
fn coded_stack(frames: usize, side: usize) -> FrameStack {
    let data = (0..frames).flat_map(|f| (0..side * side).map(move |i| ((i * 3 + f * 101) % 251) as u8)).collect();
    FrameStack::new(frames, side, side, data).unwrap()
}

fn chi_square_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expect = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn identity_crop() {
    let s = coded_stack(3, 12);
    let mut rng = stream(0, Stream::Augment);
    let (c, spec) = random_crop_stack(&s, 12, 12, &mut rng).unwrap();
    assert_eq!(c, s);
    assert_eq!((spec.row, spec.col), (0, 0));
}

#[test]
fn one_window_for_every_frame() {
    let s = coded_stack(3, 50);
    let mut rng = stream(1, Stream::Augment);
    for _ in 0..1000 {
        let (c, spec) = random_crop_stack(&s, 42, 42, &mut rng).unwrap();
        for f in 0..3 {
            for r in [0, 17, 41] {
                for col in [0, 23, 41] {
                    assert_eq!(c.pixel(f, r, col), s.pixel(f, r + spec.row, col + spec.col));
                }
            }
        }
    }
}

#[test]
fn offsets_uniform_over_81_cells() {
    let mut rng = stream(2, Stream::Augment);
    let mut counts = [0u64; 81];
    for _ in 0..10_000 {
        let spec = CropSpec::random(50, 50, 42, 42, &mut rng).unwrap();
        counts[spec.row * 9 + spec.col] += 1;
    }
    assert!(counts.iter().all(|&c| c > 0));
    let p = chi_square_p(&counts);
    assert!(p > 0.001, "p = {p}");
}

#[test]
fn replay_samples_uniformly() {
    let mut buf = ReplayBuffer::new(20).unwrap();
    for i in 0..35u32 {
        buf.push(Transition::new(i, Action::Discrete(0), 0.0, i + 1, false));
    }
    let mut rng = stream(3, Stream::Agent);
    let mut counts = [0u64; 20];
    for _ in 0..2000 {
        for i in buf.sample_indices(10, 1, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let p = chi_square_p(&counts);
    assert!(p > 0.001, "p = {p}");
}

proptest! {
    #[test]
    fn nstep_matches_direct_sum(rewards in prop::collection::vec(-1.0f32..1.0, 1..12), n in 1usize..5, gamma in 0.5f32..1.0) {
        let mut acc = NStepAccumulator::new(n, gamma).unwrap();
        let len = rewards.len();
        let mut out = Vec::new();
        for (t, &r) in rewards.iter().enumerate() {
            out.extend(acc.push(Transition::new(t, Action::Discrete(0), r, t + 1, t + 1 == len), false));
        }
        prop_assert_eq!(out.len(), len);
        for tr in &out {
            let start = tr.obs;
            let h = (len - start).min(n);
            let direct: f32 = (0..h).map(|j| gamma.powi(j as i32) * rewards[start + j]).sum();
            prop_assert_eq!(tr.horizon as usize, h);
            prop_assert_eq!(tr.next_obs, start + h);
            prop_assert!((tr.reward - direct).abs() < 1e-5);
            prop_assert_eq!(tr.done, start + h == len);
        }
    }

    #[test]
    fn center_crop_is_centered(inp in 1usize..40, out_frac in 0.1f64..1.0) {
        let out = ((inp as f64 * out_frac) as usize).max(1);
        let spec = CropSpec::center(inp, inp, out, out).unwrap();
        prop_assert_eq!(spec.row, (inp - out) / 2);
        prop_assert!(spec.row + out <= inp);
    }
}
