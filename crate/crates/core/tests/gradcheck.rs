//! Finite-difference checks for every tape op.

use curl_core::autodiff::gradcheck::{check_op, OPS};
use curl_core::autodiff::{Tape, Tensor};
use curl_core::rng::{stream, Stream};

#[test]
fn every_op_matches_central_differences() {
    let mut rng = stream(11, Stream::Probe);
    let mut failures = Vec::new();
    for (name, make) in OPS {
        let worst = check_op(*make, 20, &mut rng).unwrap();
        println!("{name:<24} {worst:.2e}");
        if worst >= 1e-3 {
            failures.push((*name, worst));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::new([2], vec![1.0, -2.0]).unwrap().with_requires_grad(true));
    let d = tape.detach(x);
    let y = tape.mul(x, d).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    // d(x * stop(x))/dx = stop(x)
    assert_eq!(tape.grad(x).unwrap(), &[1.0, -2.0]);
}

#[test]
fn f32_and_f64_agree_on_a_small_graph() {
    fn run<T: curl_core::autodiff::Scalar>() -> Vec<f64> {
        let mut tape = Tape::<T>::new();
        let x = tape.leaf(&Tensor::new([2, 2], [0.5, -1.0, 2.0, 0.25].map(T::from_f64).to_vec()).unwrap().with_requires_grad(true));
        let y = tape.tanh(x).unwrap();
        let z = tape.matmul(y, x).unwrap();
        let l = tape.mean(z).unwrap();
        tape.backward(l).unwrap();
        tape.grad(x).unwrap().iter().map(|&g| <T as curl_core::autodiff::Scalar>::to_f64(g)).collect()
    }
    for (a, b) in run::<f32>().iter().zip(run::<f64>()) {
        assert!((a - b).abs() < 1e-5);
    }
}
