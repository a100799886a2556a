use curl_core::autodiff::*;
use curl_core::nn::*;
use curl_core::rng::*;
fn main() {
    for &(side, b) in &[(42usize, 128usize), (42, 32), (21, 128), (21, 64), (21,32)] {
        let mut rng = stream(0, Stream::Init);
        let mut set = ParamSet::<f32>::new();
        let enc = Encoder::new(&mut set, EncoderConfig { frames: 3, input_size: side, single_frame_head: false }, &mut rng).unwrap();
        let x: Vec<f32> = (0..b * side * side * 3).map(|i| (i % 7) as f32 / 7.0).collect();
        let t0 = std::time::Instant::now();
        let n = 5;
        for _ in 0..n {
            let mut tape = Tape::new();
            let xv = tape.constant([b, side, side, 3], x.clone()).unwrap();
            let z = enc.encode(&set, &mut tape, xv).unwrap();
            let l = tape.mean(z).unwrap();
            tape.backward(l).unwrap();
            set.accumulate_from(&tape).unwrap();
        }
        let fb = t0.elapsed().as_secs_f64() / n as f64;
        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let mut tape = Tape::no_grad();
            let xv = tape.constant([b, side, side, 3], x.clone()).unwrap();
            let _z = enc.encode(&set, &mut tape, xv).unwrap();
        }
        let f = t0.elapsed().as_secs_f64() / n as f64;
        println!("side {side} batch {b}: fwd+bwd {:.1} ms, fwd {:.1} ms", fb * 1e3, f * 1e3);
    }
}
