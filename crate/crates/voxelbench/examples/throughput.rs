//! Measures convolution kernel throughput on this machine, forward and
//! backward. Useful for sizing training runs before launching them.

use std::time::Instant;

use voxelbench::tensor::ops::{conv3d, Padding};
use voxelbench::tensor::{Tape, Tensor, Var};

fn main() {
    let (b, cin, cout, e, k) = (8usize, 40usize, 40usize, 19usize, 3usize);
    let o = e - k + 1;
    let macs = (b * cout * cin * o * o * o * k * k * k) as f64;

    let x = Tensor::<f32>::from_fn(&[b, cin, e, e, e], |i| (i % 17) as f32 * 0.1 - 0.8);
    let w = Tensor::<f32>::from_fn(&[cout, cin, k, k, k], |i| (i % 13) as f32 * 0.01 - 0.06);

    // forward only
    let xv = Var::constant(x.clone());
    let wv = Var::constant(w.clone());
    let reps = 5;
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let y = conv3d(None, &xv, &wv, None, Padding::Valid).unwrap();
        sink += y.value().data()[0];
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "forward : {:7.2} ms  {:6.2} G MAC/s   (sink {sink:.3})",
        dt * 1e3,
        macs / dt / 1e9
    );

    // forward + one gradient at a time, then both
    for (label, track_x, track_w) in [
        ("fwd+dx ", true, false),
        ("fwd+dw ", false, true),
        ("fwd+bwd", true, true),
    ] {
        let t0 = Instant::now();
        for _ in 0..reps {
            let tape = Tape::new();
            let xt = if track_x {
                tape.watch(x.clone())
            } else {
                Var::constant(x.clone())
            };
            let wt = if track_w {
                tape.watch(w.clone())
            } else {
                Var::constant(w.clone())
            };
            let y = conv3d(Some(&tape), &xt, &wt, None, Padding::Valid).unwrap();
            let loss = voxelbench::tensor::ops::sum(Some(&tape), &y).unwrap();
            let grads = tape.backward(&loss).unwrap();
            if track_w {
                sink += grads.of(&wt).unwrap().data()[0];
            } else {
                sink += grads.of(&xt).unwrap().data()[0];
            }
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        let dirs = 1.0 + if track_x { 1.0 } else { 0.0 } + if track_w { 1.0 } else { 0.0 };
        println!(
            "{label} : {:7.2} ms  {:6.2} G MAC/s   (sink {sink:.3})",
            dt * 1e3,
            dirs * macs / dt / 1e9
        );
    }
}
