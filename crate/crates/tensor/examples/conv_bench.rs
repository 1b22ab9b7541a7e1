//! Rough conv2d throughput probe used to size training runs.
//!
//! Run with `cargo run --release -p trimnet-tensor --example conv_bench`.

use std::time::Instant;

use trimnet_tensor::ops::{self, Conv2dArgs};
use trimnet_tensor::Tensor;

fn bench(label: &str, x_dims: Vec<usize>, w_dims: Vec<usize>, args: Conv2dArgs, reps: usize) {
    let x = Tensor::<f32>::from_fn(x_dims.clone(), |i| (i % 17) as f32 * 0.1 - 0.8);
    let w = Tensor::<f32>::from_fn(w_dims.clone(), |i| (i % 13) as f32 * 0.05 - 0.3);
    let y = ops::conv2d(&x, &w, args).unwrap();
    let macs = {
        let (od, wd) = (y.dims(), w.dims());
        od[0] * od[1] * od[2] * od[3] * wd[1] * wd[2] * wd[3]
    };

    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = ops::conv2d(&x, &w, args).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;

    let dy = vec![0.5f32; y.numel()];
    let t1 = Instant::now();
    for _ in 0..reps {
        let _ = ops::conv2d_backward(&x, &w, &dy, args, true, true).unwrap();
    }
    let bwd = t1.elapsed().as_secs_f64() / reps as f64;

    println!(
        "{label}: fwd {:.2} ms ({:.2} GMAC/s), bwd {:.2} ms ({:.2} GMAC/s)",
        fwd * 1e3,
        macs as f64 / fwd / 1e9,
        bwd * 1e3,
        2.0 * macs as f64 / bwd / 1e9,
    );
}

fn main() {
    let reps = 10;
    bench(
        "stage1 3x3 16->16 @32  batch 64",
        vec![64, 16, 32, 32],
        vec![16, 16, 3, 3],
        Conv2dArgs::new(1, 1, 1),
        reps,
    );
    bench(
        "stage2 3x3 32->32 @16  batch 64",
        vec![64, 32, 16, 16],
        vec![32, 32, 3, 3],
        Conv2dArgs::new(1, 1, 1),
        reps,
    );
    bench(
        "stage3 3x3 64->64 @8   batch 64",
        vec![64, 64, 8, 8],
        vec![64, 64, 3, 3],
        Conv2dArgs::new(1, 1, 1),
        reps,
    );
    bench(
        "stem   3x3  3->16 @32  batch 64",
        vec![64, 3, 32, 32],
        vec![16, 3, 3, 3],
        Conv2dArgs::new(1, 1, 1),
        reps,
    );
}
