use bridge_ddim::kernels::*;
use bridge_ddim::tensor::Tensor;
use std::time::Instant;

fn t(shape: Vec<usize>) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
}

fn main() {
    // Heaviest desk layers: up0.res0 conv1 at 24x96 with cin 48 -> cout 16,
    // and up1.res0 at 12x48 with cin 80 -> 32.
    for (h, w, cin, cout) in [(24usize, 96, 48, 16), (12, 48, 80, 32), (24, 96, 16, 16)] {
        let x = t(vec![32, h, w, cin]);
        let k = t(vec![3, 3, cin, cout]);
        let b = t(vec![cout]);
        let g = t(vec![32, h, w, cout]);
        let reps = 10;
        let t0 = Instant::now();
        for _ in 0..reps { let _ = conv2d(&x, &k, &b).unwrap(); }
        let fwd = t0.elapsed().as_secs_f64() / reps as f64;
        let t0 = Instant::now();
        for _ in 0..reps { let _ = conv2d_grad(&x, &k, &g).unwrap(); }
        let bwd = t0.elapsed().as_secs_f64() / reps as f64;
        let macs = 32.0 * (h * w * 9 * cin * cout) as f64;
        println!("{h}x{w} {cin}->{cout}: fwd {:.1} ms ({:.2} GMAC/s)  bwd {:.1} ms ({:.2} GMAC/s x3)",
            fwd * 1e3, macs / fwd / 1e9, bwd * 1e3, 3.0 * macs / bwd / 1e9);
    }
}
