use std::time::Instant;
use mose_core::autodiff::tensor::gemm_nt;

fn main() {
    for (m, k, n) in [(1280usize, 133usize, 128usize), (1344, 128, 512), (1344, 128, 128)] {
        let a = vec![1.0f64; m * k];
        let b = vec![1.0f64; n * k];
        let mut c = vec![0.0f64; m * n];
        let reps = 50;
        let t = Instant::now();
        for _ in 0..reps {
            gemm_nt(m, k, n, &a, &b, 0.0, &mut c);
        }
        let secs = t.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / secs / 1e9;
        println!("{}x{}x{}: {:.1} GFLOP/s", m, k, n, gflops);
    }
}
