use mer_gcn::conv::{conv3d_forward, conv3d_backward_input, conv3d_backward_kernel, ConvGeometry};
use std::time::Instant;

fn bench(name: &str, c_in: usize, c_out: usize, t: usize, hw: usize, stride: [usize;3], k: [usize;3], pad: [usize;3]) {
    let input: Vec<f64> = (0..c_in*t*hw*hw).map(|i| (i % 17) as f64 * 0.1 - 0.8).collect();
    let kernel: Vec<f64> = (0..c_out*c_in*k[0]*k[1]*k[2]).map(|i| (i % 13) as f64 * 0.05 - 0.3).collect();
    let g = ConvGeometry::resolve(&[c_in,t,hw,hw], &[c_out,c_in,k[0],k[1],k[2]], stride, pad).unwrap();
    let macs = (c_out*g.t_out*g.h_out*g.w_out*c_in*k[0]*k[1]*k[2]) as f64;
    let reps = (2e9 / macs).ceil().max(1.0) as usize;
    let t0 = Instant::now();
    let mut out = Vec::new();
    for _ in 0..reps { out = conv3d_forward(&g, &input, &kernel); }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    let t1 = Instant::now();
    for _ in 0..reps { let _ = conv3d_backward_input(&g, &out, &kernel); }
    let bwi = t1.elapsed().as_secs_f64() / reps as f64;
    let t2 = Instant::now();
    for _ in 0..reps { let _ = conv3d_backward_kernel(&g, &out, &input); }
    let bwk = t2.elapsed().as_secs_f64() / reps as f64;
    println!("{name}: fwd {:.2} GMAC/s  bw_in {:.2}  bw_k {:.2}  ({} reps)",
        macs/fwd/1e9, macs/bwi/1e9, macs/bwk/1e9, reps);
}

fn main() {
    bench("stage1@0.125 (8ch 56x56)", 8, 8, 8, 56, [1,1,1], [3,3,3], [1,1,1]);
    bench("stage1@0.25 (16ch 56x56)", 16, 16, 8, 56, [1,1,1], [3,3,3], [1,1,1]);
    bench("stem@0.25 (1->16 112x112)", 1, 16, 8, 112, [1,2,2], [3,7,7], [1,3,3]);
    bench("stage2first@0.25 (16->32)", 16, 32, 8, 56, [2,2,2], [3,3,3], [1,1,1]);
}
