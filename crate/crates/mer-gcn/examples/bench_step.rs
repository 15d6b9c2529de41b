use mer_gcn::model::tiny_gradcheck_target;
use mer_gcn::optim::DiffTarget;
use std::time::Instant;

fn main() {
    // scale 0.125 model (gradcheck size)
    let mut target = tiny_gradcheck_target(1, false).unwrap();
    let t0 = Instant::now();
    for _ in 0..3 { target.eval().unwrap(); }
    println!("scale 0.125 forward: {:.3} s/run", t0.elapsed().as_secs_f64() / 3.0);
    let t1 = Instant::now();
    for _ in 0..3 { target.eval_with_grads().unwrap(); }
    println!("scale 0.125 fwd+bwd: {:.3} s/run", t1.elapsed().as_secs_f64() / 3.0);
}
