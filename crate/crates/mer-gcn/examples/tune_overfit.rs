use mer_gcn::data::{generate_synthetic, SyntheticConfig};
use mer_gcn::eval::{Trainer, TrainConfig};
use mer_gcn::model::ModelVariant;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8.0);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SyntheticConfig::new(4, 3, 2, 8, 42);
    cfg.noise_std = noise;
    let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
    let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    let tc = TrainConfig {
        epochs: 200, lr, momentum: 0.9, clip_norm: Some(5.0),
        width_scale: 0.25, gcn_dims: None, gcn_slope: 0.2, seed: 1,
        variant: ModelVariant::MerGcn,
    };
    let t0 = Instant::now();
    let mut trainer = Trainer::new(&manifest, &ids, &tc).unwrap();
    eprintln!("build: {:.1}s", t0.elapsed().as_secs_f64());
    for chunk in 0..30 {
        trainer.run_epochs(2).unwrap();
        let loss = *trainer.history().last().unwrap();
        let acc = trainer.train_accuracy().unwrap();
        eprintln!("epoch {:3}  loss {:.4}  train_acc {:.3}  elapsed {:.0}s",
                 (chunk+1)*2, loss, acc, t0.elapsed().as_secs_f64());
        if acc == 1.0 { break; }
    }
}
