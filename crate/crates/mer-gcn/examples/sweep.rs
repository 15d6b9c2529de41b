use std::collections::{BTreeMap, BTreeSet};

use mer_gcn::data::{generate_synthetic, Region, SyntheticConfig};
use mer_gcn::eval::{TrainConfig, Trainer};
use mer_gcn::model::ModelVariant;
use std::time::Instant;

fn rich_au_map(counts: bool) -> (BTreeMap<usize, BTreeSet<u32>>, BTreeMap<u32, Region>) {
    // Distinct AU counts per class separate class energies; otherwise 4 each.
    let sets: [&[u32]; 3] = if counts {
        [&[6, 12], &[4, 9, 14], &[1, 2, 5, 26]]
    } else {
        [&[1, 2, 6, 12], &[4, 9, 14, 15], &[5, 10, 20, 26]]
    };
    let au_map = sets
        .iter()
        .enumerate()
        .map(|(c, s)| (c, s.iter().copied().collect()))
        .collect();
    let mut region_map = BTreeMap::new();
    let all: Vec<u32> = sets.iter().flat_map(|s| s.iter().copied()).collect();
    for (i, au) in all.into_iter().enumerate() {
        let row = 2 + (i / 4) * 28;
        let col = 2 + (i % 4) * 28;
        region_map.insert(au, Region { row, col, size: 24 });
    }
    (au_map, region_map)
}

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let lr: f64 = a.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let momentum: f64 = a.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.9);
    let noise: f64 = a.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let amp: f64 = a.get(4).map(|s| s.parse().unwrap()).unwrap_or(80.0);
    let mode: String = a.get(5).cloned().unwrap_or_else(|| "default".into());
    let scale: f64 = a.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.25);
    let max_epochs: usize = a.get(7).map(|s| s.parse().unwrap()).unwrap_or(20);
    let variant = if a.get(8).map(|s| s == "cnn").unwrap_or(false) {
        ModelVariant::CnnOnly
    } else {
        ModelVariant::MerGcn
    };

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SyntheticConfig::new(4, 3, 2, 8, 42);
    cfg.noise_std = noise;
    cfg.bump_amplitude = amp;
    if mode != "default" {
        let (au_map, region_map) = rich_au_map(mode == "counts");
        cfg.au_map = au_map;
        cfg.region_map = region_map;
    }
    let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
    let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    let tc = TrainConfig {
        epochs: max_epochs,
        lr,
        momentum,
        clip_norm: Some(5.0),
        width_scale: scale,
        gcn_dims: None,
        gcn_slope: 0.2,
        seed: 1,
        variant,
    };
    eprintln!(
        "sweep lr={lr} mom={momentum} noise={noise} amp={amp} mode={mode} scale={scale} variant={variant:?}"
    );
    let t0 = Instant::now();
    let mut trainer = Trainer::new(&manifest, &ids, &tc).unwrap();
    for _ in 0..max_epochs {
        trainer.run_epochs(1).unwrap();
        let acc = trainer.train_accuracy().unwrap();
        eprintln!(
            "  epoch {:3} loss {:.4} acc {:.3} t={:.0}s",
            trainer.epochs_run(),
            trainer.history().last().unwrap(),
            acc,
            t0.elapsed().as_secs_f64()
        );
        if acc == 1.0 {
            eprintln!("OVERFIT at epoch {} in {:.0}s", trainer.epochs_run(), t0.elapsed().as_secs_f64());
            return;
        }
    }
    eprintln!("NO OVERFIT within {max_epochs} epochs");
}
