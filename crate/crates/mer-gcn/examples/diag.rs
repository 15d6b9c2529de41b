use mer_gcn::data::{generate_synthetic, load_sequence, SyntheticConfig};
use mer_gcn::eval::{TrainConfig, Trainer};
use mer_gcn::model::ModelVariant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let amp: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(60.0);
    let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.03);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SyntheticConfig::new(4, 3, 2, 8, 42);
    cfg.noise_std = noise;
    cfg.bump_amplitude = amp;
    let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
    let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    let tc = TrainConfig {
        epochs: 1,
        lr: 1e-3,
        momentum: 0.9,
        clip_norm: Some(5.0),
        width_scale: 0.25,
        gcn_dims: None,
        gcn_slope: 0.2,
        seed: 1,
        variant: ModelVariant::MerGcn,
    };
    let trainer = Trainer::new(&manifest, &ids, &tc).unwrap();
    let seq = load_sequence(manifest.record(&ids[0]).unwrap()).unwrap();
    let pred = trainer.model().forward(&seq).unwrap();
    let norm = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>()).sqrt();
    eprintln!(
        "au_scores: {:?}",
        pred.au_scores
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
    );
    let mut model = trainer.model().clone();
    let label = manifest
        .class_index(&manifest.record(&ids[0]).unwrap().emotion)
        .unwrap();
    let loss = model.loss_with_grads(&seq, label).unwrap();
    eprintln!("loss {loss:.6}");
    for p in model.parameters() {
        if let Some(g) = &p.value.grad {
            if p.name.contains("stem.weight")
                || p.name.starts_with("gcn")
                || p.name.starts_with("head")
                || p.name.contains("stage4.block2.conv2.weight")
                || p.name.contains("stage1.block1.conv1.weight")
            {
                eprintln!(
                    "  grad |{}| = {:.3e}  |w| = {:.3e}",
                    p.name,
                    norm(g),
                    norm(p.value.data())
                );
            }
        }
    }
    // au_scores per record (2 per class) to gauge class separation at init
    for rid in [0usize, 1, 8, 9, 16, 17] {
        let rec = &manifest.records[rid];
        let s = load_sequence(rec).unwrap();
        let p = trainer.model().forward(&s).unwrap();
        eprintln!(
            "  {}  {}  au {:?}",
            rec.id,
            rec.emotion,
            p.au_scores.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        );
    }
    let cnn_tc = TrainConfig {
        epochs: 10,
        lr,
        momentum: 0.9,
        clip_norm: Some(5.0),
        width_scale: 0.25,
        gcn_dims: None,
        gcn_slope: 0.2,
        seed: 1,
        variant: ModelVariant::CnnOnly,
    };
    let mut tc_cnn = Trainer::new(&manifest, &ids, &cnn_tc).unwrap();
    for _ in 0..6 {
        tc_cnn.run_epochs(1).unwrap();
        let acc = tc_cnn.train_accuracy().unwrap();
        eprintln!(
            "cnn epoch {} loss {:.4} acc {:.3}",
            tc_cnn.epochs_run(),
            tc_cnn.history().last().unwrap(),
            acc
        );
        if acc == 1.0 { break; }
    }
    let tc2 = TrainConfig {
        epochs: 10,
        lr,
        momentum: 0.9,
        clip_norm: Some(5.0),
        width_scale: 0.25,
        gcn_dims: None,
        gcn_slope: 0.2,
        seed: 1,
        variant: ModelVariant::MerGcn,
    };
    let mut t2 = Trainer::new(&manifest, &ids, &tc2).unwrap();
    for _ in 0..10 {
        t2.run_epochs(1).unwrap();
        let acc = t2.train_accuracy().unwrap();
        eprintln!(
            "epoch {} loss {:.4} acc {:.3}",
            t2.epochs_run(),
            t2.history().last().unwrap(),
            acc
        );
        if acc == 1.0 {
            break;
        }
    }
}
