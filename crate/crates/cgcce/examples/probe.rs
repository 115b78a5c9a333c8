// scratch tuning probe (removed before release)
use cgcce::config::ModelConfig;
use cgcce::decoder::CgcceModel;
use cgcce::synth::{synth_generate, SynthSpec};
use cgcce::train::{evaluate, train, TrainOpts};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let jitter: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.08);
    let bmax: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(5);

    let dir = std::env::temp_dir().join(format!("cgcce_probe_{seed}_{epochs}"));
    let _ = std::fs::remove_dir_all(&dir);
    let spec = SynthSpec {
        n_samples: 10,
        tile_size: 64,
        ratios: [8, 1, 1],
        seed,
        jitter,
        buildings_max: bmax,
        ..SynthSpec::default()
    };
    let (manifest, _) = synth_generate(&dir, &spec).unwrap();
    let cfg = ModelConfig::toy().with_tile(64);
    let opts = TrainOpts {
        epochs,
        batch: 8,
        seed,
        lr0: 5e-4,
        lr_min: 5e-6,
        early_stop_train_f1: Some(0.95),
    };
    let t0 = std::time::Instant::now();
    let out = train(&cfg, &dir, &manifest, &opts).unwrap();
    let (model, _) = CgcceModel::new(&cfg, opts.seed).unwrap();
    let report = evaluate(&model, &out.final_params, &dir, &manifest, "train").unwrap();
    println!(
        "seed {seed} epochs_run {} of {epochs} train_f1 {:.4} iou {:.4} p {:.4} r {:.4} loss {:.4} wall {:.1}s",
        out.history.len(),
        report.f1,
        report.iou,
        report.precision,
        report.recall,
        out.history.last().unwrap().train_loss,
        t0.elapsed().as_secs_f64()
    );
    for id in manifest.ids("train").unwrap() {
        let smp = manifest.load_sample(&dir, "train", id).unwrap();
        let pred = model.predict_mask(&out.final_params, &smp.image_t1, &smp.image_t2).unwrap();
        let c = cgcce::metrics::confusion(&pred.data, &smp.mask.data).unwrap();
        let m = cgcce::metrics::metrics(&c);
        println!("  {id}: f1 {:.3} tp {} fp {} fn {} (gt positives {})", m.f1, c.tp, c.fp, c.fn_, smp.mask.positives());
    }
}
