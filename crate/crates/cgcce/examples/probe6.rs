// scratch tuning probe for the ablation budget (removed before release)
use cgcce::config::ModelConfig;
use cgcce::synth::{synth_generate, SynthSpec};
use cgcce::train::{evaluate, train, TrainOpts};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let variant: String = args.get(3).cloned().unwrap_or_else(|| "full".into());

    let dir = std::env::temp_dir().join("cgcce_probe6_ds");
    let spec = SynthSpec {
        n_samples: 256,
        tile_size: 64,
        special_ratio: 0.3,
        jitter: 0.08,
        seed: 606,
        ..SynthSpec::default()
    };
    let manifest = if dir.join("manifest.json").exists() {
        cgcce::data::DatasetManifest::load(&dir).unwrap()
    } else {
        synth_generate(&dir, &spec).unwrap().0
    };
    let mut cfg = ModelConfig::toy().with_tile(64);
    match variant.as_str() {
        "full" => {}
        "no_gccm" => cfg.enable_gccm = false,
        "no_cgrr" => cfg.enable_cgrr = false,
        "no_scem" => cfg.enable_scem = false,
        "no_cfd" => cfg.enable_cfd = false,
        _ => panic!("unknown variant"),
    }
    let opts = TrainOpts {
        epochs,
        batch: 8,
        seed,
        lr0: 5e-4,
        lr_min: 5e-6,
        early_stop_train_f1: None,
    };
    let t0 = std::time::Instant::now();
    let out = train(&cfg, &dir, &manifest, &opts).unwrap();
    let (model, params) = out.checkpoint.build_model().unwrap();
    let val = evaluate(&model, &params, &dir, &manifest, "val").unwrap();
    println!(
        "variant {variant} seed {seed} epochs {epochs} best_val_f1 {:.4} (epoch {}) final_val_f1 {:.4} report_f1 {:.4} iou {:.4} wall {:.0}s",
        out.checkpoint.meta.best_val_f1,
        out.checkpoint.meta.best_epoch,
        out.history.last().unwrap().val_f1,
        val.f1,
        val.iou,
        t0.elapsed().as_secs_f64()
    );
}
