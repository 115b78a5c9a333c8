//! `cgcce` command line: dataset synthesis and tiling, training,
//! evaluation, prediction, component ablation, and model cost reporting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cgcce::config::{validate_config, ModelConfig};
use cgcce::data::{
    overlay_image, read_gray_png, read_rgb_png, save_tile, split, tile_images, write_gray_png,
    write_rgb_png, DatasetManifest, GrayImage, TileMode, TilePair, SPLITS,
};
use cgcce::decoder::CgcceModel;
use cgcce::flops::count_params_flops;
use cgcce::metrics::MetricReport;
use cgcce::synth::{synth_generate, SynthSpec};
use cgcce::train::{
    ablate, evaluate_sharded, train, AblationTable, Checkpoint, TrainOpts, HISTORY_CSV_HEADER,
};

#[derive(Parser)]
#[command(name = "cgcce", version, about = "Siamese change-detection toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Small widths for CPU experiments.
    Toy,
    /// Production-scale widths.
    Full,
}

#[derive(Args)]
struct ConfigArgs {
    /// Model config JSON file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config preset used when no file is given.
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    /// Override the input tile side length.
    #[arg(long)]
    tile_size: Option<usize>,
    /// Override the binarization threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    no_gccm: bool,
    #[arg(long)]
    no_cgrr: bool,
    #[arg(long)]
    no_scem: bool,
    #[arg(long)]
    no_cfd: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let s = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                ModelConfig::from_json(&s)?
            }
            None => match self.preset {
                Preset::Toy => ModelConfig::toy(),
                Preset::Full => ModelConfig::full(),
            },
        };
        if let Some(t) = self.tile_size {
            cfg.tile_size = t;
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        if self.no_gccm {
            cfg.enable_gccm = false;
        }
        if self.no_cgrr {
            cfg.enable_cgrr = false;
        }
        if self.no_scem {
            cfg.enable_scem = false;
        }
        if self.no_cfd {
            cfg.enable_cfd = false;
        }
        Ok(validate_config(cfg)?)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic bi-temporal dataset with ground-truth masks.
    Synth {
        /// Output dataset root directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of changed buildings using the rare palette.
        #[arg(long, default_value_t = 0.3)]
        special_ratio: f64,
        #[arg(long, default_value_t = 256)]
        tile_size: usize,
        /// Photometric jitter amplitude applied to image B.
        #[arg(long, default_value_t = 0.08)]
        jitter: f64,
        /// train:val:test proportions.
        #[arg(long, default_value = "7:2:1")]
        ratios: String,
        #[arg(long, default_value_t = 2)]
        buildings_min: usize,
        #[arg(long, default_value_t = 5)]
        buildings_max: usize,
    },
    /// Cut a large A/B/label triple into square tiles (flat layout).
    Tile {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        label: PathBuf,
        /// Output directory receiving A/, B/, label/ subdirectories.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, value_enum, default_value = "grid")]
        mode: TileModeArg,
        /// Number of crops in random mode.
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Prefix for tile ids.
        #[arg(long, default_value = "tile")]
        base_id: String,
    },
    /// Split a flat A/B/label directory into train/val/test layout.
    Split {
        /// Directory containing A/, B/, label/ with matching ids.
        #[arg(long)]
        root: PathBuf,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "7:2:1")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset produced by synth or split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root containing manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for best.ckpt and history.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5e-4)]
        lr0: f64,
        /// Defaults to lr0/100.
        #[arg(long)]
        lr_min: Option<f64>,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Shard the evaluation across threads; counts merge additively.
        #[arg(long, default_value_t = 1)]
        shards: usize,
    },
    /// Predict a change mask for one image pair.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Output mask PNG ({0,255}).
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth label for the disagreement overlay.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Overlay PNG path (requires --gt): white hit, green miss, red spurious.
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train and evaluate the full model plus single-component ablations.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 5e-4)]
        lr0: f64,
        /// Output CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report parameter count and forward FLOPs for a config.
    Info {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TileModeArg {
    Grid,
    Random,
}

impl From<TileModeArg> for TileMode {
    fn from(m: TileModeArg) -> TileMode {
        match m {
            TileModeArg::Grid => TileMode::Grid,
            TileModeArg::Random => TileMode::Random,
        }
    }
}

fn parse_ratios(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(':')
        .map(|p| p.trim().parse::<usize>().map_err(|e| anyhow!("bad ratio part '{p}': {e}")))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        bail!("ratios must have three parts like 7:2:1, got '{s}'");
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| anyhow!("bad seed '{p}': {e}")))
        .collect()
}

fn print_config(cfg: &ModelConfig, seed: u64) {
    println!("config: {}", serde_json::to_string(cfg).expect("config serializes"));
    println!("seed: {seed}");
}

fn load_checkpoint(path: &Path, threshold: Option<f64>) -> Result<(CgcceModel, cgcce::nn::Params)> {
    let ckpt = Checkpoint::load(path)?;
    let (mut model, params) = ckpt.build_model()?;
    if let Some(t) = threshold {
        model.cfg.threshold = t;
    }
    print_config(&model.cfg, ckpt.meta.seed);
    Ok((model, params))
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth {
            out,
            n,
            seed,
            special_ratio,
            tile_size,
            jitter,
            ratios,
            buildings_min,
            buildings_max,
        } => {
            let spec = SynthSpec {
                n_samples: n,
                tile_size,
                special_ratio,
                jitter,
                seed,
                ratios: parse_ratios(&ratios)?,
                buildings_min,
                buildings_max,
                ..SynthSpec::default()
            };
            println!("spec: {}", serde_json::to_string(&spec)?);
            println!("seed: {seed}");
            let (manifest, _) = synth_generate(&out, &spec)?;
            println!(
                "wrote {} samples to {} (train {}, val {}, test {})",
                n,
                out.display(),
                manifest.splits.train.len(),
                manifest.splits.val.len(),
                manifest.splits.test.len()
            );
        }
        Cmd::Tile { a, b, label, out, size, mode, count, seed, base_id } => {
            let a_img = read_rgb_png(&a)?;
            let b_img = read_rgb_png(&b)?;
            let l_img = read_gray_png(&label)?;
            println!("seed: {seed}");
            let tiles = tile_images(&a_img, &b_img, &l_img, size, mode.into(), count, seed, &base_id)?;
            for sub in ["A", "B", "label"] {
                std::fs::create_dir_all(out.join(sub))?;
            }
            for t in &tiles {
                write_rgb_png(&out.join("A").join(format!("{}.png", t.id)), &t.a)?;
                write_rgb_png(&out.join("B").join(format!("{}.png", t.id)), &t.b)?;
                write_gray_png(&out.join("label").join(format!("{}.png", t.id)), &t.label)?;
            }
            println!("wrote {} tiles to {}", tiles.len(), out.display());
        }
        Cmd::Split { root, out, ratios, seed } => {
            let ratios = parse_ratios(&ratios)?;
            println!("seed: {seed}");
            let a_dir = root.join("A");
            let mut ids: Vec<String> = std::fs::read_dir(&a_dir)
                .with_context(|| format!("reading {}", a_dir.display()))?
                .filter_map(|e| {
                    let p = e.ok()?.path();
                    let name = p.file_name()?.to_str()?;
                    name.strip_suffix(".png").map(str::to_string)
                })
                .collect();
            if ids.is_empty() {
                bail!("no .png files under {}", a_dir.display());
            }
            ids.sort();
            let lists = split(&ids, ratios, seed)?;
            let mut tile_size = 0usize;
            for (split_name, list) in [("train", &lists.train), ("val", &lists.val), ("test", &lists.test)] {
                for id in list {
                    let a = read_rgb_png(&root.join("A").join(format!("{id}.png")))?;
                    let b = read_rgb_png(&root.join("B").join(format!("{id}.png")))?;
                    let label = read_gray_png(&root.join("label").join(format!("{id}.png")))?;
                    tile_size = a.w;
                    save_tile(&out, split_name, &TilePair { a, b, label, id: id.clone() })?;
                }
            }
            let manifest = DatasetManifest {
                root: out.display().to_string(),
                tile_size,
                seed,
                ratios,
                splits: lists,
                synth_spec: None,
            };
            manifest.save(&out)?;
            manifest.validate(&out)?;
            println!(
                "split {} ids into train {} / val {} / test {} under {}",
                ids.len(),
                manifest.splits.train.len(),
                manifest.splits.val.len(),
                manifest.splits.test.len(),
                out.display()
            );
        }
        Cmd::Train { config, data, out, epochs, batch, seed, lr0, lr_min } => {
            let cfg = config.resolve()?;
            print_config(&cfg, seed);
            let manifest = DatasetManifest::load(&data)?;
            if manifest.tile_size != cfg.tile_size {
                bail!(
                    "dataset tile size {} does not match config tile size {} (use --tile-size)",
                    manifest.tile_size,
                    cfg.tile_size
                );
            }
            let opts = TrainOpts {
                epochs,
                batch,
                seed,
                lr0,
                lr_min: lr_min.unwrap_or(lr0 / 100.0),
                early_stop_train_f1: None,
            };
            let outcome = train(&cfg, &data, &manifest, &opts)?;
            std::fs::create_dir_all(&out)?;
            let ckpt_path = out.join("best.ckpt");
            outcome.checkpoint.save(&ckpt_path)?;
            std::fs::write(out.join("history.csv"), cgcce::train::history_to_csv(&outcome.history))?;
            println!("{HISTORY_CSV_HEADER}");
            if let Some(last) = outcome.history.last() {
                println!(
                    "{},{},{},{},{}",
                    last.epoch, last.train_loss, last.val_f1, last.val_iou, last.lr
                );
            }
            println!(
                "best val f1 {} at epoch {}; checkpoint {}",
                outcome.checkpoint.meta.best_val_f1,
                outcome.checkpoint.meta.best_epoch,
                ckpt_path.display()
            );
        }
        Cmd::Eval { ckpt, data, split, shards } => {
            let (model, params) = load_checkpoint(&ckpt, None)?;
            if !SPLITS.contains(&split.as_str()) {
                bail!("unknown split '{split}' (expected train, val, or test)");
            }
            let manifest = DatasetManifest::load(&data)?;
            let report = evaluate_sharded(&model, &params, &data, &manifest, &split, shards)?;
            println!("{}", MetricReport::CSV_HEADER);
            println!("{}", report.csv_row(&split));
        }
        Cmd::Predict { ckpt, a, b, out, gt, overlay, threshold } => {
            let (model, params) = load_checkpoint(&ckpt, threshold)?;
            let a_img = read_rgb_png(&a)?;
            let b_img = read_rgb_png(&b)?;
            let mask = model.predict_mask(&params, &a_img.to_tensor(), &b_img.to_tensor())?;
            write_gray_png(&out, &GrayImage::from_mask(&mask))?;
            println!("wrote mask {}", out.display());
            if let Some(overlay_path) = overlay {
                let gt_path = gt.ok_or_else(|| anyhow!("--overlay requires --gt"))?;
                let gt_mask = read_gray_png(&gt_path)?.to_mask()?;
                let img = overlay_image(&mask, &gt_mask)?;
                write_rgb_png(&overlay_path, &img)?;
                println!("wrote overlay {}", overlay_path.display());
            }
        }
        Cmd::Ablate { config, data, seeds, epochs, batch, lr0, out } => {
            let cfg = config.resolve()?;
            let seeds = parse_seeds(&seeds)?;
            print_config(&cfg, *seeds.first().unwrap_or(&0));
            let manifest = DatasetManifest::load(&data)?;
            let opts = TrainOpts {
                epochs,
                batch,
                seed: 0,
                lr0,
                lr_min: lr0 / 100.0,
                early_stop_train_f1: None,
            };
            let table: AblationTable = ablate(&cfg, &data, &manifest, &seeds, &opts)?;
            let csv = table.to_csv();
            print!("{csv}");
            if let Some(path) = out {
                std::fs::write(&path, csv)?;
                println!("wrote {}", path.display());
            }
        }
        Cmd::Info { config } => {
            let cfg = config.resolve()?;
            print_config(&cfg, 0);
            let report = count_params_flops(&cfg)?;
            println!("component,params_m,flops_g");
            for (name, p, f) in &report.breakdown {
                println!("{name},{:.4},{:.4}", p / 1e6, f / 1e9);
            }
            println!("total,{:.4},{:.4}", report.params_millions(), report.flops_giga());
            println!(
                "published CGCCE-Net reference: 56.67 M params, 17.57 G FLOPs (context only, configs differ)"
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
