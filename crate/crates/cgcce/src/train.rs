//! Training loop, optimizer, checkpointing, evaluation, and the
//! component-ablation runner.
//!
//! Training is deterministic given a seed: parameter init, shuffling,
//! and every kernel are seeded single-threaded f64 computations, so two
//! runs with the same inputs reproduce loss histories bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::ModelConfig;
use crate::data::DatasetManifest;
use crate::decoder::CgcceModel;
use crate::error::{Error, Result};
use crate::metrics::{metrics, MetricReport, BCE_EPS};
use crate::nn::{ParamSession, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::types::{BiTemporalSample, ConfusionCounts};

/// Cosine annealing from `lr0` down to `lr_min` over `total` epochs.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total < 2 {
        return Err(Error::Train(format!("schedule needs at least 2 epochs, got {total}")));
    }
    if epoch >= total {
        return Err(Error::Train(format!("epoch {epoch} outside schedule of {total}")));
    }
    let t = epoch as f64 / (total - 1) as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// AdamW with decoupled weight decay applied to every parameter.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &Params) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            m: (0..params.len()).map(|i| Tensor::zeros(params.get(i).shape())).collect(),
            v: (0..params.len()).map(|i| Tensor::zeros(params.get(i).shape())).collect(),
            t: 0,
        }
    }

    /// One update step; `grads` is indexed like the parameter store and
    /// missing entries are treated as zero gradients.
    pub fn step(&mut self, params: &mut Params, grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..params.len() {
            let zero;
            let g = match &grads[idx] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(params.get(idx).shape());
                    &zero
                }
            };
            let gd = g.data();
            let md = self.m[idx].data_mut();
            let vd = self.v[idx].data_mut();
            let mut p = params.get(idx).clone();
            let pd = p.data_mut();
            for i in 0..gd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
            params.set(idx, p);
        }
    }
}

/// BCE-with-logits on the tape: sigmoid, clamp, mean cross-entropy.
pub fn bce_loss_on_logits(tape: &Tape, logits: &crate::autodiff::Var, target: &Tensor) -> crate::autodiff::Var {
    let prob = tape.sigmoid(logits);
    let prob = tape.clamp(&prob, BCE_EPS, 1.0 - BCE_EPS);
    let y = tape.leaf(target.clone());
    let one_minus_y = tape.leaf(target.map(|v| 1.0 - v));
    let pos = tape.mul(&y, &tape.ln(&prob));
    let neg_prob = tape.add_scalar(&tape.scale(&prob, -1.0), 1.0);
    let neg = tape.mul(&one_minus_y, &tape.ln(&neg_prob));
    tape.scale(&tape.mean_all(&tape.add(&pos, &neg)), -1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_iou: f64,
    pub lr: f64,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,train_loss,val_f1,val_iou,lr";

pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut s = String::from(HISTORY_CSV_HEADER);
    for row in history {
        s.push_str(&format!(
            "\n{},{},{},{},{}",
            row.epoch, row.train_loss, row.val_f1, row.val_iou, row.lr
        ));
    }
    s.push('\n');
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub lr0: f64,
    pub lr_min: f64,
    pub batch: usize,
}

/// Model configuration plus a full parameter snapshot.
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub params: Params,
    pub meta: CheckpointMeta,
}

const CKPT_MAGIC: &[u8; 8] = b"CGCCECKP";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    /// Single-file binary: magic, version, embedded JSON config and
    /// metadata, then raw f64 parameter payloads. Bit-exact round trip.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        let cfg_json = self.cfg.to_json();
        w.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
        w.write_all(cfg_json.as_bytes())?;
        let meta_json = serde_json::to_string(&self.meta).expect("meta serializes");
        w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
        w.write_all(meta_json.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for idx in 0..self.params.len() {
            let name = self.params.name(idx).as_bytes();
            let t = self.params.get(idx);
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(t.rank() as u8).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Data(format!("{} is not a checkpoint file", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let cfg_json = read_string(&mut r)?;
        let cfg = ModelConfig::from_json(&cfg_json)?;
        let meta_json = read_string(&mut r)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta_json).map_err(|e| Error::Data(format!("bad checkpoint meta: {e}")))?;
        let n = read_u32(&mut r)? as usize;
        let mut params = Params::new();
        for _ in 0..n {
            let mut len2 = [0u8; 2];
            r.read_exact(&mut len2)?;
            let mut name = vec![0u8; u16::from_le_bytes(len2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Data(e.to_string()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            params.add(name, Tensor::new(&shape, data));
        }
        Ok(Checkpoint { cfg, params, meta })
    }

    /// Instantiate the model this checkpoint belongs to and verify that
    /// the stored parameters cover it exactly.
    pub fn build_model(&self) -> Result<(CgcceModel, Params)> {
        let (model, reference) = CgcceModel::new(&self.cfg, 0)?;
        if reference.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model wants {}",
                self.params.len(),
                reference.len()
            )));
        }
        for idx in 0..reference.len() {
            if reference.name(idx) != self.params.name(idx)
                || reference.get(idx).shape() != self.params.get(idx).shape()
            {
                return Err(Error::Data(format!(
                    "checkpoint parameter {} ({:?}) does not match model expectation {} ({:?})",
                    self.params.name(idx),
                    self.params.get(idx).shape(),
                    reference.name(idx),
                    reference.get(idx).shape()
                )));
            }
        }
        Ok((model, self.params.clone()))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct TrainOpts {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr0: f64,
    pub lr_min: f64,
    /// Stop once the train-split F1 reaches this value.
    pub early_stop_train_f1: Option<f64>,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            epochs: 30,
            batch: 8,
            seed: 0,
            lr0: 5e-4,
            lr_min: 5e-6,
            early_stop_train_f1: None,
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    /// Parameters after the last executed epoch (not the best-val snapshot).
    pub final_params: Params,
}

fn forward_loss_and_grads(
    model: &CgcceModel,
    params: &Params,
    sample: &BiTemporalSample,
) -> Result<(f64, Vec<(usize, Tensor)>)> {
    let tape = Tape::new();
    let sess = ParamSession::new(params);
    let v1 = tape.leaf(sample.image_t1.clone());
    let v2 = tape.leaf(sample.image_t2.clone());
    let (logits, _) = model.forward(&tape, &sess, &v1, &v2);
    let loss = bce_loss_on_logits(&tape, &logits, &sample.mask.to_tensor());
    let loss_val = loss.value.data()[0];
    let grads = tape.backward(&loss);
    let mut out = Vec::new();
    for (pidx, vid) in sess.bindings() {
        if let Some(g) = grads.by_id(vid) {
            out.push((pidx, g.clone()));
        }
    }
    Ok((loss_val, out))
}

/// Evaluate a model over one split, streaming samples from disk.
pub fn evaluate(
    model: &CgcceModel,
    params: &Params,
    root: &Path,
    manifest: &DatasetManifest,
    split: &str,
) -> Result<MetricReport> {
    let counts = evaluate_counts(model, params, root, manifest, manifest.ids(split)?)?;
    Ok(metrics(&counts))
}

/// Confusion counts over an explicit id list (one evaluation shard).
pub fn evaluate_counts(
    model: &CgcceModel,
    params: &Params,
    root: &Path,
    manifest: &DatasetManifest,
    ids: &[String],
) -> Result<ConfusionCounts> {
    if ids.is_empty() {
        return Err(Error::Train("cannot evaluate an empty id list".into()));
    }
    let split_of = |id: &str| -> Result<&'static str> {
        for s in crate::data::SPLITS {
            if manifest.splits.get(s)?.iter().any(|x| x == id) {
                return Ok(match s {
                    "train" => "train",
                    "val" => "val",
                    _ => "test",
                });
            }
        }
        Err(Error::Data(format!("id '{id}' not in any split")))
    };
    let mut counts = ConfusionCounts::default();
    for id in ids {
        let split = split_of(id)?;
        let sample = manifest.load_sample(root, split, id)?;
        let pred = model.predict_mask(params, &sample.image_t1, &sample.image_t2)?;
        counts = counts.merge(&crate::metrics::confusion(&pred.data, &sample.mask.data)?);
    }
    Ok(counts)
}

/// Sharded evaluation: ids are chunked, each shard evaluated on its own
/// thread, and the additive confusion counts merged in shard order.
pub fn evaluate_sharded(
    model: &CgcceModel,
    params: &Params,
    root: &Path,
    manifest: &DatasetManifest,
    split: &str,
    shards: usize,
) -> Result<MetricReport> {
    let ids = manifest.ids(split)?;
    if ids.is_empty() {
        return Err(Error::Train(format!("split '{split}' is empty")));
    }
    let shards = shards.clamp(1, ids.len());
    let chunk = ids.len().div_ceil(shards);
    let results: Vec<Result<ConfusionCounts>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| scope.spawn(move || evaluate_counts(model, params, root, manifest, part)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("shard panicked")).collect()
    });
    let mut total = ConfusionCounts::default();
    for r in results {
        total = total.merge(&r?);
    }
    Ok(metrics(&total))
}

/// Train a model on the manifest's train split, validating after every
/// epoch and keeping the parameters of the best validation F1.
pub fn train(cfg: &ModelConfig, root: &Path, manifest: &DatasetManifest, opts: &TrainOpts) -> Result<TrainOutcome> {
    cfg.validate()?;
    if opts.epochs < 2 {
        return Err(Error::Train("training needs at least 2 epochs for the schedule".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Train("batch size must be positive".into()));
    }
    let train_samples = manifest.load_split(root, "train")?;
    if train_samples.is_empty() {
        return Err(Error::Train("train split is empty".into()));
    }
    if manifest.ids("val")?.is_empty() {
        return Err(Error::Train("val split is empty".into()));
    }

    let (model, mut params) = CgcceModel::new(cfg, opts.seed)?;
    let mut optim = AdamW::new(&params);
    let mut shuffle_rng = Rng::new(opts.seed ^ 0x5EED_0F_5A17);
    let mut history: Vec<EpochStats> = Vec::with_capacity(opts.epochs);
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = params.clone();

    let n = train_samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..opts.epochs {
        let lr = cosine_lr(epoch, opts.epochs, opts.lr0, opts.lr_min)?;
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(opts.batch) {
            let mut acc: Vec<Option<Tensor>> = vec![None; params.len()];
            let mut batch_loss = 0.0;
            for &si in batch {
                let (loss, grads) = forward_loss_and_grads(&model, &params, &train_samples[si])?;
                if !loss.is_finite() {
                    return Err(Error::Train(format!(
                        "non-finite loss at epoch {epoch}, sample '{}'",
                        train_samples[si].id
                    )));
                }
                batch_loss += loss;
                for (pidx, g) in grads {
                    match &mut acc[pidx] {
                        Some(a) => a.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for slot in acc.iter_mut().flatten() {
                *slot = slot.scale(inv);
            }
            loss_sum += batch_loss;
            optim.step(&mut params, &acc, lr);
        }
        let train_loss = loss_sum / n as f64;

        let val = evaluate(&model, &params, root, manifest, "val")?;
        history.push(EpochStats { epoch, train_loss, val_f1: val.f1, val_iou: val.iou, lr });
        if val.f1 > best_f1 {
            best_f1 = val.f1;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if let Some(th) = opts.early_stop_train_f1 {
            let tr = evaluate(&model, &params, root, manifest, "train")?;
            if tr.f1 >= th {
                break;
            }
        }
    }

    let meta = CheckpointMeta {
        format_version: CKPT_VERSION,
        seed: opts.seed,
        epochs: opts.epochs,
        best_epoch,
        best_val_f1: best_f1,
        lr0: opts.lr0,
        lr_min: opts.lr_min,
        batch: opts.batch,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint { cfg: cfg.clone(), params: best_params, meta },
        history,
        final_params: params,
    })
}

// ---------------------------------------------------------------------------
// ablation runner
// ---------------------------------------------------------------------------

pub const ABLATION_VARIANTS: [&str; 5] = ["full", "no_gccm", "no_cgrr", "no_scem", "no_cfd"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str = "variant,seed,f1,iou";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!("\n{},{},{},{}", r.variant, r.seed, r.f1, r.iou));
        }
        for variant in ABLATION_VARIANTS {
            if let Some((f1, iou)) = self.mean(variant) {
                s.push_str(&format!("\n{variant},mean,{f1},{iou}"));
            }
        }
        s.push('\n');
        s
    }

    pub fn mean(&self, variant: &str) -> Option<(f64, f64)> {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == variant).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.f1).sum::<f64>() / n,
            rows.iter().map(|r| r.iou).sum::<f64>() / n,
        ))
    }
}

fn variant_config(cfg: &ModelConfig, variant: &str) -> ModelConfig {
    let mut c = cfg.clone();
    c.enable_gccm = true;
    c.enable_cgrr = true;
    c.enable_scem = true;
    c.enable_cfd = true;
    match variant {
        "full" => {}
        "no_gccm" => c.enable_gccm = false,
        "no_cgrr" => c.enable_cgrr = false,
        "no_scem" => c.enable_scem = false,
        "no_cfd" => c.enable_cfd = false,
        other => unreachable!("unknown variant {other}"),
    }
    c
}

/// Train and evaluate the full model plus the four single-component
/// ablations under identical seeds and budgets. Scores are validation
/// F1/IoU of each run's best checkpoint.
pub fn ablate(
    cfg: &ModelConfig,
    root: &Path,
    manifest: &DatasetManifest,
    seeds: &[u64],
    opts: &TrainOpts,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Train("ablation needs at least one seed".into()));
    }
    let mut table = AblationTable::default();
    for &seed in seeds {
        for variant in ABLATION_VARIANTS {
            let vcfg = variant_config(cfg, variant);
            let vopts = TrainOpts { seed, ..opts.clone() };
            let outcome = train(&vcfg, root, manifest, &vopts).map_err(|e| {
                Error::Train(format!("variant '{variant}' seed {seed}: {e}"))
            })?;
            let (model, params) = outcome.checkpoint.build_model()?;
            let val = evaluate(&model, &params, root, manifest, "val")?;
            table.rows.push(AblationRow { variant: variant.to_string(), seed, f1: val.f1, iou: val.iou });
        }
    }
    Ok(table)
}
