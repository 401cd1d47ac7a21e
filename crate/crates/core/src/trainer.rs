//! Optimisation loop, early stopping, checkpoints and the ablation harness.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{build_backbone, BackboneConfig, Network};
use crate::data::{augment, make_batch, AugmentationConfig, FundusSample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{aggregate, dice_iou, evaluate_sample, MetricConfig, MetricsReport};
use crate::nn::{AdamW, AdamWConfig, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            batch_size: 10,
            max_epochs: 500,
            patience: 10,
            seed: 0,
            loss: LossConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        self.loss.validate()
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
        }
    }
}

/// Stops once the monitored loss has gone `patience` epochs without a
/// strict improvement. Epochs are 1-based.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records one epoch. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// Replays the stopping rule over a scripted loss sequence. Returns the last
/// epoch run, the best epoch and why it stopped.
pub fn simulate_stopping(losses: &[f64], patience: usize, max_epochs: usize) -> (usize, usize, StopReason) {
    let mut es = EarlyStopping::new(patience);
    for (i, &l) in losses.iter().take(max_epochs).enumerate() {
        if es.observe(i + 1, l).1 {
            return (i + 1, es.best_epoch(), StopReason::EarlyStop);
        }
    }
    (losses.len().min(max_epochs), es.best_epoch(), StopReason::MaxEpochs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean combined-vessel Dice over the validation set.
    pub val_dice: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl RunLog {
    pub fn last_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub const CSV_HEADER: [&'static str; 5] = ["epoch", "train_loss", "val_loss", "val_dice", "wall_secs"];

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = RunLog::CSV_HEADER.join(",");
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.8},{:.8},{:.6},{:.3}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_dice, e.wall_secs
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights at the epoch with the lowest validation loss (the initial
    /// weights when no epoch ran).
    pub best: ParamStore,
    pub log: RunLog,
}

fn sigmoid_probs(net: &Network, store: &ParamStore, images: Tensor) -> Result<Tensor> {
    let mut g = Graph::with_params(store);
    let x = g.constant(images);
    let y = net.forward(&mut g, x)?;
    let p = g.sigmoid(y);
    Ok(g.value(p).clone())
}

/// Per-sample probabilities `2×H×W`, no augmentation.
pub fn predict(net: &Network, store: &ParamStore, samples: &[FundusSample], batch: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&FundusSample> = chunk.iter().collect();
        let b = make_batch(&refs)?;
        let p = sigmoid_probs(net, store, b.images)?;
        for i in 0..chunk.len() {
            let item = p.batch_item(i);
            let shape = item.shape()[1..].to_vec();
            out.push(item.reshape(&shape)?);
        }
    }
    Ok(out)
}

/// Mean report over `samples` and the per-sample reports.
pub fn validate(
    net: &Network,
    store: &ParamStore,
    samples: &[FundusSample],
    metrics: &MetricConfig,
    batch: usize,
) -> Result<(MetricsReport, Vec<MetricsReport>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("validation over zero samples".into()));
    }
    let probs = predict(net, store, samples, batch)?;
    let reports = samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| evaluate_sample(p, s, metrics))
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&reports)?, reports))
}

fn check_finite(what: &str, v: f64, epoch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {v} in epoch {epoch}")))
    }
}

/// Loss and mean combined Dice on `samples` without augmentation.
fn evaluate_loss(
    net: &Network,
    store: &ParamStore,
    samples: &[FundusSample],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut dice_sum = 0.0;
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&FundusSample> = chunk.iter().collect();
        let b = make_batch(&refs)?;
        let mut g = Graph::with_params(store);
        let x = g.constant(b.images);
        let y = net.forward(&mut g, x)?;
        let p = g.sigmoid(y);
        let t = g.constant(b.targets);
        let v = g.constant(b.valid);
        let l = total_loss(&mut g, p, t, Some(v), &cfg.loss)?;
        loss_sum += g.value(l).data()[0] * chunk.len() as f64;
        let probs = g.value(p);
        for (i, s) in chunk.iter().enumerate() {
            let item = probs.batch_item(i);
            let (h, w) = s.dims();
            let hw = h * w;
            let d = item.data();
            let keep = |r: usize, c: usize| !s.uncertain.get(r, c);
            let pred = crate::mask::Mask::from_fn(h, w, |r, c| {
                keep(r, c) && (d[r * w + c] >= 0.5 || d[hw + r * w + c] >= 0.5)
            });
            let gt = crate::mask::Mask::from_fn(h, w, |r, c| keep(r, c) && (s.artery.get(r, c) || s.vein.get(r, c)));
            dice_sum += dice_iou(&pred, &gt)?.0;
        }
    }
    let n = samples.len() as f64;
    Ok((loss_sum / n, dice_sum / n))
}

/// Fits `init` on `train`, validating on `val` after every epoch.
pub fn train(
    net: &Network,
    init: ParamStore,
    train: &[FundusSample],
    val: &[FundusSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset(format!(
            "training needs samples in both splits (train {}, val {})",
            train.len(),
            val.len()
        )));
    }
    let mut store = init;
    let mut best = store.clone();
    let mut opt = AdamW::new(cfg.optimizer(), &store);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_a06e));
    let aug = cfg.augmentation.sanitized();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<FundusSample> = chunk.iter().map(|&i| augment(&train[i], &aug, &mut aug_rng)).collect();
            let refs: Vec<&FundusSample> = augmented.iter().collect();
            let b = make_batch(&refs)?;
            let mut g = Graph::with_params(&store);
            let x = g.constant(b.images);
            let y = net.forward(&mut g, x)?;
            let p = g.sigmoid(y);
            let t = g.constant(b.targets);
            let v = g.constant(b.valid);
            let l = total_loss(&mut g, p, t, Some(v), &cfg.loss)?;
            let lv = g.value(l).data()[0];
            check_finite("training loss", lv, epoch)?;
            let grads = g.backward(l)?;
            let pg = g.param_grads(&grads);
            drop(g);
            opt.step(&mut store, &pg);
            loss_sum += lv * chunk.len() as f64;
        }
        let (val_loss, val_dice) = evaluate_loss(net, &store, val, cfg)?;
        check_finite("validation loss", val_loss, epoch)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_dice,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        epochs.push(rec);
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = store.clone();
        }
        if stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        log: RunLog {
            epochs,
            best_epoch: stopper.best_epoch(),
            stop_reason,
        },
    })
}

/// Sidecar stored next to a checkpoint blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub split_seed: u64,
    pub image_size: usize,
    pub epoch: usize,
    pub val_loss: f64,
    pub param_count: usize,
}

pub const CHECKPOINT_FORMAT: u32 = 1;

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn save_checkpoint(ckpt: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let f = File::create(ckpt).map_err(|e| Error::io(ckpt, e))?;
    let mut w = BufWriter::new(f);
    store.write_to(&mut w).map_err(|e| Error::io(ckpt, e))?;
    drop(w);
    let side = sidecar_path(ckpt);
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

/// Rebuilds the network described by the sidecar and loads the blob into it.
pub fn load_checkpoint(ckpt: &Path) -> Result<(Network, ParamStore, CheckpointMeta)> {
    let side = sidecar_path(ckpt);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
            meta.format
        )));
    }
    let f = File::open(ckpt).map_err(|e| Error::io(ckpt, e))?;
    let blob = ParamStore::read_from(BufReader::new(f))?;
    let (net, mut store) = build_backbone(&meta.backbone)?;
    store.load_values(&blob).map_err(|e| {
        Error::Checkpoint(format!("{} does not match the model in {}: {e}", ckpt.display(), side.display()))
    })?;
    Ok((net, store, meta))
}

/// A named change applied to the base configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub loss: Option<crate::losses::LossKind>,
    pub cldice_weight: Option<f64>,
    pub tffm: Option<bool>,
    pub attention_gates: Option<bool>,
    pub augment: Option<bool>,
    pub max_epochs: Option<usize>,
}

impl Variant {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            ..Self::default()
        }
    }

    pub fn apply(&self, backbone: &BackboneConfig, train: &TrainConfig) -> (BackboneConfig, TrainConfig) {
        let mut b = backbone.clone();
        let mut t = train.clone();
        if let Some(k) = self.loss {
            t.loss.loss = k;
        }
        if let Some(w) = self.cldice_weight {
            t.loss.cldice_weight = w;
        }
        if let Some(on) = self.tffm {
            b.tffm.enabled = on;
        }
        if let Some(on) = self.attention_gates {
            b.attention_gates = on;
        }
        if self.augment == Some(false) {
            t.augmentation = AugmentationConfig::none();
        }
        if let Some(e) = self.max_epochs {
            t.max_epochs = e;
        }
        (b, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    /// Test-set report of the best checkpoint, or the failure message.
    pub result: std::result::Result<(MetricsReport, RunLog), String>,
}

/// Splits that every variant trains and is scored on.
#[derive(Debug, Clone, Copy)]
pub struct AblationData<'a> {
    pub train: &'a [FundusSample],
    pub val: &'a [FundusSample],
    pub test: &'a [FundusSample],
}

/// Trains every variant from the same seed on the same splits. A failing
/// variant produces an error row instead of aborting the sweep.
pub fn run_ablation(
    backbone: &BackboneConfig,
    train_cfg: &TrainConfig,
    variants: &[Variant],
    data: AblationData<'_>,
    metrics: &MetricConfig,
    mut progress: impl FnMut(&str, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    if variants.len() < 2 {
        return Err(Error::Config(format!("an ablation needs at least 2 variants, got {}", variants.len())));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let (b, t) = v.apply(backbone, train_cfg);
        let mut run = || -> Result<(MetricsReport, RunLog)> {
            let (net, store) = build_backbone(&b)?;
            let out = train(&net, store, data.train, data.val, &t, |e| progress(&v.name, e))?;
            let scored = if data.test.is_empty() { data.val } else { data.test };
            let (mut report, _) = validate(&net, &out.best, scored, metrics, t.batch_size)?;
            report.id = v.name.clone();
            Ok((report, out.log))
        };
        rows.push(AblationRow {
            variant: v.name.clone(),
            seed: t.seed,
            result: run().map_err(|e| e.to_string()),
        });
    }
    Ok(rows)
}

pub fn ablation_csv_header() -> Vec<String> {
    let mut cols = vec!["variant".to_string(), "seed".into(), "status".into(), "best_epoch".into(), "epochs".into()];
    cols.extend(MetricsReport::csv_header().into_iter().skip(1));
    cols
}

pub fn ablation_csv_row(row: &AblationRow) -> Vec<String> {
    let mut out = vec![row.variant.clone(), row.seed.to_string()];
    match &row.result {
        Ok((report, log)) => {
            out.push("ok".into());
            out.push(log.best_epoch.to_string());
            out.push(log.last_epoch().to_string());
            out.extend(report.csv_row().into_iter().skip(1));
        }
        Err(msg) => {
            out.push(format!("failed: {msg}"));
            out.push(String::new());
            out.push(String::new());
            out.extend(std::iter::repeat_n(String::new(), MetricsReport::csv_header().len() - 1));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TffmSettings;
    use crate::data::{generate_synthetic_tree, preprocess, SyntheticTreeSpec};
    use crate::losses::LossKind;

    fn samples(n: usize, canvas: usize) -> Vec<FundusSample> {
        (0..n)
            .map(|i| {
                let spec = SyntheticTreeSpec {
                    canvas,
                    seed: i as u64,
                    ..Default::default()
                };
                preprocess(&generate_synthetic_tree(&spec).unwrap().0, canvas).unwrap()
            })
            .collect()
    }

    fn small_net() -> BackboneConfig {
        BackboneConfig {
            channels: vec![4, 8, 8],
            levels: 3,
            tffm: TffmSettings::disabled(),
            ..BackboneConfig::default()
        }
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            max_epochs: epochs,
            batch_size: 2,
            augmentation: AugmentationConfig::none(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stopping_rule_scripted() {
        let mut seq: Vec<f64> = (1..=5).map(|e| 1.0 / e as f64).collect();
        seq.extend(std::iter::repeat_n(0.2, 40));
        assert_eq!(simulate_stopping(&seq, 10, 500), (15, 5, StopReason::EarlyStop));
        assert_eq!(simulate_stopping(&seq, 10, 12), (12, 5, StopReason::MaxEpochs));
        assert_eq!(simulate_stopping(&[], 3, 0), (0, 0, StopReason::MaxEpochs));
        // equal values are not improvements
        assert_eq!(simulate_stopping(&[1.0, 1.0, 1.0], 2, 10), (3, 1, StopReason::EarlyStop));
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let (net, store) = build_backbone(&small_net()).unwrap();
        let data = samples(2, 32);
        let out = train(&net, store.clone(), &data, &data, &quick(0), |_| {}).unwrap();
        assert!(out.log.epochs.is_empty());
        assert_eq!(out.log.stop_reason, StopReason::MaxEpochs);
        assert_eq!(out.log.best_epoch, 0);
        for id in store.ids() {
            assert_eq!(store.get(id), out.best.get(id));
        }
    }

    #[test]
    fn empty_split_and_bad_config_error() {
        let (net, store) = build_backbone(&small_net()).unwrap();
        let data = samples(1, 32);
        assert!(matches!(
            train(&net, store.clone(), &[], &data, &quick(1), |_| {}),
            Err(Error::Dataset(_))
        ));
        let mut bad = quick(1);
        bad.patience = 0;
        assert!(matches!(train(&net, store, &data, &data, &bad, |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = samples(4, 32);
        let run = || {
            let (net, store) = build_backbone(&small_net()).unwrap();
            train(&net, store, &data[..3], &data[3..], &quick(4), |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        let strip = |l: &RunLog| l.epochs.iter().map(|e| (e.train_loss, e.val_loss, e.val_dice)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
        assert!(a.log.epochs.last().unwrap().train_loss < a.log.epochs[0].train_loss);
        assert!(a.log.best_epoch >= 1 && a.log.best_epoch <= a.log.last_epoch());
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let data = samples(3, 32);
        let (net, store) = build_backbone(&small_net()).unwrap();
        let out = train(&net, store, &data[..2], &data[2..], &quick(2), |_| {}).unwrap();
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT,
            backbone: net.config.clone(),
            loss: LossConfig::default(),
            split_seed: 4,
            image_size: 32,
            epoch: out.log.best_epoch,
            val_loss: out.log.best().unwrap().val_loss,
            param_count: out.best.num_scalars(),
        };
        let path = dir.path().join("best.ckpt");
        save_checkpoint(&path, &out.best, &meta).unwrap();
        let (net2, store2, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        let m = MetricConfig::default();
        let before = validate(&net, &out.best, &data, &m, 2).unwrap();
        let after = validate(&net2, &store2, &data, &m, 2).unwrap();
        assert_eq!(before, after);

        let mut wrong = meta.clone();
        wrong.backbone.channels = vec![4, 8, 16];
        std::fs::write(sidecar_path(&path), serde_json::to_string(&wrong).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn validate_is_mean_of_sample_reports() {
        let data = samples(3, 32);
        let (net, store) = build_backbone(&small_net()).unwrap();
        let m = MetricConfig::default();
        let (mean, per) = validate(&net, &store, &data, &m, 2).unwrap();
        let probs = predict(&net, &store, &data, 1).unwrap();
        let manual: Vec<MetricsReport> = data
            .iter()
            .zip(&probs)
            .map(|(s, p)| evaluate_sample(p, s, &m).unwrap())
            .collect();
        assert_eq!(per, manual);
        assert_eq!(mean, aggregate(&manual).unwrap());
        assert!(validate(&net, &store, &[], &m, 2).is_err());
    }

    #[test]
    fn ablation_rows_and_failures() {
        let data = samples(4, 32);
        let split = AblationData {
            train: &data[..2],
            val: &data[2..3],
            test: &data[3..],
        };
        let mut broken = Variant::named("broken");
        broken.cldice_weight = Some(-1.0);
        let vars = vec![Variant::named("a"), Variant::named("a"), broken];
        let rows = run_ablation(&small_net(), &quick(1), &vars, split, &MetricConfig::default(), |_, _| {}).unwrap();
        assert_eq!(rows.len(), 3);
        let (ra, la) = rows[0].result.as_ref().unwrap();
        let (rb, lb) = rows[1].result.as_ref().unwrap();
        assert_eq!(ra, rb);
        assert_eq!(la.epochs[0].val_loss, lb.epochs[0].val_loss);
        assert!(rows[2].result.is_err());
        assert_eq!(ablation_csv_row(&rows[2]).len(), ablation_csv_header().len());
        assert_eq!(ablation_csv_row(&rows[0]).len(), ablation_csv_header().len());
        assert!(run_ablation(&small_net(), &quick(1), &vars[..1], split, &MetricConfig::default(), |_, _| {}).is_err());
    }

    #[test]
    fn variant_apply() {
        let mut v = Variant::named("x");
        v.loss = Some(LossKind::Tversky);
        v.tffm = Some(false);
        v.augment = Some(false);
        let (b, t) = v.apply(&BackboneConfig::default(), &TrainConfig::default());
        assert!(!b.tffm.enabled);
        assert_eq!(t.loss.loss, LossKind::Tversky);
        assert_eq!(t.augmentation, AugmentationConfig::none());
    }
}
