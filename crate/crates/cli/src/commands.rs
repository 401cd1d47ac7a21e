use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use avtopo::backbone::build_backbone;
use avtopo::config::RunConfig;
use avtopo::data::dataset::{mask_path, read_mask_png};
use avtopo::data::{
    generate_synthetic_tree, load_dataset, load_sample, preprocess, write_sample, DatasetSplit, FundusSample,
    SyntheticTreeSpec,
};
use avtopo::metrics::{aggregate, evaluate_masks, evaluate_sample, MetricConfig, MetricsReport, VesselMasks};
use avtopo::trainer::{
    ablation_csv_header, ablation_csv_row, predict, run_ablation, save_checkpoint, sidecar_path, train as fit,
    AblationData, CheckpointMeta, EpochRecord, Variant, CHECKPOINT_FORMAT,
};
use avtopo::Mask;

use crate::{AblateArgs, EvalArgs, MetricsArgs, SplitChoice, SynthArgs, TrainArgs, UsageError};

pub fn synth_spec(a: &SynthArgs, seed: u64) -> SyntheticTreeSpec {
    SyntheticTreeSpec {
        canvas: a.canvas,
        roots: a.roots,
        depth: a.depth,
        branch_angle: [a.angle_min, a.angle_max],
        segment_length: [a.length_min, a.length_max],
        vessel_width: [a.width_min, a.width_max],
        tortuosity: a.tortuosity,
        seed,
        faint_gaps: a.faint_gaps,
        noise: a.noise,
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    synth_spec(a, a.seed).validate()?;
    for sub in ["images", "masks"] {
        let d = a.out.join(sub);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    }
    for i in 0..a.count {
        let spec = synth_spec(a, a.seed.wrapping_add(i as u64));
        let (sample, topo) = generate_synthetic_tree(&spec).with_context(|| format!("sample seed {}", spec.seed))?;
        write_sample(&a.out, &sample)?;
        topo.write(&a.out, &sample.id)?;
    }
    eprintln!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn data_root(flag: Option<&PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.cloned()
        .or_else(|| cfg.data.root.clone())
        .ok_or_else(|| UsageError("no dataset: pass --data or set data.root".into()).into())
}

fn load_ids(root: &Path, ids: &[String], size: usize) -> Result<Vec<FundusSample>> {
    ids.iter()
        .map(|id| Ok(preprocess(&load_sample(root, id)?, size)?))
        .collect()
}

/// Refuses to write into an existing non-empty directory, then creates it.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(UsageError(format!("{} exists and is not empty", dir.display())).into());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn progress(name: &str, e: &EpochRecord) {
    eprintln!(
        "{name}epoch {:>3}  train {:.4}  val {:.4}  dice {:.4}  {:.1}s",
        e.epoch, e.train_loss, e.val_loss, e.val_dice, e.wall_secs
    );
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if a.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let out = a.out.as_ref().expect("clap requires --out");
    let root = data_root(a.data.as_ref(), &cfg)?;
    let split = load_dataset(&root, cfg.data.seed).with_context(|| format!("reading dataset {}", root.display()))?;
    let size = cfg.data.image_size;
    let train_set = load_ids(&root, &split.train, size)?;
    let val_set = load_ids(&root, &split.val, size)?;
    if train_set.is_empty() || val_set.is_empty() {
        bail!(avtopo::Error::Dataset(format!(
            "{} samples give {} train / {} val; at least 10 are needed",
            split.len(),
            train_set.len(),
            val_set.len()
        )));
    }
    cfg.model = cfg.resolved_model();
    cfg.data.root = Some(root);
    let (net, init) = build_backbone(&cfg.model)?;

    fresh_dir(out)?;
    cfg.save(&out.join("config.toml"))?;
    let outcome = fit(&net, init, &train_set, &val_set, &cfg.train, |e| progress("", e))?;
    outcome.log.write_csv(&out.join("log.csv"))?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        backbone: cfg.model.clone(),
        loss: cfg.train.loss.clone(),
        split_seed: cfg.data.seed,
        image_size: size,
        epoch: outcome.log.best_epoch,
        val_loss: outcome.log.best().map_or(f64::NAN, |e| e.val_loss),
        param_count: avtopo::backbone::Network::param_count(&outcome.best),
    };
    save_checkpoint(&out.join("best.ckpt"), &outcome.best, &meta)?;
    eprintln!(
        "stopped ({}) after {} epochs; best epoch {}",
        outcome.log.stop_reason.name(),
        outcome.log.last_epoch(),
        outcome.log.best_epoch
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Report {
    pub aggregate: MetricsReport,
    pub samples: Vec<MetricsReport>,
}

fn csv_path(report: &Path) -> PathBuf {
    report.with_extension("csv")
}

fn write_report(path: &Path, samples: Vec<MetricsReport>) -> Result<Report> {
    let report = Report {
        aggregate: aggregate(&samples)?,
        samples,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    let cpath = csv_path(path);
    let mut w = csv::Writer::from_path(&cpath).with_context(|| format!("writing {}", cpath.display()))?;
    w.write_record(MetricsReport::csv_header())?;
    for r in &report.samples {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(report)
}

fn pick(split: &DatasetSplit, which: SplitChoice) -> Vec<String> {
    let mut ids = match which {
        SplitChoice::All => [&split.train[..], &split.val[..], &split.test[..]].concat(),
        SplitChoice::Train => split.train.clone(),
        SplitChoice::Val => split.val.clone(),
        SplitChoice::Test => split.test.clone(),
    };
    ids.sort();
    ids
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let metric = MetricConfig {
        threshold: a.tol.threshold,
        junction_tol: a.tol.junction_tol,
        skeleton_tol: a.tol.skel_tol,
    };
    if !(0.0..=1.0).contains(&metric.threshold) {
        bail!(UsageError(format!("--threshold {} is outside [0, 1]", metric.threshold)));
    }
    let side = sidecar_path(&a.ckpt);
    if !side.is_file() {
        bail!(avtopo::Error::Checkpoint(format!("sidecar {} not found", side.display())));
    }
    let (net, store, meta) = avtopo::trainer::load_checkpoint(&a.ckpt)?;
    let split = load_dataset(&a.data, meta.split_seed).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let ids = pick(&split, a.split);
    if ids.is_empty() {
        bail!(avtopo::Error::Dataset(format!("the {:?} split of {} is empty", a.split, a.data.display())));
    }
    let samples = load_ids(&a.data, &ids, meta.image_size)?;
    let probs = predict(&net, &store, &samples, a.batch)?;
    let per = samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| evaluate_sample(p, s, &metric))
        .collect::<avtopo::Result<Vec<_>>>()?;
    let report = write_report(&a.report, per)?;
    if a.plots {
        let dir = plots_dir(&a.report);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (s, p) in samples.iter().zip(&probs) {
            let path = dir.join(format!("{}_overlay.png", s.id));
            crate::plots::overlay(&path, s, p, metric.threshold)?;
        }
        crate::plots::bar_chart(&dir.join("metrics.svg"), &report.aggregate)?;
    }
    let c = &report.aggregate.combined;
    eprintln!(
        "{} samples: dice {:.4}  cldice {:.4}  betti0_err {:.3}",
        report.samples.len(),
        c.dice,
        c.cldice,
        c.betti0_err
    );
    Ok(())
}

fn plots_dir(report: &Path) -> PathBuf {
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    report.with_file_name(format!("{stem}_plots"))
}

/// Ids with an artery mask under `root/masks`.
fn mask_ids(root: &Path) -> Result<BTreeSet<String>> {
    let dir = root.join("masks");
    let mut ids = BTreeSet::new();
    for entry in fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix("_artery.png")) {
            ids.insert(id.to_string());
        }
    }
    Ok(ids)
}

fn optional_mask(root: &Path, id: &str, kind: &str, dims: (usize, usize)) -> Result<Mask> {
    let p = mask_path(root, id, kind);
    if p.is_file() {
        Ok(read_mask_png(&p)?)
    } else {
        Ok(Mask::empty(dims.0, dims.1))
    }
}

fn required_mask(root: &Path, id: &str, kind: &str, what: &str) -> Result<Mask> {
    let p = mask_path(root, id, kind);
    if !p.is_file() {
        bail!("{what} for `{id}` is missing {}", p.display());
    }
    Ok(read_mask_png(&p)?)
}

fn score_one(a: &MetricsArgs, id: &str, cfg: &MetricConfig) -> Result<MetricsReport> {
    let pred = VesselMasks {
        artery: required_mask(&a.pred, id, "artery", "prediction")?,
        vein: required_mask(&a.pred, id, "vein", "prediction")?,
    };
    let mut gt = VesselMasks {
        artery: required_mask(&a.gt, id, "artery", "ground truth")?,
        vein: required_mask(&a.gt, id, "vein", "ground truth")?,
    };
    let dims = gt.artery.dims();
    let crossing = optional_mask(&a.gt, id, "crossing", dims)?;
    if crossing.any() {
        gt.artery = gt.artery.or(&crossing)?;
        gt.vein = gt.vein.or(&crossing)?;
    }
    let uncertain = optional_mask(&a.gt, id, "uncertain", dims)?;
    evaluate_masks(id, &pred, &gt, Some(&uncertain), cfg).with_context(|| format!("scoring `{id}`"))
}

pub fn metrics(a: &MetricsArgs) -> Result<()> {
    let cfg = MetricConfig {
        junction_tol: a.junction_tol,
        skeleton_tol: a.skel_tol,
        ..MetricConfig::default()
    };
    let pred_ids = mask_ids(&a.pred)?;
    let mut gt_ids = mask_ids(&a.gt)?;
    if gt_ids.is_empty() && a.gt.join("images").is_dir() {
        gt_ids = avtopo::data::dataset::list_ids(&a.gt)?.into_iter().collect();
    }
    let no_pred: Vec<&String> = gt_ids.difference(&pred_ids).collect();
    let no_gt: Vec<&String> = pred_ids.difference(&gt_ids).collect();
    if !no_pred.is_empty() || !no_gt.is_empty() {
        let mut msg = String::from("prediction and ground-truth ids differ");
        if !no_pred.is_empty() {
            msg += &format!("; no prediction for: {}", join(&no_pred));
        }
        if !no_gt.is_empty() {
            msg += &format!("; no ground truth for: {}", join(&no_gt));
        }
        bail!(msg);
    }
    if gt_ids.is_empty() {
        bail!("no masks found under {}", a.gt.join("masks").display());
    }
    let ids: Vec<String> = gt_ids.into_iter().collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(ids.len());
    let chunk = ids.len().div_ceil(workers);
    let per: Vec<MetricsReport> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(|id| score_one(a, id, &cfg)).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("metrics worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let report = write_report(&a.report, per)?;
    let c = &report.aggregate.combined;
    eprintln!(
        "{} samples: dice {:.4}  cldice {:.4}  betti0_err {:.3}",
        report.samples.len(),
        c.dice,
        c.cldice,
        c.betti0_err
    );
    Ok(())
}

fn join(ids: &[&String]) -> String {
    ids.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariantsFile {
    variant: Vec<Variant>,
}

fn load_variants(path: &Path) -> Result<Vec<Variant>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: VariantsFile = toml::from_str(&text)
        .map_err(avtopo::Error::TomlDe)
        .with_context(|| format!("parsing {}", path.display()))?;
    if file.variant.len() < 2 {
        bail!(UsageError(format!("{} names {} variants; at least 2 are needed", path.display(), file.variant.len())));
    }
    if let Some(v) = file.variant.iter().find(|v| v.name.trim().is_empty()) {
        bail!(UsageError(format!("a variant in {} has no name: {v:?}", path.display())));
    }
    Ok(file.variant)
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let mut cfg = load_config(Some(&a.config))?;
    let variants = load_variants(&a.variants)?;
    let root = data_root(a.data.as_ref(), &cfg)?;
    let split = load_dataset(&root, cfg.data.seed).with_context(|| format!("reading dataset {}", root.display()))?;
    let size = cfg.data.image_size;
    let train_set = load_ids(&root, &split.train, size)?;
    let val_set = load_ids(&root, &split.val, size)?;
    let test_set = load_ids(&root, &split.test, size)?;
    cfg.model = cfg.resolved_model();
    cfg.data.root = Some(root);

    fresh_dir(&a.out)?;
    cfg.save(&a.out.join("config.toml"))?;
    let data = AblationData {
        train: &train_set,
        val: &val_set,
        test: &test_set,
    };
    let rows = run_ablation(&cfg.model, &cfg.train, &variants, data, &cfg.eval, |name, e| {
        progress(&format!("[{name}] "), e)
    })?;
    let path = a.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(ablation_csv_header())?;
    for r in &rows {
        w.write_record(ablation_csv_row(r))?;
    }
    w.flush()?;
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| r.result.is_err())
        .map(|r| r.variant.as_str())
        .collect();
    if !failed.is_empty() {
        bail!("variants failed: {}", failed.join(", "));
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}
