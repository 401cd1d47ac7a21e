//! Pixel and topology metrics for vessel segmentations.
//!
//! All metrics take binary masks. Scopes are computed per vessel class and on
//! the merged (pixelwise OR) vasculature. Connectivity is 8-neighbour
//! throughout.

pub mod components;
pub mod distance;
pub mod skeleton;

use serde::{Deserialize, Serialize};

pub use components::{component_count, label_components, Labeling};
pub use distance::{hd95, squared_distance_to};
pub use skeleton::{hard_skeletonize, Junction, SkeletonGraph};

use crate::error::{Error, Result};
use crate::data::FundusSample;
use crate::mask::{Mask, ProbMap};
use crate::tensor::Tensor;

const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub threshold: f64,
    pub junction_tol: f64,
    pub skeleton_tol: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            junction_tol: 3.0,
            skeleton_tol: 2.0,
        }
    }
}

fn same_dims(what: &str, a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `p >= threshold`.
pub fn binarize(p: &ProbMap, threshold: f64) -> Mask {
    let w = p.width();
    Mask::from_fn(p.height(), w, |r, c| p.data()[r * w + c] >= threshold)
}

/// Smoothed Dice and IoU. Two empty masks score `(1, 1)`.
pub fn dice_iou(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    same_dims("dice_iou", pred, gt)?;
    let inter = pred.intersection_count(gt)? as f64;
    let (p, g) = (pred.count() as f64, gt.count() as f64);
    let dice = (2.0 * inter + EPS) / (p + g + EPS);
    let iou = (inter + EPS) / (p + g - inter + EPS);
    Ok((dice, iou))
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Centreline Dice on hard skeletons. Two empty masks score 1.
pub fn cl_dice_metric(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_dims("cl_dice_metric", pred, gt)?;
    if !pred.any() && !gt.any() {
        return Ok(1.0);
    }
    let sp = skeleton::thin(pred);
    let sg = skeleton::thin(gt);
    cl_dice_from_skeletons(pred, gt, &sp, &sg)
}

fn cl_dice_from_skeletons(pred: &Mask, gt: &Mask, sp: &Mask, sg: &Mask) -> Result<f64> {
    let (np, ng) = (sp.count(), sg.count());
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let tprec = sp.intersection_count(gt)? as f64 / np as f64;
    let tsens = sg.intersection_count(pred)? as f64 / ng as f64;
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(clamp01(2.0 * tprec * tsens / (tprec + tsens)))
}

/// `|#components(pred) − #components(gt)|`.
pub fn betti0_error(pred: &Mask, gt: &Mask) -> Result<usize> {
    same_dims("betti0_error", pred, gt)?;
    Ok(component_count(pred).abs_diff(component_count(gt)))
}

fn within_tol_fraction(points: &Mask, target: &Mask, tol: f64) -> f64 {
    let d2 = squared_distance_to(target);
    let w = points.width();
    let total = points.count();
    let hit = points
        .pixels()
        .filter(|&(r, c)| d2[r * w + c] <= tol * tol)
        .count();
    hit as f64 / total as f64
}

/// F1 of centreline matching within `tol` pixels.
pub fn skeleton_f1(pred: &Mask, gt: &Mask, tol: f64) -> Result<f64> {
    same_dims("skeleton_f1", pred, gt)?;
    skeleton_f1_from(&skeleton::thin(pred), &skeleton::thin(gt), tol)
}

fn skeleton_f1_from(sp: &Mask, sg: &Mask, tol: f64) -> Result<f64> {
    match (sp.any(), sg.any()) {
        (false, false) => return Ok(1.0),
        (true, true) => {}
        _ => return Ok(0.0),
    }
    let precision = within_tol_fraction(sp, sg, tol);
    let recall = within_tol_fraction(sg, sp, tol);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JunctionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Greedy nearest-first one-to-one matching of junction clusters.
pub fn match_junctions(pred: &[Junction], gt: &[Junction], tol: f64) -> JunctionScores {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let d = p.distance(g);
            if d <= tol {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut matched = 0usize;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            matched += 1;
        }
    }
    let precision = if pred.is_empty() {
        1.0
    } else {
        matched as f64 / pred.len() as f64
    };
    let recall = if gt.is_empty() {
        1.0
    } else {
        matched as f64 / gt.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    JunctionScores {
        precision,
        recall,
        f1,
    }
}

pub fn junction_metrics(pred: &Mask, gt: &Mask, tol: f64) -> Result<JunctionScores> {
    same_dims("junction_metrics", pred, gt)?;
    let pj = hard_skeletonize(pred).junctions;
    let gj = hard_skeletonize(gt).junctions;
    Ok(match_junctions(&pj, &gj, tol))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScopeMetrics {
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
    pub cldice: f64,
    pub betti0_err: f64,
    pub skeleton_f1: f64,
    pub junction_precision: f64,
    pub junction_recall: f64,
    pub junction_f1: f64,
    pub pred_components: f64,
    pub gt_components: f64,
}

impl ScopeMetrics {
    pub const FIELDS: [&'static str; 11] = [
        "dice",
        "iou",
        "hd95",
        "cldice",
        "betti0_err",
        "skeleton_f1",
        "junction_precision",
        "junction_recall",
        "junction_f1",
        "pred_components",
        "gt_components",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.dice,
            self.iou,
            self.hd95,
            self.cldice,
            self.betti0_err,
            self.skeleton_f1,
            self.junction_precision,
            self.junction_recall,
            self.junction_f1,
            self.pred_components,
            self.gt_components,
        ]
    }

    fn from_values(v: [f64; 11]) -> Self {
        Self {
            dice: v[0],
            iou: v[1],
            hd95: v[2],
            cldice: v[3],
            betti0_err: v[4],
            skeleton_f1: v[5],
            junction_precision: v[6],
            junction_recall: v[7],
            junction_f1: v[8],
            pred_components: v[9],
            gt_components: v[10],
        }
    }

    /// All metrics for one binary prediction against one ground truth.
    pub fn compute(pred: &Mask, gt: &Mask, cfg: &MetricConfig) -> Result<Self> {
        same_dims("scope metrics", pred, gt)?;
        let (dice, iou) = dice_iou(pred, gt)?;
        let hd = hd95(pred, gt)?;
        let sp = hard_skeletonize(pred);
        let sg = hard_skeletonize(gt);
        let cldice = if !pred.any() && !gt.any() {
            1.0
        } else {
            cl_dice_from_skeletons(pred, gt, &sp.skeleton, &sg.skeleton)?
        };
        let pc = component_count(pred);
        let gc = component_count(gt);
        let skf1 = skeleton_f1_from(&sp.skeleton, &sg.skeleton, cfg.skeleton_tol)?;
        let j = match_junctions(&sp.junctions, &sg.junctions, cfg.junction_tol);
        Ok(Self {
            dice,
            iou,
            hd95: hd,
            cldice,
            betti0_err: pc.abs_diff(gc) as f64,
            skeleton_f1: skf1,
            junction_precision: j.precision,
            junction_recall: j.recall,
            junction_f1: j.f1,
            pred_components: pc as f64,
            gt_components: gc as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub id: String,
    pub artery: ScopeMetrics,
    pub vein: ScopeMetrics,
    pub combined: ScopeMetrics,
}

impl MetricsReport {
    pub fn scopes(&self) -> [(&'static str, &ScopeMetrics); 3] {
        [
            ("artery", &self.artery),
            ("vein", &self.vein),
            ("combined", &self.combined),
        ]
    }

    /// Column names of [`MetricsReport::csv_row`].
    pub fn csv_header() -> Vec<String> {
        let mut cols = vec!["id".to_string()];
        for scope in ["artery", "vein", "combined"] {
            for f in ScopeMetrics::FIELDS {
                cols.push(format!("{scope}_{f}"));
            }
        }
        cols
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut row = vec![self.id.clone()];
        for (_, s) in self.scopes() {
            row.extend(s.values().iter().map(|v| format!("{v:.6}")));
        }
        row
    }
}

/// Binary per-class masks for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselMasks {
    pub artery: Mask,
    pub vein: Mask,
}

/// Metrics on binarized predictions; pixels in `ignore` are cleared from both
/// prediction and ground truth before any scope is computed.
pub fn evaluate_masks(
    id: &str,
    pred: &VesselMasks,
    gt: &VesselMasks,
    ignore: Option<&Mask>,
    cfg: &MetricConfig,
) -> Result<MetricsReport> {
    let clean = |m: &Mask| -> Result<Mask> {
        match ignore {
            Some(ig) if ig.any() => m.and_not(ig),
            _ => Ok(m.clone()),
        }
    };
    let (pa, pv) = (clean(&pred.artery)?, clean(&pred.vein)?);
    let (ga, gv) = (clean(&gt.artery)?, clean(&gt.vein)?);
    Ok(MetricsReport {
        id: id.to_string(),
        artery: ScopeMetrics::compute(&pa, &ga, cfg)?,
        vein: ScopeMetrics::compute(&pv, &gv, cfg)?,
        combined: ScopeMetrics::compute(&pa.or(&pv)?, &ga.or(&gv)?, cfg)?,
    })
}

/// Binarizes two-class probabilities (`2×H×W` or `1×2×H×W`, artery first)
/// and scores them against a sample, skipping its uncertain pixels.
pub fn evaluate_sample(probs: &Tensor, gt: &FundusSample, cfg: &MetricConfig) -> Result<MetricsReport> {
    let (h, w) = gt.dims();
    if probs.len() != 2 * h * w {
        return Err(Error::Shape(format!(
            "probabilities {:?} for a {h}×{w} sample",
            probs.shape()
        )));
    }
    let plane = |c: usize| -> Result<Mask> {
        let p = ProbMap::new(h, w, probs.data()[c * h * w..(c + 1) * h * w].to_vec())?;
        Ok(binarize(&p, cfg.threshold))
    };
    let pred = VesselMasks {
        artery: plane(0)?,
        vein: plane(1)?,
    };
    evaluate_masks(&gt.id, &pred, &gt.vessel_masks(), Some(&gt.uncertain), cfg)
}

/// Per-field arithmetic mean; the id becomes `"mean"`.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("aggregate of zero reports".into()));
    }
    if reports.len() == 1 {
        return Ok(reports[0].clone());
    }
    let n = reports.len() as f64;
    let mean = |pick: fn(&MetricsReport) -> &ScopeMetrics| {
        let mut acc = [0.0; 11];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(pick(r).values()) {
                *a += v;
            }
        }
        ScopeMetrics::from_values(acc.map(|a| a / n))
    };
    Ok(MetricsReport {
        id: "mean".to_string(),
        artery: mean(|r| &r.artery),
        vein: mean(|r| &r.vein),
        combined: mean(|r| &r.combined),
    })
}
