//! Training objectives over `N×C×H×W` probability maps.
//!
//! Every ratio is computed per sample and per class, with an additive `ε` in
//! numerator and denominator, and then averaged. A validity weight of shape
//! `N×1×H×W` (1 = counted, 0 = ignored) multiplies every pixel sum.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, PoolKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "tversky+cldice")]
    TverskyClDice,
    #[serde(rename = "tversky")]
    Tversky,
    #[serde(rename = "bcedice")]
    BceDice,
    #[serde(rename = "logcoshdice")]
    LogCoshDice,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::TverskyClDice,
        LossKind::Tversky,
        LossKind::BceDice,
        LossKind::LogCoshDice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::TverskyClDice => "tversky+cldice",
            LossKind::Tversky => "tversky",
            LossKind::BceDice => "bcedice",
            LossKind::LogCoshDice => "logcoshdice",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss `{s}` (expected tversky+cldice, tversky, bcedice or logcoshdice)"
                ))
            })
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub loss: LossKind,
    /// False-negative weight.
    pub alpha: f64,
    /// False-positive weight; must equal `1 - alpha`.
    pub beta: f64,
    pub cldice_weight: f64,
    pub skeleton_iters: usize,
    pub smooth_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::TverskyClDice,
            alpha: 0.65,
            beta: 0.35,
            cldice_weight: 0.5,
            skeleton_iters: 10,
            smooth_eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "alpha ({}) and beta ({}) must be in [0,1] and sum to 1",
                self.alpha, self.beta
            )));
        }
        if self.skeleton_iters == 0 {
            return Err(Error::Config("skeleton_iters must be at least 1".into()));
        }
        if !(self.smooth_eps > 0.0) {
            return Err(Error::Config("smooth_eps must be positive".into()));
        }
        if !(self.cldice_weight >= 0.0) {
            return Err(Error::Config("cldice_weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Same config with `beta = 1 - alpha`.
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self.beta = 1.0 - alpha;
        self
    }
}

fn check_pair(g: &Graph, p: Var, t: Var, valid: Option<Var>) -> Result<(usize, usize)> {
    let ps = g.shape(p);
    if ps.len() != 4 || ps != g.shape(t) {
        return Err(Error::Shape(format!(
            "loss inputs: prediction {:?} vs target {:?}",
            ps,
            g.shape(t)
        )));
    }
    if let Some(v) = valid {
        let vs = g.shape(v);
        if vs.len() != 4 || vs[0] != ps[0] || vs[1] != 1 || vs[2..] != ps[2..] {
            return Err(Error::Shape(format!("validity weight {vs:?} for prediction {ps:?}")));
        }
    }
    Ok((ps[0], ps[1]))
}

fn weighted(g: &mut Graph, x: Var, valid: Option<Var>) -> Result<Var> {
    match valid {
        Some(v) => g.mul(x, v),
        None => Ok(x),
    }
}

/// Per-(sample, class) pixel sum: `N×C×1×1`.
fn plane_sum(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let target = [s[0], s[1], 1, 1];
    g.sum_to(x, &target)
}

/// `(a + ε) / (b + ε)`.
fn smooth_ratio(g: &mut Graph, a: Var, b: Var, eps: f64) -> Result<Var> {
    let a = g.add_scalar(a, eps);
    let b = g.add_scalar(b, eps);
    g.div(a, b)
}

/// Tversky index per sample and class, `N×C×1×1`.
pub fn tversky_index(
    g: &mut Graph,
    p: Var,
    t: Var,
    valid: Option<Var>,
    alpha: f64,
    beta: f64,
    eps: f64,
) -> Result<Var> {
    check_pair(g, p, t, valid)?;
    let pv = weighted(g, p, valid)?;
    let tv = weighted(g, t, valid)?;
    let tp = g.mul(pv, tv)?;
    let tp = plane_sum(g, tp)?;
    let sp = plane_sum(g, pv)?;
    let st = plane_sum(g, tv)?;
    let fn_ = g.sub(st, tp)?;
    let fp = g.sub(sp, tp)?;
    let fn_ = g.scale(fn_, alpha);
    let fp = g.scale(fp, beta);
    let den = g.add(tp, fn_)?;
    let den = g.add(den, fp)?;
    smooth_ratio(g, tp, den, eps)
}

/// `1 - mean(TI)` over samples and classes.
pub fn tversky_loss(g: &mut Graph, p: Var, t: Var, valid: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    let ti = tversky_index(g, p, t, valid, cfg.alpha, cfg.beta, cfg.smooth_eps)?;
    let m = g.mean_all(ti);
    Ok(g.one_minus(m))
}

fn soft_open(g: &mut Graph, x: Var) -> Result<Var> {
    let e = g.pool3(x, PoolKind::Min)?;
    g.pool3(e, PoolKind::Max)
}

/// Differentiable skeleton by iterated soft erosion and opening.
pub fn soft_skeletonize(g: &mut Graph, p: Var, iters: usize) -> Result<Var> {
    let mut img = p;
    let open = soft_open(g, img)?;
    let d = g.sub(img, open)?;
    let mut skel = g.relu(d);
    for _ in 0..iters {
        img = g.pool3(img, PoolKind::Min)?;
        let open = soft_open(g, img)?;
        let d = g.sub(img, open)?;
        let delta = g.relu(d);
        let sd = g.mul(skel, delta)?;
        let e = g.sub(delta, sd)?;
        let e = g.relu(e);
        skel = g.add(skel, e)?;
    }
    Ok(skel)
}

/// Soft skeleton of a plain tensor.
pub fn soft_skeleton_tensor(p: &Tensor, iters: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(p.clone());
    let s = soft_skeletonize(&mut g, x, iters)?;
    Ok(g.value(s).clone())
}

/// `1 - mean(clDice)` over samples and classes.
pub fn cl_dice_loss(
    g: &mut Graph,
    p: Var,
    t: Var,
    valid: Option<Var>,
    iters: usize,
    eps: f64,
) -> Result<Var> {
    check_pair(g, p, t, valid)?;
    let sp = soft_skeletonize(g, p, iters)?;
    let st = soft_skeletonize(g, t, iters)?;
    let sp = weighted(g, sp, valid)?;
    let st = weighted(g, st, valid)?;
    let sp_t = g.mul(sp, t)?;
    let sp_t = plane_sum(g, sp_t)?;
    let sp_sum = plane_sum(g, sp)?;
    let tprec = smooth_ratio(g, sp_t, sp_sum, eps)?;
    let st_p = g.mul(st, p)?;
    let st_p = plane_sum(g, st_p)?;
    let st_sum = plane_sum(g, st)?;
    let tsens = smooth_ratio(g, st_p, st_sum, eps)?;
    let prod = g.mul(tprec, tsens)?;
    let prod = g.scale(prod, 2.0);
    let sum = g.add(tprec, tsens)?;
    let cl = g.div(prod, sum)?;
    let m = g.mean_all(cl);
    Ok(g.one_minus(m))
}

/// Soft Dice loss, `1 - mean((2·TP + ε) / (ΣP + ΣG + ε))`.
pub fn dice_loss(g: &mut Graph, p: Var, t: Var, valid: Option<Var>, eps: f64) -> Result<Var> {
    check_pair(g, p, t, valid)?;
    let pv = weighted(g, p, valid)?;
    let tv = weighted(g, t, valid)?;
    let tp = g.mul(pv, tv)?;
    let tp = plane_sum(g, tp)?;
    let tp2 = g.scale(tp, 2.0);
    let sp = plane_sum(g, pv)?;
    let st = plane_sum(g, tv)?;
    let den = g.add(sp, st)?;
    let d = smooth_ratio(g, tp2, den, eps)?;
    let m = g.mean_all(d);
    Ok(g.one_minus(m))
}

const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy over counted pixels.
pub fn bce(g: &mut Graph, p: Var, t: Var, valid: Option<Var>) -> Result<Var> {
    check_pair(g, p, t, valid)?;
    let pc = g.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let lp = g.ln(pc);
    let q = g.one_minus(pc);
    let lq = g.ln(q);
    let a = g.mul(t, lp)?;
    let nt = g.one_minus(t);
    let b = g.mul(nt, lq)?;
    let s = g.add(a, b)?;
    let s = g.neg(s);
    let s = weighted(g, s, valid)?;
    let total = g.sum_all(s);
    let classes = g.shape(p)[1] as f64;
    let count = match valid {
        Some(v) => g.value(v).sum() * classes,
        None => g.value(p).len() as f64,
    };
    Ok(g.scale(total, 1.0 / count.max(1.0)))
}

/// The configured objective. For `tversky+cldice` this is
/// `L_Tv + cldice_weight · L_clDice`.
pub fn total_loss(g: &mut Graph, p: Var, t: Var, valid: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    match cfg.loss {
        LossKind::Tversky => tversky_loss(g, p, t, valid, cfg),
        LossKind::TverskyClDice => {
            let tv = tversky_loss(g, p, t, valid, cfg)?;
            if cfg.cldice_weight == 0.0 {
                return Ok(tv);
            }
            let cl = cl_dice_loss(g, p, t, valid, cfg.skeleton_iters, cfg.smooth_eps)?;
            let cl = g.scale(cl, cfg.cldice_weight);
            g.add(tv, cl)
        }
        LossKind::BceDice => {
            let b = bce(g, p, t, valid)?;
            let d = dice_loss(g, p, t, valid, cfg.smooth_eps)?;
            g.add(b, d)
        }
        LossKind::LogCoshDice => {
            let d = dice_loss(g, p, t, valid, cfg.smooth_eps)?;
            Ok(g.log_cosh(d))
        }
    }
}

/// Evaluates a loss on plain tensors.
pub fn loss_value(
    p: &Tensor,
    t: &Tensor,
    valid: Option<&Tensor>,
    f: impl FnOnce(&mut Graph, Var, Var, Option<Var>) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let tv = g.constant(t.clone());
    let vv = valid.map(|v| g.constant(v.clone()));
    let out = f(&mut g, pv, tv, vv)?;
    Ok(g.value(out).data()[0])
}


#[cfg(test)]
mod gradient_tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn total_loss_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = [1, 2, 8, 8];
        let p = Tensor::from_fn(&shape, |_| rng.random_range(0.05..0.95) + 0.01);
        let t = Tensor::from_fn(&shape, |_| (rng.random::<f64>() < 0.4) as u8 as f64);
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let pv = g.input(p.clone());
        let tv = g.constant(t.clone());
        let l = total_loss(&mut g, pv, tv, None, &cfg).unwrap();
        let grad = g.backward(l).unwrap().get(pv).unwrap().clone();
        let f = |x: &Tensor| loss_value(x, &t, None, |g, p, t, v| total_loss(g, p, t, v, &cfg)).unwrap();
        let h = 1e-6;
        let mut fd = vec![0.0; p.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut a = p.clone();
            a.data_mut()[i] += h;
            let mut b = p.clone();
            b.data_mut()[i] -= h;
            *slot = (f(&a) - f(&b)) / (2.0 * h);
        }
        let diff: f64 = grad.data().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = grad.l2_norm().max(fd.iter().map(|v| v * v).sum::<f64>().sqrt());
        assert!(diff / scale < 1e-6, "relative error {}", diff / scale);
    }
}
