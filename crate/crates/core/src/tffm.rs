//! Latent-graph feature fusion.
//!
//! A decoder feature map is compressed and pooled to a coarse grid whose
//! cells become graph nodes. Each node is linked to its `k` most
//! cosine-similar nodes, one graph-attention layer mixes features along those
//! links, and the result is fused with a coarser auxiliary grid, refined by
//! channel, spatial and vesselness attention, and blended back into the
//! full-resolution map through a learned per-pixel gate.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{he_normal, Conv2d, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Upper bound on the hidden width of the graph space.
pub const MAX_HIDDEN: usize = 64;
const CAM_REDUCTION: usize = 4;

/// How the per-pixel blend `λ` is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Learned,
    /// `λ = 0`: the module returns its input untouched.
    ForceClosed,
    /// `λ = 1`: the module returns the fusion branch.
    ForceOpen,
}

/// How non-neighbours are removed from the attention softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Non-neighbour logits are `-inf`, so they get exactly zero weight.
    #[default]
    Additive,
    /// Logits are multiplied by the adjacency; non-neighbours keep logit 0
    /// and therefore some weight.
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TffmConfig {
    pub level: usize,
    pub grid: usize,
    pub neighbors: usize,
    /// `None` means `min(channels, 64)`.
    pub hidden: Option<usize>,
    pub tau_init: f64,
}

impl TffmConfig {
    pub fn new(level: usize, grid: usize, neighbors: usize) -> Self {
        Self {
            level,
            grid,
            neighbors,
            hidden: None,
            tau_init: 1.0,
        }
    }

    pub fn aux_grid(&self) -> usize {
        (self.grid / 2).max(4)
    }

    pub fn hidden_for(&self, channels: usize) -> usize {
        self.hidden.unwrap_or(channels.min(MAX_HIDDEN))
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(Error::Config(format!(
                "level {}: grid {} must be at least 4",
                self.level, self.grid
            )));
        }
        if self.neighbors == 0 || self.neighbors >= self.grid * self.grid {
            return Err(Error::Config(format!(
                "level {}: neighbors {} must lie in 1..{}",
                self.level,
                self.neighbors,
                self.grid * self.grid
            )));
        }
        if !(self.tau_init > 0.0) {
            return Err(Error::Config("tau_init must be positive".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden channels must be positive".into()));
        }
        Ok(())
    }
}

/// Pooled node features with their similarity and neighbourhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGraph {
    pub nodes: usize,
    pub k: usize,
    /// Row-major `N×N` cosine similarity; all-zero nodes score -1 against everything.
    pub similarity: Vec<f64>,
    /// Row-major `N×N` adjacency including self-loops.
    pub adjacency: Vec<bool>,
}

impl LatentGraph {
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.nodes;
        (0..n).filter(move |&j| self.adjacency[i * n + j])
    }

    pub fn adjacency_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.nodes, self.nodes], |i| self.adjacency[i] as u8 as f64)
    }
}

/// Builds the top-`k` cosine graph over the rows of `features` (`N×C`).
/// Self is excluded from the selection and added back as a self-loop; ties
/// go to the lower index.
pub fn build_graph(features: &Tensor, k: usize) -> Result<LatentGraph> {
    if features.ndim() != 2 {
        return Err(Error::Shape(format!("node features must be N×C, got {:?}", features.shape())));
    }
    let (n, c) = (features.shape()[0], features.shape()[1]);
    if k >= n.max(1) && n > 1 {
        return Err(Error::Config(format!("k = {k} must be below the node count {n}")));
    }
    let x = features.data();
    let norms: Vec<f64> = (0..n)
        .map(|i| x[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut similarity = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            similarity[i * n + j] = if norms[i] == 0.0 || norms[j] == 0.0 {
                -1.0
            } else {
                let dot: f64 = (0..c).map(|d| x[i * c + d] * x[j * c + d]).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
        }
    }
    let mut adjacency = vec![false; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = &similarity[i * n..(i + 1) * n];
        let rank = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if k > 0 && k < order.len() {
            order.select_nth_unstable_by(k - 1, rank);
        }
        for &j in order.iter().take(k) {
            adjacency[i * n + j] = true;
        }
        adjacency[i * n + i] = true;
    }
    Ok(LatentGraph {
        nodes: n,
        k,
        similarity,
        adjacency,
    })
}

/// Parameters of one module instance.
#[derive(Debug, Clone)]
pub struct Tffm {
    pub config: TffmConfig,
    pub channels: usize,
    pub hidden: usize,
    pub compress: Conv2d,
    /// Node projection `W`, `C_h×C_h`.
    pub gat_weight: ParamId,
    /// Attention vector `a` split into its source and target halves, `C_h×1` each.
    pub gat_src: ParamId,
    pub gat_dst: ParamId,
    /// `log τ`, `1×1`.
    pub log_tau: ParamId,
    pub fuse: Conv2d,
    pub cam_reduce: Conv2d,
    pub cam_expand: Conv2d,
    pub sam: Conv2d,
    pub vessel_hidden: Conv2d,
    pub vessel_out: Conv2d,
    pub expand: Conv2d,
    pub gate: Conv2d,
    pub fusion: Conv2d,
}

/// Intermediate values kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct TffmTrace {
    pub main: Var,
    pub aux: Var,
    pub graph_out: Var,
    pub refined: Var,
    pub gate: Option<Var>,
    pub output: Var,
}

impl Tffm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        config: TffmConfig,
    ) -> Result<Self> {
        config.validate()?;
        let ch = config.hidden_for(channels);
        let p = |s: &str| format!("{name}.{s}");
        let compress = Conv2d::simple(store, rng, &p("compress"), channels, ch, 1);
        let gat_weight = store.add(p("gat.weight"), he_normal(rng, &[ch, ch], ch));
        let gat_src = store.add(p("gat.a_src"), he_normal(rng, &[ch, 1], ch).map(|v| v * 0.5));
        let gat_dst = store.add(p("gat.a_dst"), he_normal(rng, &[ch, 1], ch).map(|v| v * 0.5));
        let log_tau = store.add(p("gat.log_tau"), Tensor::full(&[1, 1], config.tau_init.ln()));
        let fuse = Conv2d::simple(store, rng, &p("fuse"), 2 * ch, ch, 3);
        let mid = (ch / CAM_REDUCTION).max(1);
        let cam_reduce = Conv2d::simple(store, rng, &p("cam.reduce"), ch, mid, 1);
        let cam_expand = Conv2d::simple(store, rng, &p("cam.expand"), mid, ch, 1);
        let sam = Conv2d::simple(store, rng, &p("sam"), 2, 1, 7);
        let vessel_hidden = Conv2d::simple(store, rng, &p("vessel.hidden"), ch, mid, 3);
        let vessel_out = Conv2d::simple(store, rng, &p("vessel.out"), mid, 1, 1);
        let expand = Conv2d::simple(store, rng, &p("expand"), ch, channels, 1);
        let gate = Conv2d::simple(store, rng, &p("gate"), 2 * channels, 1, 1);
        let fusion = Conv2d::simple(store, rng, &p("fusion"), 2 * channels, channels, 3);
        Ok(Self {
            config,
            channels,
            hidden: ch,
            compress,
            gat_weight,
            gat_src,
            gat_dst,
            log_tau,
            fuse,
            cam_reduce,
            cam_expand,
            sam,
            vessel_hidden,
            vessel_out,
            expand,
            gate,
            fusion,
        })
    }

    /// Compresses to `C_h` channels and pools to the main and auxiliary grids.
    pub fn compress_and_pool(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "level {}: expected {} channels, got {c}",
                self.config.level, self.channels
            )));
        }
        let grid = self.config.grid;
        if grid > h.min(w) {
            return Err(Error::Config(format!(
                "level {}: grid {grid} exceeds the {h}×{w} feature map",
                self.config.level
            )));
        }
        let f = self.compress.forward(g, x)?;
        let main = g.adaptive_avg_pool(f, grid, grid)?;
        let a = self.config.aux_grid().min(h.min(w));
        let aux = g.adaptive_avg_pool(f, a, a)?;
        Ok((main, aux))
    }

    /// One attention layer over `h` (`N×C_h`) restricted to `graph`;
    /// returns the ELU-activated output and the attention matrix.
    pub fn graph_attention(&self, g: &mut Graph, h: Var, graph: &LatentGraph, mask: MaskMode) -> Result<(Var, Var)> {
        let w = g.param(self.gat_weight);
        let wh = g.matmul(h, w)?;
        let a_src = g.param(self.gat_src);
        let a_dst = g.param(self.gat_dst);
        let s = g.matmul(wh, a_src)?;
        let d = g.matmul(wh, a_dst)?;
        let dt = g.transpose(d)?;
        let e = g.add(s, dt)?;
        let e = g.leaky_relu(e, LEAKY_SLOPE);
        let log_tau = g.param(self.log_tau);
        let tau = g.exp(log_tau);
        let logits = g.div(e, tau)?;
        let att = match mask {
            MaskMode::Additive => g.softmax_rows(logits, Some(Rc::new(graph.adjacency.clone())))?,
            MaskMode::Multiplicative => {
                let adj = g.constant(graph.adjacency_tensor());
                let masked = g.mul(logits, adj)?;
                g.softmax_rows(masked, None)?
            }
        };
        let out = g.matmul(att, wh)?;
        Ok((g.elu(out), att))
    }

    /// Builds a graph per sample from the pooled grid and runs attention;
    /// returns `N×C_h×G×G`.
    pub fn reason(&self, g: &mut Graph, main: Var, mask: MaskMode) -> Result<(Var, Vec<LatentGraph>)> {
        let (n, ch, gh, gw) = g.value(main).dims4()?;
        let mut outs = Vec::with_capacity(n);
        let mut graphs = Vec::with_capacity(n);
        for b in 0..n {
            let item = g.select_batch(main, b)?;
            let flat = g.reshape(item, &[ch, gh * gw])?;
            let nodes = g.transpose(flat)?;
            let graph = build_graph(g.value(nodes), self.config.neighbors)?;
            let (out, _) = self.graph_attention(g, nodes, &graph, mask)?;
            let back = g.transpose(out)?;
            outs.push(g.reshape(back, &[1, ch, gh, gw])?);
            graphs.push(graph);
        }
        Ok((g.stack_batch(&outs)?, graphs))
    }

    /// `σ(MLP(GAP(x)))`, `N×C_h×1×1`.
    pub fn channel_attention(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(x)?;
        let z = self.cam_reduce.forward(g, pooled)?;
        let z = g.relu(z);
        let z = self.cam_expand.forward(g, z)?;
        Ok(g.sigmoid(z))
    }

    /// `σ(conv7×7([mean_c, max_c]))`, `N×1×G×G`.
    pub fn spatial_attention(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (n, c, h, w) = g.value(x).dims4()?;
        let sum = g.sum_to(x, &[n, 1, h, w])?;
        let mean = g.scale(sum, 1.0 / c as f64);
        let max = g.max_channel(x)?;
        let cat = g.concat_channels(&[mean, max])?;
        let z = self.sam.forward(g, cat)?;
        Ok(g.sigmoid(z))
    }

    /// `σ(F_vessel(x))`, `N×1×G×G`.
    pub fn vesselness(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = self.vessel_hidden.forward(g, x)?;
        let z = g.relu(z);
        let z = self.vessel_out.forward(g, z)?;
        Ok(g.sigmoid(z))
    }

    pub fn fuse_and_refine(&self, g: &mut Graph, graph_out: Var, aux: Var) -> Result<Var> {
        let (_, _, gh, gw) = g.value(graph_out).dims4()?;
        let up = g.resize_bilinear(aux, gh, gw)?;
        let cat = g.concat_channels(&[graph_out, up])?;
        let fused = self.fuse.forward(g, cat)?;
        let cam = self.channel_attention(g, fused)?;
        let sam = self.spatial_attention(g, fused)?;
        let att = g.mul(fused, cam)?;
        let att = g.mul(att, sam)?;
        let v = self.vesselness(g, att)?;
        g.mul(att, v)
    }

    /// Gated residual blend of the refined grid into `x`. Returns the output
    /// and, in learned mode, the gate map.
    pub fn integrate(&self, g: &mut Graph, x: Var, refined: Var, mode: GateMode) -> Result<(Var, Option<Var>)> {
        if mode == GateMode::ForceClosed {
            return Ok((x, None));
        }
        let (_, _, h, w) = g.value(x).dims4()?;
        let up = g.resize_bilinear(refined, h, w)?;
        let f_exp = self.expand.forward(g, up)?;
        let cat = g.concat_channels(&[x, f_exp])?;
        let fused = self.fusion.forward(g, cat)?;
        if mode == GateMode::ForceOpen {
            return Ok((fused, None));
        }
        let pre = self.gate.forward(g, cat)?;
        let lambda = g.sigmoid(pre);
        let a = g.mul(lambda, fused)?;
        let keep = g.one_minus(lambda);
        let b = g.mul(keep, x)?;
        Ok((g.add(a, b)?, Some(lambda)))
    }

    pub fn forward_traced(&self, g: &mut Graph, x: Var, mode: GateMode, mask: MaskMode) -> Result<TffmTrace> {
        let (main, aux) = self.compress_and_pool(g, x)?;
        if mode == GateMode::ForceClosed {
            return Ok(TffmTrace {
                main,
                aux,
                graph_out: main,
                refined: main,
                gate: None,
                output: x,
            });
        }
        let (graph_out, _) = self.reason(g, main, mask)?;
        let refined = self.fuse_and_refine(g, graph_out, aux)?;
        let (output, gate) = self.integrate(g, x, refined, mode)?;
        Ok(TffmTrace {
            main,
            aux,
            graph_out,
            refined,
            gate,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: GateMode, mask: MaskMode) -> Result<Var> {
        if mode == GateMode::ForceClosed {
            return Ok(x);
        }
        Ok(self.forward_traced(g, x, mode, mask)?.output)
    }

    /// Ids of every parameter owned by this module.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.gat_weight, self.gat_src, self.gat_dst, self.log_tau];
        for c in [
            &self.compress,
            &self.fuse,
            &self.cam_reduce,
            &self.cam_expand,
            &self.sam,
            &self.vessel_hidden,
            &self.vessel_out,
            &self.expand,
            &self.gate,
            &self.fusion,
        ] {
            ids.push(c.weight);
            ids.extend(c.bias);
        }
        ids
    }
}


#[cfg(test)]
mod gradient_tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / n(a).max(n(b)).max(1e-300)
    }

    #[test]
    fn mean_output_gradients_match_central_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tffm::new(&mut store, &mut rng, "t", 4, TffmConfig::new(0, 4, 2)).unwrap();
        let x = Tensor::from_fn(&[1, 4, 16, 16], |_| rng.random_range(-1.0..1.0));
        let eval = |store: &ParamStore, x: &Tensor| {
            let mut g = Graph::with_params(store);
            let xv = g.constant(x.clone());
            let y = t.forward(&mut g, xv, GateMode::Learned, MaskMode::Additive).unwrap();
            let m = g.mean_all(y);
            g.value(m).data()[0]
        };
        let mut g = Graph::with_params(&store);
        let xv = g.input(x.clone());
        let y = t.forward(&mut g, xv, GateMode::Learned, MaskMode::Additive).unwrap();
        let m = g.mean_all(y);
        let grads = g.backward(m).unwrap();
        let gx = grads.get(xv).unwrap().clone();
        let pg = g.param_grads(&grads);
        let h = 1e-6;
        let mut fd = vec![0.0; x.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            *slot = (eval(&store, &a) - eval(&store, &b)) / (2.0 * h);
        }
        assert!(rel_err(gx.data(), &fd) < 1e-3, "x: {}", rel_err(gx.data(), &fd));
        for id in [t.gat_weight, t.gat_src, t.gat_dst, t.log_tau] {
            let ga = &pg.iter().find(|(p, _)| *p == id).unwrap().1;
            let mut fd = vec![0.0; ga.len()];
            for (i, slot) in fd.iter_mut().enumerate() {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += h;
                let up = eval(&s, &x);
                s.get_mut(id).data_mut()[i] -= 2.0 * h;
                *slot = (up - eval(&s, &x)) / (2.0 * h);
            }
            let e = rel_err(ga.data(), &fd);
            assert!(e < 1e-3, "{}: {e}", store.name(id));
        }
    }
}
