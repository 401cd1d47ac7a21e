//! Nested U-Net with attention-gated skips.
//!
//! Node `X[i][j]` lives at depth `i` (spatial size `H / 2^i`). Column 0 is
//! the encoder; every later node convolves the concatenation of all earlier
//! nodes in its row (each passed through an attention gate driven by the
//! coarser input) and the upsampled node below-left, `X[i+1][j-1]`. The last
//! node of every row, `X[l][L-1-l]`, is a hook point where a fusion module
//! can rewrite the features before anything downstream reads them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, InstanceNorm, ParamStore};
use crate::tffm::{GateMode, MaskMode, Tffm, TffmConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderPreset {
    #[serde(rename = "tiny")]
    Tiny,
    #[serde(rename = "effnet-b0-like")]
    EffNetB0Like,
}

impl EncoderPreset {
    pub fn name(self) -> &'static str {
        match self {
            EncoderPreset::Tiny => "tiny",
            EncoderPreset::EffNetB0Like => "effnet-b0-like",
        }
    }

    pub fn default_channels(self) -> Vec<usize> {
        match self {
            EncoderPreset::Tiny => vec![8, 16, 32, 64, 128],
            EncoderPreset::EffNetB0Like => vec![32, 24, 40, 112, 320],
        }
    }
}

impl std::str::FromStr for EncoderPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(EncoderPreset::Tiny),
            "effnet-b0-like" => Ok(EncoderPreset::EffNetB0Like),
            _ => Err(Error::Config(format!(
                "unknown encoder preset `{s}` (expected tiny or effnet-b0-like)"
            ))),
        }
    }
}

/// Per-level fusion module settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TffmSettings {
    pub enabled: bool,
    /// Grid size per level, level 0 first.
    pub grids: Vec<usize>,
    pub neighbors: Vec<usize>,
    /// Hidden width per level; empty means `min(C_l, 64)`.
    pub hidden: Vec<usize>,
    pub tau_init: f64,
    pub gate: GateMode,
    pub mask: MaskMode,
}

impl Default for TffmSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            grids: vec![20, 24, 28, 32, 32],
            neighbors: vec![5, 7, 9, 12, 15],
            hidden: Vec::new(),
            tau_init: 1.0,
            gate: GateMode::Learned,
            mask: MaskMode::Additive,
        }
    }
}

impl TffmSettings {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn level(&self, l: usize) -> TffmConfig {
        TffmConfig {
            level: l,
            grid: self.grids[l],
            neighbors: self.neighbors[l],
            hidden: self.hidden.get(l).copied(),
            tau_init: self.tau_init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub encoder: EncoderPreset,
    /// Channels per depth, shallowest first.
    pub channels: Vec<usize>,
    pub levels: usize,
    pub attention_gates: bool,
    pub classes: usize,
    pub tffm: TffmSettings,
    /// Seed for weight initialisation.
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderPreset::Tiny,
            channels: EncoderPreset::Tiny.default_channels(),
            levels: 5,
            attention_gates: true,
            classes: 2,
            tffm: TffmSettings::default(),
            init_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn preset(encoder: EncoderPreset) -> Self {
        Self {
            encoder,
            channels: encoder.default_channels(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be at least 2, got {}", self.levels)));
        }
        if self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "{} channel entries for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.classes == 0 {
            return Err(Error::Config("channels and classes must be positive".into()));
        }
        if self.encoder == EncoderPreset::EffNetB0Like && self.levels != 5 {
            return Err(Error::Config("the effnet-b0-like encoder has exactly 5 levels".into()));
        }
        if self.tffm.enabled {
            let t = &self.tffm;
            if t.grids.len() != self.levels || t.neighbors.len() != self.levels {
                return Err(Error::Config(format!(
                    "tffm needs {} grid sizes and neighbor counts, got {} and {}",
                    self.levels,
                    t.grids.len(),
                    t.neighbors.len()
                )));
            }
            if !t.hidden.is_empty() && t.hidden.len() != self.levels {
                return Err(Error::Config(format!(
                    "tffm hidden widths: {} entries for {} levels",
                    t.hidden.len(),
                    self.levels
                )));
            }
            for l in 0..self.levels {
                t.level(l).validate()?;
            }
        }
        Ok(())
    }

    /// Shrinks fusion grids that exceed the feature map of their level for a
    /// given input size, and neighbour counts that exceed the shrunken grid.
    pub fn fitted_to(&self, image_size: usize) -> Self {
        let mut out = self.clone();
        let t = &mut out.tffm;
        for l in 0..t.grids.len().min(t.neighbors.len()) {
            let side = (image_size >> l).max(1);
            if t.grids[l] > side {
                t.grids[l] = side.max(4);
            }
            let cap = (t.grids[l] * t.grids[l]).saturating_sub(1).max(1);
            t.neighbors[l] = t.neighbors[l].min(cap);
        }
        out
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Two 3×3 conv, instance norm, ReLU layers.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub first: Conv2d,
    pub first_norm: InstanceNorm,
    pub second: Conv2d,
    pub second_norm: InstanceNorm,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self {
            first: Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1, false),
            first_norm: InstanceNorm::new(store, &format!("{name}.norm1"), out_ch),
            second: Conv2d::new(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false),
            second_norm: InstanceNorm::new(store, &format!("{name}.norm2"), out_ch),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.first.forward(g, x)?;
        let y = self.first_norm.forward(g, y)?;
        let y = g.relu(y);
        let y = self.second.forward(g, y)?;
        let y = self.second_norm.forward(g, y)?;
        Ok(g.relu(y))
    }
}

/// Inverted residual with squeeze-excitation.
#[derive(Debug, Clone)]
pub struct MbConv {
    pub expand: Option<Conv2d>,
    pub depthwise: Conv2d,
    pub se_reduce: Conv2d,
    pub se_expand: Conv2d,
    pub project: Conv2d,
    pub residual: bool,
}

impl MbConv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        expand: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let mid = in_ch * expand;
        let p = |s: &str| format!("{name}.{s}");
        Self {
            expand: (expand != 1).then(|| Conv2d::new(store, rng, &p("expand"), in_ch, mid, 1, 1, 1, true)),
            depthwise: Conv2d::new(store, rng, &p("dw"), mid, mid, kernel, stride, mid, true),
            se_reduce: Conv2d::simple(store, rng, &p("se.reduce"), mid, (in_ch / 4).max(1), 1),
            se_expand: Conv2d::simple(store, rng, &p("se.expand"), (in_ch / 4).max(1), mid, 1),
            project: Conv2d::new(store, rng, &p("project"), mid, out_ch, 1, 1, 1, true),
            residual: stride == 1 && in_ch == out_ch,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut y = x;
        if let Some(e) = &self.expand {
            y = e.forward(g, y)?;
            y = g.silu(y);
        }
        y = self.depthwise.forward(g, y)?;
        y = g.silu(y);
        let s = g.global_avg_pool(y)?;
        let s = self.se_reduce.forward(g, s)?;
        let s = g.silu(s);
        let s = self.se_expand.forward(g, s)?;
        let s = g.sigmoid(s);
        y = g.mul(y, s)?;
        y = self.project.forward(g, y)?;
        if self.residual {
            y = g.add(y, x)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub enum EncoderStage {
    /// Optional 2×2 max-pool followed by a conv block.
    Plain { pool: bool, block: ConvBlock },
    /// Stem conv (first stage only) followed by inverted residuals.
    Mobile { stem: Option<Conv2d>, blocks: Vec<MbConv> },
}

impl EncoderStage {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            EncoderStage::Plain { pool, block } => {
                let x = if *pool { g.max_pool2(x)? } else { x };
                block.forward(g, x)
            }
            EncoderStage::Mobile { stem, blocks } => {
                let mut y = x;
                if let Some(s) = stem {
                    y = s.forward(g, y)?;
                    y = g.silu(y);
                }
                for b in blocks {
                    y = b.forward(g, y)?;
                }
                Ok(y)
            }
        }
    }
}

/// Additive attention gate: `skip ⊙ σ(ψ(ReLU(W_x·skip + W_g·up(gating))))`.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    pub w_skip: Conv2d,
    pub w_gate: Conv2d,
    pub psi: Conv2d,
}

impl AttentionGate {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, skip_ch: usize, gate_ch: usize) -> Self {
        let inter = (skip_ch / 2).max(1);
        Self {
            w_skip: Conv2d::new(store, rng, &format!("{name}.w_skip"), skip_ch, inter, 1, 1, 1, false),
            w_gate: Conv2d::simple(store, rng, &format!("{name}.w_gate"), gate_ch, inter, 1),
            psi: Conv2d::simple(store, rng, &format!("{name}.psi"), inter, 1, 1),
        }
    }

    /// Returns the gated skip and the coefficient map.
    pub fn forward(&self, g: &mut Graph, gating: Var, skip: Var) -> Result<(Var, Var)> {
        let (_, _, h, w) = g.value(skip).dims4()?;
        let up = g.resize_bilinear(gating, h, w)?;
        let a = self.w_skip.forward(g, skip)?;
        let b = self.w_gate.forward(g, up)?;
        let s = g.add(a, b)?;
        let s = g.relu(s);
        let q = self.psi.forward(g, s)?;
        let coef = g.sigmoid(q);
        Ok((g.mul(skip, coef)?, coef))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.w_skip.zero(store);
        self.w_gate.zero(store);
        self.psi.zero(store);
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: BackboneConfig,
    pub encoder: Vec<EncoderStage>,
    /// `decoder[i][j-1]` computes node `X[i][j]`.
    pub decoder: Vec<Vec<ConvBlock>>,
    /// `gates[i][j-1][m]` gates skip `X[i][m]` into node `X[i][j]`.
    pub gates: Vec<Vec<Vec<AttentionGate>>>,
    /// One module per level when enabled.
    pub tffm: Vec<Tffm>,
    pub head: Conv2d,
}

fn build_encoder(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Vec<EncoderStage> {
    let ch = &cfg.channels;
    match cfg.encoder {
        EncoderPreset::Tiny => (0..cfg.levels)
            .map(|i| EncoderStage::Plain {
                pool: i > 0,
                block: ConvBlock::new(store, rng, &format!("enc{i}"), if i == 0 { 3 } else { ch[i - 1] }, ch[i]),
            })
            .collect(),
        EncoderPreset::EffNetB0Like => {
            // (expand, kernel) of the downsampling block and of the refining block per stage
            let plan = [(1, 3, 3), (6, 3, 3), (6, 5, 5), (6, 3, 5), (6, 5, 3)];
            (0..cfg.levels)
                .map(|i| {
                    let (e, k_down, k_refine) = plan[i];
                    let name = |s: &str| format!("enc{i}.{s}");
                    let (stem, input, stride) = if i == 0 {
                        (Some(Conv2d::simple(store, rng, &name("stem"), 3, ch[0], 3)), ch[0], 1)
                    } else {
                        (None, ch[i - 1], 2)
                    };
                    let mid = if i == 0 { ch[0] } else { (ch[i - 1] + ch[i]) / 2 };
                    let blocks = vec![
                        MbConv::new(store, rng, &name("mb0"), input, mid, e, k_down, stride),
                        MbConv::new(store, rng, &name("mb1"), mid, ch[i], e.max(1), k_refine, 1),
                    ];
                    EncoderStage::Mobile { stem, blocks }
                })
                .collect()
        }
    }
}

/// Builds the network and its parameters. Backbone parameters are drawn
/// before and independently of the fusion modules, so builds that differ
/// only in `tffm.enabled` share identical backbone weights.
pub fn build_backbone(config: &BackboneConfig) -> Result<(Network, ParamStore)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let ch = &config.channels;
    let levels = config.levels;
    let encoder = build_encoder(config, &mut store, &mut rng);
    let mut decoder = Vec::with_capacity(levels);
    let mut gates = Vec::with_capacity(levels);
    for i in 0..levels {
        let mut row = Vec::new();
        let mut row_gates = Vec::new();
        for j in 1..levels - i {
            let in_ch = j * ch[i] + ch[i + 1];
            row.push(ConvBlock::new(&mut store, &mut rng, &format!("dec{i}_{j}"), in_ch, ch[i]));
            let gs = if config.attention_gates {
                (0..j)
                    .map(|m| AttentionGate::new(&mut store, &mut rng, &format!("ag{i}_{j}_{m}"), ch[i], ch[i + 1]))
                    .collect()
            } else {
                Vec::new()
            };
            row_gates.push(gs);
        }
        decoder.push(row);
        gates.push(row_gates);
    }
    let head = Conv2d::simple(&mut store, &mut rng, "head", ch[0], config.classes, 1);
    let mut tffm = Vec::new();
    if config.tffm.enabled {
        let mut trng = ChaCha8Rng::seed_from_u64(config.init_seed ^ 0x7ff3_a5a5_0000_0001);
        for (l, &c) in ch.iter().enumerate() {
            tffm.push(Tffm::new(&mut store, &mut trng, &format!("tffm{l}"), c, config.tffm.level(l))?);
        }
    }
    Ok((
        Network {
            config: config.clone(),
            encoder,
            decoder,
            gates,
            tffm,
            head,
        },
        store,
    ))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Overrides the configured gate mode of every fusion module.
    pub gate: Option<GateMode>,
    /// Skip the fusion modules entirely.
    pub bypass_tffm: bool,
}

impl Network {
    /// Number of fusion hook points (one per level when enabled).
    pub fn hook_points(&self) -> usize {
        self.tffm.len()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("expected B×3×H×W images, got {shape:?}")));
        }
        let d = self.config.size_divisor();
        if shape[2] % d != 0 || shape[3] % d != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!(
                "image size {}×{} is not divisible by {d}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Logits `B×classes×H×W`.
    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<Var> {
        self.forward_with(g, images, ForwardOptions::default())
    }

    pub fn forward_with(&self, g: &mut Graph, images: Var, opts: ForwardOptions) -> Result<Var> {
        self.check_input(g.shape(images))?;
        let levels = self.config.levels;
        let mode = opts.gate.unwrap_or(self.config.tffm.gate);
        let mask = self.config.tffm.mask;
        let use_tffm = !self.tffm.is_empty() && !opts.bypass_tffm;
        let mut x: Vec<Vec<Var>> = vec![Vec::new(); levels];
        let hook = |g: &mut Graph, i: usize, j: usize, v: Var| -> Result<Var> {
            if use_tffm && i + j == levels - 1 {
                self.tffm[i].forward(g, v, mode, mask)
            } else {
                Ok(v)
            }
        };
        let mut cur = images;
        for (i, stage) in self.encoder.iter().enumerate() {
            cur = stage.forward(g, cur)?;
            let v = hook(g, i, 0, cur)?;
            x[i].push(v);
            cur = v;
        }
        for j in 1..levels {
            for i in 0..levels - j {
                let below = x[i + 1][j - 1];
                let (_, _, h, w) = g.value(x[i][0]).dims4()?;
                let mut parts = Vec::with_capacity(j + 1);
                for m in 0..j {
                    let skip = x[i][m];
                    let s = match self.gates[i][j - 1].get(m) {
                        Some(gate) => gate.forward(g, below, skip)?.0,
                        None => skip,
                    };
                    parts.push(s);
                }
                parts.push(g.resize_bilinear(below, h, w)?);
                let cat = g.concat_channels(&parts)?;
                let v = self.decoder[i][j - 1].forward(g, cat)?;
                let v = hook(g, i, j, v)?;
                x[i].push(v);
            }
        }
        let top = *x[0].last().expect("row 0 has a node per column");
        self.head.forward(g, top)
    }

    pub fn param_count(store: &ParamStore) -> usize {
        store.num_scalars()
    }

    pub fn zero_head(&self, store: &mut ParamStore) {
        self.head.zero(store);
    }
}
