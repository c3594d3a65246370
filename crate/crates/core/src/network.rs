//! The triple-stream interaction recognizer.
//!
//! Two mobile-inverted-bottleneck encoders (C1/C2 share the `individual`
//! encoder, I uses the `interaction` encoder) feed the visual stream; a
//! two-convolution stack over the binary pair map feeds the geometric
//! stream; the co-occurrence prior feeds the semantic stream. Per-stream
//! affine heads produce scores in `[0, 1]` which are fused late.
//!
//! Weights are immutable during inference; forward passes build a fresh
//! autodiff graph per call and are safe to run concurrently on shared
//! read-only weights.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3, Array4, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Arr, Graph, ParamBinding, ParamStore, Var, WeightInit};
use crate::proposal::SliceTriple;
use crate::semantic_prior::SemanticPriorTable;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"HERDCKPT";

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub width: usize,
    pub depth: usize,
    pub stride: usize,
    pub expand: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    Coordinate,
}

/// Mobile-inverted-bottleneck encoder shape. `reduction` is the attention
/// bottleneck ratio; the bottleneck width is `max(channels / reduction, 4)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub stem_width: usize,
    pub stages: Vec<StageSpec>,
    pub attention: AttentionKind,
    pub reduction: usize,
    /// Debug switch: clamp both attention gates to 1, making every CA
    /// block the identity map.
    #[serde(default)]
    pub ca_identity_gates: bool,
}

impl EncoderConfig {
    /// Desk-scale preset (~11k encoder parameters), used by tests and CI.
    pub fn tiny() -> Self {
        EncoderConfig {
            input_size: 32,
            stem_width: 8,
            stages: vec![
                StageSpec { width: 16, depth: 1, stride: 2, expand: 2 },
                StageSpec { width: 32, depth: 1, stride: 2, expand: 2 },
                StageSpec { width: 64, depth: 1, stride: 1, expand: 2 },
            ],
            attention: AttentionKind::Coordinate,
            reduction: 32,
            ca_identity_gates: false,
        }
    }

    /// B0-shaped full preset. Available but not exercised by the test
    /// suite (compound-scaling fidelity is a non-goal).
    pub fn full() -> Self {
        EncoderConfig {
            input_size: 100,
            stem_width: 32,
            stages: vec![
                StageSpec { width: 16, depth: 1, stride: 1, expand: 1 },
                StageSpec { width: 24, depth: 2, stride: 2, expand: 6 },
                StageSpec { width: 40, depth: 2, stride: 2, expand: 6 },
                StageSpec { width: 80, depth: 3, stride: 2, expand: 6 },
                StageSpec { width: 112, depth: 3, stride: 1, expand: 6 },
                StageSpec { width: 192, depth: 4, stride: 2, expand: 6 },
                StageSpec { width: 320, depth: 1, stride: 1, expand: 6 },
            ],
            attention: AttentionKind::Coordinate,
            reduction: 32,
            ca_identity_gates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 32 {
            return Err(Error::InvalidArgument(format!(
                "encoder input_size {} below the minimum of 32",
                self.input_size
            )));
        }
        if self.stages.is_empty() || self.stem_width == 0 || self.reduction == 0 {
            return Err(Error::InvalidArgument(
                "encoder needs a stem, at least one stage, and a positive reduction".into(),
            ));
        }
        for s in &self.stages {
            if s.width == 0 || s.depth == 0 || s.stride == 0 || s.expand == 0 {
                return Err(Error::InvalidArgument(format!("bad stage spec {s:?}")));
            }
        }
        Ok(())
    }

    /// Output feature shape `(C, H, W)` implied by the stem and stage
    /// strides at this input size.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let mut side = conv_out(self.input_size, 3, 2, 1);
        for stage in &self.stages {
            side = conv_out(side, 3, stage.stride, 1);
        }
        let c = self.stages.last().expect("validated non-empty").width;
        (c, side, side)
    }
}

fn conv_out(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreActivation {
    /// Logistic activation, keeping scores in `[0, 1]` per-class.
    Sigmoid,
    /// Fidelity switch: raw rectifier score heads.
    Relu,
}

/// Shape and head configuration of the whole recognizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub map_resolution: usize,
    pub geo_widths: (usize, usize),
    pub geo_feature_dim: usize,
    pub num_actions: usize,
    pub num_interactions: usize,
    pub score_activation: ScoreActivation,
}

impl NetworkConfig {
    pub fn tiny(num_actions: usize, num_interactions: usize) -> Self {
        NetworkConfig {
            encoder: EncoderConfig::tiny(),
            map_resolution: 16,
            geo_widths: (8, 16),
            geo_feature_dim: 256,
            num_actions,
            num_interactions,
            score_activation: ScoreActivation::Sigmoid,
        }
    }

    pub fn full(num_actions: usize, num_interactions: usize) -> Self {
        NetworkConfig {
            encoder: EncoderConfig::full(),
            map_resolution: 64,
            geo_widths: (32, 64),
            geo_feature_dim: 256,
            num_actions,
            num_interactions,
            score_activation: ScoreActivation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.map_resolution < 2 {
            return Err(Error::InvalidResolution(self.map_resolution));
        }
        if self.num_actions == 0 || self.num_interactions == 0 {
            return Err(Error::InvalidArgument(
                "class counts must be positive".into(),
            ));
        }
        if self.geo_widths.0 == 0 || self.geo_widths.1 == 0 || self.geo_feature_dim == 0 {
            return Err(Error::InvalidArgument(
                "geometric stream widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// fusion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `(S_v + S_g) (hadamard) S_s`
    Paper,
    /// `S_v + S_g + S_s`
    Sum,
    /// `S_v (hadamard) S_g (hadamard) S_s`
    Product,
}

impl FusionMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(FusionMode::Paper),
            "sum" => Ok(FusionMode::Sum),
            "product" => Ok(FusionMode::Product),
            other => Err(Error::InvalidArgument(format!("unknown fusion mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Paper => "paper",
            FusionMode::Sum => "sum",
            FusionMode::Product => "product",
        }
    }
}

/// Which streams contribute to the fused score; the representation-ablation
/// axis. Excluded additive streams contribute 0, an excluded semantic
/// stream contributes a neutral factor of 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSet {
    pub visual: bool,
    pub geometric: bool,
    pub semantic: bool,
}

impl StreamSet {
    pub const ALL: StreamSet = StreamSet {
        visual: true,
        geometric: true,
        semantic: true,
    };

    pub fn parse(name: &str) -> Result<Self> {
        let set = match name {
            "all" | "vgs" => StreamSet::ALL,
            "v" => StreamSet { visual: true, geometric: false, semantic: false },
            "g" => StreamSet { visual: false, geometric: true, semantic: false },
            "s" => StreamSet { visual: false, geometric: false, semantic: true },
            "vg" => StreamSet { visual: true, geometric: true, semantic: false },
            "vs" => StreamSet { visual: true, geometric: false, semantic: true },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown stream variant {other:?} (expected one of s, g, v, vg, vs, all)"
                )))
            }
        };
        Ok(set)
    }

    pub fn name(&self) -> &'static str {
        match (self.visual, self.geometric, self.semantic) {
            (true, true, true) => "all",
            (true, false, false) => "v",
            (false, true, false) => "g",
            (false, false, true) => "s",
            (true, true, false) => "vg",
            (true, false, true) => "vs",
            _ => "custom",
        }
    }

    /// Upper bound of a fused entry given per-stream scores in `[0, 1]`;
    /// used to rescale fused scores into `[0, 1]` before the loss.
    pub fn max_fused_score(&self, mode: FusionMode) -> f64 {
        let included = [self.visual, self.geometric, self.semantic]
            .iter()
            .filter(|&&b| b)
            .count()
            .max(1);
        match mode {
            FusionMode::Sum => included as f64,
            FusionMode::Product => 1.0,
            FusionMode::Paper => {
                let additive = [self.visual, self.geometric].iter().filter(|&&b| b).count();
                additive.max(1) as f64
            }
        }
    }
}

// ---------------------------------------------------------------------------
// bundles
// ---------------------------------------------------------------------------

/// Triple-stream features for one proposal.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub f_c1: Array3<f64>,
    pub f_c2: Array3<f64>,
    pub f_i: Array3<f64>,
    pub f_v: Array3<f64>,
    pub f_g: Array1<f64>,
    pub f_s: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ScoreBundle {
    pub s_s: Array1<f64>,
    pub s_g: Array1<f64>,
    pub s_v: Array1<f64>,
    pub s_fused: Array1<f64>,
    pub fusion_mode: FusionMode,
}

#[derive(Debug, Clone)]
pub struct ActionPrediction {
    pub dist_a: Array1<f64>,
    pub dist_b: Array1<f64>,
    pub a1: usize,
    pub a2: usize,
}

/// All learnable parameters plus the configuration they were shaped by.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub config: NetworkConfig,
    pub store: ParamStore,
}

pub const ENC_INDIVIDUAL: &str = "enc_ind.";
pub const ENC_INTERACTION: &str = "enc_int.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderRole {
    Individual,
    Interaction,
}

impl EncoderRole {
    fn prefix(self) -> &'static str {
        match self {
            EncoderRole::Individual => ENC_INDIVIDUAL,
            EncoderRole::Interaction => ENC_INTERACTION,
        }
    }
}

impl NetworkWeights {
    /// Deterministic seeded initialization; parameters are created in a
    /// fixed order so a seed fully determines the weights.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        build_encoder_params(&mut store, ENC_INDIVIDUAL, &config.encoder, &mut rng);
        build_encoder_params(&mut store, ENC_INTERACTION, &config.encoder, &mut rng);

        let (c, _, _) = config.encoder.feature_shape();
        let (g1, g2) = config.geo_widths;
        let n = config.num_interactions;
        let fg = config.geo_feature_dim;
        conv_param(&mut store, "geo.conv1", g1, 2, 3, &mut rng);
        conv_param(&mut store, "geo.conv2", g2, g1, 3, &mut rng);
        linear_param(&mut store, "geo.fc", fg, g2, &mut rng);
        linear_param(&mut store, "head_action", config.num_actions, c, &mut rng);
        linear_param(&mut store, "head_s", n, n, &mut rng);
        linear_param(&mut store, "head_g", n, fg, &mut rng);
        linear_param(&mut store, "head_v", n, 3 * c, &mut rng);
        Ok(NetworkWeights { config, store })
    }

    /// Names of the two visual encoders' parameters (the set frozen in
    /// linear-probe transfer).
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.store
            .names()
            .filter(|n| n.starts_with(ENC_INDIVIDUAL) || n.starts_with(ENC_INTERACTION))
            .map(str::to_string)
            .collect()
    }
}

pub(crate) fn build_encoder_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) {
    conv_param(store, &format!("{prefix}stem"), cfg.stem_width, 3, 3, rng);
    let mut c_in = cfg.stem_width;
    for (si, stage) in cfg.stages.iter().enumerate() {
        for bi in 0..stage.depth {
            let block = format!("{prefix}s{si}.b{bi}.");
            let expanded = c_in * stage.expand;
            if stage.expand > 1 {
                conv_param(store, &format!("{block}expand"), expanded, c_in, 1, rng);
            }
            dw_param(store, &format!("{block}dw"), expanded, 3, rng);
            if cfg.attention == AttentionKind::Coordinate {
                let mid = ca_mid_width(expanded, cfg.reduction);
                conv_param(store, &format!("{block}ca.squeeze"), mid, expanded, 1, rng);
                conv_param(store, &format!("{block}ca.gh"), expanded, mid, 1, rng);
                conv_param(store, &format!("{block}ca.gw"), expanded, mid, 1, rng);
            }
            conv_param(store, &format!("{block}project"), stage.width, expanded, 1, rng);
            c_in = stage.width;
        }
    }
}

fn ca_mid_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(4)
}

fn conv_param(store: &mut ParamStore, name: &str, out: usize, inc: usize, k: usize, rng: &mut ChaCha8Rng) {
    let w = WeightInit::HeUniform { fan_in: inc * k * k }.sample(rng, &[out, inc, k, k]);
    store.insert(format!("{name}.w"), w);
    store.insert(format!("{name}.b"), Arr::zeros(IxDyn(&[out])));
}

fn dw_param(store: &mut ParamStore, name: &str, channels: usize, k: usize, rng: &mut ChaCha8Rng) {
    let w = WeightInit::HeUniform { fan_in: k * k }.sample(rng, &[channels, k, k]);
    store.insert(format!("{name}.w"), w);
    store.insert(format!("{name}.b"), Arr::zeros(IxDyn(&[channels])));
}

fn linear_param(store: &mut ParamStore, name: &str, out: usize, inc: usize, rng: &mut ChaCha8Rng) {
    let w = WeightInit::GlorotUniform { fan_in: inc, fan_out: out }.sample(rng, &[out, inc]);
    store.insert(format!("{name}.w"), w);
    store.insert(format!("{name}.b"), Arr::zeros(IxDyn(&[out])));
}

// ---------------------------------------------------------------------------
// graph builders
// ---------------------------------------------------------------------------

/// Resolves parameter names to graph nodes: gradient-tracked leaves during
/// training, cached constants during inference.
pub trait ParamResolver {
    fn resolve(&mut self, g: &mut Graph, name: &str) -> Var;
}

impl ParamResolver for &ParamBinding {
    fn resolve(&mut self, _g: &mut Graph, name: &str) -> Var {
        self.var(name)
    }
}

/// Inference-time resolver: parameters enter the graph as constants.
pub struct ConstParams<'a> {
    store: &'a ParamStore,
    cache: HashMap<String, Var>,
}

impl<'a> ConstParams<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        ConstParams {
            store,
            cache: HashMap::new(),
        }
    }
}

impl ParamResolver for ConstParams<'_> {
    fn resolve(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.cache.get(name) {
            return *v;
        }
        let v = g.constant(self.store.get(name).clone());
        self.cache.insert(name.to_string(), v);
        v
    }
}

fn conv_block<P: ParamResolver>(
    g: &mut Graph,
    p: &mut P,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let w = p.resolve(g, &format!("{name}.w"));
    let b = p.resolve(g, &format!("{name}.b"));
    g.conv2d(x, w, b, stride, pad)
}

fn linear_block<P: ParamResolver>(g: &mut Graph, p: &mut P, name: &str, x: Var) -> Var {
    let w = p.resolve(g, &format!("{name}.w"));
    let b = p.resolve(g, &format!("{name}.b"));
    g.linear(x, w, b)
}

/// Coordinate attention: pool along each spatial axis, mix channels
/// through a shared bottleneck, and re-weight with two position-aware
/// logistic gates. With `identity_gates` the input passes through
/// untouched.
pub(crate) fn ca_graph<P: ParamResolver>(
    g: &mut Graph,
    p: &mut P,
    name: &str,
    x: Var,
    identity_gates: bool,
) -> Var {
    if identity_gates {
        return x;
    }
    let shape = g.data(x).shape().to_vec(); // (N, C, H, W)
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let pooled_h = g.mean_axis(x, 3, false); // (N, C, H)
    let pooled_w = g.mean_axis(x, 2, false); // (N, C, W)
    let cat = g.concat(&[pooled_h, pooled_w], 2); // (N, C, H+W)
    let cat4 = g.reshape(cat, &[n, c, h + w, 1]);
    let squeezed = conv_block(g, p, &format!("{name}.squeeze"), cat4, 1, 0);
    let squeezed = g.silu(squeezed);
    let part_h = g.slice_axis(squeezed, 2, 0, h);
    let part_w = g.slice_axis(squeezed, 2, h, w);
    let gate_h = conv_block(g, p, &format!("{name}.gh"), part_h, 1, 0); // (N, C, H, 1)
    let gate_h = g.sigmoid(gate_h);
    let gate_w = conv_block(g, p, &format!("{name}.gw"), part_w, 1, 0); // (N, C, W, 1)
    let gate_w = g.sigmoid(gate_w);
    let gate_w = g.reshape(gate_w, &[n, c, 1, w]);
    let gated = g.mul(x, gate_h);
    g.mul(gated, gate_w)
}

/// One mobile inverted bottleneck block: pointwise expand, depthwise
/// convolution, attention, pointwise project, with a residual skip when
/// shape-preserving.
fn mbconv_block<P: ParamResolver>(
    g: &mut Graph,
    p: &mut P,
    name: &str,
    x: Var,
    c_in: usize,
    stage: &StageSpec,
    stride: usize,
    cfg: &EncoderConfig,
) -> Var {
    let mut h = x;
    if stage.expand > 1 {
        h = conv_block(g, p, &format!("{name}expand"), h, 1, 0);
        h = g.silu(h);
    }
    let dw_w = p.resolve(g, &format!("{name}dw.w"));
    let dw_b = p.resolve(g, &format!("{name}dw.b"));
    h = g.depthwise_conv2d(h, dw_w, dw_b, stride, 1);
    h = g.silu(h);
    if cfg.attention == AttentionKind::Coordinate {
        h = ca_graph(g, p, &format!("{name}ca"), h, cfg.ca_identity_gates);
    }
    h = conv_block(g, p, &format!("{name}project"), h, 1, 0);
    if stride == 1 && c_in == stage.width {
        h = g.add(h, x);
    }
    h
}

/// Full encoder: stem plus staged MBConv blocks. Input `(N, 3, S, S)`,
/// output `(N, C, H, W)` per [`EncoderConfig::feature_shape`].
pub(crate) fn encoder_graph<P: ParamResolver>(
    g: &mut Graph,
    p: &mut P,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
) -> Var {
    let stem = conv_block(g, p, &format!("{prefix}stem"), x, 2, 1);
    let mut h = g.silu(stem);
    let mut c_in = cfg.stem_width;
    for (si, stage) in cfg.stages.iter().enumerate() {
        for bi in 0..stage.depth {
            let stride = if bi == 0 { stage.stride } else { 1 };
            let name = format!("{prefix}s{si}.b{bi}.");
            h = mbconv_block(g, p, &name, h, c_in, stage, stride, cfg);
            c_in = stage.width;
        }
    }
    h
}

/// Geometric stream: two strided convolutions, global pooling, and a
/// projection to the configured feature width.
pub(crate) fn geometric_graph<P: ParamResolver>(g: &mut Graph, p: &mut P, maps: Var) -> Var {
    let c1 = conv_block(g, p, "geo.conv1", maps, 2, 1);
    let c1 = g.silu(c1);
    let c2 = conv_block(g, p, "geo.conv2", c1, 2, 1);
    let c2 = g.silu(c2);
    let pooled = g.global_avg_pool(c2);
    linear_block(g, p, "geo.fc", pooled)
}

fn score_head<P: ParamResolver>(
    g: &mut Graph,
    p: &mut P,
    name: &str,
    feature: Var,
    activation: ScoreActivation,
) -> Var {
    let logits = linear_block(g, p, name, feature);
    match activation {
        ScoreActivation::Sigmoid => g.sigmoid(logits),
        ScoreActivation::Relu => g.relu(logits),
    }
}

/// Fuses per-stream score vars under a mode and stream subset.
pub(crate) fn fuse_graph(
    g: &mut Graph,
    s_v: Var,
    s_g: Var,
    s_s: Var,
    mode: FusionMode,
    streams: StreamSet,
) -> Var {
    let shape = g.data(s_v).shape().to_vec();
    match mode {
        FusionMode::Sum => {
            let mut acc: Option<Var> = None;
            for (included, var) in [
                (streams.visual, s_v),
                (streams.geometric, s_g),
                (streams.semantic, s_s),
            ] {
                if included {
                    acc = Some(match acc {
                        Some(a) => g.add(a, var),
                        None => var,
                    });
                }
            }
            acc.unwrap_or_else(|| g.constant(Arr::zeros(IxDyn(&shape))))
        }
        FusionMode::Product => {
            let mut acc: Option<Var> = None;
            for (included, var) in [
                (streams.visual, s_v),
                (streams.geometric, s_g),
                (streams.semantic, s_s),
            ] {
                if included {
                    acc = Some(match acc {
                        Some(a) => g.mul(a, var),
                        None => var,
                    });
                }
            }
            acc.unwrap_or_else(|| g.constant(Arr::ones(IxDyn(&shape))))
        }
        FusionMode::Paper => {
            let additive = match (streams.visual, streams.geometric) {
                (true, true) => Some(g.add(s_v, s_g)),
                (true, false) => Some(s_v),
                (false, true) => Some(s_g),
                (false, false) => None,
            };
            match (additive, streams.semantic) {
                (Some(a), true) => g.mul(a, s_s),
                (Some(a), false) => a,
                (None, true) => s_s,
                (None, false) => g.constant(Arr::ones(IxDyn(&shape))),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// batched forward
// ---------------------------------------------------------------------------

/// Stacked inputs for a batch of proposals.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub c1: Array4<f64>,
    pub c2: Array4<f64>,
    pub i: Array4<f64>,
    pub maps: Array4<f64>,
}

impl BatchInputs {
    pub fn from_slices(slices: &[&SliceTriple]) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let s = slices[0].input_size();
        let r = slices[0].geometric.resolution();
        let n = slices.len();
        let mut c1 = Array4::zeros((n, 3, s, s));
        let mut c2 = Array4::zeros((n, 3, s, s));
        let mut i = Array4::zeros((n, 3, s, s));
        let mut maps = Array4::zeros((n, 2, r, r));
        for (idx, t) in slices.iter().enumerate() {
            if t.input_size() != s || t.geometric.resolution() != r {
                return Err(Error::ShapeMismatch {
                    expected: format!("slices {s}x{s}, maps {r}x{r}"),
                    got: format!(
                        "slices {0}x{0}, maps {1}x{1}",
                        t.input_size(),
                        t.geometric.resolution()
                    ),
                });
            }
            c1.index_axis_mut(Axis(0), idx).assign(&t.c1);
            c2.index_axis_mut(Axis(0), idx).assign(&t.c2);
            i.index_axis_mut(Axis(0), idx).assign(&t.i);
            maps.index_axis_mut(Axis(0), idx).assign(t.geometric.data());
        }
        Ok(BatchInputs { c1, c2, i, maps })
    }

    pub fn len(&self) -> usize {
        self.c1.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where the semantic stream's action labels come from.
#[derive(Debug, Clone, Copy)]
pub enum SemanticSource<'a> {
    /// Argmax of the visual stream's individual-action predictions.
    Predicted,
    /// Teacher forcing: ground-truth action index pairs, one per sample.
    Forced(&'a [(usize, usize)]),
}

/// Graph handles produced by one batched forward pass.
pub struct ForwardVars {
    pub f_c1: Var,
    pub f_c2: Var,
    pub f_i: Var,
    pub f_v: Var,
    pub f_g: Var,
    pub f_s: Var,
    pub logits_a: Var,
    pub logits_b: Var,
    pub dist_a: Var,
    pub dist_b: Var,
    pub s_s: Var,
    pub s_g: Var,
    pub s_v: Var,
    pub s_fused: Var,
}

/// Options governing a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub fusion: FusionMode,
    pub streams: StreamSet,
    pub semantic: SemanticSource<'a>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions {
            fusion: FusionMode::Paper,
            streams: StreamSet::ALL,
            semantic: SemanticSource::Predicted,
        }
    }
}

/// Runs the full triple-stream network over a batch inside graph `g`.
/// `input_as_leaf` marks the I slice as a gradient target (used by the
/// class-activation visualizer).
pub fn forward_batch_graph<P: ParamResolver>(
    g: &mut Graph,
    p: &mut P,
    cfg: &NetworkConfig,
    prior: &SemanticPriorTable,
    inputs: &BatchInputs,
    opts: &ForwardOptions,
    input_as_leaf: bool,
) -> Result<ForwardVars> {
    let n = inputs.len();
    let s = cfg.encoder.input_size;
    if inputs.c1.shape() != [n, 3, s, s] || inputs.maps.shape()[1] != 2
        || inputs.maps.shape()[2] != cfg.map_resolution
    {
        return Err(Error::ShapeMismatch {
            expected: format!("(N, 3, {s}, {s}) slices and (N, 2, {0}, {0}) maps", cfg.map_resolution),
            got: format!("{:?} / {:?}", inputs.c1.shape(), inputs.maps.shape()),
        });
    }
    if prior.catalog().num_interactions() != cfg.num_interactions
        || prior.catalog().num_actions() != cfg.num_actions
    {
        return Err(Error::CatalogMismatch(format!(
            "network expects {} actions / {} interactions, prior has {} / {}",
            cfg.num_actions,
            cfg.num_interactions,
            prior.catalog().num_actions(),
            prior.catalog().num_interactions()
        )));
    }

    let c1 = g.constant(inputs.c1.clone().into_dyn());
    let c2 = g.constant(inputs.c2.clone().into_dyn());
    let i = if input_as_leaf {
        g.leaf(inputs.i.clone().into_dyn())
    } else {
        g.constant(inputs.i.clone().into_dyn())
    };
    let maps = g.constant(inputs.maps.clone().into_dyn());

    let f_c1 = encoder_graph(g, p, ENC_INDIVIDUAL, &cfg.encoder, c1);
    let f_c2 = encoder_graph(g, p, ENC_INDIVIDUAL, &cfg.encoder, c2);
    let f_i = encoder_graph(g, p, ENC_INTERACTION, &cfg.encoder, i);

    let pooled_a = g.global_avg_pool(f_c1);
    let pooled_b = g.global_avg_pool(f_c2);
    let logits_a = linear_block(g, p, "head_action", pooled_a);
    let logits_b = linear_block(g, p, "head_action", pooled_b);
    let dist_a = g.softmax(logits_a, 1);
    let dist_b = g.softmax(logits_b, 1);

    // Semantic feature rows come from the (non-differentiable) prior
    // lookup, indexed by predicted or forced action labels.
    let mut f_s_data = Array2::zeros((n, cfg.num_interactions));
    match opts.semantic {
        SemanticSource::Predicted => {
            let da = g.data(dist_a).clone();
            let db = g.data(dist_b).clone();
            for row in 0..n {
                let a1 = argmax(da.index_axis(Axis(0), row).iter().copied());
                let a2 = argmax(db.index_axis(Axis(0), row).iter().copied());
                let lk = prior.lookup_indices(a1, a2);
                for (k, &v) in lk.probs.iter().enumerate() {
                    f_s_data[[row, k]] = v;
                }
            }
        }
        SemanticSource::Forced(pairs) => {
            if pairs.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{} forced action pairs for a batch of {n}",
                    pairs.len()
                )));
            }
            for (row, &(a1, a2)) in pairs.iter().enumerate() {
                let lk = prior.lookup_indices(a1, a2);
                for (k, &v) in lk.probs.iter().enumerate() {
                    f_s_data[[row, k]] = v;
                }
            }
        }
    }
    let f_s = g.constant(f_s_data.into_dyn());

    let f_v = g.concat(&[f_c1, f_c2, f_i], 1);
    let f_g = geometric_graph(g, p, maps);

    let s_s = score_head(g, p, "head_s", f_s, cfg.score_activation);
    let s_g = score_head(g, p, "head_g", f_g, cfg.score_activation);
    let pooled_v = g.global_avg_pool(f_v);
    let s_v = score_head(g, p, "head_v", pooled_v, cfg.score_activation);
    let s_fused = fuse_graph(g, s_v, s_g, s_s, opts.fusion, opts.streams);

    Ok(ForwardVars {
        f_c1,
        f_c2,
        f_i,
        f_v,
        f_g,
        f_s,
        logits_a,
        logits_b,
        dist_a,
        dist_b,
        s_s,
        s_g,
        s_v,
        s_fused,
    })
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// single-sample inference API
// ---------------------------------------------------------------------------

/// Output of one full forward pass over a proposal.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub scores: ScoreBundle,
    pub actions: ActionPrediction,
    pub features: FeatureBundle,
}

/// Runs one encoder on a single normalized image.
pub fn encode_visual(
    image: &Array3<f64>,
    which: EncoderRole,
    w: &NetworkWeights,
) -> Result<Array3<f64>> {
    let s = w.config.encoder.input_size;
    if image.shape() != [3, s, s] {
        return Err(Error::ShapeMismatch {
            expected: format!("3 x {s} x {s}"),
            got: format!("{:?}", image.shape()),
        });
    }
    let mut g = Graph::new();
    let mut p = ConstParams::new(&w.store);
    let x = g.constant(image.clone().insert_axis(Axis(0)).into_dyn());
    let f = encoder_graph(&mut g, &mut p, which.prefix(), &w.config.encoder, x);
    Ok(extract_3d(g.data(f), 0))
}

/// Applies one coordinate-attention block with explicit parameters.
pub struct CaParams {
    pub store: ParamStore,
    pub identity_gates: bool,
}

impl CaParams {
    pub fn init(channels: usize, reduction: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mid = ca_mid_width(channels, reduction);
        conv_param(&mut store, "ca.squeeze", mid, channels, 1, &mut rng);
        conv_param(&mut store, "ca.gh", channels, mid, 1, &mut rng);
        conv_param(&mut store, "ca.gw", channels, mid, 1, &mut rng);
        CaParams {
            store,
            identity_gates: false,
        }
    }
}

pub fn coordinate_attention(x: &Array3<f64>, params: &CaParams) -> Result<Array3<f64>> {
    let mut g = Graph::new();
    let mut p = ConstParams::new(&params.store);
    let xv = g.constant(x.clone().insert_axis(Axis(0)).into_dyn());
    let out = ca_graph(&mut g, &mut p, "ca", xv, params.identity_gates);
    Ok(extract_3d(g.data(out), 0))
}

/// Runs the geometric stream on one pair map.
pub fn geometric_stream(
    map: &crate::geometry::GeometricMap,
    w: &NetworkWeights,
) -> Result<Array1<f64>> {
    if map.resolution() != w.config.map_resolution {
        return Err(Error::ShapeMismatch {
            expected: format!("map resolution {}", w.config.map_resolution),
            got: format!("{}", map.resolution()),
        });
    }
    let mut g = Graph::new();
    let mut p = ConstParams::new(&w.store);
    let xv = g.constant(map.data().clone().insert_axis(Axis(0)).into_dyn());
    let out = geometric_graph(&mut g, &mut p, xv);
    Ok(extract_1d(g.data(out), 0))
}

/// Individual-action distribution from one individual-encoder feature map.
pub fn predict_individual(f_c: &Array3<f64>, w: &NetworkWeights) -> Result<Array1<f64>> {
    let (c, h, wd) = w.config.encoder.feature_shape();
    if f_c.shape() != [c, h, wd] {
        return Err(Error::ShapeMismatch {
            expected: format!("{c} x {h} x {wd}"),
            got: format!("{:?}", f_c.shape()),
        });
    }
    let mut g = Graph::new();
    let mut p = ConstParams::new(&w.store);
    let xv = g.constant(f_c.clone().insert_axis(Axis(0)).into_dyn());
    let pooled = g.global_avg_pool(xv);
    let logits = linear_block(&mut g, &mut p, "head_action", pooled);
    let dist = g.softmax(logits, 1);
    Ok(extract_1d(g.data(dist), 0))
}

/// Per-stream scores for a complete feature bundle, fused under `mode`.
pub fn stream_scores(
    bundle: &FeatureBundle,
    w: &NetworkWeights,
    mode: FusionMode,
) -> Result<ScoreBundle> {
    let mut g = Graph::new();
    let mut p = ConstParams::new(&w.store);
    let f_s = g.constant(bundle.f_s.clone().insert_axis(Axis(0)).into_dyn());
    let f_g = g.constant(bundle.f_g.clone().insert_axis(Axis(0)).into_dyn());
    let f_v = g.constant(bundle.f_v.clone().insert_axis(Axis(0)).into_dyn());
    let act = w.config.score_activation;
    let s_s = score_head(&mut g, &mut p, "head_s", f_s, act);
    let s_g = score_head(&mut g, &mut p, "head_g", f_g, act);
    let pooled_v = g.global_avg_pool(f_v);
    let s_v = score_head(&mut g, &mut p, "head_v", pooled_v, act);
    let s_s = extract_1d(g.data(s_s), 0);
    let s_g = extract_1d(g.data(s_g), 0);
    let s_v = extract_1d(g.data(s_v), 0);
    let s_fused = fuse_score_vectors(&s_v, &s_g, &s_s, mode, StreamSet::ALL);
    Ok(ScoreBundle {
        s_s,
        s_g,
        s_v,
        s_fused,
        fusion_mode: mode,
    })
}

/// Late fusion over already-computed per-stream scores.
pub fn fuse_scores(bundle: &ScoreBundle, mode: FusionMode) -> Array1<f64> {
    fuse_score_vectors(&bundle.s_v, &bundle.s_g, &bundle.s_s, mode, StreamSet::ALL)
}

pub fn fuse_score_vectors(
    s_v: &Array1<f64>,
    s_g: &Array1<f64>,
    s_s: &Array1<f64>,
    mode: FusionMode,
    streams: StreamSet,
) -> Array1<f64> {
    let n = s_v.len();
    match mode {
        FusionMode::Sum => {
            let mut out = Array1::zeros(n);
            if streams.visual {
                out += s_v;
            }
            if streams.geometric {
                out += s_g;
            }
            if streams.semantic {
                out += s_s;
            }
            out
        }
        FusionMode::Product => {
            let mut out = Array1::ones(n);
            if streams.visual {
                out *= s_v;
            }
            if streams.geometric {
                out *= s_g;
            }
            if streams.semantic {
                out *= s_s;
            }
            out
        }
        FusionMode::Paper => {
            let mut additive = Array1::zeros(n);
            let mut any = false;
            if streams.visual {
                additive += s_v;
                any = true;
            }
            if streams.geometric {
                additive += s_g;
                any = true;
            }
            if !any {
                additive.fill(1.0);
            }
            if streams.semantic {
                additive *= s_s;
            }
            additive
        }
    }
}

/// Full single-proposal forward pass in eval mode.
pub fn forward(
    slices: &SliceTriple,
    prior: &SemanticPriorTable,
    w: &NetworkWeights,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let inputs = BatchInputs::from_slices(&[slices])?;
    let mut g = Graph::new();
    let mut p = ConstParams::new(&w.store);
    let vars = forward_batch_graph(&mut g, &mut p, &w.config, prior, &inputs, opts, false)?;
    let dist_a = extract_1d(g.data(vars.dist_a), 0);
    let dist_b = extract_1d(g.data(vars.dist_b), 0);
    let actions = ActionPrediction {
        a1: argmax(dist_a.iter().copied()),
        a2: argmax(dist_b.iter().copied()),
        dist_a,
        dist_b,
    };
    let scores = ScoreBundle {
        s_s: extract_1d(g.data(vars.s_s), 0),
        s_g: extract_1d(g.data(vars.s_g), 0),
        s_v: extract_1d(g.data(vars.s_v), 0),
        s_fused: extract_1d(g.data(vars.s_fused), 0),
        fusion_mode: opts.fusion,
    };
    let features = FeatureBundle {
        f_c1: extract_3d(g.data(vars.f_c1), 0),
        f_c2: extract_3d(g.data(vars.f_c2), 0),
        f_i: extract_3d(g.data(vars.f_i), 0),
        f_v: extract_3d(g.data(vars.f_v), 0),
        f_g: extract_1d(g.data(vars.f_g), 0),
        f_s: extract_1d(g.data(vars.f_s), 0),
    };
    Ok(ForwardOutput {
        scores,
        actions,
        features,
    })
}

fn extract_1d(data: &Arr, row: usize) -> Array1<f64> {
    data.index_axis(Axis(0), row)
        .to_owned()
        .into_dimensionality()
        .expect("1-D row")
}

fn extract_3d(data: &Arr, row: usize) -> Array3<f64> {
    data.index_axis(Axis(0), row)
        .to_owned()
        .into_dimensionality()
        .expect("3-D row")
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

/// Encoder-only checkpoint produced by pretraining (projection head
/// discarded); parameter names carry the neutral `encoder.` prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCheckpoint {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

fn write_checkpoint(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    let display = path.display().to_string();
    let tensors: Vec<TensorMeta> = store
        .iter()
        .map(|(name, arr)| TensorMeta {
            name: name.to_string(),
            shape: arr.shape().to_vec(),
        })
        .collect();
    let header = serde_json::to_vec(&CheckpointHeader {
        kind: kind.to_string(),
        config,
        tensors,
    })
    .map_err(|e| Error::corrupt(&display, e.to_string()))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_FORMAT_VERSION)?;
    out.write_u64::<LittleEndian>(header.len() as u64)?;
    out.write_all(&header)?;
    for (_, arr) in store.iter() {
        for &v in arr.iter() {
            out.write_u64::<LittleEndian>(v.to_bits())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_checkpoint(path: &Path, expect_kind: &str) -> Result<(serde_json::Value, ParamStore)> {
    let display = path.display().to_string();
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::corrupt(&display, "not a weight checkpoint"));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let header_len = input.read_u64::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::corrupt(&display, e.to_string()))?;
    if header.kind != expect_kind {
        return Err(Error::corrupt(
            &display,
            format!("checkpoint kind {:?}, expected {expect_kind:?}", header.kind),
        ));
    }
    let mut store = ParamStore::new();
    for meta in &header.tensors {
        let len: usize = meta.shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(f64::from_bits(input.read_u64::<LittleEndian>()?));
        }
        let arr = Arr::from_shape_vec(IxDyn(&meta.shape), values)
            .map_err(|e| Error::corrupt(&display, e.to_string()))?;
        store.insert(meta.name.clone(), arr);
    }
    Ok((header.config, store))
}

pub fn save_network(weights: &NetworkWeights, path: impl AsRef<Path>) -> Result<()> {
    let config = serde_json::to_value(&weights.config)
        .map_err(|e| Error::corrupt(path.as_ref().display().to_string(), e.to_string()))?;
    write_checkpoint(path.as_ref(), "network", config, &weights.store)
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkWeights> {
    let (config, store) = read_checkpoint(path.as_ref(), "network")?;
    let config: NetworkConfig = serde_json::from_value(config)
        .map_err(|e| Error::corrupt(path.as_ref().display().to_string(), e.to_string()))?;
    config.validate()?;
    Ok(NetworkWeights { config, store })
}

pub fn save_encoder(ck: &EncoderCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let config = serde_json::to_value(&ck.config)
        .map_err(|e| Error::corrupt(path.as_ref().display().to_string(), e.to_string()))?;
    write_checkpoint(path.as_ref(), "encoder", config, &ck.params)
}

pub fn load_encoder(path: impl AsRef<Path>) -> Result<EncoderCheckpoint> {
    let (config, params) = read_checkpoint(path.as_ref(), "encoder")?;
    let config: EncoderConfig = serde_json::from_value(config)
        .map_err(|e| Error::corrupt(path.as_ref().display().to_string(), e.to_string()))?;
    config.validate()?;
    Ok(EncoderCheckpoint { config, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rasterize_pair_map, BoundingBox};
    use crate::semantic_prior::{fit_prior, ClassCatalog};
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_weights(seed: u64) -> NetworkWeights {
        NetworkWeights::init(NetworkConfig::tiny(4, 3), seed).unwrap()
    }

    fn random_image(rng: &mut impl Rng, size: usize) -> Array3<f64> {
        Array3::from_shape_fn((3, size, size), |_| rng.gen_range(0.0..1.0))
    }

    fn uniform_prior() -> crate::semantic_prior::SemanticPriorTable {
        fit_prior::<&str, &str, &str>(&ClassCatalog::default(), &[], 1.0).unwrap()
    }

    fn random_slices(rng: &mut impl Rng, cfg: &NetworkConfig) -> SliceTriple {
        let s = cfg.encoder.input_size;
        let b1 = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b2 = BoundingBox::new(4.0, 0.0, 14.0, 10.0).unwrap();
        SliceTriple {
            c1: random_image(rng, s),
            c2: random_image(rng, s),
            i: random_image(rng, s),
            geometric: rasterize_pair_map(&b1, &b2, cfg.map_resolution).unwrap(),
        }
    }

    #[test]
    fn tiny_feature_shape_is_64x4x4() {
        let cfg = EncoderConfig::tiny();
        assert_eq!(cfg.feature_shape(), (64, 4, 4));
        let mut at100 = cfg.clone();
        at100.input_size = 100;
        // 100 -> 50 -> 25 -> 13 -> 13
        assert_eq!(at100.feature_shape(), (64, 13, 13));
    }

    #[test]
    fn encoder_output_matches_declared_shape_and_is_deterministic() {
        let w = tiny_weights(11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_image(&mut rng, 32);
        let f1 = encode_visual(&img, EncoderRole::Individual, &w).unwrap();
        let f2 = encode_visual(&img, EncoderRole::Individual, &w).unwrap();
        let (c, h, wd) = w.config.encoder.feature_shape();
        assert_eq!(f1.shape(), &[c, h, wd]);
        assert_eq!(f1, f2);
        // interaction encoder has different weights
        let fi = encode_visual(&img, EncoderRole::Interaction, &w).unwrap();
        assert_ne!(f1, fi);
        // wrong input size is rejeted by the shape contract
        let bad = random_image(&mut rng, 16);
        assert!(encode_visual(&bad, EncoderRole::Individual, &w).is_err());
    }

    #[test]
    fn batch_forward_is_permutation_equivariant() {
        let w = tiny_weights(3);
        let prior = uniform_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s1 = random_slices(&mut rng, &w.config);
        let s2 = random_slices(&mut rng, &w.config);
        let opts = ForwardOptions::default();
        let run = |a: &SliceTriple, b: &SliceTriple| {
            let inputs = BatchInputs::from_slices(&[a, b]).unwrap();
            let mut g = Graph::new();
            let mut p = ConstParams::new(&w.store);
            let vars =
                forward_batch_graph(&mut g, &mut p, &w.config, &prior, &inputs, &opts, false)
                    .unwrap();
            g.data(vars.s_fused).clone()
        };
        let fwd = run(&s1, &s2);
        let rev = run(&s2, &s1);
        let fwd0 = fwd.index_axis(Axis(0), 0);
        let rev1 = rev.index_axis(Axis(0), 1);
        assert!(fwd0.iter().zip(rev1.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn coordinate_attention_shapes_gates_and_identity_switch() {
        let mut params = CaParams::init(8, 32, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array3::from_shape_fn((8, 5, 6), |_| rng.gen_range(-1.0..1.0));
        let out = coordinate_attention(&x, &params).unwrap();
        assert_eq!(out.shape(), x.shape());
        // logistic gates shrink magnitudes and never flip signs
        assert!(out
            .iter()
            .zip(x.iter())
            .all(|(o, v)| o.abs() <= v.abs() + 1e-12 && o * v >= 0.0));
        // generally not the identity
        assert!(out.iter().zip(x.iter()).any(|(o, v)| (o - v).abs() > 1e-6));
        // zero input stays zero under multiplicative gating
        let zeros = Array3::zeros((8, 5, 6));
        let out0 = coordinate_attention(&zeros, &params).unwrap();
        assert!(out0.iter().all(|&v| v == 0.0));
        // debug switch turns the block into the identity
        params.identity_gates = true;
        let ident = coordinate_attention(&x, &params).unwrap();
        assert_eq!(ident, x);
    }

    #[test]
    fn geometric_stream_outputs_256_and_constant_inputs_collapse() {
        let w = tiny_weights(9);
        let b1 = BoundingBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        let b2 = BoundingBox::new(3.0, 0.0, 11.0, 8.0).unwrap();
        let map = rasterize_pair_map(&b1, &b2, w.config.map_resolution).unwrap();
        let f = geometric_stream(&map, &w).unwrap();
        assert_eq!(f.len(), 256);

        // all-zero maps give the bias-only response regardless of pair id
        let zero_map = {
            let empty = Array3::zeros((2, w.config.map_resolution, w.config.map_resolution));
            crate::geometry::GeometricMap::from_raw_for_tests(empty)
        };
        let f0a = geometric_stream(&zero_map, &w).unwrap();
        let f0b = geometric_stream(&zero_map, &w).unwrap();
        assert_eq!(f0a, f0b);

        // swapped channels generally change the feature (role-tagged)
        let swapped = map.swapped_channels();
        let fs = geometric_stream(&swapped, &w).unwrap();
        assert_ne!(f, fs);
    }

    #[test]
    fn predict_individual_is_a_distribution() {
        let w = tiny_weights(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, wd) = w.config.encoder.feature_shape();
        let f = Array3::from_shape_fn((c, h, wd), |_| rng.gen_range(-1.0..1.0));
        let dist = predict_individual(&f, &w).unwrap();
        assert_eq!(dist.len(), 4);
        assert!((dist.sum() - 1.0).abs() < 1e-6);

        // zero weights: uniform
        let mut wz = tiny_weights(2);
        wz.store.get_mut("head_action.w").fill(0.0);
        wz.store.get_mut("head_action.b").fill(0.0);
        let uniform = predict_individual(&f, &wz).unwrap();
        assert!(uniform.iter().all(|&p| (p - 0.25).abs() < 1e-12));

        // softmax shift invariance: adding a constant to all logits via
        // the bias leaves the distribution unchanged
        let mut wshift = tiny_weights(2);
        wshift.store.get_mut("head_action.b").fill(3.7);
        let mut wbase = tiny_weights(2);
        wbase.store.get_mut("head_action.b").fill(0.0);
        let da = predict_individual(&f, &wbase).unwrap();
        let db = predict_individual(&f, &wshift).unwrap();
        assert!(da.iter().zip(db.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn fuse_scores_reproduces_the_worked_example() {
        let s_v = ndarray::arr1(&[0.6, 0.2]);
        let s_g = ndarray::arr1(&[0.2, 0.2]);
        let s_s = ndarray::arr1(&[0.5, 1.0]);
        let paper = fuse_score_vectors(&s_v, &s_g, &s_s, FusionMode::Paper, StreamSet::ALL);
        assert_eq!(paper, ndarray::arr1(&[0.4, 0.4]));
        let sum = fuse_score_vectors(&s_v, &s_g, &s_s, FusionMode::Sum, StreamSet::ALL);
        assert!((sum[0] - 1.3).abs() < 1e-12 && (sum[1] - 1.4).abs() < 1e-12);
        let product = fuse_score_vectors(&s_v, &s_g, &s_s, FusionMode::Product, StreamSet::ALL);
        assert!((product[0] - 0.06).abs() < 1e-12 && (product[1] - 0.04).abs() < 1e-12);
    }

    #[test]
    fn fuse_variants_select_streams() {
        let s_v = ndarray::arr1(&[0.6, 0.2]);
        let s_g = ndarray::arr1(&[0.2, 0.2]);
        let s_s = ndarray::arr1(&[0.5, 1.0]);
        let only = |name: &str| {
            fuse_score_vectors(
                &s_v,
                &s_g,
                &s_s,
                FusionMode::Paper,
                StreamSet::parse(name).unwrap(),
            )
        };
        assert_eq!(only("v"), s_v);
        assert_eq!(only("g"), s_g);
        assert_eq!(only("s"), s_s);
        assert_eq!(only("vg"), &s_v + &s_g);
        assert_eq!(only("vs"), &s_v * &s_s);
        assert_eq!(only("all"), (&s_v + &s_g) * &s_s);
    }

    #[test]
    fn paper_fusion_is_monotone_in_additive_streams() {
        let s_g = ndarray::arr1(&[0.2, 0.3, 0.1]);
        let s_s = ndarray::arr1(&[0.5, 0.9, 0.4]);
        let low = fuse_score_vectors(
            &ndarray::arr1(&[0.1, 0.5, 0.2]),
            &s_g,
            &s_s,
            FusionMode::Paper,
            StreamSet::ALL,
        );
        let high = fuse_score_vectors(
            &ndarray::arr1(&[0.3, 0.5, 0.2]),
            &s_g,
            &s_s,
            FusionMode::Paper,
            StreamSet::ALL,
        );
        assert!(high[0] >= low[0]);
        assert_eq!(high[1], low[1]);
        assert_eq!(high[2], low[2]);
    }

    #[test]
    fn forward_contract_shapes_and_determinism() {
        let w = tiny_weights(21);
        let prior = uniform_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let slices = random_slices(&mut rng, &w.config);
        let opts = ForwardOptions::default();
        let out1 = forward(&slices, &prior, &w, &opts).unwrap();
        let out2 = forward(&slices, &prior, &w, &opts).unwrap();
        assert_eq!(out1.scores.s_fused, out2.scores.s_fused);
        assert_eq!(out1.scores.s_fused.len(), 3);
        assert_eq!(out1.features.f_v.shape()[0], 3 * 64);
        assert!((out1.actions.dist_a.sum() - 1.0).abs() < 1e-6);
        // per-stream scores honor the [0, 1] activation contract
        for s in [&out1.scores.s_s, &out1.scores.s_g, &out1.scores.s_v] {
            assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // paper-mode fused scores live in [0, 2]
        assert!(out1.scores.s_fused.iter().all(|&v| (0.0..=2.0).contains(&v)));
    }

    #[test]
    fn semantic_stream_sees_symmetric_prior_under_pair_swap() {
        let w = tiny_weights(4);
        let catalog = ClassCatalog::default();
        let samples = vec![
            ("standing", "riding", "mounting"),
            ("standing", "standing", "fighting"),
            ("grazing", "standing", "smelling"),
        ];
        let prior = fit_prior(&catalog, &samples, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let slices = random_slices(&mut rng, &w.config);
        let swapped = SliceTriple {
            c1: slices.c2.clone(),
            c2: slices.c1.clone(),
            i: slices.i.clone(),
            geometric: slices.geometric.swapped_channels(),
        };
        let opts = ForwardOptions::default();
        let a = forward(&slices, &prior, &w, &opts).unwrap();
        let b = forward(&swapped, &prior, &w, &opts).unwrap();
        // the semantic feature is symmetric under the swap
        assert_eq!(a.features.f_s, b.features.f_s);
        assert_eq!(a.scores.s_s, b.scores.s_s);
    }

    #[test]
    fn network_checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let w = tiny_weights(17);
        save_network(&w, &path).unwrap();
        let back = load_network(&path).unwrap();
        assert_eq!(back.config, w.config);
        assert!(w.store.bitwise_eq_prefix(&back.store, ""));
        assert_eq!(w.store.len(), back.store.len());

        // same seed, same init
        assert_eq!(tiny_weights(17).store, w.store);
        assert_ne!(tiny_weights(18).store, w.store);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_kind() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, b"NOTACKPT________").unwrap();
        assert!(load_network(&bad).is_err());

        let enc = dir.path().join("enc.bin");
        let w = tiny_weights(1);
        let ck = EncoderCheckpoint {
            config: w.config.encoder.clone(),
            params: ParamStore::new(),
        };
        save_encoder(&ck, &enc).unwrap();
        assert!(load_network(&enc).is_err());
        assert!(load_encoder(&enc).is_ok());
    }
}
