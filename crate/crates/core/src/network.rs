//! The full network: a truncated 3D residual backbone with optional
//! quadruplet attention, multi-scale fusion, the mapping module `M`, the
//! feature module `F`, soft masking, prototype similarity, the bias-free
//! classification head and the online-CAM auxiliary head.
//!
//! Soft masking, the similarity function and the online-CAM head are fixed
//! here as follows:
//!
//! * soft mask: per-map min-max normalisation, then
//!   `g(m) = (σ(ω(m − ½)) − σ(−ω/2)) / (σ(ω/2) − σ(−ω/2))`, so `g(0) = 0`,
//!   `g(1) = 1`; a constant map becomes 0.5 everywhere;
//! * similarity: `u_p = Σ map_p·fea / Σ map_p` (spatial mean when the map
//!   sums to zero), `d_p = ‖u_p − v_p‖²`,
//!   `score_p = ln((d_p + 1) / (d_p + 1e-4))`, or cosine similarity;
//! * online CAM: a 1³ convolution from the fused features to one map per
//!   class, globally average-pooled into auxiliary logits.

use std::collections::BTreeMap;
use std::fmt;

use maprotonet_tensor::{sigmoid, Array, Conv3dSpec, Graph, Var};
use ndarray::{Array2, Axis, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::QuadrupletAttention;
use crate::error::{shape_err, Error, Result};
use crate::layers::{batch_norm, conv, init_bn, init_conv, Bottleneck, EXPANSION};
use crate::multiscale::{FusionVariant, MultiScale};
use crate::params::{ParamStore, Session};

pub const SIMILARITY_EPS: f64 = 1e-4;

/// Prototype-to-feature similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[default]
    LogRatio,
    Cosine,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_extents: [usize; 3],
    pub stem_channels: usize,
    pub blocks: usize,
    pub use_quadruplet: bool,
    pub attention_kernel: usize,
    pub use_multiscale: bool,
    pub n_scale: usize,
    pub fusion_variant: FusionVariant,
    pub prototypes: usize,
    pub prototype_dim: usize,
    pub similarity: SimilarityKind,
    pub sharpen: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            num_classes: 2,
            input_extents: [128, 128, 96],
            stem_channels: 64,
            blocks: 3,
            use_quadruplet: true,
            attention_kernel: 7,
            use_multiscale: true,
            n_scale: 2,
            fusion_variant: FusionVariant::C,
            prototypes: 30,
            prototype_dim: 128,
            similarity: SimilarityKind::LogRatio,
            sharpen: 4.0,
        }
    }
}

/// Model families of the ablation study, reachable through configuration flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Neither quadruplet attention nor multi-scale fusion.
    Baseline,
    Quadruplet,
    MultiScale,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Baseline,
        Ablation::Quadruplet,
        Ablation::MultiScale,
        Ablation::Full,
    ];

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let (q, ms) = match self {
            Ablation::Baseline => (false, false),
            Ablation::Quadruplet => (true, false),
            Ablation::MultiScale => (false, true),
            Ablation::Full => (true, true),
        };
        ModelConfig {
            use_quadruplet: q,
            use_multiscale: ms,
            ..cfg.clone()
        }
    }
}

fn stem_extents(input: [usize; 3]) -> [usize; 3] {
    input.map(|n| (n + 6 - 7) / 2 + 1)
}

fn pool_extents(stem: [usize; 3]) -> [usize; 3] {
    stem.map(|n| (n + 2 - 3) / 2 + 1)
}

impl ModelConfig {
    /// Tiny configuration used for finite-difference audits.
    pub fn tiny() -> Self {
        Self {
            input_extents: [16, 16, 12],
            stem_channels: 8,
            blocks: 1,
            attention_kernel: 3,
            prototypes: 4,
            prototype_dim: 8,
            ..Self::default()
        }
    }

    /// Reduced configuration for desk-scale training on 32×32×24 volumes.
    pub fn scaled() -> Self {
        Self {
            input_extents: [32, 32, 24],
            stem_channels: 16,
            blocks: 1,
            attention_kernel: 5,
            prototypes: 10,
            prototype_dim: 32,
            ..Self::default()
        }
    }

    pub fn deep_channels(&self) -> usize {
        self.stem_channels * EXPANSION
    }

    pub fn prototypes_per_class(&self) -> usize {
        self.prototypes / self.num_classes
    }

    /// Class of prototype `p`; prototypes are assigned in contiguous blocks.
    pub fn class_of(&self, p: usize) -> usize {
        p / self.prototypes_per_class()
    }

    /// Spatial extents of every pyramid level (shallowest first) for the
    /// configured input.
    pub fn level_extents(&self) -> Vec<[usize; 3]> {
        let a = stem_extents(self.input_extents);
        let b = pool_extents(a);
        match self.n_scale {
            1 => vec![b],
            2 => vec![a, b],
            _ => vec![a, b, b],
        }
    }

    pub fn level_channels(&self) -> Vec<usize> {
        let (s, d) = (self.stem_channels, self.deep_channels());
        match self.n_scale {
            1 => vec![d],
            2 => vec![s, d],
            _ => vec![s, s, d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.stem_channels == 0 || self.blocks == 0 {
            return bad("in_channels, stem_channels and blocks must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("at least two classes are required".into());
        }
        if self.prototypes == 0 || !self.prototypes.is_multiple_of(self.num_classes) {
            return bad(format!(
                "{} prototypes cannot be split evenly over {} classes",
                self.prototypes, self.num_classes
            ));
        }
        if self.prototype_dim == 0 {
            return bad("prototype_dim must be positive".into());
        }
        if !(1..=3).contains(&self.n_scale) {
            return bad(format!("n_scale must be 1, 2 or 3, got {}", self.n_scale));
        }
        if self.attention_kernel.is_multiple_of(2) {
            return bad(format!("attention_kernel must be odd, got {}", self.attention_kernel));
        }
        if !(self.sharpen > 0.0 && self.sharpen.is_finite()) {
            return bad("sharpen must be positive".into());
        }
        if self.input_extents.iter().any(|&n| n < 2) {
            return bad(format!("input extents {:?} are too small", self.input_extents));
        }
        if self.n_scale >= 2 && self.use_multiscale {
            let ext = self.level_extents();
            crate::multiscale::level_factor(&ext[0], &ext[ext.len() - 1])
                .map_err(|e| Error::Config(format!("input extents {:?}: {e}", self.input_extents)))?;
        }
        Ok(())
    }
}

/// Prototype vectors with their class assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub vectors: Array2<f64>,
    pub class_of: Vec<usize>,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Prototypes assigned to `class`.
    pub fn of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.class_of[p] == class).collect()
    }
}

/// Recorded intermediates of one forward pass.
pub struct ForwardVars<'a> {
    pub levels: Vec<Var<'a>>,
    pub h_mul: Var<'a>,
    pub raw_maps: Var<'a>,
    pub maps: Var<'a>,
    pub fea: Var<'a>,
    /// `(N, P, D)` map-weighted feature averages.
    pub pooled: Var<'a>,
    /// `(N, P)` squared distances to the prototypes.
    pub distances: Var<'a>,
    pub scores: Var<'a>,
    pub logits: Var<'a>,
    pub cam_maps: Var<'a>,
    pub cam_logits: Var<'a>,
}

/// Plain-array view of [`ForwardVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub levels: Vec<Array>,
    pub h_mul: Array,
    pub maps: Array,
    pub fea: Array,
    pub pooled: Array,
    pub distances: Array,
    pub scores: Array,
    pub logits: Array,
    pub cam_maps: Array,
    pub cam_logits: Array,
}

impl ForwardVars<'_> {
    pub fn to_output(&self) -> ForwardOutput {
        let v = |x: &Var<'_>| (*x.value()).clone();
        ForwardOutput {
            levels: self.levels.iter().map(v).collect(),
            h_mul: v(&self.h_mul),
            maps: v(&self.maps),
            fea: v(&self.fea),
            pooled: v(&self.pooled),
            distances: v(&self.distances),
            scores: v(&self.scores),
            logits: v(&self.logits),
            cam_maps: v(&self.cam_maps),
            cam_logits: v(&self.cam_logits),
        }
    }
}

/// Module list with trainable-parameter counts, used to tell ablation
/// variants apart.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fingerprint {
    pub modules: BTreeMap<String, usize>,
    pub total: usize,
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in &self.modules {
            writeln!(f, "{name:<24} {n:>10}")?;
        }
        write!(f, "{:<24} {:>10}", "total", self.total)
    }
}

/// Model structure plus its parameters.
#[derive(Clone, Debug)]
pub struct MaProtoNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    blocks: Vec<Bottleneck>,
    attention: Vec<QuadrupletAttention>,
    multiscale: Option<MultiScale>,
}

const STEM_CONV: &str = "backbone.stem.conv";
const STEM_BN: &str = "backbone.stem.bn";
pub const PROTOTYPES: &str = "prototypes";
pub const HEAD: &str = "head.weight";

/// Names of the pyramid taps in backbone order.
const TAPS: [&str; 3] = ["stem", "pool", "layer1"];

impl MaProtoNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let deep = config.deep_channels();
        let blocks = (0..config.blocks)
            .map(|i| {
                let cin = if i == 0 { config.stem_channels } else { deep };
                Bottleneck::new(format!("backbone.layer1.{i}"), cin, config.stem_channels)
            })
            .collect();
        let attention = if config.use_quadruplet {
            Self::tap_names(config.n_scale)
                .iter()
                .map(|t| QuadrupletAttention::new(format!("attention.{t}"), config.attention_kernel))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let multiscale = if config.use_multiscale && config.n_scale > 1 {
            let ext = config.level_extents();
            let deep_ext = ext[ext.len() - 1];
            let factors = ext[..ext.len() - 1]
                .iter()
                .map(|e| crate::multiscale::level_factor(e, &deep_ext))
                .collect::<Result<Vec<_>>>()?;
            Some(MultiScale::new(
                "multiscale",
                config.fusion_variant,
                config.level_channels(),
                factors,
            )?)
        } else {
            None
        };
        let mut model = Self {
            config,
            store: ParamStore::new(),
            blocks,
            attention,
            multiscale,
        };
        model.init(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(model)
    }

    fn tap_names(n_scale: usize) -> Vec<&'static str> {
        match n_scale {
            1 => vec![TAPS[2]],
            2 => vec![TAPS[0], TAPS[2]],
            _ => TAPS.to_vec(),
        }
    }

    /// Channels of the tensor fed to the mapping and CAM modules.
    pub fn fused_channels(&self) -> usize {
        match &self.multiscale {
            Some(ms) => ms.out_channels(),
            None => self.config.deep_channels(),
        }
    }

    fn init<R: Rng>(&mut self, rng: &mut R) {
        let c = self.config.clone();
        let fused = self.fused_channels();
        let store = &mut self.store;
        init_conv(store, rng, STEM_CONV, c.stem_channels, c.in_channels, 7, false);
        init_bn(store, STEM_BN, c.stem_channels);
        for b in &self.blocks {
            b.init(store, rng);
        }
        for q in &self.attention {
            q.init(store, rng);
        }
        if let Some(ms) = &self.multiscale {
            ms.init(store, rng);
        }
        let (deep, d, p, k) = (c.deep_channels(), c.prototype_dim, c.prototypes, c.num_classes);
        init_conv(store, rng, "features.conv1", d, deep, 1, true);
        init_conv(store, rng, "features.conv2", d, d, 1, true);
        init_conv(store, rng, "mapping.conv1", d, fused, 1, true);
        init_conv(store, rng, "mapping.conv2", p, d, 1, true);
        store.insert(
            PROTOTYPES,
            Array::from_shape_simple_fn(IxDyn(&[p, d]), || rng.gen_range(0.0..1.0)),
        );
        let mut head = Array::zeros(IxDyn(&[k, p]));
        for j in 0..p {
            for cls in 0..k {
                head[[cls, j]] = if c.class_of(j) == cls { 1.0 } else { -0.5 };
            }
        }
        store.insert(HEAD, head);
        init_conv(store, rng, "cam.conv", k, fused, 1, true);
    }

    pub fn attention_blocks(&self) -> &[QuadrupletAttention] {
        &self.attention
    }

    /// Mutable access for the gate-pinning test hook.
    pub fn attention_blocks_mut(&mut self) -> &mut [QuadrupletAttention] {
        &mut self.attention
    }

    pub fn multiscale(&self) -> Option<&MultiScale> {
        self.multiscale.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn bank(&self) -> PrototypeBank {
        let v = self.store.get(PROTOTYPES).expect("prototypes");
        PrototypeBank {
            vectors: v.clone().into_dimensionality::<Ix2>().unwrap(),
            class_of: (0..self.config.prototypes).map(|p| self.config.class_of(p)).collect(),
        }
    }

    pub fn set_prototype(&mut self, p: usize, vector: &[f64]) {
        let v = self.store.get_mut(PROTOTYPES).expect("prototypes");
        for (d, &x) in vector.iter().enumerate() {
            v[[p, d]] = x;
        }
    }

    /// Parameter groups with their sizes.
    pub fn fingerprint(&self) -> Fingerprint {
        let mut modules = BTreeMap::new();
        for (name, a) in self.store.params() {
            let parts: Vec<&str> = name.split('.').collect();
            let key = match parts[0] {
                "backbone" | "attention" => format!("{}.{}", parts[0], parts[1]),
                other => other.to_string(),
            };
            *modules.entry(key).or_insert(0) += a.len();
        }
        Fingerprint {
            modules,
            total: self.param_count(),
        }
    }

    /// Backbone pyramid, shallowest level first. Quadruplet attention, when
    /// enabled, follows every emitted tap and feeds the rest of the backbone.
    pub fn backbone<'a>(&self, sess: &Session<'a>, x: Var<'a>) -> Result<Vec<Var<'a>>> {
        let shape = x.shape();
        if shape.len() != 5 {
            return Err(shape_err!("input must be (N, C, H, W, D), got {shape:?}"));
        }
        if shape[1] != self.config.in_channels {
            return Err(shape_err!(
                "input has {} channels, model expects {}",
                shape[1],
                self.config.in_channels
            ));
        }
        let taps = Self::tap_names(self.config.n_scale);
        let mut levels = Vec::with_capacity(taps.len());
        let mut attn = self.attention.iter();
        let mut tap = |name: &str, h: Var<'a>, levels: &mut Vec<Var<'a>>| -> Var<'a> {
            if !taps.contains(&name) {
                return h;
            }
            let h = match attn.next() {
                Some(q) => q.forward(sess, h),
                None => h,
            };
            levels.push(h);
            h
        };
        let h = conv(sess, STEM_CONV, x, Conv3dSpec::new(2, 3));
        let h = batch_norm(sess, STEM_BN, h).relu();
        let h = tap(TAPS[0], h, &mut levels);
        let h = maprotonet_tensor::max_pool3d(h, 3, 2, 1);
        let mut h = tap(TAPS[1], h, &mut levels);
        for b in &self.blocks {
            h = b.forward(sess, h);
        }
        tap(TAPS[2], h, &mut levels);
        Ok(levels)
    }

    /// Multi-scale fusion, or the deepest level when fusion is disabled.
    pub fn fuse<'a>(&self, sess: &Session<'a>, levels: &[Var<'a>]) -> Result<Var<'a>> {
        match &self.multiscale {
            Some(ms) => ms.fuse(sess, levels),
            None => levels.last().copied().ok_or_else(|| shape_err!("empty pyramid")),
        }
    }

    /// Mapping module: raw occurrence maps in `(0, 1)`, one per prototype.
    pub fn mapping<'a>(&self, sess: &Session<'a>, h_mul: Var<'a>) -> Var<'a> {
        let one = Conv3dSpec::default();
        let h = conv(sess, "mapping.conv1", h_mul, one).relu();
        conv(sess, "mapping.conv2", h, one).sigmoid()
    }

    /// Feature module on the deepest level.
    pub fn features<'a>(&self, sess: &Session<'a>, h_s: Var<'a>) -> Var<'a> {
        let one = Conv3dSpec::default();
        let h = conv(sess, "features.conv1", h_s, one).relu();
        conv(sess, "features.conv2", h, one).sigmoid()
    }

    /// Per-class activation maps and their global averages.
    pub fn online_cam<'a>(&self, sess: &Session<'a>, h_mul: Var<'a>) -> (Var<'a>, Var<'a>) {
        let maps = conv(sess, "cam.conv", h_mul, Conv3dSpec::default());
        let logits = maps.mean_axes(&[2, 3, 4], false);
        (maps, logits)
    }

    /// Linear head without bias: `(N, P) -> (N, K)`.
    pub fn classify<'a>(&self, sess: &Session<'a>, scores: Var<'a>) -> Var<'a> {
        scores.matmul(sess.param(HEAD).permute(&[1, 0]))
    }

    pub fn forward_vars<'a>(&self, sess: &Session<'a>, x: Var<'a>) -> Result<ForwardVars<'a>> {
        let levels = self.backbone(sess, x)?;
        let h_mul = self.fuse(sess, &levels)?;
        let raw_maps = self.mapping(sess, h_mul);
        let maps = soft_mask(raw_maps, self.config.sharpen);
        let fea = self.features(sess, *levels.last().unwrap());
        if fea.shape()[2..] != maps.shape()[2..] {
            return Err(shape_err!(
                "maps {:?} and features {:?} differ spatially",
                maps.shape(),
                fea.shape()
            ));
        }
        let pooled = weighted_pool(maps, fea);
        let protos = sess.param(PROTOTYPES);
        let distances = squared_distances(pooled, protos);
        let scores = match self.config.similarity {
            SimilarityKind::LogRatio => log_ratio_similarity(distances),
            SimilarityKind::Cosine => cosine_similarity(pooled, protos),
        };
        let logits = self.classify(sess, scores);
        let (cam_maps, cam_logits) = self.online_cam(sess, h_mul);
        Ok(ForwardVars {
            levels,
            h_mul,
            raw_maps,
            maps,
            fea,
            pooled,
            distances,
            scores,
            logits,
            cam_maps,
            cam_logits,
        })
    }

    /// Evaluation-mode forward pass on an `(N, C, H, W, D)` batch.
    pub fn forward(&self, x: &Array) -> Result<ForwardOutput> {
        let g = Graph::new();
        let sess = Session::eval(&g, &self.store);
        Ok(self.forward_vars(&sess, g.constant(x.clone()))?.to_output())
    }
}

/// Sharpening applied after min-max normalisation; maps `[0, 1]` onto
/// `[0, 1]` with `g(0) = 0`, `g(½) = ½`, `g(1) = 1`.
pub fn sharpen(m: f64, omega: f64) -> f64 {
    let lo = sigmoid(-omega / 2.0);
    let hi = sigmoid(omega / 2.0);
    (sigmoid(omega * (m - 0.5)) - lo) / (hi - lo)
}

/// Soft masking of `(N, P, ...)` raw maps, per map.
pub fn soft_mask<'g>(raw: Var<'g>, omega: f64) -> Var<'g> {
    let lo = sigmoid(-omega / 2.0);
    let span = sigmoid(omega / 2.0) - lo;
    raw.minmax_normalize(2).unary(
        move |m| (sigmoid(omega * (m - 0.5)) - lo) / span,
        move |m, _| {
            let s = sigmoid(omega * (m - 0.5));
            omega * s * (1.0 - s) / span
        },
    )
}

/// Map-weighted spatial averages: maps `(N, P, ...)` and features
/// `(N, D, ...)` on the same grid give `(N, P, D)`. A map summing to zero
/// falls back to uniform weights.
pub fn weighted_pool<'g>(maps: Var<'g>, fea: Var<'g>) -> Var<'g> {
    let ms = maps.shape();
    let fs = fea.shape();
    let (n, p, d) = (ms[0], ms[1], fs[1]);
    let v: usize = ms[2..].iter().product();
    let m = maps.reshape(&[n, p, v]);
    let mv = m.value();
    let mut sums = vec![0.0; n * p];
    let ms_flat = mv.as_slice().unwrap();
    let mut w = vec![0.0; n * p * v];
    for r in 0..n * p {
        let row = &ms_flat[r * v..(r + 1) * v];
        let s: f64 = row.iter().sum();
        sums[r] = s;
        let dst = &mut w[r * v..(r + 1) * v];
        if s > 0.0 {
            for (o, &x) in dst.iter_mut().zip(row) {
                *o = x / s;
            }
        } else {
            dst.fill(1.0 / v as f64);
        }
    }
    let wv = Array::from_shape_vec(IxDyn(&[n, p, v]), w).unwrap();
    let w_out = wv.clone();
    let weights = maps.graph().custom(&[m], w_out, move |g, _| {
        // w = m / s  =>  dm_j = (g_j - Σ_k g_k w_k) / s
        let gs = g.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let mut gm = vec![0.0; n * p * v];
        for r in 0..n * p {
            if sums[r] <= 0.0 {
                continue;
            }
            let gr = &gs[r * v..(r + 1) * v];
            let wr = &ws[r * v..(r + 1) * v];
            let dot: f64 = gr.iter().zip(wr).map(|(a, b)| a * b).sum();
            for (o, &gv) in gm[r * v..(r + 1) * v].iter_mut().zip(gr) {
                *o = (gv - dot) / sums[r];
            }
        }
        vec![Some(Array::from_shape_vec(IxDyn(&[n, p, v]), gm).unwrap())]
    });
    let ft = fea.reshape(&[n, d, v]).permute(&[0, 2, 1]);
    weights.bmm(ft)
}

/// `‖u_p − v_p‖²` for pooled `(N, P, D)` and prototypes `(P, D)`.
pub fn squared_distances<'g>(pooled: Var<'g>, protos: Var<'g>) -> Var<'g> {
    let s = protos.shape();
    pooled
        .sub(protos.reshape(&[1, s[0], s[1]]))
        .square()
        .sum_axes(&[2], false)
}

/// `ln((d + 1) / (d + ε))`, strictly decreasing in `d`.
pub fn log_ratio_similarity<'g>(distances: Var<'g>) -> Var<'g> {
    distances
        .add_scalar(1.0)
        .ln()
        .sub(distances.add_scalar(SIMILARITY_EPS).ln())
}

/// Cosine similarity between pooled vectors and prototypes.
pub fn cosine_similarity<'g>(pooled: Var<'g>, protos: Var<'g>) -> Var<'g> {
    let s = protos.shape();
    let v = protos.reshape(&[1, s[0], s[1]]);
    let dot = pooled.mul(v).sum_axes(&[2], false);
    let nu = pooled.square().sum_axes(&[2], false).add_scalar(1e-12).sqrt();
    let nv = v.square().sum_axes(&[2], false).add_scalar(1e-12).sqrt();
    dot.div(nu.mul(nv))
}

/// Scalar reference for the log-ratio similarity.
pub fn similarity_of_distance(d: f64) -> f64 {
    ((d + 1.0) / (d + SIMILARITY_EPS)).ln()
}

/// Head weights connecting prototypes to classes other than their own.
pub fn off_class_mask(cfg: &ModelConfig) -> Array {
    let mut m = Array::zeros(IxDyn(&[cfg.num_classes, cfg.prototypes]));
    for p in 0..cfg.prototypes {
        for k in 0..cfg.num_classes {
            if cfg.class_of(p) != k {
                m[[k, p]] = 1.0;
            }
        }
    }
    m
}

/// Spatial mean of every channel: `(N, C, ...) -> (N, C)` on plain arrays.
pub fn spatial_mean(x: &Array) -> Array {
    let mut m = x.clone();
    while m.ndim() > 2 {
        m = m.mean_axis(Axis(2)).unwrap();
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Trainable;

    fn random(shape: &[usize], seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sharpening_endpoints_and_midpoint() {
        assert!(sharpen(0.0, 4.0).abs() < 1e-15);
        assert!((sharpen(1.0, 4.0) - 1.0).abs() < 1e-15);
        assert!((sharpen(0.5, 4.0) - 0.5).abs() < 1e-15);
        assert!(sharpen(0.3, 4.0) < sharpen(0.31, 4.0));
    }

    #[test]
    fn tiny_model_shapes() {
        let model = MaProtoNet::new(ModelConfig::tiny(), 0).unwrap();
        let out = model.forward(&random(&[2, 4, 16, 16, 12], 1)).unwrap();
        assert_eq!(out.levels[0].shape(), &[2, 8, 8, 8, 6]);
        assert_eq!(out.levels[1].shape(), &[2, 32, 4, 4, 3]);
        assert_eq!(out.h_mul.shape(), &[2, 48, 4, 4, 3]);
        assert_eq!(out.maps.shape(), &[2, 4, 4, 4, 3]);
        assert_eq!(out.fea.shape(), &[2, 8, 4, 4, 3]);
        assert_eq!(out.logits.shape(), &[2, 2]);
        assert_eq!(out.cam_maps.shape(), &[2, 2, 4, 4, 3]);
        assert!(out.maps.iter().all(|&m| (0.0..=1.0).contains(&m)));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let model = MaProtoNet::new(ModelConfig::tiny(), 0).unwrap();
        assert!(model.forward(&random(&[1, 3, 16, 16, 12], 1)).is_err());
    }

    #[test]
    fn head_initialisation_and_linearity() {
        let model = MaProtoNet::new(ModelConfig::tiny(), 0).unwrap();
        let g = Graph::new();
        let sess = Session::eval(&g, &model.store);
        let mut s = Array::zeros(IxDyn(&[1, 4]));
        s[[0, 0]] = 1.0;
        let logits = model.classify(&sess, g.constant(s)).value();
        assert!(logits[[0, 0]] > logits[[0, 1]]);
        let zero = model.classify(&sess, g.constant(Array::zeros(IxDyn(&[1, 4])))).value();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_map_pools_to_spatial_mean() {
        let g = Graph::new();
        let maps = g.constant(Array::from_elem(IxDyn(&[1, 2, 2, 3, 2]), 0.7));
        let fea_a = random(&[1, 3, 2, 3, 2], 4);
        let pooled = weighted_pool(maps, g.constant(fea_a.clone())).value();
        let mean = spatial_mean(&fea_a);
        for p in 0..2 {
            for d in 0..3 {
                assert!((pooled[[0, p, d]] - mean[[0, d]]).abs() < 1e-12);
            }
        }
        let zero = g.constant(Array::zeros(IxDyn(&[1, 1, 2, 3, 2])));
        let pooled = weighted_pool(zero, g.constant(fea_a)).value();
        for d in 0..3 {
            assert!((pooled[[0, 0, d]] - mean[[0, d]]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_distance_score() {
        assert!((similarity_of_distance(0.0) - (1e4f64).ln()).abs() < 1e-12);
        assert!(similarity_of_distance(1e12) < 1e-9);
    }

    #[test]
    fn training_session_records_norm_updates() {
        let model = MaProtoNet::new(ModelConfig::tiny(), 0).unwrap();
        let g = Graph::new();
        let sess = Session::new(&g, &model.store, true, Trainable::All);
        model
            .forward_vars(&sess, g.constant(random(&[2, 4, 16, 16, 12], 1)))
            .unwrap();
        assert!(!sess.take_stat_updates().is_empty());
    }
}
