//! Full forecaster: per-modality spectro-temporal streams, optional
//! seasonal/trend split, cross-channel fusion, horizon projection and the
//! Gaussian output head. Also ablation variants and checkpoints.
//!
//! Stage order inside a stream: token embedding, encoder, then residual
//! Mamba, multi-scale convolution, spectral filter and BiLSTM. A disabled
//! stage is skipped. Each modality group gets its own stream(s) and becomes
//! one channel of the cross-channel attention.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomp::decompose_var;
use crate::diffcore::{Graph, Tensor, Var};
use crate::embed_encode::{BiLstm, Encoder, TokenEmbedding};
use crate::freqdom::{FrequencyBlock, WindowConfig};
use crate::fusion::{
    ensemble_combine, mixture_std, weight_regularizer_var, ComponentGate, CrossChannelAttention, EnsembleGate,
};
use crate::heads::{
    nll_loss_var, point_loss_var, ForecastResult, LossWeights, PointLoss, TemporalProjection, TermVars, UncertaintyHead,
};
use crate::msconv::MultiScaleConv;
use crate::params::{Bound, ParamStore};
use crate::preprocess::{Modality, NormStats, TimeSeriesFrame};
use crate::ssm::MambaBlock;

pub const CHECKPOINT_FORMAT: &str = "maestro-checkpoint/1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("channel layout: {0}")]
    Layout(String),
    #[error("{stage}: {message}")]
    Stage { stage: String, message: String },
    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

trait StageExt<T> {
    fn stage(self, name: impl fmt::Display) -> Result<T, ModelError>;
}

impl<T, E: fmt::Display> StageExt<T> for Result<T, E> {
    fn stage(self, name: impl fmt::Display) -> Result<T, ModelError> {
        self.map_err(|e| ModelError::Stage {
            stage: name.to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub window: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ffn_dim: usize,
    pub decomp_kernel: usize,
    pub kernels: Vec<usize>,
    pub dilations: Vec<usize>,
    pub state_dim: usize,
    pub cross_dim: usize,
    pub ensemble_hidden: usize,
    pub gain_bound: f64,
    pub freq_windows: Vec<WindowConfig>,
    pub use_decomp: bool,
    pub use_mamba: bool,
    pub use_msconv: bool,
    pub use_freq: bool,
    pub use_bilstm: bool,
    pub use_cross_attn: bool,
    pub estimate_uncertainty: bool,
    pub ensemble_mode: bool,
    pub modalities: Vec<Modality>,
    pub loss: PointLoss,
    pub huber_delta: f64,
    pub lambda_point: f64,
    pub lambda_nll: f64,
    pub lambda_spectral: f64,
    pub lambda_weights: f64,
    pub lambda_stability: f64,
    pub lambda_sigma: f64,
    pub lambda_smooth: f64,
    pub lambda_sparse: f64,
    pub lambda_entropy: f64,
    pub lambda_tv: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 30,
            horizon: 1,
            d_model: 16,
            heads: 2,
            encoder_layers: 1,
            ffn_dim: 32,
            decomp_kernel: 25,
            kernels: vec![3, 5, 7],
            dilations: vec![1, 2],
            state_dim: 8,
            cross_dim: 8,
            ensemble_hidden: 16,
            gain_bound: 2.0,
            freq_windows: vec![WindowConfig::default()],
            use_decomp: true,
            use_mamba: true,
            use_msconv: true,
            use_freq: true,
            use_bilstm: true,
            use_cross_attn: true,
            estimate_uncertainty: true,
            ensemble_mode: false,
            modalities: Modality::ALL.to_vec(),
            loss: PointLoss::Huber,
            huber_delta: 1.0,
            lambda_point: 1.0,
            lambda_nll: 0.1,
            lambda_spectral: 1.0,
            lambda_weights: 1.0,
            lambda_stability: 1.0,
            lambda_sigma: 0.0,
            lambda_smooth: 1e-3,
            lambda_sparse: 1e-4,
            lambda_entropy: 1e-2,
            lambda_tv: 1e-2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.window < 2 || self.horizon == 0 {
            return fail(format!("window {} must be >= 2 and horizon {} >= 1", self.window, self.horizon));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!("d_model {} must be positive and even", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.encoder_layers == 0 || self.ffn_dim == 0 || self.state_dim == 0 || self.cross_dim == 0 || self.ensemble_hidden == 0 {
            return fail("layer counts and widths must be positive".into());
        }
        if self.use_decomp && (self.decomp_kernel % 2 == 0 || self.decomp_kernel > self.window) {
            return fail(format!(
                "decomp_kernel {} must be odd and at most window {}",
                self.decomp_kernel, self.window
            ));
        }
        if self.use_msconv {
            if self.kernels.is_empty() || self.dilations.is_empty() || self.kernels.contains(&0) || self.dilations.contains(&0) {
                return fail("kernels and dilations must be non-empty and positive".into());
            }
            let fits = self
                .kernels
                .iter()
                .any(|&k| self.dilations.iter().any(|&d| (k - 1) * d < 2 * self.window));
            if !fits {
                return fail("no convolution branch fits the window".into());
            }
        }
        if self.use_freq {
            if !(self.gain_bound > 0.0) {
                return fail(format!("gain_bound {} must be positive", self.gain_bound));
            }
            if self.freq_windows.is_empty() {
                return fail("freq_windows needs at least one configuration".into());
            }
            for w in &self.freq_windows {
                if let Some(s) = w.segment {
                    if s == 0 || self.window % s != 0 {
                        return fail(format!("segment {s} does not divide window {}", self.window));
                    }
                }
            }
        }
        if self.modalities.is_empty() {
            return fail("at least one modality is required".into());
        }
        if self.ensemble_mode && self.modalities.len() < 2 {
            return fail("ensemble_mode needs at least two modalities".into());
        }
        if !(self.huber_delta > 0.0) {
            return fail(format!("huber_delta {} must be positive", self.huber_delta));
        }
        self.loss_weights().validate().map_err(|e| ModelError::Config(e.to_string()))?;
        for (name, v) in [
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_sparse", self.lambda_sparse),
            ("lambda_entropy", self.lambda_entropy),
            ("lambda_tv", self.lambda_tv),
        ] {
            if !(v >= 0.0) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Composite weights; the likelihood term is dropped without a scale head.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            point: self.lambda_point,
            nll: if self.estimate_uncertainty { self.lambda_nll } else { 0.0 },
            spectral: self.lambda_spectral,
            weights: self.lambda_weights,
            stability: self.lambda_stability,
            sigma: if self.estimate_uncertainty { self.lambda_sigma } else { 0.0 },
        }
    }

    fn set_enhancements(&mut self, on: bool) {
        self.use_decomp = on;
        self.use_mamba = on;
        self.use_msconv = on;
        self.use_freq = on;
        self.use_bilstm = on;
        self.use_cross_attn = on;
    }
}

/// Variant names accepted by [`ablation_variant`].
pub const ABLATION_VARIANTS: [&str; 18] = [
    "full",
    "w/o Mamba",
    "w/o Cross-Channel Attention",
    "w/o Frequency Domain",
    "w/o Decomposition",
    "w/o Multi-scale",
    "w/o BiLSTM",
    "only Mamba",
    "only Cross-Attention",
    "only Frequency Domain",
    "Minimal Model",
    "single_modal_flu",
    "single_modal_trends",
    "single_modal_weather",
    "modality_flu_trends",
    "modality_flu_weather",
    "modality_trends_weather",
    "full_modal",
];

/// Lowercase with every run of non-alphanumerics collapsed to `_`.
pub fn variant_slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

/// Canonical variant name for `name` or its slug.
pub fn canonical_variant(name: &str) -> Option<&'static str> {
    let slug = variant_slug(name);
    ABLATION_VARIANTS.iter().copied().find(|v| variant_slug(v) == slug)
}

/// `base` with exactly the named flags changed.
pub fn ablation_variant(base: &ModelConfig, name: &str) -> Result<ModelConfig, ModelError> {
    let canon = canonical_variant(name).ok_or_else(|| ModelError::UnknownVariant(name.to_string()))?;
    let mut c = base.clone();
    let only = |c: &mut ModelConfig, f: fn(&mut ModelConfig)| {
        c.set_enhancements(false);
        f(c);
    };
    match canon {
        "full" | "full_modal" => c.modalities = Modality::ALL.to_vec(),
        "w/o Mamba" => c.use_mamba = false,
        "w/o Cross-Channel Attention" => c.use_cross_attn = false,
        "w/o Frequency Domain" => c.use_freq = false,
        "w/o Decomposition" => c.use_decomp = false,
        "w/o Multi-scale" => c.use_msconv = false,
        "w/o BiLSTM" => c.use_bilstm = false,
        "only Mamba" => only(&mut c, |c| c.use_mamba = true),
        "only Cross-Attention" => only(&mut c, |c| c.use_cross_attn = true),
        "only Frequency Domain" => only(&mut c, |c| c.use_freq = true),
        "Minimal Model" => c.set_enhancements(false),
        other => {
            let tags = other.trim_start_matches("single_modal_").trim_start_matches("modality_");
            c.modalities = tags
                .split('_')
                .map(|t| Modality::parse(t).expect("variant tags are modality aliases"))
                .collect();
            if c.modalities.len() < 2 {
                c.ensemble_mode = false;
            }
        }
    }
    if canon == "full" {
        c.modalities = base.modalities.clone();
    }
    Ok(c)
}

/// Input channels grouped by modality, in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub target: String,
    pub groups: Vec<ChannelGroup>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelGroup {
    pub modality: Modality,
    pub channels: Vec<String>,
}

impl ChannelLayout {
    /// Channels of the selected modalities, grouped in canonical modality
    /// order; the target is an input only when its modality is selected.
    pub fn from_frame(frame: &TimeSeriesFrame, modalities: &[Modality]) -> Result<Self, ModelError> {
        let groups: Vec<ChannelGroup> = Modality::ALL
            .iter()
            .filter(|m| modalities.contains(m))
            .map(|&m| ChannelGroup {
                modality: m,
                channels: frame
                    .channels()
                    .iter()
                    .filter(|c| c.modality == m)
                    .map(|c| c.name.clone())
                    .collect(),
            })
            .filter(|g| !g.channels.is_empty())
            .collect();
        if groups.is_empty() {
            return Err(ModelError::Layout(format!(
                "no channels for modalities {:?}",
                modalities.iter().map(|m| m.name()).collect::<Vec<_>>()
            )));
        }
        Ok(Self {
            target: frame.target().name.clone(),
            groups,
        })
    }

    pub fn input_names(&self) -> Vec<&str> {
        self.groups.iter().flat_map(|g| g.channels.iter().map(String::as_str)).collect()
    }

    pub fn width(&self) -> usize {
        self.groups.iter().map(|g| g.channels.len()).sum()
    }

    /// Frame column indices of the inputs, in layout order.
    pub fn input_indices(&self, frame: &TimeSeriesFrame) -> Result<Vec<usize>, ModelError> {
        let missing: Vec<&str> = self
            .input_names()
            .into_iter()
            .filter(|n| frame.channel_index(n).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(ModelError::Layout(format!("frame lacks channels {}", missing.join(", "))));
        }
        if frame.target().name != self.target {
            return Err(ModelError::Layout(format!(
                "frame target `{}` differs from model target `{}`",
                frame.target().name,
                self.target
            )));
        }
        Ok(self.input_names().into_iter().map(|n| frame.channel_index(n).expect("checked")).collect())
    }
}

#[derive(Clone, Debug)]
struct Stream {
    embed: TokenEmbedding,
    encoder: Encoder,
    mamba: Option<MambaBlock>,
    msconv: Option<MultiScaleConv>,
    freq: Option<FrequencyBlock>,
    bilstm: Option<BiLstm>,
}

#[derive(Clone, Debug)]
struct GroupNet {
    name: String,
    start: usize,
    width: usize,
    streams: Vec<(String, Stream)>,
    gate: Option<ComponentGate>,
}

#[derive(Clone, Debug)]
enum Head {
    Single {
        proj: TemporalProjection,
        out: UncertaintyHead,
    },
    Ensemble {
        projs: Vec<TemporalProjection>,
        outs: Vec<UncertaintyHead>,
        gate: EnsembleGate,
    },
}

/// Graph outputs of one forward pass (normalized units).
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub mean: Var,
    pub std: Option<Var>,
    pub ensemble_weights: Option<Var>,
    pub cross_attention: Option<Var>,
    /// Named intermediate values for inspection.
    pub stages: Vec<(String, Var)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ChannelLayout,
    pub store: ParamStore,
    pub norm: Option<NormStats>,
    groups: Vec<GroupNet>,
    cross: Option<CrossChannelAttention>,
    head: Head,
}

impl Model {
    pub fn new(config: ModelConfig, layout: ChannelLayout, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if config.ensemble_mode && layout.groups.len() < 2 {
            return Err(ModelError::Config(format!(
                "ensemble_mode needs at least two modality groups, layout has {}",
                layout.groups.len()
            )));
        }
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut groups = Vec::new();
        let mut start = 0;
        for grp in &layout.groups {
            let gname = grp.modality.name().to_string();
            let names: &[&str] = if c.use_decomp { &["seasonal", "trend"] } else { &["series"] };
            let mut streams = Vec::new();
            for sname in names {
                let p = format!("{gname}.{sname}");
                let width = grp.channels.len();
                let stream = Stream {
                    embed: TokenEmbedding::new(&mut store, &format!("{p}.embed"), &mut rng, width, c.d_model),
                    encoder: Encoder::new(&mut store, &format!("{p}.encoder"), &mut rng, c.d_model, c.heads, c.encoder_layers, c.ffn_dim)
                        .stage(format!("{p}.encoder"))?,
                    mamba: c
                        .use_mamba
                        .then(|| MambaBlock::new(&mut store, &format!("{p}.mamba"), &mut rng, c.d_model, c.state_dim)),
                    msconv: c.use_msconv.then(|| {
                        MultiScaleConv::new(&mut store, &format!("{p}.msconv"), &mut rng, c.d_model, &c.kernels, &c.dilations)
                    }),
                    freq: if c.use_freq {
                        Some(
                            FrequencyBlock::new(&mut store, &format!("{p}.freq"), &mut rng, c.window, c.d_model, c.gain_bound, &c.freq_windows)
                                .stage(format!("{p}.freq"))?,
                        )
                    } else {
                        None
                    },
                    bilstm: if c.use_bilstm {
                        Some(BiLstm::new(&mut store, &format!("{p}.bilstm"), &mut rng, c.d_model).stage(format!("{p}.bilstm"))?)
                    } else {
                        None
                    },
                };
                streams.push((sname.to_string(), stream));
            }
            let gate = c
                .use_decomp
                .then(|| ComponentGate::new(&mut store, &format!("{gname}.component_gate"), &mut rng, c.d_model));
            groups.push(GroupNet {
                name: gname,
                start,
                width: grp.channels.len(),
                streams,
                gate,
            });
            start += grp.channels.len();
        }
        let cross = c
            .use_cross_attn
            .then(|| CrossChannelAttention::new(&mut store, "cross", &mut rng, c.d_model, c.cross_dim));
        let head = if c.ensemble_mode {
            let mut projs = Vec::new();
            let mut outs = Vec::new();
            for grp in &groups {
                projs.push(TemporalProjection::new(&mut store, &format!("{}.projection", grp.name), &mut rng, c.window, c.horizon));
                outs.push(UncertaintyHead::new(&mut store, &format!("{}.head", grp.name), &mut rng, c.d_model, c.estimate_uncertainty));
            }
            let gate = EnsembleGate::new(&mut store, "ensemble", &mut rng, c.d_model, groups.len(), c.ensemble_hidden);
            Head::Ensemble { projs, outs, gate }
        } else {
            Head::Single {
                proj: TemporalProjection::new(&mut store, "projection", &mut rng, c.window, c.horizon),
                out: UncertaintyHead::new(&mut store, "head", &mut rng, c.d_model, c.estimate_uncertainty),
            }
        };
        Ok(Self {
            config,
            layout,
            store,
            norm: None,
            groups,
            cross,
            head,
        })
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    fn run_stream(&self, g: &mut Graph, p: &Bound, s: &Stream, x: Var, name: &str) -> Result<Var, ModelError> {
        let mut h = s.embed.forward(g, p, x).stage(format!("{name}.embed"))?;
        h = s.encoder.forward(g, p, h).stage(format!("{name}.encoder"))?;
        if let Some(m) = &s.mamba {
            let z = m.forward(g, p, h).stage(format!("{name}.mamba"))?;
            h = g.add(h, z).stage(format!("{name}.mamba"))?;
        }
        if let Some(m) = &s.msconv {
            let z = m.forward(g, p, h).stage(format!("{name}.msconv"))?;
            h = g.add(h, z).stage(format!("{name}.msconv"))?;
        }
        if let Some(f) = &s.freq {
            let z = f.forward(g, p, h).stage(format!("{name}.freq"))?;
            h = g.add(h, z).stage(format!("{name}.freq"))?;
        }
        if let Some(b) = &s.bilstm {
            h = b.forward(g, p, h).stage(format!("{name}.bilstm"))?;
        }
        Ok(h)
    }

    /// Forward pass on normalized inputs `(B, L, D)` in layout order.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<ForwardOut, ModelError> {
        let c = &self.config;
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != c.window || s[2] != self.layout.width() {
            return Err(ModelError::Stage {
                stage: "input".into(),
                message: format!("expected (B, {}, {}), got {:?}", c.window, self.layout.width(), s),
            });
        }
        let b = s[0];
        let mut stages = Vec::new();
        let mut outs = Vec::new();
        for grp in &self.groups {
            let xg = g.slice(x, 2, grp.start, grp.width).stage(&grp.name)?;
            let inputs: Vec<Var> = if c.use_decomp {
                let (trend, seasonal) = decompose_var(g, xg, c.decomp_kernel).stage(format!("{}.decomp", grp.name))?;
                vec![seasonal, trend]
            } else {
                vec![xg]
            };
            let mut hs = Vec::new();
            for ((sname, stream), &xi) in grp.streams.iter().zip(&inputs) {
                let name = format!("{}.{sname}", grp.name);
                stages.push((format!("{name}.input"), xi));
                let h = self.run_stream(g, p, stream, xi, &name)?;
                stages.push((format!("{name}.output"), h));
                hs.push(h);
            }
            let fused = match &grp.gate {
                Some(gate) => gate.forward(g, p, hs[0], hs[1]).stage(format!("{}.component_gate", grp.name))?,
                None => hs[0],
            };
            stages.push((format!("{}.fused", grp.name), fused));
            outs.push(fused);
        }
        let m = outs.len();
        let mut cross_attention = None;
        if let Some(cross) = &self.cross {
            let cols: Vec<Var> = outs
                .iter()
                .map(|&o| g.reshape(o, &[b, c.window, 1, c.d_model]))
                .collect::<Result<_, _>>()
                .stage("cross")?;
            let stacked = g.concat(&cols, 2).stage("cross")?;
            let (mixed, alpha) = cross.forward(g, p, stacked).stage("cross")?;
            let o = g.add(stacked, mixed).stage("cross")?;
            cross_attention = Some(alpha);
            stages.push(("cross".into(), o));
            outs = (0..m)
                .map(|i| {
                    let col = g.slice(o, 2, i, 1)?;
                    g.reshape(col, &[b, c.window, c.d_model])
                })
                .collect::<Result<_, _>>()
                .stage("cross")?;
        }
        let (mean, std, ensemble_weights) = match &self.head {
            Head::Single { proj, out } => {
                let mut pooled = outs[0];
                for &o in &outs[1..] {
                    pooled = g.add(pooled, o).stage("pool")?;
                }
                if m > 1 {
                    pooled = g.scale(pooled, 1.0 / m as f64);
                }
                let z = proj.forward(g, p, pooled).stage("projection")?;
                stages.push(("projection".into(), z));
                let (mean, std) = out.forward(g, p, z).stage("head")?;
                (mean, std, None)
            }
            Head::Ensemble { projs, outs: heads, gate } => {
                let mut feats = Vec::new();
                let mut means = Vec::new();
                let mut stds = Vec::new();
                for ((proj, head), &o) in projs.iter().zip(heads).zip(&outs) {
                    let z = proj.forward(g, p, o).stage("projection")?;
                    let (mu, sd) = head.forward(g, p, z).stage("head")?;
                    feats.push(z);
                    means.push(mu);
                    stds.extend(sd);
                }
                let w = gate.weights(g, p, &feats).stage("ensemble")?;
                let mean = ensemble_combine(g, &means, w).stage("ensemble")?;
                let std = if stds.is_empty() {
                    None
                } else {
                    Some(mixture_std(g, &means, &stds, w, mean).stage("ensemble")?)
                };
                (mean, std, Some(w))
            }
        };
        Ok(ForwardOut {
            mean,
            std,
            ensemble_weights,
            cross_attention,
            stages,
        })
    }

    /// Composite objective on normalized targets `y (B, H)`.
    pub fn objective(&self, g: &mut Graph, p: &Bound, out: &ForwardOut, y: Var) -> Result<(Var, TermVars), ModelError> {
        let c = &self.config;
        let mut t = TermVars {
            point: Some(point_loss_var(g, c.loss, y, out.mean, c.huber_delta).stage("point loss")?),
            ..Default::default()
        };
        if let Some(sd) = out.std {
            t.nll = Some(nll_loss_var(g, y, out.mean, sd).stage("nll")?);
            t.sigma_mean = Some(g.mean(sd));
        }
        let mut spectral: Option<Var> = None;
        let mut stability: Option<Var> = None;
        for grp in &self.groups {
            for (_, s) in &grp.streams {
                if let Some(f) = &s.freq {
                    let r = f.regularizer_var(g, p, c.lambda_smooth, c.lambda_sparse).stage("spectral regularizer")?;
                    spectral = Some(match spectral {
                        Some(a) => g.add(a, r).stage("spectral regularizer")?,
                        None => r,
                    });
                }
                if let Some(m) = &s.mamba {
                    let r = m.stability_penalty_var(g, p).stage("stability penalty")?;
                    stability = Some(match stability {
                        Some(a) => g.add(a, r).stage("stability penalty")?,
                        None => r,
                    });
                }
            }
        }
        t.spectral = spectral;
        t.stability = stability;
        if let Some(w) = out.ensemble_weights {
            t.weights = Some(weight_regularizer_var(g, w, c.lambda_entropy, c.lambda_tv).stage("weight regularizer")?);
        }
        let total = crate::heads::composite_objective_var(g, &t, &c.loss_weights()).stage("objective")?;
        Ok((total, t))
    }

    /// Clips every spectral mask to the gain bound.
    pub fn project_constraints(&mut self) {
        for grp in &self.groups {
            for (_, s) in &grp.streams {
                if let Some(f) = &s.freq {
                    f.project(&mut self.store);
                }
            }
        }
    }

    /// Normalized `(mean, std)` per window, `B x H` row-major; evaluated in
    /// chunks so the tape stays small.
    pub fn predict_normalized(&self, inputs: &Tensor) -> Result<(Vec<f64>, Option<Vec<f64>>), ModelError> {
        const CHUNK: usize = 256;
        let s = inputs.shape().to_vec();
        let row = s[1] * s[2];
        let mut means = Vec::with_capacity(s[0] * self.config.horizon);
        let mut stds = self.config.estimate_uncertainty.then(Vec::new);
        let mut start = 0;
        while start < s[0] {
            let n = CHUNK.min(s[0] - start);
            let chunk = Tensor::new(vec![n, s[1], s[2]], inputs.data()[start * row..(start + n) * row].to_vec())
                .stage("input")?;
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            let x = g.constant(chunk);
            let out = self.forward(&mut g, &p, x)?;
            means.extend_from_slice(g.value(out.mean).data());
            if let (Some(acc), Some(sd)) = (stds.as_mut(), out.std) {
                acc.extend_from_slice(g.value(sd).data());
            }
            start += n;
        }
        Ok((means, stds))
    }

    /// Forecasts in data units; requires fitted normalization stats.
    pub fn forecast(&self, inputs: &Tensor) -> Result<Vec<ForecastResult>, ModelError> {
        let norm = self
            .norm
            .as_ref()
            .ok_or_else(|| ModelError::Checkpoint("model has no normalization stats".into()))?;
        let ti = norm
            .index_of(&self.layout.target)
            .ok_or_else(|| ModelError::Layout(format!("no stats for target `{}`", self.layout.target)))?;
        let (means, stds) = self.predict_normalized(inputs)?;
        let h = self.config.horizon;
        Ok((0..means.len() / h)
            .map(|w| ForecastResult {
                window_id: w,
                mean: means[w * h..(w + 1) * h].iter().map(|&v| norm.denorm_value(ti, v)).collect(),
                std: stds
                    .as_ref()
                    .map(|s| s[w * h..(w + 1) * h].iter().map(|&v| norm.denorm_std(ti, v)).collect())
                    .unwrap_or_default(),
            })
            .collect())
    }

    /// [`Model::forecast`] on inputs `(B, L, D)` in data units, layout order.
    pub fn forecast_raw(&self, inputs: &Tensor) -> Result<Vec<ForecastResult>, ModelError> {
        let norm = self
            .norm
            .as_ref()
            .ok_or_else(|| ModelError::Checkpoint("model has no normalization stats".into()))?;
        let s = inputs.shape();
        if s.len() != 3 || s[1] != self.config.window || s[2] != self.layout.width() {
            return Err(ModelError::Stage {
                stage: "input".into(),
                message: format!("expected (B, {}, {}), got {:?}", self.config.window, self.layout.width(), s),
            });
        }
        let columns = self
            .layout
            .input_names()
            .into_iter()
            .map(|n| norm.index_of(n).ok_or_else(|| ModelError::Layout(format!("no stats for channel `{n}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        self.forecast(&norm.apply(inputs, &columns))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            layout: self.layout.clone(),
            norm: self.norm.clone(),
            params: self
                .store
                .iter()
                .map(|(name, t)| ParamRecord {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, ModelError> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unsupported format `{}`", ck.format)));
        }
        let mut model = Model::new(ck.config, ck.layout, 0)?;
        if ck.params.len() != model.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                ck.params.len()
            )));
        }
        for rec in ck.params {
            let id = model
                .store
                .id(&rec.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter `{}`", rec.name)))?;
            if model.store.get(id).shape() != rec.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    rec.name,
                    rec.shape,
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) =
                Tensor::new(rec.shape, rec.values).map_err(|e| ModelError::Checkpoint(format!("`{}`: {e}", rec.name)))?;
        }
        model.norm = ck.norm;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_checkpoint(serde_json::from_reader(f)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub layout: ChannelLayout,
    pub norm: Option<NormStats>,
    pub params: Vec<ParamRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{synth_generate, Channel, SynthSpec, Timestamp};

    fn small() -> ModelConfig {
        ModelConfig {
            window: 12,
            horizon: 2,
            d_model: 8,
            ffn_dim: 8,
            decomp_kernel: 5,
            state_dim: 4,
            cross_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn frame() -> TimeSeriesFrame {
        synth_generate(&SynthSpec::benchmark(120, 3)).unwrap()
    }

    fn batch(f: &TimeSeriesFrame, layout: &ChannelLayout, cfg: &ModelConfig, n: usize) -> Tensor {
        let idx = layout.input_indices(f).unwrap();
        let w = crate::preprocess::make_windows(f, &idx, cfg.window, cfg.horizon, 1).unwrap();
        w.select(&(0..n).collect::<Vec<_>>()).inputs
    }

    fn run(model: &Model, x: &Tensor) -> (Tensor, Option<Tensor>) {
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let out = model.forward(&mut g, &p, xv).unwrap();
        (g.value(out.mean).clone(), out.std.map(|s| g.value(s).clone()))
    }

    #[test]
    fn layout_groups_by_modality() {
        let f = frame();
        let l = ChannelLayout::from_frame(&f, &Modality::ALL).unwrap();
        assert_eq!(l.groups.len(), 3);
        assert_eq!(l.input_names(), vec!["ili", "search", "temperature"]);
        let only = ChannelLayout::from_frame(&f, &[Modality::Trends]).unwrap();
        assert_eq!(only.input_names(), vec!["search"]);
        let bare = TimeSeriesFrame::new(
            (0..4).map(Timestamp::Index).collect(),
            vec![Channel {
                name: "y".into(),
                modality: Modality::Surveillance,
                values: vec![1.0; 4],
            }],
            "y",
        )
        .unwrap();
        assert!(ChannelLayout::from_frame(&bare, &[Modality::Weather]).is_err());
        assert!(l.input_indices(&bare).is_err());
    }

    #[test]
    fn full_and_minimal_forward_shapes() {
        let f = frame();
        let cfg = small();
        let layout = ChannelLayout::from_frame(&f, &cfg.modalities).unwrap();
        let x = batch(&f, &layout, &cfg, 5);
        for name in ["full", "Minimal Model", "only Mamba", "w/o Decomposition"] {
            let c = ablation_variant(&cfg, name).unwrap();
            let m = Model::new(c, layout.clone(), 1).unwrap();
            let (mean, std) = run(&m, &x);
            assert_eq!(mean.shape(), &[5, 2], "{name}");
            assert!(mean.is_finite());
            assert!(std.unwrap().data().iter().all(|&s| s > 0.0));
        }
        let plain = Model::new(ModelConfig { estimate_uncertainty: false, ..cfg.clone() }, layout.clone(), 1).unwrap();
        assert!(run(&plain, &x).1.is_none());
        let ens = Model::new(ModelConfig { ensemble_mode: true, ..cfg }, layout, 1).unwrap();
        let (mean, std) = run(&ens, &x);
        assert_eq!(mean.shape(), &[5, 2]);
        assert!(std.unwrap().data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn constant_input_has_zero_seasonal_stream() {
        let f = frame();
        let cfg = small();
        let layout = ChannelLayout::from_frame(&f, &cfg.modalities).unwrap();
        let m = Model::new(cfg.clone(), layout, 2).unwrap();
        let x = Tensor::full(&[2, cfg.window, 3], 0.7);
        let mut g = Graph::new();
        let p = m.store.bind_frozen(&mut g);
        let xv = g.constant(x);
        let out = m.forward(&mut g, &p, xv).unwrap();
        let seasonal: Vec<Var> = out.stages.iter().filter(|(n, _)| n.ends_with(".seasonal.input")).map(|s| s.1).collect();
        assert_eq!(seasonal.len(), 3);
        for v in seasonal {
            assert!(g.value(v).data().iter().all(|&s| s.abs() < 1e-15));
        }
    }

    #[test]
    fn deterministic_construction_and_forward() {
        let f = frame();
        let cfg = small();
        let layout = ChannelLayout::from_frame(&f, &cfg.modalities).unwrap();
        let x = batch(&f, &layout, &cfg, 4);
        let a = Model::new(cfg.clone(), layout.clone(), 9).unwrap();
        let b = Model::new(cfg, layout, 9).unwrap();
        let (ma, sa) = run(&a, &x);
        let (mb, sb) = run(&b, &x);
        assert_eq!(ma.data(), mb.data());
        assert_eq!(sa.unwrap().data(), sb.unwrap().data());
    }

    #[test]
    fn variant_flags() {
        let base = ModelConfig::default();
        let wo = ablation_variant(&base, "w/o Mamba").unwrap();
        assert!(!wo.use_mamba);
        assert_eq!(ModelConfig { use_mamba: true, ..wo }, base);
        let min = ablation_variant(&base, "Minimal Model").unwrap();
        assert!(!(min.use_decomp || min.use_mamba || min.use_msconv || min.use_freq || min.use_bilstm || min.use_cross_attn));
        let only = ablation_variant(&base, "only Frequency Domain").unwrap();
        assert!(only.use_freq && !only.use_mamba && !only.use_decomp);
        assert_eq!(ablation_variant(&base, "single_modal_flu").unwrap().modalities, vec![Modality::Surveillance]);
        assert_eq!(
            ablation_variant(&base, "modality_trends_weather").unwrap().modalities,
            vec![Modality::Trends, Modality::Weather]
        );
        assert_eq!(canonical_variant("w_o_multi_scale"), Some("w/o Multi-scale"));
        assert!(matches!(ablation_variant(&base, "w/o Everything"), Err(ModelError::UnknownVariant(_))));
        for v in ABLATION_VARIANTS {
            ablation_variant(&base, v).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn parameter_counts_shrink_with_stages() {
        let f = frame();
        let cfg = small();
        let layout = ChannelLayout::from_frame(&f, &cfg.modalities).unwrap();
        let full = Model::new(cfg.clone(), layout.clone(), 0).unwrap().count_params();
        for v in &ABLATION_VARIANTS[1..11] {
            let n = Model::new(ablation_variant(&cfg, v).unwrap(), layout.clone(), 0).unwrap().count_params();
            assert!(n < full, "{v}: {n} vs {full}");
        }
        let direct: usize = Model::new(cfg, layout, 0).unwrap().store.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(direct, full);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = [
            ModelConfig { d_model: 15, ..ModelConfig::default() },
            ModelConfig { decomp_kernel: 4, ..ModelConfig::default() },
            ModelConfig { decomp_kernel: 31, ..ModelConfig::default() },
            ModelConfig { ensemble_mode: true, modalities: vec![Modality::Weather], ..ModelConfig::default() },
            ModelConfig { lambda_nll: -1.0, ..ModelConfig::default() },
            ModelConfig { modalities: vec![], ..ModelConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(ModelError::Config(_))), "{c:?}");
        }
        let json = serde_json::to_value(ModelConfig::default()).unwrap();
        let back: ModelConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, ModelConfig::default());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"windwo": 3}"#).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = frame();
        let cfg = small();
        let layout = ChannelLayout::from_frame(&f, &cfg.modalities).unwrap();
        let mut m = Model::new(cfg.clone(), layout.clone(), 5).unwrap();
        m.norm = Some(crate::preprocess::fit_norm(&f));
        let text = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back = Model::from_checkpoint(serde_json::from_str(&text).unwrap()).unwrap();
        let x = batch(&f, &layout, &cfg, 3);
        assert_eq!(run(&m, &x).0.data(), run(&back, &x).0.data());
        assert_eq!(m.forecast(&x).unwrap(), back.forecast(&x).unwrap());
        let mut ck = m.to_checkpoint();
        ck.params[0].shape = vec![1];
        assert!(Model::from_checkpoint(ck).is_err());
    }
}
