//! The four-branch model and its softmax-weighted fusion.
//!
//! Each branch is a flat list of [`Layer`]s so that the same description
//! drives the forward pass and the per-stage Lipschitz accounting.
//!
//! | branch | pipeline |
//! |---|---|
//! | global_feature | band extraction → patch tokens → linear + ReLU → attention (residual) → token mean → LGCN → head |
//! | channel_energy | band energies → ln(1+·) → LGCN → MLP → head |
//! | channel_mixer | channel tokens → linear + ReLU → attention (residual) → LGCN → head |
//! | band_magnitude | in-band magnitudes → channel mean → ln(1+·) → LGCN → MLP → head |

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_last_inplace, Graph, StatAxis, Var};
use crate::config::KvConfig;
use crate::data::{BandName, BandSpec, DEFAULT_BANDS};
use crate::error::{LelError, Result};
use crate::lgca::{Lgca, Mode};
use crate::lgcbe::Lgcbe;
use crate::lgcn::Lgcn;
use crate::params::{Constraint, Linear, ParamId, ParamStore};
use crate::verification::Stage;

/// The four Lipschitz constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzBudget {
    pub l_s: f64,
    pub l_att: f64,
    pub l_affine: f64,
    pub l_linear: f64,
}

impl Default for LipschitzBudget {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LipschitzBudget {
    pub fn uniform(k: f64) -> Self {
        Self {
            l_s: k,
            l_att: k,
            l_affine: k,
            l_linear: k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l_s", self.l_s),
            ("l_att", self.l_att),
            ("l_affine", self.l_affine),
            ("l_linear", self.l_linear),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LelError::ParameterDomain(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BranchId {
    GlobalFeature,
    ChannelEnergy,
    ChannelMixer,
    BandMagnitude,
}

impl BranchId {
    pub const ALL: [BranchId; 4] = [
        BranchId::GlobalFeature,
        BranchId::ChannelEnergy,
        BranchId::ChannelMixer,
        BranchId::BandMagnitude,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BranchId::GlobalFeature => "global_feature",
            BranchId::ChannelEnergy => "channel_energy",
            BranchId::ChannelMixer => "channel_mixer",
            BranchId::BandMagnitude => "band_magnitude",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BranchId {
    type Err = LelError;

    fn from_str(s: &str) -> Result<Self> {
        BranchId::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| LelError::Contract(format!("unknown branch id {s:?}")))
    }
}

/// Posteriors of one branch.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub branch_id: BranchId,
    /// `[B × K]`
    pub probs: Array2<f64>,
}

/// Architecture and budget of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub n_samples: usize,
    pub n_classes: usize,
    pub sampling_rate: f64,
    pub bands: Vec<BandSpec>,
    pub budget: LipschitzBudget,
    /// Samples per time token of the global branch; 0 picks the largest
    /// divisor of `n_samples` not above 32.
    pub patch_len: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub stats: StatAxis,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(n_channels: usize, n_samples: usize, n_classes: usize, sampling_rate: f64) -> Self {
        Self {
            n_channels,
            n_samples,
            n_classes,
            sampling_rate,
            bands: DEFAULT_BANDS.to_vec(),
            budget: LipschitzBudget::default(),
            patch_len: 0,
            embed_dim: 32,
            heads: 4,
            hidden: 64,
            dropout: 0.3,
            stats: StatAxis::Last,
            seed: 0,
        }
    }

    pub fn effective_patch_len(&self) -> usize {
        if self.patch_len > 0 {
            return self.patch_len;
        }
        (1..=self.n_samples.min(32))
            .rev()
            .find(|&p| self.n_samples.is_multiple_of(p))
            .unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if self.n_channels == 0 || self.n_samples < 2 || self.n_classes < 2 {
            return Err(LelError::InvalidSpec(format!(
                "need C >= 1, T >= 2 and K >= 2; got C={}, T={}, K={}",
                self.n_channels, self.n_samples, self.n_classes
            )));
        }
        if !self.n_samples.is_multiple_of(self.effective_patch_len()) {
            return Err(LelError::InvalidSpec(format!(
                "patch_len {} does not divide n_samples {}",
                self.patch_len, self.n_samples
            )));
        }
        if self.hidden == 0 || self.hidden > 128 || self.embed_dim == 0 || self.embed_dim > 128 {
            return Err(LelError::InvalidSpec("hidden and embed_dim must lie in 1..=128".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let bands: Vec<String> = self
            .bands
            .iter()
            .map(|b| format!("{}:{}-{}", b.name, b.low, b.high))
            .collect();
        vec![
            ("n_channels", self.n_channels.to_string()),
            ("n_samples", self.n_samples.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("sampling_rate", self.sampling_rate.to_string()),
            ("bands", bands.join(",")),
            ("l_s", self.budget.l_s.to_string()),
            ("l_att", self.budget.l_att.to_string()),
            ("l_affine", self.budget.l_affine.to_string()),
            ("l_linear", self.budget.l_linear.to_string()),
            ("patch_len", self.patch_len.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("hidden", self.hidden.to_string()),
            ("dropout", self.dropout.to_string()),
            ("lgcn_stats", stat_axis_name(self.stats).to_string()),
            ("model_seed", self.seed.to_string()),
        ]
    }

    /// Reads the architecture keys written by [`ModelConfig::to_pairs`]
    /// (the shape keys are required, the rest default).
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let need = |v: Option<usize>, k: &str| v.ok_or_else(|| LelError::Config(format!("missing `{k}`")));
        let c = need(kv.take("n_channels")?, "n_channels")?;
        let t = need(kv.take("n_samples")?, "n_samples")?;
        let k = need(kv.take("n_classes")?, "n_classes")?;
        let fs = kv
            .take("sampling_rate")?
            .ok_or_else(|| LelError::Config("missing `sampling_rate`".into()))?;
        let mut cfg = Self::new(c, t, k, fs);
        cfg.apply_kv(kv)?;
        Ok(cfg)
    }

    /// Applies optional architecture and budget overrides.
    pub fn apply_kv(&mut self, kv: &mut KvConfig) -> Result<()> {
        if let Some(b) = kv.take::<String>("bands")? {
            self.bands = parse_bands(&b)?;
        }
        if let Some(k) = kv.take::<f64>("lip_k")? {
            self.budget = LipschitzBudget::uniform(k);
        }
        kv.take_into("l_s", &mut self.budget.l_s)?;
        kv.take_into("l_att", &mut self.budget.l_att)?;
        kv.take_into("l_affine", &mut self.budget.l_affine)?;
        kv.take_into("l_linear", &mut self.budget.l_linear)?;
        kv.take_into("patch_len", &mut self.patch_len)?;
        kv.take_into("embed_dim", &mut self.embed_dim)?;
        kv.take_into("heads", &mut self.heads)?;
        kv.take_into("hidden", &mut self.hidden)?;
        kv.take_into("dropout", &mut self.dropout)?;
        kv.take_into("model_seed", &mut self.seed)?;
        if let Some(s) = kv.take::<String>("lgcn_stats")? {
            self.stats = parse_stat_axis(&s)?;
        }
        Ok(())
    }
}

pub fn stat_axis_name(s: StatAxis) -> &'static str {
    match s {
        StatAxis::Last => "sample",
        StatAxis::First => "batch",
    }
}

pub fn parse_stat_axis(s: &str) -> Result<StatAxis> {
    match s {
        "sample" => Ok(StatAxis::Last),
        "batch" => Ok(StatAxis::First),
        _ => Err(LelError::Config(format!(
            "lgcn_stats must be `sample` or `batch`, got {s:?}"
        ))),
    }
}

/// `name:low-high,…` with names from delta/theta/alpha/beta/gamma.
pub fn parse_bands(s: &str) -> Result<Vec<BandSpec>> {
    s.split(',')
        .map(|item| {
            let bad = || LelError::Config(format!("band {item:?} is not `name:low-high`"));
            let (name, range) = item.trim().split_once(':').ok_or_else(bad)?;
            let (lo, hi) = range.split_once('-').ok_or_else(bad)?;
            let name = match name.trim() {
                "delta" => BandName::Delta,
                "theta" => BandName::Theta,
                "alpha" => BandName::Alpha,
                "beta" => BandName::Beta,
                "gamma" => BandName::Gamma,
                _ => return Err(bad()),
            };
            Ok(BandSpec::new(
                name,
                lo.trim().parse().map_err(|_| bad())?,
                hi.trim().parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

/// One step of a branch pipeline.
#[derive(Debug, Clone)]
pub enum Layer {
    BandExtract(Lgcbe),
    /// `[B, C, T]` → `[B, T/P, C·P]`.
    Patchify {
        channels: usize,
        patch: usize,
        tokens: usize,
    },
    Linear(Linear),
    Relu,
    /// `x + attention(x)` on `[B, N, D]`.
    AttentionResidual(Lgca),
    /// Mean over axis 1 of a rank-3 tensor with `n` entries on that axis.
    MeanAxis1 {
        n: usize,
    },
    /// Collapse all but the batch axis.
    Flatten,
    Normalize(Lgcn),
    Affine(Lgcn),
    Softmax,
    /// Band energies `[B, C, |bands|]` of the raw input.
    BandEnergy {
        bins: Vec<(usize, usize)>,
    },
    /// Magnitudes of the selected half-spectrum bins, `[B, C, n]`.
    BinMagnitude {
        bins: Vec<usize>,
    },
    /// `log1p(max(x, 0))`; equals `log1p` on the nonnegative features it
    /// receives and is 1-Lipschitz on all of ℝ.
    Log1p,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::BandExtract(_) => "band_extract",
            Layer::Patchify { .. } => "patchify",
            Layer::Linear(_) => "linear",
            Layer::Relu => "relu",
            Layer::AttentionResidual(_) => "attention_residual",
            Layer::MeanAxis1 { .. } => "mean_pool",
            Layer::Flatten => "flatten",
            Layer::Normalize(_) => "lgcn_normalize",
            Layer::Affine(_) => "lgcn_affine",
            Layer::Softmax => "softmax",
            Layer::BandEnergy { .. } => "band_energy",
            Layer::BinMagnitude { .. } => "bin_magnitude",
            Layer::Log1p => "log1p",
        }
    }

    /// Declared ℓ2 Lipschitz constant, or `None` for stages that are
    /// measured instead.
    pub fn declared(&self, budget: &LipschitzBudget, store: &ParamStore) -> Option<f64> {
        match self {
            Layer::Linear(l) => match store.get(l.weight).constraint {
                Constraint::SpectralNorm(b) => Some(b),
                _ => None,
            },
            Layer::Patchify { .. } | Layer::Relu | Layer::Flatten | Layer::Softmax | Layer::Log1p => Some(1.0),
            Layer::MeanAxis1 { n } => Some(1.0 / (*n as f64).sqrt()),
            Layer::Affine(_) => Some(budget.l_affine),
            Layer::BandExtract(_)
            | Layer::AttentionResidual(_)
            | Layer::Normalize(_)
            | Layer::BandEnergy { .. }
            | Layer::BinMagnitude { .. } => None,
        }
    }

    /// Returns the output and, for attention layers, the attention map.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode<'_>) -> Result<(Var, Option<Var>)> {
        let out = match self {
            Layer::BandExtract(m) => m.forward_graph(g, store, x)?.out,
            Layer::Patchify {
                channels,
                patch,
                tokens,
            } => {
                let b = g.shape(x)[0];
                let y = g.reshape(x, &[b, *channels, *tokens, *patch]);
                let y = g.permute(y, &[0, 2, 1, 3]);
                g.reshape(y, &[b, *tokens, channels * patch])
            }
            Layer::Linear(l) => l.forward(g, store, x),
            Layer::Relu => g.relu(x),
            Layer::AttentionResidual(a) => {
                let vars = a.forward_graph(g, store, x, mode)?;
                let y = g.add(x, vars.out);
                return Ok((y, Some(vars.attention)));
            }
            Layer::MeanAxis1 { .. } => g.mean_axis(x, 1),
            Layer::Flatten => {
                let s = g.shape(x).to_vec();
                let rest: usize = s[1..].iter().product();
                g.reshape(x, &[s[0], rest])
            }
            Layer::Normalize(n) => n.normalize_graph(g, x),
            Layer::Affine(n) => n.affine_graph(g, store, x)?,
            Layer::Softmax => g.softmax(x),
            Layer::BandEnergy { bins } => {
                let spec = g.rfft(x);
                g.band_energy(spec, bins.clone())
            }
            Layer::BinMagnitude { bins } => {
                let spec = g.rfft(x);
                g.bin_magnitude(spec, bins.clone())
            }
            Layer::Log1p => {
                let pos = g.relu(x);
                g.log1p(pos)
            }
        };
        Ok((out, None))
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub id: BranchId,
    pub layers: Vec<Layer>,
}

impl Branch {
    /// The final linear layer.
    pub fn head(&self) -> Linear {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Linear(l) => Some(*l),
                _ => None,
            })
            .expect("every branch ends in a linear head")
    }

    pub fn lgcn(&self) -> Option<Lgcn> {
        self.layers.iter().find_map(|l| match l {
            Layer::Affine(n) => Some(*n),
            _ => None,
        })
    }

    /// Runs layers `[from, to)`.
    pub fn forward_range(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        range: std::ops::Range<usize>,
        mut mode: Mode<'_>,
    ) -> Result<(Var, Option<Var>)> {
        let mut h = x;
        let mut attention = None;
        for layer in &self.layers[range] {
            let (y, a) = layer.apply(g, store, h, mode.reborrow())?;
            h = y;
            attention = attention.or(a);
        }
        Ok((h, attention))
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode<'_>,
    ) -> Result<(Var, Option<Var>)> {
        self.forward_range(g, store, x, 0..self.layers.len(), mode)
    }
}

/// Graph handles of one model forward pass.
pub struct ModelVars {
    /// Branch posteriors in [`BranchId::ALL`] order.
    pub branches: Vec<Var>,
    pub fused: Var,
    pub weights: Var,
    /// Channel-token attention of the mixer branch, `[B·H × C × C]`.
    pub mixer_attention: Var,
}

/// Eval-mode outputs on plain arrays.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub branches: Vec<Array2<f64>>,
    pub fused: Array2<f64>,
    pub mixer_attention: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub branches: Vec<Branch>,
    /// Fusion logits `α`, `[4]`.
    pub alpha: ParamId,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (c, t, k) = (config.n_channels, config.n_samples, config.n_classes);
        let b = config.budget;
        let bound = Some(b.l_linear);
        let e = config.embed_dim;
        let h = config.hidden;

        let lgcbe = Lgcbe::new(
            &mut store,
            "global_feature.lgcbe",
            &config.bands,
            c,
            t,
            config.sampling_rate,
            b.l_s,
            b.l_linear,
            &mut rng,
        )?;
        let bins = lgcbe.bins.clone();
        let p = config.effective_patch_len();
        let n_tok = t / p;
        let global = Branch {
            id: BranchId::GlobalFeature,
            layers: vec![
                Layer::BandExtract(lgcbe),
                Layer::Patchify {
                    channels: c,
                    patch: p,
                    tokens: n_tok,
                },
                Layer::Linear(Linear::new(
                    &mut store,
                    "global_feature.embed",
                    c * p,
                    e,
                    bound,
                    &mut rng,
                )),
                Layer::Relu,
                Layer::AttentionResidual(Lgca::new(
                    &mut store,
                    "global_feature.attn",
                    e,
                    config.heads,
                    b.l_att,
                    b.l_linear,
                    config.dropout,
                    &mut rng,
                )?),
                Layer::MeanAxis1 { n: n_tok },
            ]
            .into_iter()
            .chain(norm_head(&mut store, "global_feature", e, None, k, &config, &mut rng)?)
            .collect(),
        };

        let nb = bins.len();
        let energy = Branch {
            id: BranchId::ChannelEnergy,
            layers: vec![Layer::BandEnergy { bins: bins.clone() }, Layer::Log1p, Layer::Flatten]
                .into_iter()
                .chain(norm_head(
                    &mut store,
                    "channel_energy",
                    c * nb,
                    Some(h),
                    k,
                    &config,
                    &mut rng,
                )?)
                .collect(),
        };

        let mixer = Branch {
            id: BranchId::ChannelMixer,
            layers: vec![
                Layer::Linear(Linear::new(&mut store, "channel_mixer.embed", t, e, bound, &mut rng)),
                Layer::Relu,
                Layer::AttentionResidual(Lgca::new(
                    &mut store,
                    "channel_mixer.attn",
                    e,
                    config.heads,
                    b.l_att,
                    b.l_linear,
                    config.dropout,
                    &mut rng,
                )?),
                Layer::Flatten,
            ]
            .into_iter()
            .chain(norm_head(
                &mut store,
                "channel_mixer",
                c * e,
                None,
                k,
                &config,
                &mut rng,
            )?)
            .collect(),
        };

        let sel: Vec<usize> = bins.iter().flat_map(|&(lo, hi)| lo..hi).collect();
        let n_sel = sel.len();
        let magnitude = Branch {
            id: BranchId::BandMagnitude,
            layers: vec![
                Layer::BinMagnitude { bins: sel },
                Layer::MeanAxis1 { n: c },
                Layer::Log1p,
            ]
            .into_iter()
            .chain(norm_head(
                &mut store,
                "band_magnitude",
                n_sel,
                Some(h),
                k,
                &config,
                &mut rng,
            )?)
            .collect(),
        };

        let alpha = store.add("fusion.alpha", ArrayD::zeros(IxDyn(&[4])), Constraint::None);
        // start inside the feasible set
        crate::spectral::project_store(
            &mut store,
            None,
            crate::spectral::TRAIN_POWER_ITERS,
            crate::spectral::TRAIN_POWER_TOL,
        )?;
        Ok(Self {
            config,
            store,
            branches: vec![global, energy, mixer, magnitude],
            alpha,
        })
    }

    pub fn branch(&self, id: BranchId) -> &Branch {
        &self.branches[id.index()]
    }

    pub fn lgcns(&self) -> Vec<Lgcn> {
        self.branches.iter().filter_map(|b| b.lgcn()).collect()
    }

    /// Resets any zero-norm LGCN gain to ones; returns the names reset.
    pub fn sanitize(&mut self) -> Vec<String> {
        let mut reset = Vec::new();
        for n in self.lgcns() {
            if n.sanitize(&mut self.store) {
                reset.push(self.store.get(n.gamma).name.clone());
            }
        }
        reset
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.config.n_channels || shape[2] != self.config.n_samples {
            return Err(LelError::Contract(format!(
                "model expects [B, {}, {}] input, got {shape:?}",
                self.config.n_channels, self.config.n_samples
            )));
        }
        if shape[0] == 0 {
            return Err(LelError::Contract("empty batch".into()));
        }
        Ok(())
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var, mut mode: Mode<'_>) -> Result<ModelVars> {
        self.check_input_shape(g.shape(x))?;
        let mut outs = Vec::with_capacity(4);
        let mut mixer_attention = None;
        for br in &self.branches {
            let (p, a) = br.forward_graph(g, &self.store, x, mode.reborrow())?;
            if br.id == BranchId::ChannelMixer {
                mixer_attention = a;
            }
            outs.push(p);
        }
        let (fused, weights) = self.fuse_graph(g, &outs)?;
        Ok(ModelVars {
            branches: outs,
            fused,
            weights,
            mixer_attention: mixer_attention.expect("mixer branch has attention"),
        })
    }

    /// `Σ softmax(α)_i · stop_gradient(p̂_i)`.
    pub fn fuse_graph(&self, g: &mut Graph, branch_probs: &[Var]) -> Result<(Var, Var)> {
        let arrays: Vec<Array2<f64>> = branch_probs
            .iter()
            .map(|&v| g.value(v).clone().into_dimensionality().unwrap())
            .collect();
        check_simplex(&arrays)?;
        let (b, k) = arrays[0].dim();
        let mut stacked = ArrayD::zeros(IxDyn(&[4, b * k]));
        for (i, a) in arrays.iter().enumerate() {
            stacked
                .index_axis_mut(Axis(0), i)
                .assign(&ndarray::ArrayView1::from(a.as_slice().unwrap()));
        }
        let p = g.constant(stacked);
        let alpha = g.param(&self.store, self.alpha);
        let w = g.softmax(alpha);
        let w_row = g.reshape(w, &[1, 4]);
        let fused = g.matmul(w_row, p);
        let fused = g.reshape(fused, &[b, k]);
        Ok((fused, w))
    }

    /// Eval-mode prediction on a `[B × C × T]` batch.
    pub fn predict(&self, x: &Array3<f64>) -> Result<Prediction> {
        self.check_input_shape(x.shape())?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone().into_dyn());
        let vars = self.forward_graph(&mut g, xv, Mode::Eval)?;
        let to2 = |v: Var| -> Array2<f64> { g.value(v).clone().into_dimensionality().unwrap() };
        Ok(Prediction {
            branches: vars.branches.iter().map(|&v| to2(v)).collect(),
            fused: to2(vars.fused),
            mixer_attention: g.value(vars.mixer_attention).clone().into_dimensionality().unwrap(),
        })
    }

    /// [`Model::predict`] in chunks of at most `chunk` windows.
    pub fn predict_chunked(&self, x: &Array3<f64>, chunk: usize) -> Result<Prediction> {
        let n = x.dim().0;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            parts.push(self.predict(&x.slice(ndarray::s![start..end, .., ..]).to_owned())?);
            start = end;
        }
        let cat2 = |f: &dyn Fn(&Prediction) -> ndarray::ArrayView2<f64>| -> Array2<f64> {
            let views: Vec<_> = parts.iter().map(f).collect();
            ndarray::concatenate(Axis(0), &views).unwrap()
        };
        let branches = (0..4).map(|i| cat2(&|p: &Prediction| p.branches[i].view())).collect();
        let fused = cat2(&|p: &Prediction| p.fused.view());
        let att: Vec<_> = parts.iter().map(|p| p.mixer_attention.view()).collect();
        Ok(Prediction {
            branches,
            fused,
            mixer_attention: ndarray::concatenate(Axis(0), &att).unwrap(),
        })
    }

    pub fn branch_forward(&self, id: BranchId, x: &Array3<f64>) -> Result<BranchOutput> {
        self.check_input_shape(x.shape())?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone().into_dyn());
        let (p, _) = self.branch(id).forward_graph(&mut g, &self.store, xv, Mode::Eval)?;
        Ok(BranchOutput {
            branch_id: id,
            probs: g.value(p).clone().into_dimensionality().unwrap(),
        })
    }

    pub fn fusion_weights(&self) -> Vec<f64> {
        fusion_weights(self.store.value(self.alpha).as_slice().unwrap())
    }

    /// One verification stage per layer of `id`, each evaluated in eval mode.
    pub fn stages(&self, id: BranchId) -> Vec<Stage<'_>> {
        let br = self.branch(id);
        br.layers
            .iter()
            .map(|layer| {
                let store = &self.store;
                Stage {
                    name: format!("{}.{}", id, layer.name()),
                    declared: layer.declared(&self.config.budget, store),
                    apply: Box::new(move |x: &ArrayD<f64>| {
                        let mut g = Graph::new();
                        let v = g.constant(x.clone());
                        let (y, _) = layer.apply(&mut g, store, v, Mode::Eval)?;
                        Ok(g.value(y).clone())
                    }),
                }
            })
            .collect()
    }

    /// Parameters carrying a spectral-norm annotation.
    pub fn constrained_weights(&self) -> Vec<(ParamId, f64)> {
        self.store
            .iter()
            .filter_map(|(id, p)| match p.constraint {
                Constraint::SpectralNorm(b) => Some((id, b)),
                _ => None,
            })
            .collect()
    }

    /// Zeroes every head (last linear layer) of every branch.
    pub fn zero_heads(&mut self) {
        for br in &self.branches {
            let h = br.head();
            self.store.value_mut(h.weight).fill(0.0);
            self.store.value_mut(h.bias).fill(0.0);
        }
    }
}

/// LGCN, optional hidden layer with ReLU, linear head, softmax.
fn norm_head(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    hidden: Option<usize>,
    k: usize,
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Layer>> {
    let bound = Some(config.budget.l_linear);
    let norm = Lgcn::new(store, &format!("{name}.norm"), d, config.budget.l_affine, config.stats)?;
    let mut layers = vec![Layer::Normalize(norm), Layer::Affine(norm)];
    let mut width = d;
    if let Some(h) = hidden {
        layers.push(Layer::Linear(Linear::new(
            store,
            &format!("{name}.fc"),
            d,
            h,
            bound,
            rng,
        )));
        layers.push(Layer::Relu);
        width = h;
    }
    layers.push(Layer::Linear(Linear::new(
        store,
        &format!("{name}.head"),
        width,
        k,
        bound,
        rng,
    )));
    layers.push(Layer::Softmax);
    Ok(layers)
}

/// `softmax(α)`.
pub fn fusion_weights(alpha: &[f64]) -> Vec<f64> {
    let mut a = ArrayD::from_shape_vec(IxDyn(&[alpha.len()]), alpha.to_vec()).unwrap();
    softmax_last_inplace(&mut a);
    a.into_raw_vec_and_offset().0
}

fn check_simplex(probs: &[Array2<f64>]) -> Result<()> {
    if probs.len() != 4 {
        return Err(LelError::Contract(format!(
            "fusion needs 4 branch outputs, got {}",
            probs.len()
        )));
    }
    let dim = probs[0].dim();
    for (i, p) in probs.iter().enumerate() {
        let name = BranchId::ALL[i];
        if p.dim() != dim {
            return Err(LelError::Contract(format!(
                "branch {name} has shape {:?}, expected {dim:?}",
                p.dim()
            )));
        }
        for (r, row) in p.rows().into_iter().enumerate() {
            let s = row.sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(LelError::Contract(format!(
                    "branch {name} row {r} is not on the simplex (sum {s})"
                )));
            }
        }
    }
    Ok(())
}

/// `Σ softmax(α)_i · p̂_i` for four `[B × K]` posteriors.
pub fn fuse(alpha: &[f64], probs: &[Array2<f64>]) -> Result<Array2<f64>> {
    if alpha.len() != 4 || alpha.iter().any(|a| !a.is_finite()) {
        return Err(LelError::Contract(format!(
            "α must hold 4 finite logits, got {alpha:?}"
        )));
    }
    check_simplex(probs)?;
    let w = fusion_weights(alpha);
    let mut out = Array2::zeros(probs[0].dim());
    for (wi, p) in w.iter().zip(probs) {
        out.scaled_add(*wi, p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model {
        let mut cfg = ModelConfig::new(3, 64, 4, 128.0);
        cfg.embed_dim = 8;
        cfg.heads = 2;
        cfg.hidden = 16;
        cfg.seed = 5;
        Model::new(cfg).unwrap()
    }

    fn input(b: usize, c: usize, t: usize) -> Array3<f64> {
        Array3::from_shape_fn((b, c, t), |(i, j, k)| ((i * 131 + j * 17 + k) as f64 * 0.61).sin())
    }

    #[test]
    fn fusion_weight_examples() {
        assert!(fusion_weights(&[0.0; 4]).iter().all(|&w| (w - 0.25).abs() < 1e-15));
        let w = fusion_weights(&[2f64.ln(), 0.0, 0.0, 0.0]);
        assert!((w[0] - 0.4).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn fuse_limit_and_contract() {
        let p1 = ndarray::array![[0.9, 0.1]];
        let p2 = ndarray::array![[0.2, 0.8]];
        let probs = vec![p1.clone(), p2.clone(), p2.clone(), p2.clone()];
        let f = fuse(&[50.0, 0.0, 0.0, 0.0], &probs).unwrap();
        assert!((f[[0, 0]] - 0.9).abs() < 1e-12);
        let bad = vec![p1.clone(), p2.clone(), ndarray::array![[0.5, 0.6]], p2];
        let err = fuse(&[0.0; 4], &bad).unwrap_err().to_string();
        assert!(err.contains("channel_mixer"), "{err}");
    }

    #[test]
    fn branch_outputs_are_simplex() {
        let m = small();
        let x = input(3, 3, 64);
        for id in BranchId::ALL {
            let out = m.branch_forward(id, &x).unwrap();
            assert_eq!(out.probs.dim(), (3, 4));
            for row in out.probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_heads_give_uniform() {
        let mut m = small();
        m.zero_heads();
        let p = m.predict(&Array3::zeros((2, 3, 64))).unwrap();
        for b in &p.branches {
            assert!(b.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        assert!(p.fused.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn stages_compose_to_branch_forward() {
        let m = small();
        let x = input(2, 3, 64);
        for id in BranchId::ALL {
            let mut h = x.clone().into_dyn();
            for st in m.stages(id) {
                h = (st.apply)(&h).unwrap();
            }
            let direct = m.branch_forward(id, &x).unwrap().probs;
            assert_eq!(h.into_dimensionality::<ndarray::Ix2>().unwrap(), direct);
        }
    }

    #[test]
    fn wrong_shape_is_contract_error() {
        let m = small();
        assert!(matches!(
            m.predict(&Array3::zeros((1, 2, 64))),
            Err(LelError::Contract(_))
        ));
    }

    #[test]
    fn unknown_branch_id() {
        assert!(matches!("bogus".parse::<BranchId>(), Err(LelError::Contract(_))));
        assert_eq!("band_magnitude".parse::<BranchId>().unwrap(), BranchId::BandMagnitude);
    }

    #[test]
    fn config_round_trips_through_kv() {
        let mut cfg = ModelConfig::new(8, 512, 5, 200.0);
        cfg.budget = LipschitzBudget::uniform(0.5);
        cfg.stats = StatAxis::First;
        let text = crate::config::render(&cfg.to_pairs());
        let mut kv = KvConfig::parse(&text).unwrap();
        let back = ModelConfig::from_kv(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn patch_len_auto() {
        assert_eq!(ModelConfig::new(1, 512, 2, 200.0).effective_patch_len(), 32);
        assert_eq!(ModelConfig::new(1, 200, 2, 200.0).effective_patch_len(), 25);
        assert_eq!(ModelConfig::new(1, 101, 2, 200.0).effective_patch_len(), 1);
    }
}
