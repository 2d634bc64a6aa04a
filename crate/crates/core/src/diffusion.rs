//! Per-token diffusion: noise schedule, denoising heads (DiT and an MLP
//! baseline), the noise-prediction loss, the reverse step and guidance.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::KvConfig;
use crate::error::{dim_err, Error, Result};
use crate::nn::{chunk_cols, gated_residual, modulate, timestep_features, Init, Linear, Norm, NormKind};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{segment_mask, GatePosition, GatedAttention, OrderMode, ScaleMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BetaSchedule {
    #[default]
    Cosine,
    /// `β` from `0.1/T` to `20/T`, the classic 1000-step range rescaled.
    Linear,
}

impl BetaSchedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            _ => Err(Error::Config(format!("unknown beta schedule {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        }
    }
}

pub const MAX_BETA: f64 = 0.999;

/// Coefficients for steps `t = 1..=T`; vectors are indexed by `t − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Posterior standard deviations, `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(kind: BetaSchedule, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let betas: Vec<f64> = match kind {
            BetaSchedule::Cosine => {
                let s = 0.008;
                let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, MAX_BETA))
                    .collect()
            }
            BetaSchedule::Linear => {
                let (lo, hi) = (1e-4 * 1000.0 / steps as f64, 0.02 * 1000.0 / steps as f64);
                let hi = hi.min(MAX_BETA);
                (0..steps)
                    .map(|i| if steps == 1 { hi } else { lo + (hi - lo) * i as f64 / (steps - 1) as f64 })
                    .collect()
            }
        };
        Self::from_betas(betas)
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        Self::new(BetaSchedule::Cosine, steps)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
            })
            .collect();
        Ok(Self { steps: betas.len(), betas, alphas, alpha_bars, sigmas })
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::Domain(format!("diffusion step {t} outside [1, {}]", self.steps)));
        }
        Ok(t - 1)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t)?])
    }

    /// Audit table with columns `t beta alpha alpha_bar sigma`.
    pub fn dump(&self) -> String {
        let mut s = String::from("t\tbeta\talpha\talpha_bar\tsigma\n");
        for i in 0..self.steps {
            let _ = writeln!(
                s,
                "{}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}",
                i + 1,
                self.betas[i],
                self.alphas[i],
                self.alpha_bars[i],
                self.sigmas[i]
            );
        }
        s
    }
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn add_noise(sched: &DiffusionSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    add_noise_with(ab, x0, eps)
}

pub fn add_noise_with(alpha_bar: f64, x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaMode {
    Posterior,
    Zero,
}

impl SigmaMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(Self::Posterior),
            "zero" => Ok(Self::Zero),
            _ => Err(Error::Config(format!("unknown sigma mode {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Posterior => "posterior",
            Self::Zero => "zero",
        }
    }
}

/// `x_{t−1} = (x_t − (1 − α_t)/√(1 − ᾱ_t) · ε̂) / √α_t + σ_t · noise`.
/// `noise = None` means `ε_t = 0`.
pub fn step_from_eps(
    sched: &DiffusionSchedule,
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let i = sched.check(t)?;
    let (alpha, ab, sigma) = (sched.alphas[i], sched.alpha_bars[i], sched.sigmas[i]);
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mut out = x_t.zip_map(eps_hat, |x, e| inv * (x - coef * e))?;
    if let Some(n) = noise {
        if n.shape() != out.shape() {
            return Err(dim_err!("noise shape {:?} vs {:?}", n.shape(), out.shape()));
        }
        for (o, &z) in out.data_mut().iter_mut().zip(n.data()) {
            *o += sigma * z;
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric(format!("non-finite sample at diffusion step {t}")));
    }
    Ok(out)
}

pub fn gaussian<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Draws `ε_t` when the step is stochastic. No draw happens at `t = 1` or
/// in [`SigmaMode::Zero`].
pub fn step_noise<R: Rng>(mode: SigmaMode, t: usize, shape: &[usize], rng: &mut R) -> Option<Tensor> {
    if mode == SigmaMode::Zero || t <= 1 {
        None
    } else {
        Some(gaussian(rng, shape))
    }
}

/// `(1 + α)·l_c − α·l_uc`.
pub fn cfg_combine(l_c: &Tensor, l_uc: &Tensor, alpha: f64) -> Result<Tensor> {
    l_c.zip_map(l_uc, |c, u| (1.0 + alpha) * c - alpha * u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMixing {
    /// Each token attends only to itself.
    PerToken,
    /// Tokens of the same sequence attend to each other.
    Full,
}

impl TokenMixing {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_token" => Ok(Self::PerToken),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown token mixing {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerToken => "per_token",
            Self::Full => "full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Dit,
    Mlp,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dit" => Ok(Self::Dit),
            "mlp" => Ok(Self::Mlp),
            _ => Err(Error::Config(format!("unknown head kind {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dit => "dit",
            Self::Mlp => "mlp",
        }
    }

    /// Parameter-name prefix of the head.
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Dit => "dit.",
            Self::Mlp => "mlp.",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiTConfig {
    pub kind: HeadKind,
    pub token_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub freq_dim: usize,
    pub norm: NormKind,
    pub token_mixing: TokenMixing,
    pub eps: f64,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Dit,
            token_dim: 16,
            hidden: 1792,
            heads: 8,
            layers: 4,
            ff_mult: 4,
            freq_dim: 256,
            norm: NormKind::Layer,
            token_mixing: TokenMixing::PerToken,
            eps: 1e-6,
        }
    }
}

impl DiTConfig {
    pub const KEYS: [&'static str; 10] =
        ["kind", "token_dim", "hidden", "heads", "layers", "ff_mult", "freq_dim", "norm", "token_mixing", "eps"];

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("DiT hidden {} is not divisible by heads {}", self.hidden, self.heads)));
        }
        if self.token_dim == 0 || self.freq_dim < 2 || self.ff_mult == 0 {
            return Err(Error::Config("DiT dims must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("kind", self.kind.as_str());
        kv.set("token_dim", self.token_dim);
        kv.set("hidden", self.hidden);
        kv.set("heads", self.heads);
        kv.set("layers", self.layers);
        kv.set("ff_mult", self.ff_mult);
        kv.set("freq_dim", self.freq_dim);
        kv.set("norm", self.norm.as_str());
        kv.set("token_mixing", self.token_mixing.as_str());
        kv.set("eps", self.eps);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            kind: kv.get("kind").map(HeadKind::parse).transpose()?.unwrap_or(d.kind),
            token_dim: kv.parse_or("token_dim", d.token_dim)?,
            hidden: kv.parse_or("hidden", d.hidden)?,
            heads: kv.parse_or("heads", d.heads)?,
            layers: kv.parse_or("layers", d.layers)?,
            ff_mult: kv.parse_or("ff_mult", d.ff_mult)?,
            freq_dim: kv.parse_or("freq_dim", d.freq_dim)?,
            norm: kv.get("norm").map(NormKind::parse).transpose()?.unwrap_or(d.norm),
            token_mixing: kv.get("token_mixing").map(TokenMixing::parse).transpose()?.unwrap_or(d.token_mixing),
            eps: kv.parse_or("eps", d.eps)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// AdaLN-zero DiT block.
#[derive(Clone, Debug)]
pub struct DitBlock {
    norm1: Norm,
    pub attn: GatedAttention,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
    ada: Linear,
}

impl DitBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &DiTConfig, rng: &mut R) -> Result<Self> {
        let h = cfg.hidden;
        Ok(Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), cfg.norm, h, false, cfg.eps)?,
            attn: GatedAttention::new(
                store,
                &format!("{name}.attn"),
                h,
                h,
                cfg.heads,
                ScaleMode::SqrtDk,
                false,
                GatePosition::BeforeOutput,
                Init::Kaiming,
                rng,
            )?,
            norm2: Norm::new(store, &format!("{name}.norm2"), cfg.norm, h, false, cfg.eps)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), h, h * cfg.ff_mult, true, Init::Kaiming, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), h * cfg.ff_mult, h, true, Init::Kaiming, rng)?,
            ada: Linear::new(store, &format!("{name}.ada"), h, 6 * h, true, Init::Zero, rng)?,
        })
    }

    /// `c` is the SiLU-activated per-row condition `[M, hidden]`.
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, c: Var, allow: &[bool]) -> Result<Var> {
        let ada = self.ada.forward(t, s, c)?;
        let m = chunk_cols(t, ada, 6)?;
        let n = self.norm1.forward(t, s, x)?;
        let a_in = modulate(t, n, m[0], m[1])?;
        let a = self.attn.forward(t, s, a_in, a_in, allow)?;
        let h = gated_residual(t, x, m[2], a)?;
        let n = self.norm2.forward(t, s, h)?;
        let f_in = modulate(t, n, m[3], m[4])?;
        let f = self.ff1.forward(t, s, f_in)?;
        let f = t.gelu(f);
        let f = self.ff2.forward(t, s, f)?;
        gated_residual(t, h, m[5], f)
    }
}

/// Residual MLP block with AdaLN-zero, no token interaction.
#[derive(Clone, Debug)]
struct MlpBlock {
    norm: Norm,
    fc1: Linear,
    fc2: Linear,
    ada: Linear,
}

impl MlpBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &DiTConfig, rng: &mut R) -> Result<Self> {
        let h = cfg.hidden;
        Ok(Self {
            norm: Norm::new(store, &format!("{name}.norm"), cfg.norm, h, false, cfg.eps)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), h, h, true, Init::Kaiming, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), h, h, true, Init::Kaiming, rng)?,
            ada: Linear::new(store, &format!("{name}.ada"), h, 3 * h, true, Init::Zero, rng)?,
        })
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, c: Var) -> Result<Var> {
        let ada = self.ada.forward(t, s, c)?;
        let m = chunk_cols(t, ada, 3)?;
        let n = self.norm.forward(t, s, x)?;
        let h = modulate(t, n, m[0], m[1])?;
        let h = self.fc1.forward(t, s, h)?;
        let h = t.silu(h);
        let h = self.fc2.forward(t, s, h)?;
        gated_residual(t, x, m[2], h)
    }
}

#[derive(Clone, Debug)]
enum HeadBlocks {
    Dit(Vec<DitBlock>),
    Mlp(Vec<MlpBlock>),
}

/// Noise predictor `ε_θ(x_t | t + z)` over rows of tokens.
#[derive(Clone, Debug)]
pub struct DenoiseHead {
    pub cfg: DiTConfig,
    t_fc1: Linear,
    t_fc2: Linear,
    in_proj: Linear,
    blocks: HeadBlocks,
    final_norm: Norm,
    final_ada: Linear,
    out: Linear,
}

impl DenoiseHead {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: DiTConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.kind.prefix().trim_end_matches('.');
        let h = cfg.hidden;
        let t_fc1 = Linear::new(store, &format!("{p}.t_fc1"), cfg.freq_dim, h, true, Init::Kaiming, rng)?;
        let t_fc2 = Linear::new(store, &format!("{p}.t_fc2"), h, h, true, Init::Kaiming, rng)?;
        let in_proj = Linear::new(store, &format!("{p}.in"), cfg.token_dim, h, true, Init::Kaiming, rng)?;
        let blocks = match cfg.kind {
            HeadKind::Dit => HeadBlocks::Dit(
                (0..cfg.layers)
                    .map(|i| DitBlock::new(store, &format!("{p}.block{i}"), &cfg, rng))
                    .collect::<Result<_>>()?,
            ),
            HeadKind::Mlp => HeadBlocks::Mlp(
                (0..cfg.layers)
                    .map(|i| MlpBlock::new(store, &format!("{p}.block{i}"), &cfg, rng))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            final_norm: Norm::new(store, &format!("{p}.final_norm"), cfg.norm, h, false, cfg.eps)?,
            final_ada: Linear::new(store, &format!("{p}.final_ada"), h, 2 * h, true, Init::Zero, rng)?,
            out: Linear::new(store, &format!("{p}.out"), h, cfg.token_dim, true, Init::Kaiming, rng)?,
            t_fc1,
            t_fc2,
            in_proj,
            blocks,
            cfg,
        })
    }

    pub fn prefix(&self) -> &'static str {
        self.cfg.kind.prefix()
    }

    /// Time embedding `[len, hidden]` of integer steps.
    pub fn time_embedding(&self, t: &mut Tape, s: &ParamStore, steps: &[usize]) -> Result<Var> {
        let f: Vec<f64> = steps.iter().map(|&v| v as f64).collect();
        let feats = t.constant(timestep_features(&f, self.cfg.freq_dim));
        let h = self.t_fc1.forward(t, s, feats)?;
        let h = t.silu(h);
        self.t_fc2.forward(t, s, h)
    }

    /// `x_t` is `[M, token_dim]`, `steps` has one step per row, `z` is
    /// `[M, hidden]`. `groups` gives row counts per sequence (used by
    /// [`TokenMixing::Full`]).
    pub fn forward(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        x_t: Var,
        steps: &[usize],
        z: Var,
        groups: &[usize],
    ) -> Result<Var> {
        let (m, d) = t.value(x_t).dims2()?;
        if d != self.cfg.token_dim || steps.len() != m || t.value(z).shape() != [m, self.cfg.hidden] {
            return Err(dim_err!(
                "head inputs x_t [{m}, {d}], {} steps, z {:?}",
                steps.len(),
                t.value(z).shape()
            ));
        }
        if groups.iter().sum::<usize>() != m {
            return Err(dim_err!("groups cover {} rows of {}", groups.iter().sum::<usize>(), m));
        }
        let temb = self.time_embedding(t, s, steps)?;
        let c = t.add(temb, z)?;
        let c = t.silu(c);
        let mut h = self.in_proj.forward(t, s, x_t)?;
        match &self.blocks {
            HeadBlocks::Dit(blocks) => {
                let allow = match self.cfg.token_mixing {
                    TokenMixing::PerToken => {
                        let mut a = vec![false; m * m];
                        (0..m).for_each(|i| a[i * m + i] = true);
                        a
                    }
                    TokenMixing::Full => segment_mask(groups, OrderMode::BidirectionalReordered),
                };
                for b in blocks {
                    h = b.forward(t, s, h, c, &allow)?;
                }
            }
            HeadBlocks::Mlp(blocks) => {
                for b in blocks {
                    h = b.forward(t, s, h, c)?;
                }
            }
        }
        let fm = self.final_ada.forward(t, s, c)?;
        let fm = chunk_cols(t, fm, 2)?;
        let n = self.final_norm.forward(t, s, h)?;
        let h = modulate(t, n, fm[0], fm[1])?;
        self.out.forward(t, s, h)
    }

    /// Tape-free prediction for one group of tokens.
    pub fn predict(&self, s: &ParamStore, x_t: &Tensor, steps: &[usize], z: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let x = t.constant(x_t.clone());
        let zv = t.constant(z.clone());
        let groups = [x_t.shape()[0]];
        let e = self.forward(&mut t, s, x, steps, zv, &groups)?;
        Ok(t.value(e).clone())
    }

    /// One reverse step with the network in the loop.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_step<R: Rng>(
        &self,
        s: &ParamStore,
        sched: &DiffusionSchedule,
        x_t: &Tensor,
        t: usize,
        z: &Tensor,
        rng: &mut R,
        mode: SigmaMode,
    ) -> Result<Tensor> {
        let steps = vec![t; x_t.shape()[0]];
        let eps = self.predict(s, x_t, &steps, z)?;
        let noise = step_noise(mode, t, x_t.shape(), rng);
        step_from_eps(sched, x_t, t, &eps, noise.as_ref())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseLoss {
    /// Mean squared error per element.
    Squared,
    /// Mean over tokens of the Euclidean norm `‖ε − ε̂‖`.
    Norm,
}

impl NoiseLoss {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "squared" | "mse" => Ok(Self::Squared),
            "norm" | "l2" => Ok(Self::Norm),
            _ => Err(Error::Config(format!("unknown diffusion loss {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Squared => "squared",
            Self::Norm => "norm",
        }
    }
}

/// Loss between sampled noise and a prediction on the tape.
pub fn noise_loss(t: &mut Tape, eps: Var, eps_hat: Var, kind: NoiseLoss) -> Result<Var> {
    let d = t.sub(eps, eps_hat)?;
    match kind {
        NoiseLoss::Squared => {
            let sq = t.square(d);
            Ok(t.mean_all(sq))
        }
        NoiseLoss::Norm => {
            let n = t.row_norm(d)?;
            Ok(t.mean_all(n))
        }
    }
}

/// Noised inputs for one training pass: per-row steps `t ~ U{1..T}` and
/// `ε ~ N(0, I)`.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    pub eps: Tensor,
    pub x_t: Tensor,
}

pub fn draw_noise<R: Rng>(sched: &DiffusionSchedule, x0: &Tensor, rng: &mut R) -> Result<NoiseDraw> {
    let (m, d) = x0.dims2()?;
    let steps: Vec<usize> = (0..m).map(|_| rng.random_range(1..=sched.steps)).collect();
    let eps = gaussian(rng, &[m, d]);
    let mut x_t = Tensor::zeros(&[m, d]);
    for (r, &st) in steps.iter().enumerate() {
        let ab = sched.alpha_bar(st)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for ((o, &x), &e) in x_t.row_mut(r).iter_mut().zip(x0.row(r)).zip(eps.row(r)) {
            *o = a * x + b * e;
        }
    }
    Ok(NoiseDraw { steps, eps, x_t })
}

/// Diffusion loss of clean masked tokens `x0` `[M, d]` under conditions `z`
/// `[M, hidden]` (rows already restricted to masked positions).
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<R: Rng>(
    t: &mut Tape,
    s: &ParamStore,
    head: &DenoiseHead,
    sched: &DiffusionSchedule,
    x0: &Tensor,
    z: Var,
    groups: &[usize],
    kind: NoiseLoss,
    rng: &mut R,
) -> Result<Var> {
    let draw = draw_noise(sched, x0, rng)?;
    let x = t.constant(draw.x_t);
    let e = t.constant(draw.eps);
    let e_hat = head.forward(t, s, x, &draw.steps, z, groups)?;
    noise_loss(t, e, e_hat, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_is_monotone_and_bounded() {
        for kind in [BetaSchedule::Cosine, BetaSchedule::Linear] {
            let s = DiffusionSchedule::new(kind, 100).unwrap();
            assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bars[0] > 0.99);
            for i in 0..100 {
                assert!(s.betas[i] > 0.0 && s.betas[i] < 1.0);
                assert!(s.alphas[i] > 0.0 && s.alphas[i] < 1.0);
                assert!(s.alpha_bars[i] > 0.0 && s.alpha_bars[i] < 1.0);
                assert!(s.sigmas[i].powi(2) <= 1.0 - s.alpha_bars[i]);
            }
            assert_eq!(s.sigmas[0], 0.0);
        }
    }

    #[test]
    fn add_noise_examples() {
        let x0 = Tensor::row_vector(&[2.0]);
        let e = Tensor::row_vector(&[0.0]);
        assert_eq!(add_noise_with(0.25, &x0, &e).unwrap().data(), &[1.0]);
        assert_eq!(add_noise_with(1.0, &x0, &Tensor::row_vector(&[5.0])).unwrap().data(), &[2.0]);
        assert_eq!(add_noise_with(0.0, &x0, &Tensor::row_vector(&[5.0])).unwrap().data(), &[5.0]);
        let s = DiffusionSchedule::cosine(10).unwrap();
        assert!(matches!(add_noise(&s, &x0, 0, &e), Err(Error::Domain(_))));
        assert!(matches!(add_noise(&s, &x0, 11, &e), Err(Error::Domain(_))));
    }

    #[test]
    fn single_step_oracle_inversion() {
        let s = DiffusionSchedule::cosine(1).unwrap();
        let x0 = Tensor::row_vector(&[0.7, -1.3, 2.5]);
        let eps = Tensor::row_vector(&[0.1, 0.4, -0.9]);
        let xt = add_noise(&s, &x0, 1, &eps).unwrap();
        let back = step_from_eps(&s, &xt, 1, &eps, None).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-10);
    }

    #[test]
    fn zero_prediction_from_zero_gives_scaled_noise() {
        let s = DiffusionSchedule::cosine(50).unwrap();
        let z = Tensor::zeros(&[1, 3]);
        let n = Tensor::row_vector(&[1.0, -2.0, 0.5]);
        let out = step_from_eps(&s, &z, 20, &z, Some(&n)).unwrap();
        let expect = n.map(|v| s.sigmas[19] * v);
        assert!(out.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn non_finite_step_reports_index() {
        let s = DiffusionSchedule::cosine(5).unwrap();
        let x = Tensor::row_vector(&[f64::INFINITY]);
        match step_from_eps(&s, &x, 3, &Tensor::row_vector(&[0.0]), None) {
            Err(Error::Numeric(m)) => assert!(m.contains("step 3")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cfg_examples() {
        let c = Tensor::row_vector(&[2.0]);
        let u = Tensor::row_vector(&[1.0]);
        assert_eq!(cfg_combine(&c, &u, 4.5).unwrap().data(), &[6.5]);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &c, 3.7).unwrap(), c);
        assert!(cfg_combine(&c, &Tensor::zeros(&[1, 2]), 1.0).is_err());
    }

    #[test]
    fn dump_has_a_row_per_step() {
        let s = DiffusionSchedule::cosine(4).unwrap();
        assert_eq!(s.dump().lines().count(), 5);
    }

    fn tiny_head(kind: HeadKind, mixing: TokenMixing) -> (DenoiseHead, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = DiTConfig {
            kind,
            token_dim: 3,
            hidden: 4,
            heads: 2,
            layers: 1,
            ff_mult: 2,
            freq_dim: 4,
            token_mixing: mixing,
            ..Default::default()
        };
        let h = DenoiseHead::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        (h, store)
    }

    #[test]
    fn zero_init_head_ignores_z() {
        for kind in [HeadKind::Dit, HeadKind::Mlp] {
            let (h, s) = tiny_head(kind, TokenMixing::Full);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let x = gaussian(&mut rng, &[4, 3]);
            let a = h.predict(&s, &x, &[3, 3, 7, 1], &gaussian(&mut rng, &[4, 4])).unwrap();
            let b = h.predict(&s, &x, &[3, 3, 7, 1], &gaussian(&mut rng, &[4, 4])).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn oracle_network_has_zero_loss() {
        let mut t = Tape::new();
        let e = t.constant(Tensor::row_vector(&[0.3, -0.2]));
        for kind in [NoiseLoss::Squared, NoiseLoss::Norm] {
            let l = noise_loss(&mut t, e, e, kind).unwrap();
            assert_eq!(t.value(l).data(), &[0.0]);
        }
    }
}
