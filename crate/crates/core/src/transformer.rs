//! Masked autoregressive transformer with gated attention, AdaLN-zero
//! conditioning and optional cross-attention to an audio sequence.
//!
//! Several sequences can share one forward pass: their rows are stacked and
//! attention is restricted to rows of the same sequence.

use rand::Rng;

use crate::config::KvConfig;
use crate::error::{dim_err, Error, Result};
use crate::mask::MaskPlan;
use crate::nn::{chunk_cols, gated_residual, modulate, sinusoidal_positions, Init, Linear, Norm, NormKind};
use crate::params::{uniform, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    /// Scores divided by `d_k`.
    Dk,
    /// Scores divided by `√d_k`.
    SqrtDk,
}

impl ScaleMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dk" => Ok(Self::Dk),
            "sqrt_dk" => Ok(Self::SqrtDk),
            _ => Err(Error::Config(format!("unknown attention scale mode {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dk => "dk",
            Self::SqrtDk => "sqrt_dk",
        }
    }

    pub fn divisor(self, dk: usize) -> f64 {
        match self {
            Self::Dk => dk as f64,
            Self::SqrtDk => (dk as f64).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderMode {
    CausalSequential,
    BidirectionalReordered,
}

impl OrderMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "causal_sequential" | "causal" => Ok(Self::CausalSequential),
            "bidirectional_reordered" | "bidirectional" => Ok(Self::BidirectionalReordered),
            _ => Err(Error::Config(format!("unknown order mode {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CausalSequential => "causal_sequential",
            Self::BidirectionalReordered => "bidirectional_reordered",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatePosition {
    BeforeOutput,
    AfterOutput,
}

impl GatePosition {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "before_output" => Ok(Self::BeforeOutput),
            "after_output" => Ok(Self::AfterOutput),
            _ => Err(Error::Config(format!("unknown gate position {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BeforeOutput => "before_output",
            Self::AfterOutput => "after_output",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub token_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub cond_dim: usize,
    pub out_dim: usize,
    pub attention_scale_mode: ScaleMode,
    pub order_mode: OrderMode,
    pub gating: bool,
    pub gate_position: GatePosition,
    pub norm: NormKind,
    pub cross_attention: bool,
    pub eps: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            token_dim: 16,
            hidden: 1024,
            heads: 16,
            layers: 4,
            ff_mult: 4,
            cond_dim: 512,
            out_dim: 1792,
            attention_scale_mode: ScaleMode::Dk,
            order_mode: OrderMode::CausalSequential,
            gating: true,
            gate_position: GatePosition::BeforeOutput,
            norm: NormKind::Rms,
            cross_attention: false,
            eps: 1e-6,
        }
    }
}

impl TransformerConfig {
    pub const KEYS: [&'static str; 14] = [
        "token_dim",
        "hidden",
        "heads",
        "layers",
        "ff_mult",
        "cond_dim",
        "out_dim",
        "attention_scale_mode",
        "order_mode",
        "gating",
        "gate_position",
        "norm",
        "cross_attention",
        "eps",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads)));
        }
        if self.token_dim == 0 || self.cond_dim == 0 || self.out_dim == 0 || self.ff_mult == 0 {
            return Err(Error::Config("transformer dims must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("token_dim", self.token_dim);
        kv.set("hidden", self.hidden);
        kv.set("heads", self.heads);
        kv.set("layers", self.layers);
        kv.set("ff_mult", self.ff_mult);
        kv.set("cond_dim", self.cond_dim);
        kv.set("out_dim", self.out_dim);
        kv.set("attention_scale_mode", self.attention_scale_mode.as_str());
        kv.set("order_mode", self.order_mode.as_str());
        kv.set("gating", self.gating);
        kv.set("gate_position", self.gate_position.as_str());
        kv.set("norm", self.norm.as_str());
        kv.set("cross_attention", self.cross_attention);
        kv.set("eps", self.eps);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            token_dim: kv.parse_or("token_dim", d.token_dim)?,
            hidden: kv.parse_or("hidden", d.hidden)?,
            heads: kv.parse_or("heads", d.heads)?,
            layers: kv.parse_or("layers", d.layers)?,
            ff_mult: kv.parse_or("ff_mult", d.ff_mult)?,
            cond_dim: kv.parse_or("cond_dim", d.cond_dim)?,
            out_dim: kv.parse_or("out_dim", d.out_dim)?,
            attention_scale_mode: match kv.get("attention_scale_mode") {
                Some(s) => ScaleMode::parse(s)?,
                None => d.attention_scale_mode,
            },
            order_mode: match kv.get("order_mode") {
                Some(s) => OrderMode::parse(s)?,
                None => d.order_mode,
            },
            gating: kv.bool_or("gating", d.gating)?,
            gate_position: match kv.get("gate_position") {
                Some(s) => GatePosition::parse(s)?,
                None => d.gate_position,
            },
            norm: match kv.get("norm") {
                Some(s) => NormKind::parse(s)?,
                None => d.norm,
            },
            cross_attention: kv.bool_or("cross_attention", d.cross_attention)?,
            eps: kv.parse_or("eps", d.eps)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Row-major `n × n` allow matrix; entry `(i, j)` lets query `i` see key `j`.
pub fn causal_mask(n: usize, mode: OrderMode) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = match mode {
                OrderMode::CausalSequential => j <= i,
                OrderMode::BidirectionalReordered => true,
            };
        }
    }
    m
}

/// Block-diagonal self-attention mask for stacked sequences of the given lengths.
pub fn segment_mask(lengths: &[usize], mode: OrderMode) -> Vec<bool> {
    let total: usize = lengths.iter().sum();
    let mut m = vec![false; total * total];
    let mut start = 0;
    for &n in lengths {
        let local = causal_mask(n, mode);
        for i in 0..n {
            for j in 0..n {
                m[(start + i) * total + start + j] = local[i * n + j];
            }
        }
        start += n;
    }
    m
}

/// Cross mask: query rows of segment `b` see only key rows of segment `b`.
pub fn cross_segment_mask(q_lengths: &[usize], k_lengths: &[usize]) -> Result<Vec<bool>> {
    if q_lengths.len() != k_lengths.len() {
        return Err(dim_err!("{} query segments vs {} key segments", q_lengths.len(), k_lengths.len()));
    }
    let qt: usize = q_lengths.iter().sum();
    let kt: usize = k_lengths.iter().sum();
    let mut m = vec![false; qt * kt];
    let (mut qs, mut ks) = (0, 0);
    for (&qn, &kn) in q_lengths.iter().zip(k_lengths) {
        for i in qs..qs + qn {
            for j in ks..ks + kn {
                m[i * kt + j] = true;
            }
        }
        qs += qn;
        ks += kn;
    }
    Ok(m)
}

/// Multi-head `softmax(QKᵀ / s)·V` with a boolean allow mask; each query row
/// must allow at least one key.
pub fn attention_core(
    t: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    divisor: f64,
    allow: &[bool],
) -> Result<Var> {
    let (nq, h) = t.value(q).dims2()?;
    let (nk, hk) = t.value(k).dims2()?;
    if hk != h || t.value(v).shape() != [nk, h] || heads == 0 || h % heads != 0 || allow.len() != nq * nk {
        return Err(dim_err!("attention shapes q [{nq}, {h}], k [{nk}, {hk}], mask {}", allow.len()));
    }
    let dk = h / heads;
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = t.slice_cols(q, head * dk, dk)?;
        let kh = t.slice_cols(k, head * dk, dk)?;
        let vh = t.slice_cols(v, head * dk, dk)?;
        let kt = t.transpose(kh)?;
        let s = t.matmul(qh, kt)?;
        let s = t.scale(s, 1.0 / divisor);
        let s = t.masked_fill(s, allow)?;
        let a = t.softmax(s, 1)?;
        outs.push(t.matmul(a, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        t.concat_cols(&outs)
    }
}

/// `o = g ⊙ softmax(QKᵀ/d)V` with `g = sigmoid(g_o(x))` per token and channel,
/// followed by an output projection. Serves as self- or cross-attention.
#[derive(Clone, Debug)]
pub struct GatedAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    gate: Option<Linear>,
    out: Linear,
    pub heads: usize,
    pub scale: ScaleMode,
    pub gate_position: GatePosition,
}

impl GatedAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        scale: ScaleMode,
        gating: bool,
        gate_position: GatePosition,
        out_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, Init::Kaiming, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, true, Init::Kaiming, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, true, Init::Kaiming, rng)?,
            gate: if gating {
                Some(Linear::new(store, &format!("{name}.gate"), dim, dim, true, Init::Kaiming, rng)?)
            } else {
                None
            },
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, out_init, rng)?,
            heads,
            scale,
            gate_position,
        })
    }

    pub fn gate_weight_names(&self) -> Option<(String, String)> {
        self.gate.as_ref().map(|g| {
            let w = g.weight_name().to_string();
            let b = w.replace(".weight", ".bias");
            (w, b)
        })
    }

    /// Gate values `sigmoid(g_o(x))`, or `None` without gating.
    pub fn gate_values(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Option<Var>> {
        match &self.gate {
            Some(g) => {
                let pre = g.forward(t, s, x)?;
                Ok(Some(t.sigmoid(pre)))
            }
            None => Ok(None),
        }
    }

    /// Attention before gating and output projection, `A·V`.
    pub fn ungated(&self, t: &mut Tape, s: &ParamStore, x: Var, kv: Var, allow: &[bool]) -> Result<Var> {
        let q = self.q.forward(t, s, x)?;
        let k = self.k.forward(t, s, kv)?;
        let v = self.v.forward(t, s, kv)?;
        let dk = t.value(q).shape()[1] / self.heads.max(1);
        attention_core(t, q, k, v, self.heads, self.scale.divisor(dk), allow)
    }

    /// Gated attention output before the output projection (or after it,
    /// with [`GatePosition::AfterOutput`], in which case the projection is
    /// included). `gate` overrides the learned gate.
    pub fn gated_core(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        x: Var,
        kv: Var,
        allow: &[bool],
        gate: Option<Var>,
    ) -> Result<Var> {
        let av = self.ungated(t, s, x, kv, allow)?;
        let gate = match gate {
            Some(g) => Some(g),
            None => self.gate_values(t, s, x)?,
        };
        match (gate, self.gate_position) {
            (None, _) => self.out.forward(t, s, av),
            (Some(g), GatePosition::BeforeOutput) => {
                let o = t.mul(g, av)?;
                self.out.forward(t, s, o)
            }
            (Some(g), GatePosition::AfterOutput) => {
                let o = self.out.forward(t, s, av)?;
                t.mul(g, o)
            }
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, kv: Var, allow: &[bool]) -> Result<Var> {
        self.gated_core(t, s, x, kv, allow, None)
    }
}

/// Pre-norm block: gated self-attention, optional cross-attention and a
/// GELU feedforward, each modulated and gated by AdaLN-zero.
#[derive(Clone, Debug)]
pub struct Block {
    norm1: Norm,
    pub attn: GatedAttention,
    cross_norm: Option<Norm>,
    pub cross: Option<GatedAttention>,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
    ada: Linear,
    hidden: usize,
}

/// Per-row conditioning of a stacked batch.
#[derive(Clone, Debug)]
pub struct BlockContext<'a> {
    /// `[rows, cond_dim]` after SiLU.
    pub cond: Var,
    pub self_allow: &'a [bool],
    /// Stacked cross sequence, its allow mask, and rows that saw no keys.
    pub cross: Option<(Var, &'a [bool], &'a [bool])>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        cond_dim: usize,
        ff_mult: usize,
        norm: NormKind,
        eps: f64,
        scale: ScaleMode,
        gating: bool,
        gate_position: GatePosition,
        cross_kv_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let attn = GatedAttention::new(
            store,
            &format!("{name}.attn"),
            dim,
            dim,
            heads,
            scale,
            gating,
            gate_position,
            Init::Kaiming,
            rng,
        )?;
        let (cross_norm, cross) = match cross_kv_dim {
            Some(kv) => (
                Some(Norm::new(store, &format!("{name}.xnorm"), norm, dim, true, eps)?),
                Some(GatedAttention::new(
                    store,
                    &format!("{name}.xattn"),
                    dim,
                    kv,
                    heads,
                    scale,
                    gating,
                    gate_position,
                    Init::Zero,
                    rng,
                )?),
            ),
            None => (None, None),
        };
        Ok(Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), norm, dim, true, eps)?,
            attn,
            cross_norm,
            cross,
            norm2: Norm::new(store, &format!("{name}.norm2"), norm, dim, true, eps)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, dim * ff_mult, true, Init::Kaiming, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), dim * ff_mult, dim, true, Init::Kaiming, rng)?,
            ada: Linear::new(store, &format!("{name}.ada"), cond_dim, 6 * dim, true, Init::Zero, rng)?,
            hidden: dim,
        })
    }

    /// AdaLN modulation of `norm(h)` by `cond`.
    pub fn adaln_modulate(t: &mut Tape, s: &ParamStore, norm: &Norm, h: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = norm.forward(t, s, h)?;
        modulate(t, n, shift, scale)
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, ctx: &BlockContext) -> Result<Var> {
        let ada = self.ada.forward(t, s, ctx.cond)?;
        if t.value(ada).shape()[1] != 6 * self.hidden {
            return Err(Error::Config("AdaLN projection width mismatch".into()));
        }
        let m = chunk_cols(t, ada, 6)?;
        let a_in = Self::adaln_modulate(t, s, &self.norm1, x, m[0], m[1])?;
        let a = self.attn.forward(t, s, a_in, a_in, ctx.self_allow)?;
        let mut h = gated_residual(t, x, m[2], a)?;
        if let (Some(cross), Some(cn), Some((kv, allow, empty))) = (&self.cross, &self.cross_norm, ctx.cross) {
            let q = cn.forward(t, s, h)?;
            let c = cross.forward(t, s, q, kv, allow)?;
            let c = if empty.iter().any(|&e| e) {
                let zero = t.constant(Tensor::zeros(&[1, self.hidden]));
                t.blend_rows(c, zero, empty)?
            } else {
                c
            };
            h = t.add(h, c)?;
        }
        let f_in = Self::adaln_modulate(t, s, &self.norm2, h, m[3], m[4])?;
        let f = self.ff1.forward(t, s, f_in)?;
        let f = t.gelu(f);
        let f = self.ff2.forward(t, s, f)?;
        gated_residual(t, h, m[5], f)
    }
}

/// Tokens with masked rows replaced by the mask embedding. `offsets`, when
/// set, are added to masked rows after replacement (a probe hook).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    /// `[N, token_dim]`; masked rows are ignored.
    pub tokens: Tensor,
    pub mask: MaskPlan,
    pub offsets: Option<Tensor>,
}

impl TokenStream {
    pub fn new(tokens: Tensor, mask: MaskPlan) -> Result<Self> {
        let (n, _) = tokens.dims2()?;
        if mask.n_tokens != n {
            return Err(dim_err!("mask plan for {} tokens, stream has {}", mask.n_tokens, n));
        }
        Ok(Self { tokens, mask, offsets: None })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values fed to the input projection.
    pub fn values(&self, mask_embedding: &Tensor) -> Result<Tensor> {
        let mut v = self.tokens.clone();
        for &i in &self.mask.masked {
            v.row_mut(i).copy_from_slice(mask_embedding.data());
            if let Some(o) = &self.offsets {
                for (a, b) in v.row_mut(i).iter_mut().zip(o.row(i)) {
                    *a += b;
                }
            }
        }
        Ok(v)
    }
}

/// Conditioning of one sequence on the tape.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    /// `[1, cond_dim]`.
    pub adaln: Var,
    /// `[L, cond_dim]`.
    pub cross: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct MarTransformer {
    pub cfg: TransformerConfig,
    mask_embedding: String,
    in_proj: Linear,
    pub blocks: Vec<Block>,
    final_norm: Norm,
    final_ada: Linear,
    out_proj: Linear,
}

pub const MASK_EMBEDDING: &str = "mar.mask_embedding";

impl MarTransformer {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: TransformerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        store.insert(MASK_EMBEDDING, uniform(rng, &[1, cfg.token_dim], 1.0))?;
        let in_proj = Linear::new(store, "mar.in", cfg.token_dim, cfg.hidden, true, Init::Kaiming, rng)?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                Block::new(
                    store,
                    &format!("mar.block{i}"),
                    cfg.hidden,
                    cfg.heads,
                    cfg.cond_dim,
                    cfg.ff_mult,
                    cfg.norm,
                    cfg.eps,
                    cfg.attention_scale_mode,
                    cfg.gating,
                    cfg.gate_position,
                    cfg.cross_attention.then_some(cfg.cond_dim),
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            final_norm: Norm::new(store, "mar.final_norm", cfg.norm, cfg.hidden, true, cfg.eps)?,
            final_ada: Linear::new(store, "mar.final_ada", cfg.cond_dim, 2 * cfg.hidden, true, Init::Zero, rng)?,
            out_proj: Linear::new(store, "mar.out", cfg.hidden, cfg.out_dim, true, Init::Kaiming, rng)?,
            mask_embedding: MASK_EMBEDDING.to_string(),
            in_proj,
            blocks,
            cfg,
        })
    }

    /// Adds cross-attention layers to a model built without them; new
    /// layers have zero-initialised output projections.
    pub fn add_cross_attention<R: Rng>(&mut self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if self.cfg.cross_attention {
            return Ok(());
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let name = format!("mar.block{i}");
            b.cross_norm = Some(Norm::new(store, &format!("{name}.xnorm"), self.cfg.norm, self.cfg.hidden, true, self.cfg.eps)?);
            b.cross = Some(GatedAttention::new(
                store,
                &format!("{name}.xattn"),
                self.cfg.hidden,
                self.cfg.cond_dim,
                self.cfg.heads,
                self.cfg.attention_scale_mode,
                self.cfg.gating,
                self.cfg.gate_position,
                Init::Zero,
                rng,
            )?);
        }
        self.cfg.cross_attention = true;
        Ok(())
    }

    /// Stacked input rows `[ΣN, hidden]` including positional encodings.
    fn embed(&self, t: &mut Tape, s: &ParamStore, streams: &[TokenStream]) -> Result<Var> {
        let me = t.param(s, &self.mask_embedding)?;
        let mut rows = Vec::with_capacity(streams.len());
        for st in streams {
            let (n, d) = st.tokens.dims2()?;
            if d != self.cfg.token_dim {
                return Err(dim_err!("tokens have {} channels, transformer expects {}", d, self.cfg.token_dim));
            }
            let x = t.constant(st.tokens.clone());
            let mut x = t.blend_rows(x, me, &st.mask.flags())?;
            if let Some(o) = &st.offsets {
                let mut off = Tensor::zeros(&[n, d]);
                for &i in &st.mask.masked {
                    off.row_mut(i).copy_from_slice(o.row(i));
                }
                let off = t.constant(off);
                x = t.add(x, off)?;
            }
            let h = self.in_proj.forward(t, s, x)?;
            let pos = t.constant(sinusoidal_positions(n, self.cfg.hidden));
            rows.push(t.add(h, pos)?);
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            t.concat_rows(&rows)
        }
    }

    /// Per-token conditions `z`, `[ΣN, out_dim]`, for stacked sequences.
    pub fn forward_batch(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        streams: &[TokenStream],
        conds: &[CondVars],
    ) -> Result<Var> {
        if streams.is_empty() || streams.len() != conds.len() {
            return Err(dim_err!("{} streams with {} conditions", streams.len(), conds.len()));
        }
        let lengths: Vec<usize> = streams.iter().map(TokenStream::len).collect();
        let x = self.embed(t, s, streams)?;

        let seg_of_row: Vec<usize> = lengths.iter().enumerate().flat_map(|(b, &n)| std::iter::repeat_n(b, n)).collect();
        let adaln: Vec<Var> = conds.iter().map(|c| c.adaln).collect();
        for &a in &adaln {
            if t.value(a).shape() != [1, self.cfg.cond_dim] {
                return Err(Error::Config(format!(
                    "condition vector {:?} does not match cond_dim {}",
                    t.value(a).shape(),
                    self.cfg.cond_dim
                )));
            }
        }
        let c = if adaln.len() == 1 { adaln[0] } else { t.concat_rows(&adaln)? };
        let c = t.silu(c);
        let cond = t.gather_rows(c, &seg_of_row)?;

        let self_allow = segment_mask(&lengths, self.cfg.order_mode);
        let cross_parts: Vec<Option<Var>> = conds
            .iter()
            .map(|c| c.cross.filter(|&v| t.value(v).shape()[0] > 0))
            .collect();
        let any_cross = self.cfg.cross_attention && cross_parts.iter().any(Option::is_some);
        let cross_data = if any_cross {
            let mut parts = Vec::new();
            let mut klen = Vec::with_capacity(streams.len());
            for p in &cross_parts {
                match p {
                    Some(v) => {
                        if t.value(*v).shape()[1] != self.cfg.cond_dim {
                            return Err(Error::Config("cross sequence width does not match cond_dim".into()));
                        }
                        klen.push(t.value(*v).shape()[0]);
                        parts.push(*v);
                    }
                    None => klen.push(0),
                }
            }
            let kv = if parts.len() == 1 { parts[0] } else { t.concat_rows(&parts)? };
            let mut allow = cross_segment_mask(&lengths, &klen)?;
            let kt: usize = klen.iter().sum();
            let mut empty = vec![false; seg_of_row.len()];
            for (r, &b) in seg_of_row.iter().enumerate() {
                if klen[b] == 0 {
                    empty[r] = true;
                    allow[r * kt..(r + 1) * kt].iter_mut().for_each(|a| *a = true);
                }
            }
            Some((kv, allow, empty))
        } else {
            None
        };

        let ctx = BlockContext {
            cond,
            self_allow: &self_allow,
            cross: cross_data.as_ref().map(|(kv, a, e)| (*kv, a.as_slice(), e.as_slice())),
        };
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(t, s, h, &ctx)?;
        }
        let fm = self.final_ada.forward(t, s, cond)?;
        let fm = chunk_cols(t, fm, 2)?;
        let h = Block::adaln_modulate(t, s, &self.final_norm, h, fm[0], fm[1])?;
        self.out_proj.forward(t, s, h)
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, stream: &TokenStream, cond: CondVars) -> Result<Var> {
        self.forward_batch(t, s, std::slice::from_ref(stream), &[cond])
    }

    /// Tape-free evaluation of `z` for one sequence.
    pub fn conditions(
        &self,
        s: &ParamStore,
        stream: &TokenStream,
        adaln: &Tensor,
        cross: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut t = Tape::new();
        let a = t.constant(adaln.clone());
        let c = cross.map(|c| t.constant(c.clone()));
        let z = self.forward(&mut t, s, stream, CondVars { adaln: a, cross: c })?;
        Ok(t.value(z).clone())
    }
}
