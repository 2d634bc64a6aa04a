//! Text-to-motion pretraining and multimodal fine-tuning of the generator.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::Autoencoder;
use crate::condition::{AudioClip, Modality};
use crate::config::KvConfig;
use crate::diffusion::diffusion_loss;
use crate::error::{Error, Result};
use crate::mask::{sample_training_mask, MaskPlan};
use crate::model::{ModelConfig, OmniModel, EMA_PREFIX};
use crate::motion::pad_to_multiple;
use crate::optim::{ema_update, AdamW, AdamWConfig, EmaState};
use crate::params::{Checkpoint, ParamStore};
use crate::synth::SyntheticItem;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{CondVars, TokenStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    T2m,
    Speech,
    Music,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t2m" | "text" => Ok(Task::T2m),
            "speech" => Ok(Task::Speech),
            "music" => Ok(Task::Music),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::T2m => "t2m",
            Task::Speech => "speech",
            Task::Music => "music",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            Task::T2m => Modality::Text,
            Task::Speech => Modality::Speech,
            Task::Music => Modality::Music,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub task: Task,
    pub batch_size: usize,
    /// Frames kept per sequence.
    pub max_len: usize,
    pub lr: f64,
    pub warmup: usize,
    pub steps: usize,
    /// When set, overrides `steps` with `epochs` passes over the corpus.
    pub epochs: Option<usize>,
    pub ema_decay: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub decay_to: Option<usize>,
    pub clip_norm: Option<f64>,
    /// Probability of training a sequence on the unconditional branch.
    pub p_uncond: f64,
    /// Noise draws per masked token.
    pub noise_repeats: usize,
    pub cross_attention: bool,
    pub unfreeze_head: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            task: Task::T2m,
            batch_size: 8,
            max_len: crate::motion::DEFAULT_MAX_FRAMES,
            lr: 2e-4,
            warmup: 2000,
            steps: 2000,
            epochs: None,
            ema_decay: 0.999,
            seed: 0,
            weight_decay: 0.01,
            decay_to: None,
            clip_norm: None,
            p_uncond: 0.1,
            noise_repeats: 1,
            cross_attention: true,
            unfreeze_head: false,
        }
    }
}

impl TrainRunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "task",
        "batch_size",
        "max_len",
        "lr",
        "warmup",
        "steps",
        "epochs",
        "ema_decay",
        "seed",
        "weight_decay",
        "decay_to",
        "clip_norm",
        "p_uncond",
        "noise_repeats",
        "cross_attention",
        "unfreeze_head",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_len == 0 || self.noise_repeats == 0 {
            return Err(Error::Config("batch_size, max_len and noise_repeats must be positive".into()));
        }
        if self.epochs == Some(0) || (self.epochs.is_none() && self.steps == 0) {
            return Err(Error::Config("training needs at least one step".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("lr and weight_decay must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond must lie in [0, 1], got {}", self.p_uncond)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay)));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_known(Self::KEYS)?;
        let d = Self::default();
        let opt = |k: &str| -> Result<Option<String>> { Ok(kv.get(k).map(str::to_string)) };
        let c = Self {
            task: match kv.get("task") {
                Some(s) => Task::parse(s)?,
                None => d.task,
            },
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            max_len: kv.parse_or("max_len", d.max_len)?,
            lr: kv.parse_or("lr", d.lr)?,
            warmup: kv.parse_or("warmup", d.warmup)?,
            steps: kv.parse_or("steps", d.steps)?,
            epochs: match opt("epochs")? {
                Some(s) => Some(s.parse().map_err(|_| Error::Config(format!("bad epochs {s:?}")))?),
                None => None,
            },
            ema_decay: kv.parse_or("ema_decay", d.ema_decay)?,
            seed: kv.parse_or("seed", d.seed)?,
            weight_decay: kv.parse_or("weight_decay", d.weight_decay)?,
            decay_to: match opt("decay_to")? {
                Some(s) => Some(s.parse().map_err(|_| Error::Config(format!("bad decay_to {s:?}")))?),
                None => None,
            },
            clip_norm: match opt("clip_norm")? {
                Some(s) => Some(s.parse().map_err(|_| Error::Config(format!("bad clip_norm {s:?}")))?),
                None => None,
            },
            p_uncond: kv.parse_or("p_uncond", d.p_uncond)?,
            noise_repeats: kv.parse_or("noise_repeats", d.noise_repeats)?,
            cross_attention: kv.bool_or("cross_attention", d.cross_attention)?,
            unfreeze_head: kv.bool_or("unfreeze_head", d.unfreeze_head)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("task", self.task.as_str());
        kv.set("batch_size", self.batch_size);
        kv.set("max_len", self.max_len);
        kv.set("lr", self.lr);
        kv.set("warmup", self.warmup);
        kv.set("steps", self.steps);
        if let Some(e) = self.epochs {
            kv.set("epochs", e);
        }
        kv.set("ema_decay", self.ema_decay);
        kv.set("seed", self.seed);
        kv.set("weight_decay", self.weight_decay);
        if let Some(d) = self.decay_to {
            kv.set("decay_to", d);
        }
        if let Some(c) = self.clip_norm {
            kv.set("clip_norm", c);
        }
        kv.set("p_uncond", self.p_uncond);
        kv.set("noise_repeats", self.noise_repeats);
        kv.set("cross_attention", self.cross_attention);
        kv.set("unfreeze_head", self.unfreeze_head);
        kv
    }

    pub fn optim(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            warmup: self.warmup,
            weight_decay: self.weight_decay,
            decay_to: self.decay_to,
            clip_norm: self.clip_norm,
            ..Default::default()
        }
    }

    pub fn total_steps(&self, corpus_len: usize) -> usize {
        match self.epochs {
            Some(e) => e * corpus_len.div_ceil(self.batch_size.min(corpus_len).max(1)),
            None => self.steps,
        }
    }
}

/// One training sequence in token form.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenItem {
    /// `[N, latent]`, already multiplied by the latent scale.
    pub tokens: Tensor,
    pub caption: String,
    pub audio: Option<AudioClip>,
}

/// Unscaled tokens of each item, cropped to `max_len` frames.
pub fn encode_corpus(ae: &Autoencoder, ae_store: &ParamStore, corpus: &[SyntheticItem], max_len: usize) -> Result<Vec<Tensor>> {
    corpus
        .iter()
        .map(|it| {
            let m = if it.motion.len() > max_len { it.motion.crop(max_len)? } else { it.motion.clone() };
            let p = pad_to_multiple(&m, ae.cfg.rate())?;
            Ok(ae.encode(ae_store, &p.motion)?.tokens)
        })
        .collect()
}

fn longest(corpus: &[SyntheticItem], max_len: usize) -> usize {
    corpus.iter().map(|it| it.motion.len().min(max_len)).max().unwrap_or(max_len)
}

/// `1 / std` over every token value.
pub fn latent_scale(tokens: &[Tensor]) -> Result<f64> {
    let vals: Vec<f64> = tokens.iter().flat_map(|t| t.data().iter().copied()).collect();
    if vals.len() < 2 {
        return Err(Error::Input("too few token values to estimate a latent scale".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var.is_nan() || var <= 1e-24 {
        return Err(Error::Numeric("tokens have zero variance".into()));
    }
    Ok(1.0 / var.sqrt())
}

pub fn tokenize_corpus(
    ae: &Autoencoder,
    ae_store: &ParamStore,
    corpus: &[SyntheticItem],
    max_len: usize,
    scale: f64,
) -> Result<Vec<TokenItem>> {
    let tokens = encode_corpus(ae, ae_store, corpus, max_len)?;
    Ok(tokens
        .into_iter()
        .zip(corpus)
        .map(|(t, it)| TokenItem { tokens: t.map(|v| v * scale), caption: it.caption.clone(), audio: it.audio.clone() })
        .collect())
}

/// A model with its parameters, EMA state and tokenizer pairing.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: OmniModel,
    pub store: ParamStore,
    pub ema: EmaState,
    pub task: Task,
    pub latent_scale: f64,
    pub ae_hash: String,
    pub fps: f32,
    /// Longest training sequence in frames.
    pub frames: usize,
    /// Checkpoint entries of frozen parameters copied through unchanged.
    pub carried: Vec<(String, Tensor)>,
}

impl TrainedModel {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = KvConfig::default();
        extra.set("kind", "model");
        extra.set("task", self.task.as_str());
        extra.set("model.ae_hash", &self.ae_hash);
        extra.set("model.latent_scale", format!("{:e}", self.latent_scale));
        extra.set("data.fps", self.fps);
        extra.set("data.frames", self.frames);
        let mut ck = self.model.checkpoint(&self.store, Some(&self.ema), &extra);
        for (n, t) in &self.carried {
            if ck.get(n).is_none() {
                ck.entries.push((n.clone(), t.clone()));
            }
        }
        ck
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Fixed-draw loss before the first step.
    pub eval_initial: f64,
    /// Fixed-draw loss after the last step.
    pub eval_final: f64,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for (i, (l, lr)) in self.losses.iter().zip(&self.lrs).enumerate() {
            let _ = writeln!(s, "{},{l:.9e},{lr:.9e}", i + 1);
        }
        s
    }

    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.metrics_csv())?;
        Ok(())
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Mean diffusion loss over `batch` items with the given masks, drawing
/// noise from `rng`. Items flagged `uncond` use the unconditional branch.
#[allow(clippy::too_many_arguments)]
fn batch_loss<R: Rng>(
    t: &mut Tape,
    model: &OmniModel,
    s: &ParamStore,
    items: &[&TokenItem],
    masks: &[MaskPlan],
    uncond: &[bool],
    repeats: usize,
    rng: &mut R,
) -> Result<Var> {
    let mut streams = Vec::with_capacity(items.len());
    let mut conds: Vec<CondVars> = Vec::with_capacity(items.len());
    for ((it, m), &u) in items.iter().zip(masks).zip(uncond) {
        streams.push(TokenStream::new(it.tokens.clone(), m.clone())?);
        conds.push(if u {
            model.condition_vars(t, s, "", None)?
        } else {
            model.condition_vars(t, s, &it.caption, it.audio.as_ref())?
        });
    }
    let z = model.mar.forward_batch(t, s, &streams, &conds)?;
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    let mut x0_rows: Vec<f64> = Vec::new();
    let d = model.cfg.latent;
    let mut offset = 0;
    for st in &streams {
        groups.push(st.mask.masked.len());
        for &i in &st.mask.masked {
            rows.push(offset + i);
            x0_rows.extend_from_slice(st.tokens.row(i));
        }
        offset += st.len();
    }
    let m = rows.len();
    let x0 = Tensor::new(vec![m, d], x0_rows)?;
    let zm = t.gather_rows(z, &rows)?;
    let mut total: Option<Var> = None;
    for _ in 0..repeats {
        let l = diffusion_loss(t, s, &model.head, &model.sched, &x0, zm, &groups, model.cfg.loss, rng)?;
        total = Some(match total {
            Some(a) => t.add(a, l)?,
            None => l,
        });
    }
    Ok(t.scale(total.expect("repeats is positive"), 1.0 / repeats as f64))
}

const EVAL_ROUNDS: usize = 4;

/// Deterministic conditional loss with masks and noise drawn from `seed`.
pub fn eval_loss(model: &OmniModel, s: &ParamStore, items: &[TokenItem], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let refs: Vec<&TokenItem> = items.iter().collect();
    let uncond = vec![false; items.len()];
    for _ in 0..EVAL_ROUNDS {
        let masks: Vec<MaskPlan> =
            items.iter().map(|it| sample_training_mask(it.tokens.shape()[0], &mut rng)).collect::<Result<_>>()?;
        let mut t = Tape::new();
        let l = batch_loss(&mut t, model, s, &refs, &masks, &uncond, 1, &mut rng)?;
        acc += t.value(l).data()[0];
    }
    Ok(acc / EVAL_ROUNDS as f64)
}

const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

fn run_training(tm: &mut TrainedModel, items: &[TokenItem], cfg: &TrainRunConfig) -> Result<TrainReport> {
    if items.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optim())?;
    let eval_seed = cfg.seed ^ EVAL_SEED_SALT;
    let mut report = TrainReport { eval_initial: eval_loss(&tm.model, &tm.store, items, eval_seed)?, ..Default::default() };
    let steps = cfg.total_steps(items.len());
    let bs = cfg.batch_size.min(items.len());
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    for step in 0..steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&items[order[cursor]]);
            cursor += 1;
        }
        let masks: Vec<MaskPlan> =
            batch.iter().map(|it| sample_training_mask(it.tokens.shape()[0], &mut rng)).collect::<Result<_>>()?;
        let uncond: Vec<bool> = batch.iter().map(|_| rng.random::<f64>() < cfg.p_uncond).collect();
        let mut t = Tape::new();
        let loss = batch_loss(&mut t, &tm.model, &tm.store, &batch, &masks, &uncond, cfg.noise_repeats, &mut rng)?;
        let lv = t.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { step, last_finite: report.losses.last().copied() });
        }
        let grads = t.backward(loss)?;
        let lr = opt.step(&mut tm.store, &t.param_grads(&grads))?;
        ema_update(&mut tm.ema, &tm.store)?;
        report.losses.push(lv);
        report.lrs.push(lr);
        if step % 100 == 0 {
            log::debug!("{} step {step} loss {lv:.6} lr {lr:.3e}", cfg.task.as_str());
        }
    }
    report.eval_final = eval_loss(&tm.model, &tm.store, items, eval_seed)?;
    Ok(report)
}

/// Trains a fresh text-conditioned model on `corpus` tokenized by `ae`.
pub fn pretrain_t2m(
    model_cfg: &ModelConfig,
    cfg: &TrainRunConfig,
    ae: &Autoencoder,
    ae_store: &ParamStore,
    ae_hash: &str,
    corpus: &[SyntheticItem],
) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    if cfg.task != Task::T2m {
        return Err(Error::Config(format!("pretraining runs the t2m task, got {}", cfg.task.as_str())));
    }
    if model_cfg.latent != ae.cfg.latent {
        return Err(Error::Config(format!(
            "model latent width {} does not match autoencoder latent {}",
            model_cfg.latent, ae.cfg.latent
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    let raw = encode_corpus(ae, ae_store, corpus, cfg.max_len)?;
    let scale = latent_scale(&raw)?;
    let items: Vec<TokenItem> = raw
        .into_iter()
        .zip(corpus)
        .map(|(t, it)| TokenItem { tokens: t.map(|v| v * scale), caption: it.caption.clone(), audio: None })
        .collect();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(1);
    let mut store = ParamStore::new();
    let model = OmniModel::new(&mut store, model_cfg.clone(), &mut init_rng)?;
    let ema = EmaState::new(&store, cfg.ema_decay)?;
    let mut tm = TrainedModel {
        model,
        store,
        ema,
        task: Task::T2m,
        latent_scale: scale,
        ae_hash: ae_hash.to_string(),
        fps: corpus[0].motion.fps(),
        frames: longest(corpus, cfg.max_len),
        carried: Vec::new(),
    };
    let report = run_training(&mut tm, &items, cfg)?;
    Ok((tm, report))
}

/// Loads a trained model from a checkpoint for further training. Frozen
/// flags are not stored and start cleared.
pub fn resume(ck: &Checkpoint, ema_decay: f64) -> Result<TrainedModel> {
    let (model, store) = OmniModel::from_checkpoint(ck, false)?;
    let ema = OmniModel::ema_from_checkpoint(ck, &store, ema_decay)?;
    let meta = &ck.metadata;
    Ok(TrainedModel {
        model,
        store,
        ema,
        task: Task::parse(meta.get("task").unwrap_or("t2m"))?,
        latent_scale: meta.parse_or("model.latent_scale", 1.0)?,
        ae_hash: meta.get("model.ae_hash").unwrap_or_default().to_string(),
        fps: meta.parse_or("data.fps", 20.0)?,
        frames: meta.parse_or("data.frames", crate::motion::DEFAULT_MAX_FRAMES)?,
        carried: Vec::new(),
    })
}

/// Adapts a pretrained text model to an audio task with the denoising head
/// frozen. Tokens come from the task autoencoder at the pretrained scale.
pub fn finetune_multimodal(
    cfg: &TrainRunConfig,
    pretrained: &Checkpoint,
    ae: &Autoencoder,
    ae_store: &ParamStore,
    ae_hash: &str,
    corpus: &[SyntheticItem],
) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    if !cfg.task.modality().is_audio() {
        return Err(Error::Config(format!("fine-tuning needs an audio task, got {}", cfg.task.as_str())));
    }
    if cfg.unfreeze_head {
        return Err(Error::Config("the denoising head stays frozen during fine-tuning".into()));
    }
    if let Some(i) = corpus.iter().position(|it| it.audio.is_none()) {
        return Err(Error::Input(format!("corpus item {i} has no audio track")));
    }
    let mut tm = resume(pretrained, cfg.ema_decay)?;
    if tm.model.cfg.latent != ae.cfg.latent {
        return Err(Error::Config(format!(
            "model latent width {} does not match autoencoder latent {}",
            tm.model.cfg.latent, ae.cfg.latent
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    tm.model.add_audio(&mut tm.store, cfg.cross_attention, &mut rng)?;
    let prefix = tm.model.head.prefix();
    tm.store.set_frozen_prefix(prefix, true);
    tm.ema = OmniModel::ema_from_checkpoint(pretrained, &tm.store, cfg.ema_decay)?;
    let ema_head = format!("{EMA_PREFIX}{prefix}");
    tm.carried = pretrained.entries.iter().filter(|(n, _)| n.starts_with(&ema_head)).cloned().collect();
    tm.task = cfg.task;
    tm.frames = longest(corpus, cfg.max_len);
    tm.ae_hash = ae_hash.to_string();
    let items = tokenize_corpus(ae, ae_store, corpus, cfg.max_len, tm.latent_scale)?;
    let report = run_training(&mut tm, &items, cfg)?;
    Ok((tm, report))
}
