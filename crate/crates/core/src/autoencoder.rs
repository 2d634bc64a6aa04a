//! Convolutional motion autoencoder: `T × D` frames to `T/4 × latent`
//! continuous tokens and back.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::motion::{pad_to_multiple, MotionSequence};
use crate::nn::Conv1d;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Checkpoint, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    /// Stride-1 residual blocks at token resolution, in each of encoder and decoder.
    pub layers: usize,
    pub down_blocks: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { input_dim: crate::motion::SMPLX_DIM, hidden: 512, latent: 16, layers: 3, down_blocks: 2 }
    }
}

pub const DOWNSAMPLE_RATE: usize = 4;

impl AutoencoderConfig {
    pub const KEYS: [&'static str; 5] = ["input_dim", "hidden", "latent", "layers", "down_blocks"];

    pub fn rate(&self) -> usize {
        1 << self.down_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(Error::Config("autoencoder dims must be positive".into()));
        }
        if self.rate() != DOWNSAMPLE_RATE {
            return Err(Error::Config(format!(
                "{} stride-2 blocks give rate {}, expected {}",
                self.down_blocks,
                self.rate(),
                DOWNSAMPLE_RATE
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("input_dim", self.input_dim);
        kv.set("hidden", self.hidden);
        kv.set("latent", self.latent);
        kv.set("layers", self.layers);
        kv.set("down_blocks", self.down_blocks);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            input_dim: kv.parse_or("input_dim", d.input_dim)?,
            hidden: kv.parse_or("hidden", d.hidden)?,
            latent: kv.parse_or("latent", d.latent)?,
            layers: kv.parse_or("layers", d.layers)?,
            down_blocks: kv.parse_or("down_blocks", d.down_blocks)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionTokens {
    /// `[N, latent]`.
    pub tokens: Tensor,
    pub source_fps: f32,
}

impl MotionTokens {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `conv(relu(conv(x)))` plus a strided 1×1 skip.
#[derive(Clone, Debug)]
struct DownBlock {
    a: Conv1d,
    b: Conv1d,
    skip: Conv1d,
}

impl DownBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            a: Conv1d::new(store, &format!("{name}.a"), ch, ch, 3, 2, 1, rng)?,
            b: Conv1d::new(store, &format!("{name}.b"), ch, ch, 3, 1, 1, rng)?,
            skip: Conv1d::new(store, &format!("{name}.skip"), ch, ch, 1, 2, 0, rng)?,
        })
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.a.forward(t, s, x)?;
        let h = t.relu(h);
        let h = self.b.forward(t, s, h)?;
        let k = self.skip.forward(t, s, x)?;
        t.add(h, k)
    }
}

/// `x + conv(relu(conv(relu(x))))`.
#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv1d,
    b: Conv1d,
}

impl ResBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            a: Conv1d::new(store, &format!("{name}.a"), ch, ch, 3, 1, 1, rng)?,
            b: Conv1d::new(store, &format!("{name}.b"), ch, ch, 3, 1, 1, rng)?,
        })
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let h = t.relu(x);
        let h = self.a.forward(t, s, h)?;
        let h = t.relu(h);
        let h = self.b.forward(t, s, h)?;
        t.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub cfg: AutoencoderConfig,
    enc_in: Conv1d,
    enc_down: Vec<DownBlock>,
    enc_res: Vec<ResBlock>,
    enc_out: Conv1d,
    dec_in: Conv1d,
    dec_res: Vec<ResBlock>,
    dec_up: Vec<ResBlock>,
    dec_out: Conv1d,
}

impl Autoencoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: AutoencoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, h, l) = (cfg.input_dim, cfg.hidden, cfg.latent);
        let enc_in = Conv1d::new(store, "ae.enc.in", d, h, 3, 1, 1, rng)?;
        let enc_down = (0..cfg.down_blocks)
            .map(|i| DownBlock::new(store, &format!("ae.enc.down{i}"), h, rng))
            .collect::<Result<_>>()?;
        let enc_res =
            (0..cfg.layers).map(|i| ResBlock::new(store, &format!("ae.enc.res{i}"), h, rng)).collect::<Result<_>>()?;
        let enc_out = Conv1d::new(store, "ae.enc.out", h, l, 3, 1, 1, rng)?;
        let dec_in = Conv1d::new(store, "ae.dec.in", l, h, 3, 1, 1, rng)?;
        let dec_res =
            (0..cfg.layers).map(|i| ResBlock::new(store, &format!("ae.dec.res{i}"), h, rng)).collect::<Result<_>>()?;
        let dec_up = (0..cfg.down_blocks)
            .map(|i| ResBlock::new(store, &format!("ae.dec.up{i}"), h, rng))
            .collect::<Result<_>>()?;
        let dec_out = Conv1d::new(store, "ae.dec.out", h, d, 3, 1, 1, rng)?;
        Ok(Self { cfg, enc_in, enc_down, enc_res, enc_out, dec_in, dec_res, dec_up, dec_out })
    }

    /// `[T, D] -> [T/4, latent]` on the tape.
    pub fn encode_var(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let (len, d) = t.value(x).dims2()?;
        if d != self.cfg.input_dim {
            return Err(Error::Dimension(format!("motion has {d} channels, autoencoder expects {}", self.cfg.input_dim)));
        }
        if len % self.cfg.rate() != 0 {
            return Err(Error::Precondition(format!(
                "{len} frames is not a multiple of {}; pad first",
                self.cfg.rate()
            )));
        }
        let mut h = self.enc_in.forward(t, s, x)?;
        for b in &self.enc_down {
            h = b.forward(t, s, h)?;
        }
        for b in &self.enc_res {
            h = b.forward(t, s, h)?;
        }
        let h = t.relu(h);
        self.enc_out.forward(t, s, h)
    }

    /// `[N, latent] -> [4N, D]` on the tape.
    pub fn decode_var(&self, t: &mut Tape, s: &ParamStore, z: Var) -> Result<Var> {
        let (n, l) = t.value(z).dims2()?;
        if n == 0 {
            return Err(Error::Input("cannot decode zero tokens".into()));
        }
        if l != self.cfg.latent {
            return Err(Error::Dimension(format!("tokens have {l} channels, autoencoder expects {}", self.cfg.latent)));
        }
        let mut h = self.dec_in.forward(t, s, z)?;
        for b in &self.dec_res {
            h = b.forward(t, s, h)?;
        }
        for b in &self.dec_up {
            h = t.upsample(h, 2)?;
            h = b.forward(t, s, h)?;
        }
        let h = t.relu(h);
        self.dec_out.forward(t, s, h)
    }

    pub fn encode(&self, s: &ParamStore, m: &MotionSequence) -> Result<MotionTokens> {
        let mut t = Tape::new();
        let x = t.constant(m.frames().clone());
        let z = self.encode_var(&mut t, s, x)?;
        let tokens = t.value(z).clone();
        if !tokens.is_finite() {
            return Err(Error::Numeric("encoder produced non-finite tokens".into()));
        }
        Ok(MotionTokens { tokens, source_fps: m.fps() })
    }

    pub fn decode(&self, s: &ParamStore, z: &MotionTokens) -> Result<MotionSequence> {
        let mut t = Tape::new();
        let zv = t.constant(z.tokens.clone());
        let y = self.decode_var(&mut t, s, zv)?;
        let frames = t.value(y).clone();
        if !frames.is_finite() {
            return Err(Error::Numeric("decoder produced non-finite frames".into()));
        }
        MotionSequence::new(frames, z.source_fps)
    }

    /// Pads, encodes, decodes and crops back to the original length.
    pub fn reconstruct(&self, s: &ParamStore, m: &MotionSequence) -> Result<MotionSequence> {
        let p = pad_to_multiple(m, self.cfg.rate())?;
        let z = self.encode(s, &p.motion)?;
        self.decode(s, &z)?.crop(p.original_len)
    }

    pub fn checkpoint(&self, s: &ParamStore) -> Checkpoint {
        let mut meta = self.cfg.to_kv().with_prefix("ae");
        meta.set("kind", "autoencoder");
        Checkpoint::new(meta, s.entries().into_iter().filter(|(n, _)| n.starts_with("ae.")).collect())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ParamStore)> {
        let cfg = AutoencoderConfig::from_kv(&ck.metadata.section("ae"))?;
        let mut store = ParamStore::new();
        let ae = Self::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        store.load_entries(&ck.entries)?;
        Ok((ae, store))
    }
}

/// `Σ_t ‖m̂_t − m_t‖₁`.
pub fn ae_loss(m: &Tensor, m_hat: &Tensor) -> Result<f64> {
    if m.shape() != m_hat.shape() {
        return Err(Error::Dimension(format!("ae_loss shapes {:?} vs {:?}", m.shape(), m_hat.shape())));
    }
    Ok(m.data().iter().zip(m_hat.data()).map(|(a, b)| (a - b).abs()).sum())
}

/// The same loss on the tape.
pub fn ae_loss_var(t: &mut Tape, m: Var, m_hat: Var) -> Result<Var> {
    let d = t.sub(m_hat, m)?;
    let a = t.abs(d);
    Ok(t.sum_all(a))
}

#[derive(Clone, Debug)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            optim: AdamWConfig { lr: 2e-3, warmup: 100, weight_decay: 0.0, decay_to: Some(2000), ..Default::default() },
            seed: 0,
        }
    }
}

impl AeTrainConfig {
    pub const KEYS: &'static [&'static str] =
        &["steps", "batch_size", "lr", "warmup", "weight_decay", "decay_to", "clip_norm", "seed"];

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.optim.lr);
        kv.set("warmup", self.optim.warmup);
        kv.set("weight_decay", self.optim.weight_decay);
        if let Some(d) = self.optim.decay_to {
            kv.set("decay_to", d);
        }
        if let Some(c) = self.optim.clip_norm {
            kv.set("clip_norm", c);
        }
        kv.set("seed", self.seed);
        kv
    }

    /// Unset keys keep their defaults; `decay_to` follows `steps` unless set.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_known(Self::KEYS)?;
        let d = Self::default();
        let steps = kv.parse_or("steps", d.steps)?;
        let c = Self {
            steps,
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            optim: AdamWConfig {
                lr: kv.parse_or("lr", d.optim.lr)?,
                warmup: kv.parse_or("warmup", d.optim.warmup)?,
                weight_decay: kv.parse_or("weight_decay", d.optim.weight_decay)?,
                decay_to: Some(kv.parse_or("decay_to", steps)?),
                clip_norm: match kv.get("clip_norm") {
                    Some(_) => Some(kv.parse_or("clip_norm", 0.0)?),
                    None => None,
                },
                ..d.optim
            },
            seed: kv.parse_or("seed", d.seed)?,
        };
        if c.steps == 0 || c.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        c.optim.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Default)]
pub struct AeTrainReport {
    /// Per-element L1 of each step's batch, before the update.
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
}

impl AeTrainReport {
    pub fn initial(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Mean per-element L1 reconstruction error over `corpus`.
pub fn mean_l1(ae: &Autoencoder, s: &ParamStore, corpus: &[MotionSequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for m in corpus {
        let r = ae.reconstruct(s, m)?;
        total += ae_loss(m.frames(), r.frames())?;
        count += m.frames().len();
    }
    Ok(total / count.max(1) as f64)
}

pub fn train_ae(
    ae: &Autoencoder,
    store: &mut ParamStore,
    corpus: &[MotionSequence],
    cfg: &AeTrainConfig,
) -> Result<AeTrainReport> {
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    if let Some(m) = corpus.iter().find(|m| m.dim() != ae.cfg.input_dim) {
        return Err(Error::Config(format!(
            "corpus has {} channels, autoencoder expects {}",
            m.dim(),
            ae.cfg.input_dim
        )));
    }
    let padded: Vec<Tensor> = corpus
        .iter()
        .map(|m| pad_to_multiple(m, ae.cfg.rate()).map(|p| p.motion.frames().clone()))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optim)?;
    let mut order: Vec<usize> = (0..padded.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.batch_size.clamp(1, padded.len());
    let mut report = AeTrainReport::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut t = Tape::new();
        let mut total: Option<Var> = None;
        let mut elems = 0usize;
        for &i in &batch {
            let x = t.constant(padded[i].clone());
            let z = ae.encode_var(&mut t, store, x)?;
            let y = ae.decode_var(&mut t, store, z)?;
            let l = ae_loss_var(&mut t, x, y)?;
            elems += padded[i].len();
            total = Some(match total {
                Some(acc) => t.add(acc, l)?,
                None => l,
            });
        }
        let total = total.expect("batch is nonempty");
        let loss = t.scale(total, 1.0 / elems as f64);
        let lv = t.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss { step, last_finite: report.losses.last().copied() });
        }
        let grads = t.backward(loss)?;
        let lr = opt.step(store, &t.param_grads(&grads))?;
        report.losses.push(lv);
        report.lrs.push(lr);
        if step % 200 == 0 {
            log::debug!("ae step {step} loss {lv:.6} lr {lr:.2e}");
        }
    }
    Ok(report)
}

/// Continues training on a new corpus. With `frozen`, every autoencoder
/// parameter is frozen for the run and left bit-identical.
pub fn finetune_ae(
    ae: &Autoencoder,
    store: &mut ParamStore,
    corpus: &[MotionSequence],
    cfg: &AeTrainConfig,
    frozen: bool,
) -> Result<AeTrainReport> {
    let saved: Vec<bool> = store.iter().map(|p| p.frozen).collect();
    if frozen {
        store.set_frozen_prefix("ae.", true);
    }
    let r = train_ae(ae, store, corpus, cfg);
    for (p, f) in store.iter_mut().zip(saved) {
        p.frozen = f;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Autoencoder, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = AutoencoderConfig { input_dim: 3, hidden: 4, latent: 2, layers: 1, down_blocks: 2 };
        let ae = Autoencoder::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        (ae, store)
    }

    fn motion(t: usize, d: usize) -> MotionSequence {
        let data = (0..t * d).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        MotionSequence::new(Tensor::new(vec![t, d], data).unwrap(), 20.0).unwrap()
    }

    #[test]
    fn token_counts() {
        let (ae, s) = tiny();
        assert_eq!(ae.encode(&s, &motion(64, 3)).unwrap().len(), 16);
        assert_eq!(ae.encode(&s, &motion(4, 3)).unwrap().len(), 1);
        let zero = MotionSequence::new(Tensor::zeros(&[8, 3]), 20.0).unwrap();
        assert!(ae.encode(&s, &zero).unwrap().tokens.is_finite());
        assert!(matches!(ae.encode(&s, &motion(13, 3)), Err(Error::Precondition(_))));
    }

    #[test]
    fn decode_shapes() {
        let (ae, s) = tiny();
        let z = MotionTokens { tokens: Tensor::zeros(&[16, 2]), source_fps: 20.0 };
        assert_eq!(ae.decode(&s, &z).unwrap().len(), 64);
        let m = motion(24, 3);
        let r = ae.decode(&s, &ae.encode(&s, &m).unwrap()).unwrap();
        assert_eq!(r.frames().shape(), m.frames().shape());
        assert_eq!(ae.reconstruct(&s, &motion(13, 3)).unwrap().len(), 13);
    }

    #[test]
    fn loss_examples() {
        let a = Tensor::row_vector(&[1.0, 2.0]);
        assert_eq!(ae_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(ae_loss(&a, &Tensor::zeros(&[1, 2])).unwrap(), 3.0);
        let b = Tensor::row_vector(&[0.5, -2.0]);
        assert_eq!(ae_loss(&a, &b).unwrap(), ae_loss(&b, &a).unwrap());
        assert!(matches!(ae_loss(&a, &Tensor::zeros(&[2, 1])), Err(Error::Dimension(_))));
    }

    #[test]
    fn config_invariants() {
        let bad = AutoencoderConfig { down_blocks: 3, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let c = AutoencoderConfig::default();
        assert_eq!(AutoencoderConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn finetune_dimension_mismatch_and_frozen_mode() {
        let (ae, mut s) = tiny();
        let cfg = AeTrainConfig { steps: 3, ..Default::default() };
        assert!(matches!(finetune_ae(&ae, &mut s, &[motion(8, 5)], &cfg, false), Err(Error::Config(_))));
        let before = s.entries();
        finetune_ae(&ae, &mut s, &[motion(8, 3)], &cfg, true).unwrap();
        assert_eq!(s.entries(), before);
        assert!(s.iter().all(|p| !p.frozen));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (ae, s) = tiny();
        let ck = ae.checkpoint(&s);
        let (ae2, s2) = Autoencoder::from_checkpoint(&Checkpoint::read_from(&mut ck.to_bytes().as_slice()).unwrap()).unwrap();
        let m = motion(8, 3);
        let a = ae.encode(&s, &m).unwrap().tokens;
        let b = ae2.encode(&s2, &m).unwrap().tokens;
        assert!(a.max_abs_diff(&b) < 1e-5);
    }
}
