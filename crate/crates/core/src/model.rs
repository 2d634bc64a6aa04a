//! The assembled generator: text and audio encoders, masked transformer,
//! denoising head and noise schedule, sharing one parameter store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::condition::{AudioClip, AudioEncoder, AudioEncoderConfig, TextEncoder};
use crate::config::KvConfig;
use crate::diffusion::{BetaSchedule, DenoiseHead, DiTConfig, DiffusionSchedule, HeadKind, NoiseLoss};
use crate::error::{Error, Result};
use crate::optim::EmaState;
use crate::params::{Checkpoint, ParamStore};
use crate::tape::Tape;
use crate::transformer::{CondVars, MarTransformer, TransformerConfig};

pub const EMA_PREFIX: &str = "ema:";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent: usize,
    pub cond_dim: usize,
    pub text_buckets: usize,
    pub diffusion_steps: usize,
    pub beta_schedule: BetaSchedule,
    pub loss: NoiseLoss,
    pub mar: TransformerConfig,
    pub head: DiTConfig,
    pub audio: AudioEncoderConfig,
}

impl ModelConfig {
    /// Desk-scale defaults around a given token width. Uses the linear beta
    /// schedule; the cosine one is selectable with `model.beta_schedule`.
    pub fn small(latent: usize) -> Self {
        let cond_dim = 32;
        let hidden = 32;
        Self {
            latent,
            cond_dim,
            text_buckets: 512,
            diffusion_steps: 100,
            beta_schedule: BetaSchedule::Linear,
            loss: NoiseLoss::Squared,
            mar: TransformerConfig {
                token_dim: latent,
                hidden,
                heads: 4,
                layers: 2,
                cond_dim,
                out_dim: hidden,
                ..Default::default()
            },
            head: DiTConfig {
                token_dim: latent,
                hidden,
                heads: 4,
                layers: 2,
                freq_dim: 32,
                ..Default::default()
            },
            audio: AudioEncoderConfig { channels: 16, dim: cond_dim, ..Default::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mar.validate()?;
        self.head.validate()?;
        let checks = [
            (self.mar.token_dim == self.latent, "mar.token_dim must equal the latent width"),
            (self.head.token_dim == self.latent, "head.token_dim must equal the latent width"),
            (self.mar.cond_dim == self.cond_dim, "mar.cond_dim must equal cond_dim"),
            (self.audio.dim == self.cond_dim, "audio.dim must equal cond_dim"),
            (self.mar.out_dim == self.head.hidden, "mar.out_dim must equal head.hidden"),
            (self.text_buckets > 0 && self.diffusion_steps > 0, "text_buckets and diffusion_steps must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("model.latent", self.latent);
        kv.set("model.cond_dim", self.cond_dim);
        kv.set("model.text_buckets", self.text_buckets);
        kv.set("model.diffusion_steps", self.diffusion_steps);
        kv.set("model.beta_schedule", self.beta_schedule.as_str());
        kv.set("model.loss", self.loss.as_str());
        kv.merge(&self.mar.to_kv().with_prefix("mar"));
        kv.merge(&self.head.to_kv().with_prefix("head"));
        let mut a = KvConfig::default();
        a.set("channels", self.audio.channels);
        a.set("layers", self.audio.layers);
        a.set("kernel", self.audio.kernel);
        a.set("stride", self.audio.stride);
        a.set("slope", self.audio.slope);
        kv.merge(&a.with_prefix("audio"));
        kv
    }

    /// Reads a configuration, filling unset keys from [`ModelConfig::small`]
    /// and deriving the tied widths.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let m = kv.section("model");
        let latent = m.parse_or("latent", 16usize)?;
        let base = Self::small(latent);
        let cond_dim = m.parse_or("cond_dim", base.cond_dim)?;
        let mut mar_kv = base.mar.to_kv();
        mar_kv.merge(&kv.section("mar"));
        mar_kv.set("token_dim", latent);
        mar_kv.set("cond_dim", cond_dim);
        let mut head_kv = base.head.to_kv();
        head_kv.merge(&kv.section("head"));
        head_kv.set("token_dim", latent);
        let head = DiTConfig::from_kv(&head_kv)?;
        mar_kv.set("out_dim", head.hidden);
        let mar = TransformerConfig::from_kv(&mar_kv)?;
        let a = kv.section("audio");
        let audio = AudioEncoderConfig {
            channels: a.parse_or("channels", base.audio.channels)?,
            layers: a.parse_or("layers", base.audio.layers)?,
            kernel: a.parse_or("kernel", base.audio.kernel)?,
            stride: a.parse_or("stride", base.audio.stride)?,
            slope: a.parse_or("slope", base.audio.slope)?,
            dim: cond_dim,
        };
        let c = Self {
            latent,
            cond_dim,
            text_buckets: m.parse_or("text_buckets", base.text_buckets)?,
            diffusion_steps: m.parse_or("diffusion_steps", base.diffusion_steps)?,
            beta_schedule: match m.get("beta_schedule") {
                Some(s) => BetaSchedule::parse(s)?,
                None => base.beta_schedule,
            },
            loss: match m.get("loss") {
                Some(s) => NoiseLoss::parse(s)?,
                None => base.loss,
            },
            mar,
            head,
            audio,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub struct OmniModel {
    pub cfg: ModelConfig,
    pub text: TextEncoder,
    pub audio: Option<AudioEncoder>,
    pub mar: MarTransformer,
    pub head: DenoiseHead,
    pub sched: DiffusionSchedule,
}

impl OmniModel {
    /// A text-conditioned model; audio parts are added by
    /// [`OmniModel::add_audio`].
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let text = TextEncoder::new(store, "text", cfg.text_buckets, cfg.cond_dim, rng)?;
        let mar = MarTransformer::new(store, cfg.mar.clone(), rng)?;
        let head = DenoiseHead::new(store, cfg.head.clone(), rng)?;
        let sched = DiffusionSchedule::new(cfg.beta_schedule, cfg.diffusion_steps)?;
        let mut audio = None;
        if cfg.mar.cross_attention {
            audio = Some(AudioEncoder::new(store, "audio", cfg.audio.clone(), rng)?);
        }
        Ok(Self { cfg, text, audio, mar, head, sched })
    }

    /// Adds an audio encoder and, if `cross_attention`, cross-attention layers.
    pub fn add_audio<R: Rng>(&mut self, store: &mut ParamStore, cross_attention: bool, rng: &mut R) -> Result<()> {
        if self.audio.is_none() {
            self.audio = Some(AudioEncoder::new(store, "audio", self.cfg.audio.clone(), rng)?);
        }
        if cross_attention && !self.mar.cfg.cross_attention {
            self.mar.add_cross_attention(store, rng)?;
            self.cfg.mar.cross_attention = true;
        }
        Ok(())
    }

    pub fn head_kind(&self) -> HeadKind {
        self.cfg.head.kind
    }

    /// Conditioning for one item. An empty prompt with no audio is the
    /// unconditional branch.
    pub fn condition_vars(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        prompt: &str,
        audio: Option<&AudioClip>,
    ) -> Result<CondVars> {
        let text = self.text.forward(t, s, prompt)?;
        match (audio, &self.audio) {
            (Some(clip), Some(enc)) => {
                let (g, seq) = enc.forward(t, s, clip)?;
                let adaln = t.add(text, g)?;
                Ok(CondVars { adaln, cross: Some(seq) })
            }
            (Some(_), None) => Err(Error::Config("model has no audio encoder".into())),
            (None, _) => Ok(CondVars { adaln: text, cross: None }),
        }
    }

    /// Model description stored in checkpoints.
    pub fn metadata(&self) -> KvConfig {
        let mut kv = self.cfg.to_kv();
        kv.set("model.audio", self.audio.is_some());
        kv
    }

    /// Live parameters plus EMA shadows under [`EMA_PREFIX`].
    pub fn checkpoint(&self, store: &ParamStore, ema: Option<&EmaState>, extra: &KvConfig) -> Checkpoint {
        let mut meta = self.metadata();
        meta.merge(extra);
        let mut entries = store.entries();
        if let Some(e) = ema {
            entries.extend(e.shadow.iter().map(|(n, t)| (format!("{EMA_PREFIX}{n}"), t.clone())));
        }
        Checkpoint::new(meta, entries)
    }

    /// Builds the model described by checkpoint metadata, with parameters
    /// loaded from its entries (EMA shadows when `use_ema`).
    pub fn from_checkpoint(ck: &Checkpoint, use_ema: bool) -> Result<(Self, ParamStore)> {
        let cfg = ModelConfig::from_kv(&ck.metadata)?;
        let audio = ck.metadata.bool_or("model.audio", false)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(&mut store, cfg, &mut rng)?;
        if audio {
            model.add_audio(&mut store, false, &mut rng)?;
        }
        store.load_entries(&ck.entries)?;
        if use_ema {
            for (n, t) in ck.entries.iter().filter_map(|(n, t)| n.strip_prefix(EMA_PREFIX).map(|s| (s, t))) {
                if let Some(p) = store.get_mut(n) {
                    if p.value.shape() != t.shape() {
                        return Err(Error::Format(format!("EMA entry {n} has the wrong shape")));
                    }
                    p.value = t.clone();
                }
            }
        }
        Ok((model, store))
    }

    /// The EMA state stored in a checkpoint, for parameters of `store`.
    /// Parameters without a stored shadow start from their current value.
    pub fn ema_from_checkpoint(ck: &Checkpoint, store: &ParamStore, decay: f64) -> Result<EmaState> {
        let mut ema = EmaState::new(store, decay)?;
        for (n, t) in ema.shadow.iter_mut() {
            if let Some(v) = ck.get(&format!("{EMA_PREFIX}{n}")) {
                if v.shape() == t.shape() {
                    *t = v.clone();
                }
            }
        }
        Ok(ema)
    }
}
