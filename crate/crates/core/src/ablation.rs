//! Cumulative component ladder: each variant adds one component to the
//! previous one, is pretrained on text, fine-tuned on speech and scored.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{train_ae, AeTrainConfig, Autoencoder, AutoencoderConfig};
use crate::config::KvConfig;
use crate::condition::Modality;
use crate::diffusion::{HeadKind, SigmaMode};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::infer::{GenerationRequest, Generator, UnmaskMode};
use crate::model::ModelConfig;
use crate::nn::NormKind;
use crate::params::{Checkpoint, ParamStore};
use crate::synth::{synthesize_corpus, AudioKind, SyntheticItem, SyntheticSpec};
use crate::train::{finetune_multimodal, pretrain_t2m, Task, TrainRunConfig};
use crate::transformer::OrderMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Causal,
    Dit,
    Gated,
    Rmsnorm,
    Xattn,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Baseline, Variant::Causal, Variant::Dit, Variant::Gated, Variant::Rmsnorm, Variant::Xattn];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Causal => "causal",
            Variant::Dit => "dit",
            Variant::Gated => "gated",
            Variant::Rmsnorm => "rmsnorm",
            Variant::Xattn => "xattn",
        }
    }

    fn rank(self) -> usize {
        Self::ALL.iter().position(|&v| v == self).expect("listed")
    }

    fn has(self, other: Variant) -> bool {
        self.rank() >= other.rank()
    }

    /// Model configuration, cross-attention flag and unmasking order.
    pub fn apply(self, base: &ModelConfig) -> (ModelConfig, bool, UnmaskMode) {
        let mut c = base.clone();
        c.mar.cross_attention = false;
        c.mar.order_mode =
            if self.has(Variant::Causal) { OrderMode::CausalSequential } else { OrderMode::BidirectionalReordered };
        c.head.kind = if self.has(Variant::Dit) { HeadKind::Dit } else { HeadKind::Mlp };
        c.mar.gating = self.has(Variant::Gated);
        c.mar.norm = if self.has(Variant::Rmsnorm) { NormKind::Rms } else { NormKind::Layer };
        let unmask = if self.has(Variant::Causal) { UnmaskMode::Sequential } else { UnmaskMode::Cosine };
        (c, self.has(Variant::Xattn), unmask)
    }
}

#[derive(Clone, Debug)]
pub struct AblationSetup {
    pub text_corpus: Vec<SyntheticItem>,
    pub speech_corpus: Vec<SyntheticItem>,
    pub ae: Autoencoder,
    pub ae_store: ParamStore,
    pub ae_checkpoint: Checkpoint,
    pub model: ModelConfig,
    pub pretrain: TrainRunConfig,
    pub finetune: TrainRunConfig,
    /// Unmask iterations for the cosine baseline.
    pub baseline_iterations: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub fid: f64,
    pub diversity: f64,
    pub loss_final: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "variant,fid,diversity,loss_final,seed";

impl AblationRow {
    pub fn to_csv(&self) -> String {
        format!("{},{:.9e},{:.9e},{:.9e},{}", self.variant.as_str(), self.fid, self.diversity, self.loss_final, self.seed)
    }
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

/// Pretrains, fine-tunes and scores one variant. `loss_final` is the
/// fixed-draw pretraining loss after the last step; FID and diversity
/// compare speech-conditioned generations with the speech corpus.
pub fn run_variant(setup: &AblationSetup, v: Variant) -> Result<AblationRow> {
    let (mc, cross, unmask) = v.apply(&setup.model);
    let ae_hash = setup.ae_checkpoint.hash();
    let pre = TrainRunConfig { task: Task::T2m, seed: setup.seed, ..setup.pretrain.clone() };
    let (tm, rep) = pretrain_t2m(&mc, &pre, &setup.ae, &setup.ae_store, &ae_hash, &setup.text_corpus)?;
    log::info!("{}: pretrain loss {:.5} -> {:.5}", v.as_str(), rep.eval_initial, rep.eval_final);
    let ft = TrainRunConfig { task: Task::Speech, seed: setup.seed, cross_attention: cross, ..setup.finetune.clone() };
    let (ftm, _) = finetune_multimodal(&ft, &tm.checkpoint(), &setup.ae, &setup.ae_store, &ae_hash, &setup.speech_corpus)?;
    let gen = Generator::load(&ftm.checkpoint(), &setup.ae_checkpoint, true)?;
    let mut generated = Vec::with_capacity(setup.speech_corpus.len());
    for (i, it) in setup.speech_corpus.iter().enumerate() {
        let req = GenerationRequest {
            prompt: it.caption.clone(),
            audio: it.audio.clone(),
            modality: Modality::Speech,
            frames: it.motion.len(),
            cfg_scale: None,
            seed: setup.seed.wrapping_add(i as u64),
            iterations: (unmask == UnmaskMode::Cosine).then_some(setup.baseline_iterations),
            unmask,
            sigma: SigmaMode::Posterior,
            conditional_only: false,
        };
        generated.push(gen.generate(&req)?.motion);
    }
    let real: Vec<_> = setup.speech_corpus.iter().map(|it| it.motion.clone()).collect();
    let scores = evaluate(&real, &generated, setup.seed)?;
    Ok(AblationRow { variant: v, fid: scores.fid, diversity: scores.diversity, loss_final: rep.eval_final, seed: setup.seed })
}

/// Key=value defaults of the desk-scale ladder. Sections: `data`, `ae`,
/// `ae_train`, the model sections, `train`, `finetune` and `ablate`.
pub fn toy_defaults() -> KvConfig {
    let mut kv = KvConfig::default();
    kv.merge(&SyntheticSpec::default().to_kv().with_prefix("data"));
    let ae = AutoencoderConfig { input_dim: 8, hidden: 32, latent: 8, layers: 1, down_blocks: 2 };
    kv.merge(&ae.to_kv().with_prefix("ae"));
    kv.merge(&AeTrainConfig { steps: 1000, ..Default::default() }.to_kv().with_prefix("ae_train"));
    kv.merge(&ModelConfig::small(8).to_kv());
    let pre = TrainRunConfig { lr: 1e-3, warmup: 100, steps: 600, weight_decay: 0.0, ema_decay: 0.99, max_len: 64, ..Default::default() };
    kv.merge(&pre.to_kv().with_prefix("train"));
    let ft = TrainRunConfig { task: Task::Speech, steps: 200, warmup: 20, ..pre };
    kv.merge(&ft.to_kv().with_prefix("finetune"));
    kv.set("ablate.baseline_iterations", 2);
    kv
}

/// Builds both toy corpora and trains their shared autoencoder. `overrides`
/// replaces keys of [`toy_defaults`]; `seed` drives every stage.
pub fn toy_setup(overrides: &KvConfig, seed: u64) -> Result<AblationSetup> {
    let mut kv = toy_defaults();
    let known: Vec<String> = kv.keys().map(str::to_string).collect();
    let known: Vec<&str> = known.iter().map(String::as_str).collect();
    overrides.check_known(&known)?;
    kv.merge(overrides);
    let mut data = SyntheticSpec::from_kv(&kv.section("data"))?;
    data.seed = data.seed.wrapping_add(seed);
    data.audio = None;
    let speech_spec = SyntheticSpec { seed: data.seed.wrapping_add(1), audio: Some(AudioKind::Speech), ..data.clone() };
    let text_corpus = synthesize_corpus(&data)?;
    let speech_corpus = synthesize_corpus(&speech_spec)?;
    let mut ae_cfg = AutoencoderConfig::from_kv(&kv.section("ae"))?;
    ae_cfg.input_dim = data.dim;
    let mut ae_train = AeTrainConfig::from_kv(&kv.section("ae_train"))?;
    ae_train.seed = ae_train.seed.wrapping_add(seed);
    let mut ae_store = ParamStore::new();
    let ae = Autoencoder::new(&mut ae_store, ae_cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let motions: Vec<_> = text_corpus.iter().chain(&speech_corpus).map(|it| it.motion.clone()).collect();
    let r = train_ae(&ae, &mut ae_store, &motions, &ae_train)?;
    log::info!("toy autoencoder L1 {:.5}", r.last());
    let ae_checkpoint = ae.checkpoint(&ae_store);
    let mut model = ModelConfig::from_kv(&kv)?;
    if model.latent != ae.cfg.latent {
        model = ModelConfig::from_kv(&{
            let mut k = kv.clone();
            k.set("model.latent", ae.cfg.latent);
            k
        })?;
    }
    Ok(AblationSetup {
        text_corpus,
        speech_corpus,
        ae,
        ae_store,
        ae_checkpoint,
        model,
        pretrain: TrainRunConfig::from_kv(&kv.section("train"))?,
        finetune: TrainRunConfig::from_kv(&kv.section("finetune"))?,
        baseline_iterations: kv.parse_or("ablate.baseline_iterations", 2)?,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_is_cumulative() {
        let base = ModelConfig::small(8);
        let (b, bx, bu) = Variant::Baseline.apply(&base);
        assert_eq!(b.mar.order_mode, OrderMode::BidirectionalReordered);
        assert_eq!(b.head.kind, HeadKind::Mlp);
        assert!(!b.mar.gating && !bx);
        assert_eq!(b.mar.norm, NormKind::Layer);
        assert_eq!(bu, UnmaskMode::Cosine);
        let (g, gx, _) = Variant::Gated.apply(&base);
        assert_eq!(g.mar.order_mode, OrderMode::CausalSequential);
        assert_eq!(g.head.kind, HeadKind::Dit);
        assert!(g.mar.gating && !gx);
        assert_eq!(g.mar.norm, NormKind::Layer);
        let (x, xx, xu) = Variant::Xattn.apply(&base);
        assert!(xx && x.mar.gating && x.mar.norm == NormKind::Rms);
        assert_eq!(xu, UnmaskMode::Sequential);
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("all").is_err());
    }

    #[test]
    fn csv_schema() {
        let r = AblationRow { variant: Variant::Causal, fid: 1.0, diversity: 2.0, loss_final: 0.5, seed: 3 };
        let csv = to_csv(&[r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), 5);
        assert!(lines[1].starts_with("causal,"));
    }
}
