use std::sync::OnceLock;

use omni_core::ablation::{toy_setup, AblationSetup};
use omni_core::condition::Modality;
use omni_core::config::KvConfig;
use omni_core::diffusion::{
    gaussian, noise_loss, DiTConfig, DenoiseHead, NoiseLoss, SigmaMode, TokenMixing,
};
use omni_core::eval::{diversity, DIVERSITY_PAIRS};
use omni_core::infer::{GenerationRequest, Generator, UnmaskMode};
use omni_core::model::EMA_PREFIX;
use omni_core::params::{Checkpoint, ParamStore};
use omni_core::tape::Tape;
use omni_core::train::{finetune_multimodal, pretrain_t2m, resume, Task, TrainReport, TrainRunConfig, TrainedModel};
use omni_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> &'static AblationSetup {
    static S: OnceLock<AblationSetup> = OnceLock::new();
    S.get_or_init(|| toy_setup(&KvConfig::default(), 5).unwrap())
}

fn pretrain(steps: usize, lr: f64) -> (TrainedModel, TrainReport) {
    let s = setup();
    let cfg = TrainRunConfig { steps, lr, ..s.pretrain.clone() };
    pretrain_t2m(&s.model, &cfg, &s.ae, &s.ae_store, &s.ae_checkpoint.hash(), &s.text_corpus).unwrap()
}

fn pretrained() -> &'static (TrainedModel, TrainReport) {
    static P: OnceLock<(TrainedModel, TrainReport)> = OnceLock::new();
    P.get_or_init(|| pretrain(setup().pretrain.steps, setup().pretrain.lr))
}

fn finetune(steps: usize) -> (TrainedModel, TrainReport) {
    let s = setup();
    let cfg = TrainRunConfig { steps, ..s.finetune.clone() };
    let ck = pretrained().0.checkpoint();
    finetune_multimodal(&cfg, &ck, &s.ae, &s.ae_store, &s.ae_checkpoint.hash(), &s.speech_corpus).unwrap()
}

fn generator(ck: &Checkpoint, ema: bool) -> Generator {
    Generator::load(ck, &setup().ae_checkpoint, ema).unwrap()
}

fn text_request(frames: usize, seed: u64) -> GenerationRequest {
    GenerationRequest { sigma: SigmaMode::Zero, ..GenerationRequest::text(&setup().text_corpus[0].caption, frames, seed) }
}

#[test]
fn pretraining_is_deterministic() {
    let (a, ra) = pretrain(20, 1e-3);
    let (b, rb) = pretrain(20, 1e-3);
    assert_eq!(ra, rb);
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (a, _) = pretrain(1, 0.0);
    let (b, _) = pretrain(6, 0.0);
    assert_eq!(a.store.entries(), b.store.entries());
    for (n, t) in &b.ema.shadow {
        assert_eq!(t, b.store.value(n).unwrap(), "{n}");
    }
}

#[test]
fn finetuning_keeps_the_head_bit_identical() {
    let pre = pretrained().0.checkpoint();
    let (ft, _) = finetune(100);
    let post = ft.checkpoint();
    let prefix = pretrained().0.model.head.prefix();
    let head = pre.entry_bytes_with_prefix(prefix);
    assert!(!head.is_empty());
    assert_eq!(head, post.entry_bytes_with_prefix(prefix));
    let ema_head = format!("{EMA_PREFIX}{prefix}");
    assert!(!pre.entry_bytes_with_prefix(&ema_head).is_empty());
    assert_eq!(pre.entry_bytes_with_prefix(&ema_head), post.entry_bytes_with_prefix(&ema_head));
    assert_ne!(pre.entry_bytes_with_prefix("mar."), post.entry_bytes_with_prefix("mar."));
    assert!(post.entries.iter().any(|(n, _)| n.contains(".xattn.")));
    assert!(ft.store.iter().filter(|p| p.name.starts_with(prefix)).all(|p| p.frozen));
}

#[test]
fn finetune_rejects_unfrozen_head_and_text_task() {
    let s = setup();
    let ck = pretrained().0.checkpoint();
    let h = s.ae_checkpoint.hash();
    let bad = TrainRunConfig { unfreeze_head: true, ..s.finetune.clone() };
    let r = finetune_multimodal(&bad, &ck, &s.ae, &s.ae_store, &h, &s.speech_corpus);
    assert!(matches!(r, Err(Error::Config(_))));
    let bad = TrainRunConfig { task: Task::T2m, ..s.finetune.clone() };
    let r = finetune_multimodal(&bad, &ck, &s.ae, &s.ae_store, &h, &s.speech_corpus);
    assert!(matches!(r, Err(Error::Config(_))));
    let r = finetune_multimodal(&s.finetune, &ck, &s.ae, &s.ae_store, &h, &s.text_corpus);
    assert!(matches!(r, Err(Error::Input(_))));
}

#[test]
fn zero_initialised_audio_path_reproduces_text_model() {
    let s = setup();
    let base = resume(&pretrained().0.checkpoint(), 0.99).unwrap();
    let mut with_audio = base.clone();
    with_audio.model.add_audio(&mut with_audio.store, true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let g0 = generator(&base.checkpoint(), false);
    let g1 = generator(&with_audio.checkpoint(), false);
    let item = &s.speech_corpus[0];
    let text = GenerationRequest { cfg_scale: Some(4.5), ..text_request(16, 9) };
    let speech = GenerationRequest { audio: item.audio.clone(), modality: Modality::Speech, ..text.clone() };
    let a = g0.generate(&text).unwrap();
    let b = g1.generate(&speech).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.motion, b.motion);
}

#[test]
fn speech_finetune_reduces_loss_by_thirty_percent() {
    let (_, rep) = finetune(1000);
    let drop = 1.0 - rep.eval_final / rep.eval_initial;
    assert!(drop >= 0.30, "loss {} -> {} ({:.1}% drop)", rep.eval_initial, rep.eval_final, 100.0 * drop);
}

#[test]
fn generation_rounds_and_lengths() {
    let g = generator(&pretrained().0.checkpoint(), true);
    let one = g.generate(&text_request(4, 1)).unwrap();
    assert_eq!(one.record.rounds, 1);
    assert_eq!(one.tokens.shape()[0], 1);
    let out = g.generate(&text_request(10, 1)).unwrap();
    assert_eq!(out.tokens.shape()[0], 3);
    assert_eq!(out.record.rounds, 3);
    assert_eq!(out.motion.len(), 10);
    let cos = GenerationRequest { unmask: UnmaskMode::Cosine, iterations: Some(2), ..text_request(16, 1) };
    let c = g.generate(&cos).unwrap();
    assert_eq!(c.record.rounds, 2);
    assert_eq!(c.motion.len(), 16);
}

#[test]
fn generation_is_deterministic_and_cfg_zero_is_conditional() {
    let g = generator(&pretrained().0.checkpoint(), true);
    let req = text_request(16, 4);
    assert_eq!(g.generate(&req).unwrap().motion.to_bytes(), g.generate(&req).unwrap().motion.to_bytes());
    let zero = GenerationRequest { cfg_scale: Some(0.0), ..req.clone() };
    let cond = GenerationRequest { conditional_only: true, ..req.clone() };
    assert_eq!(g.generate(&zero).unwrap().motion.to_bytes(), g.generate(&cond).unwrap().motion.to_bytes());
    let guided = g.generate(&req).unwrap();
    assert_ne!(guided.tokens, g.generate(&cond).unwrap().tokens);
}

#[test]
fn early_tokens_ignore_later_mask_embeddings() {
    let g = generator(&pretrained().0.checkpoint(), true);
    let req = GenerationRequest { sigma: SigmaMode::Posterior, ..text_request(16, 2) };
    let base = g.generate(&req).unwrap();
    let d = base.tokens.shape()[1];
    let j = 2;
    let mut off = Tensor::zeros(&[4, d]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in j..4 {
        for v in off.row_mut(i) {
            *v = rng.random_range(-3.0..3.0);
        }
    }
    let pert = g.generate_with(&req, Some(&off)).unwrap();
    for i in 0..j {
        assert_eq!(base.tokens.row(i), pert.tokens.row(i));
    }
    assert!((j..4).any(|i| base.tokens.row(i) != pert.tokens.row(i)));
}

#[test]
fn mismatched_autoencoder_is_rejected() {
    let s = setup();
    let mut other = s.ae_checkpoint.clone();
    other.metadata.set("note", "different");
    let r = Generator::load(&pretrained().0.checkpoint(), &other, true);
    assert!(matches!(r, Err(Error::HashMismatch(_))));
}

#[test]
fn zero_prediction_loss_matches_gaussian_moments() {
    let d = 8;
    let n = 10_000;
    let eps = gaussian(&mut ChaCha8Rng::seed_from_u64(21), &[n, d]);
    let run = |kind| {
        let mut t = Tape::new();
        let e = t.constant(eps.clone());
        let z = t.constant(Tensor::zeros(&[n, d]));
        let l = noise_loss(&mut t, e, z, kind).unwrap();
        t.value(l).data()[0]
    };
    // E‖ε‖² per element is 1; E‖ε‖ is the chi mean √2·Γ((d+1)/2)/Γ(d/2).
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let gamma_half = 3.5 * 2.5 * 1.5 * 0.5 * sqrt_pi;
    let chi_mean = 2f64.sqrt() * gamma_half / 6.0;
    let sq = run(NoiseLoss::Squared);
    let norm = run(NoiseLoss::Norm);
    assert!((sq - 1.0).abs() < 0.02, "squared {sq}");
    assert!((norm - chi_mean).abs() / chi_mean < 0.01, "norm {norm} vs {chi_mean}");
}

#[test]
fn head_condition_reaches_only_mixed_tokens() {
    for mixing in [TokenMixing::PerToken, TokenMixing::Full] {
        let cfg = DiTConfig { token_dim: 3, hidden: 4, heads: 2, layers: 2, ff_mult: 2, freq_dim: 4, token_mixing: mixing, ..DiTConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut s = ParamStore::new();
        let head = DenoiseHead::new(&mut s, cfg, &mut rng).unwrap();
        for p in s.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::new(shape.clone(), (0..shape.iter().product()).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        }
        let x = gaussian(&mut rng, &[4, 3]);
        let z = gaussian(&mut rng, &[4, 4]);
        let steps = [3, 7, 1, 5];
        let base = head.predict(&s, &x, &steps, &z).unwrap();
        for i in 0..4 {
            let mut z2 = z.clone();
            z2.row_mut(i)[0] += 1.0;
            let out = head.predict(&s, &x, &steps, &z2).unwrap();
            assert_ne!(out.row(i), base.row(i));
            for k in (0..4).filter(|&k| k != i) {
                match mixing {
                    TokenMixing::PerToken => assert_eq!(out.row(k), base.row(k)),
                    TokenMixing::Full => assert_ne!(out.row(k), base.row(k)),
                }
            }
        }
    }
}

#[test]
fn head_ignores_condition_at_zero_init() {
    let cfg = DiTConfig { token_dim: 3, hidden: 4, heads: 2, layers: 2, ff_mult: 2, freq_dim: 4, ..DiTConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut s = ParamStore::new();
    let head = DenoiseHead::new(&mut s, cfg, &mut rng).unwrap();
    let x = gaussian(&mut rng, &[4, 3]);
    let a = head.predict(&s, &x, &[2; 4], &gaussian(&mut rng, &[4, 4])).unwrap();
    let b = head.predict(&s, &x, &[2; 4], &gaussian(&mut rng, &[4, 4])).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sampled_diversity_matches_all_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let samples: Vec<Vec<f64>> = (0..100).map(|_| gaussian(&mut rng, &[4]).into_data()).collect();
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..100 {
        for j in i + 1..100 {
            total += samples[i].iter().zip(&samples[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            count += 1;
        }
    }
    let all_pairs = total / count as f64;
    let sampled = diversity(&samples, DIVERSITY_PAIRS, 0).unwrap();
    assert!((sampled - all_pairs).abs() / all_pairs < 0.05, "{sampled} vs {all_pairs}");
}
