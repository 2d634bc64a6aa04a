//! Iterative masked generation: unmask tokens a few at a time, sample each
//! with guided reverse diffusion, then decode to motion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, MotionTokens};
use crate::condition::{AudioClip, Modality};
use crate::diffusion::{cfg_combine, gaussian, step_from_eps, step_noise, SigmaMode};
use crate::error::{Error, Result};
use crate::mask::{mask_ratio, MaskPlan};
use crate::model::OmniModel;
use crate::motion::MotionSequence;
use crate::params::{Checkpoint, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transformer::TokenStream;

pub const TEXT_CFG: f64 = 4.5;
pub const AUDIO_CFG: f64 = 6.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnmaskMode {
    /// Left to right.
    Sequential,
    /// Cosine-shaped counts over a seeded random order.
    Cosine,
}

impl UnmaskMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(UnmaskMode::Sequential),
            "cosine" => Ok(UnmaskMode::Cosine),
            _ => Err(Error::Config(format!("unknown unmask mode {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UnmaskMode::Sequential => "sequential",
            UnmaskMode::Cosine => "cosine",
        }
    }
}

/// Tokens revealed per iteration. Counts are positive and sum to `total`;
/// more iterations than tokens are clamped to `total`.
pub fn unmask_schedule(total: usize, iterations: usize, mode: UnmaskMode) -> Result<Vec<usize>> {
    if iterations == 0 {
        return Err(Error::Precondition("unmask schedule needs at least one iteration".into()));
    }
    if total == 0 {
        return Err(Error::Input("nothing to unmask".into()));
    }
    let k = if iterations > total {
        log::warn!("{iterations} unmask iterations for {total} tokens, clamping to {total}");
        total
    } else {
        iterations
    };
    let counts = match mode {
        UnmaskMode::Sequential => (0..k).map(|i| total / k + usize::from(i < total % k)).collect(),
        UnmaskMode::Cosine => {
            let mut prev = total;
            let mut out = Vec::with_capacity(k);
            for i in 0..k {
                let g = mask_ratio((i + 1) as f64 / k as f64)?;
                let target = ((g * total as f64).floor() as usize).clamp(k - 1 - i, prev - 1);
                out.push(prev - target);
                prev = target;
            }
            out
        }
    };
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub audio: Option<AudioClip>,
    pub modality: Modality,
    /// Requested output frames; tokens cover `ceil(frames / 4)`.
    pub frames: usize,
    /// Defaults to [`TEXT_CFG`] for text and [`AUDIO_CFG`] for audio.
    pub cfg_scale: Option<f64>,
    pub seed: u64,
    /// Defaults to one iteration per token.
    pub iterations: Option<usize>,
    pub unmask: UnmaskMode,
    pub sigma: SigmaMode,
    /// Skips the unconditional branch entirely.
    pub conditional_only: bool,
}

impl GenerationRequest {
    pub fn text(prompt: &str, frames: usize, seed: u64) -> Self {
        Self {
            prompt: prompt.to_string(),
            audio: None,
            modality: Modality::Text,
            frames,
            cfg_scale: None,
            seed,
            iterations: None,
            unmask: UnmaskMode::Sequential,
            sigma: SigmaMode::Posterior,
            conditional_only: false,
        }
    }

    pub fn guidance(&self) -> f64 {
        self.cfg_scale.unwrap_or(if self.modality.is_audio() { AUDIO_CFG } else { TEXT_CFG })
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Input("requested frame count must be positive".into()));
        }
        let a = self.guidance();
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::Input(format!("guidance scale must be finite and non-negative, got {a}")));
        }
        if self.modality.is_audio() != self.audio.is_some() {
            return Err(Error::Input(format!("{} generation needs audio exactly for audio tasks", self.modality.as_str())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub prompt: String,
    pub modality: String,
    pub seed: u64,
    pub cfg_scale: f64,
    pub frames: usize,
    pub tokens: usize,
    pub iterations: usize,
    pub unmask: String,
    pub sigma: String,
    pub conditional_only: bool,
    pub model_hash: String,
    pub ae_hash: String,
    /// Transformer evaluations per branch.
    pub rounds: usize,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Output {
    pub motion: MotionSequence,
    /// Sampled tokens in model scale, `[N, latent]`.
    pub tokens: Tensor,
    pub record: RunRecord,
}

/// A model checkpoint paired with the autoencoder it was trained against.
#[derive(Clone, Debug)]
pub struct Generator {
    pub model: OmniModel,
    pub store: ParamStore,
    pub ae: Autoencoder,
    pub ae_store: ParamStore,
    pub latent_scale: f64,
    pub model_hash: String,
    pub ae_hash: String,
    pub fps: f32,
    /// Longest training sequence, a natural default length.
    pub default_frames: usize,
}

impl Generator {
    /// Fails with a hash mismatch unless `ae_ck` is the autoencoder recorded
    /// in `model_ck`.
    pub fn load(model_ck: &Checkpoint, ae_ck: &Checkpoint, use_ema: bool) -> Result<Self> {
        let recorded = model_ck
            .metadata
            .get("model.ae_hash")
            .ok_or_else(|| Error::Config("model checkpoint records no autoencoder hash".into()))?;
        let ae_hash = ae_ck.hash();
        if recorded != ae_hash {
            return Err(Error::HashMismatch(format!(
                "model was trained with autoencoder {recorded}, got {ae_hash}"
            )));
        }
        let (model, store) = OmniModel::from_checkpoint(model_ck, use_ema)?;
        let (ae, ae_store) = Autoencoder::from_checkpoint(ae_ck)?;
        if ae.cfg.latent != model.cfg.latent {
            return Err(Error::Config("autoencoder latent width does not match the model".into()));
        }
        let latent_scale = model_ck.metadata.parse_or("model.latent_scale", 1.0)?;
        let fps = model_ck.metadata.parse_or("data.fps", 20.0f32)?;
        let default_frames = model_ck.metadata.parse_or("data.frames", crate::motion::DEFAULT_MAX_FRAMES)?;
        Ok(Self { model, store, ae, ae_store, latent_scale, model_hash: model_ck.hash(), ae_hash, fps, default_frames })
    }

    fn condition(&self, prompt: &str, audio: Option<&AudioClip>) -> Result<(Tensor, Option<Tensor>)> {
        let mut t = Tape::new();
        let c = self.model.condition_vars(&mut t, &self.store, prompt, audio)?;
        Ok((t.value(c.adaln).clone(), c.cross.map(|v| t.value(v).clone())))
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<Output> {
        self.generate_with(req, None)
    }

    /// As [`Generator::generate`]; `offsets` perturbs the mask embedding of
    /// still-masked positions.
    pub fn generate_with(&self, req: &GenerationRequest, offsets: Option<&Tensor>) -> Result<Output> {
        req.validate()?;
        let rate = self.ae.cfg.rate();
        let n = req.frames.div_ceil(rate);
        let d = self.model.cfg.latent;
        let alpha = req.guidance();
        let schedule = unmask_schedule(n, req.iterations.unwrap_or(n), req.unmask)?;
        let mut order: Vec<usize> = (0..n).collect();
        if req.unmask == UnmaskMode::Cosine {
            let mut r = ChaCha8Rng::seed_from_u64(req.seed);
            r.set_stream(u64::MAX);
            order.shuffle(&mut r);
        }
        let (cond, cross) = self.condition(&req.prompt, req.audio.as_ref())?;
        let uncond = if req.conditional_only { None } else { Some(self.condition("", None)?) };

        let mut stream = TokenStream::new(Tensor::zeros(&[n, d]), MaskPlan::all(n))?;
        stream.offsets = offsets.cloned();
        let sched = &self.model.sched;
        let head = &self.model.head;
        let mut cursor = 0;
        for &count in &schedule {
            let z_c = self.model.mar.conditions(&self.store, &stream, &cond, cross.as_ref())?;
            let z_uc = match &uncond {
                Some((u, ux)) => Some(self.model.mar.conditions(&self.store, &stream, u, ux.as_ref())?),
                None => None,
            };
            let mut picked = order[cursor..cursor + count].to_vec();
            picked.sort_unstable();
            cursor += count;
            for &p in &picked {
                let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
                rng.set_stream(p as u64);
                let zc = Tensor::row_vector(z_c.row(p));
                let zu = z_uc.as_ref().map(|z| Tensor::row_vector(z.row(p)));
                let mut x = gaussian(&mut rng, &[1, d]);
                for t in (1..=sched.steps).rev() {
                    let steps = [t];
                    let e_c = head.predict(&self.store, &x, &steps, &zc)?;
                    let eps = match &zu {
                        Some(zu) => cfg_combine(&e_c, &head.predict(&self.store, &x, &steps, zu)?, alpha)?,
                        None => e_c,
                    };
                    let noise = step_noise(req.sigma, t, x.shape(), &mut rng);
                    x = step_from_eps(sched, &x, t, &eps, noise.as_ref())
                        .map_err(|e| Error::Numeric(format!("token {p}: {e}")))?;
                }
                stream.tokens.row_mut(p).copy_from_slice(x.data());
            }
            let remaining: Vec<usize> = stream.mask.masked.iter().copied().filter(|i| picked.binary_search(i).is_err()).collect();
            stream.mask = if remaining.is_empty() {
                MaskPlan { masked: Vec::new(), ..stream.mask.clone() }
            } else {
                MaskPlan::from_indices(n, remaining)?
            };
        }
        let tokens = stream.tokens.clone();
        let raw = MotionTokens { tokens: tokens.map(|v| v / self.latent_scale), source_fps: self.fps };
        let full = self.ae.decode(&self.ae_store, &raw)?;
        debug_assert_eq!(full.len(), rate * n);
        let motion = full.crop(req.frames)?;
        let record = RunRecord {
            prompt: req.prompt.clone(),
            modality: req.modality.as_str().to_string(),
            seed: req.seed,
            cfg_scale: alpha,
            frames: req.frames,
            tokens: n,
            iterations: schedule.len(),
            unmask: req.unmask.as_str().to_string(),
            sigma: req.sigma.as_str().to_string(),
            conditional_only: req.conditional_only,
            model_hash: self.model_hash.clone(),
            ae_hash: self.ae_hash.clone(),
            rounds: schedule.len(),
        };
        Ok(Output { motion, tokens, record })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_schedule() {
        assert_eq!(unmask_schedule(16, 16, UnmaskMode::Sequential).unwrap(), vec![1; 16]);
        assert_eq!(unmask_schedule(16, 40, UnmaskMode::Sequential).unwrap(), vec![1; 16]);
        assert_eq!(unmask_schedule(1, 1, UnmaskMode::Sequential).unwrap(), vec![1]);
        assert_eq!(unmask_schedule(7, 3, UnmaskMode::Sequential).unwrap(), vec![3, 2, 2]);
        assert!(matches!(unmask_schedule(4, 0, UnmaskMode::Sequential), Err(Error::Precondition(_))));
    }

    #[test]
    fn cosine_schedule() {
        let c = unmask_schedule(16, 4, UnmaskMode::Cosine).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.iter().sum::<usize>(), 16);
        assert!(c.iter().all(|&x| x >= 1));
        // floor(16·cos(π/8)) = 14 stay masked after the first round.
        assert_eq!(c[0], 2);
        assert_eq!(unmask_schedule(1, 5, UnmaskMode::Cosine).unwrap(), vec![1]);
    }

    #[test]
    fn default_guidance() {
        let mut r = GenerationRequest::text("walk", 16, 0);
        assert_eq!(r.guidance(), TEXT_CFG);
        r.modality = Modality::Speech;
        assert_eq!(r.guidance(), AUDIO_CFG);
        r.cfg_scale = Some(0.0);
        assert_eq!(r.guidance(), 0.0);
    }
}
