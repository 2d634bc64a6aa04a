//! Condition encoders: a hashed bag-of-words text stub, a strided
//! convolutional audio encoder, and the rule that merges them.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv1d, Init, Linear};
use crate::params::{sha256_hex, uniform, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{read_u32, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Speech,
    Music,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text" | "t2m" => Ok(Self::Text),
            "speech" => Ok(Self::Speech),
            "music" => Ok(Self::Music),
            _ => Err(Error::Config(format!("unknown modality {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Text => "text",
            Self::Speech => "speech",
            Self::Music => "music",
        }
    }

    pub fn is_audio(self) -> bool {
        self != Self::Text
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    pub modality: Modality,
    /// `[1, d_cond]`.
    pub global: Tensor,
    /// `[L, d_cond]`, present only for audio modalities.
    pub sequence: Option<Tensor>,
}

/// `adaln = text.global + aux.global`; the cross sequence is the auxiliary
/// sequence, if any.
pub fn merge_conditions(
    text: &ConditionEmbedding,
    aux: Option<&ConditionEmbedding>,
) -> Result<(Tensor, Option<Tensor>)> {
    let Some(aux) = aux else {
        return Ok((text.global.clone(), None));
    };
    if !aux.modality.is_audio() {
        return Err(Error::Config("auxiliary condition must be speech or music".into()));
    }
    let g = text
        .global
        .zip_map(&aux.global, |a, b| a + b)
        .map_err(|_| Error::Config(format!("condition dims {:?} vs {:?}", text.global.shape(), aux.global.shape())))?;
    Ok((g, aux.sequence.clone()))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Non-semantic text stub: lower-cased unigrams and bigrams hashed into a
/// learned table and mean-pooled. The last table row is the unconditional
/// embedding used by the empty prompt.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    table: String,
    pub buckets: usize,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, buckets: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if buckets == 0 || dim == 0 {
            return Err(Error::Config("text encoder needs buckets and dim > 0".into()));
        }
        let table = format!("{name}.table");
        store.insert(&table, uniform(rng, &[buckets + 1, dim], 1.0))?;
        Ok(Self { table, buckets, dim })
    }

    pub fn unconditional_index(&self) -> usize {
        self.buckets
    }

    /// Table rows pooled for `prompt`.
    pub fn indices(&self, prompt: &str) -> Vec<usize> {
        let lower = prompt.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return vec![self.unconditional_index()];
        }
        let b = self.buckets as u64;
        let mut idx: Vec<usize> = words.iter().map(|w| (fnv1a(w.as_bytes()) % b) as usize).collect();
        for pair in words.windows(2) {
            let key = format!("{} {}", pair[0], pair[1]);
            idx.push((fnv1a(key.as_bytes()) % b) as usize);
        }
        idx
    }

    /// `[1, dim]` pooled embedding on the tape.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, prompt: &str) -> Result<Var> {
        let table = tape.param(store, &self.table)?;
        let rows = tape.gather_rows(table, &self.indices(prompt))?;
        tape.mean_rows(rows)
    }

    /// Stacked `[prompts.len(), dim]` embeddings.
    pub fn forward_batch(&self, tape: &mut Tape, store: &ParamStore, prompts: &[&str]) -> Result<Var> {
        let table = tape.param(store, &self.table)?;
        let mut rows = Vec::with_capacity(prompts.len());
        for p in prompts {
            let g = tape.gather_rows(table, &self.indices(p))?;
            rows.push(tape.mean_rows(g)?);
        }
        let stacked = tape.concat_cols(&rows)?;
        tape.reshape(stacked, &[prompts.len(), self.dim])
    }

    pub fn encode(&self, store: &ParamStore, prompt: &str) -> Result<ConditionEmbedding> {
        let mut tape = Tape::new();
        let g = self.forward(&mut tape, store, prompt)?;
        Ok(ConditionEmbedding { modality: Modality::Text, global: tape.value(g).clone(), sequence: None })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioEncoderConfig {
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub slope: f64,
    pub dim: usize,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        Self { channels: 16, layers: 4, kernel: 4, stride: 2, slope: 0.2, dim: 32 }
    }
}

impl AudioEncoderConfig {
    pub fn cumulative_stride(&self) -> usize {
        self.stride.pow(self.layers as u32)
    }

    /// Input samples seen by one output step.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for _ in 0..self.layers {
            rf += (self.kernel - 1) * jump;
            jump *= self.stride;
        }
        rf
    }

    fn pad(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    /// Output length for `len` input samples.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        let mut l = len;
        for _ in 0..self.layers {
            l = crate::tape::conv1d_out_len(l, self.kernel, self.stride, self.pad())?;
        }
        Ok(l)
    }
}

/// Strided convolutions with leaky ReLU, a per-step projection to `d_cond`
/// (the cross-attention sequence) and a zero-initialised projection of the
/// mean-pooled sequence (the global vector).
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub cfg: AudioEncoderConfig,
    convs: Vec<Conv1d>,
    seq_proj: Linear,
    global_proj: Linear,
}

impl AudioEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: AudioEncoderConfig, rng: &mut R) -> Result<Self> {
        if cfg.layers == 0 || cfg.stride == 0 || cfg.kernel < cfg.stride || cfg.channels == 0 || cfg.dim == 0 {
            return Err(Error::Config(format!("invalid audio encoder config {cfg:?}")));
        }
        let mut convs = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let cin = if i == 0 { 1 } else { cfg.channels };
            convs.push(Conv1d::new(
                store,
                &format!("{name}.conv{i}"),
                cin,
                cfg.channels,
                cfg.kernel,
                cfg.stride,
                cfg.pad(),
                rng,
            )?);
        }
        let seq_proj = Linear::new(store, &format!("{name}.seq"), cfg.channels, cfg.dim, true, Init::Kaiming, rng)?;
        let global_proj = Linear::new(store, &format!("{name}.global"), cfg.dim, cfg.dim, true, Init::Zero, rng)?;
        Ok(Self { cfg, convs, seq_proj, global_proj })
    }

    fn check(&self, clip: &AudioClip) -> Result<()> {
        let rf = self.cfg.receptive_field();
        if clip.samples.len() < rf {
            return Err(Error::Input(format!(
                "waveform of {} samples is shorter than the receptive field {}",
                clip.samples.len(),
                rf
            )));
        }
        Ok(())
    }

    /// Returns `(global [1, d], sequence [L', d])`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, clip: &AudioClip) -> Result<(Var, Var)> {
        self.check(clip)?;
        let x = Tensor::new(vec![clip.samples.len(), 1], clip.samples.clone())?;
        let mut h = tape.constant(x);
        for conv in &self.convs {
            h = conv.forward(tape, store, h)?;
            h = tape.leaky_relu(h, self.cfg.slope);
        }
        let seq = self.seq_proj.forward(tape, store, h)?;
        let pooled = tape.mean_rows(seq)?;
        let global = self.global_proj.forward(tape, store, pooled)?;
        Ok((global, seq))
    }

    pub fn encode(&self, store: &ParamStore, clip: &AudioClip, modality: Modality) -> Result<ConditionEmbedding> {
        if !modality.is_audio() {
            return Err(Error::Config("audio encoder needs the speech or music modality".into()));
        }
        let mut tape = Tape::new();
        let (g, s) = self.forward(&mut tape, store, clip)?;
        Ok(ConditionEmbedding { modality, global: tape.value(g).clone(), sequence: Some(tape.value(s).clone()) })
    }
}

pub const AUDIO_MAGIC: &[u8; 4] = b"OMAU";

/// Mono PCM. File layout: `OMAU`, `u32` sample rate, `u32` sample count,
/// little-endian `f32` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    sample_rate: u32,
    samples: Vec<f64>,
}

impl AudioClip {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("waveform contains non-finite samples".into()));
        }
        Ok(Self { sample_rate, samples })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.samples.len());
        out.extend_from_slice(AUDIO_MAGIC);
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        for &s in &self.samples {
            out.extend_from_slice(&(s as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != AUDIO_MAGIC {
            return Err(Error::Format("not an audio file (bad magic)".into()));
        }
        let rate = read_u32(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        if r.len() != 4 * n {
            return Err(Error::Format(format!("audio payload has {} bytes, header implies {}", r.len(), 4 * n)));
        }
        let samples = r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(rate, samples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// On-disk cache of embedding tensors keyed by the SHA-256 of the content
/// and an encoder tag (so a retrained encoder never hits stale entries).
#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn key(encoder_tag: &str, content: &[u8]) -> String {
        let mut b = encoder_tag.as_bytes().to_vec();
        b.push(0);
        b.extend_from_slice(content);
        sha256_hex(&b)
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.omtn"))
    }

    pub fn get(&self, key: &str) -> Result<Option<Tensor>> {
        let p = self.path(key);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(Tensor::from_bytes(&fs::read(p)?)?))
    }

    pub fn put(&self, key: &str, t: &Tensor) -> Result<()> {
        fs::write(self.path(key), t.to_bytes())?;
        Ok(())
    }

    pub fn get_or_insert_with<F>(&self, key: &str, f: F) -> Result<Tensor>
    where
        F: FnOnce() -> Result<Tensor>,
    {
        if let Some(t) = self.get(key)? {
            return Ok(t);
        }
        let t = f()?;
        self.put(key, &t)?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn text_encoder() -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(&mut store, "text", 1024, 32, &mut rng).unwrap();
        (store, enc)
    }

    fn cosine(a: &Tensor, b: &Tensor) -> f64 {
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        dot / (a.norm() * b.norm())
    }

    #[test]
    fn text_is_deterministic_and_empty_is_unconditional() {
        let (store, enc) = text_encoder();
        let a = enc.encode(&store, "a person walks").unwrap();
        assert_eq!(a, enc.encode(&store, "a person walks").unwrap());
        assert_eq!(enc.indices(""), vec![1024]);
        assert_eq!(enc.indices("  ?! "), vec![1024]);
        let u = enc.encode(&store, "").unwrap();
        assert_ne!(u.global, a.global);
        assert!(a.sequence.is_none());
    }

    #[test]
    fn distinct_prompts_have_low_cosine() {
        let (store, enc) = text_encoder();
        let verbs = ["walks", "runs", "jumps", "waves", "sits", "dances", "kicks", "turns", "crawls", "spins"];
        let manners = ["slowly", "quickly", "forward", "backward", "in place", "to the left", "happily", "twice", "carefully", "with both arms"];
        let prompts: Vec<String> =
            verbs.iter().flat_map(|v| manners.iter().map(move |m| format!("a person {v} {m}"))).collect();
        assert_eq!(prompts.len(), 100);
        let embs: Vec<Tensor> = prompts.iter().map(|p| enc.encode(&store, p).unwrap().global).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert!(cosine(&embs[i], &embs[j]) < 0.99, "{} vs {}", prompts[i], prompts[j]);
            }
        }
    }

    fn audio_encoder() -> (ParamStore, AudioEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = AudioEncoder::new(&mut store, "audio", AudioEncoderConfig { channels: 4, dim: 6, ..Default::default() }, &mut rng)
            .unwrap();
        (store, enc)
    }

    #[test]
    fn audio_lengths_follow_conv_rule() {
        let (store, enc) = audio_encoder();
        for len in [64usize, 70, 100] {
            let clip = AudioClip::new(16000, vec![0.0; len]).unwrap();
            let e = enc.encode(&store, &clip, Modality::Speech).unwrap();
            let seq = e.sequence.unwrap();
            assert_eq!(seq.shape()[0], enc.cfg.output_len(len).unwrap());
            assert!(seq.is_finite() && e.global.is_finite());
        }
        assert_eq!(enc.cfg.output_len(64).unwrap(), 64 / enc.cfg.cumulative_stride());
        let short = AudioClip::new(16000, vec![0.0; enc.cfg.receptive_field() - 1]).unwrap();
        assert!(matches!(enc.encode(&store, &short, Modality::Music), Err(Error::Input(_))));
    }

    #[test]
    fn audio_is_shift_covariant_in_the_interior() {
        let (store, enc) = audio_encoder();
        let s = enc.cfg.cumulative_stride();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base: Vec<f64> = (0..64 + s).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = AudioClip::new(16000, base[s..].to_vec()).unwrap();
        let b = AudioClip::new(16000, base[..64].to_vec()).unwrap();
        let ea = enc.encode(&store, &a, Modality::Speech).unwrap().sequence.unwrap();
        let eb = enc.encode(&store, &b, Modality::Speech).unwrap().sequence.unwrap();
        // b is a delayed by one cumulative stride: eb[i + 1] == ea[i] away from the edges.
        let n = ea.shape()[0];
        for i in 1..n - 2 {
            let diff: f64 = ea.row(i).iter().zip(eb.row(i + 1)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "position {i}: {diff}");
        }
    }

    #[test]
    fn merge_rule() {
        let text = ConditionEmbedding { modality: Modality::Text, global: Tensor::row_vector(&[1.0, 0.0]), sequence: None };
        let (g, s) = merge_conditions(&text, None).unwrap();
        assert_eq!(g, text.global);
        assert!(s.is_none());
        let aux = ConditionEmbedding {
            modality: Modality::Speech,
            global: Tensor::row_vector(&[0.0, 2.0]),
            sequence: Some(Tensor::zeros(&[3, 2])),
        };
        let (g, s) = merge_conditions(&text, Some(&aux)).unwrap();
        assert_eq!(g.data(), &[1.0, 2.0]);
        assert_eq!(s.unwrap().shape(), &[3, 2]);
        let bad = ConditionEmbedding { global: Tensor::row_vector(&[1.0]), ..aux };
        assert!(matches!(merge_conditions(&text, Some(&bad)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_init_global_projection() {
        let (store, enc) = audio_encoder();
        let clip = AudioClip::new(16000, (0..64).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let e = enc.encode(&store, &clip, Modality::Music).unwrap();
        assert!(e.global.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn audio_file_round_trip() {
        let clip = AudioClip::new(320, vec![0.5, -0.25, 1.0]).unwrap();
        let b = clip.to_bytes();
        assert_eq!(&b[..4], b"OMAU");
        assert_eq!(AudioClip::from_bytes(&b).unwrap(), clip);
        assert!(AudioClip::from_bytes(&b[..b.len() - 2]).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path()).unwrap();
        let key = EmbeddingCache::key("enc", b"hello");
        assert_ne!(key, EmbeddingCache::key("enc2", b"hello"));
        let t = cache.get_or_insert_with(&key, || Ok(Tensor::row_vector(&[1.0, 2.0]))).unwrap();
        let again = cache.get_or_insert_with(&key, || Err(Error::State("should hit".into()))).unwrap();
        assert_eq!(t, again);
    }
}
