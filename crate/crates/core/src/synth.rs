//! Deterministic synthetic motion corpora with pseudo-captions and optional
//! audio tracks.
//!
//! Each sequence draws from its own ChaCha8 stream (`seed`, stream = index),
//! so a corpus is a pure function of its [`SyntheticSpec`].

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::condition::AudioClip;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::motion::{read_caption, save_with_caption, MotionSequence};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    SinusoidMixture,
    PiecewisePose,
    RandomWalkSmoothed,
}

impl Family {
    pub const ALL: [Family; 3] = [Self::SinusoidMixture, Self::PiecewisePose, Self::RandomWalkSmoothed];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sinusoid-mixture" => Ok(Self::SinusoidMixture),
            "piecewise-pose" => Ok(Self::PiecewisePose),
            "random-walk-smoothed" => Ok(Self::RandomWalkSmoothed),
            _ => Err(Error::Config(format!("unknown synthetic family {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SinusoidMixture => "sinusoid-mixture",
            Self::PiecewisePose => "piecewise-pose",
            Self::RandomWalkSmoothed => "random-walk-smoothed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AudioKind {
    Speech,
    Music,
}

impl AudioKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "speech" => Ok(Self::Speech),
            "music" => Ok(Self::Music),
            _ => Err(Error::Config(format!("unknown audio kind {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Speech => "speech",
            Self::Music => "music",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub family: Family,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dim: usize,
    pub fps: f32,
    /// Bound on `|x|` for every channel.
    pub amplitude: f64,
    pub audio: Option<AudioKind>,
    pub samples_per_frame: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            family: Family::SinusoidMixture,
            count: 8,
            min_len: 16,
            max_len: 16,
            dim: 8,
            fps: 20.0,
            amplitude: 1.0,
            audio: None,
            samples_per_frame: 16,
        }
    }
}

impl SyntheticSpec {
    pub const KEYS: &'static [&'static str] =
        &["seed", "family", "count", "len", "min_len", "max_len", "dim", "fps", "amplitude", "audio", "samples_per_frame"];

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("seed", self.seed);
        kv.set("family", self.family.as_str());
        kv.set("count", self.count);
        kv.set("min_len", self.min_len);
        kv.set("max_len", self.max_len);
        kv.set("dim", self.dim);
        kv.set("fps", self.fps);
        kv.set("amplitude", self.amplitude);
        kv.set("audio", self.audio.map_or("none", AudioKind::as_str));
        kv.set("samples_per_frame", self.samples_per_frame);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_known(Self::KEYS)?;
        let d = Self::default();
        let len = kv.parse_or("len", d.min_len)?;
        Ok(Self {
            seed: kv.parse_or("seed", d.seed)?,
            family: match kv.get("family") {
                Some(f) => Family::parse(f)?,
                None => d.family,
            },
            count: kv.parse_or("count", d.count)?,
            min_len: kv.parse_or("min_len", len)?,
            max_len: kv.parse_or("max_len", len)?,
            dim: kv.parse_or("dim", d.dim)?,
            fps: kv.parse_or("fps", d.fps)?,
            amplitude: kv.parse_or("amplitude", d.amplitude)?,
            audio: match kv.get("audio") {
                None | Some("none") => None,
                Some(a) => Some(AudioKind::parse(a)?),
            },
            samples_per_frame: kv.parse_or("samples_per_frame", d.samples_per_frame)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticItem {
    pub motion: MotionSequence,
    pub caption: String,
    pub audio: Option<AudioClip>,
}

const SINE_COMPONENTS: usize = 3;

pub fn synthesize_corpus(spec: &SyntheticSpec) -> Result<Vec<SyntheticItem>> {
    if spec.count == 0 {
        return Err(Error::Config("corpus count must be at least 1".into()));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!("invalid length range [{}, {}]", spec.min_len, spec.max_len)));
    }
    if spec.dim == 0 || spec.amplitude.is_nan() || spec.amplitude <= 0.0 || spec.samples_per_frame == 0 {
        return Err(Error::Config("dim, amplitude and samples_per_frame must be positive".into()));
    }
    (0..spec.count).map(|i| synthesize_one(spec, i)).collect()
}

fn synthesize_one(spec: &SyntheticSpec, index: usize) -> Result<SyntheticItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let t = rng.random_range(spec.min_len..=spec.max_len);
    let d = spec.dim;
    let fps = spec.fps as f64;
    let amp = spec.amplitude;

    let (frames, tempo, speed) = match spec.family {
        Family::SinusoidMixture => {
            let freqs: Vec<f64> = (0..SINE_COMPONENTS).map(|_| rng.random_range(0.25..2.0)).collect();
            let mut weights = vec![0.0; d * SINE_COMPONENTS];
            let mut phases = vec![0.0; d * SINE_COMPONENTS];
            for c in 0..d {
                let raw: Vec<f64> = (0..SINE_COMPONENTS).map(|_| rng.random_range(0.0..1.0)).collect();
                let total: f64 = raw.iter().sum::<f64>().max(1e-12);
                let scale = rng.random_range(0.5..1.0);
                for k in 0..SINE_COMPONENTS {
                    weights[c * SINE_COMPONENTS + k] = amp * scale * raw[k] / total;
                    phases[c * SINE_COMPONENTS + k] = rng.random_range(0.0..TAU);
                }
            }
            let mut f = Tensor::zeros(&[t, d]);
            for s in 0..t {
                let time = s as f64 / fps;
                let row = f.row_mut(s);
                for (c, v) in row.iter_mut().enumerate() {
                    *v = (0..SINE_COMPONENTS)
                        .map(|k| {
                            let j = c * SINE_COMPONENTS + k;
                            weights[j] * (TAU * freqs[k] * time + phases[j]).sin()
                        })
                        .sum();
                }
            }
            (f, freqs[0], freqs.iter().sum::<f64>() / SINE_COMPONENTS as f64)
        }
        Family::PiecewisePose => {
            let hold = rng.random_range(3..=8usize);
            let keys = t / hold + 2;
            let poses: Vec<Vec<f64>> =
                (0..keys).map(|_| (0..d).map(|_| rng.random_range(-amp..=amp)).collect()).collect();
            let mut f = Tensor::zeros(&[t, d]);
            for s in 0..t {
                let k = s / hold;
                let u = (s % hold) as f64 / hold as f64;
                let w = 0.5 - 0.5 * (std::f64::consts::PI * u).cos();
                for (c, v) in f.row_mut(s).iter_mut().enumerate() {
                    *v = (1.0 - w) * poses[k][c] + w * poses[k + 1][c];
                }
            }
            (f, fps / hold as f64 / 2.0, fps / hold as f64)
        }
        Family::RandomWalkSmoothed => {
            let step = rng.random_range(0.05..0.3);
            let mut walk = vec![vec![0.0; d]; t];
            let mut cur: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
            for row in walk.iter_mut() {
                for (c, v) in cur.iter_mut().enumerate() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v += step * n;
                    row[c] = *v;
                }
            }
            let win = 2usize;
            let mut f = Tensor::zeros(&[t, d]);
            for s in 0..t {
                let lo = s.saturating_sub(win);
                let hi = (s + win).min(t - 1);
                for (c, slot) in f.row_mut(s).iter_mut().enumerate() {
                    let m = (lo..=hi).map(|q| walk[q][c]).sum::<f64>() / (hi - lo + 1) as f64;
                    *slot = amp * m.tanh();
                }
            }
            (f, 1.0, step * 10.0)
        }
    };

    let motion = MotionSequence::new(frames, spec.fps)?;
    let audio = match spec.audio {
        None => None,
        Some(kind) => Some(synth_audio(&mut rng, &motion, kind, tempo, spec.samples_per_frame)?),
    };
    let caption = caption_for(spec.family, spec.audio, speed, index);
    Ok(SyntheticItem { motion, caption, audio })
}

/// Audio whose envelope follows the motion's frame-to-frame energy, so the
/// track carries information about the motion.
fn synth_audio(
    rng: &mut ChaCha8Rng,
    motion: &MotionSequence,
    kind: AudioKind,
    tempo: f64,
    spf: usize,
) -> Result<AudioClip> {
    let t = motion.len();
    let rate = (motion.fps() as f64 * spf as f64).round() as u32;
    let f = motion.frames();
    let energy: Vec<f64> = (0..t)
        .map(|s| {
            let prev = f.row(s.saturating_sub(1));
            let e: f64 = f.row(s).iter().zip(prev).map(|(a, b)| (a - b).abs()).sum();
            (e / motion.dim() as f64 * 4.0).tanh()
        })
        .collect();
    let carrier = rng.random_range(0.05..0.2);
    let mut samples = Vec::with_capacity(t * spf);
    for (s, &e) in energy.iter().enumerate() {
        for q in 0..spf {
            let n = (s * spf + q) as f64;
            let v = match kind {
                AudioKind::Speech => {
                    let noise: f64 = StandardNormal.sample(rng);
                    e * ((TAU * carrier * n).sin() + 0.3 * noise)
                }
                AudioKind::Music => {
                    let beat = (TAU * tempo * n / rate as f64).sin().max(0.0);
                    0.5 * beat * (TAU * carrier * 2.0 * n).sin() + 0.5 * e * (TAU * carrier * n).sin()
                }
            };
            samples.push(v);
        }
    }
    AudioClip::new(rate, samples)
}

fn caption_for(family: Family, audio: Option<AudioKind>, speed: f64, index: usize) -> String {
    let pace = if speed < 0.8 {
        "slowly"
    } else if speed < 1.4 {
        "steadily"
    } else {
        "quickly"
    };
    let actions: &[&str] = match family {
        Family::SinusoidMixture => &[
            "waves both arms",
            "sways side to side",
            "swings the arms",
            "bobs up and down",
            "rocks back and forth",
            "circles the hips",
            "nods the head",
            "rolls the shoulders",
            "pumps the fists",
            "twists the torso",
            "flaps the elbows",
            "shakes the hands",
        ],
        Family::PiecewisePose => &[
            "moves between poses",
            "strikes a pose",
            "steps and stops",
            "raises a hand then lowers it",
            "squats and stands",
            "points left then right",
            "crosses the arms",
            "kneels down",
            "salutes",
            "leans forward and back",
            "lifts one knee",
            "turns around",
        ],
        Family::RandomWalkSmoothed => &[
            "wanders around",
            "drifts forward",
            "shifts weight",
            "paces nervously",
            "stumbles",
            "strolls",
            "fidgets",
            "shuffles sideways",
            "meanders backward",
            "loiters",
            "sways unsteadily",
            "ambles in a circle",
        ],
    };
    let action = actions[index % actions.len()];
    match audio {
        None => format!("a person {action} {pace}"),
        Some(AudioKind::Speech) => format!("a person is giving a speech and {action} {pace}"),
        Some(AudioKind::Music) => format!("a person dances to music and {action} {pace}"),
    }
}

pub const MOTION_EXT: &str = "omni";
pub const AUDIO_EXT: &str = "omau";

/// Writes `seq_NNNN.omni` plus caption and audio sidecars.
pub fn write_corpus(dir: &Path, items: &[SyntheticItem]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let p = dir.join(format!("seq_{i:04}.{MOTION_EXT}"));
        save_with_caption(&item.motion, &item.caption, &p)?;
        if let Some(a) = &item.audio {
            a.save(&p.with_extension(AUDIO_EXT))?;
        }
        paths.push(p);
    }
    Ok(paths)
}

/// Motion files of a directory in file-name order.
pub fn list_motion_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == MOTION_EXT))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every motion file of `dir` with its sidecars. A missing caption
/// becomes the empty prompt.
pub fn load_corpus(dir: &Path) -> Result<Vec<SyntheticItem>> {
    let files = list_motion_files(dir)?;
    if files.is_empty() {
        return Err(Error::Input(format!("no .{MOTION_EXT} files in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let audio_path = p.with_extension(AUDIO_EXT);
            Ok(SyntheticItem {
                motion: MotionSequence::load(p)?,
                caption: read_caption(p)?.unwrap_or_default(),
                audio: if audio_path.exists() { Some(AudioClip::load(&audio_path)?) } else { None },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        for family in Family::ALL {
            let spec = SyntheticSpec { family, audio: Some(AudioKind::Speech), ..Default::default() };
            assert_eq!(synthesize_corpus(&spec).unwrap(), synthesize_corpus(&spec).unwrap());
        }
    }

    #[test]
    fn count_and_length() {
        let c = synthesize_corpus(&SyntheticSpec::default()).unwrap();
        assert_eq!(c.len(), 8);
        assert!(c.iter().all(|i| i.motion.len() == 16 && i.motion.dim() == 8));
    }

    #[test]
    fn sinusoid_amplitude_bound() {
        let spec = SyntheticSpec { amplitude: 0.7, count: 20, dim: 12, max_len: 40, ..Default::default() };
        for item in synthesize_corpus(&spec).unwrap() {
            assert!(item.motion.frames().data().iter().all(|v| v.abs() <= 0.7 + 1e-12));
        }
    }

    #[test]
    fn invalid_inputs_are_config_errors() {
        assert!(matches!(Family::parse("jumping"), Err(Error::Config(_))));
        let spec = SyntheticSpec { count: 0, ..Default::default() };
        assert!(matches!(synthesize_corpus(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn different_seeds_differ() {
        let a = synthesize_corpus(&SyntheticSpec::default()).unwrap();
        let b = synthesize_corpus(&SyntheticSpec { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a[0].motion, b[0].motion);
    }

    #[test]
    fn audio_length_matches_frames() {
        let spec = SyntheticSpec { audio: Some(AudioKind::Music), ..Default::default() };
        for item in synthesize_corpus(&spec).unwrap() {
            let a = item.audio.unwrap();
            assert_eq!(a.samples().len(), 16 * item.motion.len());
            assert!(item.caption.contains("music"));
        }
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { audio: Some(AudioKind::Speech), count: 3, ..Default::default() };
        let items = synthesize_corpus(&spec).unwrap();
        write_corpus(dir.path(), &items).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in items.iter().zip(&back) {
            assert_eq!(a.caption, b.caption);
            assert!(a.motion.frames().max_abs_diff(b.motion.frames()) < 1e-6);
        }
    }
}
