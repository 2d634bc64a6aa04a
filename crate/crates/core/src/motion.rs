//! Whole-body motion sequences and the `OMNI` motion file.

use std::fs;
use std::io::Read;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{read_u32, Tensor};

pub const MOTION_MAGIC: &[u8; 4] = b"OMNI";
pub const MOTION_VERSION: u32 = 1;
pub const DEFAULT_MAX_FRAMES: usize = 196;
pub const SMPLX_DIM: usize = 322;

/// Channel groups of the 322-wide SMPL-X frame layout.
pub const SMPLX_LAYOUT: [(&str, Range<usize>); 8] = [
    ("root_orient", 0..3),
    ("body_pose", 3..66),
    ("hand_pose", 66..156),
    ("jaw_pose", 156..159),
    ("expression", 159..209),
    ("face_shape", 209..309),
    ("translation", 309..312),
    ("betas", 312..322),
];

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: Tensor,
    fps: f32,
}

impl MotionSequence {
    /// Validates `frames` (`[T, D]`, finite, `T ≥ 1`) and `fps > 0`.
    pub fn new(frames: Tensor, fps: f32) -> Result<Self> {
        let (t, d) = frames.dims2()?;
        if t == 0 || d == 0 {
            return Err(Error::Input("motion needs at least one frame and one channel".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Input(format!("fps must be positive, got {fps}")));
        }
        if !frames.is_finite() {
            return Err(Error::Input("motion contains non-finite values".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn with_max_frames(frames: Tensor, fps: f32, max_frames: usize) -> Result<Self> {
        let m = Self::new(frames, fps)?;
        if m.len() > max_frames {
            return Err(Error::Input(format!("{} frames exceed the maximum {}", m.len(), max_frames)));
        }
        Ok(m)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    /// First `n` frames.
    pub fn crop(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Input(format!("cannot crop {} frames to {}", self.len(), n)));
        }
        let d = self.dim();
        let data = self.frames.data()[..n * d].to_vec();
        Self::new(Tensor::new(vec![n, d], data)?, self.fps)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (t, d) = (self.len(), self.dim());
        let mut out = Vec::with_capacity(20 + t * d * 4);
        out.extend_from_slice(MOTION_MAGIC);
        out.extend_from_slice(&MOTION_VERSION.to_le_bytes());
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&self.fps.to_le_bytes());
        for &v in self.frames.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MOTION_MAGIC {
            return Err(Error::Format("not a motion file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MOTION_VERSION {
            return Err(Error::Format(format!("unsupported motion version {version}")));
        }
        let t = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let mut fb = [0u8; 4];
        r.read_exact(&mut fb)?;
        let fps = f32::from_le_bytes(fb);
        if r.len() != t * d * 4 {
            return Err(Error::Format(format!(
                "motion payload has {} bytes, header implies {}",
                r.len(),
                t * d * 4
            )));
        }
        let data = r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(Tensor::new(vec![t, d], data)?, fps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Path of the caption sidecar for a motion file (same basename, `.txt`).
pub fn caption_path(motion: &Path) -> PathBuf {
    motion.with_extension("txt")
}

pub fn save_with_caption(m: &MotionSequence, caption: &str, path: &Path) -> Result<()> {
    m.save(path)?;
    fs::write(caption_path(path), caption)?;
    Ok(())
}

pub fn read_caption(motion: &Path) -> Result<Option<String>> {
    let p = caption_path(motion);
    if p.exists() {
        Ok(Some(fs::read_to_string(p)?.trim().to_string()))
    } else {
        Ok(None)
    }
}

/// A motion padded to a multiple of the tokenizer rate, remembering the
/// original length so decoded output can be cropped back.
#[derive(Clone, Debug)]
pub struct Padded {
    pub motion: MotionSequence,
    pub original_len: usize,
}

/// Pads to the smallest multiple of `k` by repeating the last frame.
pub fn pad_to_multiple(m: &MotionSequence, k: usize) -> Result<Padded> {
    if k == 0 {
        return Err(dim_err!("padding multiple must be positive"));
    }
    let t = m.len();
    let target = t.div_ceil(k) * k;
    let d = m.dim();
    let mut data = m.frames().data().to_vec();
    let last = m.frames().row(t - 1).to_vec();
    for _ in t..target {
        data.extend_from_slice(&last);
    }
    Ok(Padded {
        motion: MotionSequence::new(Tensor::new(vec![target, d], data)?, m.fps())?,
        original_len: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(t: usize, d: usize) -> MotionSequence {
        let data = (0..t * d).map(|i| i as f64 * 0.5).collect();
        MotionSequence::new(Tensor::new(vec![t, d], data).unwrap(), 20.0).unwrap()
    }

    #[test]
    fn layout_covers_322_channels_contiguously() {
        let mut end = 0;
        for (_, r) in SMPLX_LAYOUT.iter() {
            assert_eq!(r.start, end);
            end = r.end;
        }
        assert_eq!(end, SMPLX_DIM);
    }

    #[test]
    fn rejects_invalid_sequences() {
        assert!(MotionSequence::new(Tensor::zeros(&[0, 3]), 20.0).is_err());
        assert!(MotionSequence::new(Tensor::zeros(&[2, 3]), 0.0).is_err());
        let mut bad = Tensor::zeros(&[2, 2]);
        bad.data_mut()[1] = f64::NAN;
        assert!(MotionSequence::new(bad, 20.0).is_err());
        assert!(MotionSequence::with_max_frames(Tensor::zeros(&[197, 2]), 20.0, DEFAULT_MAX_FRAMES).is_err());
    }

    #[test]
    fn pad_already_multiple() {
        let p = pad_to_multiple(&seq(64, 3), 4).unwrap();
        assert_eq!(p.motion.len(), 64);
        assert_eq!(p.original_len, 64);
    }

    #[test]
    fn pad_repeats_last_frame_and_crops_back() {
        let m = seq(13, 3);
        let p = pad_to_multiple(&m, 4).unwrap();
        assert_eq!(p.motion.len(), 16);
        for r in 13..16 {
            assert_eq!(p.motion.frames().row(r), m.frames().row(12));
        }
        assert_eq!(p.motion.crop(p.original_len).unwrap(), m);
    }

    #[test]
    fn file_header_layout() {
        let b = seq(2, 3).to_bytes();
        assert_eq!(&b[..4], b"OMNI");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &3u32.to_le_bytes());
        assert_eq!(&b[16..20], &20.0f32.to_le_bytes());
        assert_eq!(b.len(), 20 + 6 * 4);
        assert_eq!(MotionSequence::from_bytes(&b).unwrap(), seq(2, 3));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let b = seq(2, 3).to_bytes();
        assert!(matches!(MotionSequence::from_bytes(&b[..b.len() - 1]), Err(Error::Format(_))));
    }
}
