//! Layers built from tape primitives. Each layer records the names of its
//! parameters; the values live in a [`ParamStore`].

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::params::{kaiming_uniform, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Kaiming,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = match init {
            Init::Kaiming => kaiming_uniform(rng, &[in_dim, out_dim], in_dim),
            Init::Zero => Tensor::zeros(&[in_dim, out_dim]),
        };
        let weight = format!("{name}.weight");
        store.insert(&weight, w)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros(&[out_dim]))?;
            Some(b)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Time-major convolution with bias: `[L, C_in] -> [L_out, C_out]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    weight: String,
    bias: String,
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, kaiming_uniform(rng, &[out_ch, in_ch, kernel], in_ch * kernel))?;
        store.insert(&bias, Tensor::zeros(&[out_ch]))?;
        Ok(Self { weight, bias, stride, pad, kernel })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight)?;
        let b = tape.param(store, &self.bias)?;
        let y = tape.conv1d(x, w, self.stride, self.pad)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Rms,
    Layer,
}

impl NormKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rmsnorm" | "rms" => Ok(Self::Rms),
            "layernorm" | "layer" => Ok(Self::Layer),
            _ => Err(Error::Config(format!("unknown norm {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rms => "rmsnorm",
            Self::Layer => "layernorm",
        }
    }
}

/// RMSNorm (`x / rms(x) ⊙ gain`) or LayerNorm (`(x − μ)/σ ⊙ gain + bias`),
/// optionally without learned affine terms.
#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    gain: Option<String>,
    bias: Option<String>,
    pub eps: f64,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, kind: NormKind, dim: usize, affine: bool, eps: f64) -> Result<Self> {
        let (gain, bias) = if affine {
            let g = format!("{name}.gain");
            store.insert(&g, Tensor::full(&[dim], 1.0))?;
            let b = if kind == NormKind::Layer {
                let b = format!("{name}.bias");
                store.insert(&b, Tensor::zeros(&[dim]))?;
                Some(b)
            } else {
                None
            };
            (Some(g), b)
        } else {
            (None, None)
        };
        Ok(Self { kind, gain, bias, eps })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = match self.kind {
            NormKind::Rms => tape.rms_norm(x, self.eps)?,
            NormKind::Layer => tape.layer_norm(x, self.eps)?,
        };
        let n = match &self.gain {
            Some(g) => {
                let rows = tape.value(n).shape()[0];
                let g = tape.param(store, g)?;
                let gr = tape.repeat_rows(g, rows)?;
                tape.mul(n, gr)?
            }
            None => n,
        };
        match &self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row(n, b)
            }
            None => Ok(n),
        }
    }
}

/// Broadcasts a `[1, d]` row to `[rows, d]`; `[rows, d]` passes through.
pub fn rows_like(tape: &mut Tape, v: Var, rows: usize) -> Result<Var> {
    let vr = tape.value(v).shape()[0];
    if vr == rows {
        Ok(v)
    } else if vr == 1 {
        tape.repeat_rows(v, rows)
    } else {
        Err(dim_err!("cannot broadcast {} rows to {}", vr, rows))
    }
}

/// `x ⊙ (1 + scale) + shift`, with `shift`/`scale` per row or shared.
pub fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let rows = tape.value(x).shape()[0];
    let shift = rows_like(tape, shift, rows)?;
    let scale = rows_like(tape, scale, rows)?;
    let one_plus = tape.add_scalar(scale, 1.0);
    let y = tape.mul(x, one_plus)?;
    tape.add(y, shift)
}

/// `x + gate ⊙ branch`, the gated residual of AdaLN-zero blocks.
pub fn gated_residual(tape: &mut Tape, x: Var, gate: Var, branch: Var) -> Result<Var> {
    let rows = tape.value(x).shape()[0];
    let gate = rows_like(tape, gate, rows)?;
    let g = tape.mul(gate, branch)?;
    tape.add(x, g)
}

/// Splits the columns of `x` into `parts` equal chunks.
pub fn chunk_cols(tape: &mut Tape, x: Var, parts: usize) -> Result<Vec<Var>> {
    let (_, cols) = tape.value(x).dims2()?;
    if parts == 0 || cols % parts != 0 {
        return Err(dim_err!("{} columns do not split into {} chunks", cols, parts));
    }
    let w = cols / parts;
    (0..parts).map(|i| tape.slice_cols(x, i * w, w)).collect()
}

/// Standard sine/cosine table, `[n, dim]`; even columns sine, odd cosine.
pub fn sinusoidal_positions(n: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, dim]);
    for p in 0..n {
        let row = t.row_mut(p);
        for (i, slot) in row.iter_mut().enumerate() {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = p as f64 * freq;
            *slot = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

/// Frequency features of (possibly fractional) timesteps, `[len, dim]`;
/// the first half cosines, the second half sines.
pub fn timestep_features(steps: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut t = Tensor::zeros(&[steps.len(), dim]);
    for (r, &s) in steps.iter().enumerate() {
        let row = t.row_mut(r);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            row[i] = (s * freq).cos();
            row[half + i] = (s * freq).sin();
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adaln_modulate_hand_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(&[2.0]));
        let shift = tape.constant(Tensor::row_vector(&[1.0]));
        let scale = tape.constant(Tensor::row_vector(&[0.5]));
        let y = modulate(&mut tape, x, shift, scale).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn zero_modulation_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.3, -1.1], vec![2.0, 0.25]]).unwrap());
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let y = modulate(&mut tape, x, z, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn linear_and_conv_layers_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 3, 4, true, Init::Kaiming, &mut rng).unwrap();
        let conv = Conv1d::new(&mut store, "conv", 4, 2, 3, 2, 1, &mut rng).unwrap();
        store.get_mut("lin.bias").unwrap().value = crate::params::uniform(&mut rng, &[4], 0.5);
        let x = crate::params::uniform(&mut rng, &[6, 3], 1.0);
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        let mut inputs: Vec<Tensor> = names.iter().map(|n| store.value(n).unwrap().clone()).collect();
        inputs.push(x);
        let r = grad_check(
            |t, v| {
                for (n, var) in names.iter().zip(v) {
                    t.bind(n, *var);
                }
                let h = lin.forward(t, &store, v[names.len()])?;
                let h = t.gelu(h);
                let y = conv.forward(t, &store, h)?;
                let y = t.square(y);
                Ok(t.sum_all(y))
            },
            &inputs,
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.per_input);
    }

    #[test]
    fn positions_are_bounded() {
        let p = sinusoidal_positions(8, 6);
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(p.row(0)[1], 1.0);
    }
}
