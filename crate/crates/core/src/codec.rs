//! Encoder/decoder realized as strided convolution and transposed convolution.
//!
//! Spectrogram analysis and waveform encoding are the same operation with a
//! different kernel bank: the STFT bank is `w[n]·cos(2πnk/L)` /
//! `w[n]·sin(2πnk/L)` derived from a single window tensor (fixed Hann or
//! trainable), while the waveform bank is a pair of free encoder/decoder
//! kernels.
//!
//! `conv1d` is a correlation, so `re + i·im` equals the conjugate of the
//! textbook windowed DFT of each frame, and each frame's time origin is its
//! own first sample. The per-frame linear phase factor that a
//! true-convolution formulation carries is therefore never applied;
//! because the decoder uses the same kernels, nothing needs to be undone.
//! Magnitudes and inter-channel phase differences are unaffected apart from
//! the conjugation sign.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Envelope values below this are treated as uncovered samples.
pub const ENVELOPE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Spectrogram,
    Waveform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    FixedHann,
    Trainable,
}

fn default_sample_rate() -> u32 {
    16_000
}

fn default_window() -> WindowKind {
    WindowKind::FixedHann
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub domain: Domain,
    /// Window / filter length in samples.
    pub window_length: usize,
    /// Frame stride in samples.
    pub hop: usize,
    /// Frequency bins (spectrogram, must be `L/2 + 1`) or filters (waveform).
    pub num_filters: usize,
    #[serde(default = "default_window")]
    pub window: WindowKind,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
}

impl CodecConfig {
    pub fn spectrogram(window_length: usize, hop: usize) -> Self {
        CodecConfig {
            domain: Domain::Spectrogram,
            window_length,
            hop,
            num_filters: window_length / 2 + 1,
            window: WindowKind::FixedHann,
            sample_rate: default_sample_rate(),
        }
    }

    pub fn waveform(window_length: usize, hop: usize, num_filters: usize) -> Self {
        CodecConfig {
            domain: Domain::Waveform,
            window_length,
            hop,
            num_filters,
            window: WindowKind::FixedHann,
            sample_rate: default_sample_rate(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.window_length;
        if l < 2 {
            return Err(Error::Config(format!("window_length {l} must be ≥ 2")));
        }
        if self.hop == 0 || self.hop > l {
            return Err(Error::Config(format!("hop {} must lie in 1..={l}", self.hop)));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        match self.domain {
            Domain::Spectrogram => {
                if l % 2 != 0 {
                    return Err(Error::Config(format!(
                        "spectrogram window_length {l} must be even"
                    )));
                }
                if self.num_filters != l / 2 + 1 {
                    return Err(Error::Config(format!(
                        "spectrogram num_filters must be window_length/2 + 1 = {}, got {}",
                        l / 2 + 1,
                        self.num_filters
                    )));
                }
            }
            Domain::Waveform => {
                if self.num_filters == 0 {
                    return Err(Error::Config("num_filters must be positive".into()));
                }
                if self.window == WindowKind::Trainable {
                    return Err(Error::Config(
                        "a trainable window only applies to the spectrogram domain".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Frames produced for a signal of `len` samples (no padding).
    pub fn num_frames(&self, len: usize) -> Result<usize> {
        if len < self.window_length {
            return Err(Error::Input(format!(
                "signal of {len} samples is shorter than one {}-sample window",
                self.window_length
            )));
        }
        Ok((len - self.window_length) / self.hop + 1)
    }
}

/// Periodic Hann window `w[n] = ½(1 − cos(2πn/L))`.
pub fn hann_window(len: usize) -> Result<Tensor> {
    if len < 2 || len % 2 != 0 {
        return Err(Error::Config(format!(
            "Hann window length must be even and ≥ 2, got {len}"
        )));
    }
    let data = (0..len)
        .map(|n| {
            let (c, _) = unit_circle(n, len);
            0.5 * (1.0 - c)
        })
        .collect();
    Tensor::new(&[len], data)
}

/// `(cos, sin)` of `2π·j/period`, exact at multiples of a quarter turn.
fn unit_circle(j: usize, period: usize) -> (f64, f64) {
    let r = j % period;
    if r == 0 {
        (1.0, 0.0)
    } else if 2 * r == period {
        (-1.0, 0.0)
    } else if 4 * r == period {
        (0.0, 1.0)
    } else if 4 * r == 3 * period {
        (0.0, -1.0)
    } else {
        let theta = 2.0 * PI * r as f64 / period as f64;
        (theta.cos(), theta.sin())
    }
}

/// Unwindowed `cos(2πnk/L)` and `sin(2πnk/L)` tables, each `[N × 1 × L]`.
fn sinusoid_tables(len: usize, bins: usize) -> Result<(Tensor, Tensor)> {
    let mut cos = Vec::with_capacity(bins * len);
    let mut sin = Vec::with_capacity(bins * len);
    for k in 0..bins {
        for n in 0..len {
            let (c, s) = unit_circle(n * k, len);
            cos.push(c);
            sin.push(s);
        }
    }
    Ok((Tensor::new(&[bins, 1, len], cos)?, Tensor::new(&[bins, 1, len], sin)?))
}

/// STFT kernels `K_re[k,0,n] = w[n]·cos(2πnk/L)`, `K_im[k,0,n] = w[n]·sin(2πnk/L)`.
pub fn build_stft_kernels(len: usize, bins: usize, window: &Tensor) -> Result<(Tensor, Tensor)> {
    if window.numel() != len {
        return Err(Error::dim(
            "build_stft_kernels",
            format!("window has {} samples, expected {len}", window.numel()),
        ));
    }
    let (cos, sin) = sinusoid_tables(len, bins)?;
    let w = window.data();
    let apply = |t: Tensor| -> Result<Tensor> {
        let data = t.data().iter().enumerate().map(|(i, v)| v * w[i % len]).collect();
        Tensor::new(t.shape(), data)
    };
    Ok((apply(cos)?, apply(sin)?))
}

/// Real and imaginary frame planes, each `[N × F]`.
#[derive(Clone, Copy, Debug)]
pub struct ComplexFrames {
    pub re: Var,
    pub im: Var,
}

/// Encoder output: complex frames (spectrogram) or a real latent (waveform).
#[derive(Clone, Copy, Debug)]
pub enum Encoded {
    Complex(ComplexFrames),
    Latent(Var),
}

#[derive(Clone, Debug)]
enum Bank {
    Stft {
        window: ParamId,
        cos: Tensor,
        sin: Tensor,
        /// One-sided inverse-DFT weight per bin: `1/L` at DC and Nyquist,
        /// `2/L` elsewhere.
        synthesis_weights: Tensor,
    },
    Learned {
        encoder: ParamId,
        decoder: ParamId,
    },
}

/// A kernel bank registered in a [`ParamStore`] plus its configuration.
#[derive(Clone, Debug)]
pub struct Codec {
    config: CodecConfig,
    bank: Bank,
}

impl Codec {
    /// Registers the bank's tensors under `prefix` in `store`.
    pub fn new(
        config: CodecConfig,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (l, n) = (config.window_length, config.num_filters);
        let bank = match config.domain {
            Domain::Spectrogram => {
                let window = store.add(
                    format!("{prefix}.window"),
                    hann_window(l)?,
                    config.window == WindowKind::Trainable,
                );
                let (cos, sin) = sinusoid_tables(l, n)?;
                let synthesis_weights = (0..n)
                    .map(|k| if k == 0 || 2 * k == l { 1.0 } else { 2.0 } / l as f64)
                    .collect();
                Bank::Stft {
                    window,
                    cos,
                    sin,
                    synthesis_weights: Tensor::new(&[n], synthesis_weights)?,
                }
            }
            Domain::Waveform => {
                let init = |fan_in: usize, rng: &mut dyn rand::RngCore| {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let data = (0..n * l).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(&[n, 1, l], data)
                };
                let encoder = store.add(format!("{prefix}.encoder"), init(l, rng)?, true);
                let decoder = store.add(format!("{prefix}.decoder"), init(n, rng)?, true);
                Bank::Learned { encoder, decoder }
            }
        };
        Ok(Codec { config, bank })
    }

    /// Fixed-Hann STFT codec in its own throwaway store.
    pub fn stft(window_length: usize, hop: usize) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        // The fixed-Hann bank draws nothing from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let codec = Self::new(
            CodecConfig::spectrogram(window_length, hop),
            "stft",
            &mut store,
            &mut rng,
        )?;
        Ok((codec, store))
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn window_param(&self) -> Option<ParamId> {
        match self.bank {
            Bank::Stft { window, .. } => Some(window),
            Bank::Learned { .. } => None,
        }
    }

    /// Records `(K_re, K_im)` built from the current window.
    pub fn stft_kernels(&self, tape: &mut Tape, store: &ParamStore) -> Result<(Var, Var)> {
        match &self.bank {
            Bank::Stft {
                window, cos, sin, ..
            } => {
                let w = tape.param(store, *window)?;
                let cos = tape.constant(cos.clone())?;
                let sin = tape.constant(sin.clone())?;
                Ok((tape.mul_suffix(cos, w)?, tape.mul_suffix(sin, w)?))
            }
            Bank::Learned { .. } => Err(Error::Config(
                "waveform codec has no STFT kernels".into(),
            )),
        }
    }

    /// Encodes a `[1 × T]` signal.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, signal: Var) -> Result<Encoded> {
        let (_, len) = tape.value(signal).dims2("encode")?;
        self.config.num_frames(len)?;
        let spec = ConvSpec::stride(self.config.hop);
        match &self.bank {
            Bank::Stft { .. } => {
                let (kre, kim) = self.stft_kernels(tape, store)?;
                let re = tape.conv1d(signal, kre, spec)?;
                let im = tape.conv1d(signal, kim, spec)?;
                Ok(Encoded::Complex(ComplexFrames { re, im }))
            }
            Bank::Learned { encoder, .. } => {
                let k = tape.param(store, *encoder)?;
                let z = tape.conv1d(signal, k, spec)?;
                Ok(Encoded::Latent(tape.relu(z)?))
            }
        }
    }

    /// Decodes frames back to a `[1 × out_len]` signal.
    ///
    /// Spectrogram frames go through the transposed convolution with the tied
    /// kernels and are divided by the overlap-added squared window. Samples
    /// whose envelope is below [`ENVELOPE_FLOOR`] outside the steady-state
    /// interior are set to zero; inside the interior such a sample is a
    /// configuration error.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: Encoded,
        out_len: usize,
    ) -> Result<Var> {
        let hop = self.config.hop;
        let l = self.config.window_length;
        let y = match (&self.bank, frames) {
            (
                Bank::Stft {
                    window,
                    synthesis_weights,
                    ..
                },
                Encoded::Complex(ComplexFrames { re, im }),
            ) => {
                let (kre, kim) = self.stft_kernels(tape, store)?;
                let (_, frames) = tape.value(re).dims2("decode")?;
                let weights = tape.constant(synthesis_weights.clone())?;
                let re = tape.mul_channels(re, weights)?;
                let im = tape.mul_channels(im, weights)?;
                let yr = tape.conv_transpose1d(re, kre, hop)?;
                let yi = tape.conv_transpose1d(im, kim, hop)?;
                let y = tape.add(yr, yi)?;

                let w = tape.param(store, *window)?;
                let w2 = tape.square(w)?;
                let w2 = tape.reshape(w2, &[1, 1, l])?;
                let ones = tape.constant(Tensor::ones(&[1, frames]))?;
                let env = tape.conv_transpose1d(ones, w2, hop)?;
                let env_vals = tape.value(env).data();
                let interior = l..=(frames - 1) * hop;
                if let Some(t) = interior
                    .clone()
                    .find(|&t| t < env_vals.len() && env_vals[t] < ENVELOPE_FLOOR)
                {
                    return Err(Error::Config(format!(
                        "window overlap envelope vanishes at interior sample {t} \
                         (hop {hop} with window length {l} cannot be inverted)"
                    )));
                }
                let covered: Vec<f64> = env_vals
                    .iter()
                    .map(|&e| if e >= ENVELOPE_FLOOR { 1.0 } else { 0.0 })
                    .collect();
                let fill = covered.iter().map(|c| 1.0 - c).collect();
                let n = covered.len();
                let fill = tape.constant(Tensor::new(&[1, n], fill)?)?;
                let covered = tape.constant(Tensor::new(&[1, n], covered)?)?;
                let safe_env = tape.add(env, fill)?;
                let y = tape.mul(y, covered)?;
                tape.div(y, safe_env)?
            }
            (Bank::Learned { decoder, .. }, Encoded::Latent(z)) => {
                let k = tape.param(store, *decoder)?;
                tape.conv_transpose1d(z, k, hop)?
            }
            _ => {
                return Err(Error::Config(
                    "encoded representation does not match the codec domain".into(),
                ))
            }
        };
        fit_length(tape, y, out_len)
    }
}

/// Crops or zero-pads the time axis of a `[C × T]` var to `len` samples.
pub fn fit_length(tape: &mut Tape, y: Var, len: usize) -> Result<Var> {
    let (_, t) = tape.value(y).dims2("fit_length")?;
    match t.cmp(&len) {
        std::cmp::Ordering::Equal => Ok(y),
        std::cmp::Ordering::Greater => tape.crop_time(y, 0, len),
        std::cmp::Ordering::Less => tape.pad_time(y, 0, len - t),
    }
}

/// Records `(|Y|, ∠Y)`; the modulus is `sqrt(re² + im²)` and the phase
/// `atan2(im, re)`, with `atan2(0, 0) = 0`.
pub fn magnitude_phase(tape: &mut Tape, frames: ComplexFrames) -> Result<(Var, Var)> {
    let mag = tape.hypot(frames.re, frames.im)?;
    let phase = tape.atan2(frames.im, frames.re)?;
    Ok((mag, phase))
}

/// Records `re = |X|·cos φ`, `im = |X|·sin φ`.
pub fn reconstruct_complex(tape: &mut Tape, mag: Var, phase: Var) -> Result<ComplexFrames> {
    if let Some(pos) = tape.value(mag).data().iter().position(|&m| m < 0.0) {
        return Err(Error::Input(format!("negative magnitude at flat index {pos}")));
    }
    let c = tape.cos(phase)?;
    let s = tape.sin(phase)?;
    Ok(ComplexFrames {
        re: tape.mul(mag, c)?,
        im: tape.mul(mag, s)?,
    })
}

/// Plain-value complex spectrogram `[N × F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub re: Tensor,
    pub im: Tensor,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.re.shape()[1]
    }

    pub fn magnitude(&self) -> Tensor {
        let data = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(r, i)| (r * r + i * i).sqrt())
            .collect();
        Tensor::new(self.re.shape(), data).expect("same shape")
    }

    pub fn phase(&self) -> Tensor {
        let data = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(r, i)| i.atan2(*r))
            .collect();
        Tensor::new(self.re.shape(), data).expect("same shape")
    }
}

/// Fixed-window STFT/ISTFT on plain signals, for features, oracles and
/// metrics where no gradient is needed.
#[derive(Clone, Debug)]
pub struct Stft {
    codec: Codec,
    store: ParamStore,
}

impl Stft {
    pub fn new(window_length: usize, hop: usize) -> Result<Self> {
        let (codec, store) = Codec::stft(window_length, hop)?;
        Ok(Stft { codec, store })
    }

    pub fn config(&self) -> &CodecConfig {
        self.codec.config()
    }

    pub fn analyze(&self, signal: &[f64]) -> Result<Spectrogram> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(signal)?)?;
        match self.codec.encode(&mut tape, &self.store, x)? {
            Encoded::Complex(f) => Ok(Spectrogram {
                re: tape.value(f.re).clone(),
                im: tape.value(f.im).clone(),
            }),
            Encoded::Latent(_) => unreachable!("STFT codec always yields complex frames"),
        }
    }

    pub fn synthesize(&self, spec: &Spectrogram, out_len: usize) -> Result<Vec<f64>> {
        if spec.re.shape() != spec.im.shape() {
            return Err(Error::dim("synthesize", "re and im planes differ in shape"));
        }
        let mut tape = Tape::new();
        let re = tape.constant(spec.re.clone())?;
        let im = tape.constant(spec.im.clone())?;
        let y = self
            .codec
            .decode(&mut tape, &self.store, Encoded::Complex(ComplexFrames { re, im }), out_len)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Returns `(K_re, K_im)` as plain tensors.
    pub fn kernels(&self) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let (re, im) = self.codec.stft_kernels(&mut tape, &self.store)?;
        Ok((tape.value(re).clone(), tape.value(im).clone()))
    }
}
