//! Synthetic speech-like sources: a modulated harmonic stack over pink noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SOURCE_PEAK: f64 = 0.5;

/// Pink-noise level relative to the harmonic stack.
pub const NOISE_LEVEL_DB: f64 = -20.0;

pub const MIN_DURATION_S: f64 = 0.5;

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// White Gaussian noise shaped to a 1/f power spectrum in the frequency
/// domain.
pub fn pink_noise(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let n = len.max(2);
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for k in 1..n {
        let f = k.min(n - k) as f64;
        buf[k] /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.truncate(len);
    buf.into_iter().map(|c| c.re).collect()
}

/// Deterministic harmonic source of `duration_s` seconds.
///
/// The fundamental follows a slow random glide plus vibrato inside
/// `f0_range`; 4 to 8 harmonics with random amplitudes are gated by a
/// syllable-rate envelope. Output peak is exactly [`SOURCE_PEAK`].
pub fn synth_source(seed: u64, duration_s: f64, f0_range: [f64; 2], sample_rate: u32) -> Result<Vec<f64>> {
    if !(duration_s >= MIN_DURATION_S) {
        return Err(Error::Input(format!(
            "source duration {duration_s} s is shorter than {MIN_DURATION_S} s"
        )));
    }
    let [f0_lo, f0_hi] = f0_range;
    if !(f0_lo > 0.0 && f0_lo <= f0_hi && f0_hi < sample_rate as f64 / 2.0) {
        return Err(Error::Input(format!("invalid f0 range {f0_range:?}")));
    }
    let fs = sample_rate as f64;
    let len = (duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let f0_start = rng.random_range(f0_lo..=f0_hi);
    let f0_end = rng.random_range(f0_lo..=f0_hi);
    let vibrato_rate = rng.random_range(3.0..7.0);
    let vibrato_depth = rng.random_range(0.01..0.04);
    let harmonics = rng.random_range(4..=8usize);
    let amps: Vec<f64> = (1..=harmonics).map(|k| rng.random_range(0.3..1.0) / k as f64).collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let syllable_rate = rng.random_range(2.5..5.5);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);

    let nyquist = fs / 2.0;
    let mut phase = 0.0;
    let mut voiced = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / fs;
        let progress = n as f64 / len as f64;
        let glide = f0_start + (f0_end - f0_start) * progress;
        let f0 = (glide * (1.0 + vibrato_depth * (2.0 * PI * vibrato_rate * t).sin())).clamp(f0_lo, f0_hi);
        phase += 2.0 * PI * f0 / fs;
        let mut v = 0.0;
        for (k, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
            if (k + 1) as f64 * f0 < nyquist {
                v += a * ((k + 1) as f64 * phase + p).sin();
            }
        }
        let gate = 0.5 * (1.0 + (2.0 * PI * syllable_rate * t + syllable_phase).sin());
        voiced.push(v * (0.1 + 0.9 * gate * gate));
    }

    let noise = pink_noise(&mut rng, len);
    let gain = rms(&voiced) * 10f64.powf(NOISE_LEVEL_DB / 20.0) / rms(&noise).max(f64::MIN_POSITIVE);
    let mixed: Vec<f64> = voiced.iter().zip(&noise).map(|(v, w)| v + gain * w).collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(mixed.into_iter().map(|v| v * SOURCE_PEAK / peak).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(seed: u64) -> Vec<f64> {
        synth_source(seed, 1.0, [90.0, 250.0], 16_000).unwrap()
    }

    #[test]
    fn peak_is_normalized() {
        for seed in 0..5 {
            let peak = synth(seed).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - SOURCE_PEAK).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(synth(3), synth(3));
        assert_eq!(synth(3).len(), 16_000);
    }

    #[test]
    fn different_seeds_are_weakly_correlated() {
        let (a, b) = (synth(1), synth(2));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * nb)).abs() < 0.3);
    }

    #[test]
    fn pink_noise_power_falls_with_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = pink_noise(&mut rng, 1 << 14);
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let band = |a: usize, b: usize| buf[a..b].iter().map(|c| c.norm_sqr()).sum::<f64>();
        // Equal-width octaves carry equal power under 1/f.
        let ratio = band(64, 128) / band(1024, 2048);
        assert!((0.7..1.4).contains(&ratio), "{ratio}");
    }

    #[test]
    fn short_duration_is_rejected() {
        assert!(matches!(synth_source(0, 0.4, [90.0, 250.0], 16_000), Err(Error::Input(_))));
    }
}
