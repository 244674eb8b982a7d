//! Shoebox image-method room impulse responses.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

pub const SOUND_SPEED: f64 = 343.0;

fn default_sound_speed() -> f64 {
    SOUND_SPEED
}

/// Shoebox room with one absorption coefficient shared by all six walls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Length, width, height in metres.
    pub dimensions: [f64; 3],
    /// Reverberation time in seconds.
    pub t60: f64,
    pub sample_rate: u32,
    #[serde(default = "default_sound_speed")]
    pub sound_speed: f64,
}

impl RoomSpec {
    pub fn new(dimensions: [f64; 3], t60: f64, sample_rate: u32) -> Result<Self> {
        let room = RoomSpec {
            dimensions,
            t60,
            sample_rate,
            sound_speed: SOUND_SPEED,
        };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Geometry(format!(
                "room dimensions {:?} must be positive",
                self.dimensions
            )));
        }
        if !(self.t60.is_finite() && self.t60 > 0.0) {
            return Err(Error::Geometry(format!("T60 must be positive, got {}", self.t60)));
        }
        if self.sample_rate == 0 || !(self.sound_speed > 0.0) {
            return Err(Error::Geometry("sample rate and sound speed must be positive".into()));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dimensions.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [l, w, h] = self.dimensions;
        2.0 * (l * w + l * h + w * h)
    }

    /// Sabine absorption `α = 24·ln10·V / (c·S·T60)`, capped at 1 (a small
    /// room cannot decay faster than fully absorbing walls allow).
    pub fn absorption(&self) -> f64 {
        let alpha = 24.0 * std::f64::consts::LN_10 * self.volume()
            / (self.sound_speed * self.surface() * self.t60);
        alpha.min(1.0)
    }

    /// Pressure reflection coefficient `β = √(1 − α)`.
    pub fn reflection(&self) -> f64 {
        (1.0 - self.absorption()).sqrt()
    }

    /// Whether `p` lies at least `margin` metres inside every wall.
    pub fn contains(&self, p: &Point, margin: f64) -> bool {
        p.iter()
            .zip(&self.dimensions)
            .all(|(&x, &d)| x >= margin && x <= d - margin)
    }
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One mirror source: per-axis offset to the receiver and reflection count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Image {
    pub distance: f64,
    pub order: usize,
}

/// Per-axis candidates `(offset, reflections)` with image coordinate
/// `(1−2q)·src + 2nL` for `|n| ≤ max_order`, `q ∈ {0, 1}`.
fn axis_images(src: f64, mic: f64, len: f64, max_order: usize) -> Vec<(f64, usize)> {
    let bound = max_order as i64;
    let mut out = Vec::new();
    for n in -bound..=bound {
        for q in 0..=1i64 {
            let order = ((n - q).unsigned_abs() + n.unsigned_abs()) as usize;
            if order > max_order {
                continue;
            }
            // Written so that swapping src and mic maps n → −n bit-exactly.
            let base = if q == 0 { src - mic } else { -src - mic };
            out.push((base + 2.0 * n as f64 * len, order));
        }
    }
    out
}

/// Every image source whose total reflection count is at most `max_order`.
pub fn image_sources(room: &RoomSpec, src: &Point, mic: &Point, max_order: usize) -> Vec<Image> {
    let axes: Vec<Vec<(f64, usize)>> = (0..3)
        .map(|a| axis_images(src[a], mic[a], room.dimensions[a], max_order))
        .collect();
    let mut out = Vec::new();
    for &(dx, ox) in &axes[0] {
        for &(dy, oy) in &axes[1] {
            if ox + oy > max_order {
                continue;
            }
            for &(dz, oz) in &axes[2] {
                let order = ox + oy + oz;
                if order <= max_order {
                    out.push(Image {
                        distance: (dx * dx + dy * dy + dz * dz).sqrt(),
                        order,
                    });
                }
            }
        }
    }
    out
}

fn check_points(room: &RoomSpec, src: &Point, mic: &Point) -> Result<()> {
    room.validate()?;
    for (name, p) in [("source", src), ("microphone", mic)] {
        if !room.contains(p, 0.0) {
            return Err(Error::Geometry(format!(
                "{name} at {p:?} lies outside the {:?} room",
                room.dimensions
            )));
        }
    }
    if distance(src, mic) == 0.0 {
        return Err(Error::Geometry("source and microphone coincide".into()));
    }
    Ok(())
}

/// Impulse response from `src` to `mic`: each image adds
/// `β^order / (4π·dist)` at sample `round(fs·dist/c)`. The response ends at
/// the latest image arrival.
pub fn image_method_rir(room: &RoomSpec, src: &Point, mic: &Point, max_order: usize) -> Result<Vec<f64>> {
    check_points(room, src, mic)?;
    let beta = room.reflection();
    let samples_per_metre = room.sample_rate as f64 / room.sound_speed;
    let mut images = image_sources(room, src, mic, max_order);
    if beta == 0.0 {
        images.retain(|i| i.order == 0);
    }
    // Sorting makes the accumulation order independent of enumeration order,
    // which keeps reciprocal responses bit-identical.
    images.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.order.cmp(&b.order)));
    let last = images
        .iter()
        .map(|i| (i.distance * samples_per_metre).round() as usize)
        .max()
        .unwrap_or(0);
    let mut rir = vec![0.0; last + 1];
    for img in &images {
        let tap = (img.distance * samples_per_metre).round() as usize;
        rir[tap] += beta.powi(img.order as i32) / (4.0 * std::f64::consts::PI * img.distance);
    }
    Ok(rir)
}

/// Linear convolution truncated to `out_len` samples, via FFT.
pub fn fft_convolve(signal: &[f64], kernel: &[f64], out_len: usize) -> Vec<f64> {
    if signal.is_empty() || kernel.is_empty() {
        return vec![0.0; out_len];
    }
    let full = signal.len() + kernel.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::new();
    let forward: Arc<dyn Fft<f64>> = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);
    let lift = |x: &[f64]| -> Vec<Complex<f64>> {
        let mut v: Vec<Complex<f64>> = x.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let (mut a, mut b) = (lift(signal), lift(kernel));
    forward.process(&mut a);
    forward.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inverse.process(&mut a);
    let scale = 1.0 / n as f64;
    (0..out_len)
        .map(|i| if i < full { a[i].re * scale } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn room() -> RoomSpec {
        RoomSpec::new([4.0, 5.0, 3.0], 0.3, 16_000).unwrap()
    }

    #[test]
    fn direct_path_only_at_order_zero() {
        let (src, mic) = ([1.0, 1.5, 1.2], [3.0, 4.0, 1.7]);
        let rir = image_method_rir(&room(), &src, &mic, 0).unwrap();
        let d = distance(&src, &mic);
        let tap = (16_000.0 * d / 343.0).round() as usize;
        assert_eq!(rir.len(), tap + 1);
        assert_eq!(rir[tap], 1.0 / (4.0 * std::f64::consts::PI * d));
        assert!(rir[..tap].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_order_matches_hand_enumeration() {
        let r = room();
        let (src, mic) = ([1.0, 1.5, 1.2], [3.0, 4.0, 1.7]);
        let beta = r.reflection();
        let [lx, ly, lz] = r.dimensions;
        let [x, y, z] = src;
        // Direct source plus its mirror in each of the six walls.
        let images: [(Point, usize); 7] = [
            ([x, y, z], 0),
            ([-x, y, z], 1),
            ([2.0 * lx - x, y, z], 1),
            ([x, -y, z], 1),
            ([x, 2.0 * ly - y, z], 1),
            ([x, y, -z], 1),
            ([x, y, 2.0 * lz - z], 1),
        ];
        let mut expected = std::collections::BTreeMap::new();
        for (p, order) in images {
            let d = distance(&p, &mic);
            let tap = (16_000.0 * d / 343.0).round() as usize;
            *expected.entry(tap).or_insert(0.0) += beta.powi(order as i32) / (4.0 * std::f64::consts::PI * d);
        }
        let rir = image_method_rir(&r, &src, &mic, 1).unwrap();
        assert_eq!(rir.len(), expected.keys().max().unwrap() + 1);
        for (i, &v) in rir.iter().enumerate() {
            let want = expected.get(&i).copied().unwrap_or(0.0);
            assert!((v - want).abs() <= 1e-15 * want.abs().max(1e-3), "tap {i}: {v} vs {want}");
        }
        assert_eq!(image_sources(&r, &src, &mic, 1).len(), 7);
    }

    #[test]
    fn reciprocity() {
        let r = room();
        let (a, b) = ([0.7, 3.1, 2.2], [3.3, 0.9, 0.5]);
        assert_eq!(
            image_method_rir(&r, &a, &b, 6).unwrap(),
            image_method_rir(&r, &b, &a, 6).unwrap()
        );
    }

    #[test]
    fn direct_delay_within_one_sample_over_random_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let dims = [rng.random_range(3.0..8.0), rng.random_range(3.0..10.0), rng.random_range(2.5..6.0)];
            let r = RoomSpec::new(dims, rng.random_range(0.05..0.7), 16_000).unwrap();
            let point = |rng: &mut ChaCha8Rng| -> Point { std::array::from_fn(|a| rng.random_range(0.3..dims[a] - 0.3)) };
            let (src, mic) = (point(&mut rng), point(&mut rng));
            let rir = image_method_rir(&r, &src, &mic, 3).unwrap();
            let first = rir.iter().position(|&v| v != 0.0).unwrap();
            let geometric = distance(&src, &mic) / 343.0 * 16_000.0;
            assert!((first as f64 - geometric).abs() <= 1.0);
        }
    }

    #[test]
    fn energy_decays_consistently_with_sabine() {
        let r = RoomSpec::new([6.0, 5.0, 3.0], 0.5, 16_000).unwrap();
        let rir = image_method_rir(&r, &[1.5, 2.0, 1.4], &[4.0, 3.2, 1.6], 40).unwrap();
        let energy = |a: usize, b: usize| -> f64 { rir[a.min(rir.len())..b.min(rir.len())].iter().map(|v| v * v).sum() };
        let early = energy(0, 800);
        let late = energy(8_000, 16_000);
        let drop_db = 10.0 * (early / late.max(1e-300)).log10();
        assert!(drop_db >= 30.0, "{drop_db}");
        // The tail is actually present: the decay between 0.1 s and 0.3 s
        // follows a 60 dB-per-T60 slope within a factor of two.
        let tail_db = 10.0 * (energy(1_600, 3_200) / energy(4_800, 6_400)).log10();
        assert!((12.0..48.0).contains(&tail_db), "{tail_db}");
    }

    #[test]
    fn absorption_caps_at_one() {
        let r = RoomSpec::new([3.0, 3.0, 2.5], 0.05, 16_000).unwrap();
        assert_eq!(r.absorption(), 1.0);
        assert_eq!(r.reflection(), 0.0);
        let rir = image_method_rir(&r, &[1.0, 1.0, 1.0], &[2.0, 2.0, 1.0], 3).unwrap();
        assert_eq!(rir.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn points_outside_are_geometry_errors() {
        let r = room();
        assert!(matches!(image_method_rir(&r, &[5.0, 1.0, 1.0], &[1.0, 1.0, 1.0], 0), Err(Error::Geometry(_))));
        assert!(matches!(image_method_rir(&r, &[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], 0), Err(Error::Geometry(_))));
    }

    #[test]
    fn fft_convolution_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a: Vec<f64> = (0..37).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = fft_convolve(&a, &b, 50);
        for (n, &g) in got.iter().enumerate() {
            let want: f64 = (0..b.len()).filter(|&k| k <= n && n - k < a.len()).map(|k| a[n - k] * b[k]).sum();
            assert!((g - want).abs() < 1e-12);
        }
    }
}
