//! Spatialized reverberant two-speaker mixtures.
//!
//! A scene is drawn in two stages. [`sample_scene`] picks an angle bucket
//! from the target proportions and then rejection-samples a room, a circular
//! array and source positions whose angle difference (seen from the array
//! centre) falls in that bucket. [`render_scene`] synthesizes the sources,
//! computes image-method RIRs and mixes every channel.

mod manifest;
mod rir;
mod source;

pub use manifest::{
    load_scene, write_dataset, DatasetIndex, LoadedScene, SceneManifest, SourceRecord, DATASET_INDEX, MANIFEST_VERSION,
};
pub use rir::{distance, fft_convolve, image_method_rir, image_sources, Image, Point, RoomSpec, SOUND_SPEED};
pub use source::{pink_noise, synth_source, MIN_DURATION_S, NOISE_LEVEL_DB, SOURCE_PEAK};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Draws rejected before a rule set is declared infeasible.
pub const MAX_REJECTIONS: usize = 10_000;

/// Angle-difference buckets used by every evaluation report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AngleBucket {
    #[serde(rename = "0-15")]
    Under15,
    #[serde(rename = "15-45")]
    Under45,
    #[serde(rename = "45-90")]
    Under90,
    #[serde(rename = "90-180")]
    Over90,
}

impl AngleBucket {
    pub const ALL: [AngleBucket; 4] = [
        AngleBucket::Under15,
        AngleBucket::Under45,
        AngleBucket::Under90,
        AngleBucket::Over90,
    ];

    /// Half-open degree range; the last bucket includes 180.
    pub fn range(self) -> (f64, f64) {
        match self {
            AngleBucket::Under15 => (0.0, 15.0),
            AngleBucket::Under45 => (15.0, 45.0),
            AngleBucket::Under90 => (45.0, 90.0),
            AngleBucket::Over90 => (90.0, 180.0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AngleBucket::Under15 => "0-15",
            AngleBucket::Under45 => "15-45",
            AngleBucket::Under90 => "45-90",
            AngleBucket::Over90 => "90-180",
        }
    }

    pub fn index(self) -> usize {
        AngleBucket::ALL.iter().position(|&b| b == self).expect("bucket listed in ALL")
    }

    pub fn from_degrees(diff: f64) -> Option<AngleBucket> {
        AngleBucket::ALL.into_iter().find(|b| {
            let (lo, hi) = b.range();
            diff >= lo && (diff < hi || (hi == 180.0 && diff <= hi))
        })
    }
}

impl fmt::Display for AngleBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// What each per-source reference signal contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Source convolved with its full RIR to the reference microphone, so the
    /// references sum to the reference channel exactly.
    Reverberant,
    /// Source convolved with the order-0 RIR to the reference microphone.
    DirectPath,
    /// The anechoic source signal.
    Dry,
}

fn default_margin() -> f64 {
    0.3
}
fn default_diameter() -> f64 {
    0.07
}
fn default_microphones() -> usize {
    6
}
fn default_sample_rate() -> u32 {
    16_000
}
fn default_duration() -> f64 {
    2.0
}
fn default_f0() -> [f64; 2] {
    [90.0, 250.0]
}
fn default_max_order() -> usize {
    10
}
fn default_reference() -> ReferenceKind {
    ReferenceKind::Reverberant
}
fn default_overlap() -> [f64; 2] {
    [1.0, 1.0]
}
fn default_sources() -> usize {
    2
}

/// A mixture recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationRules {
    pub name: String,
    /// Smallest (length, width, height) in metres.
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub t60_range: [f64; 2],
    /// Minimum distance from any wall for array centre, microphones and sources.
    #[serde(default = "default_margin")]
    pub wall_margin: f64,
    /// Source-to-array-centre distance range in metres.
    pub source_distance: [f64; 2],
    /// Target share of the 0-15, 15-45, 45-90 and 90-180 degree buckets.
    pub bucket_proportions: [f64; 4],
    /// Azimuth range of the first source in the array frame, degrees.
    #[serde(default)]
    pub first_source_azimuth: Option<[f64; 2]>,
    #[serde(default = "default_diameter")]
    pub array_diameter: f64,
    #[serde(default = "default_microphones")]
    pub microphones: usize,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    /// Length of each synthetic source in seconds.
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_f0")]
    pub f0_range: [f64; 2],
    #[serde(default = "default_max_order")]
    pub max_order: usize,
    #[serde(default = "default_reference")]
    pub reference: ReferenceKind,
    /// Fraction of each later source overlapping the first source.
    #[serde(default = "default_overlap")]
    pub overlap_range: [f64; 2],
    #[serde(default = "default_sources")]
    pub sources: usize,
}

impl SimulationRules {
    /// Parses and validates a rules file; unknown keys are rejected by name.
    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rules: SimulationRules =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        rules.validate()?;
        Ok(rules)
    }

    /// Spatialized WSJ0-2mix style recipe.
    pub fn wsj0() -> Self {
        SimulationRules {
            name: "wsj0_2mix_spatialized".into(),
            room_min: [3.0, 3.0, 2.5],
            room_max: [8.0, 10.0, 6.0],
            t60_range: [0.05, 0.5],
            wall_margin: default_margin(),
            source_distance: [0.5, 6.0],
            bucket_proportions: [0.16, 0.29, 0.26, 0.29],
            first_source_azimuth: None,
            array_diameter: default_diameter(),
            microphones: default_microphones(),
            sample_rate: default_sample_rate(),
            duration_s: default_duration(),
            f0_range: default_f0(),
            max_order: default_max_order(),
            reference: default_reference(),
            overlap_range: default_overlap(),
            sources: default_sources(),
        }
    }

    /// LibriSpeech-2mix style recipe with the frontal first-speaker constraint.
    pub fn librispeech() -> Self {
        SimulationRules {
            name: "librispeech_2mix".into(),
            room_max: [10.0, 8.0, 6.0],
            t60_range: [0.05, 0.7],
            bucket_proportions: [0.11, 0.20, 0.20, 0.49],
            first_source_azimuth: Some([225.0, 315.0]),
            ..SimulationRules::wsj0()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("rules `{}`: {what}", self.name)));
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if (0..3).any(|a| !(self.room_min[a] > 0.0 && self.room_min[a] <= self.room_max[a])) {
            return bad("room_min must be positive and not exceed room_max");
        }
        if !ordered(self.t60_range) || self.t60_range[0] <= 0.0 {
            return bad("t60_range must be a positive ordered pair");
        }
        if !ordered(self.source_distance) || self.source_distance[0] <= 0.0 {
            return bad("source_distance must be a positive ordered pair");
        }
        if self.wall_margin < 0.0 {
            return bad("wall_margin must be non-negative");
        }
        let total: f64 = self.bucket_proportions.iter().sum();
        if self.bucket_proportions.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-6 {
            return bad("bucket_proportions must be non-negative and sum to 1");
        }
        if let Some(az) = self.first_source_azimuth {
            if !ordered(az) {
                return bad("first_source_azimuth must be an ordered pair");
            }
        }
        if self.microphones == 0 || !(self.array_diameter > 0.0) {
            return bad("the array needs at least one microphone and a positive diameter");
        }
        if self.duration_s < MIN_DURATION_S {
            return bad("duration_s must be at least 0.5");
        }
        if !ordered(self.overlap_range) || self.overlap_range[0] <= 0.0 || self.overlap_range[1] > 1.0 {
            return bad("overlap_range must lie in (0, 1]");
        }
        if self.sources == 0 {
            return bad("sources must be at least 1");
        }
        Ok(())
    }
}

/// Circular microphone array in the horizontal plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub center: Point,
    pub diameter: f64,
    /// Direction of microphone 1 from the centre, degrees.
    pub orientation_deg: f64,
    pub microphones: usize,
}

impl ArraySpec {
    pub fn positions(&self) -> Vec<Point> {
        let r = self.diameter / 2.0;
        (0..self.microphones)
            .map(|k| {
                let a = (self.orientation_deg + 360.0 * k as f64 / self.microphones as f64).to_radians();
                [self.center[0] + r * a.cos(), self.center[1] + r * a.sin(), self.center[2]]
            })
            .collect()
    }

    /// Azimuth of `p` in the array frame, in `[0, 360)`.
    pub fn azimuth_of(&self, p: &Point) -> f64 {
        let world = (p[1] - self.center[1]).atan2(p[0] - self.center[0]).to_degrees();
        (world - self.orientation_deg).rem_euclid(360.0)
    }
}

/// Smallest absolute difference between two azimuths, in `[0, 180]`.
pub fn angle_difference(a_deg: f64, b_deg: f64) -> f64 {
    let d = (a_deg - b_deg).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePlacement {
    pub position: Point,
    /// Array-frame azimuth, degrees.
    pub azimuth_deg: f64,
    pub distance: f64,
    /// Seed of the synthetic signal.
    pub signal_seed: u64,
    /// Samples of silence before this source starts.
    pub onset: usize,
}

/// Everything about a scene except its audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub seed: u64,
    pub index: u64,
    pub room: RoomSpec,
    pub array: ArraySpec,
    pub sources: Vec<SourcePlacement>,
    /// Angle difference between the first two sources; absent for one source.
    pub angle_difference_deg: Option<f64>,
    pub bucket: Option<AngleBucket>,
}

/// Generator for scene `index` under `seed`: one independent stream per scene.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_bucket(rng: &mut impl Rng, proportions: &[f64; 4]) -> AngleBucket {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (b, p) in AngleBucket::ALL.iter().zip(proportions) {
        acc += p;
        if u < acc {
            return *b;
        }
    }
    // Rounding can leave `acc` a hair below 1; fall back to the last
    // bucket with non-zero weight.
    AngleBucket::ALL
        .into_iter()
        .zip(proportions)
        .rev()
        .find(|(_, p)| **p > 0.0)
        .map(|(b, _)| b)
        .unwrap_or(AngleBucket::Over90)
}

fn range(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Draws a scene geometry satisfying every rule, retrying up to
/// [`MAX_REJECTIONS`] times.
pub fn sample_scene(rules: &SimulationRules, seed: u64, index: u64) -> Result<SceneGeometry> {
    rules.validate()?;
    let mut rng = scene_rng(seed, index);
    let bucket = (rules.sources >= 2).then(|| draw_bucket(&mut rng, &rules.bucket_proportions));
    let margin = rules.wall_margin;
    let radius = rules.array_diameter / 2.0;
    for _ in 0..MAX_REJECTIONS {
        let dims: [f64; 3] = std::array::from_fn(|a| range(&mut rng, [rules.room_min[a], rules.room_max[a]]));
        let t60 = range(&mut rng, rules.t60_range);
        let room = RoomSpec::new(dims, t60, rules.sample_rate)?;
        let lo = margin + radius;
        if dims[0] < 2.0 * lo || dims[1] < 2.0 * lo || dims[2] < 2.0 * margin {
            continue;
        }
        let center = [
            range(&mut rng, [lo, dims[0] - lo]),
            range(&mut rng, [lo, dims[1] - lo]),
            range(&mut rng, [margin, dims[2] - margin]),
        ];
        let array = ArraySpec {
            center,
            diameter: rules.array_diameter,
            orientation_deg: rng.random_range(0.0..360.0),
            microphones: rules.microphones,
        };
        let place = |rng: &mut ChaCha8Rng, azimuth: f64| -> SourcePlacement {
            let distance = range(rng, rules.source_distance);
            let world = (azimuth + array.orientation_deg).to_radians();
            SourcePlacement {
                position: [center[0] + distance * world.cos(), center[1] + distance * world.sin(), center[2]],
                azimuth_deg: azimuth.rem_euclid(360.0),
                distance,
                signal_seed: 0,
                onset: 0,
            }
        };
        let first_az = range(&mut rng, rules.first_source_azimuth.unwrap_or([0.0, 360.0]));
        let mut sources = vec![place(&mut rng, first_az)];
        if let Some(b) = bucket {
            let (lo_deg, hi_deg) = b.range();
            let diff = range(&mut rng, [lo_deg, hi_deg]);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sources.push(place(&mut rng, first_az + sign * diff));
        }
        for _ in 2..rules.sources {
            let az = rng.random_range(0.0..360.0);
            sources.push(place(&mut rng, az));
        }
        if !sources.iter().all(|s| room.contains(&s.position, margin)) {
            continue;
        }
        let angle = (sources.len() >= 2).then(|| {
            angle_difference(array.azimuth_of(&sources[0].position), array.azimuth_of(&sources[1].position))
        });
        if angle.and_then(AngleBucket::from_degrees) != bucket {
            continue;
        }
        let len = (rules.duration_s * rules.sample_rate as f64).round() as usize;
        for (s, src) in sources.iter_mut().enumerate() {
            src.signal_seed = rng.random();
            if s > 0 {
                let overlap = range(&mut rng, rules.overlap_range);
                src.onset = ((1.0 - overlap) * len as f64).round() as usize;
            }
        }
        return Ok(SceneGeometry {
            seed,
            index,
            room,
            array,
            sources,
            angle_difference_deg: angle,
            bucket,
        });
    }
    Err(Error::InfeasibleRules {
        rule: rules.name.clone(),
        detail: format!("no valid geometry after {MAX_REJECTIONS} draws for scene {index}"),
    })
}

/// Per-channel mixture and per-source spatial images.
#[derive(Clone, Debug, PartialEq)]
pub struct Spatialized {
    /// `[mic][sample]`.
    pub mixture: Vec<Vec<f64>>,
    /// `[source][mic][sample]`: each source convolved with its RIRs.
    pub images: Vec<Vec<Vec<f64>>>,
}

/// Convolves each source with its per-microphone RIRs (`rirs[s][mic]`) and
/// sums. Shorter sources are zero-padded; outputs are truncated to the
/// longest source.
pub fn spatialize_and_mix(sources: &[Vec<f64>], rirs: &[Vec<Vec<f64>>]) -> Result<Spatialized> {
    if sources.len() != rirs.len() || sources.is_empty() {
        return Err(Error::Input(format!(
            "{} sources but {} RIR sets",
            sources.len(),
            rirs.len()
        )));
    }
    let mics = rirs[0].len();
    if mics == 0 || rirs.iter().any(|r| r.len() != mics) {
        return Err(Error::Input("every source needs one RIR per microphone".into()));
    }
    let len = sources.iter().map(Vec::len).max().unwrap_or(0);
    let images: Vec<Vec<Vec<f64>>> = sources
        .iter()
        .zip(rirs)
        .map(|(src, per_mic)| per_mic.iter().map(|rir| fft_convolve(src, rir, len)).collect())
        .collect();
    let mixture = (0..mics)
        .map(|m| (0..len).map(|n| images.iter().map(|img| img[m][n]).sum()).collect())
        .collect();
    Ok(Spatialized { mixture, images })
}

/// A fully rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureScene {
    pub geometry: SceneGeometry,
    pub reference_kind: ReferenceKind,
    /// `[source][mic]`.
    pub rirs: Vec<Vec<Vec<f64>>>,
    /// Dry sources after onset padding, `[source][sample]`.
    pub dry: Vec<Vec<f64>>,
    /// `[mic][sample]`.
    pub mixture: Vec<Vec<f64>>,
    /// `[source][sample]`, aligned with microphone 1.
    pub references: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl MixtureScene {
    pub fn len(&self) -> usize {
        self.mixture[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.mixture.len()
    }
}

/// Synthesizes sources, computes RIRs and mixes.
pub fn render_scene(rules: &SimulationRules, geometry: &SceneGeometry) -> Result<MixtureScene> {
    let room = &geometry.room;
    let mics = geometry.array.positions();
    let dry: Vec<Vec<f64>> = geometry
        .sources
        .iter()
        .map(|s| {
            let mut x = vec![0.0; s.onset];
            x.extend(synth_source(s.signal_seed, rules.duration_s, rules.f0_range, room.sample_rate)?);
            Ok(x)
        })
        .collect::<Result<_>>()?;
    let rirs: Vec<Vec<Vec<f64>>> = geometry
        .sources
        .iter()
        .map(|s| {
            mics.iter()
                .map(|m| image_method_rir(room, &s.position, m, rules.max_order))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mixed = spatialize_and_mix(&dry, &rirs)?;
    let len = mixed.mixture[0].len();
    let references = match rules.reference {
        ReferenceKind::Reverberant => mixed.images.iter().map(|img| img[0].clone()).collect(),
        ReferenceKind::DirectPath => geometry
            .sources
            .iter()
            .zip(&dry)
            .map(|(s, x)| Ok(fft_convolve(x, &image_method_rir(room, &s.position, &mics[0], 0)?, len)))
            .collect::<Result<_>>()?,
        ReferenceKind::Dry => dry
            .iter()
            .map(|x| {
                let mut x = x.clone();
                x.resize(len, 0.0);
                x
            })
            .collect(),
    };
    Ok(MixtureScene {
        geometry: geometry.clone(),
        reference_kind: rules.reference,
        rirs,
        dry,
        mixture: mixed.mixture,
        references,
        sample_rate: room.sample_rate,
    })
}

/// Samples and renders scene `index`.
pub fn simulate_scene(rules: &SimulationRules, seed: u64, index: u64) -> Result<MixtureScene> {
    render_scene(rules, &sample_scene(rules, seed, index)?)
}

/// Counts scenes per bucket in `ALL` order.
pub fn bucket_histogram<'a>(buckets: impl IntoIterator<Item = &'a Option<AngleBucket>>) -> [usize; 4] {
    let mut out = [0; 4];
    for b in buckets.into_iter().flatten() {
        out[b.index()] += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Stft;
    use crate::spatial::{ipd_from_waveform, PairSet};
    use crate::tensor::Tensor;

    fn quick(rules: SimulationRules) -> SimulationRules {
        SimulationRules {
            duration_s: 0.5,
            max_order: 3,
            ..rules
        }
    }

    #[test]
    fn bucket_proportions_follow_targets() {
        for rules in [SimulationRules::wsj0(), SimulationRules::librispeech()] {
            let mut counts = [0usize; 4];
            for i in 0..1000 {
                let g = sample_scene(&rules, 99, i).unwrap();
                counts[g.bucket.unwrap().index()] += 1;
            }
            for (c, p) in counts.iter().zip(&rules.bucket_proportions) {
                let share = *c as f64 / 1000.0;
                assert!((share - p).abs() <= 0.05, "{}: {counts:?}", rules.name);
            }
        }
    }

    #[test]
    fn geometry_respects_every_constraint() {
        for rules in [SimulationRules::wsj0(), SimulationRules::librispeech()] {
            for i in 0..300 {
                let g = sample_scene(&rules, 5, i).unwrap();
                let dims = g.room.dimensions;
                for a in 0..3 {
                    assert!(dims[a] >= rules.room_min[a] && dims[a] <= rules.room_max[a]);
                }
                assert!(g.room.t60 >= rules.t60_range[0] && g.room.t60 <= rules.t60_range[1]);
                for p in g.array.positions().iter().chain(g.sources.iter().map(|s| &s.position)) {
                    assert!(g.room.contains(p, 0.3), "{p:?} in {dims:?}");
                    assert_eq!(p[2], g.array.center[2]);
                }
                for s in &g.sources {
                    let d = distance(&s.position, &g.array.center);
                    assert!(d >= 0.5 - 1e-9 && d <= 6.0 + 1e-9);
                }
                let diff = angle_difference(
                    g.array.azimuth_of(&g.sources[0].position),
                    g.array.azimuth_of(&g.sources[1].position),
                );
                assert_eq!(AngleBucket::from_degrees(diff), g.bucket);
                if let Some([lo, hi]) = rules.first_source_azimuth {
                    let az = g.array.azimuth_of(&g.sources[0].position);
                    assert!(az >= lo - 1e-9 && az <= hi + 1e-9, "{az}");
                }
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let rules = quick(SimulationRules::wsj0());
        assert_eq!(sample_scene(&rules, 8, 3).unwrap(), sample_scene(&rules, 8, 3).unwrap());
        assert_ne!(sample_scene(&rules, 8, 3).unwrap(), sample_scene(&rules, 8, 4).unwrap());
        assert_eq!(simulate_scene(&rules, 8, 3).unwrap(), simulate_scene(&rules, 8, 3).unwrap());
    }

    #[test]
    fn array_is_a_regular_circle() {
        let array = ArraySpec {
            center: [2.0, 2.0, 1.0],
            diameter: 0.07,
            orientation_deg: 17.0,
            microphones: 6,
        };
        let p = array.positions();
        for i in 0..6 {
            for j in 0..6 {
                let chord = 0.07 * (PI_F * (i as f64 - j as f64).abs() / 6.0).sin();
                assert!((distance(&p[i], &p[j]) - chord).abs() < 1e-9);
            }
        }
        assert!(array.azimuth_of(&p[0]).min(360.0 - array.azimuth_of(&p[0])) < 1e-9);
    }

    const PI_F: f64 = std::f64::consts::PI;

    #[test]
    fn angle_buckets() {
        assert_eq!(angle_difference(350.0, 10.0), 20.0);
        assert_eq!(AngleBucket::from_degrees(0.0), Some(AngleBucket::Under15));
        assert_eq!(AngleBucket::from_degrees(15.0), Some(AngleBucket::Under45));
        assert_eq!(AngleBucket::from_degrees(180.0), Some(AngleBucket::Over90));
        assert_eq!(serde_json::to_string(&AngleBucket::Under90).unwrap(), "\"45-90\"");
    }

    #[test]
    fn mixture_is_the_sum_of_spatial_images() {
        let rules = quick(SimulationRules::wsj0());
        let g = sample_scene(&rules, 2, 0).unwrap();
        let scene = render_scene(&rules, &g).unwrap();
        let mixed = spatialize_and_mix(&scene.dry, &scene.rirs).unwrap();
        for m in 0..6 {
            for n in 0..scene.len() {
                let sum: f64 = mixed.images.iter().map(|img| img[m][n]).sum();
                assert_eq!(scene.mixture[m][n] - sum, 0.0);
            }
        }
        // Reverberant references sum to the reference channel.
        for n in 0..scene.len() {
            let sum: f64 = scene.references.iter().map(|r| r[n]).sum();
            assert_eq!(sum, scene.mixture[0][n]);
        }
    }

    #[test]
    fn mixing_is_linear() {
        let rules = quick(SimulationRules::wsj0());
        let scene = simulate_scene(&rules, 4, 0).unwrap();
        let scaled: Vec<Vec<f64>> = scene.dry.iter().map(|x| x.iter().map(|v| 0.3 * v).collect()).collect();
        let a = spatialize_and_mix(&scaled, &scene.rirs).unwrap();
        for (m, chan) in a.mixture.iter().enumerate() {
            for (n, v) in chan.iter().enumerate() {
                assert!((v - 0.3 * scene.mixture[m][n]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn direct_path_mixing_delays_and_attenuates() {
        let room = RoomSpec::new([5.0, 5.0, 3.0], 0.3, 16_000).unwrap();
        let src = [1.0, 1.0, 1.5];
        let mics = [[3.0, 3.0, 1.5], [4.0, 2.0, 1.5]];
        let signal: Vec<f64> = (0..400).map(|n| (n as f64 * 0.05).sin()).collect();
        let rirs = vec![mics.iter().map(|m| image_method_rir(&room, &src, m, 0).unwrap()).collect()];
        let out = spatialize_and_mix(std::slice::from_ref(&signal), &rirs).unwrap();
        for (m, mic) in mics.iter().enumerate() {
            let d = distance(&src, mic);
            let delay = (16_000.0 * d / 343.0).round() as usize;
            let gain = 1.0 / (4.0 * PI_F * d);
            for n in 0..400 {
                let want = if n >= delay { gain * signal[n - delay] } else { 0.0 };
                assert!((out.mixture[m][n] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_kinds() {
        let base = quick(SimulationRules::wsj0());
        let g = sample_scene(&base, 6, 0).unwrap();
        let dry = render_scene(&SimulationRules { reference: ReferenceKind::Dry, ..base.clone() }, &g).unwrap();
        assert_eq!(dry.references[0], dry.dry[0]);
        let direct = render_scene(&SimulationRules { reference: ReferenceKind::DirectPath, ..base }, &g).unwrap();
        let mic = g.array.positions()[0];
        let delay = (distance(&g.sources[0].position, &mic) * 16_000.0 / 343.0).round() as usize;
        let first = direct.references[0].iter().position(|v| v.abs() > 1e-12).unwrap();
        assert!(first >= delay);
    }

    #[test]
    fn partial_overlap_delays_later_sources() {
        let rules = SimulationRules {
            overlap_range: [0.5, 0.5],
            ..quick(SimulationRules::wsj0())
        };
        let scene = simulate_scene(&rules, 1, 0).unwrap();
        assert_eq!(scene.geometry.sources[1].onset, 4_000);
        assert_eq!(scene.len(), 12_000);
        assert!(scene.dry[1][..4_000].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impossible_rules_are_reported_by_name() {
        let rules = SimulationRules {
            name: "too_far".into(),
            source_distance: [20.0, 30.0],
            ..SimulationRules::wsj0()
        };
        match sample_scene(&rules, 0, 0) {
            Err(Error::InfeasibleRules { rule, .. }) => assert_eq!(rule, "too_far"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rules_reject_unknown_keys() {
        let mut v = serde_json::to_value(SimulationRules::wsj0()).unwrap();
        v["noise_snr"] = 5.into();
        let err = serde_json::from_value::<SimulationRules>(v).unwrap_err().to_string();
        assert!(err.contains("noise_snr"));
        let mut bad = SimulationRules::wsj0();
        bad.bucket_proportions = [0.5, 0.5, 0.5, 0.0];
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    /// A far source in the endfire direction of mics 1 and 4 produces an IPD
    /// whose linear-phase slope matches the geometric inter-mic delay.
    #[test]
    fn far_field_ipd_matches_geometric_delay() {
        let room = RoomSpec::new([9.0, 7.0, 3.0], 0.2, 16_000).unwrap();
        let array = ArraySpec {
            center: [6.0, 3.5, 1.5],
            diameter: 0.07,
            orientation_deg: 0.0,
            microphones: 6,
        };
        let mics = array.positions();
        let src = [1.0, 3.5, 1.5];
        let signal = synth_source(21, 1.0, [90.0, 250.0], 16_000).unwrap();
        let rirs = vec![mics.iter().map(|m| image_method_rir(&room, &src, m, 0).unwrap()).collect()];
        let out = spatialize_and_mix(&[signal], &rirs).unwrap();
        let geometric = (distance(&src, &mics[0]) - distance(&src, &mics[3])) / 343.0 * 16_000.0;

        let (l, hop) = (512, 128);
        let stft = Stft::new(l, hop).unwrap();
        let channels = Tensor::from_rows(&out.mixture).unwrap();
        let pairs = PairSet::new(vec![(1, 4)]).unwrap();
        let feats = ipd_from_waveform(&channels, &stft, &pairs).unwrap();
        let mags = stft.analyze(&out.mixture[0]).unwrap().magnitude();
        // Magnitude-weighted least-squares slope through the origin over bins
        // below the first phase wrap.
        let frames = mags.shape()[1];
        let (mut num, mut den) = (0.0, 0.0);
        for k in 1..60 {
            for t in 0..frames {
                let w = mags.data()[k * frames + t];
                let i = k * frames + t;
                // The raw phase difference is unwrapped; fold it through cos/sin.
                let phi = feats.sin_ipd[0].data()[i].atan2(feats.cos_ipd[0].data()[i]);
                num += w * k as f64 * phi;
                den += w * (k * k) as f64;
            }
        }
        let slope = num / den;
        // Conjugate-DFT convention: a lag of d samples gives −2πkd/L.
        let measured = slope * l as f64 / (2.0 * PI_F);
        assert!(
            (measured.abs() - geometric.abs()).abs() <= 0.2 * geometric.abs(),
            "measured {measured}, geometric {geometric}"
        );
    }
}
