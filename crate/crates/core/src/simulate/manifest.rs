//! On-disk scene datasets: one directory per scene holding WAV files and a
//! JSON manifest, plus a dataset index at the root.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    bucket_histogram, simulate_scene, AngleBucket, ArraySpec, MixtureScene, Point, ReferenceKind, RoomSpec,
    SimulationRules,
};
use crate::audio::{read_wav, write_wav};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// File name of the dataset index inside an output directory.
pub const DATASET_INDEX: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRecord {
    pub position: Point,
    pub azimuth_deg: f64,
    pub distance: f64,
    pub signal_seed: u64,
    pub onset: usize,
    /// Reference WAV, relative to the scene manifest.
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub version: u32,
    pub id: String,
    pub rules: String,
    pub seed: u64,
    pub index: u64,
    pub sample_rate: u32,
    pub num_samples: usize,
    pub room: RoomSpec,
    pub reflection: f64,
    pub array: ArraySpec,
    pub microphones: Vec<Point>,
    pub sources: Vec<SourceRecord>,
    pub angle_difference_deg: Option<f64>,
    pub bucket: Option<AngleBucket>,
    pub reference_kind: ReferenceKind,
    /// Multichannel mixture WAV, relative to the scene manifest.
    pub mixture: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub version: u32,
    pub rules: SimulationRules,
    pub seed: u64,
    pub count: usize,
    /// Scene manifests, relative to the index.
    pub scenes: Vec<String>,
    /// Scenes per angle bucket, in `0-15, 15-45, 45-90, 90-180` order.
    pub bucket_counts: [usize; 4],
}

impl DatasetIndex {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: DatasetIndex = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if index.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                index.version
            )));
        }
        Ok(index)
    }

    /// Absolute scene manifest paths.
    pub fn scene_paths(&self, index_path: &Path) -> Vec<PathBuf> {
        let root = index_path.parent().unwrap_or(Path::new("."));
        self.scenes.iter().map(|s| root.join(s)).collect()
    }
}

fn scene_id(index: u64) -> String {
    format!("scene_{index:05}")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one scene below `root` and returns its manifest.
pub fn write_scene(root: &Path, rules: &SimulationRules, scene: &MixtureScene) -> Result<SceneManifest> {
    let g = &scene.geometry;
    let id = scene_id(g.index);
    let dir = root.join(&id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_wav(&dir.join("mixture.wav"), &scene.mixture, scene.sample_rate)?;
    let mut sources = Vec::with_capacity(scene.references.len());
    for (s, (placement, reference)) in g.sources.iter().zip(&scene.references).enumerate() {
        let name = format!("ref{}.wav", s + 1);
        write_wav(&dir.join(&name), std::slice::from_ref(reference), scene.sample_rate)?;
        sources.push(SourceRecord {
            position: placement.position,
            azimuth_deg: placement.azimuth_deg,
            distance: placement.distance,
            signal_seed: placement.signal_seed,
            onset: placement.onset,
            reference: name,
        });
    }
    let manifest = SceneManifest {
        version: MANIFEST_VERSION,
        id,
        rules: rules.name.clone(),
        seed: g.seed,
        index: g.index,
        sample_rate: scene.sample_rate,
        num_samples: scene.len(),
        room: g.room,
        reflection: g.room.reflection(),
        array: g.array,
        microphones: g.array.positions(),
        sources,
        angle_difference_deg: g.angle_difference_deg,
        bucket: g.bucket,
        reference_kind: scene.reference_kind,
        mixture: "mixture.wav".into(),
    };
    write_json(&dir.join("scene.json"), &manifest)?;
    Ok(manifest)
}

/// Simulates `count` scenes in parallel and writes them plus the index.
pub fn write_dataset(out: &Path, rules: &SimulationRules, seed: u64, count: usize) -> Result<DatasetIndex> {
    rules.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifests: Vec<SceneManifest> = (0..count as u64)
        .into_par_iter()
        .map(|i| write_scene(out, rules, &simulate_scene(rules, seed, i)?))
        .collect::<Result<_>>()?;
    let index = DatasetIndex {
        version: MANIFEST_VERSION,
        rules: rules.clone(),
        seed,
        count,
        scenes: manifests.iter().map(|m| format!("{}/scene.json", m.id)).collect(),
        bucket_counts: bucket_histogram(manifests.iter().map(|m| &m.bucket)),
    };
    write_json(&out.join(DATASET_INDEX), &index)?;
    Ok(index)
}

/// A scene manifest together with its audio.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub manifest: SceneManifest,
    /// `[mic][sample]`.
    pub mixture: Vec<Vec<f64>>,
    /// `[source][sample]`.
    pub references: Vec<Vec<f64>>,
}

impl LoadedScene {
    pub fn sample_rate(&self) -> u32 {
        self.manifest.sample_rate
    }
}

fn read_mono(path: &Path, expect_rate: u32, expect_len: usize) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::Manifest(format!("missing reference file {}", path.display())));
    }
    let (mut chans, rate) = read_wav(path)?;
    if chans.len() != 1 || rate != expect_rate || chans[0].len() != expect_len {
        return Err(Error::Manifest(format!(
            "{}: expected mono {expect_rate} Hz with {expect_len} samples",
            path.display()
        )));
    }
    Ok(chans.remove(0))
}

pub fn load_scene(path: &Path) -> Result<LoadedScene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: SceneManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mix_path = dir.join(&manifest.mixture);
    if !mix_path.exists() {
        return Err(Error::Manifest(format!("missing mixture file {}", mix_path.display())));
    }
    let (mixture, rate) = read_wav(&mix_path)?;
    if rate != manifest.sample_rate || mixture[0].len() != manifest.num_samples {
        return Err(Error::Manifest(format!(
            "{}: mixture does not match the manifest's rate or length",
            mix_path.display()
        )));
    }
    let references = manifest
        .sources
        .iter()
        .map(|s| read_mono(&dir.join(&s.reference), manifest.sample_rate, manifest.num_samples))
        .collect::<Result<_>>()?;
    Ok(LoadedScene {
        manifest,
        mixture,
        references,
    })
}
