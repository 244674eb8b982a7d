//! Per-utterance metrics, angle-bucket summaries and ideal-mask oracles.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FrameLayout, Model, SceneData};
use crate::audio::{quantize_f32, read_wav};
use crate::codec::{Spectrogram, Stft};
use crate::error::{Error, Result};
use crate::objectives::{ideal_mask, sdr, sisnr, upit_sisnr, MaskKind};
use crate::simulate::AngleBucket;
use crate::tensor::Tensor;

/// Oracle STFT: 32 ms Hann windows with 8 ms hop at 16 kHz.
pub const ORACLE_WINDOW: usize = 512;
pub const ORACLE_HOP: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene: String,
    pub bucket: Option<AngleBucket>,
    /// Mean over sources, after best-permutation alignment.
    pub sisnr: f64,
    pub sdr: f64,
    /// 1-based reference index matched to each estimate, e.g. `2 1`.
    pub permutation: String,
}

/// Scores estimates against references under the Si-SNR-optimal permutation.
pub fn score_scene(
    scene: &str,
    bucket: Option<AngleBucket>,
    estimates: &[Vec<f64>],
    references: &[Vec<f64>],
) -> Result<EvalRow> {
    let assignment = upit_sisnr(estimates, references)?;
    let s = estimates.len() as f64;
    let (mut si, mut sd) = (0.0, 0.0);
    for (e, &r) in estimates.iter().zip(&assignment.mapping) {
        si += sisnr(e, &references[r])?;
        sd += sdr(e, &references[r])?;
    }
    Ok(EvalRow {
        scene: scene.to_owned(),
        bucket,
        sisnr: si / s,
        sdr: sd / s,
        permutation: assignment.label(),
    })
}

/// Path of estimate `k` (1-based) of a scene under an estimates directory.
pub fn estimate_path(dir: &Path, scene: &str, k: usize) -> PathBuf {
    dir.join(scene).join(format!("est{k}.wav"))
}

/// Separates every scene and scores the f32-quantized estimates, matching
/// what a written-then-reread WAV would score.
pub fn evaluate_model(model: &Model, scenes: &[SceneData]) -> Result<Vec<EvalRow>> {
    scenes
        .par_iter()
        .map(|s| {
            let est: Vec<Vec<f64>> = model.separate(&s.mixture)?.iter().map(|e| quantize_f32(e)).collect();
            score_scene(&s.id, s.bucket, &est, &s.references)
        })
        .collect()
}

/// Scores estimates previously written under `dir` by [`estimate_path`].
pub fn evaluate_estimates(dir: &Path, scenes: &[SceneData]) -> Result<Vec<EvalRow>> {
    scenes
        .par_iter()
        .map(|s| {
            let est = (1..=s.references.len())
                .map(|k| {
                    let path = estimate_path(dir, &s.id, k);
                    if !path.exists() {
                        return Err(Error::Manifest(format!("missing estimate {}", path.display())));
                    }
                    let (mut channels, _) = read_wav(&path)?;
                    Ok(channels.swap_remove(0))
                })
                .collect::<Result<Vec<_>>>()?;
            if est.iter().any(|e| e.len() != s.len()) {
                return Err(Error::Input(format!("estimates of {} differ in length from the mixture", s.id)));
            }
            score_scene(&s.id, s.bucket, &est, &s.references)
        })
        .collect()
}

/// Per-bucket and overall means of a set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketSummary {
    pub counts: [usize; 4],
    pub sisnr: [Option<f64>; 4],
    pub sdr: [Option<f64>; 4],
    pub total: usize,
    pub avg_sisnr: f64,
    pub avg_sdr: f64,
}

/// Rows without a bucket (single-source scenes) only enter the AVG column.
pub fn summarize(rows: &[EvalRow]) -> BucketSummary {
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let mut counts = [0; 4];
    let mut sisnr_m = [None; 4];
    let mut sdr_m = [None; 4];
    for b in AngleBucket::ALL {
        let in_bucket: Vec<&EvalRow> = rows.iter().filter(|r| r.bucket == Some(b)).collect();
        counts[b.index()] = in_bucket.len();
        sisnr_m[b.index()] = mean(in_bucket.iter().map(|r| r.sisnr).collect());
        sdr_m[b.index()] = mean(in_bucket.iter().map(|r| r.sdr).collect());
    }
    BucketSummary {
        counts,
        sisnr: sisnr_m,
        sdr: sdr_m,
        total: rows.len(),
        avg_sisnr: mean(rows.iter().map(|r| r.sisnr).collect()).unwrap_or(f64::NAN),
        avg_sdr: mean(rows.iter().map(|r| r.sdr).collect()).unwrap_or(f64::NAN),
    }
}

pub fn write_rows_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scene", "bucket", "sisnr", "sdr", "permutation"])?;
    for r in rows {
        w.write_record([
            r.scene.clone(),
            r.bucket.map(|b| b.label().to_owned()).unwrap_or_default(),
            format!("{:.17e}", r.sisnr),
            format!("{:.17e}", r.sdr),
            r.permutation.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Table-shaped report: one row per `(system, metric)` with a column per
/// angle bucket and an AVG column. Buckets without scenes are left empty.
pub fn write_summary_csv<W: std::io::Write>(out: W, systems: &[(String, BucketSummary)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["system".to_owned(), "metric".to_owned()];
    header.extend(AngleBucket::ALL.iter().map(|b| b.label().to_owned()));
    header.push("AVG".into());
    w.write_record(&header)?;
    let cell = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
    for (name, s) in systems {
        for (metric, by_bucket, avg) in [("sisnr", s.sisnr, s.avg_sisnr), ("sdr", s.sdr, s.avg_sdr)] {
            let mut rec = vec![name.clone(), metric.to_owned()];
            rec.extend(by_bucket.iter().map(|v| cell(*v)));
            rec.push(cell(Some(avg)));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: PathBuf::from("<report>"),
        source: e,
    })
}

/// Oracle-masked estimates of one scene at the reference microphone,
/// f32-quantized. Masks multiply the complex mixture STFT, so the
/// phase-sensitive mask may flip the sign of a bin.
pub fn oracle_estimates(kind: MaskKind, scene: &SceneData, stft: &Stft) -> Result<Vec<Vec<f64>>> {
    let len = scene.len();
    let layout = FrameLayout::new(stft.config(), len)?;
    let padded = |x: &[f64]| {
        let mut v = vec![0.0; layout.pad_left];
        v.extend_from_slice(x);
        v.resize(layout.padded_len(), 0.0);
        v
    };
    let mixture = stft.analyze(&padded(&scene.mixture[0]))?;
    let sources = scene
        .references
        .iter()
        .map(|r| stft.analyze(&padded(r)))
        .collect::<Result<Vec<_>>>()?;
    let masks = ideal_mask(kind, &sources, &mixture)?;
    masks
        .iter()
        .map(|m| {
            let apply = |plane: &Tensor| {
                let data = plane.data().iter().zip(m.data()).map(|(a, b)| a * b).collect();
                Tensor::new(plane.shape(), data)
            };
            let masked = Spectrogram {
                re: apply(&mixture.re)?,
                im: apply(&mixture.im)?,
            };
            let y = stft.synthesize(&masked, layout.padded_len())?;
            Ok(quantize_f32(&y[layout.pad_left..layout.pad_left + len]))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub mask: MaskKind,
    pub rows: Vec<EvalRow>,
}

/// Scores every requested oracle mask on every scene.
pub fn oracle_report(scenes: &[SceneData], kinds: &[MaskKind], window: usize, hop: usize) -> Result<Vec<OracleRow>> {
    let stft = Stft::new(window, hop)?;
    kinds
        .iter()
        .map(|&mask| {
            let rows = scenes
                .par_iter()
                .map(|s| {
                    let est = oracle_estimates(mask, s, &stft)?;
                    score_scene(&s.id, s.bucket, &est, &s.references)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(OracleRow { mask, rows })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::METRIC_CAP_DB;
    use crate::simulate::{simulate_scene, SimulationRules};

    fn row(bucket: Option<AngleBucket>, sisnr: f64, sdr: f64) -> EvalRow {
        EvalRow {
            scene: "x".into(),
            bucket,
            sisnr,
            sdr,
            permutation: "1 2".into(),
        }
    }

    fn small_rules() -> SimulationRules {
        let mut r = SimulationRules::wsj0();
        r.duration_s = 0.6;
        r.max_order = 3;
        r
    }

    #[test]
    fn references_score_at_the_cap() {
        let scene = SceneData::from(&simulate_scene(&small_rules(), 3, 0).unwrap());
        let r = score_scene(&scene.id, scene.bucket, &scene.references, &scene.references).unwrap();
        assert_eq!((r.sisnr, r.sdr), (METRIC_CAP_DB, METRIC_CAP_DB));
        assert_eq!(r.permutation, "1 2");
    }

    #[test]
    fn reference_order_does_not_change_scores() {
        let scene = SceneData::from(&simulate_scene(&small_rules(), 4, 0).unwrap());
        let stft = Stft::new(ORACLE_WINDOW, ORACLE_HOP).unwrap();
        let est = oracle_estimates(MaskKind::Irm, &scene, &stft).unwrap();
        let a = score_scene("a", None, &est, &scene.references).unwrap();
        let swapped: Vec<Vec<f64>> = scene.references.iter().rev().cloned().collect();
        let b = score_scene("a", None, &est, &swapped).unwrap();
        assert_eq!((a.sisnr, a.sdr), (b.sisnr, b.sdr));
        assert_eq!((a.permutation.as_str(), b.permutation.as_str()), ("1 2", "2 1"));
    }

    #[test]
    fn summary_means_per_bucket() {
        let rows = [
            row(Some(AngleBucket::Under15), 1.0, 2.0),
            row(Some(AngleBucket::Under15), 3.0, 4.0),
            row(Some(AngleBucket::Over90), 5.0, 6.0),
            row(None, 9.0, 9.0),
        ];
        let s = summarize(&rows);
        assert_eq!(s.counts, [2, 0, 0, 1]);
        assert_eq!(s.sisnr, [Some(2.0), None, None, Some(5.0)]);
        assert_eq!(s.sdr[0], Some(3.0));
        assert_eq!((s.avg_sisnr, s.avg_sdr), (4.5, 5.25));
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &[("iam".into(), s)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "system,metric,0-15,15-45,45-90,90-180,AVG");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("iam,sisnr,2.0"));
        assert!(lines[1].contains(",,,"));
    }

    #[test]
    fn ideal_phase_sensitive_masks_beat_amplitude_masks() {
        let rules = small_rules();
        let scenes: Vec<SceneData> = (0..4).map(|i| SceneData::from(&simulate_scene(&rules, 11, i).unwrap())).collect();
        let report = oracle_report(&scenes, &MaskKind::ALL, ORACLE_WINDOW, ORACLE_HOP).unwrap();
        let avg = |k: MaskKind| summarize(&report.iter().find(|r| r.mask == k).unwrap().rows).avg_sisnr;
        assert!(avg(MaskKind::Ipsm) > avg(MaskKind::Iam));
        assert!(avg(MaskKind::Ipsm) > avg(MaskKind::Irm));
    }

    #[test]
    fn single_source_oracles_are_near_the_cap() {
        let mut rules = small_rules();
        rules.sources = 1;
        let scene = SceneData::from(&simulate_scene(&rules, 2, 0).unwrap());
        assert_eq!(scene.references.len(), 1);
        for row in oracle_report(std::slice::from_ref(&scene), &MaskKind::ALL, 256, 64).unwrap() {
            assert!(row.rows[0].sisnr > 60.0, "{:?}: {}", row.mask, row.rows[0].sisnr);
        }
    }

    #[test]
    fn missing_estimates_are_manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneData::from(&simulate_scene(&small_rules(), 3, 0).unwrap());
        let err = evaluate_estimates(dir.path(), &[scene]).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
    }
}
