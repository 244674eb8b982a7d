//! Epoch loop: chunked uPIT training with Adam, validation, learning-rate
//! halving and resumable checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{chunk, Chunk, ExperimentConfig, Model, SceneData};
use crate::autodiff::{Adam, Tape};
use crate::error::{Error, Result};
use crate::objectives::{PermutationAssignment, ENERGY_FLOOR};
use crate::separator::{Checkpoint, Mode, Precision, Tcn};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` without validation scenes.
    pub valid_loss: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub steps: usize,
    /// Chunks skipped because a reference was silent.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub assignment: PermutationAssignment,
}

/// Everything besides parameters needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainState {
    epochs_done: usize,
    steps: usize,
    lr: f64,
    best_valid: Option<f64>,
    stagnant: usize,
    history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    state: TrainState,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let lr = config.lr;
        Ok(Trainer {
            model: Model::new(config)?,
            state: TrainState {
                epochs_done: 0,
                steps: 0,
                lr,
                best_valid: None,
                stagnant: 0,
                history: Vec::new(),
            },
        })
    }

    /// Continues the run saved in `ckpt`, which must have been produced from
    /// a config with the same model hash.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: ExperimentConfig) -> Result<Self> {
        let model = Model::from_checkpoint(ckpt, Some(config))?;
        let state = ckpt
            .metadata
            .get("train_state")
            .cloned()
            .ok_or_else(|| Error::Config("checkpoint carries no training state".into()))?;
        let state = serde_json::from_value(state).map_err(|e| Error::Config(format!("training state: {e}")))?;
        Ok(Trainer { model, state })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.state.epochs_done
    }

    pub fn steps(&self) -> usize {
        self.state.steps
    }

    pub fn lr(&self) -> f64 {
        self.state.lr
    }

    pub fn best_valid(&self) -> Option<f64> {
        self.state.best_valid
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }

    pub fn chunk_len(&self, sample_rate: u32) -> usize {
        (self.model.config().chunk_s * sample_rate as f64).round().max(1.0) as usize
    }

    /// Non-overlapping chunks of every scene, shuffled by `(seed, epoch)`.
    pub fn epoch_chunks(&self, scenes: &[SceneData], epoch: usize) -> Vec<(usize, Chunk)> {
        let mut out: Vec<(usize, Chunk)> = scenes
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                let len = self.chunk_len(s.sample_rate);
                chunk(s.len(), len, len).into_iter().map(move |c| (i, c))
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config().seed);
        rng.set_stream(epoch as u64);
        out.shuffle(&mut rng);
        out
    }

    /// One Adam update on a single mixture; returns the loss before the update.
    pub fn step(&mut self, mixture: &[Vec<f64>], references: &[Vec<f64>]) -> Result<StepOutcome> {
        let mut tape = Tape::new();
        let (loss, assignment, out) =
            self.model
                .pipeline
                .loss(&mut tape, &self.model.store, mixture, references, Mode::Train)?;
        let grads = tape.backward(loss)?;
        let store = &mut self.model.store;
        store.zero_grad();
        store.accumulate(&tape, &grads);
        Adam::with_lr(self.state.lr).step(store);
        Tcn::update_running_stats(store, &out.batch_stats);
        self.state.steps += 1;
        Ok(StepOutcome {
            loss: tape.value(loss).item(),
            assignment,
        })
    }

    /// Mean inference-mode loss over whole utterances.
    pub fn validation_loss(&self, scenes: &[SceneData]) -> Result<f64> {
        use rayon::prelude::*;
        let losses = scenes
            .par_iter()
            .map(|s| {
                let mut tape = Tape::new();
                let (loss, _, _) =
                    self.model
                        .pipeline
                        .loss(&mut tape, &self.model.store, &s.mixture, &s.references, Mode::Infer)?;
                Ok(tape.value(loss).item())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Runs the next epoch and updates the schedule. Returns the record and
    /// whether the validation loss improved on the best so far.
    pub fn run_epoch(&mut self, train: &[SceneData], valid: &[SceneData]) -> Result<(EpochRecord, bool)> {
        let epoch = self.state.epochs_done + 1;
        let lr = self.state.lr;
        let (mut total, mut steps, mut skipped) = (0.0, 0, 0);
        for (i, c) in self.epoch_chunks(train, epoch) {
            let scene = &train[i];
            let refs: Vec<Vec<f64>> = scene.references.iter().map(|r| c.extract(r)).collect();
            if refs.iter().any(|r| r.iter().map(|v| v * v).sum::<f64>() < ENERGY_FLOOR) {
                skipped += 1;
                continue;
            }
            let mix: Vec<Vec<f64>> = scene.mixture.iter().map(|m| c.extract(m)).collect();
            let outcome = self.step(&mix, &refs).map_err(|e| diverged(e, epoch, &scene.id, c.start))?;
            total += outcome.loss;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::Input("no trainable chunks: every reference chunk is silent".into()));
        }
        let valid_loss = if valid.is_empty() {
            None
        } else {
            Some(self.validation_loss(valid).map_err(|e| diverged(e, epoch, "validation", 0))?)
        };
        let improved = match (valid_loss, self.state.best_valid) {
            (Some(v), Some(best)) => v < best,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.state.best_valid = valid_loss;
            self.state.stagnant = 0;
        } else if valid_loss.is_some() {
            self.state.stagnant += 1;
            if self.state.stagnant >= self.model.config().lr_patience {
                self.state.lr *= 0.5;
                self.state.stagnant = 0;
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / steps as f64,
            valid_loss,
            lr,
            steps,
            skipped,
        };
        self.state.history.push(record.clone());
        self.state.epochs_done = epoch;
        Ok((record, improved))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let state = serde_json::to_value(&self.state).expect("training state always serializes");
        self.model.checkpoint(serde_json::json!({
            "epoch": self.state.epochs_done,
            "step": self.state.steps,
            "lr": self.state.lr,
            "best_valid": self.state.best_valid,
            "train_state": state,
        }))
    }
}

fn diverged(e: Error, epoch: usize, scene: &str, start: usize) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Diverged {
            epoch,
            chunk: format!("{scene}@{start}"),
            detail: format!("{op}: {detail}"),
        },
        other => other,
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `last.ckpt` and `best.ckpt` are written; nothing is written without it.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from `last.ckpt` in `checkpoint_dir` when it exists.
    pub resume: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_valid: Option<f64>,
    pub model: Model,
}

/// Trains until `config.max_epochs` epochs are done, saving `last.ckpt`
/// after every epoch and `best.ckpt` whenever validation improves.
pub fn train(
    config: ExperimentConfig,
    train_scenes: &[SceneData],
    valid_scenes: &[SceneData],
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if train_scenes.is_empty() {
        return Err(Error::Input("no training scenes".into()));
    }
    let dir = options.checkpoint_dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let last = dir.map(|d| d.join(LAST_CHECKPOINT));
    let mut trainer = match &last {
        Some(p) if options.resume && p.exists() => Trainer::from_checkpoint(&Checkpoint::read(p)?, config.clone())?,
        _ => Trainer::new(config.clone())?,
    };
    while trainer.epochs_done() < config.max_epochs {
        let (record, improved) = trainer.run_epoch(train_scenes, valid_scenes)?;
        on_epoch(&record);
        if let Some(d) = dir {
            let ckpt = trainer.checkpoint();
            write_atomic(&ckpt, &d.join(LAST_CHECKPOINT))?;
            if improved {
                write_atomic(&ckpt, &d.join(BEST_CHECKPOINT))?;
            }
        }
    }
    Ok(TrainReport {
        history: trainer.history().to_vec(),
        best_valid: trainer.best_valid(),
        model: trainer.into_model(),
    })
}

/// Writes through a temporary file so an interrupted run never leaves a
/// truncated checkpoint behind.
fn write_atomic(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    ckpt.write(&tmp, Precision::F64)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::super::tests::{noise, tiny_config};
    use super::super::PipelineKind;
    use super::*;
    use crate::objectives::Criterion;

    fn scenes(count: usize, len: usize) -> Vec<SceneData> {
        (0..count)
            .map(|i| {
                let refs = vec![noise(100 + 2 * i as u64, len), noise(101 + 2 * i as u64, len)];
                let mix = vec![(0..len).map(|n| refs[0][n] + refs[1][n]).collect()];
                SceneData {
                    id: format!("s{i}"),
                    mixture: mix,
                    references: refs,
                    bucket: None,
                    sample_rate: 16_000,
                }
            })
            .collect()
    }

    fn config(lr: f64) -> ExperimentConfig {
        let mut c = tiny_config(PipelineKind::Waveform, Criterion::UpitSisnr);
        c.chunk_s = 0.01;
        c.lr = lr;
        c
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut t = Trainer::new(config(0.0)).unwrap();
        let before = t.model().store.clone();
        t.run_epoch(&scenes(2, 400), &[]).unwrap();
        for (a, b) in before.params().iter().zip(t.model().store.params()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert!(t.steps() > 0);
    }

    #[test]
    fn resume_reproduces_the_next_step_exactly() {
        let data = scenes(2, 400);
        let valid = scenes(1, 300);
        let mut straight = Trainer::new(config(1e-3)).unwrap();
        straight.run_epoch(&data, &valid).unwrap();
        let ckpt = straight.checkpoint();
        let bytes = ckpt.to_bytes(Precision::F64);
        let reloaded = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let mut resumed = Trainer::from_checkpoint(&reloaded, config(1e-3)).unwrap();

        let (a, _) = straight.run_epoch(&data, &valid).unwrap();
        let (b, _) = resumed.run_epoch(&data, &valid).unwrap();
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.valid_loss.map(f64::to_bits), b.valid_loss.map(f64::to_bits));
        for (p, q) in straight.model().store.params().iter().zip(resumed.model().store.params()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn epochs_shuffle_deterministically() {
        let t = Trainer::new(config(1e-3)).unwrap();
        let data = scenes(3, 700);
        assert_eq!(t.epoch_chunks(&data, 1), t.epoch_chunks(&data, 1));
        assert_ne!(t.epoch_chunks(&data, 1), t.epoch_chunks(&data, 2));
        assert_eq!(t.epoch_chunks(&data, 1).len(), 3 * 5);
    }

    #[test]
    fn silent_chunks_are_skipped() {
        let mut data = scenes(1, 480);
        for v in &mut data[0].references[1][160..] {
            *v = 0.0;
        }
        let mut t = Trainer::new(config(1e-3)).unwrap();
        let (record, _) = t.run_epoch(&data, &[]).unwrap();
        assert_eq!((record.steps, record.skipped), (1, 2));
    }

    #[test]
    fn stagnation_halves_the_learning_rate() {
        let data = scenes(1, 320);
        let mut t = Trainer::new(config(1e-3)).unwrap();
        t.state.best_valid = Some(f64::NEG_INFINITY);
        for _ in 0..3 {
            t.run_epoch(&data, &data).unwrap();
        }
        assert_eq!(t.lr(), 5e-4);
        assert_eq!(t.history().iter().map(|r| r.lr).collect::<Vec<_>>(), [1e-3; 3]);
    }

    #[test]
    fn train_writes_and_resumes_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = scenes(2, 320);
        let options = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            resume: true,
        };
        let mut c = config(1e-3);
        c.max_epochs = 2;
        let full = train(c.clone(), &data, &data, &options, |_| {}).unwrap();
        assert!(dir.path().join(BEST_CHECKPOINT).exists());

        let dir2 = tempfile::tempdir().unwrap();
        let options2 = TrainOptions {
            checkpoint_dir: Some(dir2.path().to_path_buf()),
            resume: true,
        };
        c.max_epochs = 1;
        train(c.clone(), &data, &data, &options2, |_| {}).unwrap();
        c.max_epochs = 2;
        let resumed = train(c, &data, &data, &options2, |_| {}).unwrap();
        assert_eq!(full.history, resumed.history);
        let last = Checkpoint::read(&dir2.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(last.metadata["epoch"], 2);
    }

    #[test]
    fn numeric_failures_name_the_chunk() {
        let e = diverged(Error::numeric("div", "inf"), 3, "scene_00002", 64_000);
        assert!(matches!(&e, Error::Diverged { epoch: 3, chunk, .. } if chunk == "scene_00002@64000"));
        assert!(matches!(diverged(Error::Input("x".into()), 1, "s", 0), Error::Input(_)));
    }
}
