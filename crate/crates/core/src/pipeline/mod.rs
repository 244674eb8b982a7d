//! End-to-end separation pipelines.
//!
//! The three pipelines share everything except what the masks act on:
//!
//! * magnitude: masks scale `|Y|` and the mixture phase is kept,
//! * complex: separate masks scale the real and imaginary planes,
//! * waveform: masks scale the learned latent, decoded by a trainable bank.
//!
//! Every signal is padded by one window on the left and up to a whole frame
//! on the right before encoding, so each original sample lies in the
//! steady-state interior where the overlap-add envelope is complete.

mod chunk;
mod evaluate;
mod train;

pub use chunk::{chunk, Chunk};
pub use evaluate::{
    estimate_path, evaluate_estimates, evaluate_model, oracle_estimates, oracle_report, score_scene, summarize,
    write_rows_csv, write_summary_csv, BucketSummary, EvalRow, OracleRow, ORACLE_HOP, ORACLE_WINDOW,
};
pub use train::{train, EpochRecord, StepOutcome, TrainOptions, TrainReport, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::gradcheck::{check_params, jitter_params, GroupReport};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::codec::{magnitude_phase, Codec, CodecConfig, ComplexFrames, Domain, Encoded};
use crate::error::{Error, Result};
use crate::objectives::{upit_loss_var, Criterion, PermutationAssignment};
use crate::separator::{BatchStats, Causality, Checkpoint, MaskActivation, Mode, NormKind, Tcn, TcnConfig};
use crate::simulate::{load_scene, AngleBucket, DatasetIndex, LoadedScene, MixtureScene};
use crate::spatial::{assemble_vars, channel_phases, ipd_vars, PairSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Magnitude,
    Complex,
    Waveform,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 3] = [PipelineKind::Magnitude, PipelineKind::Complex, PipelineKind::Waveform];

    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::Magnitude => "magnitude",
            PipelineKind::Complex => "complex",
            PipelineKind::Waveform => "waveform",
        }
    }
}

fn default_kernel() -> usize {
    3
}
fn default_sources() -> usize {
    2
}
fn default_activation() -> MaskActivation {
    MaskActivation::Relu
}

/// Separator hyperparameters that do not depend on the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorSettings {
    pub bottleneck: usize,
    pub hidden: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub blocks: usize,
    pub repeats: usize,
    pub norm: NormKind,
    pub causality: Causality,
    #[serde(default = "default_sources")]
    pub sources: usize,
    #[serde(default = "default_activation")]
    pub mask_activation: MaskActivation,
}

fn default_channels() -> usize {
    1
}
fn default_chunk() -> f64 {
    4.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: PipelineKind,
    /// Microphones fed to the model; 1 uses the reference microphone only.
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Microphone pairs for IPD features, required when `channels > 1`.
    #[serde(default)]
    pub pairs: Option<PairSet>,
    pub codec: CodecConfig,
    pub separator: SeparatorSettings,
    pub loss: Criterion,
    /// Training chunk length in seconds.
    #[serde(default = "default_chunk")]
    pub chunk_s: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    /// Epochs without validation improvement before the learning rate halves.
    #[serde(default = "default_patience")]
    pub lr_patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Dataset index of the training scenes.
    #[serde(default)]
    pub train_manifest: Option<PathBuf>,
    /// Dataset index of the validation scenes, simulated under another seed.
    #[serde(default)]
    pub validation_manifest: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Manifest paths are relative to the config file.
        let root = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.train_manifest, &mut config.validation_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn pair_set(&self) -> PairSet {
        self.pairs.clone().unwrap_or_else(PairSet::empty)
    }

    /// Rows each IPD pair contributes: the codec's bins, or the waveform
    /// encoder's filter count so that every feature block has the same width.
    pub fn spatial_rows(&self) -> usize {
        self.codec.num_filters
    }

    /// Window of the STFT that supplies IPD features: the codec's own window,
    /// or for the waveform pipeline the `2(N−1)`-sample window that yields `N`
    /// bins.
    pub fn ipd_window(&self) -> usize {
        match self.pipeline {
            PipelineKind::Waveform => 2 * (self.codec.num_filters.max(2) - 1),
            _ => self.codec.window_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        let wants = match self.pipeline {
            PipelineKind::Magnitude | PipelineKind::Complex => Domain::Spectrogram,
            PipelineKind::Waveform => Domain::Waveform,
        };
        if self.codec.domain != wants {
            return Err(Error::Config(format!(
                "the {} pipeline needs a {:?} codec",
                self.pipeline.name(),
                wants
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be ≥ 1".into()));
        }
        let pairs = self.pair_set();
        if self.channels > 1 {
            if pairs.is_empty() {
                return Err(Error::Config("multi-channel configs need a non-empty `pairs` list".into()));
            }
            pairs.check_channels(self.channels)?;
            if self.pipeline == PipelineKind::Waveform && self.codec.num_filters < 2 {
                return Err(Error::Config("waveform IPD features need num_filters ≥ 2".into()));
            }
        } else if !pairs.is_empty() {
            return Err(Error::Config("`pairs` requires channels > 1".into()));
        }
        if !(self.chunk_s > 0.0) {
            return Err(Error::Config("chunk_s must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        self.tcn_config().validate()
    }

    /// Rows of the representation each mask multiplies, per source.
    pub fn mask_rows(&self) -> usize {
        match self.pipeline {
            PipelineKind::Complex => 2 * self.codec.num_filters,
            _ => self.codec.num_filters,
        }
    }

    pub fn input_width(&self) -> usize {
        let primary = self.mask_rows();
        primary + 2 * self.pair_set().len() * self.spatial_rows()
    }

    pub fn tcn_config(&self) -> TcnConfig {
        let s = &self.separator;
        TcnConfig {
            mask_rows: self.mask_rows(),
            bottleneck: s.bottleneck,
            hidden: s.hidden,
            kernel: s.kernel,
            blocks: s.blocks,
            repeats: s.repeats,
            norm: s.norm,
            causality: s.causality,
            sources: s.sources,
            input_width: self.input_width(),
            mask_activation: s.mask_activation,
        }
    }

    /// Digest of everything that shapes the model and its training
    /// trajectory. Epoch budget and data paths are excluded so a run can be
    /// resumed with a larger budget or relocated data.
    pub fn model_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.max_epochs = 0;
        canonical.train_manifest = None;
        canonical.validation_manifest = None;
        let bytes = serde_json::to_vec(&canonical).expect("configs always serialize");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl ExperimentConfig {
    /// The smallest meaningful model: `L = 16`, `hop = 8`, nine filters or
    /// bins, `X = 2`, `R = 1`, `B = H = 8`, sigmoid masks.
    pub fn tiny(pipeline: PipelineKind, loss: Criterion) -> Self {
        let codec = match pipeline {
            PipelineKind::Waveform => CodecConfig::waveform(16, 8, 9),
            _ => CodecConfig::spectrogram(16, 8),
        };
        ExperimentConfig {
            pipeline,
            channels: 1,
            pairs: None,
            codec,
            separator: SeparatorSettings {
                bottleneck: 8,
                hidden: 8,
                kernel: 3,
                blocks: 2,
                repeats: 1,
                norm: NormKind::Gln,
                causality: Causality::NonCausal,
                sources: 2,
                mask_activation: MaskActivation::Sigmoid,
            },
            loss,
            chunk_s: 1.0,
            lr: 1e-3,
            max_epochs: 1,
            lr_patience: 3,
            seed: 5,
            train_manifest: None,
            validation_manifest: None,
        }
    }
}

/// Central-difference check of every parameter of `config`'s model on a
/// 64-sample random two-source mixture. Parameters are jittered first so no
/// rectifier input sits exactly on its kink.
pub fn gradcheck_model(config: &ExperimentConfig, step: f64) -> Result<Vec<GroupReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let len = 64.max(config.codec.window_length);
    let sources = config.separator.sources;
    let refs: Vec<Vec<f64>> = (0..sources)
        .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mixture: Vec<Vec<f64>> = (0..config.channels)
        .map(|c| {
            (0..len)
                .map(|n| refs.iter().enumerate().map(|(s, r)| r[(n + c * (s + 1)) % len]).sum())
                .collect()
        })
        .collect();
    let mut model = Model::new(config.clone())?;
    jitter_params(&mut model.store, &mut rng, 0.1);
    let pipeline = model.pipeline.clone();
    check_params(&mut model.store, step, |tape, store| {
        Ok(pipeline.loss(tape, store, &mixture, &refs, Mode::Train)?.0)
    })
}

/// Padding that places every input sample inside the decoder's interior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    pub len: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub frames: usize,
}

impl FrameLayout {
    pub fn new(codec: &CodecConfig, len: usize) -> Result<Self> {
        let (l, hop) = (codec.window_length, codec.hop);
        if len < l {
            return Err(Error::Input(format!(
                "signal of {len} samples is shorter than one {l}-sample analysis window"
            )));
        }
        // Smallest F with (F−1)·hop ≥ L + T − 1.
        let frames = (l + len - 1).div_ceil(hop) + 1;
        let padded = (frames - 1) * hop + l;
        Ok(FrameLayout {
            len,
            pad_left: l,
            pad_right: padded - l - len,
            frames,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.pad_left + self.len + self.pad_right
    }

    pub fn pad(&self, tape: &mut Tape, signal: &[f64]) -> Result<Var> {
        let x = tape.constant(Tensor::row(signal)?)?;
        tape.pad_time(x, self.pad_left, self.pad_right)
    }
}

/// A scene in memory, ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub id: String,
    /// `[mic][sample]`.
    pub mixture: Vec<Vec<f64>>,
    /// `[source][sample]`.
    pub references: Vec<Vec<f64>>,
    pub bucket: Option<AngleBucket>,
    pub sample_rate: u32,
}

impl SceneData {
    pub fn len(&self) -> usize {
        self.mixture[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl From<&MixtureScene> for SceneData {
    fn from(s: &MixtureScene) -> Self {
        SceneData {
            id: format!("scene_{:05}", s.geometry.index),
            mixture: s.mixture.clone(),
            references: s.references.clone(),
            bucket: s.geometry.bucket,
            sample_rate: s.sample_rate,
        }
    }
}

impl From<LoadedScene> for SceneData {
    fn from(s: LoadedScene) -> Self {
        SceneData {
            id: s.manifest.id,
            bucket: s.manifest.bucket,
            sample_rate: s.manifest.sample_rate,
            mixture: s.mixture,
            references: s.references,
        }
    }
}

/// Loads every scene listed in a dataset index.
pub fn load_dataset(index_path: &Path) -> Result<Vec<SceneData>> {
    use rayon::prelude::*;
    let index = DatasetIndex::read(index_path)?;
    index
        .scene_paths(index_path)
        .par_iter()
        .map(|p| load_scene(p).map(SceneData::from))
        .collect()
}

/// What the masks act on, kept for the MSE criterion and for decoding.
#[derive(Clone, Copy, Debug)]
enum Representation {
    Magnitude { frames: ComplexFrames, magnitude: Var },
    Complex(ComplexFrames),
    Latent(Var),
}

/// Recorded forward pass of one mixture.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Separated `[1 × T]` signals.
    pub estimates: Vec<Var>,
    /// Masked representations compared by the MSE criterion.
    pub masked: Vec<Var>,
    /// Masks as produced by the separator (or injected).
    pub masks: Vec<Var>,
    pub batch_stats: Vec<BatchStats>,
    pub layout: FrameLayout,
}

/// Architecture of a separation model; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Pipeline {
    config: ExperimentConfig,
    codec: Codec,
    /// Fixed STFT for IPD features of the multi-channel waveform pipeline.
    ipd_codec: Option<Codec>,
    tcn: Tcn,
}

impl Pipeline {
    /// Registers every parameter in `store`, initialized from `config.seed`.
    pub fn new(config: ExperimentConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let codec = Codec::new(config.codec.clone(), "codec", store, &mut rng)?;
        let ipd_codec = if config.pipeline == PipelineKind::Waveform && config.channels > 1 {
            let stft = CodecConfig {
                sample_rate: config.codec.sample_rate,
                ..CodecConfig::spectrogram(config.ipd_window(), config.codec.hop)
            };
            Some(Codec::new(stft, "ipd_stft", store, &mut rng)?)
        } else {
            None
        };
        let tcn = Tcn::new(config.tcn_config(), "tcn", store, &mut rng)?;
        Ok(Pipeline {
            config,
            codec,
            ipd_codec,
            tcn,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn tcn(&self) -> &Tcn {
        &self.tcn
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn layout(&self, len: usize) -> Result<FrameLayout> {
        FrameLayout::new(&self.config.codec, len)
    }

    fn check_input(&self, mixture: &[Vec<f64>]) -> Result<usize> {
        let len = mixture.first().map_or(0, Vec::len);
        if mixture.len() < self.config.channels {
            return Err(Error::Input(format!(
                "model needs {} channels, mixture has {}",
                self.config.channels,
                mixture.len()
            )));
        }
        if mixture.iter().any(|c| c.len() != len) {
            return Err(Error::Input("mixture channels differ in length".into()));
        }
        Ok(len)
    }

    fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Representation> {
        Ok(match (self.config.pipeline, self.codec.encode(tape, store, x)?) {
            (PipelineKind::Magnitude, Encoded::Complex(frames)) => {
                let (magnitude, _) = magnitude_phase(tape, frames)?;
                Representation::Magnitude { frames, magnitude }
            }
            (PipelineKind::Complex, Encoded::Complex(frames)) => Representation::Complex(frames),
            (PipelineKind::Waveform, Encoded::Latent(z)) => Representation::Latent(z),
            _ => unreachable!("config validation ties the pipeline to the codec domain"),
        })
    }

    /// The representation the MSE criterion compares.
    fn target(&self, tape: &mut Tape, rep: Representation) -> Result<Var> {
        match rep {
            Representation::Magnitude { magnitude, .. } => Ok(magnitude),
            Representation::Complex(f) => tape.concat_rows(&[f.re, f.im]),
            Representation::Latent(z) => Ok(z),
        }
    }

    fn features(&self, tape: &mut Tape, store: &ParamStore, rep: Representation, channels: &[Var]) -> Result<Var> {
        let primary = self.target(tape, rep)?;
        let pairs = self.config.pair_set();
        if pairs.is_empty() {
            return Ok(primary);
        }
        let phases = match &self.ipd_codec {
            Some(codec) => {
                let aligned = channels
                    .iter()
                    .map(|&c| self.center_for_ipd(tape, c))
                    .collect::<Result<Vec<_>>>()?;
                channel_phases(tape, codec, store, &aligned)?
            }
            None => channel_phases(tape, &self.codec, store, channels)?,
        };
        let spatial = ipd_vars(tape, &phases, &pairs)?;
        assemble_vars(tape, primary, &spatial)
    }

    /// Re-pads a padded channel so that IPD frame `f`, of a different window
    /// length, is centered where encoder frame `f` is.
    fn center_for_ipd(&self, tape: &mut Tape, channel: Var) -> Result<Var> {
        let (l, w) = (self.config.codec.window_length, self.config.ipd_window());
        let len = tape.shape(channel)[1];
        if w >= l {
            let left = (w - l) / 2;
            tape.pad_time(channel, left, w - l - left)
        } else {
            let left = (l - w) / 2;
            tape.crop_time(channel, left, len - (l - w))
        }
    }

    /// Applies one mask per source and returns `(masked target, frames to decode)`.
    fn apply_mask(&self, tape: &mut Tape, rep: Representation, mask: Var) -> Result<(Var, Encoded)> {
        match rep {
            // For non-negative masks `M·re + i·M·im` is `M·|Y|` carried on the
            // mixture phase, without differentiating through the phase.
            Representation::Magnitude { frames, magnitude } => {
                let masked = tape.mul(mask, magnitude)?;
                let re = tape.mul(mask, frames.re)?;
                let im = tape.mul(mask, frames.im)?;
                Ok((masked, Encoded::Complex(ComplexFrames { re, im })))
            }
            Representation::Complex(frames) => {
                let n = self.config.codec.num_filters;
                let m_re = tape.slice_rows(mask, 0, n)?;
                let m_im = tape.slice_rows(mask, n, n)?;
                let re = tape.mul(m_re, frames.re)?;
                let im = tape.mul(m_im, frames.im)?;
                let masked = tape.concat_rows(&[re, im])?;
                Ok((masked, Encoded::Complex(ComplexFrames { re, im })))
            }
            Representation::Latent(z) => {
                let masked = tape.mul(mask, z)?;
                Ok((masked, Encoded::Latent(masked)))
            }
        }
    }

    /// Records the forward pass. With `injected` masks the separator is
    /// bypassed; each injected mask must be `[mask_rows × F]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mixture: &[Vec<f64>],
        mode: Mode,
        injected: Option<&[Tensor]>,
    ) -> Result<PipelineOutput> {
        let len = self.check_input(mixture)?;
        let layout = self.layout(len)?;
        let channels = (0..self.config.channels)
            .map(|c| layout.pad(tape, &mixture[c]))
            .collect::<Result<Vec<_>>>()?;
        let rep = self.encode(tape, store, channels[0])?;
        let (masks, batch_stats) = match injected {
            Some(masks) => (
                masks.iter().map(|m| tape.constant(m.clone())).collect::<Result<Vec<_>>>()?,
                Vec::new(),
            ),
            None => {
                let features = self.features(tape, store, rep, &channels)?;
                let out = self.tcn.forward(tape, store, features, mode)?;
                (out.masks, out.batch_stats)
            }
        };
        let mut estimates = Vec::with_capacity(masks.len());
        let mut masked = Vec::with_capacity(masks.len());
        for &mask in &masks {
            let (m, frames) = self.apply_mask(tape, rep, mask)?;
            let y = self.codec.decode(tape, store, frames, layout.padded_len())?;
            estimates.push(tape.crop_time(y, layout.pad_left, len)?);
            masked.push(m);
        }
        Ok(PipelineOutput {
            estimates,
            masked,
            masks,
            batch_stats,
            layout,
        })
    }

    /// Records the uPIT training loss of one mixture against its references.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mixture: &[Vec<f64>],
        references: &[Vec<f64>],
        mode: Mode,
    ) -> Result<(Var, PermutationAssignment, PipelineOutput)> {
        let out = self.forward(tape, store, mixture, mode, None)?;
        if references.len() != out.estimates.len() {
            return Err(Error::Input(format!(
                "{} references for a {}-source model",
                references.len(),
                out.estimates.len()
            )));
        }
        let (estimates, targets) = match self.config.loss {
            Criterion::UpitSisnr => {
                let refs = references
                    .iter()
                    .map(|r| tape.constant(Tensor::row(r)?))
                    .collect::<Result<Vec<_>>>()?;
                (out.estimates.clone(), refs)
            }
            Criterion::UpitMse => {
                let refs = references
                    .iter()
                    .map(|r| {
                        let x = out.layout.pad(tape, r)?;
                        let rep = self.encode(tape, store, x)?;
                        self.target(tape, rep)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (out.masked.clone(), refs)
            }
        };
        let (loss, assignment) = upit_loss_var(tape, &estimates, &targets, self.config.loss)?;
        Ok((loss, assignment, out))
    }
}

/// A pipeline together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub pipeline: Pipeline,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let pipeline = Pipeline::new(config, &mut store)?;
        Ok(Model { pipeline, store })
    }

    pub fn config(&self) -> &ExperimentConfig {
        self.pipeline.config()
    }

    /// Separates a `[mic][sample]` mixture in inference mode.
    pub fn separate(&self, mixture: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let out = self.pipeline.forward(&mut tape, &self.store, mixture, Mode::Infer, None)?;
        Ok(out.estimates.iter().map(|v| tape.value(*v).data().to_vec()).collect())
    }

    /// Separates with the given masks in place of the separator output.
    pub fn separate_with_masks(&self, mixture: &[Vec<f64>], masks: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let out = self.pipeline.forward(&mut tape, &self.store, mixture, Mode::Infer, Some(masks))?;
        Ok(out.estimates.iter().map(|v| tape.value(*v).data().to_vec()).collect())
    }

    /// Snapshot with the config and its hash in the metadata.
    pub fn checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut meta = serde_json::json!({
            "config": self.config(),
            "config_hash": self.config().model_hash(),
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        Checkpoint::from_store(&self.store, meta)
    }

    /// Rebuilds a model from a checkpoint, using `config` if given (its hash
    /// must match) or else the config stored in the checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: Option<ExperimentConfig>) -> Result<Self> {
        let config = match config {
            Some(c) => {
                let stored = ckpt.metadata.get("config_hash").and_then(|h| h.as_str());
                if stored != Some(c.model_hash().as_str()) {
                    return Err(Error::Config(
                        "checkpoint was trained with a different model configuration".into(),
                    ));
                }
                c
            }
            None => serde_json::from_value(
                ckpt.metadata
                    .get("config")
                    .cloned()
                    .ok_or_else(|| Error::Config("checkpoint carries no config".into()))?,
            )
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?,
        };
        let mut model = Model::new(config)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}
