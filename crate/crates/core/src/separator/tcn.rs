use rand::Rng;

use super::{dilation_schedule, BlockSpec, MaskActivation, NormKind, TcnConfig};
use crate::autodiff::{ConvSpec, NormStats, ParamId, ParamStore, StatsId, Tape, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-norm running-average momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// Training uses per-utterance batch statistics for batch norm; inference
/// uses the running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
struct Affine {
    scale: ParamId,
    shift: ParamId,
    running: Option<StatsId>,
    /// The front-end norm is always channel-wise, whatever the block norm.
    per_frame: bool,
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    spec: BlockSpec,
    expand: Conv,
    prelu_in: ParamId,
    norm_in: Affine,
    depthwise: Conv,
    prelu_out: ParamId,
    norm_out: Affine,
    project: Conv,
}

/// Per-channel batch statistics observed in a training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub id: StatsId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Masks and the intermediate representations tests inspect.
#[derive(Clone, Debug)]
pub struct TcnOutput {
    /// One `[mask_rows × F]` mask per source.
    pub masks: Vec<Var>,
    /// Bottleneck input to the first block, `[B × F]`.
    pub bottleneck: Var,
    /// Output of the last block, `[B × F]`.
    pub trunk: Var,
    pub batch_stats: Vec<BatchStats>,
}

/// Parameter handles of a TCN registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Tcn {
    config: TcnConfig,
    input_norm: Affine,
    bottleneck: Conv,
    blocks: Vec<Block>,
    out_prelu: ParamId,
    output: Conv,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

fn conv(
    store: &mut ParamStore,
    name: String,
    out: usize,
    inp: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Conv> {
    let weight = store.add(format!("{name}.weight"), uniform(rng, &[out, inp, k], inp * k)?, true);
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out]), true);
    Ok(Conv { weight, bias })
}

impl Tcn {
    /// Registers every weight under `prefix`. Convolution weights are uniform
    /// in `±1/√fan_in`; biases and norm shifts start at zero, norm scales at
    /// one and PReLU slopes at 0.25.
    pub fn new(config: TcnConfig, prefix: &str, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (b, h, p) = (config.bottleneck, config.hidden, config.kernel);
        let affine = |store: &mut ParamStore, name: String, c: usize, bn: bool| Affine {
            scale: store.add(format!("{name}.scale"), Tensor::ones(&[c]), true),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[c]), true),
            running: bn.then(|| store.add_stats(format!("{name}.running"), c)),
            per_frame: false,
        };
        let prelu = |store: &mut ParamStore, name: String, c: usize| {
            store.add(name, Tensor::full(&[c], 0.25), true)
        };
        let bn = config.norm == NormKind::Bn;

        let input_norm = Affine {
            per_frame: true,
            ..affine(store, format!("{prefix}.input_norm"), config.input_width, false)
        };
        let bottleneck = conv(store, format!("{prefix}.bottleneck"), b, config.input_width, 1, rng)?;
        let mut blocks = Vec::new();
        for spec in dilation_schedule(&config) {
            let name = format!("{prefix}.block{}.{}", spec.repeat, spec.index);
            let expand = conv(store, format!("{name}.expand"), h, b, 1, rng)?;
            let prelu_in = prelu(store, format!("{name}.prelu_in"), h);
            let norm_in = affine(store, format!("{name}.norm_in"), h, bn);
            let weight = store.add(format!("{name}.depthwise.weight"), uniform(rng, &[h, p], p)?, true);
            let bias = store.add(format!("{name}.depthwise.bias"), Tensor::zeros(&[h]), true);
            let prelu_out = prelu(store, format!("{name}.prelu_out"), h);
            let norm_out = affine(store, format!("{name}.norm_out"), h, bn);
            let project = conv(store, format!("{name}.project"), b, h, 1, rng)?;
            blocks.push(Block {
                spec,
                expand,
                prelu_in,
                norm_in,
                depthwise: Conv { weight, bias },
                prelu_out,
                norm_out,
                project,
            });
        }
        let out_prelu = prelu(store, format!("{prefix}.out_prelu"), b);
        let output = conv(store, format!("{prefix}.output"), config.sources * config.mask_rows, b, 1, rng)?;
        Ok(Tcn {
            config,
            input_norm,
            bottleneck,
            blocks,
            out_prelu,
            output,
        })
    }

    pub fn config(&self) -> &TcnConfig {
        &self.config
    }

    /// Weight ids of every 1×1 and depthwise convolution inside the blocks.
    pub fn block_conv_weights(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [b.expand.weight, b.depthwise.weight, b.project.weight])
            .collect()
    }

    pub fn output_bias(&self) -> ParamId {
        self.output.bias
    }

    fn pointwise(&self, tape: &mut Tape, store: &ParamStore, x: Var, conv: &Conv) -> Result<Var> {
        let w = tape.param(store, conv.weight)?;
        let b = tape.param(store, conv.bias)?;
        let y = tape.conv1d(x, w, ConvSpec::default())?;
        tape.add_channels(y, b)
    }

    fn norm(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        affine: &Affine,
        mode: Mode,
        observed: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let stats = match (affine.running, self.config.norm) {
            _ if affine.per_frame => NormStats::PerFrame,
            (_, NormKind::Cln) => NormStats::PerFrame,
            (_, NormKind::Gln) => NormStats::Global,
            (Some(_), NormKind::Bn) if mode == Mode::Train => NormStats::PerChannel,
            (Some(id), NormKind::Bn) => {
                let r = store.stats(id);
                NormStats::Fixed {
                    mean: r.mean.clone(),
                    var: r.var.clone(),
                }
            }
            (None, NormKind::Bn) => {
                return Err(Error::Config("batch norm without running statistics".into()))
            }
        };
        let scale = tape.param(store, affine.scale)?;
        let shift = tape.param(store, affine.shift)?;
        let y = tape.normalize(x, stats.clone(), scale, shift)?;
        if let (NormStats::PerChannel, Some(id)) = (&stats, affine.running) {
            let moments = tape.norm_moments(y).expect("normalize node");
            observed.push(BatchStats {
                id,
                mean: moments.iter().map(|m| m.0).collect(),
                var: moments.iter().map(|m| 1.0 / (m.1 * m.1) - NORM_EPS).collect(),
            });
        }
        Ok(y)
    }

    /// Records the forward pass on a `[input_width × F]` feature var.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var, mode: Mode) -> Result<TcnOutput> {
        let (w, frames) = tape.value(features).dims2("tcn_forward")?;
        if w != self.config.input_width {
            return Err(Error::dim(
                "tcn_forward",
                format!("features have {w} rows, separator expects {}", self.config.input_width),
            ));
        }
        let mut observed = Vec::new();
        let x = self.norm(tape, store, features, &self.input_norm, mode, &mut observed)?;
        let bottleneck = self.pointwise(tape, store, x, &self.bottleneck)?;
        let mut x = bottleneck;
        for block in &self.blocks {
            let y = self.pointwise(tape, store, x, &block.expand)?;
            let a = tape.param(store, block.prelu_in)?;
            let y = tape.prelu(y, a)?;
            let y = self.norm(tape, store, y, &block.norm_in, mode, &mut observed)?;
            let k = tape.param(store, block.depthwise.weight)?;
            let spec = ConvSpec {
                stride: 1,
                dilation: block.spec.dilation,
                pad_left: block.spec.pad_left,
                pad_right: block.spec.pad_right,
            };
            let y = tape.depthwise_conv1d(y, k, spec)?;
            let bias = tape.param(store, block.depthwise.bias)?;
            let y = tape.add_channels(y, bias)?;
            let a = tape.param(store, block.prelu_out)?;
            let y = tape.prelu(y, a)?;
            let y = self.norm(tape, store, y, &block.norm_out, mode, &mut observed)?;
            let y = self.pointwise(tape, store, y, &block.project)?;
            x = tape.add(x, y)?;
        }
        let trunk = x;
        let a = tape.param(store, self.out_prelu)?;
        let y = tape.prelu(trunk, a)?;
        let y = self.pointwise(tape, store, y, &self.output)?;
        let y = match self.config.mask_activation {
            MaskActivation::Relu => tape.relu(y)?,
            MaskActivation::Sigmoid => tape.sigmoid(y)?,
            MaskActivation::Linear => y,
        };
        debug_assert_eq!(tape.shape(y)[1], frames);
        let rows = self.config.mask_rows;
        let masks = (0..self.config.sources)
            .map(|s| tape.slice_rows(y, s * rows, rows))
            .collect::<Result<Vec<_>>>()?;
        Ok(TcnOutput {
            masks,
            bottleneck,
            trunk,
            batch_stats: observed,
        })
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running_stats(store: &mut ParamStore, observed: &[BatchStats]) {
        for b in observed {
            let r = store.stats_mut(b.id);
            for (m, &o) in r.mean.iter_mut().zip(&b.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * o;
            }
            for (v, &o) in r.var.iter_mut().zip(&b.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * o;
            }
        }
    }
}
