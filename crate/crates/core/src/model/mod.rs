//! Staged CNNs built from a [`ModelSpec`], with activation taps at stage
//! boundaries.

mod catalog;
mod checkpoint;
mod spec;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{ParamKind, Parameter, RunningStats, Tape, Var};
use crate::decorrelation::StageActivations;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use catalog::{builtin_specs, lookup, CATALOG};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use spec::{BlockSpec, ClassifierSpec, InputShape, ModelSpec, StageShape, StageSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Layer<T> {
    Conv {
        weight: Rc<Parameter<T>>,
        bias: Option<Rc<Parameter<T>>>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        gamma: Rc<Parameter<T>>,
        beta: Rc<Parameter<T>>,
        stats: RunningStats<T>,
        prefix: String,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

struct Linear<T> {
    weight: Rc<Parameter<T>>,
    bias: Rc<Parameter<T>>,
}

impl<T: Scalar> Linear<T> {
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(tape.param(&self.weight))?
            .add_row_bias(tape.param(&self.bias))
    }
}

/// Logits plus the requested stage captures, ascending by stage.
pub struct ForwardResult<'t, T> {
    pub logits: Var<'t, T>,
    pub taps: Vec<StageActivations<'t, T>>,
}

pub struct Model<T> {
    spec: ModelSpec,
    stage_shapes: Vec<StageShape>,
    stages: Vec<Vec<Layer<T>>>,
    hidden: Option<Linear<T>>,
    output: Linear<T>,
}

// Kaiming-uniform with ReLU gain: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
fn kaiming<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

impl<T: Scalar> Model<T> {
    /// Builds a model with parameters drawn deterministically from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let stage_shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = spec.input.channels;
        let mut stages = Vec::with_capacity(spec.stages.len());
        for (s, stage) in spec.stages.iter().enumerate() {
            let mut layers = Vec::with_capacity(stage.blocks.len());
            for (b, block) in stage.blocks.iter().enumerate() {
                let prefix = format!("stage{s}.{b}");
                layers.push(match *block {
                    BlockSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        bias,
                    } => {
                        let shape = [out_channels, channels, kernel, kernel];
                        let fan_in = channels * kernel * kernel;
                        let weight = Parameter::new(
                            format!("{prefix}.conv.weight"),
                            ParamKind::Weight,
                            kaiming(&mut rng, &shape, fan_in),
                        );
                        let bias = bias.then(|| {
                            Parameter::new(
                                format!("{prefix}.conv.bias"),
                                ParamKind::Bias,
                                Tensor::zeros(&[out_channels]),
                            )
                        });
                        channels = out_channels;
                        Layer::Conv {
                            weight,
                            bias,
                            stride,
                            padding,
                        }
                    }
                    BlockSpec::BatchNorm => Layer::BatchNorm {
                        gamma: Parameter::new(
                            format!("{prefix}.bn.gamma"),
                            ParamKind::Norm,
                            Tensor::ones(&[channels]),
                        ),
                        beta: Parameter::new(
                            format!("{prefix}.bn.beta"),
                            ParamKind::Norm,
                            Tensor::zeros(&[channels]),
                        ),
                        stats: RunningStats::new(channels),
                        prefix,
                    },
                    BlockSpec::Relu => Layer::Relu,
                    BlockSpec::MaxPool { kernel, stride } => Layer::MaxPool { kernel, stride },
                });
            }
            stages.push(layers);
        }

        let mut linear = |name: &str, fan_in: usize, fan_out: usize| Linear {
            weight: Parameter::new(
                format!("head.{name}.weight"),
                ParamKind::Weight,
                kaiming(&mut rng, &[fan_in, fan_out], fan_in),
            ),
            bias: Parameter::new(
                format!("head.{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[fan_out]),
            ),
        };
        let ClassifierSpec { hidden, classes } = spec.classifier;
        let (hidden, output) = if hidden > 0 {
            (
                Some(linear("hidden", channels, hidden)),
                linear("out", hidden, classes),
            )
        } else {
            (None, linear("out", channels, classes))
        };

        Ok(Model {
            spec: spec.clone(),
            stage_shapes,
            stages,
            hidden,
            output,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Shape of each stage's tapped activations (per sample).
    pub fn stage_shapes(&self) -> &[StageShape] {
        &self.stage_shapes
    }

    pub fn all_stages(&self) -> Vec<usize> {
        (0..self.num_stages()).collect()
    }

    /// Trainable parameters in a fixed order.
    pub fn parameters(&self) -> Vec<Rc<Parameter<T>>> {
        let mut out = Vec::new();
        for layer in self.stages.iter().flatten() {
            match layer {
                Layer::Conv { weight, bias, .. } => {
                    out.push(Rc::clone(weight));
                    out.extend(bias.iter().cloned());
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(Rc::clone(gamma));
                    out.push(Rc::clone(beta));
                }
                Layer::Relu | Layer::MaxPool { .. } => {}
            }
        }
        for lin in self.hidden.iter().chain(std::iter::once(&self.output)) {
            out.push(Rc::clone(&lin.weight));
            out.push(Rc::clone(&lin.bias));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value().numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.zero_grad());
    }

    /// Named parameters and running statistics, in a fixed order.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .parameters()
            .iter()
            .map(|p| (p.name().to_string(), p.value().clone()))
            .collect();
        for layer in self.stages.iter().flatten() {
            if let Layer::BatchNorm { stats, prefix, .. } = layer {
                out.push((format!("{prefix}.bn.running_mean"), stats.mean.borrow().clone()));
                out.push((format!("{prefix}.bn.running_var"), stats.var.borrow().clone()));
            }
        }
        out
    }

    /// Restores every entry produced by [`Model::state`]; names and shapes
    /// must match exactly.
    pub fn load_state(&self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let expected = self.state();
        if expected.len() != entries.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} tensors, found {}", expected.len(), entries.len()),
            ));
        }
        for ((name, cur), (got_name, got)) in expected.iter().zip(entries) {
            if name != got_name || cur.shape() != got.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("entry `{got_name}` {:?} does not match `{name}` {:?}", got.shape(), cur.shape()),
                ));
            }
        }
        let params = self.parameters();
        let (param_entries, buffer_entries) = entries.split_at(params.len());
        for (p, (_, value)) in params.iter().zip(param_entries) {
            p.set_value(value.clone())?;
        }
        let mut buffers = buffer_entries.iter();
        for layer in self.stages.iter().flatten() {
            if let Layer::BatchNorm { stats, .. } = layer {
                let (_, mean) = buffers.next().expect("count checked");
                let (_, var) = buffers.next().expect("count checked");
                *stats.mean.borrow_mut() = mean.clone();
                *stats.var.borrow_mut() = var.clone();
            }
        }
        Ok(())
    }

    /// Runs the network on `[b, c, h, w]` input, capturing the requested
    /// stages.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        input: Var<'t, T>,
        tap_stages: &[usize],
        mode: Mode,
    ) -> Result<ForwardResult<'t, T>> {
        let shape = input.shape();
        let want = self.spec.input;
        if shape.len() != 4 || shape[1..] != [want.channels, want.height, want.width] {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: shape,
                right: vec![want.channels, want.height, want.width],
            });
        }
        for &s in tap_stages {
            if s >= self.num_stages() {
                return Err(Error::UnknownStage {
                    stage: s,
                    stages: self.num_stages(),
                });
            }
        }
        let training = mode == Mode::Train;
        let mut x = input;
        let mut taps = Vec::new();
        for (s, layers) in self.stages.iter().enumerate() {
            let tap_block = self.spec.stages[s].tap_block();
            for (b, layer) in layers.iter().enumerate() {
                x = match layer {
                    Layer::Conv {
                        weight,
                        bias,
                        stride,
                        padding,
                    } => x.conv2d(
                        tape.param(weight),
                        bias.as_ref().map(|p| tape.param(p)),
                        *stride,
                        *padding,
                    )?,
                    Layer::BatchNorm {
                        gamma, beta, stats, ..
                    } => x.batch_norm2d(tape.param(gamma), tape.param(beta), stats, training)?,
                    Layer::Relu => x.relu()?,
                    Layer::MaxPool { kernel, stride } => x.max_pool2d(*kernel, *stride)?,
                };
                if b == tap_block && tap_stages.contains(&s) {
                    taps.push(StageActivations::new(s, x)?);
                }
            }
        }
        let mut h = x.mean_over_axes(&[2, 3])?;
        if let Some(hidden) = &self.hidden {
            h = hidden.forward(tape, h)?.relu()?;
        }
        let logits = self.output.forward(tape, h)?;
        Ok(ForwardResult { logits, taps })
    }

    /// Evaluation-mode forward without gradient tracking. Returns logits and
    /// the captured stage activations.
    pub fn predict(
        &self,
        input: &Tensor<T>,
        tap_stages: &[usize],
    ) -> Result<(Tensor<T>, Vec<(usize, Tensor<T>)>)> {
        let tape = Tape::inference();
        let out = self.forward(&tape, tape.constant(input.clone()), tap_stages, Mode::Eval)?;
        let taps = out
            .taps
            .iter()
            .map(|t| (t.stage_id, (*t.acts.value()).clone()))
            .collect();
        Ok(((*out.logits.value()).clone(), taps))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            digest: self.spec.digest(),
            entries: self
                .state()
                .into_iter()
                .map(|(n, t)| (n, t.cast::<f64>()))
                .collect(),
        }
    }

    pub fn load_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.digest != self.spec.digest() {
            return Err(Error::DigestMismatch);
        }
        let entries: Vec<(String, Tensor<T>)> = ckpt
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), t.cast::<T>()))
            .collect();
        self.load_state(&entries)
    }
}
