use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{EncoderConfig, LocalBranch};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Weight and bias of a dense or convolutional layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// LSTM parameters. `weight` is `[4e, c + e]` with gate blocks stacked in
/// the order input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LocalParams {
    None,
    Conv(Layer),
    Fc(Layer),
    Rnn(Layer),
    Lstm(LstmParams),
}

/// Every learnable tensor of the two-branch encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub backbone: [Layer; 3],
    /// 1×1 convolution `C → c`; absent when there is no local branch.
    pub reduction: Option<Layer>,
    pub local: LocalParams,
    pub fusion: Layer,
    pub classifier: Layer,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    uniform_bound(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

fn uniform_bound(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("initialiser shape is consistent")
}

fn layer(rng: &mut ChaCha8Rng, weight_shape: Vec<usize>, fan_in: usize) -> Layer {
    let out = weight_shape[0];
    Layer {
        weight: uniform(rng, weight_shape, fan_in),
        bias: Tensor::zeros(vec![out]),
    }
}

/// He-uniform weights for layers followed by a ReLU.
fn relu_layer(rng: &mut ChaCha8Rng, weight_shape: Vec<usize>, fan_in: usize) -> Layer {
    let out = weight_shape[0];
    Layer {
        weight: uniform_bound(rng, weight_shape, (6.0 / fan_in as f64).sqrt()),
        bias: Tensor::zeros(vec![out]),
    }
}

impl EncoderModel {
    /// Seeded uniform weights: ±√(6/fan_in) before a ReLU, ±1/√fan_in
    /// elsewhere. Zero biases except the LSTM forget gate, which starts at 1.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [cin, _, _] = config.input_shape;
        let [c1, c2] = config.backbone_channels;
        let cf = config.feature_channels;
        let c = config.reduced_channels;
        let e = config.lstm_hidden;

        let backbone = [
            relu_layer(&mut rng, vec![c1, cin, 3, 3], cin * 9),
            relu_layer(&mut rng, vec![c2, c1, 3, 3], c1 * 9),
            relu_layer(&mut rng, vec![cf, c2, 3, 3], c2 * 9),
        ];
        let reduction = (config.local_branch != LocalBranch::None)
            .then(|| layer(&mut rng, vec![c, cf, 1, 1], cf));
        let local = match config.local_branch {
            LocalBranch::None => LocalParams::None,
            LocalBranch::Conv => LocalParams::Conv(relu_layer(&mut rng, vec![c, c, 3, 1], c * 3)),
            LocalBranch::Fc => {
                let fan_in = c * config.map_height;
                LocalParams::Fc(relu_layer(&mut rng, vec![c, fan_in], fan_in))
            }
            LocalBranch::Rnn => LocalParams::Rnn(layer(&mut rng, vec![e, c + e], c + e)),
            LocalBranch::Lstm => {
                let weight = uniform(&mut rng, vec![4 * e, c + e], c + e);
                let bias = config.lstm_bias.then(|| {
                    let mut b = Tensor::zeros(vec![4 * e]);
                    b.data_mut()[e..2 * e].iter_mut().for_each(|v| *v = 1.0);
                    b
                });
                LocalParams::Lstm(LstmParams { weight, bias })
            }
        };
        let fusion = layer(
            &mut rng,
            vec![config.embed_dim, config.fusion_in()],
            config.fusion_in(),
        );
        let classifier = layer(
            &mut rng,
            vec![config.num_classes, config.embed_dim],
            config.embed_dim,
        );
        Ok(Self {
            config,
            backbone,
            reduction,
            local,
            fusion,
            classifier,
        })
    }

    /// Parameters in their canonical order with stable names.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        if let Some(r) = &self.reduction {
            out.push(("reduction.weight".into(), &r.weight));
            out.push(("reduction.bias".into(), &r.bias));
        }
        match &self.local {
            LocalParams::None => {}
            LocalParams::Conv(l) | LocalParams::Fc(l) | LocalParams::Rnn(l) => {
                let kind = self.config.local_branch.as_str();
                out.push((format!("local.{kind}.weight"), &l.weight));
                out.push((format!("local.{kind}.bias"), &l.bias));
            }
            LocalParams::Lstm(p) => {
                out.push(("local.lstm.weight".into(), &p.weight));
                if let Some(b) = &p.bias {
                    out.push(("local.lstm.bias".into(), b));
                }
            }
        }
        out.push(("fusion.weight".into(), &self.fusion.weight));
        out.push(("fusion.bias".into(), &self.fusion.bias));
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    /// Mutable view in the same order as [`named_parameters`](Self::named_parameters).
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.backbone {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(r) = &mut self.reduction {
            out.push(&mut r.weight);
            out.push(&mut r.bias);
        }
        match &mut self.local {
            LocalParams::None => {}
            LocalParams::Conv(l) | LocalParams::Fc(l) | LocalParams::Rnn(l) => {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            LocalParams::Lstm(p) => {
                out.push(&mut p.weight);
                if let Some(b) = &mut p.bias {
                    out.push(b);
                }
            }
        }
        out.push(&mut self.fusion.weight);
        out.push(&mut self.fusion.bias);
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds a model from named tensors, checking every name and shape
    /// against a freshly initialised model of the same config.
    pub fn from_named(config: EncoderConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, shape)), (got_name, tensor)) in model
            .parameters_mut()
            .into_iter()
            .zip(&expected)
            .zip(tensors)
        {
            if *name != got_name || shape.as_slice() != tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    tensor.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(model)
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEncoder {
        let mut b = Binder {
            tape,
            source: Source::Model { trainable },
            order: Vec::new(),
        };
        self.bind_with(&mut b)
            .expect("registering stored parameters cannot fail")
    }

    /// Binds the parameters as consecutive slices of `flat`, a vector of
    /// length [`parameter_count`](Self::parameter_count) in
    /// [`named_parameters`](Self::named_parameters) order. Used to treat the
    /// whole network as a function of one leaf.
    pub fn bind_flat(&self, tape: &mut Tape, flat: Var) -> Result<BoundEncoder> {
        if tape.shape(flat) != [self.parameter_count()] {
            return Err(Error::Dimension {
                op: "bind_flat",
                lhs: tape.shape(flat).to_vec(),
                rhs: vec![self.parameter_count()],
            });
        }
        let mut b = Binder {
            tape,
            source: Source::Flat { flat, offset: 0 },
            order: Vec::new(),
        };
        self.bind_with(&mut b)
    }

    /// Current parameters concatenated in canonical order.
    pub fn flat_parameters(&self) -> Tensor {
        Tensor::from_vec(
            self.named_parameters()
                .into_iter()
                .flat_map(|(_, t)| t.data().to_vec())
                .collect(),
        )
    }

    fn bind_with(&self, b: &mut Binder<'_>) -> Result<BoundEncoder> {
        let backbone = [
            b.layer(&self.backbone[0])?,
            b.layer(&self.backbone[1])?,
            b.layer(&self.backbone[2])?,
        ];
        let reduction = self.reduction.as_ref().map(|l| b.layer(l)).transpose()?;
        let local = match &self.local {
            LocalParams::None => BoundLocal::None,
            LocalParams::Conv(l) => BoundLocal::Conv(b.layer(l)?),
            LocalParams::Fc(l) => BoundLocal::Fc(b.layer(l)?),
            LocalParams::Rnn(l) => BoundLocal::Rnn(b.layer(l)?),
            LocalParams::Lstm(p) => BoundLocal::Lstm {
                weight: b.tensor(&p.weight)?,
                bias: p.bias.as_ref().map(|t| b.tensor(t)).transpose()?,
            },
        };
        let fusion = b.layer(&self.fusion)?;
        let classifier = b.layer(&self.classifier)?;
        Ok(BoundEncoder {
            backbone,
            reduction,
            local,
            fusion,
            classifier,
            order: std::mem::take(&mut b.order),
        })
    }
}

enum Source {
    Model { trainable: bool },
    Flat { flat: Var, offset: usize },
}

struct Binder<'a> {
    tape: &'a mut Tape,
    source: Source,
    order: Vec<Var>,
}

impl Binder<'_> {
    fn tensor(&mut self, t: &Tensor) -> Result<Var> {
        let v = match &mut self.source {
            Source::Model { trainable: true } => self.tape.param(t.clone()),
            Source::Model { trainable: false } => self.tape.constant(t.clone()),
            Source::Flat { flat, offset } => {
                let slice = self.tape.narrow(*flat, 0, *offset, t.len())?;
                *offset += t.len();
                self.tape.reshape(slice, t.shape())?
            }
        };
        self.order.push(v);
        Ok(v)
    }

    fn layer(&mut self, l: &Layer) -> Result<BoundLayer> {
        Ok(BoundLayer {
            weight: self.tensor(&l.weight)?,
            bias: self.tensor(&l.bias)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum BoundLocal {
    None,
    Conv(BoundLayer),
    Fc(BoundLayer),
    Rnn(BoundLayer),
    Lstm { weight: Var, bias: Option<Var> },
}

/// Tape handles for an [`EncoderModel`]'s parameters.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub backbone: [BoundLayer; 3],
    pub reduction: Option<BoundLayer>,
    pub local: BoundLocal,
    pub fusion: BoundLayer,
    pub classifier: BoundLayer,
    /// Same order as [`EncoderModel::named_parameters`].
    pub order: Vec<Var>,
}

impl BoundEncoder {
    /// Gradients of every parameter after a backward pass, zero-filled where
    /// a parameter did not influence the loss.
    pub fn gradients(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.order
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect()
    }
}
