//! Feed-forward classifiers with hand-written backpropagation.
//!
//! A [`ModelSpec`] is a declarative layer stack; [`Model`] owns the
//! instantiated parameters. Training goes through [`Model::forward_trace`],
//! which records the activations [`Model::backward`] needs.

mod layers;
pub mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use optim::{adam_step, sgd_step, AdamState, Optimizer, OptimizerConfig, OptimizerState, SgdState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Relu,
    Conv3x3 { in_channels: usize, out_channels: usize },
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::Conv3x3 { .. } => "conv3x3",
            LayerKind::MaxPool2x2 => "maxpool2x2",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Parameter count: `in*out + out` for dense, `9*in*out + out` for conv.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, outputs } => inputs * outputs + outputs,
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } => 9 * in_channels * out_channels + out_channels,
            _ => 0,
        }
    }

    /// Shapes of (weight, bias) for parametrised layers.
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } => vec![vec![out_channels, in_channels, 3, 3], vec![out_channels]],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv3x3 { in_channels, .. } => 9 * in_channels,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(format!("expects per-sample shape [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } => match input {
                [c, h, w] if *c == in_channels => Ok(vec![out_channels, *h, *w]),
                _ => Err(format!(
                    "expects per-sample shape [{in_channels}, h, w], got {input:?}"
                )),
            },
            LayerKind::MaxPool2x2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(format!("expects per-sample shape [c, h>=2, w>=2], got {input:?}")),
            },
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in `±sqrt(6 / fan_in)`, zero bias.
    #[default]
    HeUniform,
    Zeros,
    /// Identity weight (dense, square only), zero bias.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub init: InitScheme,
}

impl From<LayerKind> for LayerSpec {
    fn from(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            init: InitScheme::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Per-sample input shape, e.g. `[3, 32, 32]` or `[20]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(input: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        ModelSpec { input, layers }
    }

    /// Fully connected ReLU network: `flatten, dense, relu, ..., dense`.
    pub fn mlp(input: Vec<usize>, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut width: usize = input.iter().product();
        if input.len() != 1 {
            layers.push(LayerKind::Flatten.into());
        }
        for &h in hidden {
            layers.push(LayerKind::Dense { inputs: width, outputs: h }.into());
            layers.push(LayerKind::Relu.into());
            width = h;
        }
        layers.push(LayerKind::Dense { inputs: width, outputs: classes }.into());
        ModelSpec { input, layers }
    }

    /// Per-sample shapes after every layer, checking that adjacent layers compose.
    pub fn shapes_for(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .kind
                .output_shape(shapes.last().unwrap())
                .map_err(|message| Error::LayerShape {
                    layer: i,
                    kind: layer.kind.name().into(),
                    message,
                })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() || self.input.len() > 3 || self.input.contains(&0) {
            return Err(Error::Shape(format!(
                "model input must have 1 to 3 positive extents, got {:?}",
                self.input
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("model has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerKind::Dense { inputs, outputs } = layer.kind {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::LayerShape {
                        layer: i,
                        kind: "dense".into(),
                        message: "fan-in and fan-out must be positive".into(),
                    });
                }
                if layer.init == InitScheme::Identity && inputs != outputs {
                    return Err(Error::LayerShape {
                        layer: i,
                        kind: "dense".into(),
                        message: "identity init requires a square layer".into(),
                    });
                }
            }
            if let LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            } = layer.kind
            {
                if in_channels == 0 || out_channels == 0 || layer.init == InitScheme::Identity {
                    return Err(Error::LayerShape {
                        layer: i,
                        kind: "conv3x3".into(),
                        message: "channels must be positive and init not identity".into(),
                    });
                }
            }
        }
        let shapes = self.shapes_for(&self.input)?;
        if shapes.last().unwrap().len() != 1 {
            return Err(Error::Shape(format!(
                "model must end in per-sample logits of rank 1, got {:?}",
                shapes.last().unwrap()
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> Result<usize> {
        let shapes = self.shapes_for(&self.input)?;
        Ok(shapes.last().unwrap().iter().product())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kind.param_count()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
    Snapshot,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Teacher => 0,
            Role::Student => 1,
            Role::Snapshot => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Role> {
        match tag {
            0 => Some(Role::Teacher),
            1 => Some(Role::Student),
            2 => Some(Role::Snapshot),
            _ => None,
        }
    }
}

/// Per-layer parameter (or gradient) tensors; empty for parameter-free layers.
pub type LayerTensors = Vec<Vec<Tensor>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    role: Role,
    params: LayerTensors,
    generation: u64,
}

/// Activations recorded by [`Model::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    generation: u64,
    spec: ModelSpec,
    inputs: Vec<Tensor>,
    pool_argmax: Vec<Option<Vec<u32>>>,
    output_shape: Vec<usize>,
}

impl Trace {
    pub fn batch(&self) -> &Tensor {
        &self.inputs[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub per_layer: LayerTensors,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.per_layer.iter().flatten()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(Tensor::all_finite)
    }
}

impl Model {
    /// Instantiates parameters for `spec`. Layer `i` draws from a ChaCha8
    /// stream `i` of `seed`, so layers are independent of each other.
    pub fn init(spec: ModelSpec, role: Role, seed: u64) -> Result<Self> {
        use rand::Rng;
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let shapes = layer.kind.param_shapes();
            if shapes.is_empty() {
                params.push(Vec::new());
                continue;
            }
            let mut weight = Tensor::zeros(&shapes[0]);
            let bias = Tensor::zeros(&shapes[1]);
            match layer.init {
                InitScheme::Zeros => {}
                InitScheme::Identity => {
                    let n = shapes[0][0];
                    for k in 0..n {
                        weight.data_mut()[k * n + k] = 1.0;
                    }
                }
                InitScheme::HeUniform => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    let bound = (6.0 / layer.kind.fan_in() as f64).sqrt();
                    for w in weight.data_mut() {
                        *w = rng.random_range(-bound..bound) as f32;
                    }
                }
            }
            params.push(vec![weight, bias]);
        }
        Ok(Model {
            spec,
            role,
            params,
            generation: 0,
        })
    }

    /// Assembles a model from existing parameters, checking their shapes.
    pub fn from_params(spec: ModelSpec, role: Role, params: LayerTensors) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter groups for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        for (i, (layer, group)) in spec.layers.iter().zip(&params).enumerate() {
            let expected = layer.kind.param_shapes();
            let got: Vec<Vec<usize>> = group.iter().map(|t| t.shape().to_vec()).collect();
            if expected != got {
                return Err(Error::LayerShape {
                    layer: i,
                    kind: layer.kind.name().into(),
                    message: format!("parameter shapes {got:?}, expected {expected:?}"),
                });
            }
            if group.iter().any(|t| !t.all_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {i}")));
            }
        }
        Ok(Model {
            spec,
            role,
            params,
            generation: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn params(&self) -> &LayerTensors {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes().expect("validated at construction")
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }

    /// Mutable access to all parameter tensors in layer order. Invalidates
    /// outstanding traces.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.generation += 1;
        self.params.iter_mut().flatten()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() < 2 {
            return Err(Error::Shape(format!(
                "batch must have a leading batch axis, got shape {:?}",
                batch.shape()
            )));
        }
        let per_sample = &batch.shape()[1..];
        if per_sample != self.spec.input.as_slice() {
            // Name the first layer that cannot accept this input.
            self.spec.shapes_for(per_sample)?;
            return Err(Error::Shape(format!(
                "input per-sample shape {per_sample:?} does not match model input {:?}",
                self.spec.input
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for (layer, params) in self.spec.layers.iter().zip(&self.params) {
            x = layers::forward(&layer.kind, params, &x).0;
        }
        finite_output(x)
    }

    pub fn forward_trace(&self, batch: &Tensor) -> Result<(Tensor, Trace)> {
        self.check_batch(batch)?;
        let mut inputs = Vec::with_capacity(self.spec.layers.len());
        let mut pool_argmax = Vec::with_capacity(self.spec.layers.len());
        let mut x = batch.clone();
        for (layer, params) in self.spec.layers.iter().zip(&self.params) {
            let (y, argmax) = layers::forward(&layer.kind, params, &x);
            inputs.push(x);
            pool_argmax.push(argmax);
            x = y;
        }
        let logits = finite_output(x)?;
        let trace = Trace {
            generation: self.generation,
            spec: self.spec.clone(),
            inputs,
            pool_argmax,
            output_shape: logits.shape().to_vec(),
        };
        Ok((logits, trace))
    }

    /// Gradients of the loss with respect to every parameter, given the
    /// gradient with respect to the logits of the traced forward pass.
    pub fn backward(&self, trace: &Trace, loss_grad: &Tensor) -> Result<Gradients> {
        if trace.spec != self.spec || trace.generation != self.generation {
            return Err(Error::MissingForward(
                "trace was recorded for different parameters".into(),
            ));
        }
        if loss_grad.shape() != trace.output_shape.as_slice() {
            return Err(Error::Shape(format!(
                "loss gradient shape {:?} does not match logits shape {:?}",
                loss_grad.shape(),
                trace.output_shape
            )));
        }
        let n = self.spec.layers.len();
        let mut per_layer: LayerTensors = vec![Vec::new(); n];
        let mut grad = loss_grad.clone();
        for i in (0..n).rev() {
            let (grad_in, param_grads) = layers::backward(
                &self.spec.layers[i].kind,
                &self.params[i],
                &trace.inputs[i],
                trace.pool_argmax[i].as_deref(),
                &grad,
                i > 0,
            );
            per_layer[i] = param_grads;
            if let Some(g) = grad_in {
                grad = g;
            }
        }
        let grads = Gradients { per_layer };
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(grads)
    }
}

fn finite_output(x: Tensor) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(Error::NonFinite("forward pass produced non-finite logits".into()));
    }
    Ok(x)
}
