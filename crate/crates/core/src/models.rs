//! Model zoo and parameter plumbing.
//!
//! A [`Model`] is an ordered list of [`Layer`]s plus their parameter tensors.
//! The leading `shared_layers` layers form the part that is exchanged with the
//! server; anything after that (an adaptor head) stays on the client.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{conv_output_extent, Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    #[serde(rename = "lenet5")]
    LeNet5,
    Cnn1,
    Cnn2,
    Custom,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::LeNet5 => "lenet5",
            Architecture::Cnn1 => "cnn1",
            Architecture::Cnn2 => "cnn2",
            Architecture::Custom => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Dense { inputs: usize, outputs: usize },
    Conv { in_channels: usize, out_channels: usize, kernel: usize, padding: usize },
    MaxPool2,
    Relu,
    Flatten,
}

impl Layer {
    fn param_tensors(&self) -> usize {
        match self {
            Layer::Dense { .. } | Layer::Conv { .. } => 2,
            _ => 0,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (self, input) {
            (Layer::Dense { inputs, outputs }, [n]) if n == inputs => Ok(vec![*outputs]),
            (Layer::Dense { inputs, .. }, s) => Err(Error::dim(format!(
                "dense layer expects [{inputs}], got {s:?}"
            ))),
            (
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                },
                [c, h, w],
            ) if c == in_channels => Ok(vec![
                *out_channels,
                conv_output_extent(*h, *kernel, *padding, 1)?,
                conv_output_extent(*w, *kernel, *padding, 1)?,
            ]),
            (Layer::Conv { in_channels, .. }, s) => Err(Error::dim(format!(
                "conv layer expects {in_channels} input channels, got {s:?}"
            ))),
            (Layer::MaxPool2, [c, h, w]) if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
            (Layer::MaxPool2, s) => Err(Error::dim(format!("maxpool cannot reduce {s:?}"))),
            (Layer::Relu, s) => Ok(s.to_vec()),
            (Layer::Flatten, s) => Ok(vec![s.iter().product()]),
        }
    }

    fn describe(&self) -> String {
        match self {
            Layer::Dense { inputs, outputs } => format!("dense({inputs},{outputs})"),
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => format!("conv({in_channels},{out_channels},k{kernel},p{padding})"),
            Layer::MaxPool2 => "maxpool2".into(),
            Layer::Relu => "relu".into(),
            Layer::Flatten => "flatten".into(),
        }
    }
}

/// Blueprint for [`build_model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// Per-sample shape, `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Layer index separating the shared trunk from the local head.
    #[serde(default)]
    pub split: Option<usize>,
    /// ReLU on the final FC output of CNN2 (no activation by default).
    #[serde(default)]
    pub head_relu: bool,
    /// Explicit layer list for [`Architecture::Custom`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    pub fn new(arch: Architecture, input_shape: Vec<usize>, classes: usize) -> Self {
        Self {
            arch,
            input_shape,
            classes,
            split: None,
            head_relu: false,
            layers: Vec::new(),
        }
    }

    pub fn with_split(mut self, split: usize) -> Self {
        self.split = Some(split);
        self
    }

    /// The layer sequence this spec expands to.
    pub fn layer_plan(&self) -> Result<Vec<Layer>> {
        if self.classes < 2 {
            return Err(Error::param(format!("need at least 2 classes, got {}", self.classes)));
        }
        let [c, h, w] = match self.input_shape[..] {
            [c, h, w] => [c, h, w],
            _ => {
                return Err(Error::dim(format!(
                    "input shape must be [C, H, W], got {:?}",
                    self.input_shape
                )));
            }
        };
        let classes = self.classes;
        let mut plan = match self.arch {
            Architecture::Mlp => vec![
                Layer::Flatten,
                Layer::Dense { inputs: c * h * w, outputs: 200 },
                Layer::Relu,
                Layer::Dense { inputs: 200, outputs: 200 },
                Layer::Relu,
                Layer::Dense { inputs: 200, outputs: classes },
            ],
            Architecture::LeNet5 => vec![
                conv(c, 6, 5, 2),
                Layer::Relu,
                Layer::MaxPool2,
                conv(6, 16, 5, 0),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::Dense { inputs: 0, outputs: 120 },
                Layer::Relu,
                Layer::Dense { inputs: 120, outputs: 84 },
                Layer::Relu,
                Layer::Dense { inputs: 84, outputs: classes },
            ],
            Architecture::Cnn1 => vec![
                conv(c, 6, 3, 0),
                Layer::MaxPool2,
                Layer::Relu,
                conv(6, 16, 3, 0),
                Layer::MaxPool2,
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense { inputs: 0, outputs: 120 },
                Layer::Relu,
                Layer::Dense { inputs: 120, outputs: classes },
            ],
            Architecture::Cnn2 => {
                let mut v = vec![
                    conv(c, 128, 3, 1),
                    Layer::MaxPool2,
                    Layer::Relu,
                    conv(128, 128, 3, 1),
                    Layer::MaxPool2,
                    Layer::Relu,
                    conv(128, 128, 3, 1),
                    Layer::MaxPool2,
                    Layer::Relu,
                    Layer::Flatten,
                    Layer::Dense { inputs: 0, outputs: classes },
                ];
                if self.head_relu {
                    v.push(Layer::Relu);
                }
                v
            }
            Architecture::Custom => {
                if self.layers.is_empty() {
                    return Err(Error::param("custom architecture needs a layer list"));
                }
                self.layers.clone()
            }
        };
        // Resolve the FC width that follows the conv stack.
        let mut shape = self.input_shape.clone();
        for layer in plan.iter_mut() {
            if let Layer::Dense { inputs, .. } = layer {
                if *inputs == 0 {
                    *inputs = shape.iter().product();
                }
            }
            shape = layer.output_shape(&shape)?;
        }
        if shape != [classes] {
            return Err(Error::dim(format!(
                "model emits {shape:?}, expected [{classes}] logits"
            )));
        }
        if let Some(split) = self.split {
            if split == 0 || split >= plan.len() {
                return Err(Error::Usage(format!(
                    "split point {split} must lie strictly inside 0..{}",
                    plan.len()
                )));
            }
        }
        Ok(plan)
    }
}

fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Layer {
    Layer::Conv {
        in_channels,
        out_channels,
        kernel,
        padding,
    }
}

/// Layers plus parameters. Parameters are stored flat in layer order, two
/// tensors (weight, bias) per dense or conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    arch: Architecture,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<Tensor<T>>,
    shared_layers: usize,
}

/// Builds and initializes a model. Weights are Kaiming-uniform,
/// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`; biases start at zero.
pub fn build_model<T: Element>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    let layers = spec.layer_plan()?;
    let mut rng = rng::stream(seed, 0);
    let params = layers.iter().flat_map(|l| init_layer(l, &mut rng)).collect();
    let shared_layers = layers.len();
    Ok(Model {
        arch: spec.arch,
        input_shape: spec.input_shape.clone(),
        layers,
        params,
        shared_layers,
    })
}

fn init_layer<T: Element>(layer: &Layer, rng: &mut impl Rng) -> Vec<Tensor<T>> {
    let (wshape, fan_in, bias) = match *layer {
        Layer::Dense { inputs, outputs } => (vec![inputs, outputs], inputs, outputs),
        Layer::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => (
            vec![out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
            out_channels,
        ),
        _ => return Vec::new(),
    };
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = wshape.iter().product();
    let w: Vec<T> = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    vec![
        Tensor::new(wshape, w).expect("sized above"),
        Tensor::zeros(vec![bias]),
    ]
}

impl<T: Element> Model<T> {
    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            shape = l.output_shape(&shape).expect("validated at construction");
        }
        shape
    }

    /// Number of logits, or `None` if the model ends in a feature map.
    pub fn classes(&self) -> Option<usize> {
        match self.output_shape()[..] {
            [c] => Some(c),
            _ => None,
        }
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.param_tensors() == 2 {
                names.push(format!("layer{i}.weight"));
                names.push(format!("layer{i}.bias"));
            }
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn shared_layers(&self) -> usize {
        self.shared_layers
    }

    /// Count of parameter tensors belonging to the shared prefix.
    fn shared_tensors(&self) -> usize {
        self.layers[..self.shared_layers]
            .iter()
            .map(Layer::param_tensors)
            .sum()
    }

    pub fn shared_param_count(&self) -> usize {
        self.params[..self.shared_tensors()].iter().map(Tensor::len).sum()
    }

    /// True when every layer is shared (no local adaptor).
    pub fn is_fully_shared(&self) -> bool {
        self.shared_layers == self.layers.len()
    }

    fn digest(&self, layers: &[Layer]) -> String {
        let mut desc = format!("in{:?}", self.input_shape);
        for l in layers {
            desc.push(';');
            desc.push_str(&l.describe());
        }
        let hash = Sha256::digest(desc.as_bytes());
        hash[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of the input shape and full layer sequence.
    pub fn fingerprint(&self) -> String {
        self.digest(&self.layers)
    }

    /// Hash of the shared prefix only; aggregation compatibility is exactly
    /// equality of this value.
    pub fn shared_fingerprint(&self) -> String {
        self.digest(&self.layers[..self.shared_layers])
    }

    pub fn flatten_params(&self) -> Vec<T> {
        flatten(&self.params)
    }

    pub fn load_params(&mut self, values: &[T]) -> Result<()> {
        load(&mut self.params, values)
    }

    pub fn shared_params(&self) -> Vec<T> {
        flatten(&self.params[..self.shared_tensors()])
    }

    pub fn load_shared_params(&mut self, values: &[T]) -> Result<()> {
        let k = self.shared_tensors();
        load(&mut self.params[..k], values)
    }

    /// Parameters after the shared prefix (a client-local adaptor).
    pub fn head_params(&self) -> Vec<T> {
        flatten(&self.params[self.shared_tensors()..])
    }

    pub fn load_head_params(&mut self, values: &[T]) -> Result<()> {
        let k = self.shared_tensors();
        load(&mut self.params[k..], values)
    }

    /// Registers every parameter on the tape.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Forward pass over a batch `[B, ..input_shape]`.
    pub fn forward(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Var> {
        let shape = tape.value(input).shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "model expects [B, {:?}], got {shape:?}",
                self.input_shape
            )));
        }
        let mut x = input;
        let mut p = params.iter();
        for layer in &self.layers {
            x = match layer {
                Layer::Dense { .. } => {
                    let (w, b) = (*p.next().expect("weight"), *p.next().expect("bias"));
                    let y = tape.matmul(x, w)?;
                    tape.add_bias(y, b)?
                }
                Layer::Conv { padding, .. } => {
                    let (w, b) = (*p.next().expect("kernel"), *p.next().expect("bias"));
                    tape.conv2d(x, w, Some(b), 1, *padding)?
                }
                Layer::MaxPool2 => tape.maxpool2x2(x)?,
                Layer::Relu => tape.relu(x),
                Layer::Flatten => tape.flatten(x)?,
            };
        }
        Ok(x)
    }

    /// Inference-only forward pass.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(out).clone())
    }

    /// Joins `self` (as trunk) with `head`.
    pub fn concat(mut self, head: Model<T>) -> Result<Model<T>> {
        if head.input_shape != self.output_shape() {
            return Err(Error::dim(format!(
                "head expects {:?}, trunk emits {:?}",
                head.input_shape,
                self.output_shape()
            )));
        }
        self.shared_layers = self.layers.len() + head.shared_layers;
        self.layers.extend(head.layers);
        self.params.extend(head.params);
        Ok(self)
    }
}

fn flatten<T: Element>(params: &[Tensor<T>]) -> Vec<T> {
    let mut out = Vec::with_capacity(params.iter().map(Tensor::len).sum());
    for p in params {
        out.extend_from_slice(p.data());
    }
    out
}

fn load<T: Element>(params: &mut [Tensor<T>], values: &[T]) -> Result<()> {
    let expected: usize = params.iter().map(Tensor::len).sum();
    if expected != values.len() {
        return Err(Error::dim(format!(
            "parameter vector has {} entries, model needs {expected}",
            values.len()
        )));
    }
    let mut offset = 0;
    for p in params.iter_mut() {
        let n = p.len();
        p.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

/// Cuts a model at a layer index into `(trunk, head)`.
pub fn split_model<T: Element>(model: &Model<T>, split: usize) -> Result<(Model<T>, Model<T>)> {
    let n = model.layers.len();
    if split == 0 || split >= n {
        return Err(Error::Usage(format!(
            "split point {split} must lie strictly inside 0..{n}"
        )));
    }
    let tensors: usize = model.layers[..split].iter().map(Layer::param_tensors).sum();
    let trunk = Model {
        arch: model.arch,
        input_shape: model.input_shape.clone(),
        layers: model.layers[..split].to_vec(),
        params: model.params[..tensors].to_vec(),
        shared_layers: split,
    };
    let head = Model {
        arch: Architecture::Custom,
        input_shape: trunk.output_shape(),
        layers: model.layers[split..].to_vec(),
        params: model.params[tensors..].to_vec(),
        shared_layers: n - split,
    };
    Ok((trunk, head))
}

/// Appends a freshly initialized FC classifier to a trunk. The result's
/// shared prefix is exactly the trunk, so the adaptor never enters a merge.
pub fn splice_adaptor<T: Element>(trunk: &Model<T>, classes: usize, seed: u64) -> Result<Model<T>> {
    if classes < 2 {
        return Err(Error::param(format!("need at least 2 classes, got {classes}")));
    }
    let mut layers = trunk.layers.clone();
    let mut shape = trunk.output_shape();
    if shape.len() > 1 {
        layers.push(Layer::Flatten);
        shape = vec![shape.iter().product()];
    }
    let dense = Layer::Dense {
        inputs: shape[0],
        outputs: classes,
    };
    let mut rng = rng::stream(seed, 0);
    let mut params = trunk.params.clone();
    params.extend(init_layer(&dense, &mut rng));
    layers.push(dense);
    Ok(Model {
        arch: trunk.arch,
        input_shape: trunk.input_shape.clone(),
        layers,
        params,
        shared_layers: trunk.layers.len(),
    })
}
