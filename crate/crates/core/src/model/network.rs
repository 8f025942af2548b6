//! Network assembly for the ablation space and its forward/backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{init_weights, Activation, BatchNorm, Conv2d, Dense, InitScheme, DEFAULT_EPSILON};
use crate::model::config::{ModelConfig, StackKind};
use crate::tensor::{Scalar, Tensor};

/// Observer for activation layers during a training forward pass.
pub trait ActivationTap<T> {
    /// `layer` is the 1-based index of the weight layer the activation belongs to.
    fn observe(&mut self, layer: usize, pre: &Tensor<T>, post: &Tensor<T>);
}

impl<T, F: FnMut(usize, &Tensor<T>, &Tensor<T>)> ActivationTap<T> for F {
    fn observe(&mut self, layer: usize, pre: &Tensor<T>, post: &Tensor<T>) {
        self(layer, pre, post)
    }
}

struct NoTap;

impl<T> ActivationTap<T> for NoTap {
    fn observe(&mut self, _: usize, _: &Tensor<T>, _: &Tensor<T>) {}
}

/// Activation applied after weight layer `layer`.
#[derive(Clone, Debug)]
pub struct ActLayer<T> {
    pub activation: Activation,
    pub layer: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ActLayer<T> {
    fn new(activation: Activation, layer: usize) -> Self {
        ActLayer {
            activation,
            layer,
            input: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

/// One step of a network.
#[derive(Clone, Debug)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Act(ActLayer<T>),
    Flatten(Flatten),
}

fn flatten_shape(shape: &[usize]) -> Vec<usize> {
    vec![shape[0], shape[1..].iter().product()]
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Dense(d) => d.forward(x),
            Layer::Conv(c) => c.forward(x),
            Layer::BatchNorm(b) => b.forward(x),
            Layer::Act(a) => Ok(a.activation.forward(x)),
            Layer::Flatten(_) => x.clone().reshape(&flatten_shape(x.shape())),
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>, tap: &mut dyn ActivationTap<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Dense(d) => d.forward_train(x),
            Layer::Conv(c) => c.forward_train(x),
            Layer::BatchNorm(b) => b.forward_train(x),
            Layer::Act(a) => {
                let y = a.activation.forward(x);
                tap.observe(a.layer, x, &y);
                a.input = Some(x.clone());
                Ok(y)
            }
            Layer::Flatten(f) => {
                f.input_shape = Some(x.shape().to_vec());
                x.clone().reshape(&flatten_shape(x.shape()))
            }
        }
    }

    /// Returns the input gradient and the parameter gradients in parameter order.
    fn backward(&mut self, g: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        match self {
            Layer::Dense(d) => {
                let gr = d.backward(g)?;
                Ok((gr.input, vec![gr.weights, gr.bias]))
            }
            Layer::Conv(c) => {
                let gr = c.backward(g)?;
                let mut params = vec![gr.kernels];
                params.extend(gr.bias);
                Ok((gr.input, params))
            }
            Layer::BatchNorm(b) => {
                let gr = b.backward(g)?;
                Ok((gr.input, vec![gr.gamma, gr.beta]))
            }
            Layer::Act(a) => {
                let x = a
                    .input
                    .take()
                    .ok_or_else(|| Error::State("activation backward called before forward".into()))?;
                Ok((a.activation.backward(&x, g)?, Vec::new()))
            }
            Layer::Flatten(f) => {
                let shape = f
                    .input_shape
                    .take()
                    .ok_or_else(|| Error::State("flatten backward called before forward".into()))?;
                Ok((g.clone().reshape(&shape)?, Vec::new()))
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Dense(d) => vec![d.weights(), d.bias()],
            Layer::Conv(c) => std::iter::once(c.kernels()).chain(c.bias()).collect(),
            Layer::BatchNorm(b) => vec![b.gamma(), b.beta()],
            Layer::Act(_) | Layer::Flatten(_) => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Dense(d) => d.params_mut(),
            Layer::Conv(c) => c.params_mut(),
            Layer::BatchNorm(b) => b.params_mut(),
            Layer::Act(_) | Layer::Flatten(_) => Vec::new(),
        }
    }

    fn clear_cache(&mut self) {
        match self {
            Layer::Dense(d) => d.clear_cache(),
            Layer::Conv(c) => c.clear_cache(),
            Layer::BatchNorm(b) => b.clear_cache(),
            Layer::Act(a) => a.input = None,
            Layer::Flatten(f) => f.input_shape = None,
        }
    }
}

/// `post(F(x) + shortcut(x))`. An empty projection is the identity shortcut.
#[derive(Clone, Debug)]
pub struct Residual<T> {
    pub body: Vec<Layer<T>>,
    pub projection: Vec<Layer<T>>,
    pub post: ActLayer<T>,
}

impl<T: Scalar> Residual<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = forward_chain(&self.body, x)?;
        let z = match self.projection.is_empty() {
            true => h.add(x)?,
            false => h.add(&forward_chain(&self.projection, x)?)?,
        };
        Ok(self.post.activation.forward(&z))
    }

    fn forward_train(&mut self, x: &Tensor<T>, tap: &mut dyn ActivationTap<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &mut self.body {
            h = layer.forward_train(&h, tap)?;
        }
        let mut s = x.clone();
        for layer in &mut self.projection {
            s = layer.forward_train(&s, tap)?;
        }
        let z = h.add(&s)?;
        let y = self.post.activation.forward(&z);
        tap.observe(self.post.layer, &z, &y);
        self.post.input = Some(z);
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let z = self
            .post
            .input
            .take()
            .ok_or_else(|| Error::State("residual backward called before forward".into()))?;
        let gz = self.post.activation.backward(&z, g)?;
        let (g_body, mut grads) = backward_chain(&mut self.body, &gz)?;
        let (g_short, proj_grads) = backward_chain(&mut self.projection, &gz)?;
        grads.extend(proj_grads);
        Ok((g_body.add(&g_short)?, grads))
    }
}

fn forward_chain<T: Scalar>(layers: &[Layer<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let Some((first, rest)) = layers.split_first() else {
        return Ok(x.clone());
    };
    let mut h = first.forward(x)?;
    for layer in rest {
        h = layer.forward(&h)?;
    }
    Ok(h)
}

/// Backward through a layer sequence; parameter gradients come back in forward order.
fn backward_chain<T: Scalar>(layers: &mut [Layer<T>], g: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut g = g.clone();
    let mut per_layer = Vec::with_capacity(layers.len());
    for layer in layers.iter_mut().rev() {
        let (gi, pg) = layer.backward(&g)?;
        g = gi;
        per_layer.push(pg);
    }
    Ok((g, per_layer.into_iter().rev().flatten().collect()))
}

/// A plain layer or a residual block.
#[derive(Clone, Debug)]
pub enum Unit<T> {
    Layer(Layer<T>),
    Residual(Residual<T>),
}

impl<T: Scalar> Unit<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Unit::Layer(l) => l.forward(x),
            Unit::Residual(r) => r.forward(x),
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>, tap: &mut dyn ActivationTap<T>) -> Result<Tensor<T>> {
        match self {
            Unit::Layer(l) => l.forward_train(x, tap),
            Unit::Residual(r) => r.forward_train(x, tap),
        }
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        match self {
            Unit::Layer(l) => l.backward(g),
            Unit::Residual(r) => r.backward(g),
        }
    }

    fn layers(&self) -> Box<dyn Iterator<Item = &Layer<T>> + '_> {
        match self {
            Unit::Layer(l) => Box::new(std::iter::once(l)),
            Unit::Residual(r) => Box::new(r.body.iter().chain(&r.projection)),
        }
    }

    fn layers_mut(&mut self) -> Box<dyn Iterator<Item = &mut Layer<T>> + '_> {
        match self {
            Unit::Layer(l) => Box::new(std::iter::once(l)),
            Unit::Residual(r) => Box::new(r.body.iter_mut().chain(r.projection.iter_mut())),
        }
    }

    fn clear_cache(&mut self) {
        if let Unit::Residual(r) = self {
            r.post.input = None;
        }
        self.layers_mut().for_each(Layer::clear_cache);
    }
}

/// What a parameter tensor is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    ProjectionWeight,
    ProjectionBias,
    ProjectionGamma,
    ProjectionBeta,
}

/// Parameter slot metadata; `layer` is the owning main-path weight layer
/// (for projection parameters, the last weight layer of the block).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub kind: ParamKind,
    pub layer: usize,
}

/// Structural census of a built network.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Census {
    /// Conv + dense layers on the main path, output layer included.
    pub weight_layers: usize,
    pub conv_layers: usize,
    pub dense_layers: usize,
    /// 1×1 convolutions on shortcut paths (not part of `weight_layers`).
    pub projection_layers: usize,
    pub bn_nodes: usize,
    pub shortcut_adds: usize,
    pub activation_layers: usize,
    /// Conv kernel + dense matrix entries on the main path.
    pub weight_params: usize,
    pub projection_params: usize,
    pub bias_params: usize,
    pub bn_params: usize,
}

impl Census {
    pub fn total_params(&self) -> usize {
        self.weight_params + self.projection_params + self.bias_params + self.bn_params
    }
}

/// Multiplies per batchnorm element: squared deviation, scale by 1/std, scale by gamma.
pub const BN_MULTIPLIES_PER_ELEMENT: u64 = 3;
/// Additions per batchnorm element: mean sum, deviation, variance sum, centering, shift.
pub const BN_ADDS_PER_ELEMENT: u64 = 5;

/// Per-sample arithmetic of one forward pass, from static shape propagation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCensus {
    /// Multiply-accumulates in main-path conv/dense layers, output layer excluded.
    pub hidden_macs: u64,
    pub projection_macs: u64,
    pub output_macs: u64,
    pub bn_elements: u64,
    pub shortcut_elements: u64,
    pub activation_elements: u64,
}

impl OpCensus {
    /// Multiplies of everything before the output layer.
    pub fn hidden_multiplies(&self) -> u64 {
        self.hidden_macs + self.projection_macs + BN_MULTIPLIES_PER_ELEMENT * self.bn_elements
    }

    pub fn multiplies(&self) -> u64 {
        self.hidden_multiplies() + self.output_macs
    }

    pub fn additions(&self) -> u64 {
        self.hidden_macs
            + self.projection_macs
            + self.output_macs
            + BN_ADDS_PER_ELEMENT * self.bn_elements
            + self.shortcut_elements
    }

    pub fn total_ops(&self) -> u64 {
        self.multiplies() + self.additions()
    }
}

/// Per-parameter gradients in the network's parameter order.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Max-abs of each main-path weight gradient, keyed by 1-based weight layer.
    pub fn weight_inf_norms(&self, net: &Network<T>) -> Vec<(usize, f64)> {
        net.param_info
            .iter()
            .zip(&self.tensors)
            .filter(|(info, _)| info.kind == ParamKind::Weight)
            .map(|(info, g)| (info.layer, g.max_abs().as_f64()))
            .collect()
    }
}

/// A network in the ablation space: hidden units followed by a dense output layer.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: ModelConfig,
    units: Vec<Unit<T>>,
    output: Dense<T>,
    param_info: Vec<ParamInfo>,
    census: Census,
    ops: OpCensus,
    hidden_dim: usize,
    pending_backward: bool,
}

struct Builder<'a, T> {
    cfg: &'a ModelConfig,
    scheme: InitScheme,
    rng: ChaCha8Rng,
    units: Vec<Unit<T>>,
    info: Vec<ParamInfo>,
    census: Census,
    ops: OpCensus,
    weight_index: usize,
}

impl<T: Scalar> Builder<'_, T> {
    fn dense(&mut self, d_in: usize, d_out: usize) -> Result<Dense<T>> {
        let w = init_weights(&[d_in, d_out], d_in, self.scheme, &mut self.rng)?;
        Dense::new(w, Tensor::zeros(&[d_out]))
    }

    fn conv(&mut self, c_in: usize, c_out: usize, kh: usize, kw: usize, stride: usize, pad: usize, bias: bool) -> Result<Conv2d<T>> {
        let k = init_weights(&[c_out, c_in, kh, kw], c_in * kh * kw, self.scheme, &mut self.rng)?;
        Conv2d::new(k, bias.then(|| Tensor::zeros(&[c_out])), stride, pad)
    }

    /// Main-path weight layer (+ optional batchnorm). Returns the new per-sample shape.
    fn weight_layer(&mut self, out: &mut Vec<Layer<T>>, layer: Layer<T>, shape: &[usize], context: &str) -> Result<Vec<usize>> {
        self.weight_index += 1;
        let idx = self.weight_index;
        let next = self.account(&layer, shape, idx, false, context)?;
        out.push(layer);
        if self.cfg.batchnorm.is_on() {
            out.push(self.batchnorm(&next, idx, false)?);
        }
        Ok(next)
    }

    fn batchnorm(&mut self, shape: &[usize], layer: usize, projection: bool) -> Result<Layer<T>> {
        let features = shape[0];
        self.census.bn_nodes += 1;
        self.census.bn_params += 2 * features;
        self.ops.bn_elements += shape.iter().product::<usize>() as u64;
        let (g, b) = if projection {
            (ParamKind::ProjectionGamma, ParamKind::ProjectionBeta)
        } else {
            (ParamKind::Gamma, ParamKind::Beta)
        };
        self.info.push(ParamInfo { kind: g, layer });
        self.info.push(ParamInfo { kind: b, layer });
        Ok(Layer::BatchNorm(BatchNorm::new(features, DEFAULT_EPSILON)?))
    }

    fn activation(&mut self, shape: &[usize], layer: usize) -> ActLayer<T> {
        self.census.activation_layers += 1;
        self.ops.activation_elements += shape.iter().product::<usize>() as u64;
        ActLayer::new(self.cfg.activation, layer)
    }

    /// Records parameters and arithmetic of a weight layer; returns its output shape.
    fn account(&mut self, layer: &Layer<T>, shape: &[usize], idx: usize, projection: bool, context: &str) -> Result<Vec<usize>> {
        let (wk, bk) = if projection {
            (ParamKind::ProjectionWeight, ParamKind::ProjectionBias)
        } else {
            (ParamKind::Weight, ParamKind::Bias)
        };
        match layer {
            Layer::Dense(d) => {
                if shape != [d.d_in()] {
                    return Err(Error::config(format!("{context}: dense expects {} inputs, got {shape:?}", d.d_in())));
                }
                self.census.dense_layers += 1;
                self.census.weight_params += d.d_in() * d.d_out();
                self.census.bias_params += d.d_out();
                self.ops.hidden_macs += (d.d_in() * d.d_out()) as u64;
                self.info.push(ParamInfo { kind: wk, layer: idx });
                self.info.push(ParamInfo { kind: bk, layer: idx });
                Ok(vec![d.d_out()])
            }
            Layer::Conv(c) => {
                let mut batched = vec![1];
                batched.extend_from_slice(shape);
                let out = c
                    .output_shape(&batched)
                    .map_err(|e| Error::config(format!("{context}: {e}")))?;
                let (kh, kw) = c.kernel_size();
                let macs = (out[1] * out[2] * out[3] * c.in_channels() * kh * kw) as u64;
                let params = c.kernels().len();
                if projection {
                    self.census.projection_layers += 1;
                    self.census.projection_params += params;
                    self.ops.projection_macs += macs;
                } else {
                    self.census.conv_layers += 1;
                    self.census.weight_params += params;
                    self.ops.hidden_macs += macs;
                }
                self.info.push(ParamInfo { kind: wk, layer: idx });
                if let Some(b) = c.bias() {
                    self.census.bias_params += b.len();
                    self.info.push(ParamInfo { kind: bk, layer: idx });
                }
                Ok(out[1..].to_vec())
            }
            _ => unreachable!("account is only called for weight layers"),
        }
    }

    /// Weight layer, optional batchnorm and activation as standalone units.
    fn plain(&mut self, layer: Layer<T>, shape: &[usize], context: &str) -> Result<Vec<usize>> {
        let mut layers = Vec::new();
        let next = self.weight_layer(&mut layers, layer, shape, context)?;
        let act = self.activation(&next, self.weight_index);
        layers.push(Layer::Act(act));
        self.units.extend(layers.into_iter().map(Unit::Layer));
        Ok(next)
    }

    fn build_dnn(&mut self) -> Result<Vec<usize>> {
        let cfg = self.cfg;
        let hidden = cfg.depth - 1;
        let widths = cfg.stage_widths();
        let width = |i: usize| if widths.len() == 1 { widths[0] } else { widths[i] };
        let mut shape = vec![cfg.input_dim];
        let mut i = 0;
        while i < hidden {
            let residual = cfg.shortcut.is_on() && i > 0 && i + 1 < hidden;
            if !residual {
                let d = self.dense(shape[0], width(i))?;
                shape = self.plain(Layer::Dense(d), &shape, &format!("hidden layer {}", i + 1))?;
                i += 1;
                continue;
            }
            if width(i) != shape[0] || width(i + 1) != shape[0] {
                return Err(Error::config(format!(
                    "hidden layers {}-{}: shortcut needs matching widths, got {} -> {} -> {}",
                    i + 1,
                    i + 2,
                    shape[0],
                    width(i),
                    width(i + 1)
                )));
            }
            let context = format!("hidden layers {}-{}", i + 1, i + 2);
            let mut body = Vec::new();
            let d1 = self.dense(shape[0], width(i))?;
            let mid = self.weight_layer(&mut body, Layer::Dense(d1), &shape, &context)?;
            let act = self.activation(&mid, self.weight_index);
            body.push(Layer::Act(act));
            let d2 = self.dense(mid[0], width(i + 1))?;
            let out = self.weight_layer(&mut body, Layer::Dense(d2), &mid, &context)?;
            self.census.shortcut_adds += 1;
            self.ops.shortcut_elements += out[0] as u64;
            let post = self.activation(&out, self.weight_index);
            self.units.push(Unit::Residual(Residual {
                body,
                projection: Vec::new(),
                post,
            }));
            shape = out;
            i += 2;
        }
        Ok(shape)
    }

    fn build_cnn(&mut self) -> Result<Vec<usize>> {
        let cfg = self.cfg;
        let bias = cfg.conv_bias_on();
        let [h, w] = cfg.image_hw();
        let widths = cfg.stage_widths();
        // odd spatial extents halve cleanly under 3×3 / stride 2 / pad 1
        let kh = if h % 2 == 1 { 3 } else { 2 };
        let kw = if w % 2 == 1 { 3 } else { 2 };
        let stem = self.conv(1, widths[0], kh, kw, 1, 1, bias)?;
        let mut shape = self.plain(Layer::Conv(stem), &[1, h, w], "stem")?;

        let mut budget = cfg.depth - 2;
        'stages: for (s, (&width, &blocks)) in widths.iter().zip(&cfg.blocks_per_stage()).enumerate() {
            let inner = width / 4;
            for b in 0..blocks {
                if budget == 0 {
                    break 'stages;
                }
                let context = format!("stage {} block {}", s + 1, b + 1);
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let c_in = shape[0];
                let specs = [
                    (c_in, inner, 1, 1, 0),
                    (inner, inner, 3, stride, 1),
                    (inner, width, 1, 1, 0),
                ];
                if budget < 3 || !cfg.shortcut.is_on() {
                    // trailing partial blocks never carry a shortcut
                    for &(ci, co, k, st, pad) in specs.iter().take(budget.min(3)) {
                        let conv = self.conv(ci, co, k, k, st, pad, bias)?;
                        shape = self.plain(Layer::Conv(conv), &shape, &context)?;
                    }
                    budget -= budget.min(3);
                    continue;
                }
                let block_in = shape.clone();
                let mut body = Vec::new();
                for (j, &(ci, co, k, st, pad)) in specs.iter().enumerate() {
                    let conv = self.conv(ci, co, k, k, st, pad, bias)?;
                    shape = self.weight_layer(&mut body, Layer::Conv(conv), &shape, &context)?;
                    if j < 2 {
                        let act = self.activation(&shape, self.weight_index);
                        body.push(Layer::Act(act));
                    }
                }
                let mut projection = Vec::new();
                if block_in != shape {
                    let conv = self.conv(c_in, width, 1, 1, stride, 0, bias)?;
                    let idx = self.weight_index;
                    let out = self.account(&Layer::Conv(conv.clone()), &block_in, idx, true, &context)?;
                    if out != shape {
                        return Err(Error::config(format!("{context}: projection gives {out:?}, body gives {shape:?}")));
                    }
                    projection.push(Layer::Conv(conv));
                    if cfg.batchnorm.is_on() {
                        projection.push(self.batchnorm(&out, idx, true)?);
                    }
                }
                self.census.shortcut_adds += 1;
                self.ops.shortcut_elements += shape.iter().product::<usize>() as u64;
                let post = self.activation(&shape, self.weight_index);
                self.units.push(Unit::Residual(Residual { body, projection, post }));
                budget -= 3;
            }
        }
        self.units.push(Unit::Layer(Layer::Flatten(Flatten { input_shape: None })));
        Ok(vec![shape.iter().product()])
    }
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes a network; the same seed gives the same parameters.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            cfg,
            scheme: cfg.init_scheme(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            units: Vec::new(),
            info: Vec::new(),
            census: Census::default(),
            ops: OpCensus::default(),
            weight_index: 0,
        };
        let hidden = match cfg.stack {
            StackKind::Dnn => b.build_dnn()?,
            StackKind::CnnBottleneck => b.build_cnn()?,
        };
        let output = b.dense(hidden[0], cfg.output_dim)?;
        b.weight_index += 1;
        let idx = b.weight_index;
        b.account(&Layer::Dense(output.clone()), &hidden, idx, false, "output layer")?;
        b.ops.output_macs = (output.d_in() * output.d_out()) as u64;
        b.ops.hidden_macs -= b.ops.output_macs;
        b.census.weight_layers = b.census.conv_layers + b.census.dense_layers;
        debug_assert_eq!(b.census.weight_layers, cfg.depth);
        Ok(Network {
            config: cfg.clone(),
            units: b.units,
            output,
            param_info: b.info,
            census: b.census,
            ops: b.ops,
            hidden_dim: hidden[0],
            pending_backward: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn census(&self) -> &Census {
        &self.census
    }

    pub fn ops(&self) -> &OpCensus {
        &self.ops
    }

    pub fn units(&self) -> &[Unit<T>] {
        &self.units
    }

    pub fn output_layer(&self) -> &Dense<T> {
        &self.output
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.param_info
    }

    /// Reshapes flat `[batch, input_dim]` rows into the stack's input layout.
    pub fn shape_input(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let (batch, d) = x.dims2("network input")?;
        if d != self.config.input_dim {
            return Err(Error::dim("network input", x.shape(), &[batch, self.config.input_dim]));
        }
        let mut shape = vec![batch];
        shape.extend(self.config.sample_shape());
        x.reshape(&shape)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let expected = self.config.sample_shape();
        if x.rank() != expected.len() + 1 || x.shape()[1..] != expected[..] {
            let mut want = vec![x.shape()[0]];
            want.extend(expected);
            return Err(Error::dim("network input", x.shape(), &want));
        }
        Ok(())
    }

    /// Everything before the output layer; returns `[batch, hidden_dim]`.
    pub fn hidden_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let h = match self.units.split_first() {
            Some((first, rest)) => rest.iter().try_fold(first.forward(x)?, |h, u| u.forward(&h))?,
            None => x.clone(),
        };
        let batch = h.shape()[0];
        h.reshape(&[batch, self.hidden_dim])
    }

    /// Inference forward pass; batchnorm uses the statistics of this batch.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.output.forward(&self.hidden_forward(x)?)
    }

    /// Training forward pass; caches what `backward` needs.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_train_tapped(x, &mut NoTap)
    }

    pub fn forward_train_tapped(&mut self, x: &Tensor<T>, tap: &mut dyn ActivationTap<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.clear_caches();
        let mut h = x.clone();
        for unit in &mut self.units {
            h = unit.forward_train(&h, tap)?;
        }
        let batch = h.shape()[0];
        let h = h.reshape(&[batch, self.hidden_dim])?;
        let y = self.output.forward_train(&h)?;
        self.pending_backward = true;
        Ok(y)
    }

    /// Gradients of every parameter; needs a `forward_train` since the last update.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        if !self.pending_backward {
            return Err(Error::State(
                "backward needs a training forward pass since the last update".into(),
            ));
        }
        self.pending_backward = false;
        let out = self.output.backward(grad_logits)?;
        let mut g = out.input;
        let mut per_unit = Vec::with_capacity(self.units.len());
        for unit in self.units.iter_mut().rev() {
            let (gi, pg) = unit.backward(&g)?;
            g = gi;
            per_unit.push(pg);
        }
        let mut tensors: Vec<Tensor<T>> = per_unit.into_iter().rev().flatten().collect();
        tensors.push(out.weights);
        tensors.push(out.bias);
        debug_assert_eq!(tensors.len(), self.param_info.len());
        Ok(Gradients { tensors })
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.units.iter().flat_map(|u| u.layers()).flat_map(Layer::params).collect();
        v.push(self.output.weights());
        v.push(self.output.bias());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self
            .units
            .iter_mut()
            .flat_map(|u| u.layers_mut())
            .flat_map(Layer::params_mut)
            .collect();
        v.extend(self.output.params_mut());
        v
    }

    /// `w <- w - lr * g` for every parameter. Invalidates cached activations.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: f64) -> Result<()> {
        let lr = T::from_f64(lr);
        let mut params = self.params_mut();
        if params.len() != grads.tensors.len() {
            return Err(Error::dim("sgd_step", &[params.len()], &[grads.tensors.len()]));
        }
        for (p, g) in params.iter_mut().zip(&grads.tensors) {
            if p.shape() != g.shape() {
                return Err(Error::dim("sgd_step", p.shape(), g.shape()));
            }
        }
        for (p, g) in params.into_iter().zip(&grads.tensors) {
            for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                *w = *w - lr * d;
            }
        }
        self.clear_caches();
        Ok(())
    }

    pub fn clear_caches(&mut self) {
        self.units.iter_mut().for_each(Unit::clear_cache);
        self.output.clear_cache();
        self.pending_backward = false;
    }

    /// Element type conversion of every parameter.
    pub fn cast<U: Scalar>(&self) -> Result<Network<U>> {
        let mut net = Network::<U>::build(&self.config, 0)?;
        for (dst, src) in net.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        Ok(net)
    }

    /// Replaces all parameters, in parameter order.
    pub fn set_params(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::dim("set_params", &[params.len()], &[values.len()]));
        }
        for (p, v) in params.iter_mut().zip(&values) {
            if p.shape() != v.shape() {
                return Err(Error::dim("set_params", p.shape(), v.shape()));
            }
        }
        for (p, v) in params.into_iter().zip(values) {
            *p = v;
        }
        self.clear_caches();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::softmax_xent;
    use crate::model::config::Toggle;
    use rand::Rng;

    fn random_batch(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sndcnn50_census() {
        let net = Network::<f32>::build(&ModelConfig::sndcnn(50, 10), 0).unwrap();
        let c = net.census();
        assert_eq!(c.weight_layers, 50);
        assert_eq!(c.conv_layers, 49);
        assert_eq!(c.bn_nodes, 0);
        assert_eq!(c.shortcut_adds, 0);
        assert_eq!(c.projection_layers, 0);
    }

    #[test]
    fn resnet50_census() {
        let net = Network::<f32>::build(&ModelConfig::resnet(50, 10), 0).unwrap();
        let c = net.census();
        assert_eq!(c.weight_layers, 50);
        assert_eq!(c.shortcut_adds, 16);
        // one per main conv plus one per projection
        assert_eq!(c.bn_nodes, 49 + c.projection_layers);
        // the stem already has stage-1 width, so only the three downsampling stages project
        assert_eq!(c.projection_layers, 3);
    }

    #[test]
    fn dnn6_census() {
        let cfg = ModelConfig::dnn(6, 32, Activation::Relu, 10);
        let net = Network::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(net.census().dense_layers, 6);
        assert_eq!(net.census().weight_layers, 6);
        assert_eq!(net.census().bn_nodes, 0);
    }

    #[test]
    fn sndcnn24_is_truncated_sndcnn50() {
        let n24 = Network::<f32>::build(&ModelConfig::sndcnn(24, 10), 0).unwrap();
        assert_eq!(n24.census().conv_layers, 23);
        let convs: Vec<Vec<usize>> = n24
            .units()
            .iter()
            .flat_map(|u| u.layers())
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.kernels().shape().to_vec()),
                _ => None,
            })
            .collect();
        let n50 = Network::<f32>::build(&ModelConfig::sndcnn(50, 10), 0).unwrap();
        let convs50: Vec<Vec<usize>> = n50
            .units()
            .iter()
            .flat_map(|u| u.layers())
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.kernels().shape().to_vec()),
                _ => None,
            })
            .collect();
        assert_eq!(convs[..], convs50[..23]);
    }

    #[test]
    fn toggles_keep_weight_count() {
        for stack in [StackKind::Dnn, StackKind::CnnBottleneck] {
            let mut counts = Vec::new();
            for sc in [false, true] {
                for bn in [false, true] {
                    let cfg = match stack {
                        StackKind::Dnn => {
                            let mut c = ModelConfig::dnn(8, 24, Activation::Selu, 5).with_input(24, None);
                            c.shortcut = sc.into();
                            c.batchnorm = bn.into();
                            c
                        }
                        StackKind::CnnBottleneck => ModelConfig::cnn(50, Activation::Selu, sc, bn, 5),
                    };
                    let net = Network::<f32>::build(&cfg, 3).unwrap();
                    counts.push(net.census().weight_params);
                }
            }
            assert!(counts.windows(2).all(|w| w[0] == w[1]), "{stack:?}: {counts:?}");
        }
    }

    #[test]
    fn shortcut_width_mismatch_names_layers() {
        let cfg = ModelConfig::dnn(5, 8, Activation::Relu, 3)
            .with_input(8, None)
            .with_widths(vec![8, 8, 6, 8]);
        let mut cfg = cfg;
        cfg.shortcut = Toggle::On;
        let err = Network::<f64>::build(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("hidden layers 2-3"), "{err}");
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let cfg = ModelConfig::dnn(4, 8, Activation::Selu, 3).with_input(6, None);
        let mut net = Network::<f64>::build(&cfg, 0).unwrap();
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let y = net.forward(&random_batch(&[5, 6], 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_block_passes_input_through() {
        for bn in [false, true] {
            let mut cfg = ModelConfig::cnn(5, Activation::Relu, true, bn, 3)
                .with_widths(vec![8])
                .with_stage_blocks(vec![1])
                .with_input(36, Some([6, 6]));
            cfg.conv_bias = Some(Toggle::Off);
            let mut net = Network::<f64>::build(&cfg, 4).unwrap();
            let stem = Network::<f64> {
                units: net.units[..net.units.iter().position(|u| matches!(u, Unit::Residual(_))).unwrap()].to_vec(),
                ..net.clone()
            };
            let Some(Unit::Residual(r)) = net.units.iter_mut().find(|u| matches!(u, Unit::Residual(_))) else {
                panic!("no residual block");
            };
            assert!(r.projection.is_empty());
            for layer in &mut r.body {
                match layer {
                    Layer::Conv(c) => c.kernels_mut().data_mut().iter_mut().for_each(|v| *v = 0.0),
                    Layer::BatchNorm(b) => b.gamma_mut().data_mut().iter_mut().for_each(|v| *v = 0.0),
                    _ => {}
                }
            }
            let x = random_batch(&[4, 1, 6, 6], 9);
            let mut h = x.clone();
            for u in &stem.units {
                h = u.forward(&h).unwrap();
            }
            let r = net.units.iter().find_map(|u| match u { Unit::Residual(r) => Some(r), _ => None }).unwrap();
            let out = r.forward(&h).unwrap();
            assert_eq!(out, Activation::Relu.forward(&h));
        }
    }

    #[test]
    fn forward_equals_layer_replay() {
        let net = Network::<f64>::build(&ModelConfig::sndcnn(50, 7), 11).unwrap();
        let x = random_batch(&[2, 1, 41, 40], 5);
        let mut h = x.clone();
        for unit in net.units() {
            for layer in unit.layers() {
                h = layer.forward(&h).unwrap();
            }
        }
        let h = h.reshape(&[2, net.hidden_dim()]).unwrap();
        let manual = net.output_layer().forward(&h).unwrap();
        assert_eq!(net.forward(&x).unwrap(), manual);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let cfg = ModelConfig::dnn(3, 8, Activation::Selu, 3).with_input(4, None);
        let mut net = Network::<f64>::build(&cfg, 2).unwrap();
        let before: Vec<Tensor<f64>> = net.params().into_iter().cloned().collect();
        let x = random_batch(&[6, 4], 3);
        let logits = net.forward_train(&x).unwrap();
        let (_, g) = softmax_xent(&logits, &[0, 1, 2, 0, 1, 2]).unwrap();
        let grads = net.backward(&g).unwrap();
        net.sgd_step(&grads, 0.0).unwrap();
        let after: Vec<Tensor<f64>> = net.params().into_iter().cloned().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn stale_backward_is_state_error() {
        let cfg = ModelConfig::dnn(3, 8, Activation::Relu, 3).with_input(4, None);
        let mut net = Network::<f64>::build(&cfg, 2).unwrap();
        let g = Tensor::zeros(&[2, 3]);
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
        net.forward_train(&random_batch(&[2, 4], 1)).unwrap();
        let grads = net.backward(&g).unwrap();
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
        net.sgd_step(&grads, 0.1).unwrap();
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn identity_front_for_single_layer_dnn() {
        let cfg = ModelConfig::dnn(1, 8, Activation::Relu, 3).with_input(5, None);
        let net = Network::<f64>::build(&cfg, 0).unwrap();
        let x = random_batch(&[3, 5], 8);
        assert_eq!(net.hidden_forward(&x).unwrap(), x);
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let cfg = ModelConfig::dnn(2, 8, Activation::Relu, 3).with_input(5, None);
        let net = Network::<f64>::build(&cfg, 0).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[2, 4])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::sndcnn(24, 5);
        let a = Network::<f32>::build(&cfg, 42).unwrap();
        let b = Network::<f32>::build(&cfg, 42).unwrap();
        let c = Network::<f32>::build(&cfg, 43).unwrap();
        assert!(a.params() == b.params());
        assert!(a.params() != c.params());
    }

    #[test]
    fn op_census_drops_with_bn_and_shortcut_removal() {
        let s = Network::<f32>::build(&ModelConfig::sndcnn(50, 10), 0).unwrap();
        let r = Network::<f32>::build(&ModelConfig::resnet(50, 10), 0).unwrap();
        assert!(s.ops().multiplies() < r.ops().multiplies());
        assert_eq!(s.ops().hidden_macs, r.ops().hidden_macs);
        assert_eq!(s.ops().bn_elements, 0);
    }
}
