use std::fmt;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::micronet::layers::*;
use crate::micronet::tensor::{Real, Tensor};
use crate::seed;

pub const FORMAT_VERSION: u32 = 1;

/// Size knobs of the dense-block network. `Default` is the observation-map model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    pub input_width: usize,
    pub stem_filters: usize,
    pub growth: usize,
    pub block_layers: usize,
    pub transition_channels: usize,
    pub hidden_units: usize,
    pub dropout: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_width: 32,
            stem_filters: 16,
            growth: 16,
            block_layers: 2,
            transition_channels: 32,
            hidden_units: 128,
            dropout: 0.2,
        }
    }
}

/// One entry of the layer chain, used for manifests and fingerprints.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv3x3 { input: usize, filters: usize, size: usize },
    Relu,
    Dropout { p: f64 },
    Concat { channels: usize },
    Transition { input: usize, filters: usize, size_out: usize },
    Flatten { units: usize },
    Dense { input: usize, units: usize },
    L2Norm,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv3x3 { input, filters, size } => {
                write!(f, "conv3x3 {input}->{filters} @{size}x{size}")
            }
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Dropout { p } => write!(f, "dropout p={p}"),
            LayerSpec::Concat { channels } => write!(f, "concat ->{channels}"),
            LayerSpec::Transition { input, filters, size_out } => {
                write!(f, "transition conv1x1 {input}->{filters} + avgpool2 @{size_out}x{size_out}")
            }
            LayerSpec::Flatten { units } => write!(f, "flatten ->{units}"),
            LayerSpec::Dense { input, units } => write!(f, "dense {input}->{units}"),
            LayerSpec::L2Norm => write!(f, "l2norm"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    input: usize,
    filters: usize,
    k: usize,
    param: usize,
}

#[derive(Debug, Clone, Copy)]
struct DenseSlot {
    input: usize,
    units: usize,
    param: usize,
}

/// The layer chain resolved into parameter slots.
#[derive(Debug, Clone)]
struct Plan {
    stem: ConvSlot,
    blocks: [Vec<ConvSlot>; 2],
    transition: ConvSlot,
    fc1: DenseSlot,
    fc2: DenseSlot,
    shapes: Vec<(String, Vec<usize>)>,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_width < 2 || !self.input_width.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "input width {} must be even and at least 2",
                self.input_width
            )));
        }
        let counts = [self.stem_filters, self.growth, self.block_layers, self.transition_channels, self.hidden_units];
        if counts.contains(&0) {
            return Err(Error::InvalidInput("layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn plan(&self) -> Plan {
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let conv = |name: String, input: usize, filters: usize, k: usize, shapes: &mut Vec<(String, Vec<usize>)>| {
            let param = shapes.len();
            shapes.push((format!("{name}.kernels"), vec![filters, input, k, k]));
            shapes.push((format!("{name}.bias"), vec![filters]));
            ConvSlot { input, filters, k, param }
        };
        let stem = conv("stem".into(), 1, self.stem_filters, 3, &mut shapes);
        let mut channels = self.stem_filters;
        let block = |b: usize, channels: &mut usize, shapes: &mut Vec<(String, Vec<usize>)>| {
            (0..self.block_layers)
                .map(|i| {
                    let slot = conv(format!("block{b}.layer{i}"), *channels, self.growth, 3, shapes);
                    *channels += self.growth;
                    slot
                })
                .collect::<Vec<_>>()
        };
        let block1 = block(1, &mut channels, &mut shapes);
        let transition = conv("transition".into(), channels, self.transition_channels, 1, &mut shapes);
        channels = self.transition_channels;
        let block2 = block(2, &mut channels, &mut shapes);
        let half = self.input_width / 2;
        let flat = channels * half * half;
        let fc1 = DenseSlot { input: flat, units: self.hidden_units, param: shapes.len() };
        shapes.push(("fc1.weight".into(), vec![self.hidden_units, flat]));
        shapes.push(("fc1.bias".into(), vec![self.hidden_units]));
        let fc2 = DenseSlot { input: self.hidden_units, units: 3, param: shapes.len() };
        shapes.push(("fc2.weight".into(), vec![3, self.hidden_units]));
        shapes.push(("fc2.bias".into(), vec![3]));
        Plan {
            stem,
            blocks: [block1, block2],
            transition,
            fc1,
            fc2,
            shapes,
        }
    }

    /// The full layer chain in execution order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let w = self.input_width;
        let mut specs = vec![LayerSpec::Conv3x3 { input: 1, filters: self.stem_filters, size: w }];
        let mut channels = self.stem_filters;
        let block = |specs: &mut Vec<LayerSpec>, channels: &mut usize, size: usize| {
            for _ in 0..self.block_layers {
                specs.push(LayerSpec::Relu);
                specs.push(LayerSpec::Conv3x3 { input: *channels, filters: self.growth, size });
                specs.push(LayerSpec::Dropout { p: self.dropout });
                *channels += self.growth;
                specs.push(LayerSpec::Concat { channels: *channels });
            }
        };
        block(&mut specs, &mut channels, w);
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::Transition { input: channels, filters: self.transition_channels, size_out: w / 2 });
        channels = self.transition_channels;
        block(&mut specs, &mut channels, w / 2);
        specs.push(LayerSpec::Relu);
        let flat = channels * (w / 2) * (w / 2);
        specs.push(LayerSpec::Flatten { units: flat });
        specs.push(LayerSpec::Dense { input: flat, units: self.hidden_units });
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::Dense { input: self.hidden_units, units: 3 });
        specs.push(LayerSpec::L2Norm);
        specs
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.plan().shapes
    }

    /// SHA-256 over the format version, layer chain and parameter shapes.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("psforge-micronet v{FORMAT_VERSION}\n"));
        for spec in self.layer_specs() {
            hasher.update(format!("{spec}\n"));
        }
        for (name, shape) in self.param_shapes() {
            hasher.update(format!("{name} {shape:?}\n"));
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Network weights; the layer chain is fixed by the [`Architecture`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    params: Vec<Vec<T>>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    stem: ConvCache<T>,
    blocks: [Vec<DenseLayerCache<T>>; 2],
    transition_pre: Tensor<T>,
    transition: ConvCache<T>,
    transition_shape: (usize, usize, usize),
    head_pre: Tensor<T>,
    fc1_in: Tensor<T>,
    fc1_out: Tensor<T>,
    fc2_in: Tensor<T>,
    output: Tensor<T>,
    norm: Option<T>,
}

#[derive(Debug, Clone)]
struct DenseLayerCache<T> {
    relu_in: Tensor<T>,
    conv: ConvCache<T>,
    drop_mask: Option<Vec<T>>,
    channels_in: usize,
}

impl<T: Real> ForwardCache<T> {
    /// Which ReLU inputs were positive, in a fixed order; equal patterns mean two forward
    /// passes lie on the same linear piece of every rectifier.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let blocks = self.blocks.iter().flatten().map(|l| &l.relu_in);
        blocks
            .chain([&self.transition_pre, &self.head_pre, &self.fc1_out])
            .flat_map(|t| t.data.iter().map(|v| *v > T::zero()))
            .collect()
    }
}

impl<T: Real> Network<T> {
    /// Seeded He-style uniform initialization (`+-sqrt(6 / fan_in)`), zero biases.
    pub fn new(arch: Architecture, seed_value: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed_value, "init", 0);
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                if name.ends_with("bias") {
                    vec![T::zero(); n]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
                }
            })
            .collect();
        Ok(Network { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Vec<T>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Shape(format!("{} tensors for {} parameters", params.len(), shapes.len())));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if shape.iter().product::<usize>() != p.len() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {} values", p.len())));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has non-finite values")));
            }
        }
        Ok(Network { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch,
            params: self
                .params
                .iter()
                .map(|p| p.iter().map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN))).collect())
                .collect(),
        }
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    fn conv(&self, slot: ConvSlot, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        debug_assert_eq!(x.c, slot.input);
        debug_assert_eq!(self.params[slot.param + 1].len(), slot.filters);
        let pad = if slot.k == 3 { Padding::Same } else { Padding::Valid };
        conv_forward(x, &self.params[slot.param], &self.params[slot.param + 1], slot.k, pad)
    }

    fn dense_block(&self, slots: &[ConvSlot], x: Tensor<T>, mode: Mode, stream: u64) -> Result<(Tensor<T>, Vec<DenseLayerCache<T>>)> {
        let mut feat = x;
        let mut caches = Vec::with_capacity(slots.len());
        for (i, &slot) in slots.iter().enumerate() {
            let h = relu_forward(&feat);
            let (h, conv) = self.conv(slot, &h)?;
            let (h, drop_mask) = dropout_forward(&h, self.arch.dropout, mode, stream + i as u64);
            let channels_in = feat.c;
            let next = concat_channels(&feat, &h)?;
            caches.push(DenseLayerCache {
                relu_in: feat,
                conv,
                drop_mask,
                channels_in,
            });
            feat = next;
        }
        Ok((feat, caches))
    }

    /// Runs the chain up to and including the L2 head.
    ///
    /// A pre-normalization vector shorter than `L2_EPS` yields the viewer-facing normal
    /// `(0, 0, 1)` with zero gradient instead of an error.
    pub fn forward_cached(&self, input: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let w = self.arch.input_width;
        if input.shape() != (1, w, w) {
            return Err(Error::Shape(format!("network input must be 1x{w}x{w}, got {:?}", input.shape())));
        }
        let plan = self.arch.plan();
        let (x, stem) = self.conv(plan.stem, input)?;
        let (x, block1) = self.dense_block(&plan.blocks[0], x, mode, 0)?;
        let transition_pre = x;
        let t = relu_forward(&transition_pre);
        let (t, transition) = self.conv(plan.transition, &t)?;
        let transition_shape = t.shape();
        let t = avg_pool2_forward(&t)?;
        let (x, block2) = self.dense_block(&plan.blocks[1], t, mode, 100)?;
        let head_pre = x;
        let fc1_in = relu_forward(&head_pre).flattened();
        let fc1_out = dense_forward(&fc1_in, &self.params[plan.fc1.param], &self.params[plan.fc1.param + 1])?;
        let fc2_in = relu_forward(&fc1_out);
        let z = dense_forward(&fc2_in, &self.params[plan.fc2.param], &self.params[plan.fc2.param + 1])?;
        let (output, norm) = match l2norm_forward(&z) {
            Ok((y, n)) => (y, Some(n)),
            Err(_) => (Tensor::vector(vec![T::zero(), T::zero(), T::one()]), None),
        };
        debug_assert_eq!((plan.fc1.input, plan.fc2.units), (fc1_in.len(), 3));
        let cache = ForwardCache {
            stem,
            blocks: [block1, block2],
            transition_pre,
            transition,
            transition_shape,
            head_pre,
            fc1_in,
            fc1_out,
            fc2_in,
            output: output.clone(),
            norm,
        };
        Ok((output, cache))
    }

    pub fn forward(&self, input: &Tensor<T>, mode: Mode) -> Result<[T; 3]> {
        let (y, _) = self.forward_cached(input, mode)?;
        Ok([y.data[0], y.data[1], y.data[2]])
    }

    fn block_backward(&self, slots: &[ConvSlot], caches: &[DenseLayerCache<T>], grad: Tensor<T>, grads: &mut [Vec<T>]) -> Result<Tensor<T>> {
        let mut g = grad;
        for (slot, cache) in slots.iter().zip(caches).rev() {
            let (g_prev, g_new) = split_channels(&g, cache.channels_in);
            let g_new = dropout_backward(cache.drop_mask.as_deref(), &g_new);
            let cg = conv_backward(&cache.conv, &self.params[slot.param], &g_new)?;
            accumulate(&mut grads[slot.param], &cg.kernels);
            accumulate(&mut grads[slot.param + 1], &cg.bias);
            let g_relu = relu_backward(&cache.relu_in, &cg.input);
            g = add(g_prev, &g_relu);
        }
        Ok(g)
    }

    fn dense_backward(&self, slot: DenseSlot, input: &Tensor<T>, grad: &Tensor<T>, grads: &mut [Vec<T>]) -> Result<Tensor<T>> {
        let (w, rest) = grads[slot.param..].split_at_mut(1);
        dense_backward_into(input, &self.params[slot.param], grad, &mut w[0], &mut rest[0])
    }

    /// Accumulates parameter gradients of `dL/d(output)` into `grads`; returns `dL/d(input)`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_output: &[T; 3], grads: &mut [Vec<T>]) -> Result<Tensor<T>> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer does not match parameters".into()));
        }
        let plan = self.arch.plan();
        let dy = Tensor::vector(grad_output.to_vec());
        let dz = match cache.norm {
            Some(norm) => l2norm_backward(&cache.output, norm, &dy),
            None => Tensor::zeros(3, 1, 1),
        };
        let d_fc2_in = self.dense_backward(plan.fc2, &cache.fc2_in, &dz, grads)?;
        let d_fc1_out = relu_backward(&cache.fc1_out, &d_fc2_in);
        let d_fc1_in = self.dense_backward(plan.fc1, &cache.fc1_in, &d_fc1_out, grads)?;
        let (c, h, w) = cache.head_pre.shape();
        let d_head = relu_backward(&cache.head_pre, &d_fc1_in.reshaped(c, h, w));

        let d_t = self.block_backward(&plan.blocks[1], &cache.blocks[1], d_head, grads)?;
        let d_t = avg_pool2_backward(cache.transition_shape, &d_t);
        let tg = conv_backward(&cache.transition, &self.params[plan.transition.param], &d_t)?;
        accumulate(&mut grads[plan.transition.param], &tg.kernels);
        accumulate(&mut grads[plan.transition.param + 1], &tg.bias);
        let d_x = relu_backward(&cache.transition_pre, &tg.input);

        let d_x = self.block_backward(&plan.blocks[0], &cache.blocks[0], d_x, grads)?;
        let sg = conv_backward(&cache.stem, &self.params[plan.stem.param], &d_x)?;
        accumulate(&mut grads[plan.stem.param], &sg.kernels);
        accumulate(&mut grads[plan.stem.param + 1], &sg.bias);
        Ok(sg.input)
    }
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn add<T: Real>(mut a: Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    accumulate(&mut a.data, &b.data);
    a
}
