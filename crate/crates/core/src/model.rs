//! The network as a DAG of layer nodes, with forward, backward and predict.
//!
//! Parameters live in a [`ParamStore`] keyed `<node>.<slot>`: convolution
//! and dense nodes own `kernel` and `bias`, batch-norm nodes own `gamma` and
//! `beta` plus the `running_mean` / `running_var` buffers.

use std::fmt;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, concat_channels, conv2d_backward,
    conv2d_forward, dense_backward, dense_forward, dropout, dropout_backward, flatten, maxpool_backward,
    maxpool_forward, relu, relu_backward, split_channels, unflatten, update_running_stats, ArgmaxMap,
    BatchNormCache, BatchNormParams, ConvParams, DenseParams, DropoutMask, Mode, PoolGeometry,
};
use crate::objective::{add_l2_gradient, loss_and_logit_grad, softmax, LossConfig, LossReport};
use crate::params::{Gradients, ParamStore};
use crate::rng::{derive_seed, seeded_rng, streams};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Input { height: usize, width: usize, channels: usize },
    /// Stride-1 same-padded square convolution.
    Conv { kernel: usize, filters: usize },
    Relu,
    BatchNorm,
    MaxPool(PoolGeometry),
    Concat,
    Flatten,
    Dense { units: usize },
    Dropout { rate: f64 },
}

impl LayerKind {
    fn label(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::Concat => "concat",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Dropout { .. } => "dropout",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    /// Per-sample output shape, batch axis excluded.
    pub shape: Vec<usize>,
}

/// Widths of the network stages. [`ArchConfig::akhcrnet`] is the full model.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub input: [usize; 3],
    pub stem_kernel: usize,
    pub stem_filters: usize,
    /// 1×1 reduction width in front of the 3×3 and 5×5 branches.
    pub inception_reduce: usize,
    pub inception_3x3: usize,
    pub inception_5x5: usize,
    pub inception_1x1: usize,
    pub inception_pool_proj: usize,
    /// One conv → pool → batch-norm → pool block per entry.
    pub rear_filters: Vec<usize>,
    pub hidden: Vec<usize>,
    /// Index into `hidden` of the layer followed by dropout.
    pub dropout_after: Option<usize>,
    pub dropout_rate: f64,
    pub classes: usize,
    /// Multiplier on the He-normal draw for the output layer, which feeds
    /// softmax directly rather than a ReLU.
    pub output_init_gain: f64,
}

impl ArchConfig {
    pub fn akhcrnet() -> Self {
        ArchConfig {
            input: [32, 32, 1],
            stem_kernel: 5,
            stem_filters: 32,
            inception_reduce: 128,
            inception_3x3: 128,
            inception_5x5: 128,
            inception_1x1: 128,
            inception_pool_proj: 64,
            rear_filters: vec![256, 512],
            hidden: vec![1024, 512, 256, 128],
            dropout_after: Some(1),
            dropout_rate: 0.5,
            classes: 84,
            output_init_gain: 0.1,
        }
    }

    /// Same topology shrunk to an 8×8 input for finite-difference checks.
    pub fn reduced_clone() -> Self {
        ArchConfig {
            input: [8, 8, 1],
            stem_kernel: 5,
            stem_filters: 4,
            inception_reduce: 8,
            inception_3x3: 8,
            inception_5x5: 8,
            inception_1x1: 8,
            inception_pool_proj: 8,
            rear_filters: vec![8],
            hidden: vec![16, 8],
            dropout_after: Some(1),
            dropout_rate: 0.5,
            classes: 5,
            output_init_gain: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    nodes: Vec<LayerNode>,
    regularized: Vec<String>,
    classes: usize,
    output_init_gain: f64,
}

fn out_shape(kind: &LayerKind, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let single = || -> Result<&[usize]> {
        match inputs {
            [one] => Ok(one),
            _ => Err(shape_err!("{} takes exactly one input, got {}", kind.label(), inputs.len())),
        }
    };
    let spatial = |s: &[usize]| -> Result<[usize; 3]> {
        match s {
            &[h, w, c] => Ok([h, w, c]),
            _ => Err(shape_err!("{} needs a (H, W, C) input, got {s:?}", kind.label())),
        }
    };
    Ok(match *kind {
        LayerKind::Input { height, width, channels } => {
            if !inputs.is_empty() {
                return Err(shape_err!("input node takes no inputs"));
            }
            vec![height, width, channels]
        }
        LayerKind::Conv { kernel, filters } => {
            if kernel % 2 == 0 {
                return Err(shape_err!("same padding needs an odd kernel, got {kernel}"));
            }
            let [h, w, _] = spatial(single()?)?;
            vec![h, w, filters]
        }
        LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::BatchNorm => single()?.to_vec(),
        LayerKind::MaxPool(g) => {
            let [h, w, c] = spatial(single()?)?;
            vec![g.output_len(h)?, g.output_len(w)?, c]
        }
        LayerKind::Concat => {
            let first = spatial(inputs.first().ok_or_else(|| shape_err!("concat needs inputs"))?)?;
            let mut channels = 0;
            for s in inputs {
                let [h, w, c] = spatial(s)?;
                if [h, w] != [first[0], first[1]] {
                    return Err(shape_err!("concat spatial mismatch: {s:?} vs {first:?}"));
                }
                channels += c;
            }
            vec![first[0], first[1], channels]
        }
        LayerKind::Flatten => vec![single()?.iter().product()],
        LayerKind::Dense { units } => match single()? {
            [_] => vec![units],
            s => return Err(shape_err!("dense needs a flat input, got {s:?}")),
        },
    })
}

impl ModelGraph {
    fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[usize]) -> Result<usize> {
        let name = name.into();
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::Config(format!("duplicate node name {name}")));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::Config(format!("node {name} refers to undefined node {bad}")));
        }
        let in_shapes: Vec<&[usize]> = inputs.iter().map(|&i| self.nodes[i].shape.as_slice()).collect();
        let shape = out_shape(&kind, &in_shapes)?;
        self.nodes.push(LayerNode {
            name,
            kind,
            inputs: inputs.to_vec(),
            shape,
        });
        Ok(self.nodes.len() - 1)
    }

    /// Wires the graph for `arch` and checks every shape statically.
    pub fn build(arch: &ArchConfig) -> Result<Self> {
        let mut g = ModelGraph {
            nodes: Vec::new(),
            regularized: Vec::new(),
            classes: arch.classes,
            output_init_gain: arch.output_init_gain,
        };
        let [height, width, channels] = arch.input;
        let mut x = g.push("input", LayerKind::Input { height, width, channels }, &[])?;

        let stem = LayerKind::Conv {
            kernel: arch.stem_kernel,
            filters: arch.stem_filters,
        };
        x = g.push("stem.conv1", stem, &[x])?;
        x = g.push("stem.relu1", LayerKind::Relu, &[x])?;
        x = g.push("stem.conv2", stem, &[x])?;
        x = g.push("stem.relu2", LayerKind::Relu, &[x])?;
        x = g.push("stem.bn", LayerKind::BatchNorm, &[x])?;
        x = g.push("stem.pool", LayerKind::MaxPool(PoolGeometry::HALVING), &[x])?;

        let conv = |kernel, filters| LayerKind::Conv { kernel, filters };
        let a = g.push("inception.a.reduce", conv(1, arch.inception_reduce), &[x])?;
        let a = g.push("inception.a.relu1", LayerKind::Relu, &[a])?;
        let a = g.push("inception.a.conv", conv(3, arch.inception_3x3), &[a])?;
        let a = g.push("inception.a.relu2", LayerKind::Relu, &[a])?;
        let b = g.push("inception.b.reduce", conv(1, arch.inception_reduce), &[x])?;
        let b = g.push("inception.b.relu1", LayerKind::Relu, &[b])?;
        let b = g.push("inception.b.conv", conv(5, arch.inception_5x5), &[b])?;
        let b = g.push("inception.b.relu2", LayerKind::Relu, &[b])?;
        let c = g.push("inception.c.conv", conv(1, arch.inception_1x1), &[x])?;
        let c = g.push("inception.c.relu", LayerKind::Relu, &[c])?;
        let d = g.push("inception.d.pool", LayerKind::MaxPool(PoolGeometry::SAME_3X3), &[x])?;
        let d = g.push("inception.d.conv", conv(3, arch.inception_pool_proj), &[d])?;
        let d = g.push("inception.d.relu", LayerKind::Relu, &[d])?;
        x = g.push("inception.concat", LayerKind::Concat, &[a, b, c, d])?;
        x = g.push("inception.relu", LayerKind::Relu, &[x])?;

        for (i, &filters) in arch.rear_filters.iter().enumerate() {
            let p = format!("block{}", i + 1);
            x = g.push(format!("{p}.conv"), conv(3, filters), &[x])?;
            x = g.push(format!("{p}.relu"), LayerKind::Relu, &[x])?;
            x = g.push(format!("{p}.pool1"), LayerKind::MaxPool(PoolGeometry::HALVING), &[x])?;
            x = g.push(format!("{p}.bn"), LayerKind::BatchNorm, &[x])?;
            x = g.push(format!("{p}.pool2"), LayerKind::MaxPool(PoolGeometry::HALVING), &[x])?;
        }

        x = g.push("flatten", LayerKind::Flatten, &[x])?;
        for (i, &units) in arch.hidden.iter().enumerate() {
            let name = format!("head.fc{}", i + 1);
            x = g.push(&name, LayerKind::Dense { units }, &[x])?;
            g.regularized.push(format!("{name}.kernel"));
            x = g.push(format!("head.relu{}", i + 1), LayerKind::Relu, &[x])?;
            if arch.dropout_after == Some(i) {
                x = g.push(format!("head.dropout{}", i + 1), LayerKind::Dropout { rate: arch.dropout_rate }, &[x])?;
            }
        }
        g.push("head.out", LayerKind::Dense { units: arch.classes }, &[x])?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Names of the kernels that carry the L2 penalty.
    pub fn regularized(&self) -> &[String] {
        &self.regularized
    }

    pub fn loss_config(&self, lambda: f64) -> LossConfig {
        LossConfig {
            lambda,
            regularized: self.regularized.clone(),
        }
    }

    /// `(node name, per-sample shape)` for every node in execution order.
    pub fn shape_trace(&self) -> Vec<(&str, &[usize])> {
        self.nodes.iter().map(|n| (n.name.as_str(), n.shape.as_slice())).collect()
    }

    /// Parameter tensors with He-normal kernels and zero biases, plus unit
    /// batch-norm state, drawn in node order from `seed`. The output kernel
    /// is scaled by `output_init_gain`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = seeded_rng(derive_seed(seed, &[streams::INIT]));
        let mut store = ParamStore::new();
        let last = self.nodes.len() - 1;
        for (i, node) in self.nodes.iter().enumerate() {
            let in_shape = node.inputs.first().map(|&i| self.nodes[i].shape.as_slice());
            match node.kind {
                LayerKind::Conv { kernel, filters } => {
                    let cin = in_shape.expect("conv has an input")[2];
                    let dims = [kernel, kernel, cin, filters];
                    store.insert_param(
                        format!("{}.kernel", node.name),
                        Tensor::he_normal(&dims, kernel * kernel * cin, &mut rng)?,
                    )?;
                    store.insert_param(format!("{}.bias", node.name), Tensor::zeros(&[filters]))?;
                }
                LayerKind::Dense { units } => {
                    let n_in = in_shape.expect("dense has an input")[0];
                    let mut kernel = Tensor::he_normal(&[n_in, units], n_in, &mut rng)?;
                    if i == last {
                        let gain = T::of(self.output_init_gain);
                        kernel = kernel.map(|v| v * gain);
                    }
                    store.insert_param(format!("{}.kernel", node.name), kernel)?;
                    store.insert_param(format!("{}.bias", node.name), Tensor::zeros(&[units]))?;
                }
                LayerKind::BatchNorm => {
                    let c = *node.shape.last().expect("non-empty shape");
                    let bn = BatchNormParams::<T>::new(c);
                    store.insert_param(format!("{}.gamma", node.name), bn.gamma)?;
                    store.insert_param(format!("{}.beta", node.name), bn.beta)?;
                    store.insert_buffer(format!("{}.running_mean", node.name), bn.running_mean)?;
                    store.insert_buffer(format!("{}.running_var", node.name), bn.running_var)?;
                }
                _ => {}
            }
        }
        Ok(store)
    }

    /// Checks that `store` holds exactly the tensors this graph expects.
    pub fn check_store<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let expected = self.init_params::<T>(0)?;
        let names = |s: &ParamStore<T>| -> Vec<(String, Vec<usize>)> {
            s.params()
                .chain(s.buffers())
                .map(|(k, v)| (k.to_string(), v.dims().to_vec()))
                .collect()
        };
        let (want, got) = (names(&expected), names(store));
        if want != got {
            return Err(shape_err!("parameter store does not match the graph"));
        }
        Ok(())
    }
}

impl fmt::Display for ModelGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.nodes {
            writeln!(f, "{:<22} {:<10} {:?}", n.name, n.kind.label(), n.shape)?;
        }
        Ok(())
    }
}

/// The full-width network with freshly initialised parameters.
pub fn build_akhcrnet(seed: u64) -> Result<(ModelGraph, ParamStore<f32>)> {
    let graph = ModelGraph::build(&ArchConfig::akhcrnet())?;
    let store = graph.init_params(seed)?;
    log::info!("built network with {} parameters", store.param_count());
    Ok((graph, store))
}

#[derive(Debug, Clone)]
enum Aux<T: Scalar> {
    None,
    Pool(ArgmaxMap),
    BatchNorm(BatchNormCache<T>),
    Dropout(Option<DropoutMask<T>>),
}

/// Values retained by a train-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar> {
    generation: u64,
    mode: Mode,
    values: Vec<Option<Tensor<T>>>,
    aux: Vec<Aux<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Output of the named node, when still held.
    pub fn value(&self, graph: &ModelGraph, name: &str) -> Option<&Tensor<T>> {
        let i = graph.nodes.iter().position(|n| n.name == name)?;
        self.values[i].as_ref()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

fn conv_params<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<ConvParams<T>> {
    Ok(ConvParams {
        kernel: store.param(&format!("{name}.kernel"))?.clone(),
        bias: store.param(&format!("{name}.bias"))?.clone(),
    })
}

fn dense_params<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<DenseParams<T>> {
    Ok(DenseParams {
        weight: store.param(&format!("{name}.kernel"))?.clone(),
        bias: store.param(&format!("{name}.bias"))?.clone(),
    })
}

fn bn_params<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<BatchNormParams<T>> {
    let mut p = BatchNormParams::new(store.param(&format!("{name}.gamma"))?.numel());
    p.gamma = store.param(&format!("{name}.gamma"))?.clone();
    p.beta = store.param(&format!("{name}.beta"))?.clone();
    p.running_mean = store.buffer(&format!("{name}.running_mean"))?.clone();
    p.running_var = store.buffer(&format!("{name}.running_var"))?.clone();
    Ok(p)
}

/// Runs the graph on `(N, H, W, C)` images and returns the pre-softmax
/// logits.
///
/// Train mode keeps every intermediate for [`backward`] and draws dropout
/// masks from `rng`. Infer mode drops each intermediate after its last
/// consumer and never touches `rng`.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    graph: &ModelGraph,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let n = *images.dims().first().ok_or_else(|| shape_err!("images must be batched"))?;
    if images.dims()[1..] != *graph.input_shape() {
        return Err(shape_err!(
            "expected images of shape (N, {:?}), got {}",
            graph.input_shape(),
            images.shape()
        ));
    }
    let count = graph.nodes.len();
    let mut last_use = vec![0usize; count];
    for (i, node) in graph.nodes.iter().enumerate() {
        for &j in &node.inputs {
            last_use[j] = i;
        }
    }
    let mut values: Vec<Option<Tensor<T>>> = vec![None; count];
    let mut aux: Vec<Aux<T>> = vec![Aux::None; count];

    for (i, node) in graph.nodes.iter().enumerate() {
        let arg = |k: usize| -> &Tensor<T> { values[node.inputs[k]].as_ref().expect("inputs computed first") };
        let out = match node.kind {
            LayerKind::Input { .. } => images.clone(),
            LayerKind::Conv { .. } => conv2d_forward(arg(0), &conv_params(store, &node.name)?)?,
            LayerKind::Relu => relu(arg(0)),
            LayerKind::BatchNorm => {
                let p = bn_params(store, &node.name)?;
                match mode {
                    Mode::Train => {
                        let (y, cache) = batchnorm_forward_train(arg(0), &p)?;
                        aux[i] = Aux::BatchNorm(cache);
                        y
                    }
                    Mode::Infer => batchnorm_forward_infer(arg(0), &p)?,
                }
            }
            LayerKind::MaxPool(geom) => {
                let (y, map) = maxpool_forward(arg(0), geom)?;
                if mode == Mode::Train {
                    aux[i] = Aux::Pool(map);
                }
                y
            }
            LayerKind::Concat => {
                let parts: Vec<&Tensor<T>> = (0..node.inputs.len()).map(arg).collect();
                concat_channels(&parts)?
            }
            LayerKind::Flatten => flatten(arg(0))?,
            LayerKind::Dense { .. } => dense_forward(arg(0), &dense_params(store, &node.name)?)?,
            LayerKind::Dropout { rate } => {
                let (y, mask) = dropout(arg(0), rate, mode, rng)?;
                aux[i] = Aux::Dropout(mask);
                y
            }
        };
        if out.dims()[0] != n || out.dims()[1..] != *node.shape {
            return Err(shape_err!("node {} produced {}, expected (N, {:?})", node.name, out.shape(), node.shape));
        }
        values[i] = Some(out);
        if mode == Mode::Infer {
            for &j in &node.inputs {
                if last_use[j] == i {
                    values[j] = None;
                }
            }
        }
    }
    let logits = values[count - 1].clone().expect("output computed");
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok((
        logits,
        ForwardCache {
            generation: store.generation(),
            mode,
            values,
            aux,
        },
    ))
}

/// Loss report and gradients of the regularised objective for every
/// parameter, from a train-mode cache.
pub fn backward<T: Scalar>(
    graph: &ModelGraph,
    store: &ParamStore<T>,
    cache: &ForwardCache<T>,
    labels: &[usize],
    loss_cfg: &LossConfig,
) -> Result<(LossReport, Gradients<T>)> {
    if cache.mode != Mode::Train {
        return Err(Error::Usage("backward needs a train-mode forward cache".into()));
    }
    if cache.generation != store.generation() {
        return Err(Error::Usage("forward cache is stale: parameters changed since the forward pass".into()));
    }
    let count = graph.nodes.len();
    let value = |i: usize| cache.values[i].as_ref().expect("train cache keeps every value");
    let (report, dlogits) = loss_and_logit_grad(value(count - 1), labels, store, loss_cfg)?;

    let mut upstream: Vec<Option<Tensor<T>>> = vec![None; count];
    upstream[count - 1] = Some(dlogits);
    let mut grads = Gradients::new();
    let send = |upstream: &mut Vec<Option<Tensor<T>>>, to: usize, g: Tensor<T>| -> Result<()> {
        match upstream[to].as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => {
                upstream[to] = Some(g);
                Ok(())
            }
        }
    };

    for i in (0..count).rev() {
        let Some(dy) = upstream[i].take() else { continue };
        let node = &graph.nodes[i];
        let input = |k: usize| value(node.inputs[k]);
        match node.kind {
            LayerKind::Input { .. } => {}
            LayerKind::Conv { .. } => {
                let src = node.inputs[0];
                let need_input = !matches!(graph.nodes[src].kind, LayerKind::Input { .. });
                let g = conv2d_backward(input(0), &conv_params(store, &node.name)?, &dy, need_input)?;
                grads.accumulate(&format!("{}.kernel", node.name), g.kernel)?;
                grads.accumulate(&format!("{}.bias", node.name), g.bias)?;
                if let Some(dx) = g.input {
                    send(&mut upstream, src, dx)?;
                }
            }
            LayerKind::Relu => send(&mut upstream, node.inputs[0], relu_backward(input(0), &dy)?)?,
            LayerKind::BatchNorm => {
                let Aux::BatchNorm(bn) = &cache.aux[i] else {
                    return Err(Error::Usage(format!("missing batch-norm cache for {}", node.name)));
                };
                let gamma = store.param(&format!("{}.gamma", node.name))?;
                let g = batchnorm_backward(bn, gamma, &dy)?;
                grads.accumulate(&format!("{}.gamma", node.name), g.gamma)?;
                grads.accumulate(&format!("{}.beta", node.name), g.beta)?;
                send(&mut upstream, node.inputs[0], g.input)?;
            }
            LayerKind::MaxPool(_) => {
                let Aux::Pool(map) = &cache.aux[i] else {
                    return Err(Error::Usage(format!("missing pooling map for {}", node.name)));
                };
                send(&mut upstream, node.inputs[0], maxpool_backward(map, &dy)?)?;
            }
            LayerKind::Concat => {
                let widths: Vec<usize> = node.inputs.iter().map(|&j| graph.nodes[j].shape[2]).collect();
                for (&j, part) in node.inputs.iter().zip(split_channels(&dy, &widths)?) {
                    send(&mut upstream, j, part)?;
                }
            }
            LayerKind::Flatten => {
                let src = node.inputs[0];
                let s = &graph.nodes[src].shape;
                send(&mut upstream, src, unflatten(&dy, [dy.dims()[0], s[0], s[1], s[2]])?)?;
            }
            LayerKind::Dense { .. } => {
                let g = dense_backward(input(0), &dense_params(store, &node.name)?, &dy)?;
                grads.accumulate(&format!("{}.kernel", node.name), g.weight)?;
                grads.accumulate(&format!("{}.bias", node.name), g.bias)?;
                send(&mut upstream, node.inputs[0], g.input)?;
            }
            LayerKind::Dropout { .. } => {
                let mask = match &cache.aux[i] {
                    Aux::Dropout(m) => m.as_ref(),
                    _ => None,
                };
                send(&mut upstream, node.inputs[0], dropout_backward(mask, &dy)?)?;
            }
        }
    }
    grads.complete_with_zeros(store);
    add_l2_gradient(store, &mut grads, loss_cfg, labels.len())?;
    Ok((report, grads))
}

/// Folds the batch statistics of a train-mode cache into the running
/// batch-norm buffers.
pub fn update_batchnorm_stats<T: Scalar>(
    graph: &ModelGraph,
    store: &mut ParamStore<T>,
    cache: &ForwardCache<T>,
) -> Result<()> {
    for (node, aux) in graph.nodes.iter().zip(&cache.aux) {
        if let Aux::BatchNorm(bn) = aux {
            let mut mean = store.buffer(&format!("{}.running_mean", node.name))?.clone();
            let mut var = store.buffer(&format!("{}.running_var", node.name))?.clone();
            update_running_stats(&mut mean, &mut var, bn, crate::layers::batchnorm::DEFAULT_MOMENTUM);
            store.set_buffer(&format!("{}.running_mean", node.name), mean)?;
            store.set_buffer(&format!("{}.running_var", node.name), var)?;
        }
    }
    Ok(())
}

/// Infer-mode class probabilities, `(N, classes)`.
pub fn probabilities<T: Scalar>(graph: &ModelGraph, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    // Infer mode draws nothing, so any generator will do.
    let (logits, _) = forward(graph, store, images, Mode::Infer, &mut seeded_rng(0))?;
    softmax(&logits)
}

/// The `topk` most probable classes for one `(H, W, C)` image, most
/// probable first. Ties keep the lower class id first.
pub fn predict<T: Scalar>(
    graph: &ModelGraph,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    topk: usize,
) -> Result<Vec<(usize, f64)>> {
    if topk == 0 || topk > graph.classes {
        return Err(Error::Range(format!("topk must be in 1..={}, got {topk}", graph.classes)));
    }
    let mut dims = vec![1];
    dims.extend_from_slice(image.dims());
    let batch = image.clone().reshape(&dims)?;
    let probs = probabilities(graph, store, &batch)?;
    let mut ranked: Vec<(usize, f64)> = probs.data().iter().map(|p| p.as_f64()).enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(topk);
    Ok(ranked)
}

/// A graph together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub graph: ModelGraph,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let graph = ModelGraph::build(arch)?;
        let store = graph.init_params(seed)?;
        Ok(Model { graph, store })
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        images: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        forward(&self.graph, &self.store, images, mode, rng)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        labels: &[usize],
        loss_cfg: &LossConfig,
    ) -> Result<(LossReport, Gradients<T>)> {
        backward(&self.graph, &self.store, cache, labels, loss_cfg)
    }

    pub fn predict(&self, image: &Tensor<T>, topk: usize) -> Result<Vec<(usize, f64)>> {
        predict(&self.graph, &self.store, image, topk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reduced() -> Model<f64> {
        Model::new(&ArchConfig::reduced_clone(), 3).unwrap()
    }

    fn random_images(n: usize, side: usize, seed: u64) -> Tensor<f64> {
        let mut rng = seeded_rng(seed);
        let data = (0..n * side * side).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(&[n, side, side, 1], data).unwrap()
    }

    #[test]
    fn full_graph_shape_trace() {
        let g = ModelGraph::build(&ArchConfig::akhcrnet()).unwrap();
        let shape = |n: &str| g.node(n).unwrap().shape.clone();
        assert_eq!(shape("stem.pool"), [16, 16, 32]);
        assert_eq!(shape("inception.concat"), [16, 16, 448]);
        assert_eq!(shape("block1.pool2"), [4, 4, 256]);
        assert_eq!(shape("block2.pool2"), [1, 1, 512]);
        assert_eq!(shape("flatten"), [512]);
        assert_eq!(shape("head.out"), [84]);
        assert_eq!(g.regularized().len(), 4);
    }

    #[test]
    fn init_is_seeded() {
        let g = ModelGraph::build(&ArchConfig::reduced_clone()).unwrap();
        let a = g.init_params::<f32>(1).unwrap();
        assert_eq!(a, g.init_params::<f32>(1).unwrap());
        assert_ne!(a, g.init_params::<f32>(2).unwrap());
        assert!(g.init_params::<f32>(1).unwrap().params().all(|(k, t)| !k.ends_with(".bias") || t.sum() == 0.0));
        g.check_store(&a).unwrap();
    }

    #[test]
    fn infer_forward_is_pure() {
        let m = reduced();
        let x = random_images(3, 8, 1);
        let a = m.forward(&x, Mode::Infer, &mut seeded_rng(1)).unwrap().0;
        let b = m.forward(&x, Mode::Infer, &mut seeded_rng(2)).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn train_forward_reproducible_with_seed() {
        let m = reduced();
        let x = random_images(3, 8, 1);
        let a = m.forward(&x, Mode::Train, &mut seeded_rng(5)).unwrap().0;
        let b = m.forward(&x, Mode::Train, &mut seeded_rng(5)).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = reduced();
        let x = random_images(2, 9, 1);
        assert!(matches!(m.forward(&x, Mode::Infer, &mut seeded_rng(0)), Err(Error::Shape(_))));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = reduced();
        let x = random_images(4, 8, 1);
        let (_, cache) = m.forward(&x, Mode::Train, &mut seeded_rng(0)).unwrap();
        m.store.param_mut("head.out.bias").unwrap();
        let cfg = m.graph.loss_config(1e-3);
        assert!(matches!(m.backward(&cache, &[0, 1, 2, 3], &cfg), Err(Error::Usage(_))));
        let (_, infer) = m.forward(&x, Mode::Infer, &mut seeded_rng(0)).unwrap();
        assert!(matches!(m.backward(&infer, &[0, 1, 2, 3], &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn grads_cover_every_parameter() {
        let m = reduced();
        let x = random_images(4, 8, 2);
        let (_, cache) = m.forward(&x, Mode::Train, &mut seeded_rng(0)).unwrap();
        let (_, grads) = m.backward(&cache, &[0, 1, 2, 3], &m.graph.loss_config(1e-3)).unwrap();
        assert_eq!(grads.len(), m.store.params().count());
        for (name, p) in m.store.params() {
            assert_eq!(grads.get(name).unwrap().shape(), p.shape(), "{name}");
        }
    }

    #[test]
    fn predict_ranks_and_validates_topk() {
        let m = reduced();
        let img = random_images(1, 8, 4).reshape(&[8, 8, 1]).unwrap();
        let all = m.predict(&img, 5).unwrap();
        assert!((all.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(matches!(m.predict(&img, 6), Err(Error::Range(_))));
        assert!(matches!(m.predict(&img, 0), Err(Error::Range(_))));
    }
}
