//! Network descriptors and the mode-aware float forward pass.
//!
//! A network is a list of parametrized layers (conv or linear) plus a DAG of
//! nodes that wires them together. Node 0 is always the input. Every node
//! that ends in a ReLU is an *activation site*; site 0 is the input
//! quantizer. Each site is governed by an owner layer whose [`LayerMode`]
//! decides whether the site runs plain ReLU, clamped ReLU, or clamped and
//! quantized ReLU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::qat::LayerMode;
use crate::quant::{self, act_levels, weight_levels, ClampParams, QuantSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![out_ch, in_ch, kernel, kernel],
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![out_features, in_features],
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            LayerKind::Conv { out_ch, .. } => out_ch,
            LayerKind::Linear { out_features, .. } => out_features,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerKind::Linear { in_features, .. } => in_features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeDesc {
    Input,
    Layer {
        layer: usize,
        input: usize,
        relu: bool,
    },
    MaxPool {
        input: usize,
        size: usize,
    },
    GlobalAvgPool {
        input: usize,
    },
    /// `branch + skip`, optionally followed by a ReLU owned by `owner`.
    Add {
        branch: usize,
        skip: usize,
        relu: bool,
        owner: usize,
    },
    Dropout {
        input: usize,
        p: f64,
    },
}

impl NodeDesc {
    pub fn inputs(&self) -> Vec<usize> {
        match *self {
            NodeDesc::Input => vec![],
            NodeDesc::Layer { input, .. }
            | NodeDesc::MaxPool { input, .. }
            | NodeDesc::GlobalAvgPool { input }
            | NodeDesc::Dropout { input, .. } => vec![input],
            NodeDesc::Add { branch, skip, .. } => vec![branch, skip],
        }
    }
}

/// One activation site: the node it sits on and the layer whose mode
/// governs it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActSite {
    pub node: usize,
    pub owner: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub name: String,
    pub task: Task,
    /// `[C, H, W]`
    pub input_shape: [usize; 3],
    pub input_bits: u32,
    pub layers: Vec<LayerDesc>,
    pub nodes: Vec<NodeDesc>,
}

impl Arch {
    /// Six weight layers with one residual block, for 32x32 RGB
    /// classification into 10 classes.
    pub fn mini_resnet(width: usize) -> Self {
        let conv = |name: &str, in_ch, out_ch, stride| LayerDesc {
            name: name.into(),
            kind: LayerKind::Conv {
                in_ch,
                out_ch,
                kernel: 3,
                stride,
                padding: 1,
            },
            batch_norm: true,
        };
        let w = width;
        let layers = vec![
            conv("conv1", 3, w, 1),
            conv("conv2", w, w, 1),
            conv("conv3", w, w, 1),
            conv("conv4", w, 2 * w, 2),
            conv("conv5", 2 * w, 2 * w, 1),
            LayerDesc {
                name: "fc".into(),
                kind: LayerKind::Linear {
                    in_features: 2 * w,
                    out_features: 10,
                },
                batch_norm: false,
            },
        ];
        use NodeDesc::*;
        let nodes = vec![
            Input,
            Layer { layer: 0, input: 0, relu: true },
            MaxPool { input: 1, size: 2 },
            Layer { layer: 1, input: 2, relu: true },
            Layer { layer: 2, input: 3, relu: false },
            Add { branch: 4, skip: 2, relu: true, owner: 2 },
            Layer { layer: 3, input: 5, relu: true },
            Layer { layer: 4, input: 6, relu: true },
            GlobalAvgPool { input: 7 },
            Layer { layer: 5, input: 8, relu: false },
        ];
        Self {
            name: format!("mini-resnet-w{width}"),
            task: Task::Classification,
            input_shape: [3, 32, 32],
            input_bits: 8,
            layers,
            nodes,
        }
    }

    /// Three convolutions with a global input-to-output skip connection, so
    /// the network predicts a correction to its (mosaiced, noisy) input.
    pub fn denoise_skip(width: usize, size: usize) -> Self {
        Self::denoise_net(width, size, 3)
    }

    /// `depth` 3x3 convolutions (ReLU between them, dropout before the last)
    /// plus the global input-to-output skip.
    pub fn denoise_net(width: usize, size: usize, depth: usize) -> Self {
        let conv = |i: usize, in_ch, out_ch| LayerDesc {
            name: format!("conv{}", i + 1),
            kind: LayerKind::Conv {
                in_ch,
                out_ch,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            batch_norm: false,
        };
        let depth = depth.max(2);
        let layers = (0..depth)
            .map(|i| {
                let in_ch = if i == 0 { 3 } else { width };
                let out_ch = if i + 1 == depth { 3 } else { width };
                conv(i, in_ch, out_ch)
            })
            .collect();
        use NodeDesc::*;
        let mut nodes = vec![Input];
        for l in 0..depth - 1 {
            nodes.push(Layer { layer: l, input: nodes.len() - 1, relu: true });
        }
        nodes.push(Dropout { input: nodes.len() - 1, p: 0.05 });
        nodes.push(Layer { layer: depth - 1, input: nodes.len() - 1, relu: false });
        nodes.push(Add { branch: nodes.len() - 1, skip: 0, relu: false, owner: depth - 1 });
        let name = if depth == 3 { format!("denoise-skip-w{width}") } else { format!("denoise-skip-w{width}-d{depth}") };
        Self { name, task: Task::Regression, input_shape: [3, size, size], input_bits: 16, layers, nodes }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.nodes.first(), Some(NodeDesc::Input)) {
            return Err(Error::Config("node 0 must be the input".into()));
        }
        let mut used = vec![0usize; self.layers.len()];
        for (i, node) in self.nodes.iter().enumerate().skip(1) {
            if matches!(node, NodeDesc::Input) {
                return Err(Error::Config(format!("node {i}: only node 0 may be an input")));
            }
            for j in node.inputs() {
                if j >= i {
                    return Err(Error::Config(format!("node {i} reads node {j}, not a DAG in order")));
                }
            }
            match *node {
                NodeDesc::Layer { layer, .. } => {
                    *used.get_mut(layer).ok_or_else(|| {
                        Error::Config(format!("node {i}: unknown layer {layer}"))
                    })? += 1;
                }
                NodeDesc::Add { owner, .. } if owner >= self.layers.len() => {
                    return Err(Error::Config(format!("node {i}: unknown owner {owner}")));
                }
                NodeDesc::Dropout { p, .. } if !(0.0..1.0).contains(&p) => {
                    return Err(Error::Config(format!("node {i}: dropout {p} outside [0, 1)")));
                }
                _ => {}
            }
        }
        if used.iter().any(|&u| u != 1) {
            return Err(Error::Config("every layer must be used by exactly one node".into()));
        }
        Ok(())
    }

    /// Activation sites in node order; site 0 is the input quantizer.
    pub fn act_sites(&self) -> Vec<ActSite> {
        let mut sites = vec![ActSite { node: 0, owner: 0 }];
        for (i, node) in self.nodes.iter().enumerate() {
            match *node {
                NodeDesc::Layer { layer, relu: true, .. } => sites.push(ActSite { node: i, owner: layer }),
                NodeDesc::Add { relu: true, owner, .. } => sites.push(ActSite { node: i, owner }),
                _ => {}
            }
        }
        sites
    }

    /// Site index of each node whose value is an activation site output.
    pub fn node_sites(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.nodes.len()];
        for (s, site) in self.act_sites().iter().enumerate() {
            out[site.node] = Some(s);
        }
        out
    }

    /// The node computing each layer.
    pub fn layer_nodes(&self) -> Vec<usize> {
        let mut out = vec![0; self.layers.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let NodeDesc::Layer { layer, .. } = *node {
                out[layer] = i;
            }
        }
        out
    }

    /// The activation site whose (quantized) values a node carries, following
    /// pass-through nodes (pooling, dropout) back to their source. `None` for
    /// values that are not on an activation grid.
    pub fn value_site(&self, node: usize) -> Option<usize> {
        let sites = self.node_sites();
        let mut n = node;
        loop {
            if let Some(s) = sites[n] {
                return Some(s);
            }
            match self.nodes[n] {
                NodeDesc::MaxPool { input, .. } | NodeDesc::Dropout { input, .. } => n = input,
                _ => return None,
            }
        }
    }

    /// Activation site feeding each layer (the clamp used for its bias grid).
    pub fn layer_input_sites(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.layers.len()];
        for node in &self.nodes {
            if let NodeDesc::Layer { layer, input, .. } = *node {
                out[layer] = self.value_site(input);
            }
        }
        out
    }

    /// The layer whose mode governs each activation site. A site owned by a
    /// pinned layer is governed by the first unpinned layer reading it, so
    /// that it becomes that layer's input quantizer; `None` means the site
    /// always stays a plain ReLU (or the raw input).
    pub fn site_governors(&self, pinned: &[bool]) -> Vec<Option<usize>> {
        let inputs = self.layer_input_sites();
        self.act_sites()
            .iter()
            .enumerate()
            .map(|(s, site)| {
                if !pinned[site.owner] {
                    Some(site.owner)
                } else {
                    (0..self.layers.len()).find(|&l| !pinned[l] && inputs[l] == Some(s))
                }
            })
            .collect()
    }

    /// Bitwidth of an activation site.
    pub fn site_bits(&self, site: usize, spec: &QuantSpec) -> u32 {
        if site == 0 {
            self.input_bits
        } else {
            spec.bits_a
        }
    }

    pub fn output_node(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    /// Layers pinned to full-precision weights when the first and last
    /// layers are excluded from quantization.
    pub fn pinned_layers(&self, skip_first_last: bool) -> Vec<bool> {
        let n = self.layers.len();
        (0..n).map(|i| skip_first_last && (i == 0 || i + 1 == n)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(ch: usize) -> Self {
        Self {
            gamma: Tensor::full(&[ch], 1.0),
            beta: Tensor::zeros(&[ch]),
            running_mean: vec![0.0; ch],
            running_var: vec![1.0; ch],
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNorm>,
}

/// Parameters plus clamp state of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub layers: Vec<LayerParams>,
    /// `c_w` per layer, set by calibration.
    pub weight_clamps: Vec<Option<f64>>,
    /// `c_a` per activation site. Site 0 (the input) is fixed at 1.
    pub act_clamps: Vec<Option<f64>>,
}

/// How one forward pass treats the network.
#[derive(Debug, Clone, Copy)]
pub struct ForwardConfig<'a> {
    /// Mode of every layer.
    pub modes: &'a [LayerMode],
    /// Layers whose weights and biases always stay full precision.
    pub pinned: &'a [bool],
    pub spec: &'a QuantSpec,
    /// Batch statistics for batch-norm, active dropout and noise injection.
    pub train: bool,
    /// Record gradients for weights and biases.
    pub grad_params: bool,
    /// Record gradients for activation clamps.
    pub grad_clamps: bool,
}

/// Handles produced by [`Model::forward`].
pub struct Forward {
    /// One var per node, in node order.
    pub nodes: Vec<Var>,
    /// Parameter vars in [`Model::params_mut`] order.
    pub params: Vec<Var>,
    /// Clamp var per activation site, when the site ran a clamped ReLU.
    pub clamps: Vec<Option<Var>>,
    /// Pre-activation var per activation site.
    pub preacts: Vec<Option<Var>>,
    /// Batch statistics `(mean, var)` per layer with batch-norm in train mode.
    pub bn_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Forward {
    pub fn output(&self) -> Var {
        *self.nodes.last().expect("non-empty graph")
    }
}

impl Model {
    /// He-normal weights, zero biases.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layers
            .iter()
            .map(|l| {
                let shape = l.kind.weight_shape();
                let std = (2.0 / l.kind.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                let ch = l.kind.out_channels();
                Ok(LayerParams {
                    weight: Tensor::new(&shape, data)?,
                    bias: Tensor::zeros(&[ch]),
                    bn: l.batch_norm.then(|| BatchNorm::new(ch)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n_sites = arch.act_sites().len();
        let n_layers = arch.layers.len();
        let mut act_clamps = vec![None; n_sites];
        act_clamps[0] = Some(1.0);
        Ok(Self {
            arch,
            layers,
            weight_clamps: vec![None; n_layers],
            act_clamps,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Mutable parameter tensors in a fixed order: per layer weight, bias,
    /// then batch-norm gamma and beta when present.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Which entries of [`Model::params_mut`] are weights (decayed) rather
    /// than biases or batch-norm affine terms.
    pub fn param_is_weight(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([true, false]);
            if l.bn.is_some() {
                out.extend([false, false]);
            }
        }
        out
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.bn.is_some())
    }

    /// Folds every batch-norm into its convolution using running
    /// statistics: `w' = w * g / s`, `b' = (b - mean) * g / s + beta` with
    /// `s = sqrt(var + eps)`.
    pub fn fold_batch_norm(&mut self) {
        for l in &mut self.layers {
            let Some(bn) = l.bn.take() else { continue };
            let out_ch = l.bias.len();
            let per = l.weight.len() / out_ch;
            for o in 0..out_ch {
                let k = bn.gamma.data()[o] / (bn.running_var[o] + bn.eps).sqrt();
                for v in &mut l.weight.data_mut()[o * per..(o + 1) * per] {
                    *v *= k;
                }
                let b = &mut l.bias.data_mut()[o];
                *b = (*b - bn.running_mean[o]) * k + bn.beta.data()[o];
            }
        }
    }

    /// Clamp triple of a layer, `c_a` being the clamp of its input site.
    pub fn clamp_params(&self, layer: usize, spec: &QuantSpec) -> Result<ClampParams> {
        let name = &self.arch.layers[layer].name;
        let c_w = self.weight_clamps[layer]
            .ok_or_else(|| Error::Config(format!("layer {name} has no weight clamp; calibrate first")))?;
        let site = self.arch.layer_input_sites()[layer].ok_or_else(|| {
            Error::Config(format!("layer {name} does not read an activation site"))
        })?;
        let c_a = self.act_clamps[site]
            .ok_or_else(|| Error::Config(format!("site {site} has no activation clamp")))?;
        ClampParams::new(c_w, c_a, self.arch.site_bits(site, spec), spec)
    }

    pub fn is_calibrated(&self) -> bool {
        self.weight_clamps.iter().all(Option::is_some) && self.act_clamps.iter().all(Option::is_some)
    }

    /// Builds the forward pass for a batch `x` of shape `[N, C, H, W]`.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        x: Tensor,
        cfg: &ForwardConfig<'_>,
        rng: &mut R,
    ) -> Result<Forward> {
        self.forward_from(g, x, cfg, rng, None)
    }

    /// Like `forward`, but with `reference` every node reads its inputs from
    /// the given per-node values instead of the values computed here.
    fn forward_from<R: Rng>(
        &self,
        g: &mut Graph,
        x: Tensor,
        cfg: &ForwardConfig<'_>,
        rng: &mut R,
        reference: Option<&[Tensor]>,
    ) -> Result<Forward> {
        let arch = &self.arch;
        if let Some(r) = reference {
            if r.len() != arch.nodes.len() {
                return Err(Error::Dimension(format!("{} reference values for {} nodes", r.len(), arch.nodes.len())));
            }
        }
        if cfg.modes.len() != self.layers.len() || cfg.pinned.len() != self.layers.len() {
            return Err(Error::Config("mode/pin table does not match layer count".into()));
        }
        let node_sites = arch.node_sites();
        let sites = arch.act_sites();
        let governors = arch.site_governors(cfg.pinned);
        let site_mode = |s: usize| governors[s].map_or(LayerMode::FullPrecision, |l| cfg.modes[l]);
        let mut fwd = Forward {
            nodes: Vec::with_capacity(arch.nodes.len()),
            params: Vec::new(),
            clamps: vec![None; sites.len()],
            preacts: vec![None; sites.len()],
            bn_stats: vec![None; self.layers.len()],
        };
        let mut param_vars: Vec<Vec<Var>> = vec![Vec::new(); self.layers.len()];

        for (i, node) in arch.nodes.iter().enumerate() {
            let inputs: Vec<Var> = match reference {
                None => node.inputs().into_iter().map(|j| fwd.nodes[j]).collect(),
                Some(r) => node.inputs().into_iter().map(|j| g.constant(r[j].clone())).collect(),
            };
            let v = match *node {
                NodeDesc::Input => {
                    let [c, h, w] = arch.input_shape;
                    if x.shape().len() != 4 || x.shape()[1..] != [c, h, w] {
                        return Err(Error::Dimension(format!(
                            "input {:?} does not match [N, {c}, {h}, {w}]",
                            x.shape()
                        )));
                    }
                    let xv = g.constant(x.clone());
                    fwd.preacts[0] = Some(xv);
                    if site_mode(0) == LayerMode::Quantized {
                        let c = g.constant(Tensor::scalar(self.act_clamps[0].unwrap_or(1.0)));
                        quant::clamp_activation(g, xv, c, arch.input_bits, true)?
                    } else {
                        xv
                    }
                }
                NodeDesc::Layer { layer, relu, .. } => {
                    let z = self.layer_forward(g, layer, inputs[0], cfg, rng, &mut param_vars[layer], &mut fwd.bn_stats[layer])?;
                    if relu {
                        let site = node_sites[i].expect("relu node is a site");
                        self.activation(g, z, site, site_mode(site), cfg, &mut fwd)?
                    } else {
                        z
                    }
                }
                NodeDesc::Add { relu, .. } => {
                    let s = g.add(inputs[0], inputs[1])?;
                    if relu {
                        let site = node_sites[i].expect("relu node is a site");
                        self.activation(g, s, site, site_mode(site), cfg, &mut fwd)?
                    } else {
                        s
                    }
                }
                NodeDesc::MaxPool { size, .. } => g.max_pool2d(inputs[0], size)?,
                NodeDesc::GlobalAvgPool { .. } => g.global_avg_pool(inputs[0])?,
                NodeDesc::Dropout { p, .. } => {
                    if cfg.train && p > 0.0 {
                        g.dropout(inputs[0], p, rng)
                    } else {
                        inputs[0]
                    }
                }
            };
            fwd.nodes.push(v);
        }
        fwd.params = param_vars.into_iter().flatten().collect();
        Ok(fwd)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward<R: Rng>(
        &self,
        g: &mut Graph,
        layer: usize,
        x: Var,
        cfg: &ForwardConfig<'_>,
        rng: &mut R,
        vars: &mut Vec<Var>,
        bn_stats: &mut Option<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Var> {
        let p = &self.layers[layer];
        let desc = &self.arch.layers[layer];
        let mode = cfg.modes[layer];
        let leaf = |g: &mut Graph, t: &Tensor| {
            if cfg.grad_params {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let w = leaf(g, &p.weight);
        let b = leaf(g, &p.bias);
        vars.extend([w, b]);

        let (w_eff, b_eff) = if cfg.pinned[layer] || mode == LayerMode::FullPrecision {
            (w, b)
        } else {
            if p.bn.is_some() {
                return Err(Error::Config(format!(
                    "layer {}: fold batch-norm before quantizing",
                    desc.name
                )));
            }
            let cp = self.clamp_params(layer, cfg.spec)?;
            let (lw, lb) = (weight_levels(cfg.spec.bits_w), weight_levels(cfg.spec.bits_b));
            if mode == LayerMode::Noisy && cfg.train {
                (
                    quant::ste_noisy_sym(g, w, cp.c_w, lw, cfg.spec.mask_prob, rng)?,
                    quant::ste_noisy_sym(g, b, cp.c_b, lb, cfg.spec.mask_prob, rng)?,
                )
            } else {
                (
                    quant::ste_quantize_sym(g, w, cp.c_w, lw)?,
                    quant::ste_quantize_sym(g, b, cp.c_b, lb)?,
                )
            }
        };

        let z = match desc.kind {
            LayerKind::Conv { stride, padding, .. } => g.conv2d(x, w_eff, b_eff, stride, padding)?,
            LayerKind::Linear { .. } => {
                let shape = g.value(x).shape().to_vec();
                let x2 = if shape.len() == 2 {
                    x
                } else {
                    let n = shape[0];
                    g.reshape(x, &[n, shape[1..].iter().product()])?
                };
                g.linear(x2, w_eff, b_eff)?
            }
        };
        let Some(bn) = &p.bn else { return Ok(z) };
        let gamma = leaf(g, &bn.gamma);
        let beta = leaf(g, &bn.beta);
        vars.extend([gamma, beta]);
        if cfg.train {
            let (y, mean, var) = g.batch_norm_train(z, gamma, beta, bn.eps)?;
            *bn_stats = Some((mean, var));
            Ok(y)
        } else {
            g.batch_norm_eval(z, gamma, beta, &bn.running_mean, &bn.running_var, bn.eps)
        }
    }

    fn activation(
        &self,
        g: &mut Graph,
        z: Var,
        site: usize,
        mode: LayerMode,
        cfg: &ForwardConfig<'_>,
        fwd: &mut Forward,
    ) -> Result<Var> {
        fwd.preacts[site] = Some(z);
        if mode == LayerMode::FullPrecision {
            return Ok(g.relu(z));
        }
        let c = self.act_clamps[site].ok_or_else(|| {
            Error::Config(format!("activation site {site} has no clamp; calibrate first"))
        })?;
        let cv = if cfg.grad_clamps {
            g.param(Tensor::scalar(c))
        } else {
            g.constant(Tensor::scalar(c))
        };
        fwd.clamps[site] = Some(cv);
        quant::clamp_activation(g, z, cv, cfg.spec.bits_a, mode == LayerMode::Quantized)
    }

    /// Evaluation-mode forward returning the values of every node.
    pub fn eval_nodes(&self, x: Tensor, modes: &[LayerMode], pinned: &[bool], spec: &QuantSpec) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let cfg = ForwardConfig {
            modes,
            pinned,
            spec,
            train: false,
            grad_params: false,
            grad_clamps: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward(&mut g, x, &cfg, &mut rng)?;
        Ok(fwd.nodes.iter().map(|v| g.value(*v).clone()).collect())
    }

    /// Evaluation-mode values of every node computed from `reference` inputs
    /// (see `forward_from`), so each node's error is its own.
    pub fn eval_nodes_local(
        &self,
        x: Tensor,
        reference: &[Tensor],
        modes: &[LayerMode],
        pinned: &[bool],
        spec: &QuantSpec,
    ) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let cfg = ForwardConfig {
            modes,
            pinned,
            spec,
            train: false,
            grad_params: false,
            grad_clamps: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.forward_from(&mut g, x, &cfg, &mut rng, Some(reference))?;
        Ok(fwd.nodes.iter().map(|v| g.value(*v).clone()).collect())
    }

    /// Evaluation-mode forward returning the output.
    pub fn predict(&self, x: Tensor, modes: &[LayerMode], pinned: &[bool], spec: &QuantSpec) -> Result<Tensor> {
        let mut nodes = self.eval_nodes(x, modes, pinned, spec)?;
        Ok(nodes.pop().expect("non-empty graph"))
    }

    /// The largest quantized weight code magnitude, for sanity checks.
    pub fn max_weight_code(&self, layer: usize, spec: &QuantSpec) -> Option<f64> {
        let c = self.weight_clamps[layer]?;
        let scale = c / weight_levels(spec.bits_w);
        Some(
            self.layers[layer]
                .weight
                .data()
                .iter()
                .map(|w| (w.clamp(-c, c) / scale).round().abs())
                .fold(0.0, f64::max),
        )
    }

    /// Activation scale of a site.
    pub fn site_scale(&self, site: usize, spec: &QuantSpec) -> Option<f64> {
        Some(self.act_clamps[site]? / act_levels(self.arch.site_bits(site, spec)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all(n: usize, m: LayerMode) -> Vec<LayerMode> {
        vec![m; n]
    }

    fn random_batch(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn shipped_architectures_validate() {
        Arch::mini_resnet(4).validate().unwrap();
        Arch::denoise_skip(4, 8).validate().unwrap();
        let sites = Arch::mini_resnet(4).act_sites();
        assert_eq!(sites.len(), 6);
        assert_eq!(sites[3], ActSite { node: 5, owner: 2 });
    }

    #[test]
    fn input_sites_follow_pooling() {
        let a = Arch::mini_resnet(4);
        // conv2 reads the max-pooled conv1 activation (site 1)
        assert_eq!(a.layer_input_sites(), vec![Some(0), Some(1), Some(2), Some(3), Some(4), None]);
        let r = Arch::denoise_skip(4, 8);
        assert_eq!(r.layer_input_sites(), vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn pinned_owner_hands_site_to_consumer() {
        let a = Arch::mini_resnet(4);
        let g = a.site_governors(&a.pinned_layers(true));
        assert_eq!(g, vec![None, Some(1), Some(1), Some(2), Some(3), Some(4)]);
        let g = a.site_governors(&a.pinned_layers(false));
        assert_eq!(g, vec![Some(0), Some(0), Some(1), Some(2), Some(3), Some(4)]);
    }

    #[test]
    fn invalid_arch_rejected() {
        let mut a = Arch::mini_resnet(4);
        a.nodes.swap(3, 4);
        assert!(a.validate().is_err());
    }

    #[test]
    fn forward_shapes() {
        let m = Model::new(Arch::mini_resnet(4), 1).unwrap();
        let n = m.num_layers();
        let out = m
            .predict(random_batch(&[2, 3, 32, 32], 2), &all(n, LayerMode::FullPrecision), &vec![false; n], &QuantSpec::default())
            .unwrap();
        assert_eq!(out.shape(), &[2, 10]);
        let r = Model::new(Arch::denoise_skip(4, 8), 1).unwrap();
        let out = r
            .predict(random_batch(&[2, 3, 8, 8], 3), &all(3, LayerMode::FullPrecision), &[false; 3], &QuantSpec::default())
            .unwrap();
        assert_eq!(out.shape(), &[2, 3, 8, 8]);
    }

    #[test]
    fn folding_preserves_eval_output() {
        let mut m = Model::new(Arch::mini_resnet(4), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for l in &mut m.layers {
            if let Some(bn) = &mut l.bn {
                for v in bn.gamma.data_mut() {
                    *v = rng.random_range(0.5..1.5);
                }
                for v in bn.beta.data_mut() {
                    *v = rng.random_range(-0.2..0.2);
                }
                for v in &mut bn.running_mean {
                    *v = rng.random_range(-0.3..0.3);
                }
                for v in &mut bn.running_var {
                    *v = rng.random_range(0.5..2.0);
                }
            }
        }
        let x = random_batch(&[2, 3, 32, 32], 7);
        let modes = all(6, LayerMode::FullPrecision);
        let pins = vec![false; 6];
        let spec = QuantSpec::default();
        let before = m.predict(x.clone(), &modes, &pins, &spec).unwrap();
        m.fold_batch_norm();
        assert!(!m.has_batch_norm());
        let after = m.predict(x, &modes, &pins, &spec).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn quantizing_with_batch_norm_is_rejected() {
        let mut m = Model::new(Arch::mini_resnet(4), 1).unwrap();
        m.weight_clamps = vec![Some(1.0); 6];
        m.act_clamps = vec![Some(1.0); 6];
        let err = m.predict(
            random_batch(&[1, 3, 32, 32], 1),
            &all(6, LayerMode::Quantized),
            &[false; 6],
            &QuantSpec::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
