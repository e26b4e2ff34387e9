//! Integer-only inference: lowering a fully quantized model to integer
//! codes with dyadic rescale factors, and executing it.
//!
//! Values flowing between nodes are either integer codes with a real scale
//! (activation codes, or accumulator codes at `input scale * weight scale`)
//! or plain reals for the full-precision first and last layers. Every
//! conversion between the two happens at an explicit quantize or
//! dequantize boundary.

pub mod dyadic;
pub mod format;
pub mod verify;

pub use dyadic::{decompose_scale, shift_round, DyadicScale};
pub use format::{read_int_model, write_int_model};
pub use verify::{verify_equivalence, DevUnit, EquivalenceReport, NodeReport};

use crate::error::{Error, Result};
use crate::graph::{self, ConvGeom, Graph};
use crate::model::{LayerKind, Model, NodeDesc, Task};
use crate::quant::{act_levels, weight_levels, QuantSpec};
use crate::tensor::Tensor;

/// Integer codes with the real scale they represent: `value = code * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i64>,
    pub scale: f64,
    /// Width of the signed container the codes are guaranteed to fit.
    pub code_bits: u32,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<i64>, scale: f64, code_bits: u32) -> Result<Self> {
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::Dimension(format!("{} codes for shape {shape:?}", codes.len())));
        }
        let t = Self { shape, codes, scale, code_bits };
        t.check_bits()?;
        Ok(t)
    }

    fn check_bits(&self) -> Result<()> {
        if !(1..=64).contains(&self.code_bits) {
            return Err(Error::Parameter(format!("code width {} outside [1, 64]", self.code_bits)));
        }
        let max = if self.code_bits == 64 { i64::MAX } else { (1i64 << (self.code_bits - 1)) - 1 };
        if let Some(c) = self.codes.iter().find(|c| **c > max || **c < -max - 1) {
            return Err(Error::Parameter(format!("code {c} does not fit {} signed bits", self.code_bits)));
        }
        Ok(())
    }

    /// Closest dyadic approximation of the scale.
    pub fn dyadic(&self) -> Result<DyadicScale> {
        decompose_scale(self.scale)
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self.codes.iter().map(|&c| c as f64 * self.scale).collect();
        Tensor::new(&self.shape, data).expect("shape checked on construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IntValue {
    Codes(IntTensor),
    Real(Tensor),
}

impl IntValue {
    pub fn to_real(&self) -> Tensor {
        match self {
            IntValue::Codes(t) => t.dequantize(),
            IntValue::Real(t) => t.clone(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            IntValue::Codes(t) => &t.shape,
            IntValue::Real(t) => t.shape(),
        }
    }
}

/// Quantization of a clamped-ReLU output: `round(clamp(x, 0, clamp) / scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActQuant {
    pub clamp: f64,
    pub bits: u32,
    pub scale: f64,
}

impl ActQuant {
    fn new(clamp: f64, bits: u32) -> Self {
        Self { clamp, bits, scale: clamp / act_levels(bits) }
    }

    fn code(&self, x: f64) -> i64 {
        (x.clamp(0.0, self.clamp) / self.scale).round() as i64
    }

    fn quantize(&self, t: &Tensor) -> IntTensor {
        IntTensor {
            shape: t.shape().to_vec(),
            codes: t.data().iter().map(|&v| self.code(v)).collect(),
            scale: self.scale,
            code_bits: self.bits + 1,
        }
    }
}

/// Accumulator-to-activation rescale: `clamp(M * acc, 0, 2^bits - 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Requant {
    pub scale: DyadicScale,
    /// The exact factor `M` the dyadic pair approximates.
    pub real: f64,
    pub out: ActQuant,
}

impl Requant {
    fn new(acc_scale: f64, out: ActQuant) -> Result<Self> {
        let real = acc_scale / out.scale;
        Ok(Self { scale: decompose_scale(real)?, real, out })
    }

    fn apply(&self, acc: i64) -> Result<i64> {
        Ok(self.scale.apply(acc)?.clamp(0, act_levels(self.out.bits) as i64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputStage {
    /// The first layer reads the real input.
    Float,
    Quantize(ActQuant),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntLayer {
    pub name: String,
    pub input: usize,
    pub kind: LayerKind,
    pub bits_w: u32,
    pub bits_b: u32,
    /// Bitwidth of the unsigned input codes.
    pub in_bits: u32,
    pub weight_codes: Vec<i32>,
    pub bias_codes: Vec<i32>,
    pub in_scale: f64,
    pub w_scale: f64,
    pub b_scale: f64,
    /// `in_scale * w_scale`, the scale of the accumulator.
    pub acc_scale: f64,
    /// 32, or 64 when the worst-case accumulator exceeds 31 bits.
    pub acc_bits: u32,
    pub requant: Option<Requant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayer {
    pub name: String,
    pub input: usize,
    pub kind: LayerKind,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
    /// Output quantizer when the ReLU feeds an integer layer.
    pub out_quant: Option<ActQuant>,
}

/// Residual addition at the branch scale: the skip codes are shifted left
/// by `align_shift` and rescaled by `align`, then added.
#[derive(Debug, Clone, PartialEq)]
pub struct IntAdd {
    pub branch: usize,
    pub skip: usize,
    pub align: DyadicScale,
    pub align_shift: u32,
    /// Exact `skip scale / branch scale`.
    pub align_real: f64,
    pub acc_scale: f64,
    pub requant: Option<Requant>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IntNode {
    Input(InputStage),
    Layer(IntLayer),
    Float(FloatLayer),
    MaxPool { input: usize, size: usize },
    GlobalAvgPool { input: usize },
    Add(IntAdd),
    Identity { input: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntModel {
    pub task: Task,
    pub input_shape: [usize; 3],
    pub nodes: Vec<IntNode>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Domain {
    Act(ActQuant),
    Acc(f64),
    Real,
}

/// Lowers a calibrated, batch-norm-free model in its final quantized state.
/// With `skip_first_last` the first and last layers stay in float.
pub fn lower(model: &Model, spec: &QuantSpec, skip_first_last: bool) -> Result<IntModel> {
    spec.validate()?;
    if model.has_batch_norm() {
        return Err(Error::Lowering("batch-norm must be folded before lowering".into()));
    }
    if !model.is_calibrated() {
        return Err(Error::Lowering("model has no calibrated clamps".into()));
    }
    let arch = &model.arch;
    let pinned = arch.pinned_layers(skip_first_last);
    let governors = arch.site_governors(&pinned);
    let node_sites = arch.node_sites();
    let site_quant = |s: usize| ActQuant::new(model.act_clamps[s].expect("calibrated"), arch.site_bits(s, spec));

    let mut nodes = Vec::with_capacity(arch.nodes.len());
    let mut dom: Vec<Domain> = Vec::with_capacity(arch.nodes.len());
    for (i, node) in arch.nodes.iter().enumerate() {
        let (n, d) = match *node {
            NodeDesc::Input => {
                if governors[0].is_some() {
                    let q = site_quant(0);
                    (IntNode::Input(InputStage::Quantize(q)), Domain::Act(q))
                } else {
                    (IntNode::Input(InputStage::Float), Domain::Real)
                }
            }
            NodeDesc::Layer { layer, input, relu } => {
                let desc = &arch.layers[layer];
                let params = &model.layers[layer];
                let out_site = relu.then(|| node_sites[i].expect("relu node is a site"));
                if pinned[layer] {
                    let out_quant = out_site.and_then(|s| governors[s].map(|_| site_quant(s)));
                    let d = out_quant.map_or(Domain::Real, Domain::Act);
                    (
                        IntNode::Float(FloatLayer {
                            name: desc.name.clone(),
                            input,
                            kind: desc.kind.clone(),
                            weight: params.weight.data().to_vec(),
                            bias: params.bias.data().to_vec(),
                            relu,
                            out_quant,
                        }),
                        d,
                    )
                } else {
                    let Domain::Act(inq) = dom[input] else {
                        return Err(Error::Lowering(format!(
                            "layer {} reads a value that is not on an activation grid",
                            desc.name
                        )));
                    };
                    let cp = model.clamp_params(layer, spec)?;
                    let w_scale = cp.c_w / weight_levels(spec.bits_w);
                    let b_scale = cp.c_b / weight_levels(spec.bits_b);
                    let weight_codes = codes_sym(params.weight.data(), cp.c_w, w_scale, spec.bits_w, &desc.name, "weight")?;
                    let bias_codes = codes_sym(params.bias.data(), cp.c_b, b_scale, spec.bits_b, &desc.name, "bias")?;
                    let acc_scale = inq.scale * w_scale;
                    let fan = weight_codes.len() / bias_codes.len();
                    let max_in = act_levels(inq.bits) as i128;
                    let bound = (0..bias_codes.len())
                        .map(|o| {
                            weight_codes[o * fan..(o + 1) * fan].iter().map(|w| (*w as i128).abs()).sum::<i128>() * max_in
                                + (bias_codes[o] as i128).abs()
                        })
                        .max()
                        .unwrap_or(0);
                    let acc_bits = if bound < (1i128 << 31) { 32 } else { 64 };
                    let (requant, d) = match out_site {
                        Some(s) => {
                            let q = site_quant(s);
                            (Some(Requant::new(acc_scale, q)?), Domain::Act(q))
                        }
                        None => (None, Domain::Acc(acc_scale)),
                    };
                    (
                        IntNode::Layer(IntLayer {
                            name: desc.name.clone(),
                            input,
                            kind: desc.kind.clone(),
                            bits_w: spec.bits_w,
                            bits_b: spec.bits_b,
                            in_bits: inq.bits,
                            weight_codes,
                            bias_codes,
                            in_scale: inq.scale,
                            w_scale,
                            b_scale,
                            acc_scale,
                            acc_bits,
                            requant,
                        }),
                        d,
                    )
                }
            }
            NodeDesc::MaxPool { input, size } => (IntNode::MaxPool { input, size }, dom[input]),
            NodeDesc::GlobalAvgPool { input } => (IntNode::GlobalAvgPool { input }, Domain::Real),
            NodeDesc::Dropout { input, .. } => (IntNode::Identity { input }, dom[input]),
            NodeDesc::Add { branch, skip, relu, .. } => {
                let scale_of = |d: Domain| match d {
                    Domain::Act(q) => Some(q.scale),
                    Domain::Acc(s) => Some(s),
                    Domain::Real => None,
                };
                let (Some(bs), Some(ss)) = (scale_of(dom[branch]), scale_of(dom[skip])) else {
                    return Err(Error::Lowering(format!("add at node {i} mixes float and integer values")));
                };
                let align_real = ss / bs;
                let align_shift = if align_real > 1.0 { align_real.log2().ceil() as u32 } else { 0 };
                let align = decompose_scale(align_real / 2f64.powi(align_shift as i32))?;
                let (requant, d) = if relu {
                    let s = node_sites[i].expect("relu node is a site");
                    if governors[s].is_none() {
                        return Err(Error::Lowering(format!("add at node {i} has an unquantized ReLU")));
                    }
                    let q = site_quant(s);
                    (Some(Requant::new(bs, q)?), Domain::Act(q))
                } else {
                    (None, Domain::Acc(bs))
                };
                (
                    IntNode::Add(IntAdd { branch, skip, align, align_shift, align_real, acc_scale: bs, requant }),
                    d,
                )
            }
        };
        nodes.push(n);
        dom.push(d);
    }
    Ok(IntModel {
        task: arch.task,
        input_shape: arch.input_shape,
        nodes,
    })
}

fn codes_sym(v: &[f64], c: f64, scale: f64, bits: u32, layer: &str, what: &str) -> Result<Vec<i32>> {
    let max = weight_levels(bits);
    v.iter()
        .map(|&x| {
            let code = (x.clamp(-c, c) / scale).round();
            if code.abs() > max || !code.is_finite() {
                Err(Error::Lowering(format!("layer {layer}: {what} code {code} outside +-{max}")))
            } else {
                Ok(code as i32)
            }
        })
        .collect()
}

impl IntModel {
    pub fn input_stage(&self) -> &InputStage {
        match &self.nodes[0] {
            IntNode::Input(s) => s,
            _ => unreachable!("node 0 is the input"),
        }
    }

    /// Layer index of each integer or float layer node, in node order.
    pub fn layer_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n, IntNode::Layer(_) | IntNode::Float(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Every dyadic factor with the exact value it stands for, labelled.
    pub fn scales(&self) -> Vec<(String, DyadicScale, f64)> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            match n {
                IntNode::Layer(l) => {
                    if let Some(r) = &l.requant {
                        out.push((format!("{} requant", l.name), r.scale, r.real));
                    }
                }
                IntNode::Add(a) => {
                    out.push((format!("node {i} align"), a.align, a.align_real / 2f64.powi(a.align_shift as i32)));
                    if let Some(r) = &a.requant {
                        out.push((format!("node {i} requant"), r.scale, r.real));
                    }
                }
                _ => {}
            }
        }
        out
    }
}

/// Runs the integer pipeline on a real input batch `[N, C, H, W]`,
/// quantizing it at the input boundary when the model expects codes.
pub fn int_forward(model: &IntModel, input: &Tensor) -> Result<IntValue> {
    Ok(int_trace(model, input)?.pop().expect("non-empty model"))
}

/// Runs the integer pipeline on already quantized input codes.
pub fn int_forward_codes(model: &IntModel, input: &IntTensor) -> Result<IntValue> {
    Ok(int_trace_codes(model, input)?.pop().expect("non-empty model"))
}

/// Values of every node for a real input batch.
pub fn int_trace(model: &IntModel, input: &Tensor) -> Result<Vec<IntValue>> {
    check_input_shape(model, input.shape())?;
    let first = match model.input_stage() {
        InputStage::Float => IntValue::Real(input.clone()),
        InputStage::Quantize(q) => IntValue::Codes(q.quantize(input)),
    };
    run(model, first)
}

/// Values of every node for quantized input codes.
pub fn int_trace_codes(model: &IntModel, input: &IntTensor) -> Result<Vec<IntValue>> {
    check_input_shape(model, &input.shape)?;
    let InputStage::Quantize(q) = model.input_stage() else {
        return Err(Error::Parameter("model reads a float input, not codes".into()));
    };
    let max = act_levels(q.bits) as i64;
    if let Some(c) = input.codes.iter().find(|c| !(0..=max).contains(*c)) {
        return Err(Error::Parameter(format!("input code {c} outside [0, {max}]")));
    }
    let mut t = input.clone();
    t.scale = q.scale;
    t.code_bits = q.bits + 1;
    run(model, IntValue::Codes(t))
}

fn check_input_shape(model: &IntModel, shape: &[usize]) -> Result<()> {
    let [c, h, w] = model.input_shape;
    if shape.len() != 4 || shape[1..] != [c, h, w] {
        return Err(Error::Dimension(format!("input {shape:?} does not match [N, {c}, {h}, {w}]")));
    }
    Ok(())
}

fn codes_of<'a>(v: &'a IntValue, what: &str) -> Result<&'a IntTensor> {
    match v {
        IntValue::Codes(t) => Ok(t),
        IntValue::Real(_) => Err(Error::Lowering(format!("{what} expects integer codes"))),
    }
}

fn run(model: &IntModel, first: IntValue) -> Result<Vec<IntValue>> {
    let mut vals: Vec<IntValue> = Vec::with_capacity(model.nodes.len());
    vals.push(first);
    for (i, node) in model.nodes.iter().enumerate().skip(1) {
        let v = match node {
            IntNode::Input(_) => return Err(Error::Lowering(format!("node {i}: input after node 0"))),
            IntNode::Layer(l) => {
                let x = codes_of(&vals[l.input], &l.name)?;
                let li = model.layer_nodes().iter().position(|&n| n == i).unwrap_or(i);
                IntValue::Codes(int_layer(l, x, li)?)
            }
            IntNode::Float(f) => float_layer(f, &vals[f.input])?,
            IntNode::MaxPool { input, size } => match &vals[*input] {
                IntValue::Codes(t) => IntValue::Codes(max_pool_codes(t, *size)?),
                IntValue::Real(t) => {
                    let mut g = Graph::new();
                    let x = g.constant(t.clone());
                    let y = g.max_pool2d(x, *size)?;
                    IntValue::Real(g.value(y).clone())
                }
            },
            IntNode::GlobalAvgPool { input } => {
                let x = vals[*input].to_real();
                let [n, c, h, w] = dims4(x.shape())?;
                let data = graph::global_avg_pool_forward(x.data(), n * c, h * w);
                IntValue::Real(Tensor::new(&[n, c], data)?)
            }
            IntNode::Identity { input } => vals[*input].clone(),
            IntNode::Add(a) => {
                let b = codes_of(&vals[a.branch], "residual add")?;
                let s = codes_of(&vals[a.skip], "residual add")?;
                IntValue::Codes(int_add(a, b, s, i)?)
            }
        };
        vals.push(v);
    }
    Ok(vals)
}

fn dims4(s: &[usize]) -> Result<[usize; 4]> {
    match *s {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Dimension(format!("expected a 4-D value, got {s:?}"))),
    }
}

fn overflow(layer: usize, name: &str) -> Error {
    Error::Overflow { layer, node: name.to_string() }
}

fn int_layer(l: &IntLayer, x: &IntTensor, layer_index: usize) -> Result<IntTensor> {
    let out_ch = l.bias_codes.len();
    let (shape, acc) = match l.kind {
        LayerKind::Conv { stride, padding, .. } => {
            let g = ConvGeom::new(&x.shape, &l.kind.weight_shape(), &[out_ch], stride, padding)?;
            let (k, plane) = (g.patch_len(), g.out_plane());
            let in_len = g.c * g.h * g.w;
            let mut out = vec![0i64; g.n * g.o * plane];
            let mut cols = vec![0i64; k * plane];
            for s in 0..g.n {
                g.im2col(&x.codes[s * in_len..(s + 1) * in_len], &mut cols);
                for o in 0..g.o {
                    let orow = &mut out[(s * g.o + o) * plane..(s * g.o + o + 1) * plane];
                    orow.fill(l.bias_codes[o] as i64);
                    for r in 0..k {
                        let wv = l.weight_codes[o * k + r] as i64;
                        if wv == 0 {
                            continue;
                        }
                        for (ov, cv) in orow.iter_mut().zip(&cols[r * plane..(r + 1) * plane]) {
                            *ov = cv
                                .checked_mul(wv)
                                .and_then(|p| ov.checked_add(p))
                                .ok_or_else(|| overflow(layer_index, &l.name))?;
                        }
                    }
                }
            }
            (vec![g.n, g.o, g.oh, g.ow], out)
        }
        LayerKind::Linear { in_features, out_features } => {
            let n = x.codes.len() / in_features;
            if n * in_features != x.codes.len() || x.shape[0] != n {
                return Err(Error::Dimension(format!("{}: input {:?} for {in_features} features", l.name, x.shape)));
            }
            let mut out = vec![0i64; n * out_features];
            for s in 0..n {
                let xs = &x.codes[s * in_features..(s + 1) * in_features];
                for o in 0..out_features {
                    let w = &l.weight_codes[o * in_features..(o + 1) * in_features];
                    let mut a = l.bias_codes[o] as i64;
                    for (xv, wv) in xs.iter().zip(w) {
                        a = xv
                            .checked_mul(*wv as i64)
                            .and_then(|p| a.checked_add(p))
                            .ok_or_else(|| overflow(layer_index, &l.name))?;
                    }
                    out[s * out_features + o] = a;
                }
            }
            (vec![n, out_features], out)
        }
    };
    if l.acc_bits == 32 && acc.iter().any(|a| i32::try_from(*a).is_err()) {
        return Err(overflow(layer_index, &l.name));
    }
    match &l.requant {
        Some(r) => Ok(IntTensor {
            shape,
            codes: acc.iter().map(|&a| r.apply(a)).collect::<Result<_>>()?,
            scale: r.out.scale,
            code_bits: r.out.bits + 1,
        }),
        None => Ok(IntTensor { shape, codes: acc, scale: l.acc_scale, code_bits: l.acc_bits }),
    }
}

fn int_add(a: &IntAdd, b: &IntTensor, s: &IntTensor, node: usize) -> Result<IntTensor> {
    if b.shape != s.shape {
        return Err(Error::Dimension(format!("residual add {:?} + {:?}", b.shape, s.shape)));
    }
    let name = format!("add node {node}");
    let sum = b
        .codes
        .iter()
        .zip(&s.codes)
        .map(|(&bv, &sv)| {
            let shifted = sv.checked_mul(1i64 << a.align_shift).ok_or_else(|| overflow(node, &name))?;
            a.align.apply(shifted)?.checked_add(bv).ok_or_else(|| overflow(node, &name))
        })
        .collect::<Result<Vec<i64>>>()?;
    match &a.requant {
        Some(r) => Ok(IntTensor {
            shape: b.shape.clone(),
            codes: sum.iter().map(|&v| r.apply(v)).collect::<Result<_>>()?,
            scale: r.out.scale,
            code_bits: r.out.bits + 1,
        }),
        None => Ok(IntTensor { shape: b.shape.clone(), codes: sum, scale: a.acc_scale, code_bits: 64 }),
    }
}

fn max_pool_codes(t: &IntTensor, k: usize) -> Result<IntTensor> {
    let [n, c, h, w] = dims4(&t.shape)?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Dimension(format!("max pool {k} on {h}x{w}")));
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let plane = &t.codes[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut m = i64::MIN;
                for di in 0..k {
                    for dj in 0..k {
                        m = m.max(plane[(i * k + di) * w + j * k + dj]);
                    }
                }
                out.push(m);
            }
        }
    }
    Ok(IntTensor { shape: vec![n, c, oh, ow], codes: out, scale: t.scale, code_bits: t.code_bits })
}

fn float_layer(f: &FloatLayer, x: &IntValue) -> Result<IntValue> {
    let x = x.to_real();
    let mut g = Graph::new();
    let w = g.constant(Tensor::new(&f.kind.weight_shape(), f.weight.clone())?);
    let b = g.constant(Tensor::from_vec(f.bias.clone()));
    let xv = g.constant(x);
    let z = match f.kind {
        LayerKind::Conv { stride, padding, .. } => g.conv2d(xv, w, b, stride, padding)?,
        LayerKind::Linear { .. } => {
            let s = g.value(xv).shape().to_vec();
            let xv = if s.len() == 2 { xv } else { g.reshape(xv, &[s[0], s[1..].iter().product()])? };
            g.linear(xv, w, b)?
        }
    };
    let z = g.value(z).clone();
    Ok(match (f.relu, f.out_quant) {
        (true, Some(q)) => IntValue::Codes(q.quantize(&z)),
        (true, None) => IntValue::Real(z.map(|v| v.max(0.0))),
        (false, _) => IntValue::Real(z),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, LayerDesc};
    use crate::qat::{final_modes, LayerMode};

    /// One 1x1 conv from 1 channel to 1 channel with a ReLU, reading a
    /// quantized input.
    fn single_conv(w: f64, b: f64) -> Model {
        let arch = Arch {
            name: "single".into(),
            task: Task::Regression,
            input_shape: [1, 1, 1],
            input_bits: 8,
            layers: vec![LayerDesc {
                name: "conv".into(),
                kind: LayerKind::Conv { in_ch: 1, out_ch: 1, kernel: 1, stride: 1, padding: 0 },
                batch_norm: false,
            }],
            nodes: vec![NodeDesc::Input, NodeDesc::Layer { layer: 0, input: 0, relu: true }],
        };
        let mut m = Model::new(arch, 0).unwrap();
        m.layers[0].weight.data_mut()[0] = w;
        m.layers[0].bias.data_mut()[0] = b;
        m
    }

    #[test]
    fn weight_codes_at_the_clamp() {
        let mut m = single_conv(1.0, 0.0);
        m.weight_clamps = vec![Some(1.0)];
        m.act_clamps = vec![Some(1.0), Some(1.0)];
        let spec = QuantSpec::new(3, 4, 16).unwrap();
        for (w, code) in [(-1.0, -3), (0.0, 0), (1.0, 3)] {
            m.layers[0].weight.data_mut()[0] = w;
            let im = lower(&m, &spec, false).unwrap();
            let IntNode::Layer(l) = &im.nodes[1] else { panic!() };
            assert_eq!(l.weight_codes, vec![code]);
            assert_eq!(l.bias_codes, vec![0]);
        }
    }

    #[test]
    fn hand_traced_single_multiply() {
        // input scale 1/255, weight scale 0.5/7, bias scale = their product
        let mut m = single_conv(0.3, 0.01);
        m.weight_clamps = vec![Some(0.5)];
        m.act_clamps = vec![Some(1.0), Some(0.2)];
        let spec = QuantSpec::new(4, 4, 16).unwrap();
        let im = lower(&m, &spec, false).unwrap();
        let IntNode::Layer(l) = &im.nodes[1] else { panic!() };
        let sa: f64 = 1.0 / 255.0;
        let sw: f64 = 0.5 / 7.0;
        assert_eq!(l.weight_codes, vec![(0.3 / sw).round() as i32]); // 4
        let b_code = (0.01 / (sa * sw)).round() as i64; // 36
        assert_eq!(l.bias_codes, vec![b_code as i32]);
        let acc = 4 * 10 + b_code;
        let r = l.requant.unwrap();
        let expected = r.scale.apply(acc).unwrap().clamp(0, 15);

        let input = IntTensor::new(vec![1, 1, 1, 1], vec![10], sa, 9).unwrap();
        let out = int_forward_codes(&im, &input).unwrap();
        let IntValue::Codes(out) = out else { panic!() };
        assert_eq!(out.codes, vec![expected]);

        // the float fake-quant path lands on the same code
        let modes = final_modes(&m, false);
        let y = m
            .predict(Tensor::new(&[1, 1, 1, 1], vec![10.0 * sa]).unwrap(), &modes, &[false], &spec)
            .unwrap();
        assert_eq!((y.data()[0] / (0.2 / 15.0)).round() as i64, expected);
    }

    #[test]
    fn zero_input_gives_bias_response() {
        let mut m = Model::new(Arch::denoise_skip(4, 6), 3).unwrap();
        m.weight_clamps = vec![Some(0.5); 3];
        m.act_clamps = vec![Some(1.0), Some(0.8), Some(0.6)];
        for l in &mut m.layers {
            for (i, b) in l.bias.data_mut().iter_mut().enumerate() {
                *b = 0.01 * i as f64;
            }
        }
        let spec = QuantSpec::new(4, 8, 16).unwrap();
        let im = lower(&m, &spec, false).unwrap();
        let x = Tensor::zeros(&[1, 3, 6, 6]);
        let int = int_forward(&im, &x).unwrap().to_real();
        let fq = m.predict(x, &final_modes(&m, false), &[false; 3], &spec).unwrap();
        let acc_scale = match &im.nodes[5] {
            IntNode::Add(a) => a.acc_scale,
            _ => panic!(),
        };
        for (a, b) in int.data().iter().zip(fq.data()) {
            assert!((a - b).abs() <= acc_scale * 1.5, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_conv_with_unit_scales() {
        // weight scale 1 and activation scale 1 give an identity rescale
        let mut m = single_conv(1.0, 0.0);
        m.weight_clamps = vec![Some(7.0)];
        m.act_clamps = vec![Some(255.0), Some(255.0)];
        let spec = QuantSpec::new(4, 8, 16).unwrap();
        let im = lower(&m, &spec, false).unwrap();
        let IntNode::Layer(l) = &im.nodes[1] else { panic!() };
        assert_eq!(l.requant.unwrap().scale, DyadicScale { q: 1, p: 0 });
        let codes: Vec<i64> = vec![0, 1, 77, 255];
        let input = IntTensor::new(vec![4, 1, 1, 1], codes.clone(), 1.0, 9).unwrap();
        let IntValue::Codes(out) = int_forward_codes(&im, &input).unwrap() else { panic!() };
        assert_eq!(out.codes, codes);
    }

    #[test]
    fn lowering_requires_folded_and_calibrated() {
        let m = Model::new(Arch::mini_resnet(2), 0).unwrap();
        assert!(matches!(lower(&m, &QuantSpec::default(), true), Err(Error::Lowering(_))));
        let mut m = m;
        m.fold_batch_norm();
        assert!(matches!(lower(&m, &QuantSpec::default(), true), Err(Error::Lowering(_))));
    }

    #[test]
    fn overflow_is_reported_not_wrapped() {
        let mut m = single_conv(1.0, 0.0);
        m.weight_clamps = vec![Some(1.0)];
        m.act_clamps = vec![Some(1.0), Some(1.0)];
        let spec = QuantSpec::new(4, 8, 16).unwrap();
        let mut im = lower(&m, &spec, false).unwrap();
        let IntNode::Layer(l) = &mut im.nodes[1] else { panic!() };
        l.weight_codes = vec![i32::MAX];
        let input = IntTensor::new(vec![1, 1, 1, 1], vec![255], 1.0 / 255.0, 9).unwrap();
        match int_forward_codes(&im, &input) {
            Err(Error::Overflow { layer, node }) => {
                assert_eq!(layer, 0);
                assert_eq!(node, "conv");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_input_codes_rejected() {
        let mut m = single_conv(1.0, 0.0);
        m.weight_clamps = vec![Some(1.0)];
        m.act_clamps = vec![Some(1.0), Some(1.0)];
        let im = lower(&m, &QuantSpec::new(4, 8, 16).unwrap(), false).unwrap();
        let bad = IntTensor { shape: vec![1, 1, 1, 1], codes: vec![256], scale: 1.0, code_bits: 10 };
        assert!(int_forward_codes(&im, &bad).is_err());
    }

    #[test]
    fn pinned_layers_run_in_float() {
        let mut m = Model::new(Arch::mini_resnet(2), 4).unwrap();
        m.fold_batch_norm();
        m.weight_clamps = vec![Some(0.5); 6];
        m.act_clamps = vec![Some(1.0), Some(1.5), Some(1.2), Some(1.1), Some(1.0), Some(0.9)];
        let im = lower(&m, &QuantSpec::default(), true).unwrap();
        assert!(matches!(im.nodes[0], IntNode::Input(InputStage::Float)));
        assert!(matches!(im.nodes[1], IntNode::Float(FloatLayer { out_quant: Some(_), .. })));
        assert!(matches!(im.nodes[9], IntNode::Float(FloatLayer { out_quant: None, .. })));
        let modes = final_modes(&m, true);
        assert_eq!(modes[0], LayerMode::FullPrecision);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut m = Model::new(Arch::mini_resnet(2), 4).unwrap();
        m.fold_batch_norm();
        m.weight_clamps = vec![Some(0.5); 6];
        m.act_clamps = vec![Some(1.0), Some(1.5), Some(1.2), Some(1.1), Some(1.0), Some(0.9)];
        let im = lower(&m, &QuantSpec::default(), true).unwrap();
        let x = Tensor::full(&[2, 3, 32, 32], 0.4);
        assert_eq!(int_forward(&im, &x).unwrap(), int_forward(&im, &x).unwrap());
    }
}
