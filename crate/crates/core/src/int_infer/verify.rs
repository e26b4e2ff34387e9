use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{decompose_scale, int_trace, IntModel, IntNode, IntValue, InputStage};
use crate::data::{argmax, BatchTargets, Dataset, Targets};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::qat::final_modes;
use crate::quant::{act_levels, QuantSpec};

/// Unit a node's deviation is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DevUnit {
    /// Codes of a quantized activation.
    Activation,
    /// Integers at an accumulator scale (a layer or sum that is not
    /// requantized, such as a residual branch before its add).
    Accumulator,
    Real,
}

impl DevUnit {
    pub fn name(self) -> &'static str {
        match self {
            DevUnit::Activation => "codes",
            DevUnit::Accumulator => "acc",
            DevUnit::Real => "real",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeReport {
    pub node: usize,
    pub label: String,
    pub unit: DevUnit,
    /// Deviation of the integer value from the float path run end to end,
    /// so upstream deviations propagate.
    pub max_dev: f64,
    /// Deviation when the float node reads the integer model's own inputs:
    /// the error this node adds.
    pub local_dev: f64,
    /// Count of elements per rounded absolute code deviation.
    pub histogram: BTreeMap<u64, u64>,
    /// Interval-arithmetic bound on the deviation.
    pub bound: f64,
}

impl NodeReport {
    pub fn within_bound(&self) -> bool {
        self.max_dev <= self.bound + 1e-9
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub nodes: Vec<NodeReport>,
    /// Percentage of samples whose argmax class agrees (classification).
    pub argmax_agreement: Option<f64>,
    pub metric_float: f64,
    pub metric_int: f64,
    /// Stored dyadic pairs that are not the best approximation of their
    /// exact factor.
    pub scale_flags: Vec<String>,
}

impl EquivalenceReport {
    pub fn metric_delta(&self) -> f64 {
        self.metric_int - self.metric_float
    }

    /// Largest per-node code deviation over quantized activations.
    pub fn max_code_dev(&self) -> f64 {
        self.activations().map(|n| n.local_dev).fold(0.0, f64::max)
    }

    /// Largest end-to-end code deviation over quantized activations.
    pub fn max_propagated_code_dev(&self) -> f64 {
        self.activations().map(|n| n.max_dev).fold(0.0, f64::max)
    }

    fn activations(&self) -> impl Iterator<Item = &NodeReport> {
        self.nodes.iter().filter(|n| n.unit == DevUnit::Activation)
    }

    pub fn nonzero_nodes(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.max_dev > 0.0).map(|n| n.node).collect()
    }

    pub fn flagged(&self) -> bool {
        !self.scale_flags.is_empty() || !self.nonzero_nodes().is_empty() || self.nodes.iter().any(|n| !n.within_bound())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("node\tlabel\tunit\tlocal_dev\tmax_dev\tbound\thistogram\n");
        for n in &self.nodes {
            let hist: Vec<String> = n.histogram.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{}",
                n.node,
                n.label,
                n.unit.name(),
                n.local_dev,
                n.max_dev,
                n.bound,
                hist.join(",")
            );
        }
        let _ = writeln!(s, "# samples\t{}", self.samples);
        if let Some(a) = self.argmax_agreement {
            let _ = writeln!(s, "# argmax_agreement\t{a:?}");
        }
        let _ = writeln!(s, "# metric_float\t{:?}\n# metric_int\t{:?}\n# metric_delta\t{:?}", self.metric_float, self.metric_int, self.metric_delta());
        for f in &self.scale_flags {
            let _ = writeln!(s, "# scale_flag\t{f}");
        }
        s
    }
}

fn is_dyadic(s: f64) -> bool {
    decompose_scale(s).is_ok_and(|d| d.value() == s)
}

/// Code bound after rounding a value known to within `delta`.
fn rounded(delta: f64) -> f64 {
    if delta == 0.0 {
        0.0
    } else {
        delta.floor() + 1.0
    }
}

/// Static per-node bounds: deviation bound and magnitude bound, both in the
/// node's own units.
fn static_bounds(im: &IntModel) -> (Vec<f64>, Vec<f64>) {
    let n = im.nodes.len();
    let mut dev = vec![0.0; n];
    let mut mag = vec![0.0; n];
    // scale of integer-valued nodes, for converting deviations into reals
    let mut scale: Vec<Option<f64>> = vec![None; n];
    for (i, node) in im.nodes.iter().enumerate() {
        match node {
            IntNode::Input(InputStage::Float) => {}
            IntNode::Input(InputStage::Quantize(q)) => {
                mag[i] = act_levels(q.bits);
                scale[i] = Some(q.scale);
            }
            IntNode::Layer(l) => {
                let fan = l.weight_codes.len() / l.bias_codes.len();
                let rows = (0..l.bias_codes.len()).map(|o| &l.weight_codes[o * fan..(o + 1) * fan]);
                let w1 = rows.clone().map(|r| r.iter().map(|w| (*w as f64).abs()).sum::<f64>()).fold(0.0, f64::max);
                let acc_mag = rows
                    .zip(&l.bias_codes)
                    .map(|(r, b)| r.iter().map(|w| (*w as f64).abs()).sum::<f64>() * act_levels(l.in_bits) + (*b as f64).abs())
                    .fold(0.0, f64::max);
                let acc_dev = w1 * dev[l.input];
                match &l.requant {
                    Some(r) => {
                        let m_hat = r.scale.value();
                        let mut delta = m_hat * acc_dev + (m_hat - r.real).abs() * acc_mag;
                        let exact = [l.in_scale, l.w_scale, r.out.scale].into_iter().all(is_dyadic);
                        if !exact {
                            delta += acc_mag * r.real * 2f64.powi(-40);
                        }
                        dev[i] = rounded(delta);
                        mag[i] = act_levels(r.out.bits);
                        scale[i] = Some(r.out.scale);
                    }
                    None => {
                        dev[i] = acc_dev;
                        mag[i] = acc_mag;
                        scale[i] = Some(l.acc_scale);
                    }
                }
            }
            IntNode::Float(f) => {
                let r_in = scale[f.input].map_or(dev[f.input], |s| dev[f.input] * s);
                let out_ch = f.bias.len();
                let fan = f.weight.len() / out_ch;
                let w1 = (0..out_ch)
                    .map(|o| f.weight[o * fan..(o + 1) * fan].iter().map(|w| w.abs()).sum::<f64>())
                    .fold(0.0, f64::max);
                let r = w1 * r_in;
                match f.out_quant {
                    Some(q) => {
                        dev[i] = rounded(r / q.scale);
                        mag[i] = act_levels(q.bits);
                        scale[i] = Some(q.scale);
                    }
                    None => dev[i] = r,
                }
            }
            IntNode::MaxPool { input, .. } | IntNode::Identity { input } => {
                dev[i] = dev[*input];
                mag[i] = mag[*input];
                scale[i] = scale[*input];
            }
            IntNode::GlobalAvgPool { input } => {
                dev[i] = scale[*input].map_or(dev[*input], |s| dev[*input] * s);
            }
            IntNode::Add(a) => {
                let k = 2f64.powi(a.align_shift as i32);
                let r_hat = a.align.value() * k;
                let exact_align = a.align.p == 0 || r_hat == a.align_real && r_hat.fract() == 0.0;
                let align_dev = dev[a.skip] * r_hat
                    + (r_hat - a.align_real).abs() * mag[a.skip]
                    + if exact_align { 0.0 } else { 0.5 };
                let sum_dev = dev[a.branch] + align_dev;
                let sum_mag = mag[a.branch] + mag[a.skip] * a.align_real;
                match &a.requant {
                    Some(r) => {
                        let m_hat = r.scale.value();
                        let mut delta = m_hat * sum_dev + (m_hat - r.real).abs() * sum_mag;
                        if !is_dyadic(r.real) || !is_dyadic(a.acc_scale) || !is_dyadic(r.out.scale) {
                            delta += sum_mag * r.real * 2f64.powi(-40);
                        }
                        dev[i] = rounded(delta);
                        mag[i] = act_levels(r.out.bits);
                        scale[i] = Some(r.out.scale);
                    }
                    None => {
                        dev[i] = sum_dev;
                        mag[i] = sum_mag;
                        scale[i] = Some(a.acc_scale);
                    }
                }
            }
        }
    }
    (dev, mag)
}

/// Whether an integer node holds quantized activation codes rather than an
/// accumulator.
fn is_activation(im: &IntModel, i: usize) -> bool {
    match &im.nodes[i] {
        IntNode::Input(InputStage::Quantize(_)) => true,
        IntNode::Input(InputStage::Float) | IntNode::GlobalAvgPool { .. } => false,
        IntNode::Layer(l) => l.requant.is_some(),
        IntNode::Float(f) => f.out_quant.is_some(),
        IntNode::Add(a) => a.requant.is_some(),
        IntNode::MaxPool { input, .. } | IntNode::Identity { input } => is_activation(im, *input),
    }
}

fn label(im: &IntModel, i: usize) -> String {
    match &im.nodes[i] {
        IntNode::Input(_) => "input".into(),
        IntNode::Layer(l) => l.name.clone(),
        IntNode::Float(f) => format!("{} (float)", f.name),
        IntNode::MaxPool { .. } => "maxpool".into(),
        IntNode::GlobalAvgPool { .. } => "avgpool".into(),
        IntNode::Add(_) => "add".into(),
        IntNode::Identity { .. } => "identity".into(),
    }
}

/// Runs the fake-quant float model and the integer model on `data` and
/// compares every node.
pub fn verify_equivalence(
    model: &Model,
    int_model: &IntModel,
    spec: &QuantSpec,
    skip_first_last: bool,
    data: &Dataset,
) -> Result<EquivalenceReport> {
    if model.arch.nodes.len() != int_model.nodes.len() {
        return Err(Error::Lowering("integer model topology differs from the float model".into()));
    }
    let modes = final_modes(model, skip_first_last);
    let pinned = model.arch.pinned_layers(skip_first_last);
    let (bounds, _) = static_bounds(int_model);
    let mut reports: Vec<NodeReport> = (0..int_model.nodes.len())
        .map(|i| NodeReport {
            node: i,
            label: label(int_model, i),
            unit: DevUnit::Real,
            max_dev: 0.0,
            local_dev: 0.0,
            histogram: BTreeMap::new(),
            bound: bounds[i],
        })
        .collect();

    let mut agree = 0usize;
    let (mut correct_f, mut correct_i) = (0usize, 0usize);
    let (mut sq_f, mut sq_i, mut count) = (0.0, 0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(100) {
        let (x, y) = data.batch(chunk)?;
        let fl = model.eval_nodes(x.clone(), &modes, &pinned, spec)?;
        let it = int_trace(int_model, &x)?;
        let reals: Vec<_> = it.iter().map(IntValue::to_real).collect();
        let local = model.eval_nodes_local(x.clone(), &reals, &modes, &pinned, spec)?;
        for (i, ((f, v), lf)) in fl.iter().zip(&it).zip(&local).enumerate() {
            if f.shape() != v.shape() {
                return Err(Error::Lowering(format!("node {i}: shape {:?} vs {:?}", v.shape(), f.shape())));
            }
            let r = &mut reports[i];
            match v {
                IntValue::Codes(t) => {
                    let act = is_activation(int_model, i);
                    r.unit = if act { DevUnit::Activation } else { DevUnit::Accumulator };
                    // float activations sit on the code grid up to rounding noise
                    let code = |v: f64| if act { (v / t.scale).round() } else { v / t.scale };
                    for ((c, fv), lv) in t.codes.iter().zip(f.data()).zip(lf.data()) {
                        let d = (*c as f64 - code(*fv)).abs();
                        r.max_dev = r.max_dev.max(d);
                        r.local_dev = r.local_dev.max((*c as f64 - code(*lv)).abs());
                        *r.histogram.entry(d.round() as u64).or_insert(0) += 1;
                    }
                }
                IntValue::Real(t) => {
                    for ((a, b), l) in t.data().iter().zip(f.data()).zip(lf.data()) {
                        r.max_dev = r.max_dev.max((a - b).abs());
                        r.local_dev = r.local_dev.max((a - l).abs());
                    }
                }
            }
        }
        let out_f = fl.last().expect("non-empty");
        let out_i = it.last().expect("non-empty").to_real();
        match y {
            BatchTargets::Labels(l) => {
                let k = out_f.shape()[1];
                for ((rf, ri), lab) in out_f.data().chunks_exact(k).zip(out_i.data().chunks_exact(k)).zip(&l) {
                    let (af, ai) = (argmax(rf), argmax(ri));
                    agree += usize::from(af == ai);
                    correct_f += usize::from(af == *lab);
                    correct_i += usize::from(ai == *lab);
                }
            }
            BatchTargets::Images(t) => {
                let se = |p: &[f64]| p.iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                sq_f += se(out_f.data());
                sq_i += se(out_i.data());
                count += t.len();
            }
        }
    }
    let n = data.len();
    let classification = matches!(data.targets, Targets::Labels(_));
    let (metric_float, metric_int) = if classification {
        (100.0 * correct_f as f64 / n as f64, 100.0 * correct_i as f64 / n as f64)
    } else {
        let c = count as f64;
        (10.0 * (c / sq_f).log10(), 10.0 * (c / sq_i).log10())
    };

    let mut scale_flags = Vec::new();
    for (name, stored, real) in int_model.scales() {
        match decompose_scale(real) {
            Ok(best) if best == stored => {}
            Ok(best) => scale_flags.push(format!(
                "{name}: stored ({}, {}) but best for {real:e} is ({}, {})",
                stored.q, stored.p, best.q, best.p
            )),
            Err(e) => scale_flags.push(format!("{name}: {e}")),
        }
    }
    Ok(EquivalenceReport {
        samples: n,
        nodes: reports,
        argmax_agreement: classification.then(|| 100.0 * agree as f64 / n as f64),
        metric_float,
        metric_int,
        scale_flags,
    })
}
