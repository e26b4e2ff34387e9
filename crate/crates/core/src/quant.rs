//! Pointwise quantization math: clamping, uniform quantizers for weights,
//! activations and biases, statistics-based clamp initialization, and
//! Bernoulli-masked uniform noise injection.
//!
//! Weights and biases use a symmetric grid with `2^(B-1) - 1` positive
//! levels; activations use an unsigned grid `{0, 1, ..., 2^B - 1}` times the
//! activation scale. Rounding is half away from zero everywhere, matching the
//! integer path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{mean_std, Tensor};

pub const DEFAULT_MASK_PROB: f64 = 0.05;
pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_BETA: f64 = 3.0;

/// Per-model quantization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSpec {
    pub bits_w: u32,
    pub bits_a: u32,
    pub bits_b: u32,
    pub alpha: f64,
    pub beta: f64,
    pub mask_prob: f64,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            bits_w: 4,
            bits_a: 4,
            bits_b: 16,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            mask_prob: DEFAULT_MASK_PROB,
        }
    }
}

impl QuantSpec {
    pub fn new(bits_w: u32, bits_a: u32, bits_b: u32) -> Result<Self> {
        let spec = Self {
            bits_w,
            bits_a,
            bits_b,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_weight_bits(self.bits_w)?;
        check_act_bits(self.bits_a)?;
        if !(2..=32).contains(&self.bits_b) {
            return Err(Error::Parameter(format!(
                "bias bitwidth {} outside [2, 32]",
                self.bits_b
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Parameter(format!(
                "mask probability {} outside [0, 1]",
                self.mask_prob
            )));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Parameter("alpha and beta must be finite".into()));
        }
        Ok(())
    }
}

fn check_weight_bits(bits: u32) -> Result<()> {
    if (2..=16).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("weight bitwidth {bits} outside [2, 16]")))
    }
}

fn check_act_bits(bits: u32) -> Result<()> {
    if (1..=16).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("activation bitwidth {bits} outside [1, 16]")))
    }
}

fn check_clamp(c: f64) -> Result<()> {
    if c > 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("clamp value must be positive, got {c}")))
    }
}

/// Per-layer clamp values. `c_a` is the clamp of the activation feeding the
/// layer, which together with `c_w` fixes the accumulator grid that `c_b`
/// is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampParams {
    pub c_w: f64,
    pub c_a: f64,
    pub c_b: f64,
}

impl ClampParams {
    /// Builds the triple with `c_b` from the bias-clamp formula. `bits_in` is
    /// the bitwidth of the layer's input activation.
    pub fn new(c_w: f64, c_a: f64, bits_in: u32, spec: &QuantSpec) -> Result<Self> {
        check_clamp(c_w)?;
        check_clamp(c_a)?;
        let c_b = bias_clamp(c_a, c_w, bits_in, spec.bits_w, spec.bits_b)?;
        Ok(Self { c_w, c_a, c_b })
    }

    /// Recomputes `c_b` after `c_a` moved.
    pub fn update_act_clamp(&mut self, c_a: f64, bits_in: u32, spec: &QuantSpec) -> Result<()> {
        *self = Self::new(self.c_w, c_a, bits_in, spec)?;
        Ok(())
    }
}

/// `2^(B-1) - 1`, the largest symmetric code.
pub fn weight_levels(bits: u32) -> f64 {
    ((1u64 << (bits - 1)) - 1) as f64
}

/// `2^B - 1`, the largest unsigned activation code.
pub fn act_levels(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

pub fn clamp_sym(w: &Tensor, c: f64) -> Result<Tensor> {
    check_clamp(c)?;
    Ok(w.map(|v| v.clamp(-c, c)))
}

/// Bin size of the symmetric weight grid.
pub fn weight_delta(c_w: f64, bits: u32) -> Result<f64> {
    check_weight_bits(bits)?;
    check_clamp(c_w)?;
    Ok(c_w / weight_levels(bits))
}

/// Bin size of the unsigned activation grid.
pub fn act_delta(c_a: f64, bits: u32) -> Result<f64> {
    check_act_bits(bits)?;
    check_clamp(c_a)?;
    Ok(c_a / act_levels(bits))
}

#[inline]
pub(crate) fn quantize_sym_value(w: f64, c: f64, scale: f64) -> f64 {
    (w.clamp(-c, c) / scale).round() * scale
}

#[inline]
pub(crate) fn quantize_unsigned_value(a: f64, c: f64, scale: f64) -> f64 {
    (a.clamp(0.0, c) / scale).round() * scale
}

pub fn quantize_weights(w: &Tensor, c_w: f64, bits: u32) -> Result<Tensor> {
    let scale = weight_delta(c_w, bits)?;
    Ok(w.map(|v| quantize_sym_value(v, c_w, scale)))
}

/// Symmetric quantization for biases, identical to weights but allowing up
/// to 32 bits.
pub fn quantize_bias(b: &Tensor, c_b: f64, bits: u32) -> Result<Tensor> {
    if !(2..=32).contains(&bits) {
        return Err(Error::Parameter(format!("bias bitwidth {bits} outside [2, 32]")));
    }
    check_clamp(c_b)?;
    let scale = c_b / weight_levels(bits);
    Ok(b.map(|v| quantize_sym_value(v, c_b, scale)))
}

pub fn quantize_activations(a: &Tensor, c_a: f64, bits: u32) -> Result<Tensor> {
    let scale = act_delta(c_a, bits)?;
    Ok(a.map(|v| quantize_unsigned_value(v, c_a, scale)))
}

/// Largest representable bias: activation scale times weight scale times
/// the largest bias code.
pub fn bias_clamp(c_a: f64, c_w: f64, bits_a: u32, bits_w: u32, bits_b: u32) -> Result<f64> {
    check_act_bits(bits_a)?;
    check_weight_bits(bits_w)?;
    if !(2..=32).contains(&bits_b) {
        return Err(Error::Parameter(format!("bias bitwidth {bits_b} outside [2, 32]")));
    }
    check_clamp(c_a)?;
    check_clamp(c_w)?;
    Ok((c_a / act_levels(bits_a)) * (c_w / weight_levels(bits_w)) * weight_levels(bits_b))
}

/// `mean(w) + beta * std(w)` over all elements.
pub fn init_weight_clamp(w: &Tensor, beta: f64) -> Result<f64> {
    stat_clamp(w.data(), beta, "weight")
}

/// `mean(a) + alpha * std(a)` over collected pre-clamp activations.
pub fn init_act_clamp(samples: &Tensor, alpha: f64) -> Result<f64> {
    stat_clamp(samples.data(), alpha, "activation")
}

fn stat_clamp(xs: &[f64], k: f64, what: &str) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Initialization(format!("empty {what} sample")));
    }
    let (mean, std) = mean_std(xs);
    clamp_from_stats(mean, std, k, what)
}

pub(crate) fn clamp_from_stats(mean: f64, std: f64, k: f64, what: &str) -> Result<f64> {
    let c = mean + k * std;
    if c > 0.0 && c.is_finite() {
        Ok(c)
    } else {
        Err(Error::Initialization(format!(
            "{what} clamp mean {mean} + {k} * std {std} = {c} is not positive"
        )))
    }
}

/// Output of [`inject_noise_masked`]: the perturbed values and which
/// elements took the noisy branch.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

/// `(1 - M) Q(w) + M (w - e)` with `M ~ Ber(mask_prob)` and
/// `e ~ U(-delta/2, delta/2)`, drawing fresh mask and noise from `rng`.
pub fn inject_noise_masked<R: Rng>(
    w: &Tensor,
    c: f64,
    levels: f64,
    mask_prob: f64,
    rng: &mut R,
) -> Result<NoiseDraw> {
    check_clamp(c)?;
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::Parameter(format!("mask probability {mask_prob} outside [0, 1]")));
    }
    let delta = c / levels;
    let mut mask = Vec::with_capacity(w.len());
    let values = w
        .data()
        .iter()
        .map(|&v| {
            let m = mask_prob > 0.0 && rng.random::<f64>() < mask_prob;
            mask.push(m);
            if m {
                v - (rng.random::<f64>() - 0.5) * delta
            } else {
                quantize_sym_value(v, c, delta)
            }
        })
        .collect();
    Ok(NoiseDraw {
        values: Tensor::new(w.shape(), values)?,
        mask,
    })
}

pub fn inject_noise<R: Rng>(
    w: &Tensor,
    c_w: f64,
    bits: u32,
    mask_prob: f64,
    rng: &mut R,
) -> Result<Tensor> {
    check_weight_bits(bits)?;
    Ok(inject_noise_masked(w, c_w, weight_levels(bits), mask_prob, rng)?.values)
}

/// [`inject_noise`] with a fresh ChaCha8 stream seeded from `seed`.
pub fn inject_noise_seeded(
    w: &Tensor,
    c_w: f64,
    bits: u32,
    mask_prob: f64,
    seed: u64,
) -> Result<Tensor> {
    inject_noise(w, c_w, bits, mask_prob, &mut ChaCha8Rng::seed_from_u64(seed))
}

// -------------------------------------------------------------------------
// Straight-through training ops
// -------------------------------------------------------------------------

/// Pass-through inside `[-c, c]`, zero outside.
fn sym_pass_mask(w: &[f64], grad: &[f64], c: f64) -> Vec<f64> {
    w.iter()
        .zip(grad)
        .map(|(&v, &g)| if (-c..=c).contains(&v) { g } else { 0.0 })
        .collect()
}

/// Fake-quantized weights (or biases, with `levels = 2^(B_b-1)-1`).
pub fn ste_quantize_sym(g: &mut Graph, w: Var, c: f64, levels: f64) -> Result<Var> {
    check_clamp(c)?;
    let scale = c / levels;
    Ok(g.custom_grad(
        &[w],
        |ins| ins[0].map(|v| quantize_sym_value(v, c, scale)),
        move |ctx| vec![Some(sym_pass_mask(ctx.inputs[0].data(), ctx.grad, c))],
    ))
}

/// Noise-injected weights. Noisy elements pass the gradient through
/// unchanged; quantized elements use the clamp pass-through mask.
pub fn ste_noisy_sym<R: Rng>(
    g: &mut Graph,
    w: Var,
    c: f64,
    levels: f64,
    mask_prob: f64,
    rng: &mut R,
) -> Result<Var> {
    let draw = inject_noise_masked(g.value(w), c, levels, mask_prob, rng)?;
    let mask = draw.mask;
    Ok(g.record(&[w], draw.values, move |ctx| {
        let g = ctx
            .inputs[0]
            .data()
            .iter()
            .zip(ctx.grad)
            .zip(&mask)
            .map(|((&v, &g), &m)| if m || (-c..=c).contains(&v) { g } else { 0.0 })
            .collect();
        vec![Some(g)]
    }))
}

/// Clamped ReLU `clamp(a, 0, c_a)`, optionally followed by uniform
/// quantization to `bits`. `c_a` is a scalar node so it can be learned.
///
/// Backward: `d/da` is 1 on `[0, c_a]` and 0 elsewhere; `d/dc_a` is 1 where
/// `a > c_a` and 0 elsewhere, summed over the tensor. Rounding is treated as
/// identity.
pub fn clamp_activation(g: &mut Graph, a: Var, c_a: Var, bits: u32, quantize: bool) -> Result<Var> {
    check_act_bits(bits)?;
    if g.value(c_a).len() != 1 {
        return Err(Error::Dimension("activation clamp must be a scalar".into()));
    }
    let c = g.value(c_a).data()[0];
    check_clamp(c)?;
    let scale = c / act_levels(bits);
    Ok(g.custom_grad(
        &[a, c_a],
        |ins| {
            if quantize {
                ins[0].map(|v| quantize_unsigned_value(v, c, scale))
            } else {
                ins[0].map(|v| v.clamp(0.0, c))
            }
        },
        move |ctx| {
            let a = ctx.inputs[0].data();
            let mut dc = 0.0;
            let da = a
                .iter()
                .zip(ctx.grad)
                .map(|(&v, &g)| {
                    if v > c {
                        dc += g;
                        0.0
                    } else if v >= 0.0 {
                        g
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![Some(da), Some(vec![dc])]
        },
    ))
}
