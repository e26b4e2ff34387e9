//! Quantization-aware training: the gradual schedule, calibration, the
//! optimizers, and the training loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{accuracy, BatchTargets, Dataset, Targets};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{MetricsLog, MetricsRow};
use crate::model::{ForwardConfig, Model, NodeDesc, Task};
use crate::quant::{self, ClampParams, QuantSpec};
use crate::tensor::Tensor;

/// Smallest value an activation clamp may take after an update.
pub const MIN_ACT_CLAMP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerMode {
    FullPrecision,
    Noisy,
    Quantized,
}

impl LayerMode {
    pub fn letter(self) -> char {
        match self {
            LayerMode::FullPrecision => 'F',
            LayerMode::Noisy => 'N',
            LayerMode::Quantized => 'Q',
        }
    }
}

pub fn modes_string(modes: &[LayerMode]) -> String {
    modes.iter().map(|m| m.letter()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradualSchedule {
    /// Contiguous blocks of layer indices, in network order.
    pub blocks: Vec<Vec<usize>>,
    /// `0..=N`; `N` means every block is quantized.
    pub current_stage: usize,
    pub epochs_per_stage: usize,
    /// Total layer count of the model, pinned layers included.
    pub num_layers: usize,
}

impl GradualSchedule {
    pub fn num_stages(&self) -> usize {
        self.blocks.len()
    }

    /// Stage in effect during 0-based training epoch `epoch`.
    pub fn stage_at_epoch(&self, epoch: usize) -> usize {
        (epoch / self.epochs_per_stage).min(self.num_stages())
    }

    pub fn set_stage(&mut self, stage: usize) -> Result<()> {
        if stage > self.num_stages() {
            return Err(Error::Config(format!("stage {stage} beyond {}", self.num_stages())));
        }
        self.current_stage = stage;
        Ok(())
    }
}

/// Splits `layers` into `n` contiguous blocks whose sizes differ by at most
/// one, larger blocks first.
pub fn split_blocks(layers: &[usize], n: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || n > layers.len() {
        return Err(Error::Config(format!(
            "cannot split {} quantizable layers into {n} blocks",
            layers.len()
        )));
    }
    let (base, extra) = (layers.len() / n, layers.len() % n);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for b in 0..n {
        let size = base + usize::from(b < extra);
        out.push(layers[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

/// Builds the schedule over the unpinned layers of `model`; `n` defaults to
/// one block per quantizable layer.
pub fn build_schedule(
    model: &Model,
    pinned: &[bool],
    n: Option<usize>,
    epochs_per_stage: usize,
) -> Result<GradualSchedule> {
    if epochs_per_stage == 0 {
        return Err(Error::Config("epochs_per_stage must be positive".into()));
    }
    if pinned.len() != model.num_layers() {
        return Err(Error::Config("pin table does not match layer count".into()));
    }
    let layers: Vec<usize> = (0..model.num_layers()).filter(|&l| !pinned[l]).collect();
    let n = n.unwrap_or(layers.len());
    Ok(GradualSchedule {
        blocks: split_blocks(&layers, n)?,
        current_stage: 0,
        epochs_per_stage,
        num_layers: model.num_layers(),
    })
}

/// Mode of every layer at the schedule's current stage. Layers outside all
/// blocks (the pinned ones) stay full precision.
pub fn apply_stage(schedule: &GradualSchedule) -> Vec<LayerMode> {
    let mut modes = vec![LayerMode::FullPrecision; schedule.num_layers];
    for (b, block) in schedule.blocks.iter().enumerate() {
        let m = match b.cmp(&schedule.current_stage) {
            std::cmp::Ordering::Less => LayerMode::Quantized,
            std::cmp::Ordering::Equal => LayerMode::Noisy,
            std::cmp::Ordering::Greater => LayerMode::FullPrecision,
        };
        for &l in block {
            modes[l] = m;
        }
    }
    modes
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Serialized as a flat table, `kind = "sgd" | "adam"` plus the fields of
/// that kind and the shared ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawOptimizer", into = "RawOptimizer")]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Applied to conv and linear weights only.
    pub weight_decay: f64,
    /// Learning rate of the activation clamps.
    pub clamp_lr: f64,
    /// Multiply learning rates by `lr_gamma` every `lr_step` epochs (0 = off).
    pub lr_step: usize,
    pub lr_gamma: f64,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    kind: RawKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    lr: f64,
    #[serde(default)]
    weight_decay: f64,
    clamp_lr: f64,
    #[serde(default)]
    lr_step: usize,
    #[serde(default = "one")]
    lr_gamma: f64,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum RawKind {
    Sgd,
    Adam,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<RawOptimizer> for OptimizerConfig {
    type Error = String;

    fn try_from(r: RawOptimizer) -> std::result::Result<Self, String> {
        let kind = match r.kind {
            RawKind::Sgd => {
                if r.beta1.is_some() || r.beta2.is_some() || r.eps.is_some() {
                    return Err("sgd takes momentum, not beta1/beta2/eps".into());
                }
                OptimizerKind::Sgd { momentum: r.momentum.unwrap_or(0.0) }
            }
            RawKind::Adam => {
                if r.momentum.is_some() {
                    return Err("adam takes beta1/beta2/eps, not momentum".into());
                }
                OptimizerKind::Adam {
                    beta1: r.beta1.unwrap_or(0.9),
                    beta2: r.beta2.unwrap_or(0.999),
                    eps: r.eps.unwrap_or(1e-8),
                }
            }
        };
        Ok(Self {
            kind,
            lr: r.lr,
            weight_decay: r.weight_decay,
            clamp_lr: r.clamp_lr,
            lr_step: r.lr_step,
            lr_gamma: r.lr_gamma,
        })
    }
}

impl From<OptimizerConfig> for RawOptimizer {
    fn from(c: OptimizerConfig) -> Self {
        let (kind, momentum, beta1, beta2, eps) = match c.kind {
            OptimizerKind::Sgd { momentum } => (RawKind::Sgd, Some(momentum), None, None, None),
            OptimizerKind::Adam { beta1, beta2, eps } => (RawKind::Adam, None, Some(beta1), Some(beta2), Some(eps)),
        };
        Self {
            kind,
            momentum,
            beta1,
            beta2,
            eps,
            lr: c.lr,
            weight_decay: c.weight_decay,
            clamp_lr: c.clamp_lr,
            lr_step: c.lr_step,
            lr_gamma: c.lr_gamma,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum },
            lr,
            weight_decay,
            clamp_lr: lr,
            lr_step: 0,
            lr_gamma: 1.0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay: 0.0,
            clamp_lr: lr,
            lr_step: 0,
            lr_gamma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lr) && ok(self.weight_decay) && ok(self.clamp_lr) && self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return Err(Error::Config("learning rates, decay and gamma must be finite and non-negative".into()));
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config(format!("momentum {momentum} outside [0, 1)")))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                Err(Error::Config("adam betas must be in [0, 1) and eps positive".into()))
            }
            _ => Ok(()),
        }
    }

    fn factor(&self, epoch: usize) -> f64 {
        epoch.checked_div(self.lr_step).map_or(1.0, |k| self.lr_gamma.powi(k as i32))
    }
}

/// Optimizer state keyed by parameter slot.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: Vec::new(),
        }
    }

    pub fn step(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64, decay: f64) {
        if self.m.len() <= slot {
            self.m.resize(slot + 1, Vec::new());
            self.v.resize(slot + 1, Vec::new());
            self.t.resize(slot + 1, 0);
        }
        if self.m[slot].len() != param.len() {
            self.m[slot] = vec![0.0; param.len()];
            self.v[slot] = vec![0.0; param.len()];
        }
        self.t[slot] += 1;
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        match self.cfg.kind {
            OptimizerKind::Sgd { momentum } => {
                for i in 0..param.len() {
                    let g = grad[i] + decay * param[i];
                    m[i] = momentum * m[i] + g;
                    param[i] -= lr * m[i];
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.t[slot] as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for i in 0..param.len() {
                    let g = grad[i] + decay * param[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub epochs_per_stage: usize,
    /// Number of schedule blocks; one per quantizable layer when unset.
    pub num_blocks: Option<usize>,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub quant: QuantSpec,
    pub skip_first_last: bool,
    pub enable_noise_gradual: bool,
    pub enable_clamp_learning: bool,
    pub seed: u64,
    /// Training batches used to calibrate clamps.
    pub calibration_batches: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.total_epochs == 0 || self.epochs_per_stage == 0 {
            return Err(Error::Config("batch size, epochs and epochs per stage must be positive".into()));
        }
        if self.calibration_batches == 0 {
            return Err(Error::Config("calibration needs at least one batch".into()));
        }
        Ok(())
    }
}

/// Streaming mean and variance with pairwise merging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    pub count: f64,
    pub mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn from_slice(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let (mean, std) = crate::tensor::mean_std(xs);
        let n = xs.len() as f64;
        Self {
            count: n,
            mean,
            m2: std * std * n,
        }
    }

    pub fn merge(&mut self, other: &Self) {
        if other.count == 0.0 {
            return;
        }
        let n = self.count + other.count;
        let d = other.mean - self.mean;
        self.mean += d * other.count / n;
        self.m2 += other.m2 + d * d * self.count * other.count / n;
        self.count = n;
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.count == 0.0 {
            0.0
        } else {
            (self.m2 / self.count).sqrt()
        }
    }
}

/// Sets `c_w` from each layer's weights and `c_a` from activation
/// statistics pooled over `batches` of a full-precision forward pass.
pub fn calibrate_clamps(model: &mut Model, batches: &[Tensor], spec: &QuantSpec) -> Result<Vec<Option<ClampParams>>> {
    spec.validate()?;
    if batches.is_empty() {
        return Err(Error::Config("calibration needs at least one batch".into()));
    }
    if model.has_batch_norm() {
        return Err(Error::Config("fold batch-norm before calibrating".into()));
    }
    let n = model.num_layers();
    let fp = vec![LayerMode::FullPrecision; n];
    let pins = vec![false; n];
    let sites = model.arch.act_sites();
    let mut stats = vec![RunningStats::default(); sites.len()];
    for x in batches {
        let nodes = model.eval_nodes(x.clone(), &fp, &pins, spec)?;
        for (s, site) in sites.iter().enumerate().skip(1) {
            stats[s].merge(&RunningStats::from_slice(nodes[site.node].data()));
        }
    }
    let mut c_w = Vec::with_capacity(n);
    for (l, p) in model.layers.iter().enumerate() {
        c_w.push(Some(quant::init_weight_clamp(&p.weight, spec.beta).map_err(|e| {
            Error::Initialization(format!("layer {}: {e}", model.arch.layers[l].name))
        })?));
    }
    let mut c_a = vec![Some(1.0)];
    for (s, st) in stats.iter().enumerate().skip(1) {
        c_a.push(Some(
            quant::clamp_from_stats(st.mean, st.std(), spec.alpha, "activation")
                .map_err(|e| Error::Initialization(format!("site {s}: {e}")))?,
        ));
    }
    model.weight_clamps = c_w;
    model.act_clamps = c_a;
    (0..n)
        .map(|l| {
            if model.arch.layer_input_sites()[l].is_some() {
                model.clamp_params(l, spec).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Mean loss and task metric (accuracy in percent or PSNR in dB).
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    modes: &[LayerMode],
    pinned: &[bool],
    spec: &QuantSpec,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let out = model.predict(x, modes, pinned, spec)?;
        match y {
            BatchTargets::Labels(l) => {
                let mut g = Graph::new();
                let v = g.constant(out.clone());
                let loss = g.softmax_cross_entropy(v, &l)?;
                loss_sum += g.value(loss).data()[0] * chunk.len() as f64;
                correct += accuracy(&out, &l)? * chunk.len() as f64 / 100.0;
            }
            BatchTargets::Images(t) => {
                let e: f64 = out.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                sq += e;
                loss_sum += e / t.len() as f64 * chunk.len() as f64;
            }
        }
        count += chunk.len();
    }
    let n = count as f64;
    let metric = match data.targets {
        Targets::Labels(_) => 100.0 * correct / n,
        Targets::Images(_) => 10.0 * (1.0 / (sq / (n * data.sample_len() as f64))).log10(),
    };
    Ok((loss_sum / n, metric))
}

struct EpochCtx<'a> {
    modes: &'a [LayerMode],
    pinned: &'a [bool],
    learn_clamps: bool,
    epoch: usize,
    stage: usize,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    opt: Optimizer,
    shuffle_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

impl Trainer<'_> {
    fn run_epoch(&mut self, model: &mut Model, data: &Dataset, ctx: &EpochCtx<'_>) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let factor = self.cfg.optimizer.factor(ctx.epoch.saturating_sub(1));
        let (lr, clamp_lr) = (self.cfg.optimizer.lr * factor, self.cfg.optimizer.clamp_lr * factor);
        let is_weight = model.param_is_weight();
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let (x, y) = data.batch_augmented(chunk, &mut self.shuffle_rng)?;
            let mut g = Graph::new();
            let fcfg = ForwardConfig {
                modes: ctx.modes,
                pinned: ctx.pinned,
                spec: &self.cfg.quant,
                train: true,
                grad_params: true,
                grad_clamps: ctx.learn_clamps,
            };
            let fwd = model.forward(&mut g, x, &fcfg, &mut self.noise_rng)?;
            let loss = match &y {
                BatchTargets::Labels(l) => g.softmax_cross_entropy(fwd.output(), l)?,
                BatchTargets::Images(t) => g.mse(fwd.output(), t)?,
            };
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(divergence(model, &g, &fwd.nodes, ctx, "loss"));
            }
            g.backward(loss)?;

            let owners = param_owners(model);
            for (slot, v) in fwd.params.iter().enumerate() {
                if let Some(gr) = g.grad(*v) {
                    if gr.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Divergence {
                            epoch: ctx.epoch,
                            stage: ctx.stage,
                            layer: model.arch.layers[owners[slot]].name.clone(),
                            what: "gradient".into(),
                        });
                    }
                }
            }
            let grads: Vec<Option<Vec<f64>>> = fwd.params.iter().map(|v| g.grad(*v).map(<[f64]>::to_vec)).collect();
            for (slot, (p, gr)) in model.params_mut().into_iter().zip(&grads).enumerate() {
                if let Some(gr) = gr {
                    let decay = if is_weight[slot] { self.cfg.optimizer.weight_decay } else { 0.0 };
                    self.opt.step(slot, p.data_mut(), gr, lr, decay);
                }
            }
            let n_params = grads.len();
            for (s, cv) in fwd.clamps.iter().enumerate() {
                let (Some(cv), true) = (cv, ctx.learn_clamps) else { continue };
                let Some(gr) = g.grad(*cv) else { continue };
                if !gr[0].is_finite() {
                    return Err(Error::Divergence {
                        epoch: ctx.epoch,
                        stage: ctx.stage,
                        layer: format!("activation site {s}"),
                        what: "clamp gradient".into(),
                    });
                }
                let mut c = [model.act_clamps[s].expect("clamped site has a clamp")];
                self.opt.step(n_params + s, &mut c, &[gr[0]], clamp_lr, 0.0);
                model.act_clamps[s] = Some(c[0].max(MIN_ACT_CLAMP));
            }
            for (l, st) in fwd.bn_stats.iter().enumerate() {
                let (Some((mean, var)), Some(bn)) = (st, &mut model.layers[l].bn) else { continue };
                let per = g.value(fwd.nodes[model.arch.layer_nodes()[l]]).len() / mean.len();
                let unbias = if per > 1 { per as f64 / (per as f64 - 1.0) } else { 1.0 };
                for c in 0..mean.len() {
                    bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean[c];
                    bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * var[c] * unbias;
                }
            }
            total += lv * chunk.len() as f64;
            seen += chunk.len();
        }
        Ok(total / seen as f64)
    }
}

fn param_owners(model: &Model) -> Vec<usize> {
    let mut out = Vec::new();
    for (l, p) in model.layers.iter().enumerate() {
        let k = if p.bn.is_some() { 4 } else { 2 };
        out.extend(std::iter::repeat_n(l, k));
    }
    out
}

fn divergence(model: &Model, g: &Graph, nodes: &[Var], ctx: &EpochCtx<'_>, what: &str) -> Error {
    let layer = nodes
        .iter()
        .position(|v| !g.value(*v).is_finite())
        .map(|i| match model.arch.nodes[i] {
            NodeDesc::Layer { layer, .. } => model.arch.layers[layer].name.clone(),
            _ => format!("node {i}"),
        })
        .unwrap_or_else(|| "output".into());
    Error::Divergence {
        epoch: ctx.epoch,
        stage: ctx.stage,
        layer,
        what: what.into(),
    }
}

fn clamp_row(model: &Model) -> Vec<f64> {
    model.act_clamps[1..].iter().map(|c| c.unwrap_or(f64::NAN)).collect()
}

fn new_log(model: &Model, cfg: &TrainConfig, noise_gradual: bool, clamp_learning: bool) -> MetricsLog {
    MetricsLog {
        task: model.arch.task,
        noise_gradual,
        clamp_learning,
        bits_w: cfg.quant.bits_w,
        bits_a: cfg.quant.bits_a,
        sites: (1..model.act_clamps.len()).collect(),
        rows: Vec::new(),
    }
}

fn trainer(cfg: &TrainConfig) -> Trainer<'_> {
    Trainer {
        cfg,
        opt: Optimizer::new(cfg.optimizer),
        shuffle_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        noise_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
    }
}

/// Full-precision training (batch-norm in batch mode, no quantization).
pub fn pretrain(model: &mut Model, train: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<MetricsLog> {
    cfg.validate()?;
    let n = model.num_layers();
    let modes = vec![LayerMode::FullPrecision; n];
    let pins = vec![false; n];
    let mut log = new_log(model, cfg, false, false);
    let (_, metric) = evaluate(model, eval, &modes, &pins, &cfg.quant, 256)?;
    let ms = modes_string(&modes);
    log.rows.push(MetricsRow { epoch: 0, stage: 0, modes: ms.clone(), loss: f64::NAN, metric, c_a: clamp_row(model) });
    let mut t = trainer(cfg);
    for epoch in 1..=cfg.total_epochs {
        let ctx = EpochCtx { modes: &modes, pinned: &pins, learn_clamps: false, epoch, stage: 0 };
        let loss = t.run_epoch(model, train, &ctx)?;
        let (_, metric) = evaluate(model, eval, &modes, &pins, &cfg.quant, 256)?;
        log.rows.push(MetricsRow { epoch, stage: 0, modes: ms.clone(), loss, metric, c_a: clamp_row(model) });
    }
    Ok(log)
}

/// Quantization-aware fine-tuning of a full-precision model. Batch-norm is
/// folded and clamps are calibrated first when needed.
pub fn train(model: &mut Model, train: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<MetricsLog> {
    cfg.validate()?;
    model.fold_batch_norm();
    if !model.is_calibrated() {
        let bs = cfg.batch_size;
        // as many of the requested batches as the training set holds
        let batches = (0..cfg.calibration_batches)
            .map(|b| (b * bs).min(train.len())..((b + 1) * bs).min(train.len()))
            .filter(|r| !r.is_empty())
            .map(|r| train.batch(&r.collect::<Vec<_>>()).map(|(x, _)| x))
            .collect::<Result<Vec<_>>>()?;
        calibrate_clamps(model, &batches, &cfg.quant)?;
    }
    let pinned = model.arch.pinned_layers(cfg.skip_first_last);
    let mut schedule = build_schedule(model, &pinned, cfg.num_blocks, cfg.epochs_per_stage)?;
    let n_stages = schedule.num_stages();
    if cfg.enable_noise_gradual && cfg.total_epochs < n_stages * cfg.epochs_per_stage {
        return Err(Error::Config(format!(
            "{} epochs cannot cover {n_stages} stages of {} epochs",
            cfg.total_epochs, cfg.epochs_per_stage
        )));
    }
    let stage_modes = |schedule: &mut GradualSchedule, epoch: usize| -> (usize, Vec<LayerMode>) {
        if cfg.enable_noise_gradual {
            let stage = schedule.stage_at_epoch(epoch);
            schedule.current_stage = stage;
            (stage, apply_stage(schedule))
        } else {
            schedule.current_stage = n_stages;
            (n_stages, apply_stage(schedule))
        }
    };

    let mut log = new_log(model, cfg, cfg.enable_noise_gradual, cfg.enable_clamp_learning);
    let (stage, modes) = stage_modes(&mut schedule, 0);
    let (_, metric) = evaluate(model, eval, &modes, &pinned, &cfg.quant, 256)?;
    log.rows.push(MetricsRow { epoch: 0, stage, modes: modes_string(&modes), loss: f64::NAN, metric, c_a: clamp_row(model) });

    let mut t = trainer(cfg);
    for epoch in 1..=cfg.total_epochs {
        let (stage, modes) = stage_modes(&mut schedule, epoch - 1);
        let ctx = EpochCtx { modes: &modes, pinned: &pinned, learn_clamps: cfg.enable_clamp_learning, epoch, stage };
        let loss = t.run_epoch(model, train, &ctx)?;
        let (_, metric) = evaluate(model, eval, &modes, &pinned, &cfg.quant, 256)?;
        log.rows.push(MetricsRow { epoch, stage, modes: modes_string(&modes), loss, metric, c_a: clamp_row(model) });
    }
    Ok(log)
}

/// Modes of a fully quantized model.
pub fn final_modes(model: &Model, skip_first_last: bool) -> Vec<LayerMode> {
    model
        .arch
        .pinned_layers(skip_first_last)
        .iter()
        .map(|&p| if p { LayerMode::FullPrecision } else { LayerMode::Quantized })
        .collect()
}

/// Task metric name for reports.
pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classification => "accuracy",
        Task::Regression => "psnr",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_regression, Mosaic};
    use crate::model::{Arch, LayerDesc, LayerKind};
    use proptest::prelude::*;

    fn tiny_model(layers: usize) -> Model {
        let mut arch = Arch::denoise_skip(2, 4);
        arch.layers = (0..layers)
            .map(|i| LayerDesc {
                name: format!("l{i}"),
                kind: LayerKind::Conv { in_ch: 3, out_ch: 3, kernel: 1, stride: 1, padding: 0 },
                batch_norm: false,
            })
            .collect();
        arch.nodes = vec![NodeDesc::Input];
        for i in 0..layers {
            arch.nodes.push(NodeDesc::Layer { layer: i, input: i, relu: i + 1 < layers });
        }
        Model::new(arch, 0).unwrap()
    }

    fn blocks(layers: usize, n: usize) -> Vec<Vec<usize>> {
        split_blocks(&(0..layers).collect::<Vec<_>>(), n).unwrap()
    }

    #[test]
    fn block_splits() {
        assert_eq!(blocks(4, 4), vec![vec![0], vec![1], vec![2], vec![3]]);
        assert_eq!(blocks(4, 2), vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(blocks(5, 2), vec![vec![0, 1, 2], vec![3, 4]]);
        assert!(split_blocks(&[0, 1], 3).is_err());
        assert!(split_blocks(&[0, 1], 0).is_err());
    }

    #[test]
    fn stage_modes() {
        let m = tiny_model(3);
        let mut s = build_schedule(&m, &[false; 3], None, 1).unwrap();
        use LayerMode::*;
        assert_eq!(apply_stage(&s), vec![Noisy, FullPrecision, FullPrecision]);
        s.set_stage(1).unwrap();
        assert_eq!(apply_stage(&s), vec![Quantized, Noisy, FullPrecision]);
        s.set_stage(3).unwrap();
        assert_eq!(apply_stage(&s), vec![Quantized; 3]);
        assert!(s.set_stage(4).is_err());
    }

    #[test]
    fn pinned_layers_stay_full_precision() {
        let m = Model::new(Arch::mini_resnet(2), 0).unwrap();
        let pins = m.arch.pinned_layers(true);
        let mut s = build_schedule(&m, &pins, None, 2).unwrap();
        assert_eq!(s.blocks, vec![vec![1], vec![2], vec![3], vec![4]]);
        for stage in 0..=4 {
            s.set_stage(stage).unwrap();
            let modes = apply_stage(&s);
            assert_eq!(modes[0], LayerMode::FullPrecision);
            assert_eq!(modes[5], LayerMode::FullPrecision);
        }
    }

    #[test]
    fn one_layer_schedule_arithmetic() {
        let m = tiny_model(1);
        let s = build_schedule(&m, &[false], Some(1), 1).unwrap();
        let modes: Vec<_> = (0..3)
            .map(|e| {
                let mut s = s.clone();
                s.current_stage = s.stage_at_epoch(e);
                apply_stage(&s)[0]
            })
            .collect();
        assert_eq!(modes, vec![LayerMode::Noisy, LayerMode::Quantized, LayerMode::Quantized]);
    }

    proptest! {
        #[test]
        fn schedule_is_a_monotone_partition(layers in 1usize..12, n_frac in 0.0f64..1.0, eps in 1usize..4) {
            let n = 1 + ((layers - 1) as f64 * n_frac) as usize;
            let m = tiny_model(layers);
            let s = build_schedule(&m, &vec![false; layers], Some(n), eps).unwrap();
            let flat: Vec<usize> = s.blocks.iter().flatten().copied().collect();
            prop_assert_eq!(flat, (0..layers).collect::<Vec<_>>());
            let sizes: Vec<usize> = s.blocks.iter().map(Vec::len).collect();
            prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
            let rank = |m: LayerMode| match m { LayerMode::FullPrecision => 0, LayerMode::Noisy => 1, LayerMode::Quantized => 2 };
            let mut prev = vec![0; layers];
            for epoch in 0..(n + 2) * eps {
                let mut s = s.clone();
                s.current_stage = s.stage_at_epoch(epoch);
                let modes = apply_stage(&s);
                for l in 0..layers {
                    prop_assert!(rank(modes[l]) >= prev[l]);
                    prev[l] = rank(modes[l]);
                }
            }
            prop_assert!(prev.iter().all(|&r| r == 2));
        }
    }

    #[test]
    fn pooled_stats_match_concatenation() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..11).map(|i| 2.0 + (i as f64).cos()).collect();
        let mut s = RunningStats::from_slice(&a);
        s.merge(&RunningStats::from_slice(&b));
        let all: Vec<f64> = a.iter().chain(&b).copied().collect();
        let (mean, std) = crate::tensor::mean_std(&all);
        assert!((s.mean - mean).abs() < 1e-12);
        assert!((s.std() - std).abs() < 1e-12);
    }

    #[test]
    fn calibration_pools_batches() {
        let mut m = tiny_model(2);
        let spec = QuantSpec::default();
        let d = synth_regression(0, 6, 4, 0.0, Mosaic::Full).unwrap();
        let (x1, _) = d.batch(&[0, 1, 2]).unwrap();
        let (x2, _) = d.batch(&[3, 4, 5]).unwrap();
        let (x12, _) = d.batch(&[0, 1, 2, 3, 4, 5]).unwrap();
        calibrate_clamps(&mut m, &[x1, x2], &spec).unwrap();
        let pooled = m.act_clamps.clone();
        calibrate_clamps(&mut m, &[x12], &spec).unwrap();
        let whole = m.act_clamps.clone();
        assert!((pooled[1].unwrap() - whole[1].unwrap()).abs() < 1e-12);
    }

    #[test]
    fn calibration_requests_beyond_the_data_are_capped() {
        let mut m = tiny_model(2);
        let d = synth_regression(0, 5, 4, 0.05, Mosaic::Full).unwrap();
        let cfg = TrainConfig {
            total_epochs: 2,
            epochs_per_stage: 1,
            num_blocks: None,
            batch_size: 4,
            optimizer: OptimizerConfig::adam(1e-3),
            quant: QuantSpec::default(),
            skip_first_last: false,
            enable_noise_gradual: true,
            enable_clamp_learning: true,
            seed: 1,
            calibration_batches: 8,
        };
        let log = train(&mut m, &d, &d, &cfg).unwrap();
        assert!(m.is_calibrated());
        assert_eq!(log.rows.len(), 3);
    }

    #[test]
    fn constant_activation_calibrates_to_its_value() {
        let mut m = tiny_model(2);
        // equal weights on a constant input: every activation is 3 * 0.2 * 0.5 + 0.4
        m.layers[0].weight.data_mut().fill(0.2);
        m.layers[0].bias.data_mut().fill(0.4);
        let x = Tensor::full(&[2, 3, 4, 4], 0.5);
        let spec = QuantSpec { beta: 3.0, ..QuantSpec::default() };
        calibrate_clamps(&mut m, &[x], &spec).unwrap();
        assert!((m.act_clamps[1].unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn degenerate_weights_fail_calibration() {
        let mut m = tiny_model(2);
        for l in &mut m.layers {
            let w = l.weight.data_mut();
            let n = w.len();
            for (i, v) in w.iter_mut().enumerate() {
                *v = match (2 * i + 1).cmp(&n) {
                    std::cmp::Ordering::Less => 1.0,
                    std::cmp::Ordering::Equal => 0.0,
                    std::cmp::Ordering::Greater => -1.0,
                };
            }
        }
        let spec = QuantSpec { beta: 0.0, ..QuantSpec::default() };
        let x = Tensor::full(&[1, 3, 4, 4], 0.5);
        let r = calibrate_clamps(&mut m, &[x], &spec);
        assert!(matches!(r, Err(Error::Initialization(_))), "{r:?}");
    }

    #[test]
    fn sgd_and_adam_steps() {
        let mut o = Optimizer::new(OptimizerConfig::sgd(0.1, 0.9, 0.0));
        let mut p = [1.0];
        o.step(0, &mut p, &[1.0], 0.1, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-15);
        o.step(0, &mut p, &[1.0], 0.1, 0.0);
        assert!((p[0] - (0.9 - 0.1 * 1.9)).abs() < 1e-15);
        let mut o = Optimizer::new(OptimizerConfig::adam(0.01));
        let mut p = [1.0];
        o.step(0, &mut p, &[123.0], 0.01, 0.0);
        assert!((p[0] - 0.99).abs() < 1e-9);
    }
}
