//! End-to-end steps shared by the command-line tool, the bindings and the
//! acceptance tests: data loading, full-precision training, NICE
//! fine-tuning, ablations, evaluation and integer export.

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, MosaicKind, RunConfig};
use crate::data::{self, Dataset, Mosaic};
use crate::error::{Error, Result};
use crate::int_infer::{self, EquivalenceReport, IntModel};
use crate::metrics::MetricsLog;
use crate::model::Model;
use crate::qat::{self, LayerMode};

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Training and evaluation sets for a run. Without an `eval_path` the
/// evaluation samples are the ones following the training subset.
pub fn load_data(cfg: &RunConfig) -> Result<Datasets> {
    let (n_train, n_eval) = (cfg.data.train_size, cfg.data.eval_size);
    let need = |d: &Dataset, n: usize, what: &str| {
        if d.len() < n {
            Err(Error::Format(format!("{what} has {} samples, {n} requested", d.len())))
        } else {
            Ok(())
        }
    };
    match cfg.data.source {
        DataSource::Cifar10 => {
            let path = cfg.data.path.as_deref().ok_or_else(|| Error::Config("data.path is required".into()))?;
            if let Some(ep) = &cfg.data.eval_path {
                let train = data::load_cifar10(path, Some(n_train))?;
                let eval = data::load_cifar10(ep, Some(n_eval))?;
                need(&train, n_train, "training set")?;
                need(&eval, n_eval, "evaluation set")?;
                Ok(Datasets { train, eval })
            } else {
                let all = data::load_cifar10(path, Some(n_train + n_eval))?;
                need(&all, n_train + n_eval, "dataset")?;
                Ok(Datasets { train: all.slice(0, n_train), eval: all.slice(n_train, n_train + n_eval) })
            }
        }
        DataSource::SyntheticCifar => {
            let all = data::parse_cifar10(&data::synthetic_cifar_bytes(cfg.seed, n_train + n_eval), "synthetic")?;
            Ok(Datasets { train: all.slice(0, n_train), eval: all.slice(n_train, n_train + n_eval) })
        }
        DataSource::SyntheticRegression => {
            let mosaic = match cfg.data.mosaic {
                MosaicKind::Bayer => Mosaic::Bayer,
                MosaicKind::Full => Mosaic::Full,
            };
            let (size, sigma) = (cfg.data.image_size, cfg.data.noise_sigma);
            let train = data::synth_regression(cfg.seed, n_train, size, sigma, mosaic)?;
            let mut eval = data::synth_regression(cfg.seed ^ 0x5eed, n_eval, size, sigma, mosaic)?;
            eval.augment_flips = false;
            Ok(Datasets { train, eval })
        }
    }
}

/// Trains the configured architecture from scratch in full precision.
pub fn run_train(cfg: &RunConfig, data: &Datasets) -> Result<(Checkpoint, MetricsLog)> {
    let mut model = Model::new(cfg.arch(), cfg.seed)?;
    let log = qat::pretrain(&mut model, &data.train, &data.eval, &cfg.pretrain_config())?;
    let ck = Checkpoint { model, quant: cfg.quant, epoch: cfg.train.epochs, stage: 0, skip_first_last: None };
    Ok((ck, log))
}

/// NICE fine-tuning of a full-precision checkpoint with the given flags.
pub fn run_quantize(
    cfg: &RunConfig,
    fp: &Checkpoint,
    data: &Datasets,
    noise_gradual: bool,
    clamp_learning: bool,
) -> Result<(Checkpoint, MetricsLog)> {
    if fp.skip_first_last.is_some() {
        return Err(Error::Config("checkpoint is already quantized; quantize expects a full-precision one".into()));
    }
    if fp.model.arch != cfg.arch() {
        return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
    }
    let mut model = fp.model.clone();
    let tc = cfg.qat_config(noise_gradual, clamp_learning);
    let log = qat::train(&mut model, &data.train, &data.eval, &tc)?;
    let stage = log.rows.last().map_or(0, |r| r.stage);
    let ck = Checkpoint { model, quant: cfg.quant, epoch: cfg.qat.epochs, stage, skip_first_last: Some(cfg.skip()) };
    Ok((ck, log))
}

/// The four (noise + gradual, clamp learning) combinations in table order.
pub fn run_ablation(cfg: &RunConfig, fp: &Checkpoint, data: &Datasets) -> Result<Vec<(Checkpoint, MetricsLog)>> {
    crate::analysis::ABLATION_GRID
        .iter()
        .map(|&(ng, cl)| run_quantize(cfg, fp, data, ng, cl))
        .collect()
}

/// Layer modes and pin table a checkpoint is evaluated with.
pub fn eval_modes(ck: &Checkpoint) -> (Vec<LayerMode>, Vec<bool>) {
    let n = ck.model.num_layers();
    match ck.skip_first_last {
        None => (vec![LayerMode::FullPrecision; n], vec![false; n]),
        Some(skip) => (qat::final_modes(&ck.model, skip), ck.model.arch.pinned_layers(skip)),
    }
}

/// `(loss, metric)` of a checkpoint on `data`: accuracy in percent or PSNR
/// in dB.
pub fn evaluate(ck: &Checkpoint, data: &Dataset) -> Result<(f64, f64)> {
    let (modes, pinned) = eval_modes(ck);
    qat::evaluate(&ck.model, data, &modes, &pinned, &ck.quant, 256)
}

pub fn export_int(ck: &Checkpoint) -> Result<IntModel> {
    let skip = ck
        .skip_first_last
        .ok_or_else(|| Error::Lowering("checkpoint is full precision; run quantize first".into()))?;
    int_infer::lower(&ck.model, &ck.quant, skip)
}

pub fn verify_int(ck: &Checkpoint, im: &IntModel, data: &Dataset) -> Result<EquivalenceReport> {
    let skip = ck
        .skip_first_last
        .ok_or_else(|| Error::Lowering("checkpoint is full precision; run quantize first".into()))?;
    int_infer::verify_equivalence(&ck.model, im, &ck.quant, skip, data)
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Format(_) | Error::Parse { .. } | Error::Dimension(_) => 3,
        Error::Divergence { .. } | Error::Initialization(_) => 4,
        Error::Overflow { .. } => 5,
        Error::Io(_) => 6,
        Error::Range(_) | Error::Lowering(_) | Error::Test(_) => 1,
    }
}
