use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nice_core::analysis::{self, DEFAULT_BINS, DEFAULT_SIGNIFICANCE};
use nice_core::checkpoint::Checkpoint;
use nice_core::config::{Overrides, RunConfig};
use nice_core::int_infer::{read_int_model, write_int_model};
use nice_core::metrics::MetricsLog;
use nice_core::pipeline::{self, Datasets};
use nice_core::qat::metric_name;
use nice_core::{Error, Result};

/// NICE quantization-aware training and integer-only inference.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
/// divergence, 5 accumulator overflow, 6 I/O error, 1 anything else.
#[derive(Parser)]
#[command(name = "nice", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `out_dir` of the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of training samples.
    #[arg(long)]
    subset_size: Option<usize>,
    #[arg(long)]
    bits_w: Option<u32>,
    #[arg(long)]
    bits_a: Option<u32>,
    #[arg(long)]
    bits_b: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision model: writes fp.ckpt and fp_metrics.tsv.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// NICE fine-tuning of a full-precision checkpoint: writes nice.ckpt and
    /// nice_metrics.tsv, or one run per flag combination with --ablation.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run all four (noise + gradual, clamp learning) combinations.
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        no_noise_gradual: bool,
        #[arg(long)]
        no_clamp_learning: bool,
    },
    /// Accuracy (classification) or PSNR (regression) on the evaluation set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Lower a quantized checkpoint to an integer model (model.nint).
    ExportInt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare an integer model with its fake-quant float model: writes verify.tsv.
    VerifyInt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        int_model: PathBuf,
        /// Evaluation samples to compare (default: all).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Quantization-error histograms, clamp trajectories and the ablation table.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Checkpoint whose weights are histogrammed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Metrics logs; a clamp report is written for each and an ablation
        /// table over all of them.
        #[arg(long, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_SIGNIFICANCE)]
        significance: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}

fn setup(c: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&c.config)?;
    cfg.apply(&Overrides {
        seed: c.seed,
        out_dir: c.out.clone(),
        subset_size: c.subset_size,
        bits_w: c.bits_w,
        bits_a: c.bits_a,
        bits_b: c.bits_b,
    })?;
    fs::create_dir_all(&cfg.out_dir)?;
    let out = cfg.out_dir.clone();
    Ok((cfg, out))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.save(path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<Datasets> {
    let d = pipeline::load_data(cfg)?;
    eprintln!("data: {} training, {} evaluation samples", d.train.len(), d.eval.len());
    Ok(d)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common } => {
            let (cfg, out) = setup(&common)?;
            let data = load_data(&cfg)?;
            let (ck, log) = pipeline::run_train(&cfg, &data)?;
            save(&ck, &out.join("fp.ckpt"))?;
            write(&out.join("fp_metrics.tsv"), &log.to_tsv())?;
            println!("{} {:.4}", metric_name(cfg.task), log.final_metric().unwrap_or(f64::NAN));
        }
        Command::Quantize { common, checkpoint, ablation, no_noise_gradual, no_clamp_learning } => {
            let (cfg, out) = setup(&common)?;
            let fp = Checkpoint::load(&checkpoint)?;
            let data = load_data(&cfg)?;
            if ablation {
                let dir = out.join("ablation");
                fs::create_dir_all(&dir)?;
                let mut logs = Vec::new();
                for (ck, log) in pipeline::run_ablation(&cfg, &fp, &data)? {
                    let tag = format!("ng{}_cl{}", u8::from(log.noise_gradual), u8::from(log.clamp_learning));
                    save(&ck, &dir.join(format!("{tag}.ckpt")))?;
                    write(&dir.join(format!("{tag}_metrics.tsv")), &log.to_tsv())?;
                    logs.push(log);
                }
                let table = analysis::ablation_report(&logs)?;
                write(&out.join("ablation.tsv"), &table.to_tsv())?;
                print!("{}", table.to_tsv());
            } else {
                let (ck, log) = pipeline::run_quantize(&cfg, &fp, &data, !no_noise_gradual, !no_clamp_learning)?;
                save(&ck, &out.join("nice.ckpt"))?;
                write(&out.join("nice_metrics.tsv"), &log.to_tsv())?;
                println!("{} {:.4}", metric_name(cfg.task), log.final_metric().unwrap_or(f64::NAN));
            }
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, _) = setup(&common)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let data = load_data(&cfg)?;
            let (loss, metric) = pipeline::evaluate(&ck, &data.eval)?;
            println!("loss {loss:.6}");
            println!("{} {metric:.4}", metric_name(ck.model.arch.task));
        }
        Command::ExportInt { common, checkpoint } => {
            let (_, out) = setup(&common)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let im = pipeline::export_int(&ck)?;
            let path = out.join("model.nint");
            write_int_model(&im, &path)?;
            eprintln!("wrote {}", path.display());
            for (name, d, real) in im.scales() {
                println!("{name}\tq={}\tp={}\treal={real:e}", d.q, d.p);
            }
        }
        Command::VerifyInt { common, checkpoint, int_model, samples } => {
            let (cfg, out) = setup(&common)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let im = read_int_model(&int_model)?;
            let data = load_data(&cfg)?;
            let eval = samples.map_or(data.eval.clone(), |n| data.eval.take(n));
            let rep = pipeline::verify_int(&ck, &im, &eval)?;
            write(&out.join("verify.tsv"), &rep.to_tsv())?;
            println!("samples {}", rep.samples);
            println!("max_code_deviation {}", rep.max_code_dev());
            println!("max_propagated_code_deviation {}", rep.max_propagated_code_dev());
            if let Some(a) = rep.argmax_agreement {
                println!("argmax_agreement {a:.4}");
            }
            println!("metric_float {:.4}", rep.metric_float);
            println!("metric_int {:.4}", rep.metric_int);
            for n in &rep.nodes {
                println!(
                    "node {}\t{}\t{}\tlocal_dev {}\tmax_dev {}\tbound {}",
                    n.node,
                    n.label,
                    n.unit.name(),
                    n.local_dev,
                    n.max_dev,
                    n.bound
                );
            }
        }
        Command::Analyze { common, checkpoint, metrics, bins, significance } => {
            let (cfg, out) = setup(&common)?;
            analyze(&cfg, &out, checkpoint.as_deref(), &metrics, bins, significance)?;
        }
    }
    Ok(())
}

fn analyze(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    metrics: &[PathBuf],
    bins: usize,
    significance: f64,
) -> Result<()> {
    let mut summary = String::from("source\tbits\tn\tchi_square\tdf\tcritical\treject\n");
    let mut row = |src: &str, h: &analysis::ErrorHistogram| -> Result<()> {
        let u = analysis::uniformity_test(h, significance)?;
        summary.push_str(&format!(
            "{src}\t{}\t{}\t{:.4}\t{}\t{:.4}\t{}\n",
            h.bits, h.n, u.statistic, u.df, u.critical, u.reject
        ));
        Ok(())
    };

    let gaussian = analysis::gaussian_weights(cfg.seed, 100_000);
    let c = nice_core::quant::init_weight_clamp(&gaussian, cfg.quant.beta)?;
    for bits in 2..=8 {
        let h = analysis::error_histogram(&gaussian, c, bits, bins)?;
        write(&out.join(format!("hist_gaussian_w{bits}.tsv")), &h.to_tsv())?;
        row("gaussian", &h)?;
    }
    if let Some(p) = checkpoint {
        let ck = Checkpoint::load(p)?;
        for bits in 2..=8 {
            let h = analysis::model_error_histogram(&ck.model, bits, cfg.quant.beta, bins)?;
            write(&out.join(format!("hist_model_w{bits}.tsv")), &h.to_tsv())?;
            match analysis::uniformity_test(&h, significance) {
                Ok(_) => row("model", &h)?,
                Err(Error::Test(m)) => eprintln!("model weights at {bits} bits: {m}"),
                Err(e) => return Err(e),
            }
        }
    }
    write(&out.join("uniformity.tsv"), &summary)?;
    print!("{summary}");

    let mut logs = Vec::new();
    for (i, p) in metrics.iter().enumerate() {
        let text = fs::read_to_string(p)?;
        let log = MetricsLog::parse(&text)?;
        if log.clamp_learning {
            let rep = analysis::clamp_report(&log)?;
            write(&out.join(format!("clamps_{i}.tsv")), &rep.trajectories_tsv())?;
            write(&out.join(format!("clamps_{i}_summary.tsv")), &rep.summary_tsv())?;
            println!(
                "{}: mean c_a {:.4} -> {:.4} (shrinkage {:.2}%)",
                p.display(),
                rep.mean_initial,
                rep.mean_final,
                100.0 * rep.mean_shrinkage()
            );
        }
        logs.push(log);
    }
    if logs.len() > 1 {
        let table = analysis::ablation_report(&logs)?;
        write(&out.join("ablation.tsv"), &table.to_tsv())?;
        print!("{}", table.to_tsv());
    }
    Ok(())
}
