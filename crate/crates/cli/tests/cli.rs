use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
task = "classification"
seed = 11
out_dir = "unused"

[data]
source = "synthetic-cifar"
train_size = 64
eval_size = 32

[model]
arch = "mini-resnet"
width = 4

[train]
epochs = 1
batch_size = 16
optimizer = { kind = "sgd", momentum = 0.9, lr = 0.05, clamp_lr = 0.05 }

[qat]
epochs = 4
epochs_per_stage = 1
batch_size = 16
calibration_batches = 1
optimizer = { kind = "sgd", momentum = 0.9, lr = 0.005, clamp_lr = 0.05 }

[quant]
bits_w = 4
bits_a = 4
bits_b = 16
"#;

fn nice(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nice"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run nice")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let common = ["--config", "tiny.toml", "--out", "run"];

    let out = ok(&nice(d, &[&["train"][..], &common].concat()));
    assert!(out.starts_with("accuracy "));
    let out = ok(&nice(d, &[&["quantize"][..], &common, &["--checkpoint", "run/fp.ckpt"]].concat()));
    assert!(out.starts_with("accuracy "));
    let out = ok(&nice(d, &[&["eval"][..], &common, &["--checkpoint", "run/nice.ckpt"]].concat()));
    assert!(out.contains("loss ") && out.contains("accuracy "));
    let out = ok(&nice(d, &[&["export-int"][..], &common, &["--checkpoint", "run/nice.ckpt"]].concat()));
    assert!(out.contains("q="));
    let args = ["--checkpoint", "run/nice.ckpt", "--int-model", "run/model.nint", "--samples", "8"];
    let out = ok(&nice(d, &[&["verify-int"][..], &common, &args].concat()));
    assert!(out.contains("samples 8"));
    assert!(out.contains("max_code_deviation 0\n") || out.contains("max_code_deviation 1\n"), "{out}");
    let args = ["--checkpoint", "run/nice.ckpt", "--metrics", "run/nice_metrics.tsv"];
    let out = ok(&nice(d, &[&["analyze"][..], &common, &args].concat()));
    assert!(out.contains("shrinkage"));

    for f in ["fp.ckpt", "fp_metrics.tsv", "nice.ckpt", "nice_metrics.tsv", "model.nint", "verify.tsv", "uniformity.tsv", "clamps_0.tsv"] {
        assert!(d.join("run").join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(d.join("run/nice_metrics.tsv")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 1 + 1 + 4);
}

#[test]
fn ablation_writes_four_runs_and_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.toml"), TINY.replace("train_size = 64", "train_size = 32")).unwrap();
    let common = ["--config", "tiny.toml", "--out", "run"];
    ok(&nice(d, &[&["train"][..], &common].concat()));
    let out = ok(&nice(d, &[&["quantize"][..], &common, &["--checkpoint", "run/fp.ckpt", "--ablation"]].concat()));
    assert_eq!(out.lines().count(), 5, "{out}");
    for tag in ["ng0_cl0", "ng0_cl1", "ng1_cl0", "ng1_cl1"] {
        assert!(d.join(format!("run/ablation/{tag}.ckpt")).is_file());
    }
    assert!(d.join("run/ablation.tsv").is_file());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), TINY.replace("width = 4", "width = 4\ncolour = 1")).unwrap();
    assert_eq!(code(&nice(d, &["train", "--config", "bad.toml"])), 2);

    fs::write(d.join("tiny.toml"), TINY).unwrap();
    assert_eq!(code(&nice(d, &["train", "--config", "tiny.toml", "--bits-w", "1"])), 2);
    assert_eq!(code(&nice(d, &["train", "--config", "missing.toml"])), 6);

    let eval = |ck: &str| nice(d, &["eval", "--config", "tiny.toml", "--out", "run", "--checkpoint", ck]);
    assert_eq!(code(&eval("nothing.ckpt")), 6);
    fs::write(d.join("junk.ckpt"), b"NICECKPT\x01\x00\x00\x00").unwrap();
    assert_eq!(code(&eval("junk.ckpt")), 3);

    // exporting a full-precision checkpoint is refused
    ok(&nice(d, &["train", "--config", "tiny.toml", "--out", "run"]));
    let out = nice(d, &["export-int", "--config", "tiny.toml", "--out", "run", "--checkpoint", "run/fp.ckpt"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("quantize first"));
}
