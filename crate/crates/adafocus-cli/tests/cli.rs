use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adafocus"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--run-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &str = r#"
frame_size = 32
frames_per_video = 4
glyph_size = 6
patch_size = 12
grid_k = 3
classifier_hidden = 32
adafocus_plus = true
train_samples = 20
cal_samples = 10
test_samples = 20
pretrain_epochs = 1
stage1_epochs = 1
stage2_epochs = 1
stage3_epochs = 1
batch_size = 10
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn full_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = write_config(tmp.path());

    let out = bin()
        .args(["--run-dir"]).arg(&run)
        .args(["--config"]).arg(&cfg)
        .arg("gen-data")
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert!(run.join("config.toml").exists());
    assert!(run.join("data/train.bin").exists());

    for cmd in ["pretrain", "stage1", "stage2", "stage3", "calibrate"] {
        let out = run_in(&run, &[cmd]);
        assert_code(&out, 0);
    }
    assert!(run.join("checkpoints/stage3.ckpt").exists());

    let out = run_in(&run, &["eval", "--variant", "learned", "--online"]);
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("learned"));
    assert!(run.join("metrics/eval_learned.json").exists());

    let out = run_in(&run, &["eval", "--variant", "central", "--plus"]);
    assert_code(&out, 0);

    let out = run_in(&run, &["ablate", "--axis", "policies"]);
    assert_code(&out, 0);
    assert!(run.join("metrics/ablate_policies.csv").exists());

    let out = run_in(&run, &["plot"]);
    assert_code(&out, 0);
    assert!(run.join("plots/online_curves.svg").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "frame_size = 32\nnot_a_key = 1\n").unwrap();
    let out = bin()
        .args(["--run-dir"]).arg(tmp.path().join("run"))
        .args(["--config"]).arg(&cfg)
        .arg("gen-data")
        .output()
        .unwrap();
    assert_code(&out, 2);
}

#[test]
fn bad_override_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--run-dir"]).arg(tmp.path().join("run"))
        .args(["--set", "patch_size=99", "gen-data"])
        .output()
        .unwrap();
    // patch larger than the frame
    assert_code(&out, 2);
}

#[test]
fn stage_without_prerequisite_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = write_config(tmp.path());
    let out = bin()
        .args(["--run-dir"]).arg(&run)
        .args(["--config"]).arg(&cfg)
        .arg("gen-data")
        .output()
        .unwrap();
    assert_code(&out, 0);
    // stage2 needs the stage1 checkpoint
    let out = run_in(&run, &["stage2"]);
    assert_code(&out, 2);
}

#[test]
fn gen_data_refuses_to_clobber_without_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = write_config(tmp.path());
    let gen = |extra: &[&str]| {
        bin()
            .args(["--run-dir"]).arg(&run)
            .args(["--config"]).arg(&cfg)
            .args(extra)
            .arg("gen-data")
            .output()
            .unwrap()
    };
    assert_code(&gen(&[]), 0);
    assert_code(&gen(&[]), 2);
    assert_code(&gen(&["--overwrite"]), 0);
}

#[test]
fn plot_without_metrics_is_contract_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = write_config(tmp.path());
    let out = bin()
        .args(["--run-dir"]).arg(&run)
        .args(["--config"]).arg(&cfg)
        .arg("gen-data")
        .output()
        .unwrap();
    assert_code(&out, 0);
    let out = run_in(&run, &["plot"]);
    assert_code(&out, 3);
}

#[test]
fn verify_passes_on_fresh_models() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(&tmp.path().join("run"), &["verify"]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("reward zero-mean"));
    assert!(!stdout.contains("FAIL"));
}
