use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gmn_core::data::{synthetic_glyphs, Split, OMNIGLOT_TEST_FILE, OMNIGLOT_TRAIN_FILE};

fn gmn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmn")).args(args).env_remove("GMN_DATA_ROOT").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synthetic_root(dir: &Path) {
    synthetic_glyphs(6, 5, 0, Split::Train, 1).write(&dir.join(OMNIGLOT_TRAIN_FILE)).unwrap();
    synthetic_glyphs(6, 5, 100, Split::Test, 2).write(&dir.join(OMNIGLOT_TEST_FILE)).unwrap();
}

fn train_tiny(root: &Path, out: &Path, extra: &[&str]) -> Output {
    train_steps(root, out, "4", extra)
}

fn train_steps(root: &Path, out: &Path, steps: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--preset",
        "tiny",
        "--total-steps",
        steps,
        "--batch-episodes",
        "2",
        "--checkpoint-interval",
        "2",
        "--log-interval",
        "1",
        "--seed",
        "7",
        "--data-root",
        root.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    gmn(&args)
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = gmn(&["train", "--no-such-flag"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert_eq!(code(&gmn(&["frobnicate"])), 2);
}

#[test]
fn missing_cache_names_the_ingest_command() {
    let root = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = train_tiny(root.path(), out.path(), &[]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("gmn ingest-omniglot"), "{}", stderr(&o));
}

#[test]
fn invalid_config_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"total_steps": 3, "bogus_key": 1}"#).unwrap();
    let out = dir.path().join("run");
    let o = gmn(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!out.exists());
    let o = gmn(&["train", "--preset", "tiny", "--batch-episodes", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(!out.exists());
}

#[test]
fn deterministic_training_is_reproducible_and_manifested() {
    let root = tempfile::tempdir().unwrap();
    synthetic_root(root.path());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = train_tiny(root.path(), d.path(), &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let metrics = |d: &Path| fs::read(d.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics(a.path()), metrics(b.path()));
    assert_eq!(String::from_utf8(metrics(a.path())).unwrap().lines().count(), 4);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join("run_manifest.json")).unwrap()).unwrap();
    let ck = a.path().join("ckpt_0000004.gmnk");
    assert_eq!(manifest["checkpoint"]["sha256"], gmn_core::train::checkpoint_hash(&ck).unwrap());
    assert_eq!(manifest["config"]["train"]["total_steps"], 4);
    let files: Vec<&str> = manifest["artifacts"].as_array().unwrap().iter().map(|a| a["file"].as_str().unwrap()).collect();
    assert!(files.contains(&"metrics.jsonl") && files.contains(&"ckpt_0000002.gmnk"));
}

#[test]
fn flags_override_the_config_file() {
    let root = tempfile::tempdir().unwrap();
    synthetic_root(root.path());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"preset": "tiny", "total_steps": 5, "batch_episodes": 1, "log_interval": 1, "checkpoint_interval": 10}"#).unwrap();
    let out = dir.path().join("run");
    let o = gmn(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--total-steps",
        "2",
        "--data-root",
        root.path().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn data_root_comes_from_the_environment() {
    let root = tempfile::tempdir().unwrap();
    synthetic_root(root.path());
    let out = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gmn"))
        .args(["train", "--preset", "tiny", "--total-steps", "1", "--batch-episodes", "1", "--out", out.path().to_str().unwrap()])
        .env("GMN_DATA_ROOT", root.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn evaluation_commands_write_reproducible_outputs() {
    let root = tempfile::tempdir().unwrap();
    synthetic_root(root.path());
    let run = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_tiny(root.path(), run.path(), &[])), 0);
    let ck = run.path().join("ckpt_0000004.gmnk");
    let r = root.path().to_str().unwrap();
    let c = ck.to_str().unwrap();
    let eval = |sub: &str, out: &Path, extra: &[&str]| {
        let mut args = vec![sub, "--checkpoint", c, "--data-root", r, "--out", out.to_str().unwrap(), "--seed", "3"];
        args.extend_from_slice(extra);
        let o = gmn(&args);
        assert_eq!(code(&o), 0, "{sub}: {}", stderr(&o));
    };
    let e1 = tempfile::tempdir().unwrap();
    let e2 = tempfile::tempdir().unwrap();
    for e in [&e1, &e2] {
        eval("eval-nll", e.path(), &["--ctest", "1", "--episodes", "3", "--is-samples", "5"]);
    }
    let csv = fs::read_to_string(e1.path().join("nll.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "series,stat,t=0,t=1,t=2");
    assert_eq!(csv, fs::read_to_string(e2.path().join("nll.csv")).unwrap());
    assert_eq!(fs::read(e1.path().join("nll.json")).unwrap(), fs::read(e2.path().join("nll.json")).unwrap());

    let wide = tempfile::tempdir().unwrap();
    eval("eval-nll", wide.path(), &["--eval-len", "5", "--episodes", "2", "--is-samples", "2"]);
    assert!(fs::read_to_string(wide.path().join("nll.csv")).unwrap().starts_with("series,stat,t=0,t=1,t=2,t=3,t=4\n"));

    let cl = tempfile::tempdir().unwrap();
    eval("classify", cl.path(), &["--ways", "3", "--shots", "1", "--episodes", "6", "--is-samples", "3"]);
    let res: serde_json::Value = serde_json::from_str(&fs::read_to_string(cl.path().join("classify.json")).unwrap()).unwrap();
    assert_eq!(res["trials"], 6);

    let sg = tempfile::tempdir().unwrap();
    eval("sample", sg.path(), &["--grid", "--per-row", "4"]);
    let manifest = fs::read_to_string(sg.path().join("run_manifest.json")).unwrap();
    assert!(manifest.contains("grid.png"));
    assert!(fs::metadata(sg.path().join("grid.png")).unwrap().len() > 0);

    let sp = tempfile::tempdir().unwrap();
    eval("sample", sp.path(), &["--per-row", "2", "--episode-from", "train"]);
    assert!(sp.path().join("input_t00.png").is_file() && sp.path().join("sample_t02_01.png").is_file());

    let dg = tempfile::tempdir().unwrap();
    eval("diagnostics", dg.path(), &["--episodes", "2"]);
    let diag = fs::read_to_string(dg.path().join("diagnostics.csv")).unwrap();
    assert!(diag.contains("prior_entropy,mean") && diag.contains("train_elbo_ema,mean"));
}

#[test]
fn checkpoint_problems_are_categorized() {
    let root = tempfile::tempdir().unwrap();
    synthetic_root(root.path());
    let run = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_tiny(root.path(), run.path(), &[])), 0);
    let ck = run.path().join("ckpt_0000004.gmnk");
    let out = tempfile::tempdir().unwrap();
    let base = ["eval-nll", "--checkpoint", ck.to_str().unwrap(), "--data-root", root.path().to_str().unwrap(), "--out", out.path().to_str().unwrap()];
    let mut args = base.to_vec();
    args.extend_from_slice(&["--preset", "reduced"]);
    assert_eq!(code(&gmn(&args)), 5);
    let mut bytes = fs::read(&ck).unwrap();
    bytes[40] ^= 1;
    fs::write(&ck, bytes).unwrap();
    let o = gmn(&base);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("checksum"));
}

#[test]
fn resume_continues_a_run() {
    let root = tempfile::tempdir().unwrap();
    synthetic_root(root.path());
    let whole = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_tiny(root.path(), whole.path(), &[])), 0);
    let part = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_steps(root.path(), part.path(), "2", &[])), 0);
    let ck = part.path().join("ckpt_0000002.gmnk");
    let o = train_tiny(root.path(), part.path(), &["--resume", ck.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(whole.path().join("ckpt_0000004.gmnk")).unwrap(), fs::read(part.path().join("ckpt_0000004.gmnk")).unwrap());
    assert_eq!(fs::read(whole.path().join("metrics.jsonl")).unwrap(), fs::read(part.path().join("metrics.jsonl")).unwrap());
}

#[test]
fn ingest_reports_layout_problems() {
    let src = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    fs::create_dir_all(src.path().join("images_background/Latin/character01")).unwrap();
    let o = gmn(&["ingest-omniglot", "--source", src.path().to_str().unwrap(), "--data-root", root.path().to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    let err = stderr(&o);
    assert!(err.contains("1 alphabets, expected 30") && err.contains("0 images, expected 20"), "{err}");
}

#[test]
fn ingest_mnist_from_idx_files() {
    let src = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let n = 10_000u32;
    let mut images = 0x0803u32.to_be_bytes().to_vec();
    for d in [n, 28, 28] {
        images.extend_from_slice(&d.to_be_bytes());
    }
    images.extend((0..n as usize * 784).map(|i| (i % 251) as u8));
    let mut labels = 0x0801u32.to_be_bytes().to_vec();
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend((0..n).map(|i| (i % 10) as u8));
    fs::write(src.path().join("t10k-images-idx3-ubyte"), images).unwrap();
    fs::write(src.path().join("t10k-labels-idx1-ubyte"), labels).unwrap();
    let args = ["ingest-mnist", "--source", src.path().to_str().unwrap(), "--data-root", root.path().to_str().unwrap()];
    let o = gmn(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("10000 MNIST test digits"));
    let o = gmn(&args);
    assert!(String::from_utf8_lossy(&o.stdout).contains("(unchanged)"));
}
