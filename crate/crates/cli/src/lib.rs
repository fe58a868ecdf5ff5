//! `gmn`: ingest datasets, train, evaluate and sample generative matching networks.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use gmn_core::data::{self, sha256_hex, Split, MNIST_DEFAULT_SEED};
use gmn_core::eval::{self, NllCurve};
use gmn_core::glyph::{BinaryImage, SIDE};
use gmn_core::train::{self, checkpoint_hash, TrainConfig, TrainState};
use gmn_core::{GlyphDataset, Gmn, GmnError, OmniglotLayout, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{EvalParams, Settings};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "gmn", version, about = "Generative matching networks: ingestion, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// JSON file with any of the flag keys (underscored); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for outputs and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(clap::Args, Debug, Clone)]
pub struct WithCheckpoint {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Downscale and cache the Omniglot background/evaluation tree.
    IngestOmniglot {
        /// Directory holding images_background/ and images_evaluation/.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Binarize and cache the MNIST test digits.
    IngestMnist {
        /// Directory holding the t10k IDX files.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value_t = MNIST_DEFAULT_SEED)]
        binarize_seed: u64,
    },
    /// Train on episodes from the Omniglot training alphabets.
    Train {
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Conditional NLL curve on the Omniglot test alphabets.
    EvalNll(WithCheckpoint),
    /// Conditional NLL curve on MNIST digits.
    EvalMnist(WithCheckpoint),
    /// Few-shot classification accuracy on the Omniglot test alphabets.
    Classify(WithCheckpoint),
    /// Samples conditioned on growing prefixes of one episode.
    Sample {
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        episode_from: SplitArg,
        /// Write one PNG grid instead of separate images.
        #[arg(long)]
        grid: bool,
        #[arg(long, default_value_t = 10)]
        per_row: usize,
        #[command(flatten)]
        inner: WithCheckpoint,
    },
    /// Prior-entropy and per-position bound curves.
    Diagnostics(WithCheckpoint),
}

/// Exit status for an error.
pub fn exit_code(e: &GmnError) -> i32 {
    match e {
        GmnError::Config(_) | GmnError::Contract(_) | GmnError::Shape(_) => 3,
        GmnError::MissingCache { .. } | GmnError::Ingest { .. } | GmnError::CountMismatch(_) => 4,
        GmnError::CheckpointVersion { .. }
        | GmnError::CheckpointChecksum(_)
        | GmnError::CheckpointFormat(_)
        | GmnError::ConfigMismatch(_) => 5,
        GmnError::NonFinite(_) | GmnError::NonFiniteLoss { .. } => 6,
        GmnError::Io(_) | GmnError::Json(_) | GmnError::Image(_) | GmnError::Csv(_) => 7,
    }
}

fn category(code: i32) -> &'static str {
    match code {
        3 => "invalid input",
        4 => "dataset",
        5 => "checkpoint",
        6 => "numerical",
        7 => "i/o",
        _ => "error",
    }
}

/// Parse `argv` and run; returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error ({}): {e}", category(code));
            code
        }
    }
}

fn resolve(common: &Common) -> Result<Settings> {
    let file = match &common.config {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    let s = file.overlay(&common.settings);
    if let Some(w) = s.workers {
        if w == 0 {
            return Err(GmnError::Config("workers must be positive".into()));
        }
        // Only the first configuration of the global pool takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    Ok(s)
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Serialize)]
struct Artifact {
    file: String,
    sha256: String,
}

fn write_manifest(dir: &Path, command: &str, config: serde_json::Value, checkpoint: Option<&Path>, files: &[&str]) -> Result<()> {
    let artifacts = files
        .iter()
        .map(|f| Ok(Artifact { file: f.to_string(), sha256: sha256_hex(&fs::read(dir.join(f))?) }))
        .collect::<Result<Vec<_>>>()?;
    let checkpoint = match checkpoint {
        Some(p) => json!({ "path": p.display().to_string(), "sha256": checkpoint_hash(p)? }),
        None => serde_json::Value::Null,
    };
    let manifest = json!({
        "command": command,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "checkpoint": checkpoint,
        "artifacts": artifacts,
    });
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn load_model(ck: &WithCheckpoint, settings: &Settings) -> Result<Gmn<f32>> {
    let expected = settings.sets_model().then(|| settings.model());
    Ok(train::load_checkpoint::<f32>(&ck.checkpoint, expected.as_ref())?.model)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::IngestOmniglot { source, data_root } => {
            let root = data::data_root(data_root.as_deref());
            let out = data::ingest_omniglot(&source, &root, &OmniglotLayout::default())?;
            println!(
                "{} training and {} test classes cached in {}{}",
                out.manifest.train.classes,
                out.manifest.test.classes,
                root.display(),
                if out.wrote { "" } else { " (unchanged)" }
            );
            Ok(())
        }
        Command::IngestMnist { source, data_root, binarize_seed } => {
            let root = data::data_root(data_root.as_deref());
            let out = data::ingest_mnist_test(&source, &root, binarize_seed)?;
            println!(
                "{} MNIST test digits cached in {}{}",
                out.manifest.test.images,
                root.display(),
                if out.wrote { "" } else { " (unchanged)" }
            );
            Ok(())
        }
        Command::Train { resume, common } => cmd_train(resume, &common),
        Command::EvalNll(ck) => cmd_nll(&ck, false),
        Command::EvalMnist(ck) => cmd_nll(&ck, true),
        Command::Classify(ck) => cmd_classify(&ck),
        Command::Sample { episode_from, grid, per_row, inner } => cmd_sample(&inner, episode_from, grid, per_row),
        Command::Diagnostics(ck) => cmd_diagnostics(&ck),
    }
}

fn cmd_train(resume: Option<PathBuf>, common: &Common) -> Result<()> {
    let settings = resolve(common)?;
    let cfg = settings.train()?;
    let dir = out_dir(common, "train")?;
    let mut state = match &resume {
        Some(p) => {
            let mut s = train::load_checkpoint::<f32>(p, settings.sets_model().then_some(&cfg.model))?;
            s.config = TrainConfig { model: s.config.model.clone(), ..cfg.clone() };
            s
        }
        None => TrainState::<f32>::new(cfg.clone())?,
    };
    let dataset = data::load_omniglot(&data::data_root(settings.data_root.as_deref()), Split::Train)?;
    let summary = train::run_training(&mut state, &dataset, &dir)?;
    let last = summary.checkpoints.last().cloned().or(state.last_checkpoint.clone());
    let mut files = vec![train::METRICS_FILE.to_string()];
    files.extend(summary.checkpoints.iter().filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned())));
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    write_manifest(&dir, "train", json!({ "train": cfg, "resume": resume }), last.as_deref(), &names)?;
    if let Some(r) = summary.reports.last() {
        println!("step {}: loss {:.3}", r.step, r.loss);
    }
    println!("{} checkpoints in {}", summary.checkpoints.len(), dir.display());
    Ok(())
}

fn write_curve(dir: &Path, stem: &str, label: &str, curve: &NllCurve) -> Result<Vec<String>> {
    let csv = format!("{stem}.csv");
    let js = format!("{stem}.json");
    eval::write_curves_csv(&dir.join(&csv), &[(label, &curve.nll)])?;
    eval::write_json(&dir.join(&js), curve)?;
    Ok(vec![csv, js])
}

fn print_curve(curve: &gmn_core::PerPosition) {
    for (t, (m, se)) in curve.mean.iter().zip(&curve.se).enumerate() {
        if let (Some(m), Some(se)) = (m, se) {
            println!("t={t:<3} {m:>9.3} ± {se:.3}");
        }
    }
}

fn cmd_nll(ck: &WithCheckpoint, mnist: bool) -> Result<()> {
    let settings = resolve(&ck.common)?;
    let model = load_model(ck, &settings)?;
    let p = settings.eval(model.config())?;
    let root = data::data_root(settings.data_root.as_deref());
    let (dataset, stem, command) =
        if mnist { (data::load_mnist(&root)?, "mnist_nll", "eval-mnist") } else { (data::load_omniglot(&root, Split::Test)?, "nll", "eval-nll") };
    let dir = out_dir(&ck.common, command)?;
    let curve = eval::nll_curve(&dataset, &model, p.ctest, p.eval_len, p.episodes, p.is_samples, p.seed)?;
    let files = write_curve(&dir, stem, "gmn", &curve)?;
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    write_manifest(&dir, command, json!({ "model": model.config(), "eval": p }), Some(&ck.checkpoint), &names)?;
    print_curve(&curve.nll);
    Ok(())
}

fn cmd_classify(ck: &WithCheckpoint) -> Result<()> {
    let settings = resolve(&ck.common)?;
    let model = load_model(ck, &settings)?;
    let p = settings.eval(model.config())?;
    let dataset = data::load_omniglot(&data::data_root(settings.data_root.as_deref()), Split::Test)?;
    let dir = out_dir(&ck.common, "classify")?;
    let r = eval::few_shot_eval(&dataset, &model, p.ways, p.shots, p.episodes, p.method, p.is_samples, p.seed)?;
    eval::write_json(&dir.join("classify.json"), &r)?;
    write_manifest(&dir, "classify", json!({ "model": model.config(), "eval": p }), Some(&ck.checkpoint), &["classify.json"])?;
    println!("{}-way {}-shot accuracy {:.4} ± {:.4} over {} trials", r.ways, r.shots, r.accuracy, r.se, r.trials);
    Ok(())
}

fn glyph_png(img: &BinaryImage) -> gmn_core::eval::GrayImage {
    gmn_core::eval::GrayImage::from_fn(SIDE as u32, SIDE as u32, |x, y| {
        gmn_core::eval::Luma([if img.get(y as usize, x as usize) == 1 { 0 } else { 255 }])
    })
}

fn cmd_sample(ck: &WithCheckpoint, from: SplitArg, grid: bool, per_row: usize) -> Result<()> {
    let settings = resolve(&ck.common)?;
    let model = load_model(ck, &settings)?;
    let p: EvalParams = settings.eval(model.config())?;
    let split = if from == SplitArg::Train { Split::Train } else { Split::Test };
    let dataset: GlyphDataset = data::load_omniglot(&data::data_root(settings.data_root.as_deref()), split)?;
    let dir = out_dir(&ck.common, "sample")?;
    let mut rng = data::worker_rng(p.seed, 0);
    let ep = data::sample_episode(&dataset, p.eval_len, p.ctest, &mut rng)?;
    let imgs = ep.images();
    let mut files = Vec::new();
    if grid {
        eval::sample_grid(&model, &imgs, per_row, &mut rng)?.save(dir.join("grid.png"))?;
        files.push("grid.png".to_string());
    } else {
        for t in 0..imgs.len() {
            let name = format!("input_t{t:02}.png");
            glyph_png(imgs[t]).save(dir.join(&name))?;
            files.push(name);
            for (s, (img, _)) in model.generate(&imgs[..=t], per_row, &mut rng)?.iter().enumerate() {
                let name = format!("sample_t{t:02}_{s:02}.png");
                glyph_png(img).save(dir.join(&name))?;
                files.push(name);
            }
        }
    }
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    write_manifest(&dir, "sample", json!({ "model": model.config(), "eval": p, "per_row": per_row }), Some(&ck.checkpoint), &names)?;
    println!("{} files in {}", files.len(), dir.display());
    Ok(())
}

fn cmd_diagnostics(ck: &WithCheckpoint) -> Result<()> {
    let settings = resolve(&ck.common)?;
    let state = train::load_checkpoint::<f32>(&ck.checkpoint, settings.sets_model().then(|| settings.model()).as_ref())?;
    let model = &state.model;
    let p = settings.eval(model.config())?;
    let dataset = data::load_omniglot(&data::data_root(settings.data_root.as_deref()), Split::Test)?;
    let dir = out_dir(&ck.common, "diagnostics")?;
    let entropy = eval::prior_entropy_curve(&dataset, model, p.ctest, p.eval_len, p.episodes, p.seed)?;
    let elbo = eval::elbo_curve(&dataset, model, p.ctest, p.eval_len, p.episodes, p.seed)?;
    let ema = gmn_core::PerPosition {
        mean: state.elbo_ema.clone(),
        se: vec![None; state.elbo_ema.len()],
        count: vec![0; state.elbo_ema.len()],
    };
    eval::write_curves_csv(&dir.join("diagnostics.csv"), &[("prior_entropy", &entropy), ("elbo", &elbo), ("train_elbo_ema", &ema)])?;
    eval::write_json(&dir.join("diagnostics.json"), &json!({ "prior_entropy": entropy, "elbo": elbo, "train_elbo_ema": state.elbo_ema, "step": state.step }))?;
    write_manifest(&dir, "diagnostics", json!({ "model": model.config(), "eval": p }), Some(&ck.checkpoint), &["diagnostics.csv", "diagnostics.json"])?;
    println!("prior entropy by t:");
    print_curve(&entropy);
    Ok(())
}
