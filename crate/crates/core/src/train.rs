//! Episodic training: Adam on the negative mean episode bound, checkpoints and
//! running diagnostics.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{sample_episode, Episode, GlyphDataset};
use crate::error::{GmnError, Result};
use crate::model::{standard_noise, Gmn, GmnConfig};
use crate::params::{ParamGrads, ParamGroup, ParamId, ParameterStore};
use crate::real::Real;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GMNK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
/// Wall-clock timings kept apart from the metrics log in deterministic mode.
pub const TIMINGS_FILE: &str = "timings.jsonl";

fn default_true() -> bool {
    true
}

/// Optimizer, batching and bookkeeping settings of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: GmnConfig,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_episodes: usize,
    pub total_steps: u64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: GmnConfig::default(),
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_episodes: 16,
            total_steps: 20_000,
            checkpoint_interval: 1_000,
            log_interval: 50,
            clip_norm: 10.0,
            ema_decay: 0.99,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(GmnError::Config(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.epsilon <= 0.0 || self.clip_norm <= 0.0 {
            return bad("epsilon and clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.batch_episodes == 0 || self.checkpoint_interval == 0 || self.log_interval == 0 {
            return bad("batch_episodes, checkpoint_interval and log_interval must be positive");
        }
        Ok(())
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Real>(store: &ParameterStore<F>) -> Self {
        let sizes: Vec<usize> = store.entries().iter().map(|e| e.tensor.numel()).collect();
        Adam { t: 0, m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect() }
    }

    /// One bias-corrected step against `grads` (gradients of the loss).
    pub fn step<F: Real>(&mut self, store: &mut ParameterStore<F>, grads: &ParamGrads<F>, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            let id = ParamId(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads.get(id);
            let data = store.get_mut(id).data_mut();
            for j in 0..data.len() {
                let gj = g.map_or(0.0, |g| g[j].as_f64());
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let update = cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.epsilon);
                data[j] = F::from_f64(data[j].as_f64() - update);
            }
        }
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState<F: Real> {
    pub config: TrainConfig,
    pub model: Gmn<F>,
    pub optimizer: Adam,
    pub step: u64,
    /// Per-position exponential moving average of the bound terms.
    pub elbo_ema: Vec<Option<f64>>,
    pub entropy_ema: Vec<Option<f64>>,
    pub last_checkpoint: Option<PathBuf>,
}

impl<F: Real> TrainState<F> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Gmn::new(config.model.clone(), config.seed)?;
        let optimizer = Adam::new(model.params());
        let t = config.model.episode_len;
        Ok(TrainState { config, model, optimizer, step: 0, elbo_ema: vec![None; t], entropy_ema: vec![None; t], last_checkpoint: None })
    }

    /// Episode sampler stream for `step`; a function of the seed and step only,
    /// so a resumed run draws exactly what the uninterrupted one would.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5EED_0F_E915_0DE5);
        rng.set_stream(step);
        rng
    }
}

/// Episodes plus the reparameterization noise used for each.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub episodes: Vec<Episode>,
    pub noise: Vec<Vec<F>>,
}

/// Draw the batch of `step`.
pub fn sample_batch<F: Real>(state: &TrainState<F>, dataset: &GlyphDataset, step: u64) -> Result<Batch<F>> {
    let cfg = &state.config;
    let mut rng = state.step_rng(step);
    let mut episodes = Vec::with_capacity(cfg.batch_episodes);
    let mut noise = Vec::with_capacity(cfg.batch_episodes);
    for _ in 0..cfg.batch_episodes {
        episodes.push(sample_episode(dataset, cfg.model.episode_len, cfg.model.max_classes, &mut rng)?);
        noise.push(standard_noise(&mut rng, cfg.model.episode_len, cfg.model.latent_dim));
    }
    Ok(Batch { episodes, noise })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub group_norms: BTreeMap<ParamGroup, f64>,
    pub prior_entropy_mean: f64,
}

/// One Adam update on `−mean_b episode_elbo`. Episodes are evaluated in
/// parallel and reduced in batch order.
pub fn train_step<F: Real>(state: &mut TrainState<F>, batch: &Batch<F>) -> Result<StepReport> {
    if batch.episodes.is_empty() || batch.episodes.len() != batch.noise.len() {
        return Err(GmnError::Contract("batch needs one noise block per episode and at least one episode".into()));
    }
    let model = &state.model;
    let evals = batch
        .episodes
        .par_iter()
        .zip(batch.noise.par_iter())
        .map(|(ep, eps)| model.evaluate_episode(&ep.images(), eps, true))
        .collect::<Result<Vec<_>>>()?;
    let n = evals.len() as f64;
    let loss = -evals.iter().map(|e| e.elbo).sum::<f64>() / n;
    let step = state.step + 1;
    if !loss.is_finite() {
        return Err(GmnError::NonFiniteLoss { step, last_checkpoint: state.last_checkpoint.clone() });
    }
    let mut grads = ParamGrads::empty(state.model.params().len());
    for e in &evals {
        grads.add(e.grads.as_ref().expect("gradients requested"));
    }
    grads.scale(F::from_f64(-1.0 / n));
    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        return Err(GmnError::NonFiniteLoss { step, last_checkpoint: state.last_checkpoint.clone() });
    }
    let group_norms = grads.group_norms(state.model.params());
    if grad_norm > state.config.clip_norm {
        grads.scale(F::from_f64(state.config.clip_norm / grad_norm));
    }
    state.optimizer.step(state.model.params_mut(), &grads, &state.config);

    let t_len = state.elbo_ema.len();
    let mut sums = vec![(0.0, 0.0, 0usize); t_len];
    for e in &evals {
        for (&(t, term), &(_, h)) in e.terms.iter().zip(&e.prior_entropy) {
            if t < t_len {
                sums[t].0 += term;
                sums[t].1 += h;
                sums[t].2 += 1;
            }
        }
    }
    let decay = state.config.ema_decay;
    let mut entropy_total = (0.0, 0usize);
    for (t, &(term, h, count)) in sums.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let (term, h) = (term / count as f64, h / count as f64);
        entropy_total.0 += h;
        entropy_total.1 += 1;
        let blend = |old: Option<f64>, new: f64| Some(old.map_or(new, |o| decay * o + (1.0 - decay) * new));
        state.elbo_ema[t] = blend(state.elbo_ema[t], term);
        state.entropy_ema[t] = blend(state.entropy_ema[t], h);
    }
    state.step = step;
    Ok(StepReport {
        step,
        loss,
        grad_norm,
        group_norms,
        prior_entropy_mean: entropy_total.0 / entropy_total.1.max(1) as f64,
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub per_t_elbo_ema: Vec<Option<f64>>,
    pub prior_entropy_mean: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
    pub final_step: u64,
    pub reports: Vec<StepReport>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:07}.gmnk")
}

fn io_at(step: u64, path: &Path, e: std::io::Error) -> GmnError {
    GmnError::Io(std::io::Error::new(e.kind(), format!("step {step}, {}: {e}", path.display())))
}

/// Train until `state.config.total_steps`, writing checkpoints and metrics into `out_dir`.
/// A fresh state (step 0) also writes the initialization checkpoint; a resumed
/// state appends to the existing metrics log.
pub fn run_training<F: Real>(state: &mut TrainState<F>, dataset: &GlyphDataset, out_dir: &Path) -> Result<TrainSummary> {
    state.config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| io_at(state.step, out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let timings_path = out_dir.join(TIMINGS_FILE);
    let open = |path: &Path, fresh: bool| -> Result<BufWriter<File>> {
        let f = if fresh { File::create(path) } else { OpenOptions::new().create(true).append(true).open(path) };
        f.map(BufWriter::new).map_err(|e| io_at(state.step, path, e))
    };
    let fresh = state.step == 0;
    let mut metrics = open(&metrics_path, fresh)?;
    let mut timings = if state.config.deterministic { Some(open(&timings_path, fresh)?) } else { None };
    let mut checkpoints = Vec::new();
    if fresh {
        let p = out_dir.join(checkpoint_name(0));
        save_checkpoint(state, &p)?;
        checkpoints.push(p);
    }
    let started = Instant::now();
    let mut reports = Vec::new();
    while state.step < state.config.total_steps {
        let batch = sample_batch(state, dataset, state.step)?;
        let report = train_step(state, &batch)?;
        let step = report.step;
        if step % state.config.log_interval == 0 || step == state.config.total_steps {
            let elapsed = started.elapsed().as_secs_f64();
            let rec = MetricsRecord {
                step,
                loss: report.loss,
                per_t_elbo_ema: state.elbo_ema.clone(),
                prior_entropy_mean: report.prior_entropy_mean,
                wall_time: if state.config.deterministic { 0.0 } else { elapsed },
            };
            writeln!(metrics, "{}", serde_json::to_string(&rec)?).map_err(|e| io_at(step, &metrics_path, e))?;
            metrics.flush().map_err(|e| io_at(step, &metrics_path, e))?;
            if let Some(t) = timings.as_mut() {
                writeln!(t, "{{\"step\":{step},\"wall_time\":{elapsed}}}").map_err(|e| io_at(step, &timings_path, e))?;
                t.flush().map_err(|e| io_at(step, &timings_path, e))?;
            }
        }
        if step % state.config.checkpoint_interval == 0 || step == state.config.total_steps {
            let p = out_dir.join(checkpoint_name(step));
            save_checkpoint(state, &p)?;
            checkpoints.push(p);
        }
        reports.push(report);
    }
    Ok(TrainSummary { checkpoints, metrics_path, final_step: state.step, reports })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: TrainConfig,
    step: u64,
    /// The sampler stream is a pure function of `(seed, step)`.
    rng_seed: u64,
    rng_step: u64,
    elbo_ema: Vec<Option<f64>>,
    entropy_ema: Vec<Option<f64>>,
    adam_t: u64,
    tensors: Vec<TensorMeta>,
}

fn push_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize `state`: magic, version, JSON header, tensors and Adam moments as
/// little-endian `f64`, then a SHA-256 of everything before it.
pub fn checkpoint_bytes<F: Real>(state: &TrainState<F>) -> Result<Vec<u8>> {
    let params = state.model.params();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        step: state.step,
        rng_seed: state.config.seed,
        rng_step: state.step,
        elbo_ema: state.elbo_ema.clone(),
        entropy_ema: state.entropy_ema.clone(),
        adam_t: state.optimizer.t,
        tensors: params.entries().iter().map(|e| TensorMeta { name: e.name.clone(), shape: e.tensor.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (i, e) in params.entries().iter().enumerate() {
        push_f64s(&mut out, e.tensor.data().iter().map(|v| v.as_f64()));
        push_f64s(&mut out, state.optimizer.m[i].iter().copied());
        push_f64s(&mut out, state.optimizer.v[i].iter().copied());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint<F: Real>(state: &mut TrainState<F>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| io_at(state.step, &tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_at(state.step, path, e))?;
    state.last_checkpoint = Some(path.to_path_buf());
    Ok(())
}

/// Parse checkpoint bytes; the checksum is verified before anything else is read.
pub fn checkpoint_from_bytes<F: Real>(bytes: &[u8], path: &Path, expected: Option<&GmnConfig>) -> Result<TrainState<F>> {
    if bytes.len() < 16 + 32 {
        return Err(GmnError::CheckpointFormat("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(GmnError::CheckpointChecksum(path.to_path_buf()));
    }
    if body[0..4] != CHECKPOINT_MAGIC {
        return Err(GmnError::CheckpointFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(GmnError::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| GmnError::CheckpointFormat("header length".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&body[16..header_end])
        .map_err(|e| GmnError::CheckpointFormat(format!("header: {e}")))?;
    if let Some(want) = expected {
        if *want != header.config.model {
            return Err(GmnError::ConfigMismatch(format!(
                "checkpoint holds {}, requested {}",
                serde_json::to_string(&header.config.model)?,
                serde_json::to_string(want)?
            )));
        }
    }
    let mut pos = header_end;
    let mut read = |n: usize| -> Result<Vec<f64>> {
        let end = pos + 8 * n;
        if end > body.len() {
            return Err(GmnError::CheckpointFormat("truncated tensor data".into()));
        }
        let v = body[pos..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        pos = end;
        Ok(v)
    };
    let fresh = Gmn::<F>::new(header.config.model.clone(), 0)?;
    let mut params = fresh.params().clone();
    if fresh.params().len() != header.tensors.len() {
        return Err(GmnError::ConfigMismatch("tensor count differs from the configuration".into()));
    }
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (i, (entry, meta)) in fresh.params().entries().iter().zip(&header.tensors).enumerate() {
        if entry.name != meta.name || entry.tensor.shape() != meta.shape.as_slice() {
            return Err(GmnError::ConfigMismatch(format!("tensor {} does not match the configuration", meta.name)));
        }
        let n = entry.tensor.numel();
        let data = read(n)?;
        let data: Vec<F> = data.into_iter().map(F::from_f64).collect();
        params.set(ParamId(i), &data)?;
        m.push(read(n)?);
        v.push(read(n)?);
    }
    if pos != body.len() {
        return Err(GmnError::CheckpointFormat("trailing bytes".into()));
    }
    let model = Gmn::from_parts(header.config.model.clone(), params)?;
    Ok(TrainState {
        config: header.config,
        model,
        optimizer: Adam { t: header.adam_t, m, v },
        step: header.step,
        elbo_ema: header.elbo_ema,
        entropy_ema: header.entropy_ema,
        last_checkpoint: Some(path.to_path_buf()),
    })
}

/// Load a checkpoint, optionally insisting on a model configuration.
pub fn load_checkpoint<F: Real>(path: &Path, expected: Option<&GmnConfig>) -> Result<TrainState<F>> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes, path, expected)
}

/// SHA-256 of a checkpoint file.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
