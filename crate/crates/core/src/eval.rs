//! Importance-sampled conditional likelihoods, conditioning curves, few-shot
//! classification, prior-entropy curves and sample grids.

use std::fs;
use std::path::Path;

pub use image::{GrayImage, Luma};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, worker_rng, GlyphDataset};
use crate::error::{GmnError, Result};
use crate::glyph::{BinaryImage, SIDE};
use crate::model::{diag_gaussian_entropy, standard_normal_entropy, Gmn, PriorMode};
use crate::real::Real;

/// Latents decoded per batch when scoring importance samples.
pub const IS_CHUNK: usize = 100;

/// A model that can score importance samples drawn from its own proposal.
pub trait ImportanceModel: Sync {
    type Obs: Sync + ?Sized;

    fn latent_dim(&self) -> usize;

    /// `log p(x | z_s, X) + log p(z_s | X) − log q(z_s | x, X)` where `z_s` is the
    /// proposal's reparameterization of `noise[s]`.
    fn log_weights(&self, x: &Self::Obs, cond: &[&Self::Obs], noise: &[Vec<f64>]) -> Result<Vec<f64>>;
}

impl<F: Real> ImportanceModel for Gmn<F> {
    type Obs = BinaryImage;

    fn latent_dim(&self) -> usize {
        self.config().latent_dim
    }

    fn log_weights(&self, x: &BinaryImage, cond: &[&BinaryImage], noise: &[Vec<f64>]) -> Result<Vec<f64>> {
        Gmn::log_weights(self, x, cond, noise, IS_CHUNK)
    }
}

/// Proposal used by [`LinearGaussianToy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyProposal {
    /// `N(x/2, 1/2)`.
    ExactPosterior,
    /// `N(0, 1)`.
    Prior,
}

/// `z ~ N(0, 1)`, `x | z ~ N(z, 1)`; the conditioning set is ignored.
#[derive(Clone, Copy, Debug)]
pub struct LinearGaussianToy {
    pub proposal: ToyProposal,
}

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

impl ImportanceModel for LinearGaussianToy {
    type Obs = f64;

    fn latent_dim(&self) -> usize {
        1
    }

    fn log_weights(&self, x: &f64, _cond: &[&f64], noise: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (mq, vq): (f64, f64) = match self.proposal {
            ToyProposal::ExactPosterior => (x / 2.0, 0.5),
            ToyProposal::Prior => (0.0, 1.0),
        };
        noise
            .iter()
            .map(|e| {
                let z = mq + vq.sqrt() * e[0];
                Ok(normal_logpdf(*x, z, 1.0) + normal_logpdf(z, 0.0, 1.0) - normal_logpdf(z, mq, vq))
            })
            .collect()
    }
}

/// `log((1/S) Σ exp(w_s))`, max-shifted.
pub fn log_mean_exp(w: &[f64]) -> f64 {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (w.iter().map(|v| (v - m).exp()).sum::<f64>() / w.len() as f64).ln()
}

pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, samples: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..samples).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// Importance-sampled `−log p(x | X)` with caller-supplied proposal noise.
pub fn is_conditional_nll_with_noise<M: ImportanceModel>(x: &M::Obs, cond: &[&M::Obs], model: &M, noise: &[Vec<f64>]) -> Result<f64> {
    if noise.is_empty() {
        return Err(GmnError::Contract("importance sampling needs at least one sample".into()));
    }
    let w = model.log_weights(x, cond, noise)?;
    if let Some((s, v)) = w.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(GmnError::NonFinite(format!("importance log-weight {s} of {} is {v}", w.len())));
    }
    Ok(-log_mean_exp(&w))
}

/// Importance-sampled `−log p(x | X)` with `samples` draws from the recognition model.
pub fn is_conditional_nll<M: ImportanceModel, R: Rng + ?Sized>(
    x: &M::Obs,
    cond: &[&M::Obs],
    model: &M,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if samples == 0 {
        return Err(GmnError::Contract("importance sampling needs at least one sample".into()));
    }
    let noise = draw_noise(rng, samples, model.latent_dim());
    is_conditional_nll_with_noise(x, cond, model, &noise)
}

/// Per-position means and standard errors; `None` where nothing was measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerPosition {
    pub mean: Vec<Option<f64>>,
    pub se: Vec<Option<f64>>,
    pub count: Vec<usize>,
}

impl PerPosition {
    pub fn from_samples(per_t: &[Vec<f64>]) -> Self {
        let mut out = PerPosition { mean: Vec::new(), se: Vec::new(), count: Vec::new() };
        for v in per_t {
            out.count.push(v.len());
            if v.is_empty() {
                out.mean.push(None);
                out.se.push(None);
                continue;
            }
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let se = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt() } else { 0.0 };
            out.mean.push(Some(m));
            out.se.push(Some(se));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Mean conditional NLL (nats) against the number of conditioning examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllCurve {
    pub nll: PerPosition,
    pub episodes: usize,
    pub samples: usize,
    pub classes: usize,
}

fn check_eval_args(episodes: usize, samples: usize, len: usize) -> Result<()> {
    if episodes == 0 || samples == 0 || len == 0 {
        return Err(GmnError::Contract("episodes, samples and episode length must be positive".into()));
    }
    Ok(())
}

/// For each of `episodes` episodes of length `len` mixing up to `classes`
/// classes, estimate `−log p(x_t | x_{<t})` at every defined `t`.
/// Episode `e` draws everything from stream `e` of `seed`.
pub fn nll_curve<F: Real>(
    dataset: &GlyphDataset,
    model: &Gmn<F>,
    classes: usize,
    len: usize,
    episodes: usize,
    samples: usize,
    seed: u64,
) -> Result<NllCurve> {
    check_eval_args(episodes, samples, len)?;
    let rows = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = worker_rng(seed, e as u64);
            let ep = sample_episode(dataset, len, classes, &mut rng)?;
            let imgs = ep.images();
            (0..len)
                .map(|t| {
                    if !model.config().defined_at(t) {
                        return Ok(None);
                    }
                    is_conditional_nll(imgs[t], &imgs[..t], model, samples, &mut rng).map(Some)
                })
                .collect::<Result<Vec<Option<f64>>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NllCurve { nll: PerPosition::from_samples(&transpose(&rows, len)), episodes, samples, classes })
}

fn transpose(rows: &[Vec<Option<f64>>], len: usize) -> Vec<Vec<f64>> {
    (0..len).map(|t| rows.iter().filter_map(|r| r[t]).collect()).collect()
}

/// [`nll_curve`] on episodes drawn from the MNIST digit classes.
pub fn mnist_transfer_eval<F: Real>(
    mnist: &GlyphDataset,
    model: &Gmn<F>,
    classes: usize,
    len: usize,
    episodes: usize,
    samples: usize,
    seed: u64,
) -> Result<NllCurve> {
    nll_curve(mnist, model, classes, len, episodes, samples, seed)
}

/// Mean prior entropy (nats) against the number of conditioning examples.
pub fn prior_entropy_curve<F: Real>(dataset: &GlyphDataset, model: &Gmn<F>, classes: usize, len: usize, episodes: usize, seed: u64) -> Result<PerPosition> {
    check_eval_args(episodes, 1, len)?;
    if model.config().prior_mode == PriorMode::StandardNormal {
        let h = standard_normal_entropy(model.config().latent_dim);
        return Ok(PerPosition { mean: vec![Some(h); len], se: vec![Some(0.0); len], count: vec![episodes; len] });
    }
    let rows = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = worker_rng(seed, e as u64);
            let ep = sample_episode(dataset, len, classes, &mut rng)?;
            let imgs = ep.images();
            (0..len)
                .map(|t| {
                    if !model.config().defined_at(t) {
                        return Ok(None);
                    }
                    Ok(Some(diag_gaussian_entropy(&model.prior_params(&imgs[..t])?)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerPosition::from_samples(&transpose(&rows, len)))
}

/// Single-sample bound terms per position, paired episodes as in [`nll_curve`].
pub fn elbo_curve<F: Real>(dataset: &GlyphDataset, model: &Gmn<F>, classes: usize, len: usize, episodes: usize, seed: u64) -> Result<PerPosition> {
    check_eval_args(episodes, 1, len)?;
    let d = model.config().latent_dim;
    let rows = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = worker_rng(seed, e as u64);
            let ep = sample_episode(dataset, len, classes, &mut rng)?;
            let eps: Vec<F> = crate::model::standard_noise(&mut rng, len, d);
            let mut row = vec![None; len];
            for (t, v) in model.evaluate_episode(&ep.images(), &eps, false)?.terms {
                row[t] = Some(v);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerPosition::from_samples(&transpose(&rows, len)))
}

/// Paired differences `log p̂_IS(x | X) − ELBO(x | X)` over random test points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedGap {
    pub mean_is_loglik: f64,
    pub mean_elbo: f64,
    pub mean_diff: f64,
    pub se_diff: f64,
    pub points: usize,
}

/// Draw `points` (query, conditioning prefix) pairs from episodes of length
/// `len` and compare the IS estimate with `samples` draws to a one-sample bound.
pub fn bound_gap<F: Real>(dataset: &GlyphDataset, model: &Gmn<F>, classes: usize, len: usize, points: usize, samples: usize, seed: u64) -> Result<PairedGap> {
    check_eval_args(points, samples, len)?;
    let d = model.config().latent_dim;
    let pairs = (0..points)
        .into_par_iter()
        .map(|p| {
            let mut rng = worker_rng(seed, p as u64);
            let ep = sample_episode(dataset, len, classes, &mut rng)?;
            let imgs = ep.images();
            let lo = usize::from(!model.config().defined_at(0));
            if lo >= len {
                return Err(GmnError::Contract("no position with a defined conditional".into()));
            }
            let t = rng.random_range(lo..len);
            let ll = -is_conditional_nll(imgs[t], &imgs[..t], model, samples, &mut rng)?;
            let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            Ok((ll, model.elbo_term(imgs[t], &imgs[..t], &eps)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let mean_diff = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|v| (v - mean_diff).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(PairedGap {
        mean_is_loglik: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        mean_elbo: pairs.iter().map(|p| p.1).sum::<f64>() / n,
        mean_diff,
        se_diff: (var / n).sqrt(),
        points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifyMethod {
    /// Highest importance-sampled `p(x | X_c)`.
    Likelihood,
    /// Nearest labeled exemplar by cosine similarity of recognition means.
    Cosine,
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax_lowest(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Assign `x` to one of the labeled sets. The likelihood method scores every
/// class with the same proposal noise.
pub fn classify<F: Real, R: Rng + ?Sized>(
    x: &BinaryImage,
    labeled: &[Vec<&BinaryImage>],
    model: &Gmn<F>,
    method: ClassifyMethod,
    samples: usize,
    rng: &mut R,
) -> Result<usize> {
    if labeled.is_empty() {
        return Err(GmnError::Contract("no classes to choose from".into()));
    }
    if let Some(c) = labeled.iter().position(|s| s.is_empty()) {
        return Err(GmnError::Contract(format!("labeled set {c} is empty")));
    }
    match method {
        ClassifyMethod::Likelihood => {
            let noise = draw_noise(rng, samples.max(1), model.config().latent_dim);
            let scores = labeled
                .iter()
                .map(|set| is_conditional_nll_with_noise(x, set, model, &noise).map(|nll| -nll))
                .collect::<Result<Vec<_>>>()?;
            Ok(argmax_lowest(&scores).unwrap())
        }
        ClassifyMethod::Cosine => {
            let pool: Vec<&BinaryImage> = labeled.iter().flatten().copied().collect();
            let feature = |y: &BinaryImage| model.recognition_params(y, &pool).map(|g| g.mean);
            let fx = feature(x)?;
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (c, set) in labeled.iter().enumerate() {
                for y in set {
                    let s = cosine_similarity(&fx, &feature(y)?);
                    if s > best.0 {
                        best = (s, c);
                    }
                }
            }
            Ok(best.1)
        }
    }
}

/// One few-shot trial: labeled sets, the query and its class.
#[derive(Clone, Debug)]
pub struct FewShotTask {
    pub labeled: Vec<Vec<BinaryImage>>,
    pub query: BinaryImage,
    pub answer: usize,
}

/// Draw `ways` classes, `shots` labeled images of each, and a held-out query
/// from one of them.
pub fn sample_task<R: Rng + ?Sized>(dataset: &GlyphDataset, ways: usize, shots: usize, rng: &mut R) -> Result<FewShotTask> {
    if ways == 0 || shots == 0 {
        return Err(GmnError::Contract("ways and shots must be positive".into()));
    }
    if dataset.num_classes() < ways {
        return Err(GmnError::Contract(format!("{ways}-way task from {} classes", dataset.num_classes())));
    }
    let classes = sample_indices(rng, dataset.num_classes(), ways).into_vec();
    let answer = rng.random_range(0..ways);
    let mut labeled = Vec::with_capacity(ways);
    let mut query = None;
    for (i, &c) in classes.iter().enumerate() {
        let images = &dataset.classes[c].images;
        let need = shots + usize::from(i == answer);
        if images.len() < need {
            return Err(GmnError::Contract(format!("class {} has {} images, {need} needed", dataset.classes[c].class_id, images.len())));
        }
        let picks = sample_indices(rng, images.len(), need).into_vec();
        labeled.push(picks[..shots].iter().map(|&j| images[j].clone()).collect());
        if i == answer {
            query = Some(images[picks[shots]].clone());
        }
    }
    Ok(FewShotTask { labeled, query: query.unwrap(), answer })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub ways: usize,
    pub shots: usize,
    pub method: ClassifyMethod,
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Binomial standard error of the accuracy.
    pub se: f64,
}

/// Accuracy over `trials` tasks; trial `i` uses stream `i` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_eval<F: Real>(
    dataset: &GlyphDataset,
    model: &Gmn<F>,
    ways: usize,
    shots: usize,
    trials: usize,
    method: ClassifyMethod,
    samples: usize,
    seed: u64,
) -> Result<FewShotResult> {
    if trials == 0 {
        return Err(GmnError::Contract("at least one trial is needed".into()));
    }
    let hits = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = worker_rng(seed, i as u64);
            let task = sample_task(dataset, ways, shots, &mut rng)?;
            let sets: Vec<Vec<&BinaryImage>> = task.labeled.iter().map(|s| s.iter().collect()).collect();
            Ok(classify(&task.query, &sets, model, method, samples, &mut rng)? == task.answer)
        })
        .collect::<Result<Vec<bool>>>()?;
    let correct = hits.iter().filter(|&&h| h).count();
    let accuracy = correct as f64 / trials as f64;
    Ok(FewShotResult { ways, shots, method, trials, correct, accuracy, se: (accuracy * (1.0 - accuracy) / trials as f64).sqrt() })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Write labeled curves as CSV: one row per label and statistic, one column per `t`.
pub fn write_curves_csv(path: &Path, curves: &[(&str, &PerPosition)]) -> Result<()> {
    let len = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["series".to_string(), "stat".to_string()];
    header.extend((0..len).map(|t| format!("t={t}")));
    w.write_record(&header)?;
    for (label, c) in curves {
        for (stat, values) in [("mean", &c.mean), ("se", &c.se)] {
            let mut row = vec![label.to_string(), stat.to_string()];
            row.extend((0..len).map(|t| cell(values.get(t).copied().flatten())));
            w.write_record(&row)?;
        }
        let mut row = vec![label.to_string(), "n".to_string()];
        row.extend((0..len).map(|t| c.count.get(t).map(|n| n.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Grid with one row per revealed example: column 0 holds `x_t`, the remaining
/// `per_row` columns hold pixel probabilities of samples given `x_1..x_t`.
/// Ink is dark on a light background; cells are separated by one-pixel gaps.
pub fn sample_grid<F: Real, R: Rng + ?Sized>(model: &Gmn<F>, episode: &[&BinaryImage], per_row: usize, rng: &mut R) -> Result<GrayImage> {
    let rows = episode.len();
    let cols = per_row + 1;
    let pitch = SIDE as u32 + 1;
    let mut img = GrayImage::from_pixel(cols as u32 * pitch + 1, rows as u32 * pitch + 1, Luma([128]));
    let mut put = |r: usize, c: usize, ink: &dyn Fn(usize, usize) -> f64| {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let v = (255.0 * (1.0 - ink(y, x))).round().clamp(0.0, 255.0) as u8;
                img.put_pixel(1 + c as u32 * pitch + x as u32, 1 + r as u32 * pitch + y as u32, Luma([v]));
            }
        }
    };
    for (t, x) in episode.iter().enumerate() {
        put(t, 0, &|y, xx| x.get(y, xx) as f64);
        for (s, (_, probs)) in model.generate(&episode[..=t], per_row, rng)?.into_iter().enumerate() {
            put(t, s + 1, &|y, xx| probs[y * SIDE + xx]);
        }
    }
    Ok(img)
}
