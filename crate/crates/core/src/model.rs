//! The conditional generative model: data-dependent prior, recognition model,
//! matched decoder, variational bound and sampling.

use std::f64::consts::{E, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{GmnError, Result};
use crate::glyph::{BinaryImage, PIXELS};
use crate::matching::{full_context_match, prior_match, ConditioningSetEmbedding, Kernel, MatchQuery};
use crate::nn::{Architecture, Controller, HeadRole, Network};
use crate::params::{ParamGrads, ParameterStore};
use crate::real::Real;

/// Bounds applied to every predicted log-variance.
pub const LOG_VARIANCE_MIN: f64 = -10.0;
pub const LOG_VARIANCE_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian over the latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl DiagGaussian {
    /// Clamps the log-variance; rejects non-finite or mismatched inputs.
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(GmnError::Shape(format!("mean of {} and log-variance of {}", mean.len(), log_variance.len())));
        }
        if mean.iter().chain(&log_variance).any(|v| !v.is_finite()) {
            return Err(GmnError::NonFinite("Gaussian parameters".into()));
        }
        let log_variance = log_variance.into_iter().map(|v| v.clamp(LOG_VARIANCE_MIN, LOG_VARIANCE_MAX)).collect();
        Ok(DiagGaussian { mean, log_variance })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian { mean: vec![0.0; dim], log_variance: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_variance.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// `log N(z | μ, diag σ²)`.
pub fn diag_gaussian_logpdf(z: &[f64], d: &DiagGaussian) -> f64 {
    debug_assert_eq!(z.len(), d.dim());
    -0.5 * z
        .iter()
        .zip(&d.mean)
        .zip(&d.log_variance)
        .map(|((z, m), lv)| LN_2PI + lv + (z - m) * (z - m) * (-lv).exp())
        .sum::<f64>()
}

/// `KL(q ‖ p)` in closed form.
pub fn diag_gaussian_kl(q: &DiagGaussian, p: &DiagGaussian) -> f64 {
    debug_assert_eq!(q.dim(), p.dim());
    0.5 * (0..q.dim())
        .map(|i| {
            let (lq, lp) = (q.log_variance[i], p.log_variance[i]);
            let dm = q.mean[i] - p.mean[i];
            lp - lq + (lq.exp() + dm * dm) * (-lp).exp() - 1.0
        })
        .sum::<f64>()
}

pub fn diag_gaussian_entropy(d: &DiagGaussian) -> f64 {
    0.5 * d.log_variance.iter().map(|lv| LN_2PI + 1.0 + lv).sum::<f64>()
}

/// Entropy of a standard normal of dimension `dim`.
pub fn standard_normal_entropy(dim: usize) -> f64 {
    0.5 * dim as f64 * (2.0 * PI * E).ln()
}

/// A reparameterized draw `z = μ + σ ⊙ ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub dist: DiagGaussian,
    pub eps: Vec<f64>,
}

pub fn reparam_sample(d: &DiagGaussian, eps: &[f64]) -> Result<LatentSample> {
    if eps.len() != d.dim() {
        return Err(GmnError::Shape(format!("noise of {} for a {}-d Gaussian", eps.len(), d.dim())));
    }
    let z = d.mean.iter().zip(d.std_dev()).zip(eps).map(|((m, s), e)| m + s * e).collect();
    Ok(LatentSample { z, dist: d.clone(), eps: eps.to_vec() })
}

/// Which model family to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Attention matching everywhere.
    Full,
    /// Matching with equal weights on every conditioning element.
    NoAttention,
    /// Unconditional VAE; ignores the conditioning set.
    Vae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    DataDependent,
    StandardNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmnConfig {
    pub latent_dim: usize,
    /// Episode length T.
    pub episode_len: usize,
    /// Maximum number of classes per training episode.
    pub max_classes: usize,
    pub shared_steps: usize,
    pub prior_steps: usize,
    pub pseudo_count: usize,
    pub variant: Variant,
    pub prior_mode: PriorMode,
    pub arch: Architecture,
}

impl Default for GmnConfig {
    fn default() -> Self {
        GmnConfig {
            latent_dim: 64,
            episode_len: 20,
            max_classes: 2,
            shared_steps: 4,
            prior_steps: 1,
            pseudo_count: 1,
            variant: Variant::Full,
            prior_mode: PriorMode::DataDependent,
            arch: Architecture::full(),
        }
    }
}

impl GmnConfig {
    /// CPU-sized model: half the filters, 100-d embeddings, `T = 10`, one class, `D_z = 16`.
    pub fn reduced() -> Self {
        GmnConfig { latent_dim: 16, episode_len: 10, max_classes: 1, arch: Architecture::reduced(), ..Self::default() }
    }

    /// Gradient-check size: `D_z = 2`, `T = 3`, 8-d embeddings.
    pub fn tiny() -> Self {
        GmnConfig { latent_dim: 2, episode_len: 3, max_classes: 2, arch: Architecture::tiny(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let fd = self.arch.feature_dim()?;
        let bad = |m: String| Err(GmnError::Config(m));
        if self.latent_dim == 0 || self.latent_dim > fd {
            return bad(format!("latent_dim must lie in 1..={fd}"));
        }
        if self.episode_len == 0 || self.max_classes == 0 {
            return bad("episode_len and max_classes must be positive".into());
        }
        if self.shared_steps == 0 || self.prior_steps == 0 {
            return bad("matching step counts must be positive".into());
        }
        if self.pseudo_count > 1 {
            return bad(format!("pseudo_count must be 0 or 1, got {}", self.pseudo_count));
        }
        if self.variant == Variant::Vae && self.prior_mode != PriorMode::StandardNormal {
            return bad("the vae variant needs prior_mode = standard_normal".into());
        }
        Ok(())
    }

    fn kernel(&self) -> Kernel {
        match self.variant {
            Variant::NoAttention => Kernel::Uniform,
            _ => Kernel::Softmax,
        }
    }

    /// Whether a query with `prefix` conditioning elements is defined.
    pub fn defined_at(&self, prefix: usize) -> bool {
        self.variant == Variant::Vae || prefix > 0 || self.pseudo_count > 0
    }
}

/// Gaussian parameters recorded on a tape, `[rows, D_z]` each.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_variance: Var,
}

impl GaussianVars {
    pub fn row<F: Real>(&self, tape: &Tape<'_, F>, row: usize) -> Result<DiagGaussian> {
        let d = tape.shape(self.mean)[1];
        let m = tape.value(self.mean)[row * d..(row + 1) * d].iter().map(|v| v.as_f64()).collect();
        let lv = tape.value(self.log_variance)[row * d..(row + 1) * d].iter().map(|v| v.as_f64()).collect();
        DiagGaussian::new(m, lv)
    }

    pub fn rows<F: Real>(&self, tape: &Tape<'_, F>) -> Result<Vec<DiagGaussian>> {
        (0..tape.shape(self.mean)[0]).map(|r| self.row(tape, r)).collect()
    }
}

/// Per-row pieces of the bound.
#[derive(Clone, Debug)]
pub struct ElboParts {
    /// `log p(x | z, X) − KL(q ‖ p)` per row, `[rows]`.
    pub terms: Var,
    pub loglik: Var,
    pub kl: Var,
    pub posterior: GaussianVars,
    pub prior: GaussianVars,
}

/// Bound of one episode: `terms[i]` belongs to position `positions[i]`.
#[derive(Clone, Debug)]
pub struct EpisodeElbo {
    pub total: Var,
    pub positions: Vec<usize>,
    pub parts: ElboParts,
}

/// Values and gradients of an episode bound.
#[derive(Clone, Debug)]
pub struct EpisodeEvaluation<F> {
    pub elbo: f64,
    /// `(position, term)` pairs.
    pub terms: Vec<(usize, f64)>,
    /// `(position, prior entropy)` pairs.
    pub prior_entropy: Vec<(usize, f64)>,
    pub grads: Option<ParamGrads<F>>,
}

/// Network handles, configuration and parameters of one model.
#[derive(Clone, Debug)]
pub struct Gmn<F: Real> {
    config: GmnConfig,
    net: Network,
    params: ParameterStore<F>,
}

fn to_real<F: Real>(v: &[f64]) -> Vec<F> {
    v.iter().map(|&x| F::from_f64(x)).collect()
}

impl<F: Real> Gmn<F> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: GmnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(&config.arch, config.latent_dim, config.pseudo_count, &mut params, &mut rng)?;
        Ok(Gmn { config, net, params })
    }

    /// Rebuild the handles for `config` and adopt `params`, which must match its layout.
    pub fn from_parts(config: GmnConfig, params: ParameterStore<F>) -> Result<Self> {
        let fresh = Gmn::<F>::new(config, 0)?;
        if !fresh.params.same_layout(&params) {
            return Err(GmnError::ConfigMismatch("parameter layout does not match the configuration".into()));
        }
        Ok(Gmn { params, ..fresh })
    }

    pub fn config(&self) -> &GmnConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &ParameterStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<F> {
        &mut self.params
    }

    pub fn cast<G: Real>(&self) -> Gmn<G> {
        Gmn { config: self.config.clone(), net: self.net.clone(), params: self.params.cast() }
    }

    fn clamp(&self, tape: &mut Tape<'_, F>, lv: Var) -> Var {
        tape.clamp(lv, F::from_f64(LOG_VARIANCE_MIN), F::from_f64(LOG_VARIANCE_MAX))
    }

    fn zeros(&self, tape: &mut Tape<'_, F>, rows: usize, width: usize) -> Var {
        tape.zeros(vec![rows, width])
    }

    /// Encode conditioning images and append the pseudo-input; all `rows` see every image.
    pub fn condition(&self, tape: &mut Tape<'_, F>, images: &[&BinaryImage], rows: usize) -> Result<ConditioningSetEmbedding> {
        if self.config.variant == Variant::Vae {
            return Ok(ConditioningSetEmbedding::new(None, 0, rows));
        }
        Ok(ConditioningSetEmbedding::encode(&self.net, tape, images, rows)?.augment_with_pseudo(&self.net))
    }

    /// Prior parameters for each conditioning row.
    pub fn prior_vars(&self, tape: &mut Tape<'_, F>, cond: &ConditioningSetEmbedding) -> Result<GaussianVars> {
        let rows = cond.rows();
        if self.config.prior_mode == PriorMode::StandardNormal {
            let mean = self.zeros(tape, rows, self.config.latent_dim);
            let log_variance = self.zeros(tape, rows, self.config.latent_dim);
            return Ok(GaussianVars { mean, log_variance });
        }
        let m = prior_match(&self.net, tape, cond, self.config.prior_steps, self.config.kernel())?;
        let (mean, lv) = self.net.gaussian_head(tape, self.net.prior_head(), m.r, m.h)?;
        let log_variance = self.clamp(tape, lv);
        Ok(GaussianVars { mean, log_variance })
    }

    /// Approximate posterior for observations with encoder features `[rows, feature_dim]`.
    pub fn posterior_vars(&self, tape: &mut Tape<'_, F>, features: Var, cond: &ConditioningSetEmbedding) -> Result<GaussianVars> {
        let (r, h) = if self.config.variant == Variant::Vae {
            let rows = tape.shape(features)[0];
            let h = self.zeros(tape, rows, self.net.hidden_dim());
            let r = self.net.embedding_head(tape, HeadRole::Query, Some(features), Some(h))?;
            (r, h)
        } else {
            let m = full_context_match(
                &self.net,
                tape,
                MatchQuery::Features(features),
                cond,
                self.config.shared_steps,
                Controller::Shared,
                self.config.kernel(),
            )?;
            (m.r, m.h)
        };
        let (mean, lv) = self.net.gaussian_head(tape, self.net.posterior_head(), r, h)?;
        let log_variance = self.clamp(tape, lv);
        Ok(GaussianVars { mean, log_variance })
    }

    /// Decoder logits `[rows, 784]` for latents `[rows, D_z]`.
    pub fn decode(&self, tape: &mut Tape<'_, F>, z: Var, cond: &ConditioningSetEmbedding) -> Result<Var> {
        let rows = tape.shape(z)[0];
        let (r, h) = if self.config.variant == Variant::Vae {
            (self.zeros(tape, rows, self.net.embed_dim()), self.zeros(tape, rows, self.net.hidden_dim()))
        } else {
            let m = full_context_match(
                &self.net,
                tape,
                MatchQuery::Latent(z),
                cond,
                self.config.shared_steps,
                Controller::Shared,
                self.config.kernel(),
            )?;
            (m.r, m.h)
        };
        self.net.decode_logits(tape, z, r, h)
    }

    /// `μ + exp(lv / 2) ⊙ ε`.
    pub fn reparam(&self, tape: &mut Tape<'_, F>, g: GaussianVars, eps: Var) -> Result<Var> {
        let half = tape.scale(g.log_variance, F::from_f64(0.5));
        let std = tape.exp(half);
        let noise = tape.mul(std, eps)?;
        tape.add(g.mean, noise)
    }

    /// Closed-form `KL(q ‖ p)` per row, `[rows]`.
    pub fn kl_rows(&self, tape: &mut Tape<'_, F>, q: GaussianVars, p: GaussianVars) -> Result<Var> {
        let dlv = tape.sub(p.log_variance, q.log_variance)?;
        let var_q = tape.exp(q.log_variance);
        let dm = tape.sub(q.mean, p.mean)?;
        let dm2 = tape.square(dm);
        let num = tape.add(var_q, dm2)?;
        let neg = tape.scale(p.log_variance, -F::one());
        let inv_p = tape.exp(neg);
        let ratio = tape.mul(num, inv_p)?;
        let sum = tape.add(dlv, ratio)?;
        let shifted = tape.add_scalar(sum, -F::one());
        let rows = tape.sum_axis(shifted, 1)?;
        Ok(tape.scale(rows, F::from_f64(0.5)))
    }

    /// Analytic-KL bound for query rows against `cond`, one noise row per query.
    pub fn elbo_rows(
        &self,
        tape: &mut Tape<'_, F>,
        features: Var,
        targets: Vec<F>,
        cond: &ConditioningSetEmbedding,
        eps: Var,
    ) -> Result<ElboParts> {
        let posterior = self.posterior_vars(tape, features, cond)?;
        let prior = self.prior_vars(tape, cond)?;
        let z = self.reparam(tape, posterior, eps)?;
        let logits = self.decode(tape, z, cond)?;
        let loglik = tape.bernoulli_loglik(logits, targets)?;
        let kl = self.kl_rows(tape, posterior, prior)?;
        let terms = tape.sub(loglik, kl)?;
        Ok(ElboParts { terms, loglik, kl, posterior, prior })
    }

    /// Positions of an episode whose conditional is defined.
    pub fn episode_positions(&self, len: usize) -> Vec<usize> {
        (0..len).filter(|&t| self.config.defined_at(t)).collect()
    }

    /// Sum over positions `t` of the bound on `log p(x_t | x_{<t})`; `eps` is `[T, D_z]`.
    pub fn episode_elbo_vars(&self, tape: &mut Tape<'_, F>, images: &[&BinaryImage], eps: &[F]) -> Result<EpisodeElbo> {
        let t_len = images.len();
        let d = self.config.latent_dim;
        if eps.len() != t_len * d {
            return Err(GmnError::Shape(format!("noise of {} for {t_len} positions of {d} latents", eps.len())));
        }
        let positions = self.episode_positions(t_len);
        if positions.is_empty() {
            return Err(GmnError::Contract("episode has no position with a defined conditional".into()));
        }
        let batch = Network::image_batch(tape, images)?;
        let all = self.net.encode(tape, batch)?;
        let features = if positions.len() == t_len { all } else { tape.gather_rows(all, positions.clone())? };
        let cond = if self.config.variant == Variant::Vae {
            ConditioningSetEmbedding::new(None, 0, positions.len())
        } else {
            ConditioningSetEmbedding::with_prefixes(Some(all), t_len, positions.clone()).augment_with_pseudo(&self.net)
        };
        let targets: Vec<F> = positions.iter().flat_map(|&t| images[t].to_real::<F>()).collect();
        let noise: Vec<F> = positions.iter().flat_map(|&t| eps[t * d..(t + 1) * d].iter().copied()).collect();
        let eps = tape.constant_from(vec![positions.len(), d], noise)?;
        let parts = self.elbo_rows(tape, features, targets, &cond, eps)?;
        let total = tape.sum_all(parts.terms);
        Ok(EpisodeElbo { total, positions, parts })
    }

    /// Episode bound with per-position terms, prior entropies and optionally gradients of the bound.
    pub fn evaluate_episode(&self, images: &[&BinaryImage], eps: &[F], with_grads: bool) -> Result<EpisodeEvaluation<F>> {
        let mut tape = Tape::new(&self.params);
        let ep = self.episode_elbo_vars(&mut tape, images, eps)?;
        let elbo = tape.scalar(ep.total).as_f64();
        let terms = ep.positions.iter().zip(tape.value(ep.parts.terms)).map(|(&t, v)| (t, v.as_f64())).collect();
        let prior_entropy = ep
            .positions
            .iter()
            .zip(ep.parts.prior.rows(&tape)?)
            .map(|(&t, g)| (t, diag_gaussian_entropy(&g)))
            .collect();
        let grads = if with_grads { Some(tape.backward(ep.total)?.into_params()) } else { None };
        Ok(EpisodeEvaluation { elbo, terms, prior_entropy, grads })
    }

    /// Sum of the per-position bounds of an episode.
    pub fn episode_elbo(&self, images: &[&BinaryImage], eps: &[F]) -> Result<f64> {
        Ok(self.evaluate_episode(images, eps, false)?.elbo)
    }

    fn query_features(&self, tape: &mut Tape<'_, F>, x: &BinaryImage) -> Result<Var> {
        let b = Network::image_batch(tape, &[x])?;
        self.net.encode(tape, b)
    }

    /// `p(z | X)`.
    pub fn prior_params(&self, cond: &[&BinaryImage]) -> Result<DiagGaussian> {
        self.check_defined(cond.len())?;
        let mut tape = Tape::new(&self.params);
        let c = self.condition(&mut tape, cond, 1)?;
        self.prior_vars(&mut tape, &c)?.row(&tape, 0)
    }

    /// `q(z | x, X)`.
    pub fn recognition_params(&self, x: &BinaryImage, cond: &[&BinaryImage]) -> Result<DiagGaussian> {
        self.check_defined(cond.len())?;
        let mut tape = Tape::new(&self.params);
        let c = self.condition(&mut tape, cond, 1)?;
        let f = self.query_features(&mut tape, x)?;
        self.posterior_vars(&mut tape, f, &c)?.row(&tape, 0)
    }

    /// `log p(x | z, X)` in nats.
    pub fn conditional_loglik(&self, x: &BinaryImage, z: &LatentSample, cond: &[&BinaryImage]) -> Result<f64> {
        Ok(self.conditional_loglik_batch(x, &[z.z.clone()], cond)?[0])
    }

    /// `log p(x | z_s, X)` for several latents at once.
    pub fn conditional_loglik_batch(&self, x: &BinaryImage, zs: &[Vec<f64>], cond: &[&BinaryImage]) -> Result<Vec<f64>> {
        self.check_defined(cond.len())?;
        let d = self.config.latent_dim;
        if zs.iter().any(|z| z.len() != d) {
            return Err(GmnError::Shape(format!("latents must have {d} entries")));
        }
        let mut tape = Tape::new(&self.params);
        let c = self.condition(&mut tape, cond, zs.len())?;
        let flat: Vec<f64> = zs.iter().flatten().copied().collect();
        let z = tape.constant_from(vec![zs.len(), d], to_real(&flat))?;
        let logits = self.decode(&mut tape, z, &c)?;
        let targets: Vec<F> = (0..zs.len()).flat_map(|_| x.to_real::<F>()).collect();
        let ll = tape.bernoulli_loglik(logits, targets)?;
        Ok(tape.value(ll).iter().map(|v| v.as_f64()).collect())
    }

    /// Single-sample analytic-KL bound on `log p(x | X)`.
    pub fn elbo_term(&self, x: &BinaryImage, cond: &[&BinaryImage], eps: &[f64]) -> Result<f64> {
        self.check_defined(cond.len())?;
        let d = self.config.latent_dim;
        if eps.len() != d {
            return Err(GmnError::Shape(format!("noise of {} for {d} latents", eps.len())));
        }
        let mut tape = Tape::new(&self.params);
        let c = self.condition(&mut tape, cond, 1)?;
        let f = self.query_features(&mut tape, x)?;
        let e = tape.constant_from(vec![1, d], to_real(eps))?;
        let parts = self.elbo_rows(&mut tape, f, x.to_real::<F>().collect(), &c, e)?;
        Ok(tape.value(parts.terms)[0].as_f64())
    }

    /// Importance log-weights `log p(x | z_s, X) + log p(z_s | X) − log q(z_s | x, X)`
    /// with `z_s = μ_q + σ_q ⊙ noise[s]`. One weight is the sampled-form bound.
    pub fn log_weights(&self, x: &BinaryImage, cond: &[&BinaryImage], noise: &[Vec<f64>], chunk: usize) -> Result<Vec<f64>> {
        self.check_defined(cond.len())?;
        let d = self.config.latent_dim;
        let (q, p) = {
            let mut tape = Tape::new(&self.params);
            let c = self.condition(&mut tape, cond, 1)?;
            let f = self.query_features(&mut tape, x)?;
            let q = self.posterior_vars(&mut tape, f, &c)?.row(&tape, 0)?;
            let p = self.prior_vars(&mut tape, &c)?.row(&tape, 0)?;
            (q, p)
        };
        let mut out = Vec::with_capacity(noise.len());
        for block in noise.chunks(chunk.max(1)) {
            let zs: Vec<Vec<f64>> = block.iter().map(|e| reparam_sample(&q, e).map(|s| s.z)).collect::<Result<_>>()?;
            if zs.iter().any(|z| z.len() != d) {
                return Err(GmnError::Shape("noise width".into()));
            }
            let ll = self.conditional_loglik_batch(x, &zs, cond)?;
            for (z, l) in zs.iter().zip(ll) {
                out.push(l + diag_gaussian_logpdf(z, &p) - diag_gaussian_logpdf(z, &q));
            }
        }
        Ok(out)
    }

    /// Draw `z ~ p(z | X)`, decode and sample pixels; returns images and pixel probabilities.
    pub fn generate<R: Rng + ?Sized>(&self, cond: &[&BinaryImage], count: usize, rng: &mut R) -> Result<Vec<(BinaryImage, Vec<f64>)>> {
        let prior = self.prior_params(cond)?;
        let zs: Vec<Vec<f64>> = (0..count)
            .map(|_| {
                let eps: Vec<f64> = (0..prior.dim()).map(|_| rng.sample(StandardNormal)).collect();
                reparam_sample(&prior, &eps).map(|s| s.z)
            })
            .collect::<Result<_>>()?;
        let mut tape = Tape::new(&self.params);
        let c = self.condition(&mut tape, cond, count)?;
        let flat: Vec<f64> = zs.iter().flatten().copied().collect();
        let z = tape.constant_from(vec![count, prior.dim()], to_real(&flat))?;
        let logits = self.decode(&mut tape, z, &c)?;
        let values = tape.value(logits);
        Ok((0..count)
            .map(|s| {
                let probs: Vec<f64> = values[s * PIXELS..(s + 1) * PIXELS].iter().map(|&l| sigmoid(l).as_f64()).collect();
                let mut it = probs.iter();
                let img = BinaryImage::from_fn(|_, _| rng.random::<f64>() < *it.next().unwrap());
                (img, probs)
            })
            .collect())
    }

    fn check_defined(&self, prefix: usize) -> Result<()> {
        if !self.config.defined_at(prefix) {
            return Err(GmnError::Contract("empty conditioning set and no pseudo-input".into()));
        }
        Ok(())
    }
}

/// Standard-normal noise `[rows, dim]` as a flat vector.
pub fn standard_noise<F: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, dim: usize) -> Vec<F> {
    (0..rows * dim).map(|_| F::from_f64(rng.sample(StandardNormal))).collect()
}
