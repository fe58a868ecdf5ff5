//! Attention over conditioning sets: softmax kernels, prototype interpolation
//! and the controller-driven multi-step matching loop.

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{GmnError, Result};
use crate::glyph::BinaryImage;
use crate::nn::{Controller, HeadRole, Network, PseudoInput};
use crate::real::Real;

/// Normalized attention over a conditioning set.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights(Vec<f64>);

impl AttentionWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Softmax of query-key dot products, max-shifted.
pub fn attention_weights(query: &[f64], keys: &[Vec<f64>]) -> Result<AttentionWeights> {
    if keys.is_empty() {
        return Err(GmnError::Contract("attention over an empty set".into()));
    }
    let logits = keys
        .iter()
        .map(|k| {
            if k.len() != query.len() {
                return Err(GmnError::Shape(format!("key of width {} for query of width {}", k.len(), query.len())));
            }
            Ok(k.iter().zip(query).map(|(a, b)| a * b).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut out = vec![0.0; logits.len()];
    softmax_rows(&logits, &vec![true; logits.len()], 1, logits.len(), &mut out)?;
    Ok(AttentionWeights(out))
}

/// `Σ_t w_t · p_t`.
pub fn interpolate_prototypes(weights: &AttentionWeights, prototypes: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != prototypes.len() {
        return Err(GmnError::Contract(format!(
            "{} weights for {} prototypes",
            weights.len(),
            prototypes.len()
        )));
    }
    let dim = prototypes.first().map_or(0, |p| p.len());
    let mut out = vec![0.0; dim];
    for (w, p) in weights.0.iter().zip(prototypes) {
        if p.len() != dim {
            return Err(GmnError::Shape("prototypes of differing widths".into()));
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Encoded conditioning elements plus, per query row, which of them are visible.
///
/// Element `n < len` is the n-th encoded image; the pseudo-input, when present,
/// is the last element and visible to every row.
#[derive(Clone, Debug)]
pub struct ConditioningSetEmbedding {
    features: Option<Var>,
    len: usize,
    prefixes: Vec<usize>,
    pseudo: Option<PseudoInput>,
}

impl ConditioningSetEmbedding {
    /// Every row sees the whole set.
    pub fn new(features: Option<Var>, len: usize, rows: usize) -> Self {
        Self::with_prefixes(features, len, vec![len; rows])
    }

    /// Row `i` sees elements `0..prefixes[i]`.
    pub fn with_prefixes(features: Option<Var>, len: usize, prefixes: Vec<usize>) -> Self {
        debug_assert!(prefixes.iter().all(|&p| p <= len));
        ConditioningSetEmbedding { features: if len == 0 { None } else { features }, len, prefixes, pseudo: None }
    }

    /// Encode `images` once; every one of `rows` query rows sees all of them.
    pub fn encode<F: Real>(net: &Network, tape: &mut Tape<'_, F>, images: &[&BinaryImage], rows: usize) -> Result<Self> {
        if images.is_empty() {
            return Ok(Self::new(None, 0, rows));
        }
        let batch = Network::image_batch(tape, images)?;
        let features = net.encode(tape, batch)?;
        Ok(Self::new(Some(features), images.len(), rows))
    }

    /// Append the network's pseudo-input, if it has one.
    pub fn augment_with_pseudo(mut self, net: &Network) -> Self {
        self.pseudo = net.pseudo();
        self
    }

    pub fn features(&self) -> Option<Var> {
        self.features
    }

    pub fn rows(&self) -> usize {
        self.prefixes.len()
    }

    /// Encoded elements, excluding the pseudo-input.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.element_count() == 0
    }

    pub fn has_pseudo(&self) -> bool {
        self.pseudo.is_some()
    }

    /// Attention set width: encoded elements plus the pseudo-input.
    pub fn element_count(&self) -> usize {
        self.len + usize::from(self.pseudo.is_some())
    }

    /// Visible elements of each row.
    pub fn visible_counts(&self) -> Vec<usize> {
        let extra = usize::from(self.pseudo.is_some());
        self.prefixes.iter().map(|p| p + extra).collect()
    }

    fn mask(&self) -> Vec<bool> {
        let width = self.element_count();
        let mut mask = Vec::with_capacity(self.rows() * width);
        for &p in &self.prefixes {
            mask.extend((0..self.len).map(|n| n < p));
            if self.pseudo.is_some() {
                mask.push(true);
            }
        }
        mask
    }

    fn check_nonempty(&self) -> Result<()> {
        if let Some(row) = self.visible_counts().iter().position(|&c| c == 0) {
            return Err(GmnError::Contract(format!(
                "query row {row} has an empty conditioning set and no pseudo-input"
            )));
        }
        Ok(())
    }
}

/// What drives the query embedding.
#[derive(Clone, Copy, Debug)]
pub enum MatchQuery {
    /// Latent codes `[B, D_z]`, embedded by the shared query head.
    Latent(Var),
    /// Encoder features `[B, feature_dim]` of the observation, same head.
    Features(Var),
    /// Controller state only (prior matching).
    StateOnly,
}

/// Record of one matching step.
#[derive(Clone, Copy, Debug)]
pub struct MatchStep {
    /// Controller state the step's embeddings were computed with.
    pub h: Var,
    /// Attention weights `[B, element_count]`.
    pub weights: Var,
    /// Interpolated prototype `[B, embed]`.
    pub r: Var,
}

/// Output of a matching loop: `(r^K, h_{K+1})` and every step on the way.
#[derive(Clone, Debug)]
pub struct MatchState {
    pub r: Var,
    pub h: Var,
    pub step: usize,
    pub steps: Vec<MatchStep>,
}

/// Kernel used to weight the conditioning set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Softmax,
    /// Equal weight on every visible element.
    Uniform,
}

/// Repeat a `[1, E]` parameter into a `[rows, 1, E]` block.
fn pseudo_block<F: Real>(tape: &mut Tape<'_, F>, id: crate::params::ParamId, rows: usize) -> Result<Var> {
    let p = tape.param(id);
    let e = tape.numel(p);
    let p = tape.reshape(p, vec![1, 1, e])?;
    tape.repeat(p, rows)
}

/// `PReLU(W_x x_n + W_h h_b + b)` for every row and element, `[B, N', E]`,
/// with the pseudo-input's fixed vector appended.
fn element_embeddings<F: Real>(
    net: &Network,
    tape: &mut Tape<'_, F>,
    role: HeadRole,
    feature_part: Option<Var>,
    pseudo: Option<crate::params::ParamId>,
    h: Var,
) -> Result<Var> {
    let rows = tape.shape(h)[0];
    let real = match feature_part {
        Some(fp) => {
            let state = net.head_state_part(tape, role, h)?;
            let pre = tape.outer_add(state, fp)?;
            Some(net.head_activation(tape, role, pre)?)
        }
        None => None,
    };
    let extra = match pseudo {
        Some(id) => Some(pseudo_block(tape, id, rows)?),
        None => None,
    };
    match (real, extra) {
        (Some(a), Some(b)) => tape.concat(a, b, 1),
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => Err(GmnError::Contract("empty conditioning set".into())),
    }
}

/// K-step matching guided by `controller`: each step embeds the query and the
/// set given `h_k`, attends, interpolates prototypes into `r^k` and advances
/// `h_{k+1} = GRU(h_k, r^k)`.
#[allow(clippy::too_many_arguments)]
pub fn full_context_match<F: Real>(
    net: &Network,
    tape: &mut Tape<'_, F>,
    query: MatchQuery,
    cond: &ConditioningSetEmbedding,
    steps: usize,
    controller: Controller,
    kernel: Kernel,
) -> Result<MatchState> {
    if steps == 0 {
        return Err(GmnError::Contract("matching needs at least one step".into()));
    }
    cond.check_nonempty()?;
    let rows = cond.rows();
    let (query_role, key_role) = match query {
        MatchQuery::StateOnly => (HeadRole::PriorQuery, HeadRole::PriorKey),
        _ => (HeadRole::Query, HeadRole::Key),
    };
    let query_part = match query {
        MatchQuery::Latent(v) | MatchQuery::Features(v) => {
            if tape.shape(v)[0] != rows {
                return Err(GmnError::Shape(format!("{} query rows for {rows} conditioning rows", tape.shape(v)[0])));
            }
            Some(net.head_feature_part(tape, HeadRole::Query, v)?)
        }
        MatchQuery::StateOnly => None,
    };
    let (key_part, proto_part) = match cond.features {
        Some(f) if kernel == Kernel::Softmax => {
            (Some(net.head_feature_part(tape, key_role, f)?), Some(net.head_feature_part(tape, HeadRole::Prototype, f)?))
        }
        Some(f) => (None, Some(net.head_feature_part(tape, HeadRole::Prototype, f)?)),
        None => (None, None),
    };
    let mask = cond.mask();
    let uniform = if kernel == Kernel::Uniform {
        let width = cond.element_count();
        let counts = cond.visible_counts();
        let data: Vec<F> = (0..rows)
            .flat_map(|b| {
                let w = F::one() / F::from_f64(counts[b] as f64);
                mask[b * width..(b + 1) * width].iter().map(move |&m| if m { w } else { F::zero() }).collect::<Vec<_>>()
            })
            .collect();
        Some(tape.constant_from(vec![rows, width], data)?)
    } else {
        None
    };

    let mut h = net.initial_state(tape, controller, rows)?;
    let mut record = Vec::with_capacity(steps);
    for _ in 0..steps {
        let weights = match uniform {
            Some(w) => w,
            None => {
                let state = net.head_state_part(tape, query_role, h)?;
                let pre = match query_part {
                    Some(qp) => tape.add(qp, state)?,
                    None => state,
                };
                let q = net.head_activation(tape, query_role, pre)?;
                let keys = element_embeddings(net, tape, key_role, key_part, cond.pseudo.map(|p| p.key), h)?;
                let sims = tape.batched_dot(q, keys)?;
                tape.masked_softmax(sims, mask.clone())?
            }
        };
        let protos = element_embeddings(net, tape, HeadRole::Prototype, proto_part, cond.pseudo.map(|p| p.proto), h)?;
        let r = tape.weighted_sum(weights, protos)?;
        record.push(MatchStep { h, weights, r });
        h = net.gru_step(tape, controller, h, r)?;
    }
    let r = record.last().unwrap().r;
    Ok(MatchState { r, h, step: steps, steps: record })
}

/// Prior matching: the query is the prior controller's state alone.
pub fn prior_match<F: Real>(
    net: &Network,
    tape: &mut Tape<'_, F>,
    cond: &ConditioningSetEmbedding,
    steps: usize,
    kernel: Kernel,
) -> Result<MatchState> {
    full_context_match(net, tape, MatchQuery::StateOnly, cond, steps, Controller::Prior, kernel)
}

#[cfg(test)]
mod tests;
