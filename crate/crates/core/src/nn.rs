//! Network building blocks: residual feature encoder, transposed-conv
//! generator, affine embedding heads and the GRU controller.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::conv::{conv_out_side, conv_transpose_out_side, same_padding};
use crate::autodiff::{Tape, Var};
use crate::error::{GmnError, Result};
use crate::glyph::{BinaryImage, PIXELS, SIDE};
use crate::params::{Init, ParamGroup, ParamId, ParameterStore};
use crate::real::Real;

pub use crate::autodiff::prelu;

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

/// One residual block: `kernel1`/`kernel2` are `(width, height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlockSpec {
    pub kernel1: (usize, usize),
    pub kernel2: (usize, usize),
    pub filters: usize,
    pub stride: usize,
}

impl ResidualBlockSpec {
    pub const fn new(kernel1: (usize, usize), kernel2: (usize, usize), filters: usize, stride: usize) -> Self {
        ResidualBlockSpec { kernel1, kernel2, filters, stride }
    }

    pub fn validate(&self) -> Result<()> {
        let sides = [self.kernel1.0, self.kernel1.1, self.kernel2.0, self.kernel2.1];
        if self.stride == 0 || self.filters == 0 || sides.contains(&0) {
            return Err(GmnError::Config(format!("invalid residual block {self:?}")));
        }
        Ok(())
    }

    pub fn with_filters(self, filters: usize) -> Self {
        ResidualBlockSpec { filters, ..self }
    }
}

pub const ENCODER_BLOCKS: [ResidualBlockSpec; 3] = [
    ResidualBlockSpec::new((4, 4), (3, 3), 16, 2),
    ResidualBlockSpec::new((3, 3), (3, 3), 16, 2),
    ResidualBlockSpec::new((2, 2), (2, 2), 32, 2),
];

pub const DECODER_BLOCKS: [ResidualBlockSpec; 3] = [
    ResidualBlockSpec::new((2, 2), (2, 2), 32, 2),
    ResidualBlockSpec::new((3, 3), (3, 3), 16, 2),
    ResidualBlockSpec::new((4, 4), (3, 3), 16, 2),
];

/// Layer widths of the whole network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: Vec<ResidualBlockSpec>,
    pub decoder: Vec<ResidualBlockSpec>,
    /// Width of the matching and prototype spaces.
    pub embed_dim: usize,
    /// Controller state width.
    pub hidden_dim: usize,
}

impl Architecture {
    /// Full-size network: 288 features, 200-d embeddings and controller.
    pub fn full() -> Self {
        Architecture { encoder: ENCODER_BLOCKS.to_vec(), decoder: DECODER_BLOCKS.to_vec(), embed_dim: 200, hidden_dim: 200 }
    }

    /// Half the convolution filters and 100-d embeddings, for CPU training.
    pub fn reduced() -> Self {
        Architecture {
            encoder: ENCODER_BLOCKS.iter().map(|b| b.with_filters(b.filters / 2)).collect(),
            decoder: DECODER_BLOCKS.iter().map(|b| b.with_filters(b.filters / 2)).collect(),
            embed_dim: 100,
            hidden_dim: 100,
        }
    }

    /// Few-parameter network with the same geometry, for gradient checks.
    pub fn tiny() -> Self {
        Architecture {
            encoder: ENCODER_BLOCKS.iter().map(|b| b.with_filters(2)).collect(),
            decoder: DECODER_BLOCKS.iter().map(|b| b.with_filters(2)).collect(),
            embed_dim: 8,
            hidden_dim: 8,
        }
    }

    /// Spatial sides through the encoder, starting at the image side.
    pub fn encoder_sides(&self) -> Result<Vec<usize>> {
        let mut sides = vec![SIDE];
        for b in &self.encoder {
            b.validate()?;
            let s = *sides.last().unwrap();
            let h = conv_out_side(s, b.kernel1.1, b.stride, 0);
            let w = conv_out_side(s, b.kernel1.0, b.stride, 0);
            match (h, w) {
                (Some(h), Some(w)) if h == w => sides.push(h),
                _ => return Err(GmnError::Config(format!("encoder block {b:?} does not fit a {s}×{s} input"))),
            }
        }
        Ok(sides)
    }

    /// Spatial sides through the decoder, starting at the encoder's output side.
    pub fn decoder_sides(&self) -> Result<Vec<usize>> {
        let mut sides = vec![self.feature_side()?];
        for b in &self.decoder {
            b.validate()?;
            let s = *sides.last().unwrap();
            let h = conv_transpose_out_side(s, b.kernel1.1, b.stride);
            let w = conv_transpose_out_side(s, b.kernel1.0, b.stride);
            if h != w {
                return Err(GmnError::Config(format!("decoder block {b:?} yields a non-square map")));
            }
            sides.push(h);
        }
        Ok(sides)
    }

    pub fn feature_side(&self) -> Result<usize> {
        Ok(*self.encoder_sides()?.last().unwrap())
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder.last().map_or(1, |b| b.filters)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let s = self.feature_side()?;
        Ok(s * s * self.feature_channels())
    }

    /// Check both spatial chains and the layer widths.
    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(GmnError::Config("encoder and decoder need at least one block".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(GmnError::Config("embedding and controller widths must be positive".into()));
        }
        let end = *self.decoder_sides()?.last().unwrap();
        if end != SIDE {
            return Err(GmnError::Config(format!("decoder ends at {end}×{end}, expected {SIDE}×{SIDE}")));
        }
        Ok(())
    }
}

/// Which embedding function a head computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadRole {
    /// Generative and recognition query (one function).
    Query,
    /// Matching-space key.
    Key,
    /// Prototype extractor.
    Prototype,
    /// Prior query, fed the controller state only.
    PriorQuery,
    /// Prior key; resolves to the same parameters as [`HeadRole::Key`].
    PriorKey,
}

/// Controller selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Controller {
    /// Used by both generative and recognition matching.
    Shared,
    Prior,
}

#[derive(Clone, Debug)]
struct Block {
    spec: ResidualBlockSpec,
    out_side: usize,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    skip_w: ParamId,
    skip_b: ParamId,
    slope: ParamId,
}

/// Affine head followed by PReLU over `[features; h]`.
#[derive(Clone, Debug)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
    pub slope: ParamId,
    pub feature_width: usize,
    pub state_width: usize,
}

/// Plain affine map.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

/// GRU weights: `w_in: [in, 3H]` (update, reset, candidate), `u_gates: [H, 2H]`,
/// `u_cand: [H, H]`, `bias: [3H]`, trainable initial state `h0: [H]`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_in: ParamId,
    pub u_gates: ParamId,
    pub u_cand: ParamId,
    pub bias: ParamId,
    pub h0: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Trainable key and prototype appended to every conditioning set.
#[derive(Clone, Copy, Debug)]
pub struct PseudoInput {
    pub key: ParamId,
    pub proto: ParamId,
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / ((1.0 + PRELU_INIT * PRELU_INIT) * fan_in as f64)).sqrt()
}

struct Registrar<'a, F: Real, R: Rng + ?Sized> {
    store: &'a mut ParameterStore<F>,
    rng: &'a mut R,
}

impl<F: Real, R: Rng + ?Sized> Registrar<'_, F, R> {
    fn reg(&mut self, name: &str, group: ParamGroup, shape: Vec<usize>, init: Init) -> Result<ParamId> {
        self.store.register(name, group, shape, init, self.rng)
    }

    fn block(&mut self, prefix: &str, group: ParamGroup, spec: ResidualBlockSpec, cin: usize, out_side: usize, transposed: bool) -> Result<Block> {
        let (kw, kh) = spec.kernel1;
        let (kw2, kh2) = spec.kernel2;
        let f = spec.filters;
        let (conv1_shape, fan1) = if transposed {
            (vec![cin, f, kh, kw], (cin * kh * kw).div_ceil(spec.stride * spec.stride))
        } else {
            (vec![f, cin, kh, kw], cin * kh * kw)
        };
        Ok(Block {
            spec,
            out_side,
            conv1_w: self.reg(&format!("{prefix}.conv1.w"), group, conv1_shape, Init::Normal { std: he_std(fan1) })?,
            conv1_b: self.reg(&format!("{prefix}.conv1.b"), group, vec![f], Init::Zeros)?,
            conv2_w: self.reg(&format!("{prefix}.conv2.w"), group, vec![f, f, kh2, kw2], Init::Normal { std: he_std(f * kh2 * kw2) })?,
            conv2_b: self.reg(&format!("{prefix}.conv2.b"), group, vec![f], Init::Zeros)?,
            skip_w: self.reg(&format!("{prefix}.skip.w"), group, vec![f, cin, 1, 1], Init::Normal { std: he_std(cin) })?,
            skip_b: self.reg(&format!("{prefix}.skip.b"), group, vec![f], Init::Zeros)?,
            slope: self.reg(&format!("{prefix}.slope"), group, vec![f], Init::Constant(PRELU_INIT))?,
        })
    }

    fn head(&mut self, prefix: &str, group: ParamGroup, feature_width: usize, state_width: usize, out: usize) -> Result<Head> {
        let fan = feature_width + state_width;
        Ok(Head {
            w: self.reg(&format!("{prefix}.w"), group, vec![fan, out], Init::Normal { std: he_std(fan) })?,
            b: self.reg(&format!("{prefix}.b"), group, vec![out], Init::Zeros)?,
            slope: self.reg(&format!("{prefix}.slope"), group, vec![out], Init::Constant(PRELU_INIT))?,
            feature_width,
            state_width,
        })
    }

    fn dense(&mut self, prefix: &str, group: ParamGroup, input: usize, output: usize, std: f64) -> Result<Dense> {
        Ok(Dense {
            w: self.reg(&format!("{prefix}.w"), group, vec![input, output], Init::Normal { std })?,
            b: self.reg(&format!("{prefix}.b"), group, vec![output], Init::Zeros)?,
            input,
            output,
        })
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> Result<GruCell> {
        let g = ParamGroup::Controllers;
        let std_in = 1.0 / (input as f64).sqrt();
        let std_h = 1.0 / (hidden as f64).sqrt();
        Ok(GruCell {
            w_in: self.reg(&format!("{prefix}.w_in"), g, vec![input, 3 * hidden], Init::Normal { std: std_in })?,
            u_gates: self.reg(&format!("{prefix}.u_gates"), g, vec![hidden, 2 * hidden], Init::Normal { std: std_h })?,
            u_cand: self.reg(&format!("{prefix}.u_cand"), g, vec![hidden, hidden], Init::Normal { std: std_h })?,
            bias: self.reg(&format!("{prefix}.bias"), g, vec![3 * hidden], Init::Zeros)?,
            // a zero state would put the prior query exactly on the PReLU kink
            h0: self.reg(&format!("{prefix}.h0"), g, vec![hidden], Init::Normal { std: std_h })?,
            input,
            hidden,
        })
    }
}

/// Parameter handles for the full model; the tensors live in a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Network {
    arch: Architecture,
    latent_dim: usize,
    feature_dim: usize,
    encoder: Vec<Block>,
    decoder_in: Dense,
    decoder_in_slope: ParamId,
    decoder: Vec<Block>,
    logit_bias: ParamId,
    query: Head,
    key: Head,
    proto: Head,
    prior_query: Head,
    shared: GruCell,
    prior: GruCell,
    posterior: Dense,
    prior_out: Dense,
    pseudo: Option<PseudoInput>,
}

impl Network {
    /// Register every parameter in `store` and return the handles.
    pub fn build<F: Real, R: Rng + ?Sized>(
        arch: &Architecture,
        latent_dim: usize,
        pseudo_count: usize,
        store: &mut ParameterStore<F>,
        rng: &mut R,
    ) -> Result<Network> {
        arch.validate()?;
        let feature_dim = arch.feature_dim()?;
        if latent_dim == 0 || latent_dim > feature_dim {
            return Err(GmnError::Config(format!("latent dimension {latent_dim} must lie in 1..={feature_dim}")));
        }
        if pseudo_count > 1 {
            return Err(GmnError::Config(format!("pseudo_count must be 0 or 1, got {pseudo_count}")));
        }
        let (e, h) = (arch.embed_dim, arch.hidden_dim);
        let mut r = Registrar { store, rng };

        let enc_sides = arch.encoder_sides()?;
        let mut encoder = Vec::new();
        let mut cin = 1;
        for (i, spec) in arch.encoder.iter().enumerate() {
            encoder.push(r.block(&format!("encoder.{i}"), ParamGroup::Encoder, *spec, cin, enc_sides[i + 1], false)?);
            cin = spec.filters;
        }

        let dec_sides = arch.decoder_sides()?;
        let c0 = arch.feature_channels();
        let s0 = dec_sides[0];
        let dec_in_width = latent_dim + e + h;
        let decoder_in = r.dense("decoder.input", ParamGroup::Decoder, dec_in_width, c0 * s0 * s0, he_std(dec_in_width))?;
        let decoder_in_slope = r.reg("decoder.input.slope", ParamGroup::Decoder, vec![c0], Init::Constant(PRELU_INIT))?;
        let mut decoder = Vec::new();
        let mut cin = c0;
        for (i, spec) in arch.decoder.iter().enumerate() {
            decoder.push(r.block(&format!("decoder.{i}"), ParamGroup::Decoder, *spec, cin, dec_sides[i + 1], true)?);
            cin = spec.filters;
        }
        let logit_bias = r.reg("decoder.logit_bias", ParamGroup::Decoder, vec![1], Init::Zeros)?;

        let query = r.head("heads.query", ParamGroup::Heads, feature_dim, h, e)?;
        let key = r.head("heads.key", ParamGroup::Heads, feature_dim, h, e)?;
        let proto = r.head("heads.prototype", ParamGroup::Heads, feature_dim, h, e)?;
        let prior_query = r.head("prior.query", ParamGroup::PriorHeads, 0, h, e)?;
        let shared = r.gru("controller.shared", e, h)?;
        let prior = r.gru("controller.prior", e, h)?;
        let out_std = 1.0 / ((e + h) as f64).sqrt();
        let posterior = r.dense("heads.posterior", ParamGroup::Heads, e + h, 2 * latent_dim, out_std)?;
        let prior_out = r.dense("prior.output", ParamGroup::PriorHeads, e + h, 2 * latent_dim, out_std)?;
        let pseudo = if pseudo_count == 1 {
            let std = 1.0 / (e as f64).sqrt();
            Some(PseudoInput {
                key: r.reg("pseudo.key", ParamGroup::Pseudo, vec![1, e], Init::Normal { std })?,
                proto: r.reg("pseudo.prototype", ParamGroup::Pseudo, vec![1, e], Init::Normal { std })?,
            })
        } else {
            None
        };

        Ok(Network {
            arch: arch.clone(),
            latent_dim,
            feature_dim,
            encoder,
            decoder_in,
            decoder_in_slope,
            decoder,
            logit_bias,
            query,
            key,
            proto,
            prior_query,
            shared,
            prior,
            posterior,
            prior_out,
            pseudo,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.arch.hidden_dim
    }

    pub fn pseudo(&self) -> Option<PseudoInput> {
        self.pseudo
    }

    pub fn head(&self, role: HeadRole) -> &Head {
        match role {
            HeadRole::Query => &self.query,
            HeadRole::Key | HeadRole::PriorKey => &self.key,
            HeadRole::Prototype => &self.proto,
            HeadRole::PriorQuery => &self.prior_query,
        }
    }

    pub fn controller(&self, which: Controller) -> &GruCell {
        match which {
            Controller::Shared => &self.shared,
            Controller::Prior => &self.prior,
        }
    }

    pub fn posterior_head(&self) -> &Dense {
        &self.posterior
    }

    pub fn prior_head(&self) -> &Dense {
        &self.prior_out
    }

    /// Images as a constant `[N, 1, 28, 28]` batch.
    pub fn image_batch<F: Real>(tape: &mut Tape<'_, F>, images: &[&BinaryImage]) -> Result<Var> {
        let data: Vec<F> = images.iter().flat_map(|im| im.to_real::<F>()).collect();
        tape.constant_from(vec![images.len(), 1, SIDE, SIDE], data)
    }

    /// Encoder features `[N, feature_dim]` of a `[N, 1, 28, 28]` batch.
    pub fn encode<F: Real>(&self, tape: &mut Tape<'_, F>, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != SIDE || s[3] != SIDE {
            return Err(GmnError::Shape(format!("encoder expects [N, 1, {SIDE}, {SIDE}], got {s:?}")));
        }
        let n = s[0];
        let mut x = images;
        for b in &self.encoder {
            x = encoder_block(tape, b, x)?;
        }
        tape.reshape(x, vec![n, self.feature_dim])
    }

    /// Per-pixel logits `[B, 784]` from `[z; r; h]`.
    pub fn decode_logits<F: Real>(&self, tape: &mut Tape<'_, F>, z: Var, r: Var, h: Var) -> Result<Var> {
        let zr = tape.concat(z, r, 1)?;
        let input = tape.concat(zr, h, 1)?;
        let s = tape.shape(input).to_vec();
        if s.len() != 2 || s[1] != self.decoder_in.input {
            return Err(GmnError::Shape(format!(
                "decoder expects [B, {}] after concatenation, got {s:?}",
                self.decoder_in.input
            )));
        }
        let b = s[0];
        let w = tape.param(self.decoder_in.w);
        let bias = tape.param(self.decoder_in.b);
        let a = tape.affine(input, w, bias)?;
        let c0 = self.arch.feature_channels();
        let s0 = self.decoder_in.output / c0;
        let side = (s0 as f64).sqrt() as usize;
        let a = tape.reshape(a, vec![b, c0, side, side])?;
        let slope = tape.param(self.decoder_in_slope);
        let mut x = tape.prelu(a, slope, 1)?;
        for blk in &self.decoder {
            x = decoder_block(tape, blk, x)?;
        }
        let summed = tape.sum_axis(x, 1)?;
        let flat = tape.reshape(summed, vec![b, 1, PIXELS])?;
        let lb = tape.param(self.logit_bias);
        let out = tape.add_channel_bias(flat, lb, 1)?;
        tape.reshape(out, vec![b, PIXELS])
    }

    /// `features · W_features` without bias, `[N, embed]`. Queries may pass fewer
    /// columns than the encoder width (a latent `z`), which reads the leading rows.
    pub fn head_feature_part<F: Real>(&self, tape: &mut Tape<'_, F>, role: HeadRole, features: Var) -> Result<Var> {
        let head = self.head(role);
        let s = tape.shape(features).to_vec();
        let ok = s.len() == 2
            && s[1] > 0
            && match role {
                HeadRole::Query => s[1] <= head.feature_width,
                HeadRole::PriorQuery => false,
                _ => s[1] == head.feature_width,
            };
        if !ok {
            return Err(if role == HeadRole::PriorQuery {
                GmnError::Contract("the prior query takes the controller state only".into())
            } else {
                GmnError::Shape(format!("{role:?} head features {s:?}, width {}", head.feature_width))
            });
        }
        let w = tape.param_rows(head.w, 0, s[1])?;
        tape.matmul(features, w)
    }

    /// `h · W_state + b`, `[B, embed]`.
    pub fn head_state_part<F: Real>(&self, tape: &mut Tape<'_, F>, role: HeadRole, h: Var) -> Result<Var> {
        let head = self.head(role);
        let s = tape.shape(h);
        if s.len() != 2 || s[1] != head.state_width {
            return Err(GmnError::Shape(format!("{role:?} head state {s:?}, width {}", head.state_width)));
        }
        let w = tape.param_rows(head.w, head.feature_width, head.state_width)?;
        let b = tape.param(head.b);
        tape.affine(h, w, b)
    }

    /// PReLU with the head's slopes along the last axis.
    pub fn head_activation<F: Real>(&self, tape: &mut Tape<'_, F>, role: HeadRole, pre: Var) -> Result<Var> {
        let slope = tape.param(self.head(role).slope);
        let axis = tape.shape(pre).len() - 1;
        tape.prelu(pre, slope, axis)
    }

    /// `PReLU(W [features; h] + b)` for matching rows of `features` and `h`.
    pub fn embedding_head<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        role: HeadRole,
        features: Option<Var>,
        h: Option<Var>,
    ) -> Result<Var> {
        let h = h.ok_or_else(|| GmnError::Contract(format!("{role:?} head needs the controller state")))?;
        let state = self.head_state_part(tape, role, h)?;
        let pre = match features {
            Some(f) => {
                let fp = self.head_feature_part(tape, role, f)?;
                tape.add(fp, state)?
            }
            None if role == HeadRole::PriorQuery => state,
            None => return Err(GmnError::Contract(format!("{role:?} head needs input features"))),
        };
        self.head_activation(tape, role, pre)
    }

    /// Controller initial state repeated over `rows`.
    pub fn initial_state<F: Real>(&self, tape: &mut Tape<'_, F>, which: Controller, rows: usize) -> Result<Var> {
        let cell = self.controller(which);
        let h0 = tape.param(cell.h0);
        let h0 = tape.reshape(h0, vec![1, cell.hidden])?;
        tape.repeat(h0, rows)
    }

    pub fn gru_step<F: Real>(&self, tape: &mut Tape<'_, F>, which: Controller, h: Var, input: Var) -> Result<Var> {
        gru_step(tape, self.controller(which), h, input)
    }

    /// `[r; h] → (mean, raw log-variance)`, each `[B, latent]`.
    pub fn gaussian_head<F: Real>(&self, tape: &mut Tape<'_, F>, head: &Dense, r: Var, h: Var) -> Result<(Var, Var)> {
        let rh = tape.concat(r, h, 1)?;
        let w = tape.param(head.w);
        let b = tape.param(head.b);
        let out = tape.affine(rh, w, b)?;
        let mean = tape.slice_cols(out, 0, self.latent_dim)?;
        let logvar = tape.slice_cols(out, self.latent_dim, self.latent_dim)?;
        Ok((mean, logvar))
    }
}

fn conv_bias<F: Real>(tape: &mut Tape<'_, F>, x: Var, b: ParamId) -> Result<Var> {
    let b = tape.param(b);
    tape.add_channel_bias(x, b, 1)
}

fn same_pad(spec: &ResidualBlockSpec) -> (usize, usize, usize, usize) {
    let (top, bottom) = same_padding(spec.kernel2.1);
    let (left, right) = same_padding(spec.kernel2.0);
    (top, left, bottom, right)
}

/// `y = PReLU(conv2(h) + h) + pool(skip(x))` with `h = conv1(x)`.
fn encoder_block<F: Real>(tape: &mut Tape<'_, F>, b: &Block, x: Var) -> Result<Var> {
    let spec = &b.spec;
    let w1 = tape.param(b.conv1_w);
    let h = tape.conv2d(x, w1, spec.stride, (0, 0, 0, 0))?;
    let h = conv_bias(tape, h, b.conv1_b)?;
    let out = residual_tail(tape, b, h)?;
    let ws = tape.param(b.skip_w);
    let s = tape.conv2d(x, ws, 1, (0, 0, 0, 0))?;
    let s = conv_bias(tape, s, b.skip_b)?;
    let s = tape.avg_pool(s, spec.kernel1.1, spec.kernel1.0, spec.stride)?;
    tape.add(out, s)
}

/// Transposed-conv counterpart; the skip path is resized bilinearly.
fn decoder_block<F: Real>(tape: &mut Tape<'_, F>, b: &Block, x: Var) -> Result<Var> {
    let w1 = tape.param(b.conv1_w);
    let h = tape.conv_transpose2d(x, w1, b.spec.stride)?;
    let h = conv_bias(tape, h, b.conv1_b)?;
    let out = residual_tail(tape, b, h)?;
    let ws = tape.param(b.skip_w);
    let s = tape.conv2d(x, ws, 1, (0, 0, 0, 0))?;
    let s = conv_bias(tape, s, b.skip_b)?;
    let s = tape.bilinear_resize(s, b.out_side, b.out_side)?;
    tape.add(out, s)
}

fn residual_tail<F: Real>(tape: &mut Tape<'_, F>, b: &Block, h: Var) -> Result<Var> {
    debug_assert_eq!(tape.shape(h)[2], b.out_side);
    let w2 = tape.param(b.conv2_w);
    let c = tape.conv2d(h, w2, 1, same_pad(&b.spec))?;
    let c = conv_bias(tape, c, b.conv2_b)?;
    let sum = tape.add(c, h)?;
    let slope = tape.param(b.slope);
    tape.prelu(sum, slope, 1)
}

/// One GRU update: `z = σ(x W_z + h U_z + b_z)`, `r = σ(x W_r + h U_r + b_r)`,
/// `n = tanh(x W_n + (r ⊙ h) U_n + b_n)`, `h' = z ⊙ h + (1 − z) ⊙ n`.
pub fn gru_step<F: Real>(tape: &mut Tape<'_, F>, cell: &GruCell, h: Var, input: Var) -> Result<Var> {
    let (sh, sx) = (tape.shape(h).to_vec(), tape.shape(input).to_vec());
    if sh.len() != 2 || sx.len() != 2 || sh[0] != sx[0] || sh[1] != cell.hidden || sx[1] != cell.input {
        return Err(GmnError::Shape(format!(
            "GRU with input {} and state {} given {sx:?} and {sh:?}",
            cell.input, cell.hidden
        )));
    }
    let hd = cell.hidden;
    let w_in = tape.param(cell.w_in);
    let bias = tape.param(cell.bias);
    let xw = tape.affine(input, w_in, bias)?;
    let u_gates = tape.param(cell.u_gates);
    let hu = tape.matmul(h, u_gates)?;
    let xg = tape.slice_cols(xw, 0, 2 * hd)?;
    let gate_pre = tape.add(xg, hu)?;
    let gates = tape.sigmoid(gate_pre);
    let z = tape.slice_cols(gates, 0, hd)?;
    let r = tape.slice_cols(gates, hd, hd)?;
    let rh = tape.mul(r, h)?;
    let u_cand = tape.param(cell.u_cand);
    let rhu = tape.matmul(rh, u_cand)?;
    let xn = tape.slice_cols(xw, 2 * hd, hd)?;
    let cand_pre = tape.add(xn, rhu)?;
    let cand = tape.tanh(cand_pre);
    let diff = tape.sub(h, cand)?;
    let zd = tape.mul(z, diff)?;
    tape.add(cand, zd)
}
