//! Input projection and the single-modality transformer stacks.
//!
//! Hidden states are kept flat as `[B * L, d_h]` rows; `SeqShape` carries
//! the batch geometry and validity mask needed by attention.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::data::{Batch, Modality};
use crate::error::{invalid, shape_err, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Normal(0, std) samples redrawn until they fall within two deviations.
pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Batch geometry shared by every attention sub-layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqShape {
    pub batch: usize,
    pub len: usize,
    /// `batch * len` validity flags.
    pub mask: Vec<bool>,
}

impl SeqShape {
    pub fn new(batch: usize, len: usize, mask: Vec<bool>) -> Result<Self> {
        if batch == 0 || len == 0 || mask.len() != batch * len {
            return shape_err(format!("sequence mask of {} flags for {batch}x{len}", mask.len()));
        }
        if let Some(b) = (0..batch).find(|b| !mask[b * len..(b + 1) * len].iter().any(|&m| m)) {
            return invalid(format!("sequence {b} has no valid slot"));
        }
        Ok(Self { batch, len, mask })
    }

    pub fn of(batch: &Batch) -> Result<Self> {
        Self::new(batch.batch_size, batch.seq_len, batch.mask.clone())
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    /// Column flags for `[batch * heads, len, len]` score tensors.
    fn head_valid(&self, heads: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.batch * heads * self.len);
        for b in 0..self.batch {
            for _ in 0..heads {
                out.extend_from_slice(&self.mask[b * self.len..(b + 1) * self.len]);
            }
        }
        out
    }
}

/// `x · W (+ b)` with `W` stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), trunc_normal(&[d_in, d_out], std, rng))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let y = g.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b)?;
                g.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.tape.layer_norm(x, gamma, beta, eps)
    }
}

/// One attention sub-layer followed by the feed-forward sub-layer, each
/// with a residual connection and post layer norm.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_att: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln_ff: LayerNormParams,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, s) = (cfg.d_h, cfg.init_std);
        let inner = cfg.ff_mult * d;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, s, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, s, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, s, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, s, rng)?,
            ln_att: LayerNormParams::new(store, &format!("{name}.ln_att"), d)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, inner, true, s, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), inner, d, true, s, rng)?,
            ln_ff: LayerNormParams::new(store, &format!("{name}.ln_ff"), d)?,
        })
    }

    /// Attention weights `softmax(q(query_src) · k(key_src)ᵀ / scale)` over
    /// valid columns, shaped `[batch * heads, len, len]`.
    pub fn weights(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        seq: &SeqShape,
        query_src: Var,
        key_src: Var,
    ) -> Result<Var> {
        let q = self.q.forward(g, query_src)?;
        let k = self.k.forward(g, key_src)?;
        let q = g.tape.split_heads(q, seq.batch, seq.len, cfg.n_heads)?;
        let k = g.tape.split_heads(k, seq.batch, seq.len, cfg.n_heads)?;
        let scores = g.tape.bmm_nt(q, k)?;
        g.tape
            .masked_softmax(scores, &seq.head_valid(cfg.n_heads), cfg.attention_divisor())
    }

    /// Updates `own` using attention weights from `query_src` against
    /// `key_src`, always aggregating `own`'s values. With all three equal
    /// this is ordinary self-attention.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        seq: &SeqShape,
        own: Var,
        query_src: Var,
        key_src: Var,
        trace: Option<String>,
    ) -> Result<Var> {
        let att = self.weights(g, cfg, seq, query_src, key_src)?;
        if let Some(name) = trace {
            g.record(name, att);
        }
        let v = self.v.forward(g, own)?;
        let v = g.tape.split_heads(v, seq.batch, seq.len, cfg.n_heads)?;
        let ctx = g.tape.bmm_nn(att, v)?;
        let ctx = g.tape.merge_heads(ctx, seq.batch, seq.len, cfg.n_heads)?;
        let a = self.o.forward(g, ctx)?;
        let a = g.dropout(a, cfg.dropout)?;
        let h = g.tape.add(a, own)?;
        let h_att = self.ln_att.forward(g, h, cfg.ln_eps)?;

        let f = self.ff1.forward(g, h_att)?;
        let f = g.tape.gelu(f)?;
        let f = self.ff2.forward(g, f)?;
        let f = g.dropout(f, cfg.dropout)?;
        let h = g.tape.add(f, h_att)?;
        self.ln_ff.forward(g, h, cfg.ln_eps)
    }
}

/// Single-modality self-attention layer.
pub fn self_attention_layer(
    g: &mut Graph,
    cfg: &ModelConfig,
    seq: &SeqShape,
    h: Var,
    layer: &AttentionBlock,
) -> Result<Var> {
    layer.forward(g, cfg, seq, h, h, h, None)
}

/// Projection of raw features and box coordinates to the hidden size,
/// plus the learned separator embedding of each modality.
#[derive(Clone, Debug)]
pub struct InputProjection {
    /// `[d_lang, d_h]`
    pub w_lang: ParamId,
    /// `[d_visn, d_h]`
    pub w_visn: ParamId,
    /// `[4, d_h]`, shared by both modalities.
    pub w_pos: ParamId,
    pub sep_lang: ParamId,
    pub sep_visn: ParamId,
}

impl InputProjection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let s = cfg.init_std;
        Ok(Self {
            w_lang: store.add("input.w_lang", trunc_normal(&[cfg.d_lang, cfg.d_h], s, rng))?,
            w_visn: store.add("input.w_visn", trunc_normal(&[cfg.d_visn, cfg.d_h], s, rng))?,
            w_pos: store.add("input.w_pos", trunc_normal(&[4, cfg.d_h], s, rng))?,
            sep_lang: store.add("input.sep_lang", trunc_normal(&[cfg.d_h], s, rng))?,
            sep_visn: store.add("input.sep_visn", trunc_normal(&[cfg.d_h], s, rng))?,
        })
    }
}

/// `h = x_feat · W_feat + x_pos · W_pos` per slot, for both modalities.
/// Padded slots hold zero inputs and therefore stay zero; separator slots
/// additionally receive their modality's learned embedding.
pub fn project_inputs(g: &mut Graph, proj: &InputProjection, batch: &Batch) -> Result<(Var, Var)> {
    let rows = batch.batch_size * batch.seq_len;
    let w_lang = g.param(proj.w_lang)?;
    let w_visn = g.param(proj.w_visn)?;
    let w_pos = g.param(proj.w_pos)?;
    if g.tape.shape(w_lang)[0] != batch.d_lang() || g.tape.shape(w_visn)[0] != batch.d_visn() {
        return shape_err(format!(
            "batch features are {}/{} wide but the model expects {}/{}",
            batch.d_lang(),
            batch.d_visn(),
            g.tape.shape(w_lang)[0],
            g.tape.shape(w_visn)[0]
        ));
    }
    let lang = g.tape.constant(batch.lang.clone().reshape(&[rows, batch.d_lang()])?)?;
    let visn = g.tape.constant(batch.visn.clone().reshape(&[rows, batch.d_visn()])?)?;
    let pos = g.tape.constant(batch.pos.clone().reshape(&[rows, 4])?)?;
    let p = g.tape.matmul(pos, w_pos)?;
    let t = g.tape.matmul(lang, w_lang)?;
    let t = g.tape.add(t, p)?;
    let v = g.tape.matmul(visn, w_visn)?;
    let v = g.tape.add(v, p)?;
    let seps = batch.sep_rows();
    if seps.is_empty() {
        return Ok((t, v));
    }
    let sep_lang = g.param(proj.sep_lang)?;
    let sep_visn = g.param(proj.sep_visn)?;
    Ok((
        g.tape.add_at_rows(t, sep_lang, &seps)?,
        g.tape.add_at_rows(v, sep_visn, &seps)?,
    ))
}

/// Stack of self-attention layers for one modality; textual and visual
/// stacks never share parameters.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub modality: Modality,
    pub layers: Vec<AttentionBlock>,
}

impl EncoderStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        modality: Modality,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..cfg.n_single_layers)
            .map(|l| AttentionBlock::new(store, &format!("{}.layer{l}", modality.tag()), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { modality, layers })
    }
}

/// Applies the stack's layers in order; an empty stack is the identity.
pub fn encode_modality(g: &mut Graph, cfg: &ModelConfig, seq: &SeqShape, h0: Var, stack: &EncoderStack) -> Result<Var> {
    let mut h = h0;
    for (l, layer) in stack.layers.iter().enumerate() {
        let name = format!("{}.layer{l}", stack.modality.tag());
        h = layer.forward(g, cfg, seq, h, h, h, Some(name))?;
    }
    Ok(h)
}
