//! One-layer transformer with switchable normalization topology, unembedding,
//! attention routing and embedding initialization.
//!
//! Prediction is read from the final (`=`) position only. Training and
//! evaluation build only the part of the graph that reaches that position:
//! keys and values for every position, queries and the MLP at the last one.
//! [`trace`] evaluates every position for inspection.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AttentionSpec, Tape, Var, SPHERE_EPS};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Standard deviation of the random init, also the Fourier init amplitude.
pub const INIT_STD: f64 = 0.02;
pub const DEFAULT_TAU: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocab {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("token count {0} is not a multiple of the sequence length")]
    Ragged(usize),
    #[error("parameter {name}: {detail}")]
    Param { name: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    LayerNorm,
    RmsNorm,
    /// Residual stream projected onto the unit sphere (no affine parameters).
    Spherical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UnembedMode {
    Standard,
    /// `tau · cos(h, w_c)` for every class column `w_c`.
    BoundedCosine { tau: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Learned,
    /// Pre-softmax scores forced to zero.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub norm_mode: NormMode,
    pub unembed_mode: UnembedMode,
    pub attention_mode: AttentionMode,
    pub fourier_init: bool,
    pub fourier_freqs: Vec<usize>,
    pub init_seed: u64,
}

impl ModelConfig {
    /// The standard architecture (d_model 128, 4 heads of 32, MLP 512) with
    /// learned attention, LayerNorm and a standard unembedding.
    pub fn standard(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            seq_len: 3,
            d_model: 128,
            n_heads: 4,
            d_head: 32,
            d_mlp: 512,
            norm_mode: NormMode::LayerNorm,
            unembed_mode: UnembedMode::Standard,
            attention_mode: AttentionMode::Learned,
            fourier_init: false,
            fourier_freqs: vec![1, 2, 3, 4, 5],
            init_seed: 0,
        }
    }

    /// Spherical residual stream with the bounded cosine unembedding.
    pub fn spherical(vocab_size: usize) -> Self {
        ModelConfig {
            norm_mode: NormMode::Spherical,
            unembed_mode: UnembedMode::BoundedCosine { tau: DEFAULT_TAU },
            ..ModelConfig::standard(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.vocab_size < 2 || self.seq_len == 0 || self.d_model == 0 || self.d_mlp == 0 {
            return fail("vocab_size ≥ 2 and nonzero seq_len, d_model, d_mlp required".into());
        }
        if self.n_heads == 0 || self.n_heads * self.d_head != self.d_model {
            return fail(format!(
                "n_heads·d_head = {}·{} must equal d_model {}",
                self.n_heads, self.d_head, self.d_model
            ));
        }
        if self.norm_mode == NormMode::Spherical && self.unembed_mode == UnembedMode::Standard {
            return fail("spherical norm_mode requires the bounded_cosine unembedding".into());
        }
        if let UnembedMode::BoundedCosine { tau } = self.unembed_mode {
            if !(tau.is_finite() && tau > 0.0) {
                return fail(format!("tau must be positive, got {tau}"));
            }
        }
        if self.fourier_init {
            if 2 * self.fourier_freqs.len() > self.d_model {
                return fail(format!(
                    "{} Fourier frequencies need {} embedding dims, d_model is {}",
                    self.fourier_freqs.len(),
                    2 * self.fourier_freqs.len(),
                    self.d_model
                ));
            }
            if self.fourier_freqs.is_empty() {
                return fail("fourier_init needs at least one frequency".into());
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> Option<f64> {
        match self.unembed_mode {
            UnembedMode::Standard => None,
            UnembedMode::BoundedCosine { tau } => Some(tau),
        }
    }
}

/// Affine parameters of one normalization site.
#[derive(Clone, Debug, PartialEq)]
pub struct NormSite<T> {
    pub gamma: Tensor<T>,
    /// Present for LayerNorm, absent for RMSNorm.
    pub beta: Option<Tensor<T>>,
}

/// Learnable tensors. Per-head projections are stored side by side: head `h`
/// owns columns `h·d_head .. (h+1)·d_head` of `w_q`, `w_k` and `w_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub token_embed: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
    pub w_unembed: Tensor<T>,
    pub norm_attn: Option<NormSite<T>>,
    pub norm_mlp: Option<NormSite<T>>,
    pub norm_final: Option<NormSite<T>>,
}

const NORM_SITES: [&str; 3] = ["norm_attn", "norm_mlp", "norm_final"];

impl<T: Scalar> Params<T> {
    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("token_embed".into(), &self.token_embed),
            ("pos_embed".into(), &self.pos_embed),
            ("attn.w_q".into(), &self.w_q),
            ("attn.w_k".into(), &self.w_k),
            ("attn.w_v".into(), &self.w_v),
            ("attn.w_o".into(), &self.w_o),
            ("mlp.w_in".into(), &self.w_in),
            ("mlp.b_in".into(), &self.b_in),
            ("mlp.w_out".into(), &self.w_out),
            ("mlp.b_out".into(), &self.b_out),
            ("w_unembed".into(), &self.w_unembed),
        ];
        for (site, norm) in NORM_SITES.iter().zip(self.norm_sites()) {
            if let Some(n) = norm {
                out.push((format!("{site}.gamma"), &n.gamma));
                if let Some(b) = &n.beta {
                    out.push((format!("{site}.beta"), b));
                }
            }
        }
        out
    }

    /// Mutable counterpart of [`Params::named`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.token_embed,
            &mut self.pos_embed,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.w_unembed,
        ];
        for n in [&mut self.norm_attn, &mut self.norm_mlp, &mut self.norm_final]
            .into_iter()
            .flatten()
        {
            out.push(&mut n.gamma);
            if let Some(b) = &mut n.beta {
                out.push(b);
            }
        }
        out
    }

    fn norm_sites(&self) -> [Option<&NormSite<T>>; 3] {
        [self.norm_attn.as_ref(), self.norm_mlp.as_ref(), self.norm_final.as_ref()]
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let site = |n: &Option<NormSite<T>>| {
            n.as_ref().map(|n| NormSite {
                gamma: n.gamma.cast(),
                beta: n.beta.as_ref().map(Tensor::cast),
            })
        };
        Params {
            token_embed: self.token_embed.cast(),
            pos_embed: self.pos_embed.cast(),
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
            w_in: self.w_in.cast(),
            b_in: self.b_in.cast(),
            w_out: self.w_out.cast(),
            b_out: self.b_out.cast(),
            w_unembed: self.w_unembed.cast(),
            norm_attn: site(&self.norm_attn),
            norm_mlp: site(&self.norm_mlp),
            norm_final: site(&self.norm_final),
        }
    }

    /// Rebuilds parameters from named tensors, checking every shape against `config`.
    pub fn from_named(
        config: &ModelConfig,
        mut tensors: std::collections::BTreeMap<String, Tensor<T>>,
    ) -> Result<Self, ModelError> {
        let template = Params::<T>::zeros(config)?;
        let mut out = template.clone();
        {
            let names: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
            for (name, slot) in names.iter().zip(out.tensors_mut()) {
                let t = tensors.remove(name).ok_or_else(|| ModelError::Param {
                    name: name.clone(),
                    detail: "missing".into(),
                })?;
                if t.shape() != slot.shape() {
                    return Err(ModelError::Param {
                        name: name.clone(),
                        detail: format!("shape {:?}, expected {:?}", t.shape(), slot.shape()),
                    });
                }
                *slot = t;
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::Param {
                name: extra.clone(),
                detail: "not part of this architecture".into(),
            });
        }
        Ok(out)
    }

    /// All-zero parameters with unit norm gains; shapes follow `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (v, s, d, m) = (config.vocab_size, config.seq_len, config.d_model, config.d_mlp);
        let site = || match config.norm_mode {
            NormMode::LayerNorm => Some(NormSite {
                gamma: Tensor::full(&[d], T::one()),
                beta: Some(Tensor::zeros(&[d])),
            }),
            NormMode::RmsNorm => Some(NormSite {
                gamma: Tensor::full(&[d], T::one()),
                beta: None,
            }),
            NormMode::Spherical => None,
        };
        Ok(Params {
            token_embed: Tensor::zeros(&[v, d]),
            pos_embed: Tensor::zeros(&[s, d]),
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
            w_in: Tensor::zeros(&[d, m]),
            b_in: Tensor::zeros(&[m]),
            w_out: Tensor::zeros(&[m, d]),
            b_out: Tensor::zeros(&[d]),
            w_unembed: Tensor::zeros(&[d, v]),
            norm_attn: site(),
            norm_mlp: site(),
            norm_final: site(),
        })
    }
}

/// Seeded initialization: every weight matrix i.i.d. `N(0, 0.02²)`, biases
/// zero, norm gains one and shifts zero. Weights are drawn in the order of
/// [`Params::named`] from SplitMix64 seeded with `config.init_seed`.
///
/// With `fourier_init`, embedding dims `2j` and `2j+1` of each numeric token
/// `x ∈ [0, vocab−1)` become `0.02·cos(2π k_j x / p)` and
/// `0.02·sin(2π k_j x / p)`, where `p = vocab − 1`. The operator row keeps its
/// random values.
pub fn init_params<T: Scalar>(config: &ModelConfig) -> Result<Params<T>, ModelError> {
    let mut params = Params::<T>::zeros(config)?;
    let mut rng = SplitMix64::seed_from_u64(config.init_seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if is_random_init(name) {
            for v in t.data_mut() {
                *v = T::from_f64(normal.sample(&mut rng));
            }
        }
    }
    if config.fourier_init {
        let p = config.vocab_size - 1;
        let d = config.d_model;
        let emb = params.token_embed.data_mut();
        for x in 0..p {
            for (j, &k) in config.fourier_freqs.iter().enumerate() {
                let angle = 2.0 * PI * (k * x) as f64 / p as f64;
                emb[x * d + 2 * j] = T::from_f64(INIT_STD * angle.cos());
                emb[x * d + 2 * j + 1] = T::from_f64(INIT_STD * angle.sin());
            }
        }
    }
    Ok(params)
}

fn is_random_init(name: &str) -> bool {
    !(name.starts_with("mlp.b_") || name.starts_with("norm_"))
}

/// Tape handles for every parameter, in [`Params::named`] order.
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, params: &Params<T>, trainable: bool) -> Result<Self, ModelError> {
        let vars = params
            .named()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ParamVars(vars))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positions {
    /// Only the final position issues a query and runs the MLP.
    Last,
    /// Every position, with a causal mask.
    All,
}

/// Handles into one forward graph. Row-indexed tensors other than `logits`
/// hold one row per (sequence, queried position).
pub struct ForwardGraph {
    pub logits: Var,
    /// Residual stream entering the block (`x₀` or `Π_S(x₀)`); built only
    /// for [`Positions::All`].
    pub stream_in: Option<Var>,
    /// Residual after the attention addition (post-projection when spherical).
    pub stream_mid: Var,
    /// Residual after the MLP addition (post-projection when spherical).
    pub stream_out: Var,
    /// Post-ReLU MLP activations.
    pub mlp_hidden: Var,
    pub attention: Var,
    pub n_query: usize,
}

fn norm_site<T: Scalar>(
    tape: &mut Tape<T>,
    mode: NormMode,
    x: Var,
    vars: &[Var],
) -> Result<Var, TensorError> {
    match mode {
        NormMode::LayerNorm => tape.layer_norm(x, vars[0], vars[1]),
        NormMode::RmsNorm => tape.rms_norm(x, vars[0]),
        NormMode::Spherical => tape.l2_normalize(x, 1, SPHERE_EPS),
    }
}

/// Records the forward pass for `tokens` (flattened `[batch × seq_len]`).
pub fn build_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    config: &ModelConfig,
    tokens: &[usize],
    positions: Positions,
) -> Result<ForwardGraph, ModelError> {
    config.validate()?;
    let s = config.seq_len;
    if tokens.is_empty() || tokens.len() % s != 0 {
        return Err(ModelError::Ragged(tokens.len()));
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::Token {
            id,
            vocab: config.vocab_size,
        });
    }
    let batch = tokens.len() / s;
    let v = &vars.0;
    let (tok, pos, wq, wk, wv, wo, w_in, b_in, w_out, b_out, w_un) =
        (v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10]);
    // Norm-site parameters follow in site order: gamma[, beta] per site.
    let per_site = match config.norm_mode {
        NormMode::LayerNorm => 2,
        NormMode::RmsNorm => 1,
        NormMode::Spherical => 0,
    };
    let site = |i: usize| &v[11 + i * per_site..11 + (i + 1) * per_site];
    let mode = config.norm_mode;

    let query_positions: Vec<usize> = match positions {
        Positions::Last => vec![s - 1],
        Positions::All => (0..s).collect(),
    };
    let nq = query_positions.len();
    let vocab = config.vocab_size;
    // Each input row depends only on (position, token), so everything up to
    // the attention mixing runs on a `seq_len·vocab` table and is gathered.
    let table_row = |b: usize, p: usize| p * vocab + tokens[b * s + p];
    let all_rows: Vec<usize> = (0..batch).flat_map(|b| (0..s).map(move |p| table_row(b, p))).collect();
    let query_rows: Vec<usize> = (0..batch)
        .flat_map(|b| query_positions.iter().map(move |&p| table_row(b, p)))
        .collect();
    let last_rows: Vec<usize> = (0..batch).map(|b| b * nq + nq - 1).collect();

    let tok_ids: Vec<usize> = (0..s).flat_map(|_| 0..vocab).collect();
    let pos_ids: Vec<usize> = (0..s).flat_map(|p| std::iter::repeat_n(p, vocab)).collect();
    let tok_rows = tape.gather_rows(tok, &tok_ids)?;
    let pos_rows = tape.gather_rows(pos, &pos_ids)?;
    let x0_table = tape.add(tok_rows, pos_rows)?;

    let spherical = mode == NormMode::Spherical;
    // Spherical: the projected stream is both the residual and the sub-layer input.
    let in_table = if spherical { norm_site(tape, mode, x0_table, &[])? } else { x0_table };
    let attn_table = if spherical { in_table } else { norm_site(tape, mode, x0_table, site(0))? };

    let width = config.d_model;
    let (q, k) = match config.attention_mode {
        AttentionMode::Learned => {
            let q_table = tape.matmul(attn_table, wq)?;
            let k_table = tape.matmul(attn_table, wk)?;
            (tape.gather_rows(q_table, &query_rows)?, tape.gather_rows(k_table, &all_rows)?)
        }
        AttentionMode::Uniform => (
            tape.constant(Tensor::zeros(&[batch * nq, width]))?,
            tape.constant(Tensor::zeros(&[batch * s, width]))?,
        ),
    };
    let v_table = tape.matmul(attn_table, wv)?;
    let vproj = tape.gather_rows(v_table, &all_rows)?;
    let spec = AttentionSpec {
        n_heads: config.n_heads,
        seq_len: s,
        query_positions,
        uniform: config.attention_mode == AttentionMode::Uniform,
    };
    let attention = tape.attention(q, k, vproj, spec)?;
    let attn_out = tape.matmul(attention, wo)?;

    let resid_q = tape.gather_rows(in_table, &query_rows)?;
    let stream_in = match positions {
        Positions::All => Some(resid_q),
        Positions::Last => None,
    };
    let sum1 = tape.add(resid_q, attn_out)?;
    let stream_mid = if spherical { norm_site(tape, mode, sum1, &[])? } else { sum1 };
    let mlp_in = if spherical { stream_mid } else { norm_site(tape, mode, sum1, site(1))? };

    let pre = tape.matmul(mlp_in, w_in)?;
    let pre = tape.add_row(pre, b_in)?;
    let mlp_hidden = tape.relu(pre)?;
    let mlp_out = tape.matmul(mlp_hidden, w_out)?;
    let mlp_out = tape.add_row(mlp_out, b_out)?;
    let sum2 = tape.add(stream_mid, mlp_out)?;
    let stream_out = if spherical { norm_site(tape, mode, sum2, &[])? } else { sum2 };
    let h_final = if spherical { stream_out } else { norm_site(tape, mode, sum2, site(2))? };

    let h_last = if nq == 1 { h_final } else { tape.gather_rows(h_final, &last_rows)? };
    let logits = match config.unembed_mode {
        UnembedMode::Standard => tape.matmul(h_last, w_un)?,
        UnembedMode::BoundedCosine { tau } => {
            let hn = tape.l2_normalize(h_last, 1, SPHERE_EPS)?;
            let wn = tape.l2_normalize(w_un, 0, SPHERE_EPS)?;
            let cos = tape.matmul(hn, wn)?;
            tape.scale(cos, tau)?
        }
    };
    Ok(ForwardGraph {
        logits,
        stream_in,
        stream_mid,
        stream_out,
        mlp_hidden,
        attention,
        n_query: nq,
    })
}

/// Logits `[batch × vocab]` read at the final position.
pub fn forward<T: Scalar>(params: &Params<T>, config: &ModelConfig, tokens: &[usize]) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false)?;
    let g = build_forward(&mut tape, &vars, config, tokens, Positions::Last)?;
    Ok(tape.value(g.logits).clone())
}

/// Post-ReLU MLP activations `[batch × d_mlp]` at the final position.
pub fn mlp_activations<T: Scalar>(params: &Params<T>, config: &ModelConfig, tokens: &[usize]) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false)?;
    let g = build_forward(&mut tape, &vars, config, tokens, Positions::Last)?;
    Ok(tape.value(g.mlp_hidden).clone())
}

/// Every intermediate of a full-sequence forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub logits: Tensor<T>,
    pub stream_in: Tensor<T>,
    pub stream_mid: Tensor<T>,
    pub stream_out: Tensor<T>,
    pub mlp_hidden: Tensor<T>,
    /// `[batch][position][head][key]`, masked keys zero.
    pub attention_weights: Vec<T>,
}

pub fn trace<T: Scalar>(params: &Params<T>, config: &ModelConfig, tokens: &[usize]) -> Result<Trace<T>, ModelError> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false)?;
    let g = build_forward(&mut tape, &vars, config, tokens, Positions::All)?;
    Ok(Trace {
        logits: tape.value(g.logits).clone(),
        stream_in: tape.value(g.stream_in.expect("all positions")).clone(),
        stream_mid: tape.value(g.stream_mid).clone(),
        stream_out: tape.value(g.stream_out).clone(),
        mlp_hidden: tape.value(g.mlp_hidden).clone(),
        attention_weights: tape.attention_weights(g.attention).expect("attention node").to_vec(),
    })
}
