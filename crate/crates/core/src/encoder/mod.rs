//! Sliding-window transformer encoder with global tokens and attention
//! pooling.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::ComposedSequence;
use crate::numerics::{
    GeluKind, Graph, Init, KeySets, NumericsError, ParamGroup, ParamId, ParamStore, Tensor, Var,
};

type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_tokens {max}")]
    TooLong { len: usize, max: usize },
    #[error("attention pooling needs at least one unmasked position")]
    AllMasked,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Total local window; each token sees `window / 2` tokens on either side.
    pub window: usize,
    /// Full sequence length, special tokens included.
    pub max_tokens: usize,
    pub dropout: f64,
    pub gelu: GeluKind,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            window: 16,
            max_tokens: 256,
            dropout: 0.1,
            gelu: GeluKind::Erf,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// Full-scale configuration.
    pub fn paper() -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            d_model: 512,
            d_ff: 1024,
            window: 512,
            max_tokens: 4096,
            ..Self::desk()
        }
    }

    pub fn half_window(&self) -> usize {
        self.window / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(EncoderError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.window < 1 {
            return Err(EncoderError::Config("window must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Which keys each query may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionPattern {
    pub half_width: usize,
    pub valid: Vec<bool>,
    pub global: Vec<bool>,
}

impl AttentionPattern {
    pub fn new(half_width: usize, valid: Vec<bool>, global: Vec<bool>) -> Self {
        assert_eq!(valid.len(), global.len());
        Self {
            half_width,
            valid,
            global,
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        if !self.valid[i] || !self.valid[j] {
            return false;
        }
        self.global[i] || self.global[j] || i.abs_diff(j) <= self.half_width
    }

    /// Enumerates allowed keys in `O(T·(w + |G|))`.
    pub fn key_sets(&self) -> KeySets {
        let t = self.len();
        let globals: Vec<usize> = (0..t)
            .filter(|&j| self.global[j] && self.valid[j])
            .collect();
        let lists: Vec<Vec<usize>> = (0..t)
            .map(|i| {
                if !self.valid[i] {
                    return Vec::new();
                }
                if self.global[i] {
                    return (0..t).filter(|&j| self.valid[j]).collect();
                }
                let lo = i.saturating_sub(self.half_width);
                let hi = (i + self.half_width).min(t - 1);
                let mut keys: Vec<usize> = globals
                    .iter()
                    .copied()
                    .filter(|&j| j < lo || j > hi)
                    .collect();
                keys.extend((lo..=hi).filter(|&j| self.valid[j]));
                keys.sort_unstable();
                keys
            })
            .collect();
        KeySets::from_lists(&lists)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct PoolParams {
    pub w: ParamId,
    pub u: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<LayerParams>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub pool: PoolParams,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.d_ff;
        let tn = Init::TruncatedNormal(config.init_std);
        let mut add = |name: String, shape: &[usize], init: Init| {
            store.add(
                format!("encoder.{name}"),
                shape,
                init,
                ParamGroup::Backbone,
                rng,
            )
        };
        let layers = (0..config.n_layers)
            .map(|l| LayerParams {
                ln1_gain: add(format!("layer{l}.ln1.gain"), &[1, d], Init::Ones),
                ln1_bias: add(format!("layer{l}.ln1.bias"), &[1, d], Init::Zeros),
                wq: add(format!("layer{l}.attn.wq"), &[d, d], tn),
                bq: add(format!("layer{l}.attn.bq"), &[1, d], Init::Zeros),
                wk: add(format!("layer{l}.attn.wk"), &[d, d], tn),
                bk: add(format!("layer{l}.attn.bk"), &[1, d], Init::Zeros),
                wv: add(format!("layer{l}.attn.wv"), &[d, d], tn),
                bv: add(format!("layer{l}.attn.bv"), &[1, d], Init::Zeros),
                wo: add(format!("layer{l}.attn.wo"), &[d, d], tn),
                bo: add(format!("layer{l}.attn.bo"), &[1, d], Init::Zeros),
                ln2_gain: add(format!("layer{l}.ln2.gain"), &[1, d], Init::Ones),
                ln2_bias: add(format!("layer{l}.ln2.bias"), &[1, d], Init::Zeros),
                ff_w1: add(format!("layer{l}.ff.w1"), &[d, ff], tn),
                ff_b1: add(format!("layer{l}.ff.b1"), &[1, ff], Init::Zeros),
                ff_w2: add(format!("layer{l}.ff.w2"), &[ff, d], tn),
                ff_b2: add(format!("layer{l}.ff.b2"), &[1, d], Init::Zeros),
            })
            .collect();
        let final_gain = add("final_ln.gain".into(), &[1, d], Init::Ones);
        let final_bias = add("final_ln.bias".into(), &[1, d], Init::Zeros);
        let pool = PoolParams {
            w: add("pool.w".into(), &[d, d], tn),
            u: add("pool.u".into(), &[d, 1], tn),
        };
        Ok(Self {
            config,
            layers,
            final_gain,
            final_bias,
            pool,
        })
    }

    pub fn pattern(&self, seq: &ComposedSequence) -> AttentionPattern {
        AttentionPattern::new(
            self.config.half_window(),
            seq.valid.clone(),
            seq.global.clone(),
        )
    }

    /// One pre-norm block: `x + Attn(LN(x))`, then `x + FF(LN(x))`.
    pub fn layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        l: usize,
        x: Var,
        keys: &Arc<KeySets>,
    ) -> Result<Var> {
        let p = &self.layers[l];
        let c = &self.config;
        let par = |g: &mut Graph, id| g.param(store, id);
        let lin = |g: &mut Graph, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
            let w = g.param(store, w);
            let b = g.param(store, b);
            let y = g.matmul(x, w)?;
            Ok(g.add_bias(y, b)?)
        };

        let (gain, bias) = (par(g, p.ln1_gain), par(g, p.ln1_bias));
        let h = g.layer_norm(x, gain, bias, c.ln_eps)?;
        let q = lin(g, h, p.wq, p.bq)?;
        let k = lin(g, h, p.wk, p.bk)?;
        let v = lin(g, h, p.wv, p.bv)?;
        let a = g.sparse_attention(q, k, v, c.n_heads, Arc::clone(keys))?;
        let a = lin(g, a, p.wo, p.bo)?;
        let a = g.dropout(a, c.dropout)?;
        let x = g.add(x, a)?;

        let (gain, bias) = (par(g, p.ln2_gain), par(g, p.ln2_bias));
        let h = g.layer_norm(x, gain, bias, c.ln_eps)?;
        let f = lin(g, h, p.ff_w1, p.ff_b1)?;
        let f = g.gelu(f)?;
        let f = lin(g, f, p.ff_w2, p.ff_b2)?;
        let f = g.dropout(f, c.dropout)?;
        Ok(g.add(x, f)?)
    }

    /// Hidden states `[T × d]`; padded rows come out as zeros.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, seq: &ComposedSequence) -> Result<Var> {
        self.encode_with(g, store, seq.x, &self.pattern(seq))
    }

    pub fn encode_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        pattern: &AttentionPattern,
    ) -> Result<Var> {
        let n_valid = pattern.valid.iter().filter(|&&v| v).count();
        if n_valid > self.config.max_tokens {
            return Err(EncoderError::TooLong {
                len: n_valid,
                max: self.config.max_tokens,
            });
        }
        g.set_gelu(self.config.gelu);
        let keys = Arc::new(pattern.key_sets());
        let mut h = x;
        for l in 0..self.layers.len() {
            h = self.layer(g, store, l, h, &keys)?;
        }
        let gain = g.param(store, self.final_gain);
        let bias = g.param(store, self.final_bias);
        let h = g.layer_norm(h, gain, bias, self.config.ln_eps)?;
        if pattern.valid.iter().all(|&v| v) {
            Ok(h)
        } else {
            Ok(g.mask_rows(h, &pattern.valid)?)
        }
    }

    /// `Σ αᵢ hᵢ` with `α = softmax(uᵀ tanh(W hᵢ) / √d)` over unmasked rows.
    pub fn attention_pool(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        mask: &[bool],
    ) -> Result<Var> {
        attention_pool(g, store, self.pool, hidden, mask)
    }
}

pub fn attention_pool(
    g: &mut Graph,
    store: &ParamStore,
    pool: PoolParams,
    hidden: Var,
    mask: &[bool],
) -> Result<Var> {
    let rows: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(EncoderError::AllMasked);
    }
    let d = g.shape(hidden)[1];
    let h = if rows.len() == mask.len() {
        hidden
    } else {
        g.select_rows(hidden, &rows)?
    };
    let w = g.param(store, pool.w);
    let u = g.param(store, pool.u);
    let s = g.matmul(h, w)?;
    let s = g.tanh(s)?;
    let s = g.matmul(s, u)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
    let alpha = g.softmax(s, 0)?;
    let at = g.transpose(alpha)?;
    Ok(g.matmul(at, h)?)
}

/// One row of the attention cost profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopRow {
    pub tokens: usize,
    pub attention_flops: u64,
    pub matmul_flops: u64,
}

impl FlopRow {
    pub fn attention_per_token(&self) -> f64 {
        self.attention_flops as f64 / self.tokens as f64
    }
}

/// Runs the encoder on random inputs of each length and records the op
/// counter.
pub fn flop_profile(
    encoder: &Encoder,
    store: &ParamStore,
    lengths: &[usize],
    rng: &mut impl Rng,
) -> Result<Vec<FlopRow>> {
    let d = encoder.config.d_model;
    lengths
        .iter()
        .map(|&t| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_fn(&[t, d], |_| rng.random_range(-1.0..1.0)));
            let globals = (0..t).map(|i| i < 3).collect();
            let pattern =
                AttentionPattern::new(encoder.config.half_window(), vec![true; t], globals);
            encoder.encode_with(&mut g, store, x, &pattern)?;
            let f = g.flops();
            Ok(FlopRow {
                tokens: t,
                attention_flops: f.attention,
                matmul_flops: f.matmul,
            })
        })
        .collect()
}

pub fn write_flop_csv(rows: &[FlopRow], mut out: impl Write) -> Result<()> {
    writeln!(
        out,
        "tokens,attention_flops,attention_flops_per_token,matmul_flops"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.3},{}",
            r.tokens,
            r.attention_flops,
            r.attention_per_token(),
            r.matmul_flops
        )?;
    }
    Ok(())
}
