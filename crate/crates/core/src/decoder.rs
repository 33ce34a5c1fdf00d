//! Autoregressive wordpiece decoder: causal self-attention,
//! encoder-decoder attention, FFN, projection to vocabulary logits.
//!
//! Two forward paths exist on purpose: the graph path used for
//! training and checks, and an incremental per-step path with cached
//! keys/values used for generation. Both must produce the same
//! distributions; a test pins that equivalence.

use crate::error::{Error, Result};
use crate::tensor::{kernels, AttentionMask, Element, Graph, ParamSet, Tensor, TensorId};
use crate::tokenizer::TokenId;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

fn default_max_positions() -> usize {
    512
}

fn default_ffn() -> usize {
    0
}

/// Architectural hyperparameters of the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Vocabulary size V, including the 4 specials.
    pub vocab: usize,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    /// FFN inner size; 0 means 4*hidden.
    #[serde(default = "default_ffn")]
    pub ffn: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab < 5 {
            return Err(Error::Config(format!(
                "vocab must hold 4 specials plus at least one piece, got {}",
                self.vocab
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "decoder dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        if self.ffn == 0 {
            4 * self.hidden
        } else {
            self.ffn
        }
    }
}

/// Canonical parameter names and shapes, in checkpoint order.
/// `enc_hidden` sizes the cross-attention key/value projections.
pub fn param_shapes(cfg: &DecoderConfig, enc_hidden: usize) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden;
    let f = cfg.ffn_hidden();
    let mut out = vec![
        ("decoder.embed.weight".into(), vec![cfg.vocab, d]),
        ("decoder.pos".into(), vec![cfg.max_positions, d]),
    ];
    for i in 0..cfg.layers {
        let p = format!("decoder.layer{i}");
        out.push((format!("{p}.norm1.gain"), vec![d]));
        out.push((format!("{p}.norm1.bias"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.self_attn.{w}.weight"), vec![d, d]));
            out.push((format!("{p}.self_attn.{w}.bias"), vec![d]));
        }
        out.push((format!("{p}.norm2.gain"), vec![d]));
        out.push((format!("{p}.norm2.bias"), vec![d]));
        for (w, rows) in [("wq", d), ("wk", enc_hidden), ("wv", enc_hidden), ("wo", d)] {
            out.push((format!("{p}.cross_attn.{w}.weight"), vec![rows, d]));
            out.push((format!("{p}.cross_attn.{w}.bias"), vec![d]));
        }
        out.push((format!("{p}.norm3.gain"), vec![d]));
        out.push((format!("{p}.norm3.bias"), vec![d]));
        out.push((format!("{p}.ffn.fc1.weight"), vec![d, f]));
        out.push((format!("{p}.ffn.fc1.bias"), vec![f]));
        out.push((format!("{p}.ffn.fc2.weight"), vec![f, d]));
        out.push((format!("{p}.ffn.fc2.bias"), vec![d]));
    }
    out.push(("decoder.final_norm.gain".into(), vec![d]));
    out.push(("decoder.final_norm.bias".into(), vec![d]));
    out.push(("decoder.out_proj.weight".into(), vec![d, cfg.vocab]));
    out.push(("decoder.out_proj.bias".into(), vec![cfg.vocab]));
    out
}

/// Lower-triangular causal mask: position i may attend to j <= i.
pub fn causal_mask(t: usize) -> Result<AttentionMask> {
    if t == 0 {
        return Err(Error::InvalidInput("causal mask of length 0".into()));
    }
    let mut allow = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            allow[i * t + j] = true;
        }
    }
    AttentionMask::new(t, t, allow)
}

use crate::encoder::{linear, maybe_dropout, norm};

/// Graph forward: token embedding + positions, then per layer causal
/// self-attention, cross-attention over `memory`, FFN, all pre-norm
/// with residuals; final norm and projection to vocabulary logits.
pub fn forward_into<T: Element>(
    g: &mut Graph<T>,
    cfg: &DecoderConfig,
    params: &ParamSet<T>,
    tokens: &[TokenId],
    memory: TensorId,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId> {
    cfg.validate()?;
    let t = tokens.len();
    if t > cfg.max_positions {
        return Err(Error::SequenceLength {
            len: t,
            max: cfg.max_positions,
        });
    }
    if t == 0 {
        return Err(Error::InvalidInput("decoder forward on zero tokens".into()));
    }
    let embed = g.param(
        "decoder.embed.weight",
        params
            .get("decoder.embed.weight")
            .ok_or_else(|| Error::Config("missing parameter decoder.embed.weight".into()))?,
    );
    let mut x = g.embedding_lookup(embed, tokens)?;
    let pos = g.param(
        "decoder.pos",
        params
            .get("decoder.pos")
            .ok_or_else(|| Error::Config("missing parameter decoder.pos".into()))?,
    );
    let pos_rows = g.rows(pos, 0, t)?;
    x = g.add(x, pos_rows)?;
    x = maybe_dropout(g, x, cfg.dropout, &mut rng)?;

    let mask = causal_mask(t)?;
    for i in 0..cfg.layers {
        let p = format!("decoder.layer{i}");

        let h = norm(g, params, x, &format!("{p}.norm1"))?;
        let q = linear(g, params, h, &format!("{p}.self_attn.wq"))?;
        let k = linear(g, params, h, &format!("{p}.self_attn.wk"))?;
        let v = linear(g, params, h, &format!("{p}.self_attn.wv"))?;
        let a = g.attention(q, k, v, cfg.heads, Some(&mask))?;
        let o = linear(g, params, a, &format!("{p}.self_attn.wo"))?;
        let o = maybe_dropout(g, o, cfg.dropout, &mut rng)?;
        x = g.add(x, o)?;

        let h2 = norm(g, params, x, &format!("{p}.norm2"))?;
        let q2 = linear(g, params, h2, &format!("{p}.cross_attn.wq"))?;
        let k2 = linear(g, params, memory, &format!("{p}.cross_attn.wk"))?;
        let v2 = linear(g, params, memory, &format!("{p}.cross_attn.wv"))?;
        let a2 = g.attention(q2, k2, v2, cfg.heads, None)?;
        let o2 = linear(g, params, a2, &format!("{p}.cross_attn.wo"))?;
        let o2 = maybe_dropout(g, o2, cfg.dropout, &mut rng)?;
        x = g.add(x, o2)?;

        let h3 = norm(g, params, x, &format!("{p}.norm3"))?;
        let f1 = linear(g, params, h3, &format!("{p}.ffn.fc1"))?;
        let f1 = g.gelu(f1);
        let f2 = linear(g, params, f1, &format!("{p}.ffn.fc2"))?;
        let f2 = maybe_dropout(g, f2, cfg.dropout, &mut rng)?;
        x = g.add(x, f2)?;
    }
    let xn = norm(g, params, x, "decoder.final_norm")?;
    linear(g, params, xn, "decoder.out_proj")
}

/// Probability vector over the vocabulary for the next token after
/// `tokens`: softmax of the final logits row. Value-only computation.
pub fn next_token_distribution<T: Element>(
    cfg: &DecoderConfig,
    params: &ParamSet<T>,
    tokens: &[TokenId],
    memory: &Tensor<T>,
) -> Result<Vec<T>> {
    let mut g = Graph::inference();
    let mem = g.constant(memory.clone());
    let logits = forward_into(&mut g, cfg, params, tokens, mem, None)?;
    let t = g.value(logits).rows();
    let mut row = g.value(logits).row(t - 1).to_vec();
    kernels::softmax_rows(&mut row, 1, cfg.vocab);
    Ok(row)
}

// ── incremental decoding ─────────────────────────────────────────────

/// Per-sequence decode state with cached keys/values.
///
/// Cross-attention K/V are projected from the encoder memory once at
/// session start and shared between clones; self-attention K/V grow by
/// one row per step. Cloning a session forks the self-attention cache,
/// which is how beam search branches hypotheses.
pub struct DecodeSession<'m, T: Element> {
    cfg: &'m DecoderConfig,
    params: &'m ParamSet<T>,
    cross_kv: Rc<Vec<(Tensor<T>, Tensor<T>)>>,
    self_kv: Vec<(Vec<T>, Vec<T>)>,
    len: usize,
}

impl<T: Element> Clone for DecodeSession<'_, T> {
    fn clone(&self) -> Self {
        DecodeSession {
            cfg: self.cfg,
            params: self.params,
            cross_kv: Rc::clone(&self.cross_kv),
            self_kv: self.self_kv.clone(),
            len: self.len,
        }
    }
}

impl<'m, T: Element> DecodeSession<'m, T> {
    pub fn new(
        cfg: &'m DecoderConfig,
        params: &'m ParamSet<T>,
        memory: &Tensor<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let s = memory.rows();
        let enc_d = memory.cols();
        let d = cfg.hidden;
        let mut cross_kv = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("decoder.layer{i}.cross_attn");
            let k = project(memory.data(), s, enc_d, d, params, &format!("{p}.wk"))?;
            let v = project(memory.data(), s, enc_d, d, params, &format!("{p}.wv"))?;
            cross_kv.push((Tensor::new(vec![s, d], k)?, Tensor::new(vec![s, d], v)?));
        }
        Ok(DecodeSession {
            cfg,
            params,
            cross_kv: Rc::new(cross_kv),
            self_kv: vec![(Vec::new(), Vec::new()); cfg.layers],
            len: 0,
        })
    }

    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn vocab(&self) -> usize {
        self.cfg.vocab
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn p(&self, name: &str) -> Result<&'m Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Consume one token and return the logits row for the next
    /// position.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<T>> {
        let d = self.cfg.hidden;
        let pos = self.len;
        if pos + 1 > self.cfg.max_positions {
            return Err(Error::SequenceLength {
                len: pos + 1,
                max: self.cfg.max_positions,
            });
        }
        let embed = self.p("decoder.embed.weight")?;
        if token as usize >= self.cfg.vocab {
            return Err(Error::IndexOutOfRange {
                id: token as usize,
                bound: self.cfg.vocab,
            });
        }
        let pos_table = self.p("decoder.pos")?;
        let mut x: Vec<T> = embed
            .row(token as usize)
            .iter()
            .zip(pos_table.row(pos))
            .map(|(&e, &p)| e + p)
            .collect();

        for i in 0..self.cfg.layers {
            let prefix = format!("decoder.layer{i}");

            let h = self.norm_row(&x, &format!("{prefix}.norm1"))?;
            let q = self.linear_row(&h, &format!("{prefix}.self_attn.wq"))?;
            let k_new = self.linear_row(&h, &format!("{prefix}.self_attn.wk"))?;
            let v_new = self.linear_row(&h, &format!("{prefix}.self_attn.wv"))?;
            let (k_cache, v_cache) = &mut self.self_kv[i];
            k_cache.extend_from_slice(&k_new);
            v_cache.extend_from_slice(&v_new);
            let t = pos + 1;
            let (a, _) =
                kernels::multi_head_attention(&q, k_cache, v_cache, 1, t, d, self.cfg.heads, None);
            let o = self.linear_row(&a, &format!("{prefix}.self_attn.wo"))?;
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi = *xi + *oi;
            }

            let h2 = self.norm_row(&x, &format!("{prefix}.norm2"))?;
            let q2 = self.linear_row(&h2, &format!("{prefix}.cross_attn.wq"))?;
            let (ck, cv) = &self.cross_kv[i];
            let (a2, _) = kernels::multi_head_attention(
                &q2,
                ck.data(),
                cv.data(),
                1,
                ck.rows(),
                d,
                self.cfg.heads,
                None,
            );
            let o2 = self.linear_row(&a2, &format!("{prefix}.cross_attn.wo"))?;
            for (xi, oi) in x.iter_mut().zip(&o2) {
                *xi = *xi + *oi;
            }

            let h3 = self.norm_row(&x, &format!("{prefix}.norm3"))?;
            let f1 = self.linear_row(&h3, &format!("{prefix}.ffn.fc1"))?;
            let f1: Vec<T> = f1.iter().map(|&v| kernels::gelu(v)).collect();
            let f2 = self.linear_row(&f1, &format!("{prefix}.ffn.fc2"))?;
            for (xi, fi) in x.iter_mut().zip(&f2) {
                *xi = *xi + *fi;
            }
        }

        let xn = self.norm_row(&x, "decoder.final_norm")?;
        let logits = self.linear_row(&xn, "decoder.out_proj")?;
        self.len += 1;
        Ok(logits)
    }

    fn norm_row(&self, x: &[T], name: &str) -> Result<Vec<T>> {
        let gain = self.p(&format!("{name}.gain"))?;
        let bias = self.p(&format!("{name}.bias"))?;
        let (out, _, _) = kernels::layer_norm_rows(
            x,
            gain.data(),
            bias.data(),
            T::from_f64(crate::encoder::LAYER_NORM_EPS),
            1,
            x.len(),
        );
        Ok(out)
    }

    fn linear_row(&self, x: &[T], name: &str) -> Result<Vec<T>> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        let mut out = kernels::matmul(x, w.data(), 1, w.rows(), w.cols());
        for (o, &bv) in out.iter_mut().zip(b.data()) {
            *o = *o + bv;
        }
        Ok(out)
    }
}

fn project<T: Element>(
    memory: &[T],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    params: &ParamSet<T>,
    name: &str,
) -> Result<Vec<T>> {
    let w = params
        .get(&format!("{name}.weight"))
        .ok_or_else(|| Error::Config(format!("missing parameter {name}.weight")))?;
    let b = params
        .get(&format!("{name}.bias"))
        .ok_or_else(|| Error::Config(format!("missing parameter {name}.bias")))?;
    let mut out = kernels::matmul(memory, w.data(), rows, in_dim, out_dim);
    for r in 0..rows {
        for (o, &bv) in out[r * out_dim..(r + 1) * out_dim].iter_mut().zip(b.data()) {
            *o = *o + bv;
        }
    }
    Ok(out)
}
