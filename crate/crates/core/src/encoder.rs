//! Image encoder: resize, patchify, embed, and a stack of pre-norm
//! self-attention blocks over the patch sequence.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::{Element, Graph, ParamSet, Tensor, TensorId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

fn default_ffn() -> usize {
    0 // resolved to 4*hidden in ffn_hidden()
}

/// Architectural hyperparameters of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input images are resized to exactly this (height, width).
    pub resize_h: usize,
    pub resize_w: usize,
    /// Square patch side; must divide both resize dims.
    pub patch: usize,
    /// Input channels, 1 or 3.
    pub channels: usize,
    /// Hidden size D, constant through all layers.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// FFN inner size; 0 means 4*hidden.
    #[serde(default = "default_ffn")]
    pub ffn: usize,
    /// Reserve a second special token slot next to the class token.
    #[serde(default)]
    pub use_distillation_token: bool,
    /// Dropout rate applied during training forward passes.
    #[serde(default)]
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.resize_h % self.patch != 0 || self.resize_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "resize {}x{} not divisible by patch size {}",
                self.resize_h, self.resize_w, self.patch
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "encoder channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "encoder dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// N = H*W / P^2
    pub fn num_patches(&self) -> usize {
        (self.resize_h / self.patch) * (self.resize_w / self.patch)
    }

    pub fn num_special(&self) -> usize {
        if self.use_distillation_token {
            2
        } else {
            1
        }
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + self.num_special()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn ffn_hidden(&self) -> usize {
        if self.ffn == 0 {
            4 * self.hidden
        } else {
            self.ffn
        }
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Canonical parameter names and shapes, in checkpoint order.
pub fn param_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden;
    let f = cfg.ffn_hidden();
    let mut out = vec![
        ("encoder.patch_proj.weight".into(), vec![cfg.patch_dim(), d]),
        ("encoder.patch_proj.bias".into(), vec![d]),
        ("encoder.cls".into(), vec![1, d]),
    ];
    if cfg.use_distillation_token {
        out.push(("encoder.dist".into(), vec![1, d]));
    }
    out.push(("encoder.pos".into(), vec![cfg.seq_len(), d]));
    for i in 0..cfg.layers {
        let p = format!("encoder.layer{i}");
        out.push((format!("{p}.norm1.gain"), vec![d]));
        out.push((format!("{p}.norm1.bias"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.self_attn.{w}.weight"), vec![d, d]));
            out.push((format!("{p}.self_attn.{w}.bias"), vec![d]));
        }
        out.push((format!("{p}.norm2.gain"), vec![d]));
        out.push((format!("{p}.norm2.bias"), vec![d]));
        out.push((format!("{p}.ffn.fc1.weight"), vec![d, f]));
        out.push((format!("{p}.ffn.fc1.bias"), vec![f]));
        out.push((format!("{p}.ffn.fc2.weight"), vec![f, d]));
        out.push((format!("{p}.ffn.fc2.bias"), vec![d]));
    }
    out.push(("encoder.final_norm.gain".into(), vec![d]));
    out.push(("encoder.final_norm.bias".into(), vec![d]));
    out
}

/// Decompose an image into flattened square patches.
///
/// Row i is the i-th patch in row-major patch-grid order, flattened
/// channel-major then row-major within the patch (index
/// `c*P*P + py*P + px`). Checkpoint portability depends on this order.
pub fn patchify<T: Element>(img: &ImageTensor, patch: usize) -> Result<Tensor<T>> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let n = gh * gw;
    let dim = c * patch * patch;
    let mut data = Vec::with_capacity(n * dim);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        data.push(T::from_f32(img.get(ch, py * patch + dy, px * patch + dx)));
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, dim], data)
}

/// Linear layer: x W + b, with b broadcast across rows.
pub(crate) fn linear<T: Element>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    x: TensorId,
    name: &str,
) -> Result<TensorId> {
    let w = g.param(
        &format!("{name}.weight"),
        params
            .get(&format!("{name}.weight"))
            .ok_or_else(|| Error::Config(format!("missing parameter {name}.weight")))?,
    );
    let b = g.param(
        &format!("{name}.bias"),
        params
            .get(&format!("{name}.bias"))
            .ok_or_else(|| Error::Config(format!("missing parameter {name}.bias")))?,
    );
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

pub(crate) fn norm<T: Element>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    x: TensorId,
    name: &str,
) -> Result<TensorId> {
    let gain = g.param(
        &format!("{name}.gain"),
        params
            .get(&format!("{name}.gain"))
            .ok_or_else(|| Error::Config(format!("missing parameter {name}.gain")))?,
    );
    let bias = g.param(
        &format!("{name}.bias"),
        params
            .get(&format!("{name}.bias"))
            .ok_or_else(|| Error::Config(format!("missing parameter {name}.bias")))?,
    );
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

pub(crate) fn maybe_dropout<T: Element>(
    g: &mut Graph<T>,
    x: TensorId,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<TensorId> {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, *r),
        _ => Ok(x),
    }
}

/// Patch embedding: project patch vectors to D, prepend the class
/// token (and distillation token when configured), add learnable 1D
/// position embeddings by absolute position.
pub fn embed<T: Element>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    patches: TensorId,
) -> Result<TensorId> {
    let n = g.value(patches).rows();
    let ns = cfg.num_special();
    let pos_table = params
        .get("encoder.pos")
        .ok_or_else(|| Error::Config("missing parameter encoder.pos".into()))?;
    if n + ns > pos_table.rows() {
        return Err(Error::SequenceLength {
            len: n + ns,
            max: pos_table.rows(),
        });
    }
    let projected = linear(g, params, patches, "encoder.patch_proj")?;
    let cls = g.param(
        "encoder.cls",
        params
            .get("encoder.cls")
            .ok_or_else(|| Error::Config("missing parameter encoder.cls".into()))?,
    );
    let mut parts = vec![cls];
    if cfg.use_distillation_token {
        let dist = g.param(
            "encoder.dist",
            params
                .get("encoder.dist")
                .ok_or_else(|| Error::Config("missing parameter encoder.dist".into()))?,
        );
        parts.push(dist);
    }
    parts.push(projected);
    let x = g.concat_rows(&parts)?;
    let pos = g.param("encoder.pos", pos_table);
    let pos_rows = g.rows(pos, 0, n + ns)?;
    g.add(x, pos_rows)
}

/// One pre-norm block: x + SelfAttn(LN(x)), then x + FFN(LN(x)).
fn block<T: Element>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    x: TensorId,
    layer: usize,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<TensorId> {
    let p = format!("encoder.layer{layer}");
    let h = norm(g, params, x, &format!("{p}.norm1"))?;
    let q = linear(g, params, h, &format!("{p}.self_attn.wq"))?;
    let k = linear(g, params, h, &format!("{p}.self_attn.wk"))?;
    let v = linear(g, params, h, &format!("{p}.self_attn.wv"))?;
    let a = g.attention(q, k, v, cfg.heads, None)?;
    let o = linear(g, params, a, &format!("{p}.self_attn.wo"))?;
    let o = maybe_dropout(g, o, cfg.dropout, rng)?;
    let x = g.add(x, o)?;

    let h2 = norm(g, params, x, &format!("{p}.norm2"))?;
    let f1 = linear(g, params, h2, &format!("{p}.ffn.fc1"))?;
    let f1 = g.gelu(f1);
    let f2 = linear(g, params, f1, &format!("{p}.ffn.fc2"))?;
    let f2 = maybe_dropout(g, f2, cfg.dropout, rng)?;
    g.add(x, f2)
}

/// Full encoder forward over an already-resized image: patchify,
/// embed, L blocks, final norm. Returns the memory id in `g`.
pub fn encode_into<T: Element>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    params: &ParamSet<T>,
    img: &ImageTensor,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId> {
    cfg.validate()?;
    let resized = if img.height() == cfg.resize_h && img.width() == cfg.resize_w {
        img.clone()
    } else {
        img.resize(cfg.resize_h, cfg.resize_w)?
    };
    if resized.channels() != cfg.channels {
        return Err(Error::Config(format!(
            "image has {} channels, encoder expects {}",
            resized.channels(),
            cfg.channels
        )));
    }
    let patches = g.constant(patchify::<T>(&resized, cfg.patch)?);
    let mut x = embed(g, cfg, params, patches)?;
    x = maybe_dropout(g, x, cfg.dropout, &mut rng)?;
    for layer in 0..cfg.layers {
        x = block(g, cfg, params, x, layer, &mut rng)?;
    }
    norm(g, params, x, "encoder.final_norm")
}
