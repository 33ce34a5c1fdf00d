//! Full encoder-decoder model: configuration, parameter store,
//! initialization, and the forward passes shared by trainer, search,
//! and the CLI.

use crate::decoder::{self, DecodeSession, DecoderConfig};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::{Element, Graph, ParamSet, Tensor, TensorId};
use crate::tokenizer::TokenId;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Combined architecture description, stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    /// Canonical parameter manifest: names and shapes in checkpoint
    /// order (encoder first, then decoder).
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = encoder::param_shapes(&self.encoder);
        shapes.extend(decoder::param_shapes(&self.decoder, self.encoder.hidden));
        shapes
    }

    /// A small configuration for quick experiments and tests.
    pub fn tiny(vocab: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                resize_h: 16,
                resize_w: 64,
                patch: 8,
                channels: 1,
                hidden: 64,
                layers: 2,
                heads: 4,
                ffn: 0,
                use_distillation_token: false,
                dropout: 0.0,
            },
            decoder: DecoderConfig {
                hidden: 64,
                layers: 2,
                heads: 4,
                vocab,
                max_positions: 64,
                ffn: 0,
                dropout: 0.0,
            },
        }
    }
}

/// Model instance: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct OcrModel<T: Element> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    /// Optimizer steps taken so far; recorded in checkpoints.
    pub step: u64,
}

/// Truncated normal init: resample outside two standard deviations.
pub fn init_tensor<T: Element>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v: f64 = rng.sample(StandardNormal);
        while v.abs() > 2.0 {
            v = rng.sample(StandardNormal);
        }
        data.push(T::from_f64(v * std));
    }
    Tensor::new(shape, data).expect("init shape is consistent")
}

const INIT_STD: f64 = 0.02;

fn initial_value<T: Element>(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    if name.ends_with(".bias") || name.ends_with("norm.bias") {
        Tensor::zeros(shape.to_vec())
    } else if name.ends_with(".gain") {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![T::one(); n]).expect("gain shape")
    } else {
        init_tensor(shape.to_vec(), INIT_STD, rng)
    }
}

impl<T: Element> OcrModel<T> {
    /// Fresh model with truncated-normal weights (std 0.02), zero
    /// biases, unit norm gains. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::rng_from(seed, &[0x1217]);
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let value = initial_value::<T>(&name, &shape, &mut rng);
            params.insert(name, value);
        }
        Ok(OcrModel {
            config,
            params,
            step: 0,
        })
    }

    /// Re-randomize one parameter with the init scheme (used when a
    /// partial import leaves a destination unmatched).
    pub fn reinit_param(&mut self, name: &str, rng: &mut ChaCha8Rng) -> Result<()> {
        let shape = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?
            .shape()
            .to_vec();
        let value = initial_value::<T>(name, &shape, rng);
        *self
            .params
            .get_mut(name)
            .expect("presence checked above") = value;
        Ok(())
    }

    /// Encoder forward without gradient tracking; returns the memory
    /// the decoder cross-attends to (all rows, specials included).
    pub fn encode_image(&self, img: &ImageTensor) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let mem = encoder::encode_into(&mut g, &self.config.encoder, &self.params, img, None)?;
        Ok(g.value(mem).clone())
    }

    /// Full teacher-forced forward on one recording graph, from image
    /// pixels to decoder logits. Returns the graph plus memory and
    /// logits ids so callers can attach a loss and run backward.
    pub fn forward_graph(
        &self,
        img: &ImageTensor,
        tokens: &[TokenId],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Graph<T>, TensorId, TensorId)> {
        let mut g = Graph::new();
        let memory = encoder::encode_into(
            &mut g,
            &self.config.encoder,
            &self.params,
            img,
            rng.as_deref_mut(),
        )?;
        let logits = decoder::forward_into(
            &mut g,
            &self.config.decoder,
            &self.params,
            tokens,
            memory,
            rng,
        )?;
        Ok((g, memory, logits))
    }

    /// Value-only decoder logits for a fixed memory (test support and
    /// the reference path for incremental-decode equivalence).
    pub fn decoder_logits(&self, tokens: &[TokenId], memory: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let mem = g.constant(memory.clone());
        let logits =
            decoder::forward_into(&mut g, &self.config.decoder, &self.params, tokens, mem, None)?;
        Ok(g.value(logits).clone())
    }

    /// Incremental decode session against an encoded image.
    pub fn decode_session<'a>(&'a self, memory: &Tensor<T>) -> Result<DecodeSession<'a, T>> {
        DecodeSession::new(&self.config.decoder, &self.params, memory)
    }
}
