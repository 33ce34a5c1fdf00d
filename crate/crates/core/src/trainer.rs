//! Teacher-forced training: right-shifted targets, padding-aware
//! cross-entropy, Adam with warmup and gradient clipping, epoch loop
//! with validation-CER best-checkpoint retention and stage chaining.

use crate::augment::AugmentPolicy;
use crate::checkpoint::{apply_full, import_partial, Checkpoint, MappingRule};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics;
use crate::model::{ModelConfig, OcrModel};
use crate::rng::{derive_seed, rng_from};
use crate::search::{greedy, SearchConfig};
use crate::tensor::{Dtype, Element, ParamSet, Reduction};
use crate::textgen::TextlineSample;
use crate::tokenizer::{TokenId, TokenSequence, Tokenizer, BOS_ID, EOS_ID, PAD_ID};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;

/// Teacher-forcing pair: `decoder_input = [BOS] + target`,
/// `labels = target + [EOS]`, PAD-extended to the batch max length.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub decoder_input: TokenSequence,
    pub labels: TokenSequence,
}

/// Right-shift a special-free target sequence.
pub fn make_training_pair(target: &[TokenId]) -> TrainingPair {
    let mut decoder_input = Vec::with_capacity(target.len() + 1);
    decoder_input.push(BOS_ID);
    decoder_input.extend_from_slice(target);
    let mut labels = Vec::with_capacity(target.len() + 1);
    labels.extend_from_slice(target);
    labels.push(EOS_ID);
    TrainingPair {
        decoder_input,
        labels,
    }
}

/// PAD-extend every pair to the longest length in the batch.
pub fn pad_pairs(pairs: &mut [TrainingPair]) {
    let max = pairs
        .iter()
        .map(|p| p.decoder_input.len())
        .max()
        .unwrap_or(0);
    for p in pairs {
        p.decoder_input.resize(max, PAD_ID);
        p.labels.resize(max, PAD_ID);
    }
}

/// Adam state: per-parameter first/second moment accumulators kept in
/// f64 regardless of the model precision.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(lr: f64) -> Self {
        OptimState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One Adam update with effective learning rate `lr`.
    pub fn apply<T: Element>(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[(String, Vec<f64>)],
        lr: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(tensor) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for (i, value) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *value = T::from_f64(value.as_f64() - lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
    }
}

/// Per-step knobs resolved by the caller.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub lr: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    /// Base seed for dropout masks; None disables dropout draws.
    pub dropout_seed: Option<u64>,
}

/// One forward/backward/update over a batch of (image, target tokens).
/// PAD labels are excluded from the loss; the returned value is the
/// mean loss over counted positions. Per-sample work runs in parallel;
/// gradients reduce in sample order, so results do not depend on the
/// thread count.
pub fn train_step<T: Element>(
    model: &mut OcrModel<T>,
    batch: &[(ImageTensor, TokenSequence)],
    opt: &mut OptimState,
    options: &StepOptions,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let mut pairs: Vec<TrainingPair> = batch
        .iter()
        .map(|(_, target)| make_training_pair(target))
        .collect();
    pad_pairs(&mut pairs);

    struct SampleGrad {
        loss_sum: f64,
        count: usize,
        grads: Vec<(String, Vec<f64>)>,
    }

    let model_ref = &*model;
    let results: Vec<SampleGrad> = batch
        .par_iter()
        .zip(pairs.par_iter())
        .enumerate()
        .map(|(i, ((img, _), pair))| -> Result<SampleGrad> {
            let mut rng = options
                .dropout_seed
                .map(|base| rng_from(base, &[i as u64]));
            let (mut g, _mem, logits) =
                model_ref.forward_graph(img, &pair.decoder_input, rng.as_mut())?;
            let loss = g.cross_entropy_with(
                logits,
                &pair.labels,
                PAD_ID,
                Reduction::Sum,
                options.label_smoothing,
            )?;
            let loss_sum = g.value(loss).item().as_f64();
            let count = pair.labels.iter().filter(|&&l| l != PAD_ID).count();
            g.backward(loss)?;
            let grads = g
                .param_grads()
                .map(|(name, grad)| {
                    (
                        name.to_string(),
                        grad.iter().map(|v| v.as_f64()).collect::<Vec<f64>>(),
                    )
                })
                .collect();
            Ok(SampleGrad {
                loss_sum,
                count,
                grads,
            })
        })
        .collect::<Result<_>>()?;

    let total_count: usize = results.iter().map(|r| r.count).sum();
    if total_count == 0 {
        return Ok(0.0);
    }
    let loss = results.iter().map(|r| r.loss_sum).sum::<f64>() / total_count as f64;

    // Accumulate per-sample gradients in canonical order, normalized
    // by the total counted positions.
    let mut acc: Vec<(String, Vec<f64>)> = model
        .params
        .iter()
        .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()]))
        .collect();
    let index: HashMap<String, usize> = acc
        .iter()
        .enumerate()
        .map(|(i, (n, _))| (n.clone(), i))
        .collect();
    for sample in &results {
        for (name, grad) in &sample.grads {
            let slot = &mut acc[index[name.as_str()]].1;
            for (dst, &g) in slot.iter_mut().zip(grad) {
                *dst += g;
            }
        }
    }
    let scale = 1.0 / total_count as f64;
    for (_, grad) in &mut acc {
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }

    let mut max_abs = 0.0f64;
    let mut sq_sum = 0.0f64;
    for (_, grad) in &acc {
        for &g in grad {
            sq_sum += g * g;
            max_abs = max_abs.max(g.abs());
        }
    }
    if !loss.is_finite() || !sq_sum.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss at step {}: loss {loss}, max |grad| {max_abs}",
            model.step
        )));
    }
    let norm = sq_sum.sqrt();
    if options.clip_norm > 0.0 && norm > options.clip_norm {
        let clip_scale = options.clip_norm / norm;
        for (_, grad) in &mut acc {
            for g in grad.iter_mut() {
                *g *= clip_scale;
            }
        }
    }

    opt.apply(&mut model.params, &acc, options.lr);
    model.step += 1;
    Ok(loss)
}

fn default_epochs() -> usize {
    8
}

fn default_batch() -> usize {
    16
}

fn default_lr() -> f64 {
    1e-4
}

fn default_warmup() -> f64 {
    0.05
}

fn default_clip() -> f64 {
    1.0
}

fn default_eval_every() -> usize {
    1
}

fn default_max_decode_len() -> usize {
    32
}

/// Training run configuration (the `train` command's JSON file).
/// Unknown keys are rejected; the resolved config with every default
/// filled in is written next to the run outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    pub model: ModelConfig,
    pub tokenizer: PathBuf,
    pub train_manifest: PathBuf,
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Fraction of total steps spent in linear warmup.
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub augment_policy: AugmentPolicy,
    /// Prior checkpoint to initialize from (stage chaining).
    #[serde(default)]
    pub stage_init: Option<PathBuf>,
    /// When present, stage_init is imported through these rules
    /// instead of a strict whole-model load.
    #[serde(default)]
    pub import_rules: Option<Vec<MappingRule>>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_max_decode_len")]
    pub max_decode_len: usize,
    /// Search settings recorded for downstream recognize runs;
    /// validation during training always decodes greedily.
    #[serde(default)]
    pub search: SearchConfig,
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

/// In-memory dataset for a run.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<TextlineSample>,
    pub val: Vec<TextlineSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_cer: Option<f64>,
}

/// Result of a training run: the best model by validation CER (the
/// final model when no validation set exists) plus the loss curve.
pub struct TrainOutcome<T: Element> {
    pub model: OcrModel<T>,
    pub history: Vec<EpochStats>,
    /// Validation CER before any training step (stage-chaining law:
    /// equals the init checkpoint's CER when augmentation is off).
    pub initial_val_cer: Option<f64>,
    pub best_val_cer: Option<f64>,
}

/// Mean greedy-decode CER over a sample set.
pub fn validation_cer<T: Element>(
    model: &OcrModel<T>,
    samples: &[TextlineSample],
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let cers: Vec<f64> = samples
        .par_iter()
        .map(|s| -> Result<f64> {
            let memory = model.encode_image(&s.image)?;
            let session = model.decode_session(&memory)?;
            let out = greedy(session, BOS_ID, EOS_ID, max_len)?;
            let pred = tokenizer.decode(&out.ids)?;
            Ok(metrics::cer(&pred, &s.text))
        })
        .collect::<Result<_>>()?;
    Ok(cers.iter().sum::<f64>() / cers.len() as f64)
}

/// Full training loop: seeded shuffling, per-sample augmentation,
/// linear warmup, periodic validation, best-checkpoint retention.
/// Deterministic in (config, dataset, init checkpoint).
pub fn run_training<T: Element>(
    cfg: &TrainConfig,
    data: &TrainData,
    tokenizer: &Tokenizer,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome<T>> {
    if data.train.is_empty() {
        return Err(Error::Training("empty training dataset".into()));
    }
    cfg.model.validate()?;
    if cfg.model.decoder.vocab != tokenizer.vocab_size() {
        return Err(Error::Config(format!(
            "decoder vocab {} != tokenizer vocab {}",
            cfg.model.decoder.vocab,
            tokenizer.vocab_size()
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be >= 1".into()));
    }

    let mut model = OcrModel::<T>::init(cfg.model.clone(), derive_seed(cfg.seed, &[0x6d6f64]))?;
    if let Some(ckpt) = init {
        match &cfg.import_rules {
            Some(rules) => {
                import_partial(ckpt, &mut model, rules, derive_seed(cfg.seed, &[0x696d70]))?;
            }
            None => apply_full(ckpt, &mut model)?,
        }
        model.step = 0;
    }

    // Pre-encode targets; reject lines the decoder cannot fit.
    let max_tokens = cfg.model.decoder.max_positions - 1;
    let targets: Vec<TokenSequence> = data
        .train
        .iter()
        .map(|s| {
            let ids = tokenizer.encode(&s.text);
            if ids.len() > max_tokens {
                return Err(Error::Training(format!(
                    "sample `{}` has {} tokens, decoder fits {max_tokens}",
                    s.id,
                    ids.len()
                )));
            }
            Ok(ids)
        })
        .collect::<Result<_>>()?;

    let max_decode = cfg.max_decode_len.min(max_tokens);
    let initial_val_cer = if data.val.is_empty() {
        None
    } else {
        Some(validation_cer(&model, &data.val, tokenizer, max_decode)?)
    };
    let mut best: Option<(f64, ParamSet<T>, u64)> = initial_val_cer
        .map(|cer| (cer, model.params.clone(), model.step));

    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let warmup_steps = (total_steps * cfg.warmup_frac).ceil().max(1.0);

    let mut opt = OptimState::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng_from(cfg.seed, &[0x736866, epoch as u64]);
        // Fisher-Yates with the run RNG.
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(ImageTensor, TokenSequence)> = chunk
                .iter()
                .map(|&idx| {
                    let sample = &data.train[idx];
                    let image = if cfg.augment {
                        crate::augment::apply(
                            &cfg.augment_policy,
                            &sample.image,
                            derive_seed(cfg.seed, &[0x617567, epoch as u64, idx as u64]),
                        )
                    } else {
                        sample.image.clone()
                    };
                    (image, targets[idx].clone())
                })
                .collect();
            let lr_scale = ((global_step + 1) as f64 / warmup_steps).min(1.0);
            let dropout_seed = (cfg.model.encoder.dropout > 0.0
                || cfg.model.decoder.dropout > 0.0)
                .then(|| derive_seed(cfg.seed, &[0x64726f, global_step]));
            let loss = train_step(
                &mut model,
                &batch,
                &mut opt,
                &StepOptions {
                    lr: cfg.lr * lr_scale,
                    clip_norm: cfg.clip_norm,
                    label_smoothing: cfg.label_smoothing,
                    dropout_seed,
                },
            )?;
            loss_sum += loss;
            loss_batches += 1;
            global_step += 1;
        }

        let val_cer = if !data.val.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)
        {
            let cer = validation_cer(&model, &data.val, tokenizer, max_decode)?;
            let better = best.as_ref().map_or(true, |(b, _, _)| cer < *b);
            if better {
                best = Some((cer, model.params.clone(), model.step));
            }
            Some(cer)
        } else {
            None
        };
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / loss_batches.max(1) as f64,
            val_cer,
        });
    }

    let best_val_cer = best.as_ref().map(|(cer, _, _)| *cer);
    if let Some((_, params, step)) = best {
        model.params = params;
        model.step = step;
    }
    Ok(TrainOutcome {
        model,
        history,
        initial_val_cer,
        best_val_cer,
    })
}
