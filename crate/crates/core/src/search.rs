//! Greedy and beam-search generation, BOS-seeded and EOS-terminated.
//!
//! Search is written against [`StepScorer`] so tests can drive it with
//! hand-built toy models; the real implementation is a decoder
//! [`DecodeSession`](crate::decoder::DecodeSession). Scores are summed
//! token log-probabilities accumulated in f64 regardless of the model
//! element type, which keeps ranking deterministic.

use crate::decoder::DecodeSession;
use crate::error::Result;
use crate::tensor::Element;
use crate::tokenizer::{TokenId, TokenSequence};
use serde::{Deserialize, Serialize};

/// One autoregressive step: consume a token, return logits over the
/// vocabulary for the next position. Cloning forks the sequence state.
pub trait StepScorer: Clone {
    fn vocab_size(&self) -> usize;
    fn step(&mut self, token: TokenId) -> Result<Vec<f64>>;
}

impl<T: Element> StepScorer for DecodeSession<'_, T> {
    fn vocab_size(&self) -> usize {
        self.vocab()
    }

    fn step(&mut self, token: TokenId) -> Result<Vec<f64>> {
        Ok(DecodeSession::step(self, token)?
            .into_iter()
            .map(|v| v.as_f64())
            .collect())
    }
}

fn default_beam() -> usize {
    10
}

fn default_max_len() -> usize {
    64
}

/// Beam-search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub beam: usize,
    /// Maximum generated tokens, excluding BOS and EOS.
    pub max_len: usize,
    /// Length-penalty exponent alpha; hypotheses are ranked by
    /// score / ((5+len)/6)^alpha. 0 means pure log-probability sum.
    pub length_penalty: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam: default_beam(),
            max_len: default_max_len(),
            length_penalty: 0.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(crate::error::Error::Config("beam must be >= 1".into()));
        }
        if self.max_len < 1 {
            return Err(crate::error::Error::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// A (partial) decoded sequence. `ids` starts with BOS; EOS is not
/// stored, but a finished hypothesis's score includes its EOS step.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: TokenSequence,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens without the BOS seed.
    pub fn output(&self) -> &[TokenId] {
        &self.ids[1..]
    }

    /// Ranking key with the Google-NMT-style length penalty.
    pub fn rank_key(&self, alpha: f64) -> f64 {
        self.score / length_penalty_divisor(self.output().len(), alpha)
    }
}

fn length_penalty_divisor(len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        1.0
    } else {
        ((5.0 + len as f64) / 6.0).powf(alpha)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyResult {
    /// Generated tokens, excluding BOS and EOS.
    pub ids: TokenSequence,
    /// Sum of chosen token log-probabilities (including EOS when the
    /// sequence finished).
    pub score: f64,
    /// True when the sequence hit `max_len` without emitting EOS.
    pub truncated: bool,
}

/// Argmax decoding; ties break toward the lowest token id.
pub fn greedy<S: StepScorer>(
    mut scorer: S,
    bos: TokenId,
    eos: TokenId,
    max_len: usize,
) -> Result<GreedyResult> {
    let mut ids = Vec::new();
    let mut score = 0.0;
    let mut truncated = false;
    let mut logits = scorer.step(bos)?;
    loop {
        let lp = log_softmax(&logits);
        let mut best = 0usize;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        score += lp[best];
        if best as TokenId == eos {
            break;
        }
        ids.push(best as TokenId);
        if ids.len() >= max_len {
            truncated = true;
            break;
        }
        logits = scorer.step(best as TokenId)?;
    }
    Ok(GreedyResult {
        ids,
        score,
        truncated,
    })
}

struct Live<S> {
    ids: TokenSequence,
    score: f64,
    state: S,
    next_lp: Vec<f64>,
}

/// Standard beam search. Every live hypothesis is expanded by all
/// vocabulary candidates; the best `beam` by score survive. Finished
/// hypotheses retire into a completed pool, hypotheses still alive at
/// `max_len` retire unfinished, and the search stops early once no
/// live hypothesis can still beat the pool. The returned list is
/// ranked best-first by score plus the optional length penalty.
pub fn beam_search<S: StepScorer>(
    scorer: S,
    cfg: &SearchConfig,
    bos: TokenId,
    eos: TokenId,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let vocab = scorer.vocab_size();
    let alpha = cfg.length_penalty;
    let max_divisor = length_penalty_divisor(cfg.max_len, alpha);

    let mut state = scorer;
    let first = state.step(bos)?;
    let mut live = vec![Live {
        ids: vec![bos],
        score: 0.0,
        state,
        next_lp: log_softmax(&first),
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        // (candidate score, source hyp, token), ties broken toward the
        // earlier hypothesis and the lower token id.
        let mut candidates: Vec<(f64, usize, TokenId)> = Vec::with_capacity(live.len() * vocab);
        for (i, hyp) in live.iter().enumerate() {
            for v in 0..vocab {
                candidates.push((hyp.score + hyp.next_lp[v], i, v as TokenId));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut next_live: Vec<Live<S>> = Vec::with_capacity(cfg.beam);
        for &(score, src, token) in candidates.iter().take(cfg.beam) {
            let parent = &live[src];
            if token == eos {
                pool.push(Hypothesis {
                    ids: parent.ids.clone(),
                    score,
                    finished: true,
                });
            } else if parent.ids.len() >= cfg.max_len {
                // already at max output length: retire unfinished
                let mut ids = parent.ids.clone();
                ids.push(token);
                pool.push(Hypothesis {
                    ids,
                    score,
                    finished: false,
                });
            } else {
                let mut st = parent.state.clone();
                let logits = st.step(token)?;
                let mut ids = parent.ids.clone();
                ids.push(token);
                next_live.push(Live {
                    ids,
                    score,
                    state: st,
                    next_lp: log_softmax(&logits),
                });
            }
        }
        live = next_live;

        // Early stop: scores only decrease with length, so a live
        // hypothesis can at best reach score / divisor(max_len).
        if !pool.is_empty() && !live.is_empty() {
            let best_pool = pool
                .iter()
                .map(|h| h.rank_key(alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            let best_live_bound = live
                .iter()
                .map(|h| {
                    if h.score < 0.0 {
                        h.score / max_divisor
                    } else {
                        h.score
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if best_pool >= best_live_bound {
                break;
            }
        }
    }

    for hyp in live {
        pool.push(Hypothesis {
            ids: hyp.ids,
            score: hyp.score,
            finished: false,
        });
    }
    pool.sort_by(|a, b| {
        b.rank_key(alpha)
            .partial_cmp(&a.rank_key(alpha))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(pool)
}
