//! Search correctness against independent oracles: exhaustive
//! enumeration on toy models, greedy/beam agreement, dominance, and
//! determinism.

mod common;

use lineocr::rng::rng_from;
use lineocr::search::{beam_search, greedy, SearchConfig, StepScorer};
use lineocr::tokenizer::TokenId;
use rand::Rng;

const BOS: TokenId = 1;
const EOS: TokenId = 2;

/// Toy model: the logits after any prefix are a pure function of
/// (seed, prefix), so enumeration and search see the same scores.
#[derive(Clone)]
struct ToyModel {
    vocab: usize,
    seed: u64,
    prefix: Vec<TokenId>,
}

impl ToyModel {
    fn new(vocab: usize, seed: u64) -> Self {
        ToyModel {
            vocab,
            seed,
            prefix: Vec::new(),
        }
    }
}

impl StepScorer for ToyModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn step(&mut self, token: TokenId) -> lineocr::Result<Vec<f64>> {
        self.prefix.push(token);
        let tags: Vec<u64> = self.prefix.iter().map(|&t| t as u64 + 101).collect();
        let mut rng = rng_from(self.seed, &tags);
        Ok((0..self.vocab)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect())
    }
}

/// Scripted model: fixed logits per step regardless of tokens.
#[derive(Clone)]
struct ScriptModel {
    steps: Vec<Vec<f64>>,
    t: usize,
}

impl StepScorer for ScriptModel {
    fn vocab_size(&self) -> usize {
        self.steps[0].len()
    }

    fn step(&mut self, _token: TokenId) -> lineocr::Result<Vec<f64>> {
        let out = self.steps[self.t.min(self.steps.len() - 1)].clone();
        self.t += 1;
        Ok(out)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Brute-force enumeration of every sequence of non-EOS tokens with
/// length <= max_len: shorter ones are terminated by EOS (its log-prob
/// counts), length-max_len ones end unfinished. Returns the best
/// (ids, score).
fn exhaustive_best(model: &ToyModel, max_len: usize) -> (Vec<TokenId>, f64) {
    fn visit(
        state: &ToyModel,
        next_lp: &[f64],
        ids: &mut Vec<TokenId>,
        score: f64,
        max_len: usize,
        best: &mut (Vec<TokenId>, f64),
    ) {
        if ids.len() == max_len {
            if score > best.1 {
                *best = (ids.clone(), score);
            }
            return;
        }
        let finished = score + next_lp[EOS as usize];
        if finished > best.1 {
            *best = (ids.clone(), finished);
        }
        for v in 0..state.vocab as TokenId {
            if v == EOS {
                continue;
            }
            let mut child = state.clone();
            let lp = log_softmax(&child.step(v).unwrap());
            ids.push(v);
            visit(&child, &lp, ids, score + next_lp[v as usize], max_len, best);
            ids.pop();
        }
    }

    let mut state = model.clone();
    let lp = log_softmax(&state.step(BOS).unwrap());
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    visit(&state, &lp, &mut Vec::new(), 0.0, max_len, &mut best);
    best
}

#[test]
fn greedy_stops_on_immediate_eos() {
    let mut steps = vec![vec![0.0; 6]];
    steps[0][EOS as usize] = 10.0;
    let out = greedy(ScriptModel { steps, t: 0 }, BOS, EOS, 8).unwrap();
    assert!(out.ids.is_empty());
    assert!(!out.truncated);
}

#[test]
fn greedy_breaks_ties_toward_lowest_id() {
    // tokens 3 and 5 tie for the max; 3 must win.
    let mut first = vec![0.0; 6];
    first[3] = 2.0;
    first[5] = 2.0;
    let mut second = vec![0.0; 6];
    second[EOS as usize] = 9.0;
    let out = greedy(
        ScriptModel {
            steps: vec![first, second],
            t: 0,
        },
        BOS,
        EOS,
        8,
    )
    .unwrap();
    assert_eq!(out.ids, vec![3]);
}

#[test]
fn greedy_follows_hand_set_logits() {
    // force "4 5 EOS" -> exactly [4, 5]
    let mut s1 = vec![0.0; 6];
    s1[4] = 5.0;
    let mut s2 = vec![0.0; 6];
    s2[5] = 5.0;
    let mut s3 = vec![0.0; 6];
    s3[EOS as usize] = 5.0;
    let out = greedy(
        ScriptModel {
            steps: vec![s1, s2, s3],
            t: 0,
        },
        BOS,
        EOS,
        8,
    )
    .unwrap();
    assert_eq!(out.ids, vec![4, 5]);
    assert!(!out.truncated);
}

#[test]
fn greedy_marks_truncation_at_max_len() {
    let mut s = vec![0.0; 6];
    s[4] = 5.0; // never EOS
    let out = greedy(
        ScriptModel {
            steps: vec![s],
            t: 0,
        },
        BOS,
        EOS,
        3,
    )
    .unwrap();
    assert_eq!(out.ids, vec![4, 4, 4]);
    assert!(out.truncated);
}

#[test]
fn beam_one_equals_greedy_on_100_random_models() {
    for seed in 0..100u64 {
        let vocab = 4 + (seed % 5) as usize;
        let model = ToyModel::new(vocab, seed);
        let cfg = SearchConfig {
            beam: 1,
            max_len: 6,
            length_penalty: 0.0,
        };
        let g = greedy(model.clone(), BOS, EOS, cfg.max_len).unwrap();
        let beams = beam_search(model, &cfg, BOS, EOS).unwrap();
        let best = &beams[0];
        assert_eq!(best.output(), &g.ids[..], "seed {seed}");
        assert!(
            (best.score - g.score).abs() < 1e-12,
            "seed {seed}: beam {} vs greedy {}",
            best.score,
            g.score
        );
        assert_eq!(best.finished, !g.truncated, "seed {seed}");
    }
}

#[test]
fn huge_beam_matches_exhaustive_enumeration() {
    // beam >= V^max_len explores everything: must equal brute force.
    let max_len = 4;
    for seed in 0..100u64 {
        let model = ToyModel::new(6, seed);
        let (want_ids, want_score) = exhaustive_best(&model, max_len);
        let cfg = SearchConfig {
            beam: 6usize.pow(4),
            max_len,
            length_penalty: 0.0,
        };
        let beams = beam_search(model, &cfg, BOS, EOS).unwrap();
        let best = &beams[0];
        assert!(
            (best.score - want_score).abs() < 1e-9,
            "seed {seed}: beam score {} vs exhaustive {}",
            best.score,
            want_score
        );
        assert_eq!(best.output(), &want_ids[..], "seed {seed}");
    }
}

#[test]
fn best_beam_score_dominates_greedy() {
    for seed in 0..100u64 {
        let vocab = 5 + (seed % 3) as usize;
        let model = ToyModel::new(vocab, 1000 + seed);
        let g = greedy(model.clone(), BOS, EOS, 5).unwrap();
        let cfg = SearchConfig {
            beam: 5,
            max_len: 5,
            length_penalty: 0.0,
        };
        let beams = beam_search(model, &cfg, BOS, EOS).unwrap();
        assert!(
            beams[0].score >= g.score - 1e-12,
            "seed {seed}: beam {} < greedy {}",
            beams[0].score,
            g.score
        );
    }
}

#[test]
fn beam_quality_is_monotone_in_beam_width() {
    for seed in 0..50u64 {
        let model = ToyModel::new(6, 500 + seed);
        let mut prev = f64::NEG_INFINITY;
        for beam in 1..=5 {
            let cfg = SearchConfig {
                beam,
                max_len: 5,
                length_penalty: 0.0,
            };
            let best = beam_search(model.clone(), &cfg, BOS, EOS).unwrap()[0].score;
            assert!(
                best >= prev - 1e-12,
                "seed {seed}: beam {beam} score {best} < beam {} score {prev}",
                beam - 1
            );
            prev = best;
        }
    }
}

#[test]
fn search_is_deterministic_across_runs() {
    let cfg = SearchConfig {
        beam: 4,
        max_len: 6,
        length_penalty: 0.5,
    };
    for seed in 0..20u64 {
        let a = beam_search(ToyModel::new(6, seed), &cfg, BOS, EOS).unwrap();
        let b = beam_search(ToyModel::new(6, seed), &cfg, BOS, EOS).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ids, y.ids);
            assert_eq!(x.score.to_bits(), y.score.to_bits());
            assert_eq!(x.finished, y.finished);
        }
    }
}

#[test]
fn scores_are_non_increasing_along_any_hypothesis() {
    // log-probs are <= 0, so extending can only lower the score.
    for seed in 0..20u64 {
        let model = ToyModel::new(6, seed);
        let cfg = SearchConfig {
            beam: 4,
            max_len: 5,
            length_penalty: 0.0,
        };
        let beams = beam_search(model, &cfg, BOS, EOS).unwrap();
        for h in &beams {
            assert!(h.score <= 1e-12, "positive score {}", h.score);
        }
    }
}

#[test]
fn finished_hypotheses_rank_with_score_not_length() {
    let cfg_plain = SearchConfig {
        beam: 3,
        max_len: 6,
        length_penalty: 0.0,
    };
    let beams = beam_search(ToyModel::new(6, 7), &cfg_plain, BOS, EOS).unwrap();
    for w in beams.windows(2) {
        assert!(w[0].score >= w[1].score - 1e-12);
    }
}

#[test]
fn invalid_search_config_is_rejected() {
    assert!(SearchConfig {
        beam: 0,
        max_len: 4,
        length_penalty: 0.0
    }
    .validate()
    .is_err());
    assert!(SearchConfig {
        beam: 2,
        max_len: 0,
        length_penalty: 0.0
    }
    .validate()
    .is_err());
}
