//! Batch recognition and throughput benchmarking over a model.

use crate::error::Result;
use crate::image::ImageTensor;
use crate::model::OcrModel;
use crate::search::{beam_search, SearchConfig};
use crate::tensor::Element;
use crate::tokenizer::{Tokenizer, BOS_ID, EOS_ID};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One recognized line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recognition {
    pub id: String,
    pub text: String,
    /// Sum of token log-probabilities of the winning hypothesis.
    pub score: f64,
    /// True when the hypothesis hit the length limit without EOS.
    pub truncated: bool,
    /// Decoder steps taken for this line (EOS included).
    pub tokens: usize,
}

/// Recognize a batch of images: resize, encode, beam-search, decode.
/// Images run in parallel; output order matches input order.
pub fn recognize_batch<T: Element>(
    model: &OcrModel<T>,
    tokenizer: &Tokenizer,
    images: &[(String, ImageTensor)],
    search: &SearchConfig,
) -> Result<Vec<Recognition>> {
    search.validate()?;
    let max_len = search.max_len.min(model.config.decoder.max_positions - 1);
    let search = SearchConfig {
        max_len,
        ..search.clone()
    };
    images
        .par_iter()
        .map(|(id, img)| -> Result<Recognition> {
            let memory = model.encode_image(img)?;
            let session = model.decode_session(&memory)?;
            let hyps = beam_search(session, &search, BOS_ID, EOS_ID)?;
            let best = &hyps[0];
            let text = tokenizer.decode(best.output())?;
            Ok(Recognition {
                id: id.clone(),
                text,
                score: best.score,
                truncated: !best.finished,
                tokens: best.output().len() + usize::from(best.finished),
            })
        })
        .collect()
}

/// Throughput report: total sentences, total generated tokens, wall
/// time, sentences/s, tokens/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub total_sentences: usize,
    pub total_tokens: usize,
    pub wall_time_s: f64,
    pub sentences_per_s: f64,
    pub tokens_per_s: f64,
}

/// Time recognition over a corpus and report throughput.
pub fn bench<T: Element>(
    model: &OcrModel<T>,
    tokenizer: &Tokenizer,
    images: &[(String, ImageTensor)],
    search: &SearchConfig,
) -> Result<BenchReport> {
    let start = std::time::Instant::now();
    let results = recognize_batch(model, tokenizer, images, search)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let total_tokens: usize = results.iter().map(|r| r.tokens).sum();
    let rate = |count: usize| {
        if wall_time_s > 0.0 && count > 0 {
            count as f64 / wall_time_s
        } else {
            0.0
        }
    };
    Ok(BenchReport {
        total_sentences: results.len(),
        total_tokens,
        wall_time_s,
        sentences_per_s: rate(results.len()),
        tokens_per_s: rate(total_tokens),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_batch_reports_zeros() {
        let model = OcrModel::<f32>::init(crate::ModelConfig::tiny(16), 1).unwrap();
        let tok = Tokenizer::train(&["ab ba".to_string()], 16).unwrap();
        // vocab mismatch is fine here: no images are decoded
        let report = bench(&model, &tok, &[], &SearchConfig::default()).unwrap();
        assert_eq!(report.total_sentences, 0);
        assert_eq!(report.total_tokens, 0);
        assert_eq!(report.sentences_per_s, 0.0);
        assert_eq!(report.tokens_per_s, 0.0);
    }
}
