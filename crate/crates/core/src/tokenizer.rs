//! Trainable byte-pair-encoding wordpiece tokenizer.
//!
//! Character-level BPE with a word-end marker: each whitespace-split
//! word becomes its character symbols followed by `▁`, and training
//! greedily merges the most frequent adjacent pair (ties broken
//! lexicographically, so training is deterministic). Specials occupy
//! fixed ids 0-3 and are never merge products.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;

pub type TokenId = u32;
pub type TokenSequence = Vec<TokenId>;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;

/// Word-end marker, kept as its own base symbol so the alphabet is
/// exactly "corpus characters plus one boundary marker". Merges may
/// fuse it into word-final pieces.
pub const WORD_END: char = '\u{2581}'; // ▁

const SPECIAL_PIECES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const FILE_MAGIC: &str = "linebpe";
const FILE_VERSION: &str = "v1";

/// Dense id ↔ piece bijection with fixed specials at ids 0-3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_piece: Vec<String>,
    piece_to_id: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut piece_to_id = HashMap::with_capacity(pieces.len());
        for (id, piece) in pieces.iter().enumerate() {
            if piece_to_id.insert(piece.clone(), id as TokenId).is_some() {
                return Err(Error::TokenizerFormat(format!(
                    "duplicate piece `{piece}`"
                )));
            }
        }
        for (id, want) in SPECIAL_PIECES.iter().enumerate() {
            if pieces.get(id).map(String::as_str) != Some(*want) {
                return Err(Error::TokenizerFormat(format!(
                    "piece {id} must be `{want}`"
                )));
            }
        }
        Ok(Vocabulary {
            id_to_piece: pieces,
            piece_to_id,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_piece.len()
    }

    pub fn piece(&self, id: TokenId) -> Result<&str> {
        self.id_to_piece
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::IndexOutOfRange {
                id: id as usize,
                bound: self.id_to_piece.len(),
            })
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.piece_to_id.get(piece).copied()
    }
}

/// Ordered merge list; encode applies these in training order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
}

impl MergeTable {
    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.merges
    }
}

/// Trained tokenizer: vocabulary + merges.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub merges: MergeTable,
}

/// Train a BPE vocabulary on a corpus of textline transcripts.
///
/// The base alphabet is every character appearing in any
/// whitespace-split word, plus the word-end marker. `target_vocab`
/// bounds the total vocabulary including the 4 specials.
pub fn train_bpe(corpus: &[String], target_vocab: usize) -> Result<(Vocabulary, MergeTable)> {
    // word -> frequency, in first-seen order for determinism
    let mut word_order: Vec<Vec<String>> = Vec::new();
    let mut word_freq: Vec<u64> = Vec::new();
    let mut word_index: HashMap<String, usize> = HashMap::new();
    let mut alphabet: Vec<char> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for line in corpus {
        for word in line.split_whitespace() {
            if let Some(&i) = word_index.get(word) {
                word_freq[i] += 1;
                continue;
            }
            let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
            symbols.push(WORD_END.to_string());
            for c in word.chars() {
                if seen.insert(c) {
                    alphabet.push(c);
                }
            }
            word_index.insert(word.to_string(), word_order.len());
            word_order.push(symbols);
            word_freq.push(1);
        }
    }
    if word_order.is_empty() {
        return Err(Error::TokenizerTraining(
            "empty corpus: no words to train on".into(),
        ));
    }
    alphabet.sort_unstable();

    let base_size = SPECIAL_PIECES.len() + alphabet.len() + 1; // + word-end marker
    if target_vocab < base_size {
        return Err(Error::TokenizerTraining(format!(
            "target_vocab {target_vocab} below alphabet size {} + marker + {} specials",
            alphabet.len(),
            SPECIAL_PIECES.len()
        )));
    }

    let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
    pieces.extend(alphabet.iter().map(|c| c.to_string()));
    pieces.push(WORD_END.to_string());
    let mut known: std::collections::HashSet<String> = pieces.iter().cloned().collect();
    let mut merges = Vec::new();

    while pieces.len() < target_vocab {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, &freq) in word_order.iter().zip(&word_freq) {
            for pair in symbols.windows(2) {
                *counts.entry((&pair[0], &pair[1])).or_insert(0) += freq;
            }
        }
        // Best pair by count; lexicographic tie-break for determinism.
        // Pairs whose product would shadow a special piece are skipped.
        let best = counts
            .iter()
            .filter(|(&(l, r), _)| !SPECIAL_PIECES.contains(&format!("{l}{r}").as_str()))
            .map(|(&(l, r), &c)| (c, l, r))
            .max_by(|a, b| a.0.cmp(&b.0).then_with(|| (b.1, b.2).cmp(&(a.1, a.2))));
        let Some((_, left, right)) = best else {
            break;
        };
        let (left, right) = (left.to_string(), right.to_string());
        let product = format!("{left}{right}");
        for symbols in &mut word_order {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = product.clone();
                    symbols.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        merges.push((left, right));
        if known.insert(product.clone()) {
            pieces.push(product);
        }
    }

    Ok((Vocabulary::from_pieces(pieces)?, MergeTable { merges }))
}

impl Tokenizer {
    pub fn train(corpus: &[String], target_vocab: usize) -> Result<Self> {
        let (vocab, merges) = train_bpe(corpus, target_vocab)?;
        Ok(Tokenizer { vocab, merges })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    /// Encode text into wordpiece ids. No BOS/EOS are added; callers
    /// add them. Whitespace runs are treated as single word breaks,
    /// and characters outside the training alphabet map to `<unk>`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
            symbols.push(WORD_END.to_string());
            for (left, right) in self.merges.pairs() {
                let mut i = 0;
                while i + 1 < symbols.len() {
                    if &symbols[i] == left && &symbols[i + 1] == right {
                        symbols[i] = format!("{left}{right}");
                        symbols.remove(i + 1);
                    } else {
                        i += 1;
                    }
                }
            }
            for sym in symbols {
                out.push(self.vocab.id(&sym).unwrap_or(UNK_ID));
            }
        }
        out
    }

    /// Inverse of encode: concatenates pieces, turns word-end markers
    /// into spaces, strips specials.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut text = String::new();
        for &id in ids {
            if id < SPECIAL_PIECES.len() as TokenId {
                continue;
            }
            text.push_str(self.vocab.piece(id)?);
        }
        let spaced: String = text
            .chars()
            .map(|c| if c == WORD_END { ' ' } else { c })
            .collect();
        Ok(spaced.trim_end().to_string())
    }

    // ── plain-text file format ───────────────────────────────────────
    // line 1: `linebpe v1 <vocab-size>`
    // then <vocab-size> piece lines, then `left<TAB>right` merge lines.

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FILE_MAGIC} {FILE_VERSION} {}", self.vocab.size());
        for piece in &self.vocab.id_to_piece {
            let _ = writeln!(out, "{piece}");
        }
        for (l, r) in self.merges.pairs() {
            let _ = writeln!(out, "{l}\t{r}");
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let header = lines
            .next()
            .ok_or_else(|| Error::TokenizerFormat("missing header".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 3 || fields[0] != FILE_MAGIC {
            return Err(Error::TokenizerFormat(format!("bad header `{header}`")));
        }
        if fields[1] != FILE_VERSION {
            return Err(Error::TokenizerFormat(format!(
                "unsupported version `{}`",
                fields[1]
            )));
        }
        let vocab_size: usize = fields[2]
            .parse()
            .map_err(|_| Error::TokenizerFormat(format!("bad vocab size `{}`", fields[2])))?;
        let mut pieces = Vec::with_capacity(vocab_size);
        for i in 0..vocab_size {
            let line = lines
                .next()
                .ok_or_else(|| Error::TokenizerFormat(format!("missing piece line {i}")))?;
            pieces.push(line.to_string());
        }
        let mut merges = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (l, r) = line.split_once('\t').ok_or_else(|| {
                Error::TokenizerFormat(format!("merge line without tab: `{line}`"))
            })?;
            merges.push((l.to_string(), r.to_string()));
        }
        Ok(Tokenizer {
            vocab: Vocabulary::from_pieces(pieces)?,
            merges: MergeTable { merges },
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::image::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn first_merge_on_aaab_is_aa() {
        // word "aaab" -> [a,a,a,b,▁]; pair (a,a) has count 2, the rest 1.
        let (_, merges) = train_bpe(&corpus(&["aaab"]), 8).unwrap();
        assert_eq!(
            merges.pairs()[0],
            ("a".to_string(), "a".to_string()),
            "pair (a,a) occurs twice and must merge first"
        );
    }

    #[test]
    fn no_merge_budget_leaves_table_empty() {
        // alphabet {a,b} + marker + 4 specials = 7 pieces exactly.
        let (vocab, merges) = train_bpe(&corpus(&["ab", "ba"]), 7).unwrap();
        assert_eq!(vocab.size(), 7);
        assert!(merges.is_empty());
    }

    #[test]
    fn frequent_pair_merges_before_rare() {
        // (a,b) count 2; pairs involving c/d count 1.
        let (_, merges) = train_bpe(&corpus(&["ab", "ab", "cd"]), 16).unwrap();
        let ab_pos = merges
            .pairs()
            .iter()
            .position(|(l, r)| l == "a" && r == "b")
            .expect("(a,b) must be merged");
        for (i, (l, r)) in merges.pairs().iter().enumerate() {
            if l.contains('c') || l.contains('d') || r.contains('c') || r.contains('d') {
                assert!(ab_pos < i, "(a,b) must precede any c/d merge");
            }
        }
    }

    #[test]
    fn encode_aaab_follows_trained_merges() {
        // With budget for one merge, "aaab" -> [aa, a, b, ▁].
        let tok = Tokenizer::train(&corpus(&["aaab"]), 8).unwrap();
        let ids = tok.encode("aaab");
        let pieces: Vec<&str> = ids.iter().map(|&i| tok.vocab.piece(i).unwrap()).collect();
        assert_eq!(pieces, vec!["aa", "a", "b", "\u{2581}"]);
    }

    #[test]
    fn empty_corpus_is_a_training_error() {
        let err = train_bpe(&corpus(&["", "   "]), 32).unwrap_err();
        assert!(matches!(err, Error::TokenizerTraining(_)));
    }

    #[test]
    fn encode_empty_is_empty() {
        let tok = Tokenizer::train(&corpus(&["ab"]), 16).unwrap();
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&[]).unwrap(), "");
    }

    #[test]
    fn decode_strips_specials() {
        let tok = Tokenizer::train(&corpus(&["ab"]), 16).unwrap();
        let x = tok.encode("ab");
        let mut with_specials = vec![BOS_ID];
        with_specials.extend(&x);
        with_specials.push(EOS_ID);
        assert_eq!(tok.decode(&with_specials).unwrap(), tok.decode(&x).unwrap());
    }

    #[test]
    fn unknown_chars_map_to_unk() {
        let tok = Tokenizer::train(&corpus(&["ab"]), 16).unwrap();
        let ids = tok.encode("aZb");
        assert!(ids.contains(&UNK_ID));
    }

    #[test]
    fn out_of_range_id_is_an_index_error() {
        let tok = Tokenizer::train(&corpus(&["ab"]), 16).unwrap();
        let bad = tok.vocab_size() as TokenId;
        assert!(matches!(
            tok.decode(&[bad]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn round_trip_on_training_text() {
        let lines = corpus(&["the cat sat", "on the mat", "a cab"]);
        let tok = Tokenizer::train(&lines, 48).unwrap();
        for s in ["the cat sat", "on the mat", "a cab", "the the the"] {
            assert_eq!(tok.decode(&tok.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn file_round_trip_preserves_encodings() {
        let lines = corpus(&["hello world", "held well"]);
        let tok = Tokenizer::train(&lines, 40).unwrap();
        let reloaded = Tokenizer::from_file_string(&tok.to_file_string()).unwrap();
        assert_eq!(reloaded, tok);
        assert_eq!(reloaded.encode("hello world"), tok.encode("hello world"));
    }
}
