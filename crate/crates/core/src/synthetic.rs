//! Synthetic corpora: the sequence copy task and a bracket-matching
//! language-modeling corpus with long-range constraints.

use rand::Rng;

use crate::data::{Encoded, Vocabulary};

/// Vocabulary of `symbols` copy-task tokens `s0 .. s{n-1}`.
pub fn copy_vocab(symbols: usize) -> Vocabulary {
    Vocabulary::from_words((0..symbols).map(|i| format!("s{i}")))
}

/// Random source sequences with their copy targets. `second` is the decoder
/// stream `<s> y_1 .. y_n </s>`.
pub fn copy_examples<R: Rng>(
    rng: &mut R,
    count: usize,
    symbols: usize,
    min_len: usize,
    max_len: usize,
) -> Vec<Encoded> {
    let first_symbol = crate::data::RESERVED.len();
    (0..count)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let source: Vec<usize> = (0..len)
                .map(|_| first_symbol + rng.gen_range(0..symbols))
                .collect();
            let mut target = Vec::with_capacity(len + 2);
            target.push(Vocabulary::BOS_ID);
            target.extend_from_slice(&source);
            target.push(Vocabulary::EOS_ID);
            Encoded {
                first: source,
                second: Some(target),
                label: None,
            }
        })
        .collect()
}

/// Shape of the bracket corpus.
#[derive(Clone, Copy, Debug)]
pub struct BracketSpec {
    /// Distinct bracket types; `(k` must be closed by `)k`.
    pub bracket_types: usize,
    /// Distinct filler words.
    pub fillers: usize,
    pub min_distance: usize,
    pub max_distance: usize,
    /// Bracket pairs per sentence.
    pub pairs_per_sentence: usize,
    /// Probability that a filler is the successor of the previous one
    /// rather than a uniform draw.
    pub successor_prob: f64,
}

impl Default for BracketSpec {
    fn default() -> Self {
        BracketSpec {
            bracket_types: 50,
            fillers: 20,
            min_distance: 5,
            max_distance: 15,
            pairs_per_sentence: 2,
            successor_prob: 0.0,
        }
    }
}

/// One sentence: filler words with non-nested bracket pairs whose closer
/// appears `min_distance..=max_distance` tokens after its opener.
///
/// Each filler is the successor of the previous one with probability
/// `successor_prob` and uniform otherwise.
pub fn bracket_sentence<R: Rng>(rng: &mut R, spec: &BracketSpec) -> Vec<String> {
    let mut out = Vec::new();
    let mut filler = rng.gen_range(0..spec.fillers);
    let mut push_filler = |out: &mut Vec<String>, rng: &mut R| {
        filler = if rng.gen_bool(spec.successor_prob) {
            (filler + 1) % spec.fillers
        } else {
            rng.gen_range(0..spec.fillers)
        };
        out.push(format!("w{filler}"));
    };
    for _ in 0..spec.pairs_per_sentence {
        for _ in 0..rng.gen_range(1..=3) {
            push_filler(&mut out, rng);
        }
        let kind = rng.gen_range(0..spec.bracket_types);
        out.push(format!("({kind}"));
        let distance = rng.gen_range(spec.min_distance..=spec.max_distance);
        for _ in 1..distance {
            push_filler(&mut out, rng);
        }
        out.push(format!("){kind}"));
    }
    for _ in 0..rng.gen_range(1..=3) {
        push_filler(&mut out, rng);
    }
    out
}

/// Sentences totalling at least `tokens` tokens.
pub fn bracket_corpus<R: Rng>(rng: &mut R, spec: &BracketSpec, tokens: usize) -> Vec<Vec<String>> {
    let mut sentences = Vec::new();
    let mut total = 0;
    while total < tokens {
        let s = bracket_sentence(rng, spec);
        total += s.len();
        sentences.push(s);
    }
    sentences
}
