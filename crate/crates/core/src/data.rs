//! Vocabulary, pretrained embeddings, dataset loaders, and padded batching.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::heads::NLI_LABELS;
use crate::params::xavier_uniform;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const RESERVED: [&str; 4] = [PAD, UNK, BOS, EOS];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const EOS_ID: usize = 3;

    /// Reserved tokens followed by `words` in the given order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.into();
            if !RESERVED.contains(&w.as_str()) && !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Tokens with at least `min_freq` occurrences, ordered by descending
    /// frequency then ascending token, truncated to `max_size` entries
    /// after the reserved block.
    pub fn build<'a, I>(stream: I, min_freq: usize, max_size: Option<usize>) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen = false;
        for tok in stream {
            seen = true;
            if !RESERVED.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen {
            return Err(Error::Precondition(
                "cannot build a vocabulary from an empty token stream".into(),
            ));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(max) = max_size {
            ranked.truncate(max);
        }
        Ok(Vocabulary::from_words(ranked.into_iter().map(|(t, _)| t)))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// One non-reserved token per line; line `n` (from 0) is index `4 + n`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut words = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(Error::Format {
                    path: path.into(),
                    line: n + 1,
                    msg: "vocabulary lines hold exactly one token".into(),
                });
            }
            words.push(line.to_string());
        }
        let vocab = Vocabulary::from_words(words.iter().cloned());
        if vocab.len() != words.len() + RESERVED.len() {
            return Err(Error::Format {
                path: path.into(),
                line: 0,
                msg: "duplicate or reserved token in vocabulary file".into(),
            });
        }
        Ok(vocab)
    }
}

/// `|V| x e` embedding matrix with per-row provenance.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub values: Tensor,
    /// `true` for rows copied from a pretrained file, `false` for OOV rows.
    pub pretrained: Vec<bool>,
}

impl EmbeddingTable {
    /// Table with no pretrained rows, initialized like other weight matrices.
    pub fn random<R: Rng>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        EmbeddingTable {
            values: xavier_uniform(vocab, dim, rng),
            pretrained: vec![false; vocab],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// Reads `token v1 .. ve` lines. Rows for vocabulary tokens are copied; the
/// remaining rows are drawn from N(0, 1) with a generator seeded by `seed`
/// and flagged OOV. The width of the first line fixes `e`.
pub fn load_pretrained(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dim: Option<usize> = None;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Format {
                    path: path.into(),
                    line: line_no,
                    msg: format!("not a number: {f}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let width = *dim.get_or_insert(values.len());
        if values.len() != width || width == 0 {
            return Err(Error::Format {
                path: path.into(),
                line: line_no,
                msg: format!("expected {width} values, found {}", values.len()),
            });
        }
        if let Some(id) = vocab.get(token) {
            rows[id].get_or_insert(values);
        }
    }
    let Some(dim) = dim else {
        return Err(Error::Format {
            path: path.into(),
            line: 0,
            msg: "embedding file is empty".into(),
        });
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(vocab.len() * dim);
    let mut pretrained = Vec::with_capacity(vocab.len());
    for row in rows {
        match row {
            Some(v) => {
                data.extend(v);
                pretrained.push(true);
            }
            None => {
                data.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
                pretrained.push(false);
            }
        }
    }
    Ok(EmbeddingTable {
        values: Tensor::matrix(vocab.len(), dim, data),
        pretrained,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// One whitespace-tokenized sentence per line.
    LmText,
    /// `label<TAB>sentence`
    LabeledSentences,
    /// `label<TAB>premise<TAB>hypothesis`
    SentencePairs,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm-text" => Ok(DatasetKind::LmText),
            "labeled-sentences" => Ok(DatasetKind::LabeledSentences),
            "sentence-pairs" => Ok(DatasetKind::SentencePairs),
            other => Err(Error::config(
                "kind",
                format!("unknown dataset kind `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<String>,
    pub second: Option<Vec<String>>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub examples: Vec<Example>,
    /// Lines skipped because their label is not a known class.
    pub dropped: usize,
}

fn tokenize(s: &str, lowercase: bool) -> Vec<String> {
    s.split_whitespace()
        .map(|t| {
            if lowercase {
                t.to_lowercase()
            } else {
                t.to_string()
            }
        })
        .collect()
}

/// Parses a dataset file. Sentence pairs are lowercased; pairs whose label
/// is not one of the three inference classes are dropped and counted.
pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path, kind)
}

pub fn parse_dataset(text: &str, path: &Path, kind: DatasetKind) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut dropped = 0;
    let malformed = |line: usize, msg: &str| Error::Format {
        path: path.into(),
        line,
        msg: msg.into(),
    };
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        match kind {
            DatasetKind::LmText => examples.push(Example {
                tokens: tokenize(line, false),
                second: None,
                label: None,
            }),
            DatasetKind::LabeledSentences => {
                let (label, sentence) = line
                    .split_once('\t')
                    .ok_or_else(|| malformed(line_no, "expected label<TAB>sentence"))?;
                let label: usize = label
                    .trim()
                    .parse()
                    .map_err(|_| malformed(line_no, "label must be a class index"))?;
                let tokens = tokenize(sentence, false);
                if tokens.is_empty() {
                    return Err(malformed(line_no, "empty sentence"));
                }
                examples.push(Example {
                    tokens,
                    second: None,
                    label: Some(label),
                });
            }
            DatasetKind::SentencePairs => {
                let fields: Vec<&str> = line.split('\t').collect();
                let [label, premise, hypothesis] = fields[..] else {
                    return Err(malformed(
                        line_no,
                        "expected label<TAB>premise<TAB>hypothesis",
                    ));
                };
                let Some(label) = NLI_LABELS.iter().position(|l| *l == label.trim()) else {
                    dropped += 1;
                    continue;
                };
                let premise = tokenize(premise, true);
                let hypothesis = tokenize(hypothesis, true);
                if premise.is_empty() || hypothesis.is_empty() {
                    return Err(malformed(line_no, "empty sentence in pair"));
                }
                examples.push(Example {
                    tokens: premise,
                    second: Some(hypothesis),
                    label: Some(label),
                });
            }
        }
    }
    Ok(Dataset {
        kind,
        examples,
        dropped,
    })
}

/// Fine-grained sentiment `{0..4}` to binary: neutral (2) rows removed,
/// `{0, 1} -> 0`, `{3, 4} -> 1`.
pub fn sentiment_to_binary(examples: &[Example]) -> Vec<Example> {
    examples
        .iter()
        .filter_map(|e| {
            let label = match e.label? {
                0 | 1 => 0,
                3 | 4 => 1,
                _ => return None,
            };
            Some(Example {
                label: Some(label),
                ..e.clone()
            })
        })
        .collect()
}

/// Index-encoded example ready for batching.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub first: Vec<usize>,
    pub second: Option<Vec<usize>>,
    pub label: Option<usize>,
}

/// Left-aligned `B x L` block of token indices. Padding uses
/// [`Vocabulary::PAD_ID`] and `mask == false`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqBlock {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
}

impl SeqBlock {
    pub fn from_sequences(seqs: &[&[usize]]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Precondition("cannot batch empty sequences".into()));
        }
        let batch = seqs.len();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut tokens = vec![Vocabulary::PAD_ID; batch * len];
        let mut mask = vec![false; batch * len];
        for (b, s) in seqs.iter().enumerate() {
            tokens[b * len..b * len + s.len()].copy_from_slice(s);
            mask[b * len..b * len + s.len()]
                .iter_mut()
                .for_each(|m| *m = true);
        }
        Ok(SeqBlock {
            batch,
            len,
            tokens,
            mask,
        })
    }

    /// Token indices of every row at step `t`.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.batch)
            .map(|b| self.tokens[b * self.len + t])
            .collect()
    }

    pub fn column_mask(&self, t: usize) -> Vec<bool> {
        (0..self.batch)
            .map(|b| self.mask[b * self.len + t])
            .collect()
    }

    /// Time-major masks, `masks[t][b]`.
    pub fn step_masks(&self) -> Vec<Vec<bool>> {
        (0..self.len).map(|t| self.column_mask(t)).collect()
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| {
                self.mask[b * self.len..(b + 1) * self.len]
                    .iter()
                    .filter(|m| **m)
                    .count()
            })
            .collect()
    }

    pub fn padded_positions(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub first: SeqBlock,
    pub second: Option<SeqBlock>,
    pub labels: Vec<Option<usize>>,
}

impl Batch {
    pub fn from_examples(examples: &[&Encoded]) -> Result<Self> {
        let firsts: Vec<&[usize]> = examples.iter().map(|e| e.first.as_slice()).collect();
        let first = SeqBlock::from_sequences(&firsts)?;
        let second = if examples.iter().all(|e| e.second.is_some()) && !examples.is_empty() {
            let seconds: Vec<&[usize]> = examples
                .iter()
                .map(|e| e.second.as_deref().unwrap_or_default())
                .collect();
            Some(SeqBlock::from_sequences(&seconds)?)
        } else {
            None
        };
        Ok(Batch {
            first,
            second,
            labels: examples.iter().map(|e| e.label).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.first.batch
    }
}

/// Splits `examples` into padded batches after a shuffle driven by `seed`.
/// With `bucketing`, examples of similar length share a batch and the batch
/// order is shuffled afterwards.
pub fn batchify(
    examples: &[Encoded],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    bucketing: bool,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if examples.is_empty() {
        return Err(Error::Precondition("no examples to batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if shuffle {
        order.shuffle(&mut rng);
    }
    if bucketing {
        let len =
            |i: &usize| examples[*i].first.len() + examples[*i].second.as_ref().map_or(0, Vec::len);
        for chunk in order.chunks_mut(batch_size * 50) {
            chunk.sort_by_key(len);
        }
    }
    let mut batches = order
        .chunks(batch_size)
        .map(|idx| {
            let refs: Vec<&Encoded> = idx.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs)
        })
        .collect::<Result<Vec<_>>>()?;
    if bucketing && shuffle {
        batches.shuffle(&mut rng);
    }
    Ok(batches)
}
