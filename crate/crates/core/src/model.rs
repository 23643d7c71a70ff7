//! Task models: embeddings, recurrence and head wired together, with a
//! batch forward pass that returns the summed loss and its metrics.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::cells::{LstmStackWeights, Recurrent, StackSpec, StackWeights};
use crate::config::{ModelKind, RunConfig, Task};
use crate::data::{Batch, EmbeddingTable, SeqBlock};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, InterAttentionWeights, Seq2SeqWeights};
use crate::heads::{
    count_correct, infer_pair, lm_loss, mean_pool, Affine, ClassifierHead, EvalMetrics, Side,
};
use crate::optim::dropout;
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub enum Architecture {
    /// Next-token prediction from the top hidden state.
    Lm { rnn: Recurrent, out: Affine },
    /// Mean-pooled single-sentence classifier.
    Sentence {
        rnn: Recurrent,
        head: ClassifierHead,
    },
    /// Two encoders (possibly shared) whose pooled states are concatenated.
    Pair {
        premise: Recurrent,
        hypothesis: Recurrent,
        head: ClassifierHead,
    },
    /// Premise encoder, hypothesis decoder with inter-attention; the pooled
    /// decoder predictions are classified.
    Conditional {
        s2s: Seq2SeqWeights,
        head: ClassifierHead,
    },
    /// Teacher-forced sequence transduction.
    Seq2Seq { s2s: Seq2SeqWeights, out: Affine },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub embedding: ParamId,
    /// Provenance of each embedding row.
    pub pretrained: Vec<bool>,
    pub arch: Architecture,
    pub capacity: Option<usize>,
    /// Dropout on the recurrent output before the output layer (LM, copy).
    pub output_dropout: f64,
}

/// Attention weights recorded during a forward pass, one entry per step
/// (`None` where nothing was attended).
#[derive(Clone, Debug)]
pub struct Trace {
    pub section: String,
    pub steps: Vec<Option<Var>>,
}

/// Outputs of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Summed negative log-likelihood over the batch.
    pub nll: Var,
    pub metrics: EvalMetrics,
    pub traces: Vec<Trace>,
}

fn stack_spec(cfg: &RunConfig) -> StackSpec {
    StackSpec {
        embed: cfg.embed,
        hidden: cfg.hidden,
        attention: cfg.attention_size(),
        layers: cfg.layers,
        skip: cfg.skip,
        attention_bias: cfg.attention_bias,
    }
}

fn recurrent<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &RunConfig,
    rng: &mut R,
) -> Recurrent {
    let spec = stack_spec(cfg);
    match cfg.model {
        ModelKind::Lstm => Recurrent::Lstm(LstmStackWeights::init(store, prefix, spec, rng)),
        _ => Recurrent::Lstmn(StackWeights::init(store, prefix, spec, rng)),
    }
}

fn seq2seq<R: Rng>(store: &mut ParamStore, cfg: &RunConfig, rng: &mut R) -> Seq2SeqWeights {
    let fusion = match cfg.model {
        ModelKind::Seq2SeqDeep => Fusion::Deep,
        _ => Fusion::Shallow,
    };
    let spec = StackSpec {
        layers: 1,
        skip: false,
        ..stack_spec(cfg)
    };
    let encoder = StackWeights::init(store, "enc.", spec, rng);
    let mut decoder = StackWeights::init(store, "dec.", spec, rng);
    let inter = InterAttentionWeights::init(
        store,
        "inter.",
        cfg.hidden,
        cfg.embed,
        cfg.attention_size(),
        cfg.attention_bias,
        fusion == Fusion::Deep,
        rng,
    );
    Seq2SeqWeights {
        encoder,
        decoder: decoder.layers.remove(0),
        inter,
        fusion,
    }
}

fn is_seq2seq(kind: ModelKind) -> bool {
    matches!(kind, ModelKind::Seq2SeqShallow | ModelKind::Seq2SeqDeep)
}

/// Time-major masks for columns `range` of a block, `None` when no row is
/// padded there.
fn masks(block: &SeqBlock, range: std::ops::Range<usize>) -> Option<Vec<Vec<bool>>> {
    let m: Vec<Vec<bool>> = range.map(|t| block.column_mask(t)).collect();
    m.iter().any(|row| row.iter().any(|k| !k)).then_some(m)
}

/// Next-token targets for columns `1..len`; padding maps to `None`.
fn shifted_targets(block: &SeqBlock) -> Vec<Vec<Option<usize>>> {
    (1..block.len)
        .map(|t| {
            block
                .column(t)
                .into_iter()
                .zip(block.column_mask(t))
                .map(|(tok, keep)| keep.then_some(tok))
                .collect()
        })
        .collect()
}

impl Model {
    /// Initializes every parameter from `rng`. `labels` is the label count
    /// of classification tasks.
    pub fn build<R: Rng>(
        cfg: &RunConfig,
        embedding: EmbeddingTable,
        labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if embedding.dim() != cfg.embed {
            return Err(Error::config(
                "embed",
                format!("embedding table has width {}", embedding.dim()),
            ));
        }
        let vocab = embedding.values.rows();
        let mut store = ParamStore::new();
        let emb = store.add("embed", embedding.values);
        let width = cfg.head_width();
        let arch = match cfg.task {
            Task::Lm => {
                let rnn = recurrent(&mut store, "enc.", cfg, rng);
                let out = Affine::init(&mut store, "out.", cfg.hidden, vocab, rng);
                Architecture::Lm { rnn, out }
            }
            Task::Sentiment => {
                let rnn = recurrent(&mut store, "enc.", cfg, rng);
                let head = ClassifierHead::init(
                    &mut store,
                    "head.",
                    cfg.hidden,
                    width,
                    labels,
                    cfg.dropout,
                    rng,
                );
                Architecture::Sentence { rnn, head }
            }
            Task::Nli if is_seq2seq(cfg.model) => {
                let s2s = seq2seq(&mut store, cfg, rng);
                let head = ClassifierHead::init(
                    &mut store,
                    "head.",
                    s2s.prediction_size(),
                    width,
                    labels,
                    cfg.dropout,
                    rng,
                );
                Architecture::Conditional { s2s, head }
            }
            Task::Nli => {
                let (premise, hypothesis) = if cfg.tie_encoders {
                    let r = recurrent(&mut store, "enc.", cfg, rng);
                    (r.clone(), r)
                } else {
                    (
                        recurrent(&mut store, "premise.", cfg, rng),
                        recurrent(&mut store, "hypothesis.", cfg, rng),
                    )
                };
                let head = ClassifierHead::init(
                    &mut store,
                    "head.",
                    2 * cfg.hidden,
                    width,
                    labels,
                    cfg.dropout,
                    rng,
                );
                Architecture::Pair {
                    premise,
                    hypothesis,
                    head,
                }
            }
            Task::Copy => {
                let s2s = seq2seq(&mut store, cfg, rng);
                let out = Affine::init(&mut store, "out.", s2s.prediction_size(), vocab, rng);
                Architecture::Seq2Seq { s2s, out }
            }
        };
        Ok(Model {
            store,
            embedding: emb,
            pretrained: embedding.pretrained,
            arch,
            capacity: cfg.capacity(),
            output_dropout: match cfg.task {
                Task::Lm | Task::Copy => cfg.dropout,
                _ => 0.0,
            },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.store.get(self.embedding).rows()
    }

    /// Embeds columns `range` of a block, one `B x e` input per step.
    fn embed(
        &self,
        g: &mut Graph,
        p: &Bound,
        block: &SeqBlock,
        range: std::ops::Range<usize>,
    ) -> Result<Vec<Var>> {
        let vocab = self.vocab_size();
        range
            .map(|t| {
                let col = block.column(t);
                if let Some(&bad) = col.iter().find(|&&i| i >= vocab) {
                    return Err(Error::Range {
                        index: bad,
                        size: vocab,
                    });
                }
                g.gather_rows(p[self.embedding], &col)
            })
            .collect()
    }

    fn output_dropout<R: Rng>(
        &self,
        g: &mut Graph,
        hidden: Vec<Var>,
        rng: &mut Option<&mut R>,
    ) -> Result<Vec<Var>> {
        if self.output_dropout == 0.0 {
            return Ok(hidden);
        }
        hidden
            .into_iter()
            .map(|h| dropout(g, h, self.output_dropout, rng.as_deref_mut()))
            .collect()
    }

    /// Runs the model over a batch. `rng` is `Some` in training mode and
    /// drives dropout.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        mut rng: Option<&mut R>,
    ) -> Result<Forward> {
        match &self.arch {
            Architecture::Lm { rnn, out } => {
                let block = &batch.first;
                if block.len < 2 {
                    return Err(Error::Precondition(
                        "language-model sequences need at least two tokens".into(),
                    ));
                }
                let inputs = self.embed(g, p, block, 0..block.len - 1)?;
                let m = masks(block, 0..block.len - 1);
                let run = rnn.run(g, p, &inputs, m.as_deref(), self.capacity)?;
                let hidden = self.output_dropout(g, run.hidden, &mut rng)?;
                let loss = lm_loss(g, p, out, &hidden, &shifted_targets(block))?;
                Ok(Forward {
                    nll: loss.nll,
                    metrics: loss.metrics(g),
                    traces: layer_traces("", run.traces),
                })
            }
            Architecture::Sentence { rnn, head } => {
                let block = &batch.first;
                let inputs = self.embed(g, p, block, 0..block.len)?;
                let m = masks(block, 0..block.len);
                let run = rnn.run(g, p, &inputs, m.as_deref(), self.capacity)?;
                let pooled = mean_pool(g, &run.hidden, m.as_deref())?;
                let logits = head.forward(g, p, pooled, rng)?;
                let fwd = classify(g, logits, &batch.labels)?;
                Ok(Forward {
                    traces: layer_traces("", run.traces),
                    ..fwd
                })
            }
            Architecture::Pair {
                premise,
                hypothesis,
                head,
            } => {
                let (a, b) = pair_blocks(batch)?;
                let pa = self.embed(g, p, a, 0..a.len)?;
                let pb = self.embed(g, p, b, 0..b.len)?;
                let ma = masks(a, 0..a.len);
                let mb = masks(b, 0..b.len);
                let logits = infer_pair(
                    g,
                    p,
                    premise,
                    hypothesis,
                    head,
                    Side {
                        inputs: &pa,
                        masks: ma.as_deref(),
                    },
                    Side {
                        inputs: &pb,
                        masks: mb.as_deref(),
                    },
                    self.capacity,
                    rng,
                )?;
                classify(g, logits, &batch.labels)
            }
            Architecture::Conditional { s2s, head } => {
                let (a, b) = pair_blocks(batch)?;
                let src = self.embed(g, p, a, 0..a.len)?;
                let tgt = self.embed(g, p, b, 0..b.len)?;
                let ma = masks(a, 0..a.len);
                let mb = masks(b, 0..b.len);
                let dec = s2s.run(
                    g,
                    p,
                    &src,
                    ma.as_deref(),
                    &tgt,
                    mb.as_deref(),
                    self.capacity,
                )?;
                let preds: Vec<Var> = dec.steps.iter().map(|s| s.prediction).collect();
                let pooled = mean_pool(g, &preds, mb.as_deref())?;
                let logits = head.forward(g, p, pooled, rng)?;
                let fwd = classify(g, logits, &batch.labels)?;
                Ok(Forward {
                    traces: decoded_traces(&dec),
                    ..fwd
                })
            }
            Architecture::Seq2Seq { s2s, out } => {
                let (a, b) = pair_blocks(batch)?;
                if b.len < 2 {
                    return Err(Error::Precondition(
                        "target sequences need at least two tokens".into(),
                    ));
                }
                let src = self.embed(g, p, a, 0..a.len)?;
                let tgt = self.embed(g, p, b, 0..b.len - 1)?;
                let ma = masks(a, 0..a.len);
                let mb = masks(b, 0..b.len - 1);
                let dec = s2s.run(
                    g,
                    p,
                    &src,
                    ma.as_deref(),
                    &tgt,
                    mb.as_deref(),
                    self.capacity,
                )?;
                let preds: Vec<Var> = dec.steps.iter().map(|s| s.prediction).collect();
                let preds = self.output_dropout(g, preds, &mut rng)?;
                let loss = lm_loss(g, p, out, &preds, &shifted_targets(b))?;
                Ok(Forward {
                    nll: loss.nll,
                    metrics: loss.metrics(g),
                    traces: decoded_traces(&dec),
                })
            }
        }
    }
}

impl Model {
    /// Attention traces of a single unbatched input. Pair architectures
    /// need `second`; recurrent LSTMs have no attention to report.
    pub fn attention_traces(
        &self,
        g: &mut Graph,
        p: &Bound,
        first: &[usize],
        second: Option<&[usize]>,
    ) -> Result<Vec<Trace>> {
        let one = |ids: &[usize]| SeqBlock::from_sequences(&[ids]);
        let a = one(first)?;
        let xa = self.embed(g, p, &a, 0..a.len)?;
        let need_second =
            || second.ok_or_else(|| Error::Precondition("this model reads sentence pairs".into()));
        let no_attention = |r: &Recurrent| match r {
            Recurrent::Lstm(_) => Err(Error::Precondition(
                "an lstm model has no attention weights to dump".into(),
            )),
            Recurrent::Lstmn(_) => Ok(()),
        };
        match &self.arch {
            Architecture::Lm { rnn, .. } | Architecture::Sentence { rnn, .. } => {
                no_attention(rnn)?;
                let run = rnn.run(g, p, &xa, None, self.capacity)?;
                Ok(layer_traces("", run.traces))
            }
            Architecture::Pair {
                premise,
                hypothesis,
                ..
            } => {
                no_attention(premise)?;
                let b = one(need_second()?)?;
                let xb = self.embed(g, p, &b, 0..b.len)?;
                let ra = premise.run(g, p, &xa, None, self.capacity)?;
                let rb = hypothesis.run(g, p, &xb, None, self.capacity)?;
                let mut out = layer_traces("premise.", ra.traces);
                out.extend(layer_traces("hypothesis.", rb.traces));
                Ok(out)
            }
            Architecture::Conditional { s2s, .. } | Architecture::Seq2Seq { s2s, .. } => {
                let b = one(need_second()?)?;
                let xb = self.embed(g, p, &b, 0..b.len)?;
                let dec = s2s.run(g, p, &xa, None, &xb, None, self.capacity)?;
                Ok(decoded_traces(&dec))
            }
        }
    }
}

fn pair_blocks(batch: &Batch) -> Result<(&SeqBlock, &SeqBlock)> {
    match &batch.second {
        Some(b) => Ok((&batch.first, b)),
        None => Err(Error::Precondition(
            "task needs a second sequence per example".into(),
        )),
    }
}

fn classify(g: &mut Graph, logits: Var, labels: &[Option<usize>]) -> Result<Forward> {
    let nll = g.cross_entropy(logits, labels)?;
    let metrics = EvalMetrics {
        nll: g.value(nll).item(),
        tokens: labels.iter().flatten().count(),
        correct: count_correct(g.value(logits), labels),
    };
    Ok(Forward {
        nll,
        metrics,
        traces: Vec::new(),
    })
}

fn layer_traces(prefix: &str, traces: Vec<Vec<Option<Var>>>) -> Vec<Trace> {
    traces
        .into_iter()
        .enumerate()
        .map(|(k, steps)| Trace {
            section: format!("{prefix}layer{}", k + 1),
            steps,
        })
        .collect()
}

fn decoded_traces(dec: &crate::fusion::Decoded) -> Vec<Trace> {
    let mut out = layer_traces("encoder.", dec.encoded.traces.clone());
    out.push(Trace {
        section: "decoder.intra".into(),
        steps: dec
            .steps
            .iter()
            .map(|s| s.intra.attention.map(|a| a.weights))
            .collect(),
    });
    out.push(Trace {
        section: "decoder.inter".into(),
        steps: dec
            .steps
            .iter()
            .map(|s| Some(s.inter.attention.weights))
            .collect(),
    });
    out
}
