//! Task heads: language-model projection, mean-pooled sentence classifier,
//! and sentence-pair inference.

use std::fmt;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::cells::Recurrent;
use crate::error::{Error, Result};
use crate::optim::dropout;
use crate::params::{xavier_uniform, Bound, ParamId, ParamStore};

/// `x W^T + b`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Affine {
            w: store.add(format!("{prefix}W"), xavier_uniform(output, input, rng)),
            b: store.add(format!("{prefix}bias"), Tensor::zeros(&[1, output])),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.linear(x, p[self.w])?;
        g.add_row(y, p[self.b])
    }
}

/// Summed NLL of an evaluation pass plus token and correctness counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub nll: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl EvalMetrics {
    pub fn ppl(&self) -> f64 {
        if self.tokens == 0 {
            return f64::NAN;
        }
        (self.nll / self.tokens as f64).exp()
    }

    pub fn accuracy(&self) -> f64 {
        if self.tokens == 0 {
            return f64::NAN;
        }
        self.correct as f64 / self.tokens as f64
    }

    pub fn merge(&mut self, other: EvalMetrics) {
        self.nll += other.nll;
        self.tokens += other.tokens;
        self.correct += other.correct;
    }

    pub fn record<'a>(&'a self, dataset: &'a str, split: &'a str) -> MetricsRecord<'a> {
        MetricsRecord {
            metrics: self,
            dataset,
            split,
        }
    }
}

/// One-line `key=value` rendering of [`EvalMetrics`].
pub struct MetricsRecord<'a> {
    metrics: &'a EvalMetrics,
    dataset: &'a str,
    split: &'a str,
}

impl fmt::Display for MetricsRecord<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.metrics;
        write!(
            f,
            "dataset={} split={} nll={:.6} tokens={} ppl={:.6} accuracy={:.6}",
            self.dataset,
            self.split,
            m.nll,
            m.tokens,
            m.ppl(),
            m.accuracy()
        )
    }
}

/// Row-wise argmax agreement with the given targets.
pub fn count_correct(logits: &Tensor, targets: &[Option<usize>]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|(r, t)| {
            let Some(t) = t else { return false };
            let row = logits.row_slice(*r);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i);
            best == Some(*t)
        })
        .count()
}

/// Logits and summed NLL over every step of a batch.
#[derive(Clone, Debug)]
pub struct LmLoss {
    pub nll: Var,
    pub logits: Var,
    pub targets: Vec<Option<usize>>,
}

impl LmLoss {
    pub fn metrics(&self, g: &Graph) -> EvalMetrics {
        EvalMetrics {
            nll: g.value(self.nll).item(),
            tokens: self.targets.iter().flatten().count(),
            correct: count_correct(g.value(self.logits), &self.targets),
        }
    }
}

/// `NLL = -sum log softmax(W h_t + b)[target_t]` over all steps; `None`
/// targets (padding) are excluded. `targets[t][b]` belongs to `hidden[t]`
/// row `b`.
pub fn lm_loss(
    g: &mut Graph,
    p: &Bound,
    projection: &Affine,
    hidden: &[Var],
    targets: &[Vec<Option<usize>>],
) -> Result<LmLoss> {
    if hidden.len() != targets.len() || hidden.is_empty() {
        return Err(Error::Precondition(format!(
            "{} hidden states for {} target steps",
            hidden.len(),
            targets.len()
        )));
    }
    let stacked = g.concat_rows(hidden)?;
    let logits = projection.apply(g, p, stacked)?;
    let flat: Vec<Option<usize>> = targets.iter().flatten().copied().collect();
    let nll = g.cross_entropy(logits, &flat)?;
    Ok(LmLoss {
        nll,
        logits,
        targets: flat,
    })
}

/// Mean of the unmasked hidden states of each row.
pub fn mean_pool(g: &mut Graph, hidden: &[Var], masks: Option<&[Vec<bool>]>) -> Result<Var> {
    let Some(&first) = hidden.first() else {
        return Err(Error::Precondition(
            "mean pooling over an empty tape".into(),
        ));
    };
    let batch = g.value(first).rows();
    let steps = hidden.len();
    let mut weights = vec![0.0; batch * steps];
    for b in 0..batch {
        let len = match masks {
            Some(m) => m.iter().take_while(|row| row[b]).count(),
            None => steps,
        };
        if len == 0 {
            return Err(Error::Precondition(format!(
                "row {b} has no tokens to pool"
            )));
        }
        for t in 0..len {
            weights[b * steps + t] = 1.0 / len as f64;
        }
    }
    let w = g.constant(Tensor::matrix(batch, steps, weights));
    g.weighted_sum(w, hidden)
}

/// Two affine layers with ReLU between; dropout on the pooled input.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub hidden_layer: Affine,
    pub output_layer: Affine,
    pub dropout: f64,
}

impl ClassifierHead {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        width: usize,
        labels: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        assert!(width >= 1 && labels >= 1);
        ClassifierHead {
            hidden_layer: Affine::init(store, &format!("{prefix}hidden."), input, width, rng),
            output_layer: Affine::init(store, &format!("{prefix}out."), width, labels, rng),
            dropout,
        }
    }

    /// `logits = affine2(relu(affine1(dropout(pooled))))`. `rng` is `Some`
    /// in training mode.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        p: &Bound,
        pooled: Var,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let x = dropout(g, pooled, self.dropout, rng)?;
        let h = self.hidden_layer.apply(g, p, x)?;
        let h = g.relu(h)?;
        self.output_layer.apply(g, p, h)
    }
}

/// Label logits from the mean of a sentence's hidden tape.
pub fn classify_sentence<R: Rng>(
    g: &mut Graph,
    p: &Bound,
    head: &ClassifierHead,
    hidden: &[Var],
    masks: Option<&[Vec<bool>]>,
    rng: Option<&mut R>,
) -> Result<Var> {
    let pooled = mean_pool(g, hidden, masks)?;
    head.forward(g, p, pooled, rng)
}

/// NLI label order used throughout.
pub const NLI_LABELS: [&str; 3] = ["entailment", "contradiction", "neutral"];

/// One side of a sentence pair: embedded inputs and per-step row masks.
#[derive(Clone, Copy, Debug)]
pub struct Side<'a> {
    pub inputs: &'a [Var],
    pub masks: Option<&'a [Vec<bool>]>,
}

/// Reads each sentence with its own encoder, mean-pools both hidden tapes,
/// concatenates `[premise, hypothesis]` and classifies.
#[allow(clippy::too_many_arguments)]
pub fn infer_pair<R: Rng>(
    g: &mut Graph,
    p: &Bound,
    premise_encoder: &Recurrent,
    hypothesis_encoder: &Recurrent,
    head: &ClassifierHead,
    premise: Side<'_>,
    hypothesis: Side<'_>,
    capacity: Option<usize>,
    rng: Option<&mut R>,
) -> Result<Var> {
    if premise.inputs.is_empty() || hypothesis.inputs.is_empty() {
        return Err(Error::Precondition("empty sentence in pair".into()));
    }
    let pre = premise_encoder.run(g, p, premise.inputs, premise.masks, capacity)?;
    let hyp = hypothesis_encoder.run(g, p, hypothesis.inputs, hypothesis.masks, capacity)?;
    let pre_pool = mean_pool(g, &pre.hidden, premise.masks)?;
    let hyp_pool = mean_pool(g, &hyp.hidden, hypothesis.masks)?;
    let joined = g.concat_cols(&[pre_pool, hyp_pool])?;
    head.forward(g, p, joined, rng)
}
