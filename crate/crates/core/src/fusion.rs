//! Encoder-decoder composition of two LSTMNs with inter-attention.
//!
//! Shallow fusion keeps the decoder a plain LSTMN and feeds the attended
//! source context to the output layer. Deep fusion writes the gated source
//! memory summary `r_t . a~_t` straight into the target memory update.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::cells::{
    additive_attention, gate_activations, intra_read, lstmn_step, memory_update, Attention,
    CellState, IntraAttention, LstmnLayerWeights, Recurrent, StackWeights, Tapes,
};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Bound, ParamId, ParamStore};

/// Source hidden tape `Y = [g_1..g_m]` and memory tape `A = [a_1..a_m]`.
#[derive(Clone, Debug)]
pub struct SourceTapes {
    pub hidden: Vec<Var>,
    pub memory: Vec<Var>,
    /// Row-major `B x m`; `false` marks padding slots.
    pub mask: Option<Vec<bool>>,
    keys: Vec<Var>,
}

impl SourceTapes {
    pub fn new(hidden: Vec<Var>, memory: Vec<Var>, mask: Option<Vec<bool>>) -> Result<Self> {
        if hidden.is_empty() || hidden.len() != memory.len() {
            return Err(Error::Precondition(format!(
                "source tapes need equal non-zero lengths, got {} and {}",
                hidden.len(),
                memory.len()
            )));
        }
        Ok(SourceTapes {
            hidden,
            memory,
            mask,
            keys: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct InterAttentionWeights {
    pub u: ParamId,
    pub w_gamma: ParamId,
    pub w_x: ParamId,
    pub w_gammatilde: ParamId,
    pub bias: Option<ParamId>,
    /// Transfer gate, deep fusion only.
    pub w_r: Option<ParamId>,
    pub bias_r: Option<ParamId>,
    pub hidden: usize,
    pub attention: usize,
}

impl InterAttentionWeights {
    /// Parameters are named `{prefix}{u|W_gamma|W_x|W_gammatilde|attn_bias|W_r|bias_r}`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        input: usize,
        attention: usize,
        attention_bias: bool,
        transfer_gate: bool,
        rng: &mut R,
    ) -> Self {
        let u = store.add(format!("{prefix}u"), xavier_uniform(1, attention, rng));
        let w_gamma = store.add(
            format!("{prefix}W_gamma"),
            xavier_uniform(attention, hidden, rng),
        );
        let w_x = store.add(
            format!("{prefix}W_x"),
            xavier_uniform(attention, input, rng),
        );
        let w_gammatilde = store.add(
            format!("{prefix}W_gammatilde"),
            xavier_uniform(attention, hidden, rng),
        );
        let bias = attention_bias
            .then(|| store.add(format!("{prefix}attn_bias"), Tensor::zeros(&[1, attention])));
        let (w_r, bias_r) = if transfer_gate {
            (
                Some(store.add(
                    format!("{prefix}W_r"),
                    xavier_uniform(hidden, hidden + input, rng),
                )),
                Some(store.add(format!("{prefix}bias_r"), Tensor::zeros(&[1, hidden]))),
            )
        } else {
            (None, None)
        };
        InterAttentionWeights {
            u,
            w_gamma,
            w_x,
            w_gammatilde,
            bias,
            w_r,
            bias_r,
            hidden,
            attention,
        }
    }
}

/// One inter-attention read over the source.
#[derive(Clone, Copy, Debug)]
pub struct InterAttention {
    pub attention: Attention,
    /// `g~_t`
    pub summary_hidden: Var,
    /// `a~_t`
    pub summary_memory: Var,
    /// `r_t`, deep fusion only.
    pub transfer: Option<Var>,
}

/// Encoded source plus the encoder's per-layer intra-attention traces.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub source: SourceTapes,
    pub hidden: Vec<Var>,
    pub traces: Vec<Vec<Option<Var>>>,
}

/// Runs the encoder LSTMN over the source; the top layer's tapes become the
/// source tapes.
pub fn encode(
    g: &mut Graph,
    p: &Bound,
    encoder: &StackWeights,
    inputs: &[Var],
    masks: Option<&[Vec<bool>]>,
) -> Result<Encoded> {
    if inputs.is_empty() {
        return Err(Error::Precondition("empty source sequence".into()));
    }
    let run = Recurrent::Lstmn(encoder.clone()).run(g, p, inputs, masks, None)?;
    let tapes = run.tapes.expect("lstmn run keeps tapes");
    let mask = masks.map(|m| {
        let len = m.len();
        let batch = m[0].len();
        let mut out = vec![true; batch * len];
        for (t, row) in m.iter().enumerate() {
            for (b, &keep) in row.iter().enumerate() {
                out[b * len + t] = keep;
            }
        }
        out
    });
    let source = SourceTapes::new(tapes.hidden().to_vec(), tapes.memory().to_vec(), mask)?;
    Ok(Encoded {
        source,
        hidden: run.hidden,
        traces: run.traces,
    })
}

/// `b_j = u^T tanh(W_g g_j + W_x x_t + W_g~ g~_{t-1})`, `p = softmax(b)`,
/// `g~_t = sum_j p_j g_j`, `a~_t = sum_j p_j a_j`.
pub fn inter_attend(
    g: &mut Graph,
    p: &Bound,
    w: &InterAttentionWeights,
    x: Var,
    src: &mut SourceTapes,
    gamma_prev: Var,
) -> Result<InterAttention> {
    if src.is_empty() {
        return Err(Error::Precondition(
            "inter-attention over an empty source".into(),
        ));
    }
    while src.keys.len() < src.hidden.len() {
        let k = g.linear(src.hidden[src.keys.len()], p[w.w_gamma])?;
        src.keys.push(k);
    }
    let qx = g.linear(x, p[w.w_x])?;
    let qg = g.linear(gamma_prev, p[w.w_gammatilde])?;
    let mut query = g.add(qx, qg)?;
    if let Some(b) = w.bias {
        query = g.add_row(query, p[b])?;
    }
    let keys = src.keys.clone();
    let attention = additive_attention(g, p[w.u], &keys, query, src.mask.as_deref())?;
    let summary_hidden = g.weighted_sum(attention.weights, &src.hidden)?;
    let summary_memory = g.weighted_sum(attention.weights, &src.memory)?;
    Ok(InterAttention {
        attention,
        summary_hidden,
        summary_memory,
        transfer: None,
    })
}

/// Result of a decoder step.
#[derive(Clone, Copy, Debug)]
pub struct DecodeStep {
    pub state: CellState,
    pub intra: IntraAttention,
    pub inter: InterAttention,
    /// Input to the output layer: `h_t` for deep fusion, `[h_t, g~_t]` for
    /// shallow fusion.
    pub prediction: Var,
}

/// Deep-fusion step: `r_t = sigmoid(W_r [g~_t, x_t])`,
/// `c_t = r_t . a~_t + f_t . c~_t + i_t . c^_t`, `h_t = o_t . tanh(c_t)`.
#[allow(clippy::too_many_arguments)]
pub fn deep_decode_step(
    g: &mut Graph,
    p: &Bound,
    decoder: &LstmnLayerWeights,
    inter: &InterAttentionWeights,
    x: Var,
    tapes: &mut Tapes,
    summary_prev: Var,
    gamma_prev: Var,
    src: &mut SourceTapes,
    row_mask: Option<&[bool]>,
) -> Result<DecodeStep> {
    let w_r = inter
        .w_r
        .ok_or_else(|| Error::Precondition("deep fusion requires transfer-gate weights".into()))?;
    let intra = intra_read(
        g,
        p,
        &decoder.attention,
        x,
        tapes,
        summary_prev,
        decoder.gates.hidden,
    )?;
    let mut cross = inter_attend(g, p, inter, x, src, gamma_prev)?;
    let joined = g.concat_cols(&[cross.summary_hidden, x])?;
    let mut pre = g.linear(joined, p[w_r])?;
    if let Some(b) = inter.bias_r {
        pre = g.add_row(pre, p[b])?;
    }
    let r = g.sigmoid(pre)?;
    cross.transfer = Some(r);
    let transferred = g.mul(r, cross.summary_memory)?;
    let gates = gate_activations(g, p, &decoder.gates, intra.summary_hidden, x)?;
    let state = memory_update(g, gates, intra.summary_memory, Some(transferred))?;
    tapes.push(state.h, state.c, row_mask);
    Ok(DecodeStep {
        state,
        intra,
        inter: cross,
        prediction: state.h,
    })
}

/// Shallow-fusion step: a plain LSTMN update, then inter-attention whose
/// hidden summary is concatenated with `h_t` for prediction.
#[allow(clippy::too_many_arguments)]
pub fn shallow_decode_step(
    g: &mut Graph,
    p: &Bound,
    decoder: &LstmnLayerWeights,
    inter: &InterAttentionWeights,
    x: Var,
    tapes: &mut Tapes,
    summary_prev: Var,
    gamma_prev: Var,
    src: &mut SourceTapes,
    row_mask: Option<&[bool]>,
) -> Result<DecodeStep> {
    let (state, intra) = lstmn_step(g, p, decoder, x, tapes, summary_prev, row_mask)?;
    let cross = inter_attend(g, p, inter, x, src, gamma_prev)?;
    let prediction = g.concat_cols(&[state.h, cross.summary_hidden])?;
    Ok(DecodeStep {
        state,
        intra,
        inter: cross,
        prediction,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Shallow,
    Deep,
}

/// Single-layer LSTMN encoder and decoder joined by inter-attention.
#[derive(Clone, Debug)]
pub struct Seq2SeqWeights {
    pub encoder: StackWeights,
    pub decoder: LstmnLayerWeights,
    pub inter: InterAttentionWeights,
    pub fusion: Fusion,
}

/// Decoder outputs for a whole target sequence.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub encoded: Encoded,
    pub steps: Vec<DecodeStep>,
}

impl Seq2SeqWeights {
    /// Prediction-input width of the decoder.
    pub fn prediction_size(&self) -> usize {
        match self.fusion {
            Fusion::Deep => self.decoder.gates.hidden,
            Fusion::Shallow => 2 * self.decoder.gates.hidden,
        }
    }

    /// Encodes `source` then runs the decoder over `target` (teacher forced).
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &self,
        g: &mut Graph,
        p: &Bound,
        source: &[Var],
        source_masks: Option<&[Vec<bool>]>,
        target: &[Var],
        target_masks: Option<&[Vec<bool>]>,
        capacity: Option<usize>,
    ) -> Result<Decoded> {
        let mut encoded = encode(g, p, &self.encoder, source, source_masks)?;
        let Some(&first) = target.first() else {
            return Err(Error::Precondition("empty target sequence".into()));
        };
        let batch = g.value(first).rows();
        let hidden = self.decoder.gates.hidden;
        let mut tapes = Tapes::new(capacity);
        let mut summary = g.zeros(batch, hidden);
        let mut gamma = g.zeros(batch, self.encoder.hidden);
        let mut steps = Vec::with_capacity(target.len());
        for (t, &x) in target.iter().enumerate() {
            let mask = target_masks.map(|m| m[t].as_slice());
            let step = match self.fusion {
                Fusion::Deep => deep_decode_step(
                    g,
                    p,
                    &self.decoder,
                    &self.inter,
                    x,
                    &mut tapes,
                    summary,
                    gamma,
                    &mut encoded.source,
                    mask,
                )?,
                Fusion::Shallow => shallow_decode_step(
                    g,
                    p,
                    &self.decoder,
                    &self.inter,
                    x,
                    &mut tapes,
                    summary,
                    gamma,
                    &mut encoded.source,
                    mask,
                )?,
            };
            summary = step.intra.summary_hidden;
            gamma = step.inter.summary_hidden;
            steps.push(step);
        }
        Ok(Decoded { encoded, steps })
    }
}
