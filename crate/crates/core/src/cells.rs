//! LSTM and LSTMN recurrences.
//!
//! All step functions are batched: every vector is a `B x d` matrix with one
//! row per sequence. A single sequence is the `B = 1` case.
//!
//! The LSTMN replaces the LSTM's single memory cell with a hidden tape and a
//! memory tape holding one vector per processed token. At each step the
//! current input attends over the hidden tape; the resulting distribution
//! mixes both tapes into the summaries `h~_t`, `c~_t`, which take the place
//! of `h_{t-1}`, `c_{t-1}` in the gate update.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Bound, ParamId, ParamStore};

/// Gate block mapping `[recurrent, x]` to the pre-activations of
/// `i, f, o, c^` (in that order, `hidden` rows each).
#[derive(Clone, Debug)]
pub struct GateWeights {
    pub w: ParamId,
    pub bias: Option<ParamId>,
    pub hidden: usize,
    pub input: usize,
}

/// Intra-attention parameters. `w_input` maps the layer input (`x_t` for the
/// first layer, `h_t^k` for upper layers) into attention space.
#[derive(Clone, Debug)]
pub struct IntraAttentionWeights {
    pub v: ParamId,
    pub w_h: ParamId,
    pub w_input: ParamId,
    pub w_htilde: ParamId,
    pub bias: Option<ParamId>,
    pub attention: usize,
}

#[derive(Clone, Debug)]
pub struct LstmnLayerWeights {
    pub gates: GateWeights,
    pub attention: IntraAttentionWeights,
}

#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

/// Attention energies and the distribution obtained from them.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub scores: Var,
    pub weights: Var,
}

/// Outcome of one intra-attention read. `attention` is `None` on an empty
/// tape, where both summaries are zero.
#[derive(Clone, Copy, Debug)]
pub struct IntraAttention {
    pub attention: Option<Attention>,
    pub summary_hidden: Var,
    pub summary_memory: Var,
}

/// Hidden and memory tapes of one layer for a batch of sequences.
///
/// `slot_masks[i][b]` is false when slot `i` of row `b` was produced by a
/// padding token; such slots get the masked-softmax surrogate.
#[derive(Clone, Debug, Default)]
pub struct Tapes {
    hidden: Vec<Var>,
    memory: Vec<Var>,
    slot_masks: Vec<Option<Vec<bool>>>,
    keys: Vec<Var>,
    capacity: Option<usize>,
}

impl Tapes {
    pub fn new(capacity: Option<usize>) -> Self {
        Tapes {
            capacity,
            ..Tapes::default()
        }
    }

    /// Tapes built from existing vectors, without any length checks.
    pub fn from_parts(hidden: Vec<Var>, memory: Vec<Var>, capacity: Option<usize>) -> Self {
        let slot_masks = vec![None; hidden.len()];
        Tapes {
            hidden,
            memory,
            slot_masks,
            keys: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn hidden(&self) -> &[Var] {
        &self.hidden
    }

    pub fn memory(&self) -> &[Var] {
        &self.memory
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    fn check(&self) -> Result<()> {
        if self.hidden.len() != self.memory.len() || self.slot_masks.len() != self.hidden.len() {
            return Err(Error::Invariant(format!(
                "hidden tape has {} slots but memory tape has {}",
                self.hidden.len(),
                self.memory.len()
            )));
        }
        Ok(())
    }

    /// Appends one slot, evicting the oldest when the capacity is exceeded.
    pub fn push(&mut self, h: Var, c: Var, row_mask: Option<&[bool]>) {
        self.hidden.push(h);
        self.memory.push(c);
        self.slot_masks.push(row_mask.map(<[bool]>::to_vec));
        if let Some(cap) = self.capacity {
            while self.hidden.len() > cap {
                self.hidden.remove(0);
                self.memory.remove(0);
                self.slot_masks.remove(0);
                if !self.keys.is_empty() {
                    self.keys.remove(0);
                }
            }
        }
    }

    /// Row-major `B x len` mask, or `None` when every slot is real.
    fn attention_mask(&self, batch: usize) -> Option<Vec<bool>> {
        if self.slot_masks.iter().all(Option::is_none) {
            return None;
        }
        let n = self.len();
        let mut mask = vec![true; batch * n];
        for (i, m) in self.slot_masks.iter().enumerate() {
            if let Some(m) = m {
                for (b, &keep) in m.iter().enumerate() {
                    mask[b * n + i] = keep;
                }
            }
        }
        Some(mask)
    }
}

fn rows(g: &Graph, v: Var) -> usize {
    g.value(v).rows()
}

impl GateWeights {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        input: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{prefix}W"),
            xavier_uniform(4 * hidden, hidden + input, rng),
        );
        let bias = Some(store.add(format!("{prefix}bias"), Tensor::zeros(&[1, 4 * hidden])));
        GateWeights {
            w,
            bias,
            hidden,
            input,
        }
    }

    /// Activated gates `(i, f, o, c^)` from `[recurrent, x]`.
    fn gates(&self, g: &mut Graph, p: &Bound, recurrent: Var, x: Var) -> Result<[Var; 4]> {
        let joined = g.concat_cols(&[recurrent, x])?;
        let mut pre = g.linear(joined, p[self.w])?;
        if let Some(b) = self.bias {
            pre = g.add_row(pre, p[b])?;
        }
        let h = self.hidden;
        let i = g.slice_cols(pre, 0, h)?;
        let f = g.slice_cols(pre, h, 2 * h)?;
        let o = g.slice_cols(pre, 2 * h, 3 * h)?;
        let cand = g.slice_cols(pre, 3 * h, 4 * h)?;
        Ok([g.sigmoid(i)?, g.sigmoid(f)?, g.sigmoid(o)?, g.tanh(cand)?])
    }
}

/// `c_t = f . c_prev + i . c^`, `h_t = o . tanh(c_t)`, with an optional
/// extra memory term added first.
fn cell_update(
    g: &mut Graph,
    [i, f, o, cand]: [Var; 4],
    c_prev: Var,
    extra: Option<Var>,
) -> Result<CellState> {
    let kept = g.mul(f, c_prev)?;
    let new = g.mul(i, cand)?;
    let c = match extra {
        Some(e) => {
            let a = g.add(e, kept)?;
            g.add(a, new)?
        }
        None => g.add(kept, new)?,
    };
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok(CellState { h, c })
}

/// One standard LSTM step.
pub fn lstm_step(
    g: &mut Graph,
    p: &Bound,
    w: &GateWeights,
    x: Var,
    prev: &CellState,
) -> Result<CellState> {
    let gates = w.gates(g, p, prev.h, x)?;
    cell_update(g, gates, prev.c, None)
}

impl IntraAttentionWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_name: &str,
        hidden: usize,
        input: usize,
        attention: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let v = store.add(format!("{prefix}v"), Tensor::zeros(&[1, attention]));
        let w_h = store.add(
            format!("{prefix}W_h"),
            xavier_uniform(attention, hidden, rng),
        );
        let w_input = store.add(
            format!("{prefix}{input_name}"),
            xavier_uniform(attention, input, rng),
        );
        let w_htilde = store.add(
            format!("{prefix}W_htilde"),
            xavier_uniform(attention, hidden, rng),
        );
        let bias =
            bias.then(|| store.add(format!("{prefix}attn_bias"), Tensor::zeros(&[1, attention])));
        IntraAttentionWeights {
            v,
            w_h,
            w_input,
            w_htilde,
            bias,
            attention,
        }
    }
}

/// Additive attention energies `v^T tanh(key_i + query)` for every key,
/// normalized with a masked softmax.
pub(crate) fn additive_attention(
    g: &mut Graph,
    v: Var,
    keys: &[Var],
    query: Var,
    mask: Option<&[bool]>,
) -> Result<Attention> {
    let scores = g.additive_energy(keys, query, v)?;
    let weights = g.masked_softmax(scores, mask)?;
    Ok(Attention { scores, weights })
}

/// Energies and distribution of the current input over the hidden tape:
/// `a_i = v^T tanh(W_h h_i + W_x x_t + W_h~ h~_{t-1})`, `s = softmax(a)`.
pub fn intra_attend(
    g: &mut Graph,
    p: &Bound,
    w: &IntraAttentionWeights,
    x: Var,
    tapes: &mut Tapes,
    summary_prev: Var,
) -> Result<Attention> {
    tapes.check()?;
    if tapes.is_empty() {
        return Err(Error::Precondition(
            "intra-attention over an empty tape".into(),
        ));
    }
    // W_h h_i is fixed once h_i is on the tape.
    while tapes.keys.len() < tapes.hidden.len() {
        let h = tapes.hidden[tapes.keys.len()];
        let key = g.linear(h, p[w.w_h])?;
        tapes.keys.push(key);
    }
    let qx = g.linear(x, p[w.w_input])?;
    let qh = g.linear(summary_prev, p[w.w_htilde])?;
    let mut query = g.add(qx, qh)?;
    if let Some(b) = w.bias {
        query = g.add_row(query, p[b])?;
    }
    let mask = tapes.attention_mask(rows(g, x));
    let keys = tapes.keys.clone();
    additive_attention(g, p[w.v], &keys, query, mask.as_deref())
}

/// Intra-attention read plus summaries `h~_t`, `c~_t` (both mixed with the
/// same weights). An empty tape yields zero summaries.
pub fn intra_read(
    g: &mut Graph,
    p: &Bound,
    w: &IntraAttentionWeights,
    x: Var,
    tapes: &mut Tapes,
    summary_prev: Var,
    hidden: usize,
) -> Result<IntraAttention> {
    tapes.check()?;
    if tapes.is_empty() {
        let b = rows(g, x);
        let zero = g.zeros(b, hidden);
        return Ok(IntraAttention {
            attention: None,
            summary_hidden: zero,
            summary_memory: zero,
        });
    }
    let attention = intra_attend(g, p, w, x, tapes, summary_prev)?;
    let hidden_tape = tapes.hidden.clone();
    let memory_tape = tapes.memory.clone();
    let summary_hidden = g.weighted_sum(attention.weights, &hidden_tape)?;
    let summary_memory = g.weighted_sum(attention.weights, &memory_tape)?;
    Ok(IntraAttention {
        attention: Some(attention),
        summary_hidden,
        summary_memory,
    })
}

/// One LSTMN step. The new `(h_t, c_t)` is appended to `tapes`; the returned
/// `summary_hidden` is the `h~_{t-1}` of the next step.
pub fn lstmn_step(
    g: &mut Graph,
    p: &Bound,
    w: &LstmnLayerWeights,
    x: Var,
    tapes: &mut Tapes,
    summary_prev: Var,
    row_mask: Option<&[bool]>,
) -> Result<(CellState, IntraAttention)> {
    let read = intra_read(g, p, &w.attention, x, tapes, summary_prev, w.gates.hidden)?;
    let gates = w.gates.gates(g, p, read.summary_hidden, x)?;
    let state = cell_update(g, gates, read.summary_memory, None)?;
    tapes.push(state.h, state.c, row_mask);
    Ok((state, read))
}

/// Gate activations for callers that extend the memory update (deep fusion).
pub(crate) fn gate_activations(
    g: &mut Graph,
    p: &Bound,
    w: &GateWeights,
    recurrent: Var,
    x: Var,
) -> Result<[Var; 4]> {
    w.gates(g, p, recurrent, x)
}

pub(crate) fn memory_update(
    g: &mut Graph,
    gates: [Var; 4],
    c_prev: Var,
    extra: Option<Var>,
) -> Result<CellState> {
    cell_update(g, gates, c_prev, extra)
}

/// Stacked LSTMN. Layer `k + 1` reads `h_t^k` (concatenated with `x_t` when
/// `skip` is set); its attention projects that input with `W_l`.
#[derive(Clone, Debug)]
pub struct StackWeights {
    pub layers: Vec<LstmnLayerWeights>,
    pub skip: bool,
    pub embed: usize,
    pub hidden: usize,
}

/// Per-layer tapes and the running summary `h~` of each layer.
#[derive(Clone, Debug)]
pub struct LayerState {
    pub tapes: Tapes,
    pub summary: Var,
}

#[derive(Clone, Debug)]
pub struct StackState {
    pub layers: Vec<LayerState>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub state: CellState,
    pub intra: IntraAttention,
}

/// Shape options for building an LSTMN stack.
#[derive(Clone, Copy, Debug)]
pub struct StackSpec {
    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
    pub layers: usize,
    pub skip: bool,
    pub attention_bias: bool,
}

fn layer_input(spec_embed: usize, hidden: usize, skip: bool, k: usize) -> usize {
    if k == 0 {
        spec_embed
    } else if skip {
        hidden + spec_embed
    } else {
        hidden
    }
}

impl StackWeights {
    /// Parameters are named `{prefix}layer{k}.{W|bias|v|W_h|W_x|W_l|W_htilde|attn_bias}`.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        spec: StackSpec,
        rng: &mut R,
    ) -> Self {
        assert!(spec.layers >= 1, "stack needs at least one layer");
        let layers = (0..spec.layers)
            .map(|k| {
                let input = layer_input(spec.embed, spec.hidden, spec.skip, k);
                let name = format!("{prefix}layer{}.", k + 1);
                let gates = GateWeights::init(store, &name, spec.hidden, input, rng);
                let attention = IntraAttentionWeights::init(
                    store,
                    &name,
                    if k == 0 { "W_x" } else { "W_l" },
                    spec.hidden,
                    input,
                    spec.attention,
                    spec.attention_bias,
                    rng,
                );
                LstmnLayerWeights { gates, attention }
            })
            .collect();
        StackWeights {
            layers,
            skip: spec.skip,
            embed: spec.embed,
            hidden: spec.hidden,
        }
    }

    pub fn new_state(&self, g: &mut Graph, batch: usize, capacity: Option<usize>) -> StackState {
        StackState {
            layers: self
                .layers
                .iter()
                .map(|l| LayerState {
                    tapes: Tapes::new(capacity),
                    summary: g.zeros(batch, l.gates.hidden),
                })
                .collect(),
        }
    }
}

/// One step through every layer of the stack, bottom to top.
pub fn stack_step(
    g: &mut Graph,
    p: &Bound,
    w: &StackWeights,
    x: Var,
    state: &mut StackState,
    row_mask: Option<&[bool]>,
) -> Result<Vec<LayerOutput>> {
    if w.layers.is_empty() || state.layers.len() != w.layers.len() {
        return Err(Error::Precondition(format!(
            "stack has {} layers but state has {}",
            w.layers.len(),
            state.layers.len()
        )));
    }
    let mut outputs = Vec::with_capacity(w.layers.len());
    let mut input = x;
    for (k, (lw, ls)) in w.layers.iter().zip(state.layers.iter_mut()).enumerate() {
        if k > 0 {
            let below = outputs
                .last()
                .map(|o: &LayerOutput| o.state.h)
                .expect("lower layer");
            input = if w.skip {
                g.concat_cols(&[below, x])?
            } else {
                below
            };
        }
        let cols = g.value(input).cols();
        if cols != lw.gates.input {
            return Err(Error::Shape {
                op: "stack_step",
                lhs: vec![lw.gates.input],
                rhs: vec![cols],
            });
        }
        let (cell, intra) = lstmn_step(g, p, lw, input, &mut ls.tapes, ls.summary, row_mask)?;
        ls.summary = intra.summary_hidden;
        outputs.push(LayerOutput { state: cell, intra });
    }
    Ok(outputs)
}

/// Stacked standard LSTM, same input chaining as [`StackWeights`].
#[derive(Clone, Debug)]
pub struct LstmStackWeights {
    pub layers: Vec<GateWeights>,
    pub skip: bool,
    pub embed: usize,
    pub hidden: usize,
}

impl LstmStackWeights {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        spec: StackSpec,
        rng: &mut R,
    ) -> Self {
        assert!(spec.layers >= 1, "stack needs at least one layer");
        let layers = (0..spec.layers)
            .map(|k| {
                let input = layer_input(spec.embed, spec.hidden, spec.skip, k);
                GateWeights::init(
                    store,
                    &format!("{prefix}layer{}.", k + 1),
                    spec.hidden,
                    input,
                    rng,
                )
            })
            .collect();
        LstmStackWeights {
            layers,
            skip: spec.skip,
            embed: spec.embed,
            hidden: spec.hidden,
        }
    }

    pub fn new_state(&self, g: &mut Graph, batch: usize) -> Vec<CellState> {
        self.layers
            .iter()
            .map(|l| {
                let z = g.zeros(batch, l.hidden);
                CellState { h: z, c: z }
            })
            .collect()
    }
}

pub fn lstm_stack_step(
    g: &mut Graph,
    p: &Bound,
    w: &LstmStackWeights,
    x: Var,
    state: &mut [CellState],
) -> Result<()> {
    let mut input = x;
    for k in 0..w.layers.len() {
        if k > 0 {
            input = if w.skip {
                g.concat_cols(&[state[k - 1].h, x])?
            } else {
                state[k - 1].h
            };
        }
        state[k] = lstm_step(g, p, &w.layers[k], input, &state[k])?;
    }
    Ok(())
}

/// Either recurrence family, run over a whole (padded) batch of sequences.
#[derive(Clone, Debug)]
pub enum Recurrent {
    Lstm(LstmStackWeights),
    Lstmn(StackWeights),
}

/// Per-step outputs of [`Recurrent::run`].
#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Top-layer hidden state at every step.
    pub hidden: Vec<Var>,
    /// Top-layer tapes after the last step (LSTMN only).
    pub tapes: Option<Tapes>,
    /// `traces[k][t]`: intra-attention weights of layer `k` at step `t`.
    pub traces: Vec<Vec<Option<Var>>>,
}

impl Recurrent {
    pub fn hidden(&self) -> usize {
        match self {
            Recurrent::Lstm(w) => w.hidden,
            Recurrent::Lstmn(w) => w.hidden,
        }
    }

    /// Runs left to right over `inputs` (`B x e` per step). `masks[t]` marks
    /// the rows that hold a real token at step `t`.
    pub fn run(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: &[Var],
        masks: Option<&[Vec<bool>]>,
        capacity: Option<usize>,
    ) -> Result<RunOutput> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Precondition("empty input sequence".into()));
        };
        let batch = rows(g, first);
        match self {
            Recurrent::Lstm(w) => {
                let mut state = w.new_state(g, batch);
                let mut hidden = Vec::with_capacity(inputs.len());
                for &x in inputs {
                    lstm_stack_step(g, p, w, x, &mut state)?;
                    hidden.push(state.last().expect("layer").h);
                }
                Ok(RunOutput {
                    hidden,
                    tapes: None,
                    traces: Vec::new(),
                })
            }
            Recurrent::Lstmn(w) => {
                let mut state = w.new_state(g, batch, capacity);
                let mut hidden = Vec::with_capacity(inputs.len());
                let mut traces = vec![Vec::with_capacity(inputs.len()); w.layers.len()];
                for (t, &x) in inputs.iter().enumerate() {
                    let mask = masks.map(|m| m[t].as_slice());
                    let outs = stack_step(g, p, w, x, &mut state, mask)?;
                    for (k, o) in outs.iter().enumerate() {
                        traces[k].push(o.intra.attention.map(|a| a.weights));
                    }
                    hidden.push(outs.last().expect("layer").state.h);
                }
                let top = state.layers.pop().expect("layer").tapes;
                Ok(RunOutput {
                    hidden,
                    tapes: Some(top),
                    traces,
                })
            }
        }
    }
}
