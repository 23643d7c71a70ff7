//! Random single-step instances for the cell and fusion oracles, and the
//! comparisons the oracle tests and the acceptance suite share.

use lstmn::autodiff::{Graph, Tensor, Var};
use lstmn::cells::{lstmn_step, GateWeights, IntraAttentionWeights, LstmnLayerWeights, Tapes};
use lstmn::fusion::{deep_decode_step, inter_attend, InterAttentionWeights, SourceTapes};
use lstmn::params::{Bound, ParamStore};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{deep_step, inter, max_diff, randomize, rng, InterW, IntraW};

#[derive(Clone, Copy, Debug)]
pub struct Dims {
    pub hidden: usize,
    pub input: usize,
    pub attention: usize,
    pub batch: usize,
    /// Target tape length before the step.
    pub tape: usize,
    /// Source length.
    pub source: usize,
}

impl Dims {
    pub fn random(r: &mut ChaCha8Rng) -> Self {
        Dims {
            hidden: r.gen_range(1..=4),
            input: r.gen_range(1..=4),
            attention: r.gen_range(1..=4),
            batch: r.gen_range(1..=3),
            tape: r.gen_range(0..=5),
            source: r.gen_range(1..=5),
        }
    }

    pub fn square(size: usize, tape: usize, source: usize) -> Self {
        Dims {
            hidden: size,
            input: size,
            attention: size,
            batch: 2,
            tape,
            source,
        }
    }
}

/// Decoder layer `dec.*` and inter-attention `inter.*` weights plus
/// tapes and inputs, all drawn uniformly from `(-1, 1)`. Tapes are stored
/// `[slot][row]`.
pub struct Instance {
    pub dims: Dims,
    pub store: ParamStore,
    pub layer: LstmnLayerWeights,
    pub inter: InterAttentionWeights,
    pub hs: Vec<Vec<Vec<f64>>>,
    pub cs: Vec<Vec<Vec<f64>>>,
    pub gs: Vec<Vec<Vec<f64>>>,
    pub alphas: Vec<Vec<Vec<f64>>>,
    pub x: Vec<Vec<f64>>,
    pub h_prev: Vec<Vec<f64>>,
    pub g_prev: Vec<Vec<f64>>,
}

fn rows(r: &mut ChaCha8Rng, batch: usize, width: usize) -> Vec<Vec<f64>> {
    (0..batch)
        .map(|_| (0..width).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn tape(r: &mut ChaCha8Rng, len: usize, batch: usize, width: usize) -> Vec<Vec<Vec<f64>>> {
    (0..len).map(|_| rows(r, batch, width)).collect()
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let dims = Dims::random(&mut r);
        Instance::with_rng(&mut r, dims, true)
    }

    pub fn with_dims(seed: u64, dims: Dims, attention_bias: bool) -> Self {
        Instance::with_rng(&mut rng(seed), dims, attention_bias)
    }

    fn with_rng(r: &mut ChaCha8Rng, dims: Dims, attention_bias: bool) -> Self {
        let Dims {
            hidden,
            input,
            attention,
            batch,
            ..
        } = dims;
        let mut store = ParamStore::new();
        let layer = LstmnLayerWeights {
            gates: GateWeights::init(&mut store, "dec.", hidden, input, r),
            attention: IntraAttentionWeights::init(
                &mut store,
                "dec.",
                "W_x",
                hidden,
                input,
                attention,
                attention_bias,
                r,
            ),
        };
        let inter = InterAttentionWeights::init(
            &mut store,
            "inter.",
            hidden,
            input,
            attention,
            attention_bias,
            true,
            r,
        );
        randomize(&mut store, r, 1.0);
        Instance {
            dims,
            layer,
            inter,
            hs: tape(r, dims.tape, batch, hidden),
            cs: tape(r, dims.tape, batch, hidden),
            gs: tape(r, dims.source, batch, hidden),
            alphas: tape(r, dims.source, batch, hidden),
            x: rows(r, batch, input),
            h_prev: rows(r, batch, hidden),
            g_prev: rows(r, batch, hidden),
            store,
        }
    }

    pub fn intra_w(&self) -> IntraW<'_> {
        IntraW::from_store(&self.store, "dec.", "W_x")
    }

    pub fn inter_w(&self) -> InterW<'_> {
        InterW::from_store(&self.store, "inter.")
    }

    pub fn set(&mut self, name: &str, value: f64) {
        let id = self.store.id(name).expect("parameter exists");
        self.store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = value);
    }

    /// Inputs and tapes as constants of `g`.
    pub fn inputs(&self, g: &mut Graph) -> Inputs {
        let hs = self.hs.iter().map(|s| constant(g, s)).collect();
        let cs = self.cs.iter().map(|s| constant(g, s)).collect();
        let gs = self.gs.iter().map(|s| constant(g, s)).collect();
        let alphas = self.alphas.iter().map(|s| constant(g, s)).collect();
        Inputs {
            x: constant(g, &self.x),
            h_prev: constant(g, &self.h_prev),
            g_prev: constant(g, &self.g_prev),
            tapes: Tapes::from_parts(hs, cs, None),
            src: SourceTapes::new(gs, alphas, None).expect("non-empty source"),
        }
    }

    /// The instance bound into a fresh graph.
    pub fn live(&self) -> Live {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let Inputs {
            x,
            h_prev,
            g_prev,
            tapes,
            src,
        } = self.inputs(&mut g);
        Live {
            g,
            p,
            x,
            h_prev,
            g_prev,
            tapes,
            src,
        }
    }
}

pub struct Inputs {
    pub x: Var,
    pub h_prev: Var,
    pub g_prev: Var,
    pub tapes: Tapes,
    pub src: SourceTapes,
}

pub struct Live {
    pub g: Graph,
    pub p: Bound,
    pub x: Var,
    pub h_prev: Var,
    pub g_prev: Var,
    pub tapes: Tapes,
    pub src: SourceTapes,
}

pub fn constant(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
    let cols = rows[0].len();
    g.constant(Tensor::matrix(rows.len(), cols, rows.concat()))
}

/// Slot vectors of one batch row.
pub fn slots(tape: &[Vec<Vec<f64>>], row: usize) -> Vec<Vec<f64>> {
    tape.iter().map(|s| s[row].clone()).collect()
}

fn row_diff(g: &Graph, v: Var, row: usize, expected: &[f64]) -> f64 {
    max_diff(g.value(v).row_slice(row), expected)
}

/// Largest deviation of [`lstmn_step`] from the straight-line oracle over
/// `h`, `c`, both summaries and the attention weights.
pub fn lstmn_step_error(inst: &Instance) -> f64 {
    let mut l = inst.live();
    let (state, read) = lstmn_step(
        &mut l.g,
        &l.p,
        &inst.layer,
        l.x,
        &mut l.tapes,
        l.h_prev,
        None,
    )
    .expect("step runs");
    let w = inst.intra_w();
    let mut worst: f64 = 0.0;
    for b in 0..inst.dims.batch {
        let (naive, naive_read) = super::lstmn_step(
            &w,
            &slots(&inst.hs, b),
            &slots(&inst.cs, b),
            &inst.x[b],
            &inst.h_prev[b],
        );
        worst = worst
            .max(row_diff(&l.g, state.h, b, &naive.h))
            .max(row_diff(&l.g, state.c, b, &naive.c))
            .max(row_diff(&l.g, read.summary_hidden, b, &naive_read.h_tilde))
            .max(row_diff(&l.g, read.summary_memory, b, &naive_read.c_tilde));
        match read.attention {
            Some(a) => worst = worst.max(row_diff(&l.g, a.weights, b, &naive_read.weights)),
            None => assert!(naive_read.weights.is_empty()),
        }
    }
    worst
}

pub fn inter_attend_error(inst: &Instance) -> f64 {
    let mut l = inst.live();
    let read =
        inter_attend(&mut l.g, &l.p, &inst.inter, l.x, &mut l.src, l.g_prev).expect("attend");
    let w = inst.inter_w();
    let mut worst: f64 = 0.0;
    for b in 0..inst.dims.batch {
        let naive = inter(
            &w,
            &slots(&inst.gs, b),
            &slots(&inst.alphas, b),
            &inst.x[b],
            &inst.g_prev[b],
        );
        worst = worst
            .max(row_diff(&l.g, read.attention.weights, b, &naive.weights))
            .max(row_diff(&l.g, read.summary_hidden, b, &naive.gamma_tilde))
            .max(row_diff(&l.g, read.summary_memory, b, &naive.alpha_tilde));
    }
    worst
}

pub fn deep_step_error(inst: &Instance) -> f64 {
    let mut l = inst.live();
    let step = deep_decode_step(
        &mut l.g,
        &l.p,
        &inst.layer,
        &inst.inter,
        l.x,
        &mut l.tapes,
        l.h_prev,
        l.g_prev,
        &mut l.src,
        None,
    )
    .expect("deep step");
    let (dec, iw) = (inst.intra_w(), inst.inter_w());
    let mut worst: f64 = 0.0;
    for b in 0..inst.dims.batch {
        let naive = deep_step(
            &dec,
            &iw,
            &slots(&inst.hs, b),
            &slots(&inst.cs, b),
            &slots(&inst.gs, b),
            &slots(&inst.alphas, b),
            &inst.x[b],
            &inst.h_prev[b],
            &inst.g_prev[b],
        );
        let r = step
            .inter
            .transfer
            .expect("deep fusion has a transfer gate");
        worst = worst
            .max(row_diff(&l.g, step.state.h, b, &naive.state.h))
            .max(row_diff(&l.g, step.state.c, b, &naive.state.c))
            .max(row_diff(&l.g, r, b, &naive.r))
            .max(row_diff(
                &l.g,
                step.inter.attention.weights,
                b,
                &naive.inter.weights,
            ))
            .max(row_diff(
                &l.g,
                step.intra.summary_hidden,
                b,
                &naive.intra.h_tilde,
            ))
            .max(row_diff(
                &l.g,
                step.intra.summary_memory,
                b,
                &naive.intra.c_tilde,
            ));
        if let Some(a) = step.intra.attention {
            worst = worst.max(row_diff(&l.g, a.weights, b, &naive.intra.weights));
        }
    }
    worst
}
