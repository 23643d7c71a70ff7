//! Straight-line reference implementations shared by the integration tests.
//! The oracles in this file work on plain `Vec<f64>` rows and never touch
//! the autodiff graph; `fixtures` binds random instances into one.
#![allow(dead_code)]

pub mod fixtures;

use lstmn::autodiff::Tensor;
use lstmn::config::{ModelKind, RunConfig, Task};
use lstmn::data::EmbeddingTable;
use lstmn::model::Model;
use lstmn::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect(),
    )
}

/// Overwrites every parameter (zero-initialized ones included) with
/// uniform draws in `(-scale, scale)`.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for t in store.values_mut() {
        for x in t.data_mut() {
            *x = rng.gen_range(-scale..scale);
        }
    }
}

pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    let id = store
        .id(name)
        .unwrap_or_else(|| panic!("missing parameter {name}; have {:?}", store.names()));
    store.get(id)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `W x` for a row-major `W`.
pub fn mv(w: &Tensor, x: &[f64]) -> Vec<f64> {
    assert_eq!(w.cols(), x.len());
    (0..w.rows())
        .map(|r| w.row_slice(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

pub fn softmax(a: &[f64]) -> Vec<f64> {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn mix(weights: &[f64], items: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for (w, it) in weights.iter().zip(items) {
        for (o, x) in out.iter_mut().zip(it) {
            *o += w * x;
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Gate pre-activations from `[recurrent, x]`, activated as
/// `(sigmoid i, sigmoid f, sigmoid o, tanh c^)`.
pub struct Gates {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub cand: Vec<f64>,
}

pub fn gates(w: &Tensor, bias: &Tensor, recurrent: &[f64], x: &[f64]) -> Gates {
    let h = recurrent.len();
    let pre = add(&mv(w, &concat(recurrent, x)), bias.data());
    Gates {
        i: pre[0..h].iter().map(|&v| sigmoid(v)).collect(),
        f: pre[h..2 * h].iter().map(|&v| sigmoid(v)).collect(),
        o: pre[2 * h..3 * h].iter().map(|&v| sigmoid(v)).collect(),
        cand: pre[3 * h..4 * h].iter().map(|v| v.tanh()).collect(),
    }
}

pub struct NaiveState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

pub fn lstm_step(w: &Tensor, bias: &Tensor, x: &[f64], h: &[f64], c: &[f64]) -> NaiveState {
    let g = gates(w, bias, h, x);
    let c: Vec<f64> = add(&mul(&g.f, c), &mul(&g.i, &g.cand));
    let h = mul(&g.o, &c.iter().map(|v| v.tanh()).collect::<Vec<_>>());
    NaiveState { h, c }
}

/// Weights of one intra-attention block, looked up by `{prefix}` name.
pub struct IntraW<'a> {
    pub w: &'a Tensor,
    pub bias: &'a Tensor,
    pub v: &'a Tensor,
    pub w_h: &'a Tensor,
    pub w_x: &'a Tensor,
    pub w_htilde: &'a Tensor,
    pub attn_bias: Option<&'a Tensor>,
}

impl<'a> IntraW<'a> {
    pub fn from_store(store: &'a ParamStore, prefix: &str, input_name: &str) -> Self {
        IntraW {
            w: param(store, &format!("{prefix}W")),
            bias: param(store, &format!("{prefix}bias")),
            v: param(store, &format!("{prefix}v")),
            w_h: param(store, &format!("{prefix}W_h")),
            w_x: param(store, &format!("{prefix}{input_name}")),
            w_htilde: param(store, &format!("{prefix}W_htilde")),
            attn_bias: store
                .id(&format!("{prefix}attn_bias"))
                .map(|id| store.get(id)),
        }
    }
}

pub struct NaiveIntra {
    /// Empty at t = 1.
    pub weights: Vec<f64>,
    pub h_tilde: Vec<f64>,
    pub c_tilde: Vec<f64>,
}

/// `a_i = v . tanh(W_h h_i + W_x x + W_h~ h~_prev [+ b])`, `s = softmax(a)`.
pub fn intra(
    w: &IntraW,
    hs: &[Vec<f64>],
    cs: &[Vec<f64>],
    x: &[f64],
    h_prev_tilde: &[f64],
) -> NaiveIntra {
    let hidden = h_prev_tilde.len();
    if hs.is_empty() {
        return NaiveIntra {
            weights: Vec::new(),
            h_tilde: vec![0.0; hidden],
            c_tilde: vec![0.0; hidden],
        };
    }
    let mut query = add(&mv(w.w_x, x), &mv(w.w_htilde, h_prev_tilde));
    if let Some(b) = w.attn_bias {
        query = add(&query, b.data());
    }
    let energies: Vec<f64> = hs
        .iter()
        .map(|h| {
            let pre = add(&mv(w.w_h, h), &query);
            dot(
                w.v.data(),
                &pre.iter().map(|v| v.tanh()).collect::<Vec<_>>(),
            )
        })
        .collect();
    let s = softmax(&energies);
    NaiveIntra {
        h_tilde: mix(&s, hs, hidden),
        c_tilde: mix(&s, cs, hidden),
        weights: s,
    }
}

/// Full LSTMN step over tapes `hs`, `cs`.
pub fn lstmn_step(
    w: &IntraW,
    hs: &[Vec<f64>],
    cs: &[Vec<f64>],
    x: &[f64],
    h_prev_tilde: &[f64],
) -> (NaiveState, NaiveIntra) {
    let read = intra(w, hs, cs, x, h_prev_tilde);
    let g = gates(w.w, w.bias, &read.h_tilde, x);
    let c = add(&mul(&g.f, &read.c_tilde), &mul(&g.i, &g.cand));
    let h = mul(&g.o, &c.iter().map(|v| v.tanh()).collect::<Vec<_>>());
    (NaiveState { h, c }, read)
}

pub struct InterW<'a> {
    pub u: &'a Tensor,
    pub w_gamma: &'a Tensor,
    pub w_x: &'a Tensor,
    pub w_gammatilde: &'a Tensor,
    pub attn_bias: Option<&'a Tensor>,
    pub w_r: Option<&'a Tensor>,
    pub bias_r: Option<&'a Tensor>,
}

impl<'a> InterW<'a> {
    pub fn from_store(store: &'a ParamStore, prefix: &str) -> Self {
        let opt = |n: &str| store.id(&format!("{prefix}{n}")).map(|id| store.get(id));
        InterW {
            u: param(store, &format!("{prefix}u")),
            w_gamma: param(store, &format!("{prefix}W_gamma")),
            w_x: param(store, &format!("{prefix}W_x")),
            w_gammatilde: param(store, &format!("{prefix}W_gammatilde")),
            attn_bias: opt("attn_bias"),
            w_r: opt("W_r"),
            bias_r: opt("bias_r"),
        }
    }
}

pub struct NaiveInter {
    pub weights: Vec<f64>,
    pub gamma_tilde: Vec<f64>,
    pub alpha_tilde: Vec<f64>,
}

/// `b_j = u . tanh(W_g g_j + W_x x + W_g~ g~_prev [+ b])`, `p = softmax(b)`.
pub fn inter(
    w: &InterW,
    gs: &[Vec<f64>],
    alphas: &[Vec<f64>],
    x: &[f64],
    g_prev: &[f64],
) -> NaiveInter {
    let hidden = g_prev.len();
    let mut query = add(&mv(w.w_x, x), &mv(w.w_gammatilde, g_prev));
    if let Some(b) = w.attn_bias {
        query = add(&query, b.data());
    }
    let energies: Vec<f64> = gs
        .iter()
        .map(|g| {
            let pre = add(&mv(w.w_gamma, g), &query);
            dot(
                w.u.data(),
                &pre.iter().map(|v| v.tanh()).collect::<Vec<_>>(),
            )
        })
        .collect();
    let p = softmax(&energies);
    NaiveInter {
        gamma_tilde: mix(&p, gs, hidden),
        alpha_tilde: mix(&p, alphas, hidden),
        weights: p,
    }
}

pub struct NaiveDeep {
    pub state: NaiveState,
    pub intra: NaiveIntra,
    pub inter: NaiveInter,
    pub r: Vec<f64>,
}

/// Deep-fusion decoder step:
/// `r = sigmoid(W_r [g~, x] + b_r)`, `c = r . a~ + f . c~ + i . c^`.
#[allow(clippy::too_many_arguments)]
pub fn deep_step(
    dec: &IntraW,
    iw: &InterW,
    hs: &[Vec<f64>],
    cs: &[Vec<f64>],
    gs: &[Vec<f64>],
    alphas: &[Vec<f64>],
    x: &[f64],
    h_prev_tilde: &[f64],
    g_prev: &[f64],
) -> NaiveDeep {
    let read = intra(dec, hs, cs, x, h_prev_tilde);
    let cross = inter(iw, gs, alphas, x, g_prev);
    let mut pre = mv(
        iw.w_r.expect("deep fusion weights"),
        &concat(&cross.gamma_tilde, x),
    );
    if let Some(b) = iw.bias_r {
        pre = add(&pre, b.data());
    }
    let r: Vec<f64> = pre.iter().map(|&v| sigmoid(v)).collect();
    let g = gates(dec.w, dec.bias, &read.h_tilde, x);
    let c = add(
        &add(&mul(&r, &cross.alpha_tilde), &mul(&g.f, &read.c_tilde)),
        &mul(&g.i, &g.cand),
    );
    let h = mul(&g.o, &c.iter().map(|v| v.tanh()).collect::<Vec<_>>());
    NaiveDeep {
        state: NaiveState { h, c },
        intra: read,
        inter: cross,
        r,
    }
}

/// Small configuration for `task` and `model` with every knob that the
/// gradient and determinism tests rely on pinned.
pub fn small_config(task: Task, model: ModelKind, hidden: usize, embed: usize) -> RunConfig {
    RunConfig {
        model,
        hidden,
        embed,
        head_hidden: 3,
        dropout: 0.0,
        attention: 0,
        ..RunConfig::defaults(task)
    }
}

/// Model over a `vocab`-row random embedding with every parameter
/// randomized, so no gradient is structurally zero.
pub fn random_model(cfg: &RunConfig, vocab: usize, labels: usize, seed: u64) -> Model {
    let mut r = rng(seed);
    let table = EmbeddingTable::random(vocab, cfg.embed, &mut r);
    let mut model = Model::build(cfg, table, labels, &mut r).expect("model builds");
    let scale = 0.5;
    randomize(&mut model.store, &mut r, scale);
    model
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}
