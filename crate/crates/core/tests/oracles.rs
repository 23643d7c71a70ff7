mod common;

use common::fixtures::{
    constant, deep_step_error, inter_attend_error, lstmn_step_error, slots, Dims, Instance,
};
use common::{max_diff, param, random_tensor, rng};
use lstmn::autodiff::{Graph, Tensor};
use lstmn::cells::{
    intra_attend, lstm_step, lstmn_step, stack_step, CellState, GateWeights, Recurrent, StackSpec,
    StackWeights, Tapes,
};
use lstmn::fusion::{deep_decode_step, encode, inter_attend, shallow_decode_step};
use lstmn::params::ParamStore;
use lstmn::Error;

const EXAMPLE_TOL: f64 = 1e-12;
const RANDOM_TOL: f64 = 1e-10;

fn zero_all(store: &mut ParamStore) {
    store
        .values_mut()
        .iter_mut()
        .for_each(|t| t.data_mut().iter_mut().for_each(|x| *x = 0.0));
}

#[test]
fn lstm_step_with_zero_weights() {
    let mut store = ParamStore::new();
    let w = GateWeights::init(&mut store, "cell.", 1, 1, &mut rng(0));
    zero_all(&mut store);
    for (c_prev, c_expected, h_expected) in [(0.0, 0.0, 0.0), (1.0, 0.5, 0.5 * 0.5f64.tanh())] {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::row(vec![0.7]));
        let prev = CellState {
            h: g.constant(Tensor::row(vec![0.3])),
            c: g.constant(Tensor::row(vec![c_prev])),
        };
        let s = lstm_step(&mut g, &p, &w, x, &prev).unwrap();
        assert_eq!(g.value(s.c).data(), &[c_expected]);
        assert!((g.value(s.h).item() - h_expected).abs() < 1e-15);
    }
    assert!((0.5 * 0.5f64.tanh() - 0.23106).abs() < 1e-5);
}

#[test]
fn lstm_step_matches_straight_line_oracle() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let w = GateWeights::init(&mut store, "cell.", 3, 3, &mut r);
    common::randomize(&mut store, &mut r, 1.0);
    let rows = |r: &mut _| random_tensor(r, 2, 3, 1.0);
    let (x, h, c) = (rows(&mut r), rows(&mut r), rows(&mut r));

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let prev = CellState {
        h: g.constant(h.clone()),
        c: g.constant(c.clone()),
    };
    let s = lstm_step(&mut g, &p, &w, xv, &prev).unwrap();
    for b in 0..2 {
        let naive = common::lstm_step(
            param(&store, "cell.W"),
            param(&store, "cell.bias"),
            x.row_slice(b),
            h.row_slice(b),
            c.row_slice(b),
        );
        assert!(max_diff(g.value(s.h).row_slice(b), &naive.h) <= EXAMPLE_TOL);
        assert!(max_diff(g.value(s.c).row_slice(b), &naive.c) <= EXAMPLE_TOL);
    }
}

#[test]
fn intra_attend_degenerate_cases() {
    let mut inst = Instance::with_dims(4, Dims::square(3, 4, 1), true);
    inst.set("dec.v", 0.0);
    let mut l = inst.live();
    let a = intra_attend(
        &mut l.g,
        &l.p,
        &inst.layer.attention,
        l.x,
        &mut l.tapes,
        l.h_prev,
    )
    .unwrap();
    assert!(l.g.value(a.weights).data().iter().all(|&w| w == 0.25));

    let inst = Instance::with_dims(5, Dims::square(3, 1, 1), true);
    let mut l = inst.live();
    let a = intra_attend(
        &mut l.g,
        &l.p,
        &inst.layer.attention,
        l.x,
        &mut l.tapes,
        l.h_prev,
    )
    .unwrap();
    assert!(l.g.value(a.weights).data().iter().all(|&w| w == 1.0));

    let inst = Instance::with_dims(5, Dims::square(3, 0, 1), true);
    let mut l = inst.live();
    let err = intra_attend(
        &mut l.g,
        &l.p,
        &inst.layer.attention,
        l.x,
        &mut l.tapes,
        l.h_prev,
    );
    assert!(matches!(err, Err(Error::Precondition(_))));
}

#[test]
fn intra_attend_matches_direct_formula() {
    let inst = Instance::with_dims(6, Dims::square(2, 3, 1), true);
    let mut l = inst.live();
    let a = intra_attend(
        &mut l.g,
        &l.p,
        &inst.layer.attention,
        l.x,
        &mut l.tapes,
        l.h_prev,
    )
    .unwrap();
    for b in 0..2 {
        let naive = common::intra(
            &inst.intra_w(),
            &slots(&inst.hs, b),
            &slots(&inst.cs, b),
            &inst.x[b],
            &inst.h_prev[b],
        );
        assert!(max_diff(l.g.value(a.weights).row_slice(b), &naive.weights) <= EXAMPLE_TOL);
    }
}

#[test]
fn first_step_with_zero_weights_is_zero() {
    let mut inst = Instance::with_dims(7, Dims::square(3, 0, 1), true);
    zero_all(&mut inst.store);
    let mut l = inst.live();
    let (s, read) = lstmn_step(
        &mut l.g,
        &l.p,
        &inst.layer,
        l.x,
        &mut l.tapes,
        l.h_prev,
        None,
    )
    .unwrap();
    assert!(read.attention.is_none());
    assert!(l.g.value(s.h).data().iter().all(|&v| v == 0.0));
    assert!(l.g.value(s.c).data().iter().all(|&v| v == 0.0));
    assert_eq!(l.tapes.len(), 1);
}

/// At t = 2 the tape holds one slot, so the summaries are that slot and the
/// update is an ordinary LSTM step.
#[test]
fn singleton_tape_step_is_an_lstm_step() {
    for seed in 0..20 {
        let inst = Instance::with_dims(seed, Dims::square(3, 1, 1), true);
        let mut l = inst.live();
        let (s, read) = lstmn_step(
            &mut l.g,
            &l.p,
            &inst.layer,
            l.x,
            &mut l.tapes,
            l.h_prev,
            None,
        )
        .unwrap();
        let h1 = constant(&mut l.g, &inst.hs[0]);
        let c1 = constant(&mut l.g, &inst.cs[0]);
        assert_eq!(l.g.value(read.summary_hidden), l.g.value(h1));
        assert_eq!(l.g.value(read.summary_memory), l.g.value(c1));
        let plain = lstm_step(
            &mut l.g,
            &l.p,
            &inst.layer.gates,
            l.x,
            &CellState { h: h1, c: c1 },
        )
        .unwrap();
        assert_eq!(l.g.value(s.h), l.g.value(plain.h));
        assert_eq!(l.g.value(s.c), l.g.value(plain.c));
    }
}

#[test]
fn lstmn_step_matches_naive_oracle_at_t4() {
    let inst = Instance::with_dims(8, Dims::square(3, 3, 1), true);
    assert!(lstmn_step_error(&inst) <= EXAMPLE_TOL);
}

#[test]
fn lstmn_step_nll_passes_gradient_check_at_small_step() {
    let mut inst = Instance::with_dims(9, Dims::square(3, 3, 1), true);
    let out = inst
        .store
        .add("out.W", random_tensor(&mut rng(10), 5, 3, 1.0));
    let inst = inst;
    let targets = [Some(1), Some(4)];
    let report = inst
        .store
        .grad_check(
            |g: &mut Graph, p| {
                let mut i = inst.inputs(g);
                let (s, _) = lstmn_step(g, p, &inst.layer, i.x, &mut i.tapes, i.h_prev, None)?;
                let logits = g.linear(s.h, p[out])?;
                g.cross_entropy(logits, &targets)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn lstmn_step_matches_naive_oracle_on_random_instances() {
    let worst = (0..100)
        .map(|seed| lstmn_step_error(&Instance::random(1000 + seed)))
        .fold(0.0, f64::max);
    assert!(worst <= RANDOM_TOL, "worst {worst}");
}

#[test]
fn unequal_tapes_are_an_invariant_error() {
    let inst = Instance::with_dims(11, Dims::square(2, 2, 1), true);
    let mut l = inst.live();
    let (h, c) = (l.tapes.hidden().to_vec(), l.tapes.memory()[..1].to_vec());
    let mut broken = Tapes::from_parts(h, c, None);
    let err = lstmn_step(
        &mut l.g,
        &l.p,
        &inst.layer,
        l.x,
        &mut broken,
        l.h_prev,
        None,
    );
    assert!(matches!(err, Err(Error::Invariant(_))));
}

#[test]
fn tape_evicts_oldest_slot_at_capacity() {
    let mut g = Graph::new();
    let slot = |g: &mut Graph, v: f64| g.constant(Tensor::row(vec![v]));
    let mut tapes = Tapes::new(Some(2));
    for v in [1.0, 2.0, 3.0] {
        let (h, c) = (slot(&mut g, v), slot(&mut g, -v));
        tapes.push(h, c, None);
    }
    let held: Vec<f64> = tapes.hidden().iter().map(|&v| g.value(v).item()).collect();
    assert_eq!(held, [2.0, 3.0]);
    let memory: Vec<f64> = tapes.memory().iter().map(|&v| g.value(v).item()).collect();
    assert_eq!(memory, [-2.0, -3.0]);
}

fn stack(layers: usize, skip: bool, size: usize, seed: u64) -> (ParamStore, StackWeights) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let spec = StackSpec {
        embed: size,
        hidden: size,
        attention: size,
        layers,
        skip,
        attention_bias: true,
    };
    let w = StackWeights::init(&mut store, "", spec, &mut r);
    common::randomize(&mut store, &mut r, 1.0);
    (store, w)
}

fn inputs(
    g: &mut Graph,
    len: usize,
    batch: usize,
    width: usize,
    seed: u64,
) -> Vec<lstmn::autodiff::Var> {
    let mut r = rng(seed);
    (0..len)
        .map(|_| g.constant(random_tensor(&mut r, batch, width, 1.0)))
        .collect()
}

#[test]
fn one_layer_stack_is_the_lstmn_step() {
    let (store, w) = stack(1, false, 3, 12);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xs = inputs(&mut g, 4, 2, 3, 13);
    let mut state = w.new_state(&mut g, 2, None);
    let mut tapes = Tapes::new(None);
    let mut summary = g.zeros(2, 3);
    for &x in &xs {
        let out = stack_step(&mut g, &p, &w, x, &mut state, None).unwrap();
        let (s, read) = lstmn_step(&mut g, &p, &w.layers[0], x, &mut tapes, summary, None).unwrap();
        summary = read.summary_hidden;
        assert_eq!(g.value(out[0].state.h), g.value(s.h));
        assert_eq!(g.value(out[0].state.c), g.value(s.c));
    }
}

#[test]
fn zero_weight_stack_outputs_zero() {
    let (mut store, w) = stack(2, true, 3, 14);
    zero_all(&mut store);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xs = inputs(&mut g, 4, 2, 3, 15);
    let mut state = w.new_state(&mut g, 2, None);
    for &x in &xs {
        for o in stack_step(&mut g, &p, &w, x, &mut state, None).unwrap() {
            assert!(g.value(o.state.h).data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn tapes_grow_with_the_sequence() {
    let (store, w) = stack(3, true, 2, 16);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xs = inputs(&mut g, 6, 2, 2, 17);
    let run = Recurrent::Lstmn(w)
        .run(&mut g, &p, &xs, None, None)
        .unwrap();
    assert_eq!(run.tapes.unwrap().len(), 6);
    for layer in &run.traces {
        assert!(layer[0].is_none());
        for (t, w) in layer.iter().enumerate().skip(1) {
            let w = g.value(w.expect("attention after t = 1"));
            assert_eq!(w.cols(), t);
            for b in 0..2 {
                assert!((w.row_slice(b).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

/// The LSTMN reaches `h_1` directly through its tape; an LSTM step whose
/// previous state is held fixed has no such path.
#[test]
fn tape_gives_a_direct_path_to_early_states() {
    let inst = Instance::with_dims(18, Dims::square(3, 1, 1), true);
    let mut g = Graph::new();
    let p = inst.store.bind(&mut g);
    let x = constant(&mut g, &inst.x);
    let h1 = g.param(Tensor::matrix(2, 3, inst.hs[0].concat()));
    let c1 = constant(&mut g, &inst.cs[0]);
    let zero = g.zeros(2, 3);
    let mut tapes = Tapes::from_parts(vec![h1], vec![c1], None);
    let (s2, r2) = lstmn_step(&mut g, &p, &inst.layer, x, &mut tapes, zero, None).unwrap();
    let h2 = g.constant(g.value(s2.h).clone());
    let c2 = g.constant(g.value(s2.c).clone());
    let summary = g.constant(g.value(r2.summary_hidden).clone());
    let mut held = Tapes::from_parts(vec![h1, h2], vec![c1, c2], None);
    let (s3, _) = lstmn_step(&mut g, &p, &inst.layer, x, &mut held, summary, None).unwrap();
    let plain = lstm_step(
        &mut g,
        &p,
        &inst.layer.gates,
        x,
        &CellState { h: h2, c: c2 },
    )
    .unwrap();
    let both = g.add(s3.h, plain.h).unwrap();
    let loss = g.sum(both).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad_or_zeros(h1).norm_sq() > 1e-12);

    let mut g = Graph::new();
    let p = inst.store.bind(&mut g);
    let x = constant(&mut g, &inst.x);
    let h1 = g.param(Tensor::matrix(2, 3, inst.hs[0].concat()));
    let h2 = g.constant(Tensor::zeros(&[2, 3]));
    let c2 = constant(&mut g, &inst.cs[0]);
    let plain = lstm_step(
        &mut g,
        &p,
        &inst.layer.gates,
        x,
        &CellState { h: h2, c: c2 },
    )
    .unwrap();
    let keep = g.add(plain.h, h1).unwrap();
    let loss = g.sum(keep).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad_or_zeros(h1).data().iter().all(|&v| v == 1.0));
}

#[test]
fn repeated_steps_are_bit_identical() {
    let inst = Instance::random(19);
    let run = || {
        let mut l = inst.live();
        let (s, _) = lstmn_step(
            &mut l.g,
            &l.p,
            &inst.layer,
            l.x,
            &mut l.tapes,
            l.h_prev,
            None,
        )
        .unwrap();
        (l.g.value(s.h).clone(), l.g.value(s.c).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn encoder_matches_stepwise_oracle() {
    let (store, w) = stack(1, false, 2, 20);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xs = inputs(&mut g, 3, 1, 2, 21);
    let enc = encode(&mut g, &p, &w, &xs, None).unwrap();
    assert_eq!(enc.source.len(), 3);
    assert!(enc.traces[0][0].is_none());

    let iw = common::IntraW::from_store(&store, "layer1.", "W_x");
    let (mut hs, mut cs, mut summary) = (Vec::new(), Vec::new(), vec![0.0; 2]);
    for (t, &x) in xs.iter().enumerate() {
        let (s, read) = common::lstmn_step(&iw, &hs, &cs, g.value(x).data(), &summary);
        assert!(max_diff(g.value(enc.source.hidden[t]).data(), &s.h) <= EXAMPLE_TOL);
        assert!(max_diff(g.value(enc.source.memory[t]).data(), &s.c) <= EXAMPLE_TOL);
        summary = read.h_tilde;
        hs.push(s.h);
        cs.push(s.c);
    }
}

#[test]
fn encoder_degenerate_cases() {
    let (mut store, w) = stack(1, false, 2, 22);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xs = inputs(&mut g, 1, 1, 2, 23);
    let enc = encode(&mut g, &p, &w, &xs, None).unwrap();
    assert_eq!((enc.source.hidden.len(), enc.source.memory.len()), (1, 1));
    assert!(matches!(
        encode(&mut g, &p, &w, &[], None),
        Err(Error::Precondition(_))
    ));

    zero_all(&mut store);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xs = inputs(&mut g, 3, 2, 2, 24);
    let enc = encode(&mut g, &p, &w, &xs, None).unwrap();
    for v in enc.source.hidden.iter().chain(&enc.source.memory) {
        assert!(g.value(*v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn inter_attend_degenerate_cases() {
    let mut inst = Instance::with_dims(25, Dims::square(3, 0, 4), true);
    inst.set("inter.u", 0.0);
    let mut l = inst.live();
    let a = inter_attend(&mut l.g, &l.p, &inst.inter, l.x, &mut l.src, l.g_prev).unwrap();
    assert!(l
        .g
        .value(a.attention.weights)
        .data()
        .iter()
        .all(|&w| w == 0.25));

    let inst = Instance::with_dims(26, Dims::square(3, 0, 1), true);
    let mut l = inst.live();
    let a = inter_attend(&mut l.g, &l.p, &inst.inter, l.x, &mut l.src, l.g_prev).unwrap();
    assert!(l
        .g
        .value(a.attention.weights)
        .data()
        .iter()
        .all(|&w| w == 1.0));
    assert_eq!(
        l.g.value(a.summary_hidden).data(),
        inst.gs[0].concat().as_slice()
    );
    assert_eq!(
        l.g.value(a.summary_memory).data(),
        inst.alphas[0].concat().as_slice()
    );
}

#[test]
fn inter_attend_matches_direct_formula() {
    let inst = Instance::with_dims(27, Dims::square(2, 0, 3), true);
    assert!(inter_attend_error(&inst) <= EXAMPLE_TOL);
}

#[test]
fn inter_attend_matches_oracle_on_random_instances() {
    let worst = (0..100)
        .map(|seed| inter_attend_error(&Instance::random(2000 + seed)))
        .fold(0.0, f64::max);
    assert!(worst <= RANDOM_TOL, "worst {worst}");
}

#[test]
fn deep_step_matches_oracle_on_random_instances() {
    let worst = (0..100)
        .map(|seed| deep_step_error(&Instance::random(3000 + seed)))
        .fold(0.0, f64::max);
    assert!(worst <= RANDOM_TOL, "worst {worst}");
}

#[test]
fn deep_step_with_zero_weights_and_source() {
    let mut inst = Instance::with_dims(28, Dims::square(3, 2, 3), true);
    zero_all(&mut inst.store);
    for slot in inst.gs.iter_mut().chain(inst.alphas.iter_mut()) {
        slot.iter_mut()
            .for_each(|row| row.iter_mut().for_each(|v| *v = 0.0));
    }
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
    .unwrap();
    let r = step.inter.transfer.unwrap();
    assert!(l.g.value(r).data().iter().all(|&v| v == 0.5));
    let tilde = l.g.value(step.intra.summary_memory).clone();
    let i_cand: Vec<f64> = tilde.data().iter().map(|c| 0.5 * c).collect();
    assert!(max_diff(l.g.value(step.state.c).data(), &i_cand) <= EXAMPLE_TOL);
}

#[test]
fn first_deep_step_over_single_source_slot() {
    let inst = Instance::with_dims(29, Dims::square(3, 0, 1), true);
    assert!(deep_step_error(&inst) <= EXAMPLE_TOL);
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
    .unwrap();
    assert!(step.intra.attention.is_none());
    assert_eq!(
        l.g.value(step.inter.summary_memory).data(),
        inst.alphas[0].concat().as_slice()
    );
}

/// With `bias_r` at -1e3 the transfer gate closes and the deep decoder
/// reduces to the plain LSTMN update, which is also the shallow decoder's
/// cell once its context path is ignored.
#[test]
fn closed_transfer_gate_recovers_the_plain_decoder() {
    for seed in 0..100 {
        let mut inst = Instance::random(4000 + seed);
        inst.set("inter.bias_r", -1e3);
        let mut l = inst.live();
        let (mut tapes2, mut tapes3) = (l.tapes.clone(), l.tapes.clone());
        let mut src2 = l.src.clone();
        let deep = deep_decode_step(
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
        .unwrap();
        let (plain, _) = lstmn_step(
            &mut l.g,
            &l.p,
            &inst.layer,
            l.x,
            &mut tapes2,
            l.h_prev,
            None,
        )
        .unwrap();
        let shallow = shallow_decode_step(
            &mut l.g,
            &l.p,
            &inst.layer,
            &inst.inter,
            l.x,
            &mut tapes3,
            l.h_prev,
            l.g_prev,
            &mut src2,
            None,
        )
        .unwrap();
        assert!(l
            .g
            .value(deep.inter.transfer.unwrap())
            .data()
            .iter()
            .all(|&r| r < 1e-300));
        for other in [plain, shallow.state] {
            assert!(l.g.value(deep.state.c).max_abs_diff(l.g.value(other.c)) <= RANDOM_TOL);
            assert!(l.g.value(deep.state.h).max_abs_diff(l.g.value(other.h)) <= RANDOM_TOL);
        }
    }
}

#[test]
fn deep_step_passes_gradient_check_at_dims_four() {
    let mut inst = Instance::with_dims(30, Dims::square(4, 2, 3), true);
    let out = inst
        .store
        .add("out.W", random_tensor(&mut rng(31), 5, 4, 1.0));
    let inst = inst;
    let targets = [Some(0), Some(3)];
    let report = inst
        .store
        .grad_check(
            |g: &mut Graph, p| {
                let mut i = inst.inputs(g);
                let step = deep_decode_step(
                    g,
                    p,
                    &inst.layer,
                    &inst.inter,
                    i.x,
                    &mut i.tapes,
                    i.h_prev,
                    i.g_prev,
                    &mut i.src,
                    None,
                )?;
                let logits = g.linear(step.state.h, p[out])?;
                g.cross_entropy(logits, &targets)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn shallow_step_degenerate_cases() {
    let mut inst = Instance::with_dims(32, Dims::square(3, 0, 2), true);
    zero_all(&mut inst.store);
    for slot in inst.gs.iter_mut() {
        slot.iter_mut()
            .for_each(|row| row.iter_mut().for_each(|v| *v = 0.0));
    }
    let mut l = inst.live();
    let step = shallow_decode_step(
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
    .unwrap();
    let prediction = l.g.value(step.prediction);
    assert_eq!(prediction.cols(), 6);
    assert!(prediction.data().iter().all(|&v| v == 0.0));

    let inst = Instance::with_dims(33, Dims::square(3, 2, 1), true);
    let mut l = inst.live();
    let step = shallow_decode_step(
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
    .unwrap();
    assert_eq!(
        l.g.value(step.inter.summary_hidden).data(),
        inst.gs[0].concat().as_slice()
    );
}
