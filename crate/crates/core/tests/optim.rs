use lstmn::autodiff::Tensor;
use lstmn::optim::{
    dropout_tensor, global_norm, renorm_gradients, scale_embedding_grads, sgd_step, AdamState,
    EmbeddingPolicy, SgdSchedule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grads(r: &mut ChaCha8Rng, scale: f64) -> Vec<Tensor> {
    [(3, 4), (1, 7), (5, 2)]
        .iter()
        .map(|&(rows, cols)| {
            Tensor::matrix(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| r.gen_range(-scale..scale))
                    .collect(),
            )
        })
        .collect()
}

#[test]
fn renorm_caps_the_norm_at_the_threshold() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for scale in [0.01, 0.3, 1.0, 4.0, 100.0] {
        let mut grads = random_grads(&mut r, scale);
        let direct: f64 = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let pre = renorm_gradients(&mut grads, 5.0).unwrap();
        assert!((pre - direct).abs() <= 1e-12 * direct.max(1.0));
        assert!((global_norm(&grads) - direct.min(5.0)).abs() <= 1e-10);
    }
}

#[test]
fn sgd_step_and_decay_schedule() {
    let mut theta = vec![Tensor::scalar(1.0)];
    sgd_step(&mut theta, &[Tensor::scalar(2.0)], 0.65);
    assert!((theta[0].item() + 0.3).abs() <= 1e-15);

    let mut s = SgdSchedule::new(0.65, 0.85, 1e-3).unwrap();
    let mut lrs = vec![s.lr];
    for _ in 0..5 {
        s.end_epoch(100.0);
        lrs.push(s.lr);
    }
    let expected = [0.65, 0.65, 0.5525, 0.469625, 0.39918125, 0.3393040625];
    for (a, b) in lrs.iter().zip(expected) {
        assert!((a - b).abs() <= 1e-15, "{lrs:?}");
    }

    let mut s = SgdSchedule::new(0.65, 0.85, 1e-3).unwrap();
    for ppl in [100.0, 90.0, 80.0, 79.0] {
        assert!(!s.end_epoch(ppl));
    }
    assert_eq!(s.lr, 0.65);
    assert!(s.end_epoch(78.95));
}

#[test]
fn adam_matches_direct_recurrence() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
    let mut theta = vec![Tensor::scalar(0.4)];
    let mut state = AdamState::new(&theta);
    let (mut x, mut m, mut v) = (0.4f64, 0.0f64, 0.0f64);
    for t in 1..=10 {
        let g: f64 = r.gen_range(-2.0..2.0);
        state.step(&mut theta, &[Tensor::scalar(g)], lr);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        x -= lr * m_hat / (v_hat.sqrt() + eps);
        assert!((theta[0].item() - x).abs() <= 1e-12);
    }
    assert_eq!(state.step, 10);
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut theta = vec![Tensor::scalar(0.0)];
    let mut state = AdamState::new(&theta);
    state.step(&mut theta, &[Tensor::scalar(3.0)], 1e-3);
    assert!((theta[0].item() + 1e-3).abs() <= 1e-11);

    let mut theta = vec![Tensor::row(vec![0.5, -2.0])];
    let mut state = AdamState::new(&theta);
    for _ in 0..5 {
        state.step(&mut theta, &[Tensor::zeros(&[1, 2])], 1e-3);
    }
    assert_eq!(theta[0].data(), &[0.5, -2.0]);
}

#[test]
fn inverted_dropout_preserves_the_mean() {
    let ones = Tensor::filled(&[1, 100_000], 1.0);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let out = dropout_tensor(&ones, 0.5, Some(&mut r)).unwrap();
    let mean = out.data().iter().sum::<f64>() / 1e5;
    assert!((mean - 1.0).abs() <= 0.01, "{mean}");
    assert!(out.data().iter().all(|&x| x == 0.0 || x == 2.0));

    assert_eq!(dropout_tensor(&ones, 0.0, Some(&mut r)).unwrap(), ones);
    assert_eq!(
        dropout_tensor::<ChaCha8Rng>(&ones, 0.7, None).unwrap(),
        ones
    );
    assert!(dropout_tensor(&ones, 1.0, Some(&mut r)).is_err());
}

#[test]
fn embedding_policies_in_the_first_epoch() {
    let pretrained = [true, false];
    let grad = || Tensor::matrix(2, 2, vec![1.0; 4]);

    let mut g = grad();
    scale_embedding_grads(&mut g, &pretrained, 1, "scale-first-epoch".parse().unwrap());
    assert_eq!(g.data(), &[0.35, 0.35, 1.0, 1.0]);

    let mut g = grad();
    scale_embedding_grads(
        &mut g,
        &pretrained,
        2,
        EmbeddingPolicy::ScaleFirstEpoch(0.35),
    );
    assert_eq!(g, grad());

    let mut g = grad();
    scale_embedding_grads(
        &mut g,
        &pretrained,
        1,
        EmbeddingPolicy::FreezePretrainedFirstEpoch,
    );
    assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0]);

    assert!("scale-everything".parse::<EmbeddingPolicy>().is_err());
}
