//! Training recipe pieces: gradient renormalization, SGD with
//! validation-driven decay, Adam, inverted dropout, and embedding-gradient
//! policies.

use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients by `threshold / norm` when their global L2 norm
/// exceeds `threshold`. Returns the norm before scaling.
pub fn renorm_gradients(grads: &mut [Tensor], threshold: f64) -> Result<f64> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            op: "renorm_gradients",
        });
    }
    let norm = global_norm(grads);
    if norm > threshold {
        let s = threshold / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    Ok(norm)
}

/// Learning rate that decays by `decay` after each epoch whose validation
/// metric (lower is better) fails to improve on the best so far by at least
/// `min_relative_gain`.
#[derive(Clone, Debug)]
pub struct SgdSchedule {
    pub lr: f64,
    pub decay: f64,
    pub min_relative_gain: f64,
    best: Option<f64>,
}

impl SgdSchedule {
    pub fn new(lr: f64, decay: f64, min_relative_gain: f64) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::config("lr_decay", "must lie in (0, 1)"));
        }
        Ok(SgdSchedule {
            lr,
            decay,
            min_relative_gain,
            best: None,
        })
    }

    /// Returns `true` when the rate was decayed.
    pub fn end_epoch(&mut self, metric: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(best) => metric < best * (1.0 - self.min_relative_gain),
        };
        if self.best.is_none_or(|b| metric < b) {
            self.best = Some(metric);
        }
        if !improved {
            self.lr *= self.decay;
        }
        !improved
    }
}

/// `theta <- theta - lr * grad`
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((x, d), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * d;
                *v = self.beta2 * *v + (1.0 - self.beta2) * d * d;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Precondition(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(shape: &[usize], rate: f64, rng: &mut R) -> Result<Tensor> {
    check_rate(rate)?;
    let keep = 1.0 - rate;
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        };
    }
    Ok(t)
}

/// Inverted dropout on a tensor. `rng` is `Some` in training mode; `None`
/// means evaluation and returns the input unchanged.
pub fn dropout_tensor<R: Rng>(x: &Tensor, rate: f64, rng: Option<&mut R>) -> Result<Tensor> {
    check_rate(rate)?;
    match rng {
        Some(rng) if rate > 0.0 => {
            let mask = dropout_mask(x.shape(), rate, rng)?;
            let data = x
                .data()
                .iter()
                .zip(mask.data())
                .map(|(a, b)| a * b)
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        _ => Ok(x.clone()),
    }
}

/// Graph version of [`dropout_tensor`].
pub fn dropout<R: Rng>(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
    check_rate(rate)?;
    match rng {
        Some(rng) if rate > 0.0 => {
            let mask = dropout_mask(g.shape(x), rate, rng)?;
            let m = g.constant(mask);
            g.mul(x, m)
        }
        _ => Ok(x),
    }
}

/// How pretrained embedding rows are updated during the first epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmbeddingPolicy {
    /// All rows update normally.
    Normal,
    /// Pretrained rows' gradients are multiplied by the factor in epoch 1.
    ScaleFirstEpoch(f64),
    /// Only rows without a pretrained vector update in epoch 1.
    FreezePretrainedFirstEpoch,
}

impl FromStr for EmbeddingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "normal" => Ok(EmbeddingPolicy::Normal),
            "scale-first-epoch" => Ok(EmbeddingPolicy::ScaleFirstEpoch(0.35)),
            "freeze-pretrained-first-epoch" => Ok(EmbeddingPolicy::FreezePretrainedFirstEpoch),
            other => Err(Error::config(
                "embed_policy",
                format!("unknown policy `{other}`"),
            )),
        }
    }
}

impl EmbeddingPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingPolicy::Normal => "none",
            EmbeddingPolicy::ScaleFirstEpoch(_) => "scale-first-epoch",
            EmbeddingPolicy::FreezePretrainedFirstEpoch => "freeze-pretrained-first-epoch",
        }
    }
}

/// Applies `policy` to the gradient of a `|V| x e` embedding table.
/// `pretrained[i]` flags rows initialized from a pretrained file; `epoch`
/// counts from 1.
pub fn scale_embedding_grads(
    grad: &mut Tensor,
    pretrained: &[bool],
    epoch: usize,
    policy: EmbeddingPolicy,
) {
    if epoch != 1 {
        return;
    }
    let factor = match policy {
        EmbeddingPolicy::Normal => return,
        EmbeddingPolicy::ScaleFirstEpoch(s) => s,
        EmbeddingPolicy::FreezePretrainedFirstEpoch => 0.0,
    };
    let e = grad.cols();
    for (row, &flag) in pretrained.iter().enumerate() {
        if flag {
            grad.data_mut()[row * e..(row + 1) * e]
                .iter_mut()
                .for_each(|x| *x *= factor);
        }
    }
}
