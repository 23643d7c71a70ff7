use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Max relative error for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(params: &[Tensor], loss: &F) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = loss(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of `loss` against fourth-order central
/// finite differences with step `fd_step`, for every element of every tensor in
/// `params`. The loss must be deterministic; two identical evaluations that
/// disagree abort the check.
pub fn grad_check<F>(
    names: &[String],
    params: &[Tensor],
    loss: F,
    fd_step: f64,
    tolerance: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert_eq!(names.len(), params.len(), "one name per parameter");
    let (mut g, vars, out) = evaluate(params, &loss)?;
    let first = g.value(out).item();
    let (g2, _, out2) = evaluate(params, &loss)?;
    let second = g2.value(out2).item();
    if first.to_bits() != second.to_bits() {
        return Err(Error::Nondeterministic { first, second });
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut work = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (p, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work[p].data_mut()[i] = orig + offset;
                let (g, _, out) = evaluate(&work, &loss)?;
                Ok(g.value(out).item())
            };
            let (p1, m1) = (at(fd_step)?, at(-fd_step)?);
            let (p2, m2) = (at(2.0 * fd_step)?, at(-2.0 * fd_step)?);
            work[p].data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * fd_step);
            worst = worst.max(relative_error(analytic[p].data()[i], numeric));
        }
        report.push(ParamCheck {
            name: name.clone(),
            max_rel_error: worst,
        });
    }
    Ok(GradReport {
        params: report,
        tolerance,
    })
}
