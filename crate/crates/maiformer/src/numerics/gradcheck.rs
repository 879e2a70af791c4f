//! Central-finite-difference verification of reverse-mode gradients.
//!
//! Runs in f64 only; the perturbation scale would drown in f32 rounding.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::NumericsError;

/// Worst relative error observed for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Outcome of a gradient check over a full parameter set.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn eval_loss<F>(loss_fn: &F, params: &[Tensor<f64>]) -> Result<f64, NumericsError>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.constant(p.clone()))
        .collect::<Result<_, _>>()?;
    let loss = loss_fn(&g, &vars)?;
    g.value(loss).scalar_value()
}

/// Compare reverse-mode gradients of `loss_fn` against central finite
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every element of every parameter.
///
/// The relative error uses a small denominator floor so that near-zero
/// gradients are compared absolutely at the same scale. A loss function that
/// does not reproduce its own value on re-evaluation is rejected.
pub fn grad_check<F>(
    names: &[String],
    params: &[Tensor<f64>],
    loss_fn: F,
    step: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    assert_eq!(names.len(), params.len());

    let base = eval_loss(&loss_fn, params)?;
    let again = eval_loss(&loss_fn, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(NumericsError::NonDeterministicLoss);
    }

    // Analytic gradients from one taped pass.
    let g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.clone(), true))
        .collect::<Result<_, _>>()?;
    let loss = loss_fn(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();

    const DENOM_FLOOR: f64 = 1e-6;
    let mut per_param = Vec::with_capacity(params.len());
    let mut overall = 0.0f64;
    for (pi, name) in names.iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for ei in 0..params[pi].len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ei] += step;
            let f_plus = eval_loss(&loss_fn, &plus)?;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ei] -= step;
            let f_minus = eval_loss(&loss_fn, &minus)?;
            let fd = (f_plus - f_minus) / (2.0 * step);
            let ad = analytic[pi].data()[ei];
            let abs = (fd - ad).abs();
            let rel = abs / (fd.abs() + ad.abs()).max(DENOM_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        overall = overall.max(max_rel);
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
    })
}
