use super::array::Array;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / (|numeric| + 1e-8)` over every element.
    pub max_rel_err: f64,
    /// `(parameter, element)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Array>,
    pub numeric: Vec<Array>,
}

impl GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)`. The
    /// floor keeps components near zero, where central differences only
    /// resolve to round-off, from dominating the ratio.
    pub fn max_rel_err_floored(&self, floor: f64) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .flat_map(|(a, n)| a.data().iter().zip(n.data()))
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`.
///
/// `f` receives a fresh graph and one trainable leaf per entry of `params`,
/// and must return a single-element node.
pub fn grad_check<F>(f: F, params: &[Array], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Array]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (graph, vars, out) = eval(params)?;
    let base = graph.value(out).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("f(params) = {base}")));
    }
    let grads = graph.backward(out)?;
    let analytic: Vec<Array> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut work = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0;
    let mut worst = None;
    for pi in 0..params.len() {
        let mut num = Array::zeros(params[pi].shape());
        for ei in 0..params[pi].len() {
            let orig = work[pi].data()[ei];
            let blame =
                |e: Error| Error::NonFinite(format!("perturbing parameter {pi} element {ei}: {e}"));
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval(&work).map_err(blame)?;
            let plus = plus.0.value(plus.2).item();
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval(&work).map_err(blame)?;
            let minus = minus.0.value(minus.2).item();
            work[pi].data_mut()[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "perturbing parameter {pi} element {ei} gives f = {plus} / {minus}"
                )));
            }
            let nd = (plus - minus) / (2.0 * eps);
            num.data_mut()[ei] = nd;
            let rel = (analytic[pi].data()[ei] - nd).abs() / (nd.abs() + 1e-8);
            if rel > max_rel_err || worst.is_none() {
                if rel > max_rel_err {
                    max_rel_err = rel;
                }
                worst = Some((pi, ei));
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        analytic,
        numeric,
    })
}
