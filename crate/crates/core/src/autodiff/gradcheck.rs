//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{Binding, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn finite(x: f64, context: &str, index: usize) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
            index,
        })
    }
}

fn scalar_of(graph: &Graph<f64>, out: Var) -> Result<f64> {
    let t = graph.value(out);
    if t.len() != 1 {
        return Err(Error::contract(format!("grad check of non-scalar {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Max over every coordinate of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of `point`.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::contract("grad check step size must be positive"));
    }
    let eval = |pt: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pt.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let out = f(&mut g, &vars)?;
        let y = scalar_of(&g, out)?;
        if !grad {
            return Ok((y, Vec::new()));
        }
        let grads = g.backward(out)?;
        Ok((y, vars.iter().map(|&v| grads.get(v).cloned()).collect()))
    };
    let (_, analytic) = eval(point, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut pt = point.to_vec();
    for (i, t) in point.iter().enumerate() {
        for c in 0..t.len() {
            let x0 = t.data()[c];
            pt[i].data_mut()[c] = x0 + step;
            let fp = finite(eval(&pt, false)?.0, "f(x + h)", c)?;
            pt[i].data_mut()[c] = x0 - step;
            let fm = finite(eval(&pt, false)?.0, "f(x - h)", c)?;
            pt[i].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[c]);
            let a = finite(a, "analytic gradient", c)?;
            let e = rel_error(a, numeric);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (i, c);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Same check for a loss built over a parameter store, restricted to the
/// listed `(parameter, coordinate)` pairs.
pub fn grad_check_store<F>(
    f: F,
    store: &ParamStore<f64>,
    coords: &[(ParamId, usize)],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &mut Binding) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::contract("grad check step size must be positive"));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let mut b = Binding::new();
        let out = f(&mut g, s, &mut b)?;
        scalar_of(&g, out)
    };
    let mut g = Graph::new();
    let mut binding = Binding::new();
    let out = f(&mut g, store, &mut binding)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work = store.clone();
    for &(id, c) in coords {
        let x0 = store.get(id).data()[c];
        work.get_mut(id).data_mut()[c] = x0 + step;
        let fp = finite(eval(&work)?, "f(x + h)", c)?;
        work.get_mut(id).data_mut()[c] = x0 - step;
        let fm = finite(eval(&work)?, "f(x - h)", c)?;
        work.get_mut(id).data_mut()[c] = x0;
        let numeric = (fp - fm) / (2.0 * step);
        let a = binding
            .var(id)
            .and_then(|v| grads.get(v))
            .map_or(0.0, |t| t.data()[c]);
        let a = finite(a, store.name(id), c)?;
        let e = rel_error(a, numeric);
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = (id.0, c);
        }
        report.checked += 1;
    }
    Ok(report)
}
