use super::{Graph, ParamTree, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(|numeric_i|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .wrt(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Gradient check of a loss over every trainable scalar in `params`
/// (or the listed subset). Returns the worst error and the name holding it.
pub fn grad_check_params<F>(f: F, params: &ParamTree, only: Option<&[&str]>, eps: f64) -> Result<(f64, String)>
where
    F: Fn(&mut Graph, &ParamTree) -> Result<Var>,
{
    let mut base = params.clone();
    base.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &base)?;
    let grads = g.backward(loss)?;
    base.accumulate(&g, &grads)?;

    let eval = |p: &ParamTree| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, p)?;
        Ok(g.value(out).item())
    };

    let names: Vec<String> = match only {
        Some(list) => list.iter().map(|s| s.to_string()).collect(),
        None => base
            .iter()
            .filter(|(_, e)| e.tensor.requires_grad)
            .map(|(n, _)| n.to_string())
            .collect(),
    };
    let mut worst = (0.0f64, String::new());
    let mut probe = base.clone();
    for name in &names {
        let analytic = base
            .get(name)?
            .grad
            .clone()
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        for i in 0..analytic.len() {
            let orig = probe.get(name)?.data[i];
            probe.get_mut(name)?.data[i] = orig + eps;
            let fp = eval(&probe)?;
            probe.get_mut(name)?.data[i] = orig - eps;
            let fm = eval(&probe)?;
            probe.get_mut(name)?.data[i] = orig;
            let err = rel_err(analytic[i], (fp - fm) / (2.0 * eps));
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]"));
            }
        }
    }
    Ok(worst)
}
