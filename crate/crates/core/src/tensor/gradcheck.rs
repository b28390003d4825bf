//! Central finite-difference checks against the autodiff tape.

use super::{Graph, Result, Tensor, TensorError, Var};

/// Max relative error between the analytic gradient of a scalar function of
/// `x` and its central finite difference with step `eps`.
///
/// Per coordinate the error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once; the error is the max over all of them.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidInput {
            op: "grad_check",
            reason: format!("eps must be positive, got {eps}"),
        });
    }
    let evaluate = |values: &[Tensor], track: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(track)))
            .collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let scalar = |g: &Graph, out: Var| {
        g.value(out)
            .item()
            .ok_or_else(|| TensorError::NotScalar(g.shape(out).to_vec()))
    };

    let (mut g, vars, out) = evaluate(inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for (coord, &a) in grads.iter().enumerate() {
            let original = inputs[which].data()[coord];
            probe[which].data_mut()[coord] = original + eps;
            let (g_plus, _, o_plus) = evaluate(&probe, false)?;
            let plus = scalar(&g_plus, o_plus)?;
            probe[which].data_mut()[coord] = original - eps;
            let (g_minus, _, o_minus) = evaluate(&probe, false)?;
            let minus = scalar(&g_minus, o_minus)?;
            probe[which].data_mut()[coord] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let denom = 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
