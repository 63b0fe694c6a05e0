use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares backward-pass gradients of `f` against central differences
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate of every input.
///
/// Returns the largest relative error, using the denominator
/// `max(|analytic|, |numeric|, 1e-8)`. `f` must be deterministic; that is the
/// caller's responsibility.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check_coords(f, inputs, h, None)
}

/// Like [`finite_diff_check`], restricted to the listed `(input, flat index)`
/// coordinates when `coords` is given.
pub fn finite_diff_check_coords<F>(f: F, inputs: &[Tensor], h: f64, coords: Option<&[(usize, usize)]>) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(k, t)| (0..t.numel()).map(move |i| (k, i)))
                .collect();
            &all
        }
    };

    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for &(k, i) in coords {
        let orig = probe[k].data()[i];
        probe[k].data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe[k].data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe[k].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[k][i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
