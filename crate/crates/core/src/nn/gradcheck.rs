use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Forward, ModelState};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Gradient check through the parameters of `state`: backward-pass
/// gradients of `f` against central differences on perturbed copies of the
/// model. With `per_tensor = Some(n)`, `n` coordinates of every parameter
/// tensor are drawn with `seed`; `None` checks them all. Only tensors whose
/// name passes `include` are checked. Relative errors use the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must not enable dropout.
pub fn model_grad_check<F, I>(
    state: &ModelState,
    f: F,
    h: f64,
    per_tensor: Option<usize>,
    seed: u64,
    include: I,
) -> Result<f64>
where
    F: Fn(&mut Forward) -> Result<Var>,
    I: Fn(&str) -> bool,
{
    if h <= 0.0 {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, state);
    let loss = f(&mut fw)?;
    let vars = fw.param_vars().to_vec();
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(state.params())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |s: &ModelState| -> Result<f64> {
        let mut g = Graph::inference();
        let mut fw = Forward::new(&mut g, s);
        let out = f(&mut fw)?;
        Ok(g.value(out).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = state.clone();
    let mut worst = 0.0f64;
    for k in 0..state.params().len() {
        if !include(&state.names()[k]) {
            continue;
        }
        let n = state.params()[k].numel();
        let coords: Vec<usize> = match per_tensor {
            Some(c) if c < n => index::sample(&mut rng, n, c).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = probe.params()[k].data()[i];
            probe.params_mut()[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.params_mut()[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.params_mut()[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
