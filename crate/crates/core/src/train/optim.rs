use crate::error::{Error, Result};
use crate::nn::ParamTable;
use crate::tensor::Tensor;

/// `lr_peak · min(step / warmup, √(warmup / step))`.
pub fn lr_at(step: u64, lr_peak: f64, warmup: u64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    lr_peak * (s / w).min((w / s).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        OptimizerState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    /// Adds `opt/m/<name>`, `opt/v/<name>` and `opt/step` entries.
    pub fn append_to(&self, names: &[String], table: &mut ParamTable) {
        for (n, (m, v)) in names.iter().zip(self.m.iter().zip(&self.v)) {
            table.push(format!("opt/m/{n}"), m.clone());
            table.push(format!("opt/v/{n}"), v.clone());
        }
        table.push("opt/step", Tensor::scalar(self.step as f64));
    }

    pub fn from_table(names: &[String], params: &[Tensor], table: &ParamTable) -> Result<Self> {
        let get = |key: String, like: &Tensor| -> Result<Tensor> {
            let t = table
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer entry {key} missing")))?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!("optimizer entry {key} has wrong shape")));
            }
            Ok(t.clone())
        };
        let mut st = OptimizerState::new(params);
        for (i, n) in names.iter().enumerate() {
            st.m[i] = get(format!("opt/m/{n}"), &params[i])?;
            st.v[i] = get(format!("opt/v/{n}"), &params[i])?;
        }
        st.step = table
            .get("opt/step")
            .map(|t| t.data()[0] as u64)
            .ok_or_else(|| Error::Checkpoint("optimizer step missing".into()))?;
        Ok(st)
    }
}

/// One bias-corrected Adam update. The step is refused, leaving parameters
/// and moments untouched, if any gradient or updated value is non-finite.
pub fn adam_step(
    params: &mut [Tensor],
    opt: &mut OptimizerState,
    grads: &[&[f64]],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::dim("one gradient per parameter required"));
    }
    for (i, (g, p)) in grads.iter().zip(params.iter()).enumerate() {
        if g.len() != p.numel() {
            return Err(Error::dim(format!("gradient {i} has the wrong length")));
        }
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i} at element {k}")));
        }
    }
    let t = opt.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut staged = Vec::with_capacity(params.len());
    for (i, g) in grads.iter().enumerate() {
        let (m0, v0, p0) = (opt.m[i].data(), opt.v[i].data(), params[i].data());
        let mut m = Vec::with_capacity(g.len());
        let mut v = Vec::with_capacity(g.len());
        let mut p = Vec::with_capacity(g.len());
        for k in 0..g.len() {
            let mk = cfg.beta1 * m0[k] + (1.0 - cfg.beta1) * g[k];
            let vk = cfg.beta2 * v0[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let pk = p0[k] - lr * (mk / bc1) / ((vk / bc2).sqrt() + cfg.eps);
            if !pk.is_finite() {
                return Err(Error::NonFinite(format!("update of parameter {i} at element {k}")));
            }
            m.push(mk);
            v.push(vk);
            p.push(pk);
        }
        staged.push((m, v, p));
    }
    for (i, (m, v, p)) in staged.into_iter().enumerate() {
        opt.m[i].data_mut().copy_from_slice(&m);
        opt.v[i].data_mut().copy_from_slice(&v);
        params[i].data_mut().copy_from_slice(&p);
    }
    opt.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        assert_eq!(lr_at(200, 5e-4, 200), 5e-4);
        assert_eq!(lr_at(100, 5e-4, 200), 2.5e-4);
        assert_eq!(lr_at(800, 5e-4, 200), 2.5e-4);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut opt = OptimizerState::new(&p);
        adam_step(&mut p, &mut opt, &[&[0.0, 0.0]], 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::from_vec(vec![0.5])];
        let mut opt = OptimizerState::new(&p);
        adam_step(&mut p, &mut opt, &[&[3.0]], 1e-2, &AdamConfig::default()).unwrap();
        // m̂ = g and v̂ = g², so the step is lr · g / (|g| + eps)
        let expect = 0.5 - 1e-2 * 3.0 / (3.0 + 1e-9);
        assert!((p[0].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_leaves_everything_untouched() {
        let mut p = vec![Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![2.0])];
        let mut opt = OptimizerState::new(&p);
        let before = (p.clone(), opt.clone());
        let err = adam_step(&mut p, &mut opt, &[&[1.0], &[f64::NAN]], 1e-3, &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!((p, opt), before);
    }
}
