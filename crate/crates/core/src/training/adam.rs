use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment estimates for a fixed, ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }
}

/// One bias-corrected Adam update using each parameter's accumulated gradient.
///
/// Fails without touching anything if a parameter has no gradient.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam state tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        match p.grad() {
            None => return Err(Error::MissingGradient(format!("#{i}"))),
            Some(g) if g.len() != state.m[i].len() => {
                return Err(Error::shape("adam_step", p.shape(), &[state.m[i].len()]))
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(state.eps));
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar Adam written out longhand.
    fn reference_trace(grads: &[f64], lr: f64, theta0: f64) -> Vec<f64> {
        let (mut m, mut v, mut theta) = (0.0, 0.0, theta0);
        let mut out = Vec::new();
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * mh / (vh.sqrt() + 1e-8);
            out.push(theta);
        }
        out
    }

    fn param(v: f64) -> Tensor<f64> {
        Tensor::from_vec(vec![v]).with_requires_grad(true)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = param(0.7);
        p.accumulate_grad(&[0.0]).unwrap();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &mut st, 1e-3).unwrap();
        assert_eq!(p.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = param(0.0);
        p.accumulate_grad(&[1.0]).unwrap();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &mut st, 1e-3).unwrap();
        assert!((p.data()[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
        assert!((p.data()[0] / -1e-3 - 1.0).abs() < 1e-7);
    }

    #[test]
    fn two_steps_match_reference() {
        let mut p = param(0.5);
        let mut st = AdamState::new(&[&p]);
        let expect = reference_trace(&[0.3, 0.3], 0.01, 0.5);
        for e in expect {
            p.clear_grad();
            p.accumulate_grad(&[0.3]).unwrap();
            adam_step(&mut [&mut p], &mut st, 0.01).unwrap();
            assert!((p.data()[0] - e).abs() < 1e-15);
        }
        assert_eq!(st.step, 2);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = param(0.5);
        let mut st = AdamState::new(&[&p]);
        assert!(matches!(
            adam_step(&mut [&mut p], &mut st, 0.01),
            Err(Error::MissingGradient(_))
        ));
        assert_eq!(st.step, 0);
    }
}
