//! First-order optimizers over flat parameter vectors.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and timestep of an Adam run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<I: IntoIterator<Item = usize>>(sizes: I) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { step: 0, m, v }
    }
}

fn check_layout(params: &[Vec<f64>], grads: &[Vec<f64>], state: &[Vec<f64>]) -> Result<()> {
    let ok = params.len() == grads.len()
        && params.len() == state.len()
        && params
            .iter()
            .zip(grads)
            .zip(state)
            .all(|((p, g), s)| p.len() == g.len() && p.len() == s.len());
    if ok {
        Ok(())
    } else {
        Err(Error::Shape("parameter, gradient and state layouts differ".into()))
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Vec<f64>], grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    check_layout(params, grads, &state.m)?;
    check_layout(params, grads, &state.v)?;
    if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(Error::InvalidArgument(format!("bad Adam settings {cfg:?}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

/// SGD with heavy-ball momentum: `v ← μv + g; θ ← θ − lr·v`.
pub fn sgd_step(params: &mut [Vec<f64>], grads: &[Vec<f64>], velocity: &mut [Vec<f64>], cfg: &SgdConfig) -> Result<()> {
    check_layout(params, grads, velocity)?;
    if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidArgument(format!("bad SGD settings {cfg:?}")));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity) {
        for i in 0..p.len() {
            v[i] = cfg.momentum * v[i] + g[i];
            p[i] -= cfg.lr * v[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![vec![0.0]];
        let mut s = AdamState::new([1]);
        adam_step(&mut p, &[vec![1.0]], &mut s, &AdamConfig::with_lr(0.2)).unwrap();
        assert!((p[0][0] + 0.2 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = vec![vec![1.5, -2.0]];
        let mut fresh = AdamState::new([2]);
        let before = p.clone();
        adam_step(&mut p, &[vec![0.0, 0.0]], &mut fresh, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);

        let mut s = AdamState::new([2]);
        s.m[0] = vec![0.5, -0.5];
        s.v[0] = vec![0.25, 0.25];
        s.step = 3;
        let mut q = vec![vec![0.0, 0.0]];
        adam_step(&mut q, &[vec![0.0, 0.0]], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.m[0], vec![0.45, -0.45]);
        assert_eq!(s.v[0], vec![0.25 * 0.999, 0.25 * 0.999]);
    }

    #[test]
    fn quadratic_trace_matches_hand_execution() {
        // f(θ) = θ², g = 2θ, θ0 = 1, lr 0.1
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = vec![vec![1.0]];
        let mut s = AdamState::new([1]);
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * p[0][0];
            adam_step(&mut p, &[vec![g]], &mut s, &cfg).unwrap();
            let gh = 2.0 * theta;
            m = 0.9 * m + (1.0 - 0.9) * gh;
            v = 0.999 * v + (1.0 - 0.999) * gh * gh;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert_eq!(p[0][0], theta);
        }
        assert!((p[0][0] - 0.7).abs() < 0.05);
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let mut p = vec![vec![0.0; 2]];
        let mut s = AdamState::new([2]);
        assert!(adam_step(&mut p, &[vec![0.0; 3]], &mut s, &AdamConfig::default()).is_err());
        let mut vel = vec![vec![0.0; 2]];
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0 };
        assert!(sgd_step(&mut p, &[vec![0.0]], &mut vel, &cfg).is_err());
    }

    #[test]
    fn sgd_momentum() {
        let mut p = vec![vec![1.0]];
        let mut vel = vec![vec![0.0]];
        let cfg = SgdConfig { lr: 0.5, momentum: 0.5 };
        sgd_step(&mut p, &[vec![1.0]], &mut vel, &cfg).unwrap();
        assert_eq!(p[0][0], 0.5);
        sgd_step(&mut p, &[vec![1.0]], &mut vel, &cfg).unwrap();
        assert_eq!(vel[0][0], 1.5);
        assert_eq!(p[0][0], -0.25);
    }
}
