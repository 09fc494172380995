//! SGD with momentum and Adam.

use serde::{Deserialize, Serialize};

use super::{Gradients, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd(SgdState),
    Adam(AdamState),
}

fn check_step_inputs(model: &Model, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    let shapes_match = model.params.len() == grads.per_layer.len()
        && model
            .params
            .iter()
            .zip(&grads.per_layer)
            .all(|(p, g)| p.len() == g.len() && p.iter().zip(g).all(|(a, b)| a.shape() == b.shape()));
    if !shapes_match {
        return Err(Error::Shape("gradients do not match model parameters".into()));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient; optimizer step aborted".into()));
    }
    Ok(())
}

fn zeros_like(model: &Model) -> Vec<Tensor> {
    model
        .params
        .iter()
        .flatten()
        .map(|t| Tensor::zeros(t.shape()))
        .collect()
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step(
    model: &mut Model,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState,
) -> Result<()> {
    check_step_inputs(model, grads, lr)?;
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {momentum}")));
    }
    if !(weight_decay >= 0.0) {
        return Err(Error::InvalidArgument(format!("weight decay must be >= 0, got {weight_decay}")));
    }
    if state.velocity.is_empty() {
        state.velocity = zeros_like(model);
    }
    let params = model.params_mut();
    for ((p, g), v) in params.zip(grads.iter()).zip(state.velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let vel = momentum * *vi as f64 + gi as f64 + weight_decay * *pi as f64;
            *vi = vel as f32;
            *pi = (*pi as f64 - lr * vel) as f32;
        }
    }
    Ok(())
}

/// Adam with bias-corrected moments; `weight_decay` is added to the gradient.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    model: &mut Model,
    grads: &Gradients,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    state: &mut AdamState,
) -> Result<()> {
    check_step_inputs(model, grads, lr)?;
    if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "adam needs beta1, beta2 in [0, 1) and eps > 0, got {beta1}, {beta2}, {eps}"
        )));
    }
    if state.m.is_empty() {
        state.m = zeros_like(model);
        state.v = zeros_like(model);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let params = model.params_mut();
    for (((p, g), m), v) in params
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = gi as f64 + weight_decay * *pi as f64;
            let m_new = beta1 * *mi as f64 + (1.0 - beta1) * g;
            let v_new = beta2 * *vi as f64 + (1.0 - beta2) * g * g;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
            *pi = (*pi as f64 - update) as f32;
        }
    }
    Ok(())
}

/// An optimizer configuration bound to its running state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        let state = match config {
            OptimizerConfig::Sgd { .. } => OptimizerState::Sgd(SgdState::default()),
            OptimizerConfig::Adam { .. } => OptimizerState::Adam(AdamState::default()),
        };
        Optimizer { config, state }
    }

    /// One update at learning rate `lr` (the scheduled rate, not the base).
    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
        match (self.config, &mut self.state) {
            (
                OptimizerConfig::Sgd {
                    momentum,
                    weight_decay,
                    ..
                },
                OptimizerState::Sgd(state),
            ) => sgd_step(model, grads, lr, momentum, weight_decay, state),
            (
                OptimizerConfig::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                },
                OptimizerState::Adam(state),
            ) => adam_step(model, grads, lr, beta1, beta2, eps, weight_decay, state),
            _ => Err(Error::InvalidArgument(
                "optimizer state does not match its configuration".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{InitScheme, LayerKind, LayerSpec, ModelSpec, Role};

    /// Single scalar parameter `w` (a 1x1 dense weight with zero bias).
    fn scalar_model(w: f32) -> Model {
        let spec = ModelSpec::new(
            vec![1],
            vec![LayerSpec {
                kind: LayerKind::Dense { inputs: 1, outputs: 1 },
                init: InitScheme::Zeros,
            }],
        );
        Model::from_params(
            spec,
            Role::Student,
            vec![vec![
                Tensor::new(vec![1, 1], vec![w]).unwrap(),
                Tensor::new(vec![1], vec![0.0]).unwrap(),
            ]],
        )
        .unwrap()
    }

    fn scalar_grad(g: f32) -> Gradients {
        Gradients {
            per_layer: vec![vec![
                Tensor::new(vec![1, 1], vec![g]).unwrap(),
                Tensor::new(vec![1], vec![0.0]).unwrap(),
            ]],
        }
    }

    fn weight(m: &Model) -> f32 {
        m.params()[0][0].data()[0]
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut m = scalar_model(1.0);
        let mut s = SgdState::default();
        sgd_step(&mut m, &scalar_grad(0.5), 0.1, 0.0, 0.0, &mut s).unwrap();
        assert_eq!(weight(&m), 1.0 - 0.1 * 0.5);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut m = scalar_model(0.0);
        let mut s = SgdState::default();
        sgd_step(&mut m, &scalar_grad(1.0), 1.0, 0.9, 0.0, &mut s).unwrap();
        sgd_step(&mut m, &scalar_grad(1.0), 1.0, 0.9, 0.0, &mut s).unwrap();
        assert!((s.velocity[0].data()[0] - 1.9).abs() < 1e-6);
        assert!((weight(&m) - -2.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_quadratic_trajectory_matches_manual_iteration() {
        // f(w) = 0.5 * 3 * w^2, grad = 3 w; lr 0.05, momentum 0.9, decay 0.01.
        // Values iterated by hand in f64:
        //   v1 = 3.01,       w1 = 0.8495
        //   v2 = 5.265995,   w2 = 0.58620025
        //   v3 = 6.5038583,  w3 = 0.26100734
        //   v4 = 6.6391045,  w4 = -0.07094789
        //   v5 = 5.7616409,  w5 = -0.35902993
        let expected = [0.8495, 0.586_200_25, 0.261_007_34, -0.070_947_89, -0.359_029_93];
        let mut m = scalar_model(1.0);
        let mut s = SgdState::default();
        for want in expected {
            let g = 3.0 * weight(&m);
            sgd_step(&mut m, &scalar_grad(g), 0.05, 0.9, 0.01, &mut s).unwrap();
            assert!((weight(&m) - want).abs() < 1e-5, "{} vs {want}", weight(&m));
        }
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut m = scalar_model(1.0);
        let before = m.clone();
        let mut s = SgdState::default();
        let mut g = scalar_grad(0.0);
        g.per_layer[0][0].data_mut()[0] = f32::INFINITY;
        assert!(matches!(
            sgd_step(&mut m, &g, 0.1, 0.9, 0.0, &mut s),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(m.params(), before.params());
    }

    #[test]
    fn sgd_rejects_bad_hyperparameters() {
        let mut m = scalar_model(1.0);
        let mut s = SgdState::default();
        let g = scalar_grad(1.0);
        assert!(sgd_step(&mut m, &g, 0.0, 0.9, 0.0, &mut s).is_err());
        assert!(sgd_step(&mut m, &g, 0.1, 1.0, 0.0, &mut s).is_err());
        assert!(sgd_step(&mut m, &g, 0.1, 0.5, -1.0, &mut s).is_err());
    }

    #[test]
    fn adam_zero_gradients_leave_params() {
        let mut m = scalar_model(0.7);
        let mut s = AdamState::default();
        for _ in 0..10 {
            adam_step(&mut m, &scalar_grad(0.0), 0.01, 0.9, 0.999, 1e-8, 0.0, &mut s).unwrap();
        }
        assert_eq!(weight(&m), 0.7);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = scalar_model(0.0);
        let mut s = AdamState::default();
        adam_step(&mut m, &scalar_grad(2.5), 0.01, 0.9, 0.999, 1e-8, 0.0, &mut s).unwrap();
        assert!((weight(&m) + 0.01).abs() < 1e-7);
    }

    #[test]
    fn adam_three_step_trace() {
        // Gradients 1, -2, 0.5 with lr 0.1, beta1 0.9, beta2 0.999, eps 1e-8.
        // Iterated by hand in f64:
        //   t1: m = 0.1,    v = 0.001,     w = -0.1
        //   t2: m = -0.11,  v = 0.004999,  w = -0.06338965
        //   t3: m = -0.049, v = 0.005244,  w = -0.04972058
        let grads = [1.0f32, -2.0, 0.5];
        let expected = [-0.1f32, -0.063_389_65, -0.049_720_58];
        let mut m = scalar_model(0.0);
        let mut s = AdamState::default();
        for (g, want) in grads.into_iter().zip(expected) {
            adam_step(&mut m, &scalar_grad(g), 0.1, 0.9, 0.999, 1e-8, 0.0, &mut s).unwrap();
            assert!((weight(&m) - want).abs() < 2e-6, "{} vs {want}", weight(&m));
        }
    }
}
