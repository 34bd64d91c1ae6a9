use crate::error::{NcError, Result};
use crate::ncnet::NcNetParams;

use super::Gradients;

/// Bias-corrected Adam moments for every weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &NcNetParams, lr: f32) -> Self {
        let shapes: Vec<Vec<f32>> = params
            .layers
            .iter()
            .flat_map(|l| [vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }
}

pub fn adam_step(params: &mut NcNetParams, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if !grads.congruent(params) || state.m.len() != 2 * params.layers.len() {
        return Err(NcError::Shape(
            "gradients / optimizer state do not match the parameters".into(),
        ));
    }
    for (n, l) in params.layers.iter().enumerate() {
        if state.m[2 * n].len() != l.weights.len() || state.m[2 * n + 1].len() != l.bias.len() {
            return Err(NcError::Shape(format!(
                "optimizer state mismatch at layer {n}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    let tensors = params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .flat_map(|(l, g)| [(&mut l.weights, &g.weights), (&mut l.bias, &g.bias)]);
    for ((theta, g), (m, v)) in tensors.zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for n in 0..theta.len() {
            m[n] = b1 * m[n] + (1.0 - b1) * g[n];
            v[n] = b2 * v[n] + (1.0 - b2) * g[n] * g[n];
            let mh = m[n] / c1;
            let vh = v[n] / c2;
            theta[n] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ncnet::{init_params, NetConfig};

    fn filled(p: &NcNetParams, v: f32) -> Gradients {
        let mut g = Gradients::zeros_like(p);
        for l in &mut g.layers {
            l.weights
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|x| *x = v);
        }
        g
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = init_params(NetConfig::INSTANCE, 1).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&p, 5e-4);
        adam_step(&mut p, &Gradients::zeros_like(&before), &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = init_params(NetConfig::INSTANCE, 2).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-2);
        let mut g = Gradients::zeros_like(&p);
        for (n, v) in g.layers[0].weights.iter_mut().enumerate() {
            *v = (n as f32 - 600.0) * 1e-4;
        }
        adam_step(&mut p, &g, &mut s).unwrap();
        for ((new, old), gv) in p.layers[0]
            .weights
            .iter()
            .zip(&before.layers[0].weights)
            .zip(&g.layers[0].weights)
        {
            let expect = -1e-2 * gv / (gv.abs() + 1e-8);
            assert!((new - old - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = init_params(NetConfig::INSTANCE, 3).unwrap();
        let mut s = AdamState::new(&p, 1e-3);
        let g = filled(&p, 0.5);
        let mut prev = p.layers[1].bias[0];
        for _ in 0..200 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        adam_step(&mut p, &g, &mut s).unwrap();
        prev -= p.layers[1].bias[0];
        // 201 steps of ~lr each
        assert!((prev / 201.0 - 1e-3).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = init_params(NetConfig::INSTANCE, 4).unwrap();
        let other = init_params(NetConfig::CATEGORY, 4).unwrap();
        let mut s = AdamState::new(&p, 1e-3);
        assert!(adam_step(&mut p, &Gradients::zeros_like(&other), &mut s).is_err());
    }
}
