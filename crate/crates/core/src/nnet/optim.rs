use std::f64::consts::PI;

use super::network::{Gradients, Network};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Cosine-annealed learning rate at `step` of `total_steps`.
///
/// With `restart_period`, the same curve restarts every `period` steps.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, restart_period: Option<usize>) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond total {total_steps}")));
    }
    let (pos, len) = match restart_period {
        Some(0) => return Err(Error::InvalidArgument("restart period must be positive".into())),
        Some(p) => (step % p, p),
        None => (step, total_steps),
    };
    Ok(base_lr * 0.5 * (1.0 + (PI * pos as f64 / len as f64).cos()))
}

/// In-place momentum SGD with coupled L2 weight decay:
/// `v = momentum * v + grad + weight_decay * param; param -= lr * v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// SGD optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f32, weight_decay: f32) -> Self {
        let velocity = net.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { momentum, weight_decay, velocity }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f32) -> Result<()> {
        sgd_step(net.params_mut(), &grads.0, &mut self.velocity, lr, self.momentum, self.weight_decay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1, None).unwrap(), 0.1);
        assert!(cosine_lr(100, 100, 0.1, None).unwrap().abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.1, None).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 0.1, None).is_err());
        assert!(cosine_lr(101, 100, 0.1, None).is_err());
    }

    #[test]
    fn warm_restarts_repeat() {
        let a = cosine_lr(5, 100, 0.1, Some(20)).unwrap();
        let b = cosine_lr(25, 100, 0.1, Some(20)).unwrap();
        assert_eq!(a, b);
        assert_eq!(cosine_lr(40, 100, 0.1, Some(20)).unwrap(), 0.1);
        assert!((cosine_lr(10, 100, 0.1, Some(20)).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(10, 100, 0.1, Some(0)).is_err());
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = [scalar(1.5)];
        let mut v = [scalar(0.0)];
        sgd_step(&mut p, &[scalar(3.0)], &mut v, 0.0, 0.9, 0.1).unwrap();
        assert_eq!(p[0].data()[0], 1.5);
    }

    #[test]
    fn vanilla_sgd() {
        let mut p = [scalar(1.5)];
        let mut v = [scalar(0.0)];
        sgd_step(&mut p, &[scalar(2.0)], &mut v, 0.25, 0.0, 0.0).unwrap();
        assert_eq!(p[0].data()[0], 1.0);
    }

    #[test]
    fn pure_weight_decay() {
        let mut p = [scalar(2.0)];
        let mut v = [scalar(0.0)];
        sgd_step(&mut p, &[scalar(0.0)], &mut v, 0.1, 0.0, 0.5).unwrap();
        assert!((p[0].data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = [scalar(0.0)];
        let mut v = [scalar(0.0)];
        sgd_step(&mut p, &[scalar(1.0)], &mut v, 1.0, 0.5, 0.0).unwrap();
        sgd_step(&mut p, &[scalar(1.0)], &mut v, 1.0, 0.5, 0.0).unwrap();
        assert_eq!(v[0].data()[0], 1.5);
        assert_eq!(p[0].data()[0], -2.5);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = [scalar(0.0)];
        let mut v = [scalar(0.0)];
        let g = Tensor::zeros(vec![2]);
        assert!(sgd_step(&mut p, &[g], &mut v, 0.1, 0.0, 0.0).is_err());
    }
}
