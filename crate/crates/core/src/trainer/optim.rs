//! SGD with momentum, the moving-average target update and the schedules.

use std::f64::consts::PI;

use super::network::NetworkParams;
use crate::error::{Error, Result};

/// `g = grad + wd * p; buf = m * buf + g; p -= lr * buf`, elementwise.
pub fn sgd_update(param: &mut [f64], grad: &[f64], buf: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        let g = g + weight_decay * *p;
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
}

/// Momentum buffers, one per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    buffers: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            buffers: params.trainable().iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }
}

pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState,
) -> Result<()> {
    let grads = grads.trainable();
    let mut params = params.trainable_mut();
    if grads.len() != params.len() || state.buffers.len() != params.len() {
        return Err(Error::Shape("parameter, gradient and state lists differ".into()));
    }
    for (((name, p), (_, g)), buf) in params.iter_mut().zip(&grads).zip(&mut state.buffers) {
        if p.len() != g.len() || p.len() != buf.len() {
            return Err(Error::Shape(format!("tensor {name}")));
        }
        sgd_update(p, g, buf, lr, momentum, weight_decay);
    }
    Ok(())
}

/// `target = tau * target + (1 - tau) * online` over the backbone and
/// projector.
pub fn ema_update(target: &mut NetworkParams, online: &NetworkParams, tau: f64) -> Result<()> {
    let src = online.trainable();
    for ((name, t), (src_name, s)) in target.trainable_mut().into_iter().zip(src) {
        if name != src_name || t.len() != s.len() {
            return Err(Error::Shape(format!("target {name} vs online {src_name}")));
        }
        for (t, &s) in t.iter_mut().zip(s) {
            *t = tau * *t + (1.0 - tau) * s;
        }
    }
    Ok(())
}

/// Cosine ramp of the decay rate from `tau_base` at `k = 0` to 1 at `k = total`.
pub fn tau_schedule(k: usize, total: usize, tau_base: f64) -> Result<f64> {
    if k > total {
        return Err(Error::Invalid(format!("step {k} beyond {total}")));
    }
    if k == total {
        return Ok(1.0);
    }
    let c = (PI * k as f64 / total as f64).cos();
    Ok(1.0 - (1.0 - tau_base) * (c + 1.0) / 2.0)
}

/// Linear warm-up over `warmup` steps then cosine decay to zero at `total`.
pub fn lr_schedule(t: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if t < warmup {
        return base * t as f64 / warmup as f64;
    }
    if t >= total {
        return 0.0;
    }
    let progress = (t - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Base learning rate 0.2 per 256 samples.
pub fn scaled_base_lr(batch: usize) -> f64 {
    0.2 * batch as f64 / 256.0
}
