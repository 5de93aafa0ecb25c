use crate::error::{CsaError, Result};
use crate::tensor::Tensor;

/// SGD with optional Nesterov momentum and L2 weight decay, in the form most
/// frameworks use:
///
/// ```text
/// g   = grad + weight_decay * param
/// buf = momentum * buf + g
/// d   = g + momentum * buf   (nesterov)   |   buf   (plain momentum)
/// param -= lr * d
/// ```
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    buffers: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, nesterov: bool) -> Result<Self> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(CsaError::InvalidConfig(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(CsaError::InvalidConfig(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if weight_decay.is_nan() || weight_decay < 0.0 {
            return Err(CsaError::InvalidConfig(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            nesterov,
            buffers: Vec::new(),
        })
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn step<'a, I>(&mut self, params: I, grads: &[Tensor]) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(CsaError::shape("sgd_step", &[params.len()], &[grads.len()]));
        }
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        }
        if self.buffers.len() != params.len() {
            return Err(CsaError::shape("sgd_step buffers", &[self.buffers.len()], &[params.len()]));
        }
        for ((param, grad), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            if param.shape() != grad.shape() || param.shape() != buf.shape() {
                return Err(CsaError::shape("sgd_step", param.shape(), grad.shape()));
            }
            let (m, wd, lr) = (self.momentum, self.weight_decay, self.lr);
            for ((p, &gr), b) in param.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
                let g = gr + wd * *p;
                *b = m * *b + g;
                let d = if self.nesterov { g + m * *b } else { *b };
                *p -= lr * d;
            }
        }
        Ok(())
    }
}
