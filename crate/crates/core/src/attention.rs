//! Channel attention gates.
//!
//! [`CsaBlock`] derives its channel descriptor from the spatial
//! autocorrelation between channels: spatial means are standardised, local
//! Moran's I is computed under distance-based unit-sum weights, and the
//! re-standardised indicators `q` go through a bottleneck MLP
//! `p = sigmoid(U relu(D q))`. [`SeBlock`] feeds the raw spatial means
//! through the same MLP shape, which makes the two directly comparable.
//!
//! Both gates are applied by channel-wise rescaling, `F' = p ⊙ F`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{CsaError, Result};
use crate::spatial::{DEFAULT_EPS_DIST, DEFAULT_EPS_SIGMA};
use crate::tensor::{broadcast_mul_channels, channel_means, Tensor};

pub const DEFAULT_REDUCTION: usize = 16;
/// Smallest bottleneck width, so narrow layers keep a usable hidden layer.
pub const MIN_HIDDEN: usize = 4;

pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction.max(1)).max(MIN_HIDDEN)
}

/// Two-layer bottleneck `C → h → C` with biases.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMlp {
    pub down_weight: Tensor,
    pub down_bias: Tensor,
    pub up_weight: Tensor,
    pub up_bias: Tensor,
}

/// Graph handles for a bound [`GateMlp`].
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub down_weight: Var,
    pub down_bias: Var,
    pub up_weight: Var,
    pub up_bias: Var,
}

impl GateMlp {
    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let h = hidden_width(channels, reduction);
        let uniform = |n: usize, fan_in: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        GateMlp {
            down_weight: Tensor::from_parts(vec![h, channels], uniform(h * channels, channels, rng)),
            down_bias: Tensor::from_parts(vec![h], uniform(h, channels, rng)),
            up_weight: Tensor::from_parts(vec![channels, h], uniform(channels * h, h, rng)),
            up_bias: Tensor::from_parts(vec![channels], uniform(channels, h, rng)),
        }
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let h = hidden_width(channels, reduction);
        GateMlp {
            down_weight: Tensor::zeros(vec![h, channels]),
            down_bias: Tensor::zeros(vec![h]),
            up_weight: Tensor::zeros(vec![channels, h]),
            up_bias: Tensor::zeros(vec![channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.up_bias.len()
    }

    pub fn hidden(&self) -> usize {
        self.down_bias.len()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.down_weight, &self.down_bias, &self.up_weight, &self.up_bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.down_weight,
            &mut self.down_bias,
            &mut self.up_weight,
            &mut self.up_bias,
        ]
    }

    /// Adds the MLP tensors to `g` as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> GateVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        GateVars {
            down_weight: leaf(&self.down_weight),
            down_bias: leaf(&self.down_bias),
            up_weight: leaf(&self.up_weight),
            up_bias: leaf(&self.up_bias),
        }
    }
}

/// `sigmoid(U relu(D descriptor))`.
pub fn gate_forward(g: &mut Graph, vars: &GateVars, descriptor: Var) -> Result<Var> {
    let hidden = g.linear(descriptor, vars.down_weight, Some(vars.down_bias))?;
    let hidden = g.relu(hidden);
    let logits = g.linear(hidden, vars.up_weight, Some(vars.up_bias))?;
    Ok(g.sigmoid(logits))
}

fn check_channels(f: &Tensor, channels: usize) -> Result<()> {
    if f.rank() != 3 || f.dim(0) != channels {
        return Err(CsaError::shape("attention input", f.shape(), &[channels]));
    }
    Ok(())
}

/// Spatial mean of every channel of a C×H×W map.
pub fn channel_attribute(f: &Tensor) -> Result<Tensor> {
    if f.rank() != 3 {
        return Err(CsaError::InvalidShape {
            shape: f.shape().to_vec(),
            reason: "expected a C×H×W feature map".into(),
        });
    }
    Ok(channel_means(f))
}

/// `p ⊙ F`.
pub fn recalibrate(f: &Tensor, p: &Tensor) -> Result<Tensor> {
    broadcast_mul_channels(f, p)
}

/// Intermediates of one CSA forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CsaTrace {
    /// Spatial means.
    pub x: Tensor,
    /// Standardised spatial means.
    pub z: Tensor,
    /// Local Moran's I per channel.
    pub local: Tensor,
    /// Standardised local Moran's I.
    pub q: Tensor,
    /// Attention weights.
    pub p: Tensor,
    /// Unit-sum spatial weight matrix.
    pub weights: Tensor,
    pub mean_dist: f64,
    pub degenerate: bool,
}

impl CsaTrace {
    /// Writes `channel,x,z,I_l,q,p` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "channel,x,z,I_l,q,p")?;
        for c in 0..self.x.len() {
            writeln!(
                out,
                "{c},{:?},{:?},{:?},{:?},{:?}",
                self.x.data()[c],
                self.z.data()[c],
                self.local.data()[c],
                self.q.data()[c],
                self.p.data()[c]
            )?;
        }
        Ok(())
    }
}

/// Graph nodes of a CSA forward pass.
#[derive(Debug, Clone, Copy)]
pub struct CsaNodes {
    pub x: Var,
    pub z: Var,
    pub local: Var,
    pub q: Var,
    pub p: Var,
    pub weights: Var,
    /// Absent when the weights were supplied as a constant.
    pub contiguity: Option<Var>,
}

impl CsaNodes {
    pub fn trace(&self, g: &Graph) -> CsaTrace {
        let (mean_dist, degenerate) = self
            .contiguity
            .and_then(|v| g.contiguity_stats(v))
            .unwrap_or((f64::NAN, false));
        CsaTrace {
            x: g.value(self.x).clone(),
            z: g.value(self.z).clone(),
            local: g.value(self.local).clone(),
            q: g.value(self.q).clone(),
            p: g.value(self.p).clone(),
            weights: g.value(self.weights).clone(),
            mean_dist,
            degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsaBlock {
    pub channels: usize,
    pub reduction: usize,
    pub eps_sigma: f64,
    pub eps_dist: f64,
    /// Treat the spatial weight matrix as a constant during backward.
    pub stop_grad_weights: bool,
    pub mlp: GateMlp,
}

impl CsaBlock {
    pub fn new(channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(channels, reduction, &mut rng)
    }

    pub fn with_rng(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        validate_dims(channels, reduction)?;
        Ok(Self::from_mlp(reduction, GateMlp::init(channels, reduction, rng)))
    }

    /// Block whose MLP is all zeros, so `p ≡ 0.5`.
    pub fn zeroed(channels: usize, reduction: usize) -> Result<Self> {
        validate_dims(channels, reduction)?;
        Ok(Self::from_mlp(reduction, GateMlp::zeros(channels, reduction)))
    }

    pub fn from_mlp(reduction: usize, mlp: GateMlp) -> Self {
        CsaBlock {
            channels: mlp.channels(),
            reduction,
            eps_sigma: DEFAULT_EPS_SIGMA,
            eps_dist: DEFAULT_EPS_DIST,
            stop_grad_weights: false,
            mlp,
        }
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    /// Descriptor chain and gate on graph node `f` (C×H×W).
    pub fn forward(&self, g: &mut Graph, gate: &GateVars, f: Var) -> Result<CsaNodes> {
        self.forward_inner(g, gate, f, None)
    }

    /// Same as [`CsaBlock::forward`] but with the spatial weight matrix
    /// supplied as a constant instead of derived from `f`.
    pub fn forward_with_weights(&self, g: &mut Graph, gate: &GateVars, f: Var, weights: &Tensor) -> Result<CsaNodes> {
        if weights.shape() != [self.channels, self.channels] {
            return Err(CsaError::shape("csa weights", weights.shape(), &[self.channels, self.channels]));
        }
        self.forward_inner(g, gate, f, Some(weights))
    }

    fn forward_inner(&self, g: &mut Graph, gate: &GateVars, f: Var, fixed: Option<&Tensor>) -> Result<CsaNodes> {
        let fv = g.value(f);
        if fv.rank() != 3 || fv.dim(0) != self.channels {
            return Err(CsaError::shape("csa_forward", fv.shape(), &[self.channels]));
        }
        let x = g.global_avg_pool(f)?;
        let (weights, contiguity) = match fixed {
            Some(w) => (g.constant(w.clone()), None),
            None => {
                let dist = g.channel_distance(f)?;
                let contiguity = g.contiguity(dist, self.eps_dist);
                let weights = g.unitary(contiguity);
                let weights = if self.stop_grad_weights { g.detach(weights) } else { weights };
                (weights, Some(contiguity))
            }
        };
        let z = g.standardize(x, self.eps_sigma);
        let local = g.local_moran(z, weights)?;
        let q = g.standardize(local, self.eps_sigma);
        let p = gate_forward(g, gate, q)?;
        Ok(CsaNodes {
            x,
            z,
            local,
            q,
            p,
            weights,
            contiguity,
        })
    }

    /// Attention weights and the full trace for one feature map.
    pub fn csa_forward(&self, f: &Tensor) -> Result<(Tensor, CsaTrace)> {
        check_channels(f, self.channels)?;
        let mut g = Graph::new();
        let gate = self.mlp.bind(&mut g, false);
        let fv = g.constant(f.clone());
        let nodes = self.forward(&mut g, &gate, fv)?;
        let trace = nodes.trace(&g);
        Ok((trace.p.clone(), trace))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub channels: usize,
    pub reduction: usize,
    pub mlp: GateMlp,
}

impl SeBlock {
    pub fn new(channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(channels, reduction, &mut rng)
    }

    pub fn with_rng(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        validate_dims(channels, reduction)?;
        Ok(SeBlock {
            channels,
            reduction,
            mlp: GateMlp::init(channels, reduction, rng),
        })
    }

    pub fn zeroed(channels: usize, reduction: usize) -> Result<Self> {
        validate_dims(channels, reduction)?;
        Ok(SeBlock {
            channels,
            reduction,
            mlp: GateMlp::zeros(channels, reduction),
        })
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    /// Returns `(x, p)` nodes.
    pub fn forward(&self, g: &mut Graph, gate: &GateVars, f: Var) -> Result<(Var, Var)> {
        let fv = g.value(f);
        if fv.rank() != 3 || fv.dim(0) != self.channels {
            return Err(CsaError::shape("se_forward", fv.shape(), &[self.channels]));
        }
        let x = g.global_avg_pool(f)?;
        let p = gate_forward(g, gate, x)?;
        Ok((x, p))
    }

    pub fn se_forward(&self, f: &Tensor) -> Result<Tensor> {
        check_channels(f, self.channels)?;
        let mut g = Graph::new();
        let gate = self.mlp.bind(&mut g, false);
        let fv = g.constant(f.clone());
        let (_, p) = self.forward(&mut g, &gate, fv)?;
        Ok(g.value(p).clone())
    }
}

fn validate_dims(channels: usize, reduction: usize) -> Result<()> {
    if channels == 0 || reduction == 0 {
        return Err(CsaError::InvalidConfig(format!(
            "channels ({channels}) and reduction ({reduction}) must be positive"
        )));
    }
    Ok(())
}
