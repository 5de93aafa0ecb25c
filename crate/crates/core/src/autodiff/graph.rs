use crate::autodiff::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::error::{CsaError, Result};
use crate::spatial::{self, DIST_GRAD_GUARD};
use crate::tensor::{broadcast_mul_channels, channel_means, mean_std, pairwise_sq_dist, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    ScaleChannels {
        features: Var,
        gate: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    ChannelDistance {
        features: Var,
        sq: Tensor,
    },
    Contiguity {
        dist: Var,
        mean: f64,
        degenerate: bool,
    },
    Unitary {
        contiguity: Var,
        total: f64,
    },
    Standardize {
        input: Var,
        std: f64,
        floor_hit: bool,
    },
    LocalMoran {
        z: Var,
        weights: Var,
    },
    Reshape(Var),
    Sum(Var),
    Dot {
        input: Var,
        coeffs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations. Nodes are stored in creation
/// order, which is a topological order, so the graph is acyclic by
/// construction and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `var`'s value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// `(mean distance, degenerate)` recorded by a [`Graph::contiguity`] node.
    pub fn contiguity_stats(&self, var: Var) -> Option<(f64, bool)> {
        match self.nodes[var.0].op {
            Op::Contiguity { mean, degenerate, .. } => Some((mean, degenerate)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        if x.rank() != 3 || k.rank() != 4 || k.dim(1) != x.dim(0) {
            return Err(CsaError::shape("conv2d", x.shape(), k.shape()));
        }
        let out_h = ConvGeometry::output_extent(x.dim(1), k.dim(2), stride, pad);
        let out_w = ConvGeometry::output_extent(x.dim(2), k.dim(3), stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(CsaError::shape("conv2d (kernel larger than padded input)", x.shape(), k.shape()));
        };
        if let Some(b) = bias {
            let b = self.value(b);
            if b.shape() != [k.dim(0)] {
                return Err(CsaError::shape("conv2d bias", k.shape(), b.shape()));
            }
        }
        let geometry = ConvGeometry {
            in_channels: x.dim(0),
            out_channels: k.dim(0),
            in_h: x.dim(1),
            in_w: x.dim(2),
            kernel_h: k.dim(2),
            kernel_w: k.dim(3),
            stride,
            pad,
            out_h,
            out_w,
        };
        let value = conv2d_forward(x, k, bias.map(|b| self.value(b)), &geometry);
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        let rg = self.any_grad(&parents);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            rg,
        ))
    }

    /// `weight · input + bias` for a vector input.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.rank() != 1 || w.rank() != 2 || w.dim(1) != x.len() {
            return Err(CsaError::shape("linear", w.shape(), x.shape()));
        }
        let (m, n) = (w.dim(0), w.dim(1));
        let mut out = match bias {
            Some(b) => {
                let b = self.value(b);
                if b.shape() != [m] {
                    return Err(CsaError::shape("linear bias", w.shape(), b.shape()));
                }
                b.data().to_vec()
            }
            None => vec![0.0; m],
        };
        let (wd, xd) = (w.data(), x.data());
        for (i, o) in out.iter_mut().enumerate() {
            *o += wd[i * n..(i + 1) * n].iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
        }
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let rg = self.any_grad(&parents);
        Ok(self.push(Tensor::vector(out), Op::Linear { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(stable_sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// C×H×W → C spatial means.
    pub fn global_avg_pool(&mut self, f: Var) -> Result<Var> {
        let t = self.value(f);
        if t.rank() < 2 {
            return Err(CsaError::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "global_avg_pool expects C×H×W".into(),
            });
        }
        let value = channel_means(t);
        let rg = self.any_grad(&[f]);
        Ok(self.push(value, Op::GlobalAvgPool(f), rg))
    }

    /// `out[c, ..] = gate[c] * features[c, ..]`.
    pub fn scale_channels(&mut self, features: Var, gate: Var) -> Result<Var> {
        let value = broadcast_mul_channels(self.value(features), self.value(gate))?;
        let rg = self.any_grad(&[features, gate]);
        Ok(self.push(value, Op::ScaleChannels { features, gate }, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 1 {
            return Err(CsaError::InvalidShape {
                shape: z.shape().to_vec(),
                reason: "logits must be a vector".into(),
            });
        }
        if label >= z.len() {
            return Err(CsaError::LabelOutOfRange {
                label,
                classes: z.len(),
            });
        }
        let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.data().iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() + max - z.data()[label];
        let probs = exps.iter().map(|e| e / total).collect();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, label, probs },
            rg,
        ))
    }

    /// C×C matrix of L2 distances between flattened channels of `features`.
    pub fn channel_distance(&mut self, features: Var) -> Result<Var> {
        let f = self.value(features);
        if f.rank() < 2 {
            return Err(CsaError::InvalidShape {
                shape: f.shape().to_vec(),
                reason: "channel_distance expects C×...".into(),
            });
        }
        let sq = pairwise_sq_dist(f);
        let value = sq.map(f64::sqrt);
        let rg = self.any_grad(&[features]);
        Ok(self.push(value, Op::ChannelDistance { features, sq }, rg))
    }

    /// Negative-exponential contiguity from a distance matrix.
    pub fn contiguity(&mut self, dist: Var, eps_dist: f64) -> Var {
        let (value, mean, degenerate) = spatial::contiguity(self.value(dist), eps_dist);
        let rg = self.any_grad(&[dist]);
        self.push(value, Op::Contiguity { dist, mean, degenerate }, rg)
    }

    /// Scales a matrix to unit total.
    pub fn unitary(&mut self, contiguity: Var) -> Var {
        let v = self.value(contiguity);
        let total = v.sum();
        let value = spatial::unitary(v);
        let rg = self.any_grad(&[contiguity]);
        self.push(value, Op::Unitary { contiguity, total }, rg)
    }

    /// Population standardisation with a σ floor.
    pub fn standardize(&mut self, input: Var, eps_sigma: f64) -> Var {
        let x = self.value(input);
        let (_, std) = mean_std(x.data(), true);
        let (value, floor_hit) = spatial::standardize(x, eps_sigma);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Standardize { input, std, floor_hit }, rg)
    }

    /// `diag(zᵗ z w)`.
    pub fn local_moran(&mut self, z: Var, weights: Var) -> Result<Var> {
        let (zv, wv) = (self.value(z), self.value(weights));
        let c = zv.len();
        if zv.rank() != 1 || wv.shape() != [c, c] {
            return Err(CsaError::shape("local_moran", zv.shape(), wv.shape()));
        }
        let value = spatial::local_moran_unchecked(zv, wv);
        let rg = self.any_grad(&[z, weights]);
        Ok(self.push(value, Op::LocalMoran { z, weights }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// `Σ coeffs ⊙ x` with constant coefficients.
    pub fn dot(&mut self, input: Var, coeffs: Tensor) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != coeffs.shape() {
            return Err(CsaError::shape("dot", x.shape(), coeffs.shape()));
        }
        let value = Tensor::scalar(x.data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum());
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Dot { input, coeffs }, rg))
    }

    /// Reverse sweep from a single-element root. Every reachable node that
    /// requires a gradient gets exactly one accumulated entry.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(CsaError::InvalidShape {
                shape: root_value.shape().to_vec(),
                reason: "backward needs a scalar root".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(root_value.shape().to_vec()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (parent, contrib) in self.node_vjp(node, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn node_vjp(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let (dx, dk, db) = conv2d_backward(self.value(*input), self.value(*kernel), g, geometry);
                let mut out = vec![(*input, dx), (*kernel, dk)];
                if let Some(b) = bias {
                    out.push((*b, db));
                }
                out
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (m, n) = (w.dim(0), w.dim(1));
                let mut dx = vec![0.0; n];
                let mut dw = vec![0.0; m * n];
                for i in 0..m {
                    let wrow = &w.data()[i * n..(i + 1) * n];
                    for j in 0..n {
                        dx[j] += wrow[j] * gd[i];
                        dw[i * n + j] = gd[i] * x.data()[j];
                    }
                }
                let mut out = vec![
                    (*input, Tensor::vector(dx)),
                    (*weight, Tensor::from_parts(vec![m, n], dw)),
                ];
                if let Some(b) = bias {
                    out.push((*b, g.clone()));
                }
                out
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), d))]
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&s, &gi)| gi * s * (1.0 - s))
                    .collect();
                vec![(*x, Tensor::from_parts(node.value.shape().to_vec(), d))]
            }
            Op::GlobalAvgPool(f) => {
                let fv = self.value(*f);
                let c = fv.dim(0);
                let plane = fv.len() / c;
                let mut d = Vec::with_capacity(fv.len());
                for &gc in gd {
                    d.extend(std::iter::repeat_n(gc / plane as f64, plane));
                }
                vec![(*f, Tensor::from_parts(fv.shape().to_vec(), d))]
            }
            Op::ScaleChannels { features, gate } => {
                let f = self.value(*features);
                let p = self.value(*gate);
                let plane = f.len() / f.dim(0);
                let mut df = Vec::with_capacity(f.len());
                let mut dp = Vec::with_capacity(p.len());
                for (c, &pc) in p.data().iter().enumerate() {
                    let fs = &f.data()[c * plane..(c + 1) * plane];
                    let gs = &gd[c * plane..(c + 1) * plane];
                    df.extend(gs.iter().map(|gi| gi * pc));
                    dp.push(fs.iter().zip(gs).map(|(a, b)| a * b).sum());
                }
                vec![
                    (*features, Tensor::from_parts(f.shape().to_vec(), df)),
                    (*gate, Tensor::vector(dp)),
                ]
            }
            Op::SoftmaxCrossEntropy { logits, label, probs } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * gd[0]).collect();
                d[*label] -= gd[0];
                vec![(*logits, Tensor::vector(d))]
            }
            Op::ChannelDistance { features, sq } => {
                let f = self.value(*features);
                let c = f.dim(0);
                let dlen = f.len() / c;
                let fd = f.data();
                let mut df = vec![0.0; f.len()];
                for i in 0..c {
                    for j in (i + 1)..c {
                        let coef = (gd[i * c + j] + gd[j * c + i]) / (sq.data()[i * c + j] + DIST_GRAD_GUARD).sqrt();
                        if coef == 0.0 {
                            continue;
                        }
                        for k in 0..dlen {
                            let diff = coef * (fd[i * dlen + k] - fd[j * dlen + k]);
                            df[i * dlen + k] += diff;
                            df[j * dlen + k] -= diff;
                        }
                    }
                }
                vec![(*features, Tensor::from_parts(f.shape().to_vec(), df))]
            }
            Op::Contiguity { dist, mean, degenerate } => {
                let l = self.value(*dist);
                let c = l.dim(0);
                if *degenerate {
                    return vec![(*dist, Tensor::zeros(vec![c, c]))];
                }
                let v = node.value.data();
                let ld = l.data();
                let pairs = (c * (c - 1)) as f64;
                let mut shared = 0.0;
                for i in 0..c {
                    for j in 0..c {
                        if i != j {
                            shared += gd[i * c + j] * v[i * c + j] * ld[i * c + j];
                        }
                    }
                }
                shared /= mean * mean * pairs;
                let mut d = vec![0.0; c * c];
                for i in 0..c {
                    for j in 0..c {
                        if i != j {
                            d[i * c + j] = -gd[i * c + j] * v[i * c + j] / mean + shared;
                        }
                    }
                }
                vec![(*dist, Tensor::from_parts(vec![c, c], d))]
            }
            Op::Unitary { contiguity, total } => {
                if *total <= 0.0 {
                    return vec![(*contiguity, g.clone())];
                }
                let w = node.value.data();
                let inner: f64 = gd.iter().zip(w).map(|(a, b)| a * b).sum();
                vec![(*contiguity, g.map(|gi| (gi - inner) / total))]
            }
            Op::Standardize { input, std, floor_hit } => {
                let n = gd.len();
                if *floor_hit {
                    return vec![(*input, Tensor::zeros(vec![n]))];
                }
                let z = node.value.data();
                let g_mean = gd.iter().sum::<f64>() / n as f64;
                let gz_mean = gd.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                let d = gd
                    .iter()
                    .zip(z)
                    .map(|(gi, zi)| (gi - g_mean - zi * gz_mean) / std)
                    .collect();
                vec![(*input, Tensor::from_parts(node.value.shape().to_vec(), d))]
            }
            Op::LocalMoran { z, weights } => {
                // I_i = z_i Σ_j z_j w_ji
                let zv = self.value(*z).data();
                let w = self.value(*weights).data();
                let c = zv.len();
                let mut dz = vec![0.0; c];
                let mut dw = vec![0.0; c * c];
                for i in 0..c {
                    let lag: f64 = (0..c).map(|j| zv[j] * w[j * c + i]).sum();
                    dz[i] += gd[i] * lag;
                    for j in 0..c {
                        dz[j] += gd[i] * zv[i] * w[j * c + i];
                        dw[j * c + i] = gd[i] * zv[i] * zv[j];
                    }
                }
                vec![
                    (*z, Tensor::vector(dz)),
                    (*weights, Tensor::from_parts(vec![c, c], dw)),
                ]
            }
            Op::Reshape(x) => vec![(*x, Tensor::from_parts(self.value(*x).shape().to_vec(), gd.to_vec()))],
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape().to_vec(), gd[0]))],
            Op::Dot { input, coeffs } => vec![(*input, coeffs.scale(gd[0]))],
        }
    }
}

/// `1 / (1 + e^{-x})` evaluated without overflow for large |x|.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
