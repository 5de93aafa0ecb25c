//! Spatial autocorrelation between the channels of a feature map.
//!
//! Each channel `f_i` of a C×H×W map is treated as an observation located at
//! the point `f_i ∈ R^{H·W}`, attributed with its spatial mean `x_i`. The
//! contiguity between two channels is a negative exponential of their L2
//! distance scaled by the mean off-diagonal distance:
//!
//! ```text
//! v_ij = exp(-l_ij / l̄)   (i ≠ j),   v_ii = 0
//! w_ij = v_ij / Σ v
//! ```
//!
//! With unit-sum weights and population-standardised attributes `z`, the
//! local Moran's I of every channel reduces to the diagonal of `zᵗ z w`,
//! i.e. `I_i = z_i Σ_j w_ij z_j`. The local indicators are tiny for large C,
//! so they are re-standardised into the descriptor `q` before use.
//!
//! [`local_moran_direct`] keeps the textbook ratio form with explicit loops
//! and no simplification; it exists to cross-check [`local_moran_matrix`].

use crate::error::{CsaError, Result};
use crate::tensor::{channel_means, mean_std, pairwise_sq_dist, Tensor};

/// Floor on the mean inter-channel distance; below it every channel is
/// considered identical and contiguity falls back to uniform.
pub const DEFAULT_EPS_DIST: f64 = 1e-12;
/// Floor on a standard deviation; below it a standardised vector is zero.
pub const DEFAULT_EPS_SIGMA: f64 = 1e-8;
/// Added under the square root when differentiating `l = √s`.
pub const DIST_GRAD_GUARD: f64 = 1e-20;

const SYMMETRY_TOL: f64 = 1e-12;

/// Contiguity `v` and unit-sum weights `w` between the channels of one map.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    pub contiguity: Tensor,
    pub weights: Tensor,
    /// Mean L2 distance over the ordered off-diagonal channel pairs.
    pub mean_dist: f64,
    /// Set when fewer than two channels exist or the mean distance fell
    /// below the floor, in which case contiguity is uniform off-diagonal.
    pub degenerate: bool,
}

impl SpatialWeights {
    pub fn channels(&self) -> usize {
        self.weights.dim(0)
    }
}

/// Local and global Moran's I of one feature map plus the standardised
/// descriptor derived from the local values.
#[derive(Debug, Clone, PartialEq)]
pub struct MoranResult {
    pub local: Tensor,
    pub global: f64,
    pub descriptor: Tensor,
    pub sigma_floor_hit: bool,
}

/// Pairwise L2 distances between flattened channels.
pub fn channel_distances(f: &Tensor) -> Tensor {
    pairwise_sq_dist(f).map(f64::sqrt)
}

/// Negative-exponential contiguity from a C×C distance matrix. Returns
/// `(v, l̄, degenerate)`.
pub fn contiguity(dist: &Tensor, eps_dist: f64) -> (Tensor, f64, bool) {
    let c = dist.dim(0);
    if c < 2 {
        return (Tensor::zeros(vec![c, c]), 0.0, true);
    }
    let mean = off_diagonal_mean(dist);
    let degenerate = mean < eps_dist;
    let mut v = Tensor::zeros(vec![c, c]);
    let d = dist.data();
    let out = v.data_mut();
    for i in 0..c {
        for j in 0..c {
            if i != j {
                out[i * c + j] = if degenerate {
                    1.0
                } else {
                    (-d[i * c + j] / mean).exp()
                };
            }
        }
    }
    (v, mean, degenerate)
}

pub(crate) fn off_diagonal_mean(m: &Tensor) -> f64 {
    let c = m.dim(0);
    let d = m.data();
    let mut total = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                total += d[i * c + j];
            }
        }
    }
    total / (c * (c - 1)) as f64
}

/// Scales a non-negative matrix to unit total. An all-zero matrix (C = 1)
/// is returned unchanged.
pub fn unitary(v: &Tensor) -> Tensor {
    let total = v.sum();
    if total > 0.0 {
        v.scale(1.0 / total)
    } else {
        v.clone()
    }
}

/// Builds contiguity and unit-sum weights between the channels of `f`
/// (C×H×W, or any C×... layout; trailing extents are flattened).
pub fn build_weights(f: &Tensor, eps_dist: f64) -> Result<SpatialWeights> {
    if f.is_empty() {
        return Err(CsaError::EmptyInput("build_weights"));
    }
    let c = f.dim(0);
    if c == 1 {
        return Ok(SpatialWeights {
            contiguity: Tensor::zeros(vec![1, 1]),
            weights: Tensor::zeros(vec![1, 1]),
            mean_dist: 0.0,
            degenerate: true,
        });
    }
    let dist = channel_distances(f);
    let (contiguity, mean_dist, degenerate) = contiguity(&dist, eps_dist);
    let weights = unitary(&contiguity);
    Ok(SpatialWeights {
        contiguity,
        weights,
        mean_dist,
        degenerate,
    })
}

/// Population standardisation. Returns the zero vector and `true` when the
/// standard deviation is below `eps_sigma`.
pub fn standardize(x: &Tensor, eps_sigma: f64) -> (Tensor, bool) {
    let (mean, std) = mean_std(x.data(), true);
    if std < eps_sigma {
        return (Tensor::zeros(x.shape().to_vec()), true);
    }
    (x.map(|v| (v - mean) / std), false)
}

/// `diag(zᵗ z w)`: `I_i = z_i Σ_j z_j w_ji`.
pub fn local_moran_matrix(z: &Tensor, w: &Tensor) -> Result<Tensor> {
    let c = z.len();
    if w.rank() != 2 || w.dim(0) != c || w.dim(1) != c {
        return Err(CsaError::shape("local_moran_matrix", z.shape(), w.shape()));
    }
    if !is_symmetric(w) {
        return Err(CsaError::Asymmetric("local_moran_matrix"));
    }
    Ok(local_moran_unchecked(z, w))
}

/// `diag(zᵗ z w)` without the shape and symmetry checks.
pub(crate) fn local_moran_unchecked(z: &Tensor, w: &Tensor) -> Tensor {
    let c = z.len();
    let zd = z.data();
    let wd = w.data();
    let local = (0..c)
        .map(|i| {
            let lag: f64 = (0..c).map(|j| zd[j] * wd[j * c + i]).sum();
            zd[i] * lag
        })
        .collect();
    Tensor::vector(local)
}

fn is_symmetric(w: &Tensor) -> bool {
    let c = w.dim(0);
    let d = w.data();
    (0..c).all(|i| {
        (i + 1..c).all(|j| {
            let (a, b) = (d[i * c + j], d[j * c + i]);
            (a - b).abs() <= SYMMETRY_TOL * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
        })
    })
}

/// Local Moran's I in its original ratio form:
///
/// ```text
/// I_i = C (x_i - μ) Σ_j v_ij (x_j - μ) / (Σ_ij v_ij · Σ_i (x_i - μ)²)
/// ```
pub fn local_moran_direct(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let c = x.len();
    if c < 2 {
        return Err(CsaError::EmptyInput("local_moran_direct"));
    }
    if v.rank() != 2 || v.dim(0) != c || v.dim(1) != c {
        return Err(CsaError::shape("local_moran_direct", x.shape(), v.shape()));
    }
    let xs = x.data();
    let vs = v.data();

    let mut mu = 0.0;
    for &xi in xs {
        mu += xi;
    }
    mu /= c as f64;

    let mut sum_sq = 0.0;
    for &xi in xs {
        sum_sq += (xi - mu) * (xi - mu);
    }
    if sum_sq <= 0.0 {
        return Err(CsaError::Degenerate("local_moran_direct"));
    }

    let mut sum_v = 0.0;
    for i in 0..c {
        for j in 0..c {
            sum_v += vs[i * c + j];
        }
    }

    let mut out = vec![0.0; c];
    for i in 0..c {
        let mut lag = 0.0;
        for j in 0..c {
            lag += vs[i * c + j] * (xs[j] - mu);
        }
        out[i] = (c as f64) * (xs[i] - mu) * lag / (sum_v * sum_sq);
    }
    Ok(Tensor::vector(out))
}

/// Global Moran's I under unit-sum weights: the sum of the local values.
pub fn global_moran(local: &Tensor) -> f64 {
    local.sum()
}

/// Re-standardised local indicators. Zero vector and `true` when their
/// spread is below `eps_sigma`.
pub fn csa_descriptor(local: &Tensor, eps_sigma: f64) -> (Tensor, bool) {
    standardize(local, eps_sigma)
}

/// Runs the whole chain on one feature map: spatial means, weights,
/// standardisation, local and global Moran's I, descriptor.
pub fn moran(f: &Tensor, eps_dist: f64, eps_sigma: f64) -> Result<MoranResult> {
    let weights = build_weights(f, eps_dist)?;
    let (z, _) = standardize(&channel_means(f), eps_sigma);
    let local = local_moran_matrix(&z, &weights.weights)?;
    let (descriptor, sigma_floor_hit) = csa_descriptor(&local, eps_sigma);
    Ok(MoranResult {
        global: global_moran(&local),
        local,
        descriptor,
        sigma_floor_hit,
    })
}
