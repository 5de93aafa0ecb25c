//! Central finite-difference verification of reverse-mode gradients.

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{CsaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Probe step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates with a
    /// vanishing gradient are judged on absolute error.
    pub scale_floor: f64,
    /// Relative gap between the one-sided differences above which a failing
    /// coordinate is attributed to a kink and excluded.
    pub kink_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-6,
            scale_floor: 1e-2,
            kink_tol: 1e-3,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckConfig {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Coordinates skipped because the function is not differentiable
    /// within `h` of the probe point.
    pub excluded: Vec<usize>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the reverse-mode gradient of the scalar built by `f` at `point`
/// against central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, scale_floor)`.
pub fn finite_diff_gradcheck<F>(f: F, point: &Tensor, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if cfg.h.is_nan() || cfg.h <= 0.0 {
        return Err(CsaError::InvalidConfig(format!("gradcheck step must be > 0, got {}", cfg.h)));
    }
    let eval = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).sum())
    };

    let mut g = Graph::new();
    let x = g.param(point.clone());
    let out = f(&mut g, x)?;
    if g.value(out).len() != 1 {
        return Err(CsaError::InvalidShape {
            shape: g.value(out).shape().to_vec(),
            reason: "gradcheck function must return a scalar".into(),
        });
    }
    let f0 = g.value(out).item();
    if !f0.is_finite() {
        return Err(CsaError::NonFiniteProbe { index: usize::MAX });
    }
    let grads = g.backward(out)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        excluded: Vec::new(),
        checked: 0,
        tol: cfg.tol,
        passed: true,
    };
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + cfg.h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - cfg.h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CsaError::NonFiniteProbe { index: i });
        }

        let numeric = (fp - fm) / (2.0 * cfg.h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.scale_floor);
        if rel > cfg.tol {
            let forward = (fp - f0) / cfg.h;
            let backward = (f0 - fm) / cfg.h;
            let gap = (forward - backward).abs() / forward.abs().max(backward.abs()).max(1.0);
            if gap > cfg.kink_tol {
                report.excluded.push(i);
                continue;
            }
        }
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_error <= cfg.tol;
    Ok(report)
}
