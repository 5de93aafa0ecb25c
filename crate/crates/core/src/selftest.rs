//! Property suites shared by the `selftest` and `gradcheck` commands and
//! the acceptance tests. Every suite is seeded and returns a
//! [`SuiteResult`] instead of panicking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{hidden_width, CsaBlock, GateMlp, GateVars, SeBlock, DEFAULT_REDUCTION};
use crate::autodiff::{finite_diff_gradcheck, GradCheckConfig, GradCheckReport, Graph, Var};
use crate::error::Result;
use crate::spatial::{
    build_weights, local_moran_direct, local_moran_matrix, moran, standardize, DEFAULT_EPS_DIST, DEFAULT_EPS_SIGMA,
};
use crate::tensor::Tensor;

/// Tolerance for layers without kinks.
pub const SMOOTH_TOL: f64 = 1e-6;
/// Tolerance for compositions that contain relu.
pub const KINKED_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the suite's metric.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl SuiteResult {
    fn below(name: impl Into<String>, value: f64, threshold: f64, detail: String) -> Self {
        SuiteResult {
            name: name.into(),
            passed: value < threshold,
            value,
            threshold,
            detail,
        }
    }

    fn failed(name: impl Into<String>, threshold: f64, detail: String) -> Self {
        SuiteResult {
            name: name.into(),
            passed: false,
            value: f64::NAN,
            threshold,
            detail,
        }
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape and data agree")
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

/// Channel `k` of the result is channel `perm[k]` of `f`.
pub fn permute_channels(f: &Tensor, perm: &[usize]) -> Tensor {
    let plane = f.len() / f.dim(0);
    let mut data = Vec::with_capacity(f.len());
    for &src in perm {
        data.extend_from_slice(&f.data()[src * plane..(src + 1) * plane]);
    }
    Tensor::new(f.shape().to_vec(), data).expect("same shape")
}

/// The gate MLP with its channel-indexed axes relabelled by `perm`, so that
/// it computes the same function on permuted descriptors.
pub fn permute_mlp(mlp: &GateMlp, perm: &[usize]) -> GateMlp {
    let (c, h) = (mlp.channels(), mlp.hidden());
    let mut down = Tensor::zeros(vec![h, c]);
    let mut up = Tensor::zeros(vec![c, h]);
    let mut up_bias = Tensor::zeros(vec![c]);
    for (k, &src) in perm.iter().enumerate() {
        for j in 0..h {
            down.set(&[j, k], mlp.down_weight.at(&[j, src]));
            up.set(&[k, j], mlp.up_weight.at(&[src, j]));
        }
        up_bias.set(&[k], mlp.up_bias.at(&[src]));
    }
    GateMlp {
        down_weight: down,
        down_bias: mlp.down_bias.clone(),
        up_weight: up,
        up_bias,
    }
}

fn max_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Direct (double-loop) local Moran's I against the matrix form on random
/// `C×1×d` feature maps with `C ∈ [2, 64]`, `d ∈ [4, 32]`. The error of an
/// instance is `max|direct - matrix| / max|direct|`.
pub fn moran_equivalence(instances: usize, seed: u64) -> SuiteResult {
    const NAME: &str = "moran direct vs matrix form";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let c = rng.gen_range(2..=64);
        let d = rng.gen_range(4..=32);
        let f = random(&[c, 1, d], -2.0, 2.0, &mut rng);
        let run = || -> Result<f64> {
            let sw = build_weights(&f, DEFAULT_EPS_DIST)?;
            let x = crate::tensor::channel_means(&f);
            let direct = local_moran_direct(&x, &sw.contiguity)?;
            let (z, _) = standardize(&x, DEFAULT_EPS_SIGMA);
            let matrix = local_moran_matrix(&z, &sw.weights)?;
            Ok(direct.max_abs_diff(&matrix) / max_abs(&direct).max(f64::MIN_POSITIVE))
        };
        match run() {
            Ok(e) if e.is_finite() => worst = worst.max(e),
            Ok(e) => return SuiteResult::failed(NAME, 1e-10, format!("instance {i}: error {e}")),
            Err(e) => return SuiteResult::failed(NAME, 1e-10, format!("instance {i}: {e}")),
        }
    }
    SuiteResult::below(NAME, worst, 1e-10, format!("{instances} instances"))
}

fn random_feature_map(rng: &mut ChaCha8Rng) -> Tensor {
    let c = rng.gen_range(4..=32);
    let h = rng.gen_range(3..=8);
    let w = rng.gen_range(3..=8);
    random(&[c, h, w], -1.0, 1.0, rng)
}

/// Non-negative map, as produced by the relu in front of every attention
/// block.
fn random_activation_map(rng: &mut ChaCha8Rng) -> Tensor {
    random_feature_map(rng).map(f64::abs)
}

/// `max |p(aF + c) - p(F)|` over `a ∈ {0.5, 2, 10}`, `c ∈ {-1, 0, 3}`.
pub fn csa_affine_invariance(instances: usize, seed: u64) -> SuiteResult {
    const NAME: &str = "csa attention affine invariance";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let f = random_feature_map(&mut rng);
        let run = || -> Result<f64> {
            let block = CsaBlock::new(f.dim(0), DEFAULT_REDUCTION, seed.wrapping_add(i as u64))?;
            let (p, _) = block.csa_forward(&f)?;
            let mut e = 0.0f64;
            for a in [0.5, 2.0, 10.0] {
                for c in [-1.0, 0.0, 3.0] {
                    let (pa, _) = block.csa_forward(&f.map(|v| a * v + c))?;
                    e = e.max(pa.max_abs_diff(&p));
                }
            }
            Ok(e)
        };
        match run() {
            Ok(e) => worst = worst.max(e),
            Err(e) => return SuiteResult::failed(NAME, 1e-8, format!("instance {i}: {e}")),
        }
    }
    SuiteResult::below(NAME, worst, 1e-8, format!("{instances} maps × 9 affine maps"))
}

/// Fraction of instances for which SE attention moves by more than 1e-3
/// when a non-negative input is doubled. Passes at 95% or more.
pub fn se_scale_sensitivity(instances: usize, seed: u64) -> SuiteResult {
    const NAME: &str = "se attention depends on input scale";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut moved = 0usize;
    for i in 0..instances {
        let f = random_activation_map(&mut rng);
        let run = || -> Result<f64> {
            let block = SeBlock::new(f.dim(0), DEFAULT_REDUCTION, seed.wrapping_add(i as u64))?;
            Ok(block.se_forward(&f.scale(2.0))?.max_abs_diff(&block.se_forward(&f)?))
        };
        match run() {
            Ok(d) if d > 1e-3 => moved += 1,
            Ok(_) => {}
            Err(e) => return SuiteResult::failed(NAME, 0.95, format!("instance {i}: {e}")),
        }
    }
    let frac = moved as f64 / instances.max(1) as f64;
    SuiteResult {
        name: NAME.into(),
        passed: frac >= 0.95,
        value: frac,
        threshold: 0.95,
        detail: format!("{moved}/{instances} instances with max|p(2F) - p(F)| > 1e-3"),
    }
}

/// `max |π·q(F) - q(πF)|` and `max |π·p(F) - p(πF)|`, with the gate MLP
/// relabelled by `π` for the permuted input.
pub fn permutation_equivariance(instances: usize, seed: u64) -> SuiteResult {
    const NAME: &str = "permutation equivariance of q and p";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let f = random_feature_map(&mut rng);
        let perm = shuffled(f.dim(0), &mut rng);
        let run = || -> Result<f64> {
            let block = CsaBlock::new(f.dim(0), DEFAULT_REDUCTION, seed.wrapping_add(i as u64))?;
            let permuted = CsaBlock::from_mlp(block.reduction, permute_mlp(&block.mlp, &perm));
            let (p, t) = block.csa_forward(&f)?;
            let (pp, tp) = permuted.csa_forward(&permute_channels(&f, &perm))?;
            let mut e = 0.0f64;
            for (k, &src) in perm.iter().enumerate() {
                e = e.max((tp.q.at(&[k]) - t.q.at(&[src])).abs());
                e = e.max((pp.at(&[k]) - p.at(&[src])).abs());
            }
            Ok(e)
        };
        match run() {
            Ok(e) => worst = worst.max(e),
            Err(e) => return SuiteResult::failed(NAME, 1e-12, format!("instance {i}: {e}")),
        }
    }
    SuiteResult::below(NAME, worst, 1e-12, format!("{instances} (F, π) pairs"))
}

/// Symmetry, zero diagonal, non-negativity and unit sum of `w` on random
/// maps, plus finite fallbacks on constant and repeated-channel inputs.
/// The reported value is the worst violation.
pub fn weight_contract(instances: usize, seed: u64) -> SuiteResult {
    const NAME: &str = "spatial weight matrix contract";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut check = |f: &Tensor, expect_degenerate: bool| -> Result<Option<String>> {
        let sw = build_weights(f, DEFAULT_EPS_DIST)?;
        let w = &sw.weights;
        let c = sw.channels();
        if !w.all_finite() || !sw.contiguity.all_finite() {
            return Ok(Some("non-finite weights".into()));
        }
        if expect_degenerate && !sw.degenerate {
            return Ok(Some("degenerate input not flagged".into()));
        }
        if c > 1 {
            worst = worst.max((w.sum() - 1.0).abs());
        }
        for i in 0..c {
            worst = worst.max(w.at(&[i, i]).abs());
            for j in 0..c {
                worst = worst.max((w.at(&[i, j]) - w.at(&[j, i])).abs());
                worst = worst.max((-w.at(&[i, j])).max(0.0));
            }
        }
        if expect_degenerate && c > 1 {
            let m = moran(f, DEFAULT_EPS_DIST, DEFAULT_EPS_SIGMA)?;
            if !(m.local.all_finite() && m.descriptor.all_finite()) {
                return Ok(Some("non-finite descriptor on degenerate input".into()));
            }
        }
        Ok(None)
    };
    for i in 0..instances {
        let f = random_feature_map(&mut rng);
        match check(&f, false) {
            Ok(None) => {}
            Ok(Some(msg)) => return SuiteResult::failed(NAME, 1e-12, format!("instance {i}: {msg}")),
            Err(e) => return SuiteResult::failed(NAME, 1e-12, format!("instance {i}: {e}")),
        }
    }
    let constant = Tensor::full(vec![6, 4, 4], 0.7);
    let repeated = {
        let row = random(&[1, 3, 5], -1.0, 1.0, &mut rng);
        Tensor::new(vec![5, 3, 5], row.data().repeat(5)).expect("shape")
    };
    let single = Tensor::full(vec![1, 2, 2], 3.0);
    for (label, f) in [("constant", constant), ("repeated", repeated), ("single-channel", single)] {
        match check(&f, true) {
            Ok(None) => {}
            Ok(Some(msg)) => return SuiteResult::failed(NAME, 1e-12, format!("{label}: {msg}")),
            Err(e) => return SuiteResult::failed(NAME, 1e-12, format!("{label}: {e}")),
        }
    }
    SuiteResult::below(NAME, worst, 1e-12, format!("{instances} random maps + 3 degenerate inputs"))
}

/// CSA and SE gates have equal size, `hC + h + Ch + C` with
/// `h = max(⌈C/r⌉, 4)`, for `C ∈ {8, 16, 64, 256}` at `r = 16`.
pub fn parameter_accounting() -> SuiteResult {
    const NAME: &str = "csa/se parameter accounting";
    let mut mismatches = Vec::new();
    for c in [8usize, 16, 64, 256] {
        let r = DEFAULT_REDUCTION;
        let h = hidden_width(c, r);
        let closed = h * c + h + c * h + c;
        match (CsaBlock::new(c, r, 0), SeBlock::new(c, r, 0)) {
            (Ok(csa), Ok(se)) => {
                if csa.param_count() != se.param_count() || csa.param_count() != closed {
                    mismatches.push(format!(
                        "C={c}: csa {} se {} closed form {closed}",
                        csa.param_count(),
                        se.param_count()
                    ));
                }
            }
            _ => mismatches.push(format!("C={c}: construction failed")),
        }
    }
    SuiteResult {
        name: NAME.into(),
        passed: mismatches.is_empty(),
        value: mismatches.len() as f64,
        threshold: 0.0,
        detail: if mismatches.is_empty() {
            "C ∈ {8, 16, 64, 256}, r = 16".into()
        } else {
            mismatches.join("; ")
        },
    }
}

/// Random linear functional of `y`, so upstream gradients are not uniform.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    g.dot(y, random(&shape, -1.0, 1.0, &mut rng))
}

fn grad_result(name: &str, tol: f64, report: Result<GradCheckReport>) -> SuiteResult {
    match report {
        Ok(r) => SuiteResult {
            name: name.into(),
            passed: r.passed && r.excluded.is_empty(),
            value: r.max_rel_error,
            threshold: tol,
            detail: format!("{} coordinates, {} excluded", r.checked, r.excluded.len()),
        },
        Err(e) => SuiteResult::failed(name, tol, e.to_string()),
    }
}

fn check<F>(name: &str, tol: f64, point: &Tensor, f: F) -> SuiteResult
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_result(name, tol, finite_diff_gradcheck(f, point, GradCheckConfig::with_tol(tol)))
}

fn csa_composite(block: &CsaBlock, f: &Tensor) -> Result<GradCheckReport> {
    // With w detached the reference function holds w at its base-point value.
    let frozen = if block.stop_grad_weights {
        Some(build_weights(f, block.eps_dist)?.weights)
    } else {
        None
    };
    finite_diff_gradcheck(
        |g, fv| {
            let gate = block.mlp.bind(g, false);
            let nodes = match (&frozen, g.requires_grad(fv)) {
                (Some(w), false) => block.forward_with_weights(g, &gate, fv, w)?,
                _ => block.forward(g, &gate, fv)?,
            };
            let out = g.scale_channels(fv, nodes.p)?;
            Ok(g.sum(out))
        },
        f,
        GradCheckConfig::with_tol(KINKED_TOL),
    )
}

/// Central-difference checks (`h = 1e-5`) of every layer with respect to
/// every input, and of `sum(recalibrate(F, csa(F)))` with gradients both
/// flowing through and stopped at the spatial weights.
pub fn gradient_suite(seed: u64) -> Vec<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let x = random(&[2, 5, 5], -1.0, 1.0, &mut rng);
        let k = random(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = random(&[3], -1.0, 1.0, &mut rng);
        let tag = format!("stride {stride}, pad {pad}");
        out.push(check(&format!("conv2d input ({tag})"), SMOOTH_TOL, &x, |g, xv| {
            let (kv, bv) = (g.constant(k.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, kv, Some(bv), stride, pad)?;
            project(g, y, 1)
        }));
        out.push(check(&format!("conv2d kernel ({tag})"), SMOOTH_TOL, &k, |g, kv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, kv, Some(bv), stride, pad)?;
            project(g, y, 2)
        }));
        out.push(check(&format!("conv2d bias ({tag})"), SMOOTH_TOL, &b, |g, bv| {
            let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
            let y = g.conv2d(xv, kv, Some(bv), stride, pad)?;
            project(g, y, 3)
        }));
    }

    let x = random(&[6], -1.0, 1.0, &mut rng);
    let w = random(&[4, 6], -1.0, 1.0, &mut rng);
    let b = random(&[4], -1.0, 1.0, &mut rng);
    out.push(check("linear input", SMOOTH_TOL, &x, |g, xv| {
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        let y = g.linear(xv, wv, Some(bv))?;
        project(g, y, 4)
    }));
    out.push(check("linear weight", SMOOTH_TOL, &w, |g, wv| {
        let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
        let y = g.linear(xv, wv, Some(bv))?;
        project(g, y, 5)
    }));
    out.push(check("linear bias", SMOOTH_TOL, &b, |g, bv| {
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.linear(xv, wv, Some(bv))?;
        project(g, y, 6)
    }));

    let v = random(&[12], -3.0, 3.0, &mut rng);
    out.push(check("sigmoid", SMOOTH_TOL, &v, |g, xv| {
        let y = g.sigmoid(xv);
        project(g, y, 7)
    }));
    let away = v.map(|a| if a.abs() < 0.1 { a + 0.5 } else { a });
    out.push(check("relu", KINKED_TOL, &away, |g, xv| {
        let y = g.relu(xv);
        project(g, y, 8)
    }));

    let f = random(&[3, 4, 5], -1.0, 1.0, &mut rng);
    out.push(check("global_avg_pool", SMOOTH_TOL, &f, |g, fv| {
        let y = g.global_avg_pool(fv)?;
        project(g, y, 9)
    }));
    let logits = random(&[5], -3.0, 3.0, &mut rng);
    out.push(check("softmax_cross_entropy", SMOOTH_TOL, &logits, |g, z| {
        g.softmax_cross_entropy(z, 2)
    }));

    let f = random(&[3, 2, 4], -1.0, 1.0, &mut rng);
    let p = random(&[3], 0.0, 1.0, &mut rng);
    out.push(check("recalibrate features", SMOOTH_TOL, &f, |g, fv| {
        let pv = g.constant(p.clone());
        let y = g.scale_channels(fv, pv)?;
        project(g, y, 10)
    }));
    out.push(check("recalibrate gate", SMOOTH_TOL, &p, |g, pv| {
        let fv = g.constant(f.clone());
        let y = g.scale_channels(fv, pv)?;
        project(g, y, 11)
    }));

    let f = random(&[5, 3, 3], -1.0, 1.0, &mut rng);
    out.push(check("channel distance", SMOOTH_TOL, &f, |g, fv| {
        let d = g.channel_distance(fv)?;
        project(g, d, 12)
    }));
    let dist = crate::spatial::channel_distances(&f);
    out.push(check("contiguity", SMOOTH_TOL, &dist, |g, l| {
        let v = g.contiguity(l, DEFAULT_EPS_DIST);
        project(g, v, 13)
    }));
    let cont = random(&[5, 5], 0.1, 1.0, &mut rng);
    out.push(check("unitary weights", SMOOTH_TOL, &cont, |g, v| {
        let w = g.unitary(v);
        project(g, w, 14)
    }));
    let x = random(&[7], -2.0, 2.0, &mut rng);
    out.push(check("standardize", SMOOTH_TOL, &x, |g, xv| {
        let z = g.standardize(xv, DEFAULT_EPS_SIGMA);
        project(g, z, 15)
    }));
    let z = random(&[5], -2.0, 2.0, &mut rng);
    let wts = random(&[5, 5], 0.0, 0.1, &mut rng);
    out.push(check("local moran z", SMOOTH_TOL, &z, |g, zv| {
        let wv = g.constant(wts.clone());
        let i = g.local_moran(zv, wv)?;
        project(g, i, 16)
    }));
    out.push(check("local moran w", SMOOTH_TOL, &wts, |g, wv| {
        let zv = g.constant(z.clone());
        let i = g.local_moran(zv, wv)?;
        project(g, i, 17)
    }));

    let f = random(&[6, 3, 3], -1.0, 1.0, &mut rng);
    match CsaBlock::new(6, 2, seed) {
        Ok(block) => {
            let mlp = block.mlp.clone();
            type Pick = fn(&GateVars, Var) -> GateVars;
            let parts: [(&str, &Tensor, Pick); 4] = [
                ("csa gate down weight", &mlp.down_weight, |g, v| GateVars { down_weight: v, ..*g }),
                ("csa gate down bias", &mlp.down_bias, |g, v| GateVars { down_bias: v, ..*g }),
                ("csa gate up weight", &mlp.up_weight, |g, v| GateVars { up_weight: v, ..*g }),
                ("csa gate up bias", &mlp.up_bias, |g, v| GateVars { up_bias: v, ..*g }),
            ];
            for (i, (name, point, pick)) in parts.into_iter().enumerate() {
                out.push(check(name, KINKED_TOL, point, |g, param| {
                    let gate = pick(&block.mlp.bind(g, false), param);
                    let fv = g.constant(f.clone());
                    let nodes = block.forward(g, &gate, fv)?;
                    let y = g.scale_channels(fv, nodes.p)?;
                    project(g, y, 20 + i as u64)
                }));
            }
        }
        Err(e) => out.push(SuiteResult::failed("csa gate", KINKED_TOL, e.to_string())),
    }

    match SeBlock::new(5, DEFAULT_REDUCTION, seed) {
        Ok(block) => {
            let f = random(&[5, 3, 3], -1.0, 1.0, &mut rng);
            out.push(check("se block composite", KINKED_TOL, &f, |g, fv| {
                let gate = block.mlp.bind(g, false);
                let (_, p) = block.forward(g, &gate, fv)?;
                let y = g.scale_channels(fv, p)?;
                Ok(g.sum(y))
            }));
        }
        Err(e) => out.push(SuiteResult::failed("se block composite", KINKED_TOL, e.to_string())),
    }

    for stop in [false, true] {
        let name = if stop {
            "recalibrate∘csa composite (w stopped)"
        } else {
            "recalibrate∘csa composite (through w)"
        };
        let runs: Vec<SuiteResult> = (0..4u64)
            .map(|k| {
                let f = random(&[4, 3, 3], -1.0, 1.0, &mut rng);
                match CsaBlock::new(4, DEFAULT_REDUCTION, seed.wrapping_add(k)) {
                    Ok(mut block) => {
                        block.stop_grad_weights = stop;
                        grad_result(name, KINKED_TOL, csa_composite(&block, &f))
                    }
                    Err(e) => SuiteResult::failed(name, KINKED_TOL, e.to_string()),
                }
            })
            .collect();
        let mut worst = runs
            .iter()
            .find(|r| !r.passed)
            .or_else(|| runs.iter().max_by(|a, b| a.value.total_cmp(&b.value)))
            .cloned()
            .expect("four runs");
        worst.detail = format!("4 random 4×3×3 maps, worst: {}", worst.detail);
        out.push(worst);
    }
    out
}

/// Every suite at the sizes used by the acceptance tests.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    let mut out = vec![
        moran_equivalence(1000, seed),
        csa_affine_invariance(100, seed),
        se_scale_sensitivity(100, seed),
        permutation_equivariance(100, seed),
        weight_contract(500, seed),
        parameter_accounting(),
    ];
    out.extend(gradient_suite(seed));
    out
}
