use csa_core::attention::{recalibrate, CsaBlock, SeBlock};
use csa_core::autodiff::{finite_diff_gradcheck, stable_sigmoid, GradCheckConfig, GradCheckReport, Graph, Var};
use csa_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random linear functional of `y`, so upstream gradients are not uniform.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let coeffs = random(&shape, -1.0, 1.0, &mut rng);
    g.dot(y, coeffs)
}

#[track_caller]
fn assert_passes(name: &str, report: GradCheckReport) {
    assert!(
        report.passed && report.excluded.is_empty(),
        "{name}: max rel err {:.3e} at {:?}, excluded {:?}",
        report.max_rel_error,
        report.worst_index,
        report.excluded
    );
}

const SMOOTH: f64 = 1e-6;
const KINKED: f64 = 1e-4;

#[test]
fn quadratic_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[10], -2.0, 2.0, &mut rng);
    let report = finite_diff_gradcheck(
        |g, x| {
            let f = g.reshape(x, &[10, 1, 1])?;
            let sq = g.scale_channels(f, x)?;
            Ok(g.sum(sq))
        },
        &x,
        GradCheckConfig::with_tol(1e-9),
    )
    .unwrap();
    assert_passes("x·x", report);
}

#[test]
fn conv2d_trivial_cases() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(vec![1, 3, 3]));
    let k = g.constant(Tensor::full(vec![1, 1, 1, 1], 2.0));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &Tensor::full(vec![1, 3, 3], 2.0));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random(&[1, 5, 4], -1.0, 1.0, &mut rng);
    let mut delta = Tensor::zeros(vec![1, 1, 3, 3]);
    delta.set(&[0, 0, 1, 1], 1.0);
    let x = g.constant(input.clone());
    let k = g.constant(delta);
    let y = g.conv2d(x, k, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn conv2d_shape_errors_name_dimensions() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![2, 4, 4]));
    let k = g.constant(Tensor::zeros(vec![3, 1, 3, 3]));
    let msg = g.conv2d(x, k, None, 1, 1).unwrap_err().to_string();
    assert!(msg.contains("[2, 4, 4]") && msg.contains("[3, 1, 3, 3]"), "{msg}");

    let k = g.constant(Tensor::zeros(vec![1, 2, 7, 7]));
    assert!(g.conv2d(x, k, None, 1, 1).is_err());
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
        let input = random(&[2, 5, 5], -1.0, 1.0, &mut rng);
        let kernel = random(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let bias = random(&[3], -1.0, 1.0, &mut rng);
        let (k2, b2) = (kernel.clone(), bias.clone());
        let wrt_input = finite_diff_gradcheck(
            move |g, x| {
                let k = g.constant(k2.clone());
                let b = g.constant(b2.clone());
                let y = g.conv2d(x, k, Some(b), stride, pad)?;
                project(g, y, 10)
            },
            &input,
            GradCheckConfig::with_tol(SMOOTH),
        )
        .unwrap();
        assert_passes("conv2d input", wrt_input);

        let in2 = input.clone();
        let b2 = bias.clone();
        let wrt_kernel = finite_diff_gradcheck(
            move |g, k| {
                let x = g.constant(in2.clone());
                let b = g.constant(b2.clone());
                let y = g.conv2d(x, k, Some(b), stride, pad)?;
                project(g, y, 11)
            },
            &kernel,
            GradCheckConfig::with_tol(SMOOTH),
        )
        .unwrap();
        assert_passes("conv2d kernel", wrt_kernel);

        let wrt_bias = finite_diff_gradcheck(
            move |g, b| {
                let x = g.constant(input.clone());
                let k = g.constant(kernel.clone());
                let y = g.conv2d(x, k, Some(b), stride, pad)?;
                project(g, y, 12)
            },
            &bias,
            GradCheckConfig::with_tol(SMOOTH),
        )
        .unwrap();
        assert_passes("conv2d bias", wrt_bias);
    }
}

#[test]
fn linear_cases_and_gradients() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![2.0, 5.0]));
    let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let zero = g.constant(Tensor::zeros(vec![2]));
    let y = g.linear(x, eye, Some(zero)).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 5.0]);
    let w = g.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
    let b = g.constant(Tensor::vector(vec![3.0]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[10.0]);
    assert!(g.linear(x, eye, Some(b)).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = random(&[6], -1.0, 1.0, &mut rng);
    let weight = random(&[4, 6], -1.0, 1.0, &mut rng);
    let bias = random(&[4], -1.0, 1.0, &mut rng);
    let (w2, b2) = (weight.clone(), bias.clone());
    let report = finite_diff_gradcheck(
        move |g, x| {
            let w = g.constant(w2.clone());
            let b = g.constant(b2.clone());
            let y = g.linear(x, w, Some(b))?;
            project(g, y, 20)
        },
        &input,
        GradCheckConfig::with_tol(1e-8),
    )
    .unwrap();
    assert_passes("linear input", report);
    let report = finite_diff_gradcheck(
        move |g, w| {
            let x = g.constant(input.clone());
            let b = g.constant(bias.clone());
            let y = g.linear(x, w, Some(b))?;
            project(g, y, 21)
        },
        &weight,
        GradCheckConfig::with_tol(1e-8),
    )
    .unwrap();
    assert_passes("linear weight", report);
}

#[test]
fn activations() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    assert_eq!(stable_sigmoid(0.0), 0.5);
    // references from 50-digit evaluation of 1 / (1 + e^{-x})
    assert_eq!(stable_sigmoid(-800.0), 0.0);
    assert_eq!(stable_sigmoid(800.0), 1.0);
    for (x, want) in [(-30.0, 9.357_622_968_839_299e-14), (-700.0, 9.859_676_543_759_77e-305)] {
        let got = stable_sigmoid(x);
        assert!(((got - want) / want).abs() < 1e-14, "{x}: {got} vs {want}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = random(&[12], -3.0, 3.0, &mut rng);
    let report = finite_diff_gradcheck(
        |g, x| {
            let y = g.sigmoid(x);
            project(g, y, 30)
        },
        &input,
        GradCheckConfig::with_tol(SMOOTH),
    )
    .unwrap();
    assert_passes("sigmoid", report);

    // keep inputs away from the kink
    let input = input.map(|v| if v.abs() < 0.1 { v + 0.5 } else { v });
    let report = finite_diff_gradcheck(
        |g, x| {
            let y = g.relu(x);
            project(g, y, 31)
        },
        &input,
        GradCheckConfig::with_tol(KINKED),
    )
    .unwrap();
    assert_passes("relu", report);
}

#[test]
fn relu_kink_is_excluded_not_failed() {
    let point = Tensor::vector(vec![0.0, 1.0, -1.0]);
    let report = finite_diff_gradcheck(
        |g, x| {
            let y = g.relu(x);
            Ok(g.sum(y))
        },
        &point,
        GradCheckConfig::with_tol(KINKED),
    )
    .unwrap();
    assert_eq!(report.excluded, vec![0]);
    assert!(report.passed);
    assert_eq!(report.checked, 2);
}

#[test]
fn global_avg_pool_cases_and_gradients() {
    let mut g = Graph::new();
    let f = g.constant(Tensor::new(vec![2, 2, 2], vec![7.0, 7.0, 7.0, 7.0, 0.0, 1.0, 2.0, 3.0]).unwrap());
    let x = g.global_avg_pool(f).unwrap();
    assert_eq!(g.value(x).data(), &[7.0, 1.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let report = finite_diff_gradcheck(
        |g, f| {
            let x = g.global_avg_pool(f)?;
            project(g, x, 40)
        },
        &random(&[3, 4, 5], -1.0, 1.0, &mut rng),
        GradCheckConfig::with_tol(1e-8),
    )
    .unwrap();
    assert_passes("global_avg_pool", report);
}

#[test]
fn softmax_cross_entropy_cases_and_gradients() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let l = g.softmax_cross_entropy(z, 0).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    let z = g.constant(Tensor::vector(vec![1000.0, 0.0]));
    let l = g.softmax_cross_entropy(z, 0).unwrap();
    assert!(g.value(l).item().abs() < 1e-300);
    assert!(g.softmax_cross_entropy(z, 2).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for label in 0..5 {
        let report = finite_diff_gradcheck(
            |g, z| g.softmax_cross_entropy(z, label),
            &random(&[5], -3.0, 3.0, &mut rng),
            GradCheckConfig::with_tol(1e-8),
        )
        .unwrap();
        assert_passes("softmax_cross_entropy", report);
    }
}

#[test]
fn scale_channels_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = random(&[3, 2, 4], -1.0, 1.0, &mut rng);
    let p = random(&[3], 0.0, 1.0, &mut rng);
    let p2 = p.clone();
    let report = finite_diff_gradcheck(
        move |g, f| {
            let p = g.constant(p2.clone());
            let y = g.scale_channels(f, p)?;
            project(g, y, 50)
        },
        &f,
        GradCheckConfig::with_tol(1e-8),
    )
    .unwrap();
    assert_passes("scale_channels features", report);
    let report = finite_diff_gradcheck(
        move |g, p| {
            let f = g.constant(f.clone());
            let y = g.scale_channels(f, p)?;
            project(g, y, 51)
        },
        &p,
        GradCheckConfig::with_tol(1e-8),
    )
    .unwrap();
    assert_passes("scale_channels gate", report);
}

#[test]
fn spatial_chain_pieces() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = random(&[5, 3, 3], -1.0, 1.0, &mut rng);
    let report = finite_diff_gradcheck(
        |g, f| {
            let d = g.channel_distance(f)?;
            project(g, d, 60)
        },
        &f,
        GradCheckConfig::with_tol(SMOOTH),
    )
    .unwrap();
    assert_passes("channel_distance", report);

    let dist = {
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let d = g.channel_distance(fv).unwrap();
        g.value(d).clone()
    };
    let report = finite_diff_gradcheck(
        |g, l| {
            let v = g.contiguity(l, 1e-12);
            project(g, v, 61)
        },
        &dist,
        GradCheckConfig::with_tol(SMOOTH),
    )
    .unwrap();
    assert_passes("contiguity", report);

    let v = random(&[5, 5], 0.1, 1.0, &mut rng);
    let report = finite_diff_gradcheck(
        |g, v| {
            let w = g.unitary(v);
            project(g, w, 62)
        },
        &v,
        GradCheckConfig::with_tol(SMOOTH),
    )
    .unwrap();
    assert_passes("unitary", report);

    let x = random(&[7], -2.0, 2.0, &mut rng);
    let report = finite_diff_gradcheck(
        |g, x| {
            let z = g.standardize(x, 1e-8);
            project(g, z, 63)
        },
        &x,
        GradCheckConfig::with_tol(SMOOTH),
    )
    .unwrap();
    assert_passes("standardize", report);

    let z = random(&[5], -2.0, 2.0, &mut rng);
    let w = random(&[5, 5], 0.0, 0.1, &mut rng);
    let w2 = w.clone();
    let report = finite_diff_gradcheck(
        move |g, z| {
            let w = g.constant(w2.clone());
            let i = g.local_moran(z, w)?;
            project(g, i, 64)
        },
        &z,
        GradCheckConfig::with_tol(SMOOTH),
    )
    .unwrap();
    assert_passes("local_moran z", report);
    let report = finite_diff_gradcheck(
        move |g, w| {
            let z = g.constant(z.clone());
            let i = g.local_moran(z, w)?;
            project(g, i, 65)
        },
        &w,
        GradCheckConfig::with_tol(SMOOTH),
    )
    .unwrap();
    assert_passes("local_moran w", report);
}

fn csa_composite(block: &CsaBlock, f: &Tensor) -> GradCheckReport {
    // With the weight matrix detached, the reference function holds it at
    // its value at the base point.
    let frozen = block
        .stop_grad_weights
        .then(|| csa_core::spatial::build_weights(f, block.eps_dist).unwrap().weights);
    finite_diff_gradcheck(
        |g, fv| {
            let gate = block.mlp.bind(g, false);
            let nodes = if g.requires_grad(fv) {
                block.forward(g, &gate, fv)?
            } else {
                match &frozen {
                    Some(w) => block.forward_with_weights(g, &gate, fv, w)?,
                    None => block.forward(g, &gate, fv)?,
                }
            };
            let out = g.scale_channels(fv, nodes.p)?;
            Ok(g.sum(out))
        },
        f,
        GradCheckConfig::with_tol(KINKED),
    )
    .unwrap()
}

#[test]
fn csa_block_end_to_end_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..5 {
        let f = random(&[4, 3, 3], -1.0, 1.0, &mut rng);
        let mut block = CsaBlock::new(4, 16, seed).unwrap();
        assert_passes("csa composite", csa_composite(&block, &f));
        block.stop_grad_weights = true;
        assert_passes("csa composite (stop-grad w)", csa_composite(&block, &f));
    }
}

#[test]
fn stop_grad_changes_feature_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let f = random(&[5, 3, 3], -1.0, 1.0, &mut rng);
    let mut block = CsaBlock::new(5, 16, 2).unwrap();
    let grad_of = |block: &CsaBlock| {
        let mut g = Graph::new();
        let gate = block.mlp.bind(&mut g, false);
        let fv = g.param(f.clone());
        let nodes = block.forward(&mut g, &gate, fv).unwrap();
        let out = g.scale_channels(fv, nodes.p).unwrap();
        let loss = g.sum(out);
        g.backward(loss).unwrap().get(fv).unwrap().clone()
    };
    let flowing = grad_of(&block);
    block.stop_grad_weights = true;
    let stopped = grad_of(&block);
    assert!(flowing.max_abs_diff(&stopped) > 1e-8);
}

#[test]
fn csa_gate_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = random(&[6, 3, 3], -1.0, 1.0, &mut rng);
    let block = CsaBlock::new(6, 2, 3).unwrap();
    let down = block.mlp.down_weight.clone();
    let report = finite_diff_gradcheck(
        |g, d| {
            let gate = block.mlp.bind(g, false);
            let gate = csa_core::attention::GateVars { down_weight: d, ..gate };
            let fv = g.constant(f.clone());
            let nodes = block.forward(g, &gate, fv)?;
            let out = g.scale_channels(fv, nodes.p)?;
            project(g, out, 70)
        },
        &down,
        GradCheckConfig::with_tol(KINKED),
    )
    .unwrap();
    assert_passes("csa down weight", report);
}

#[test]
fn se_block_end_to_end_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let f = random(&[5, 3, 3], -1.0, 1.0, &mut rng);
    let block = SeBlock::new(5, 16, 4).unwrap();
    let report = finite_diff_gradcheck(
        |g, f| {
            let gate = block.mlp.bind(g, false);
            let (_, p) = block.forward(g, &gate, f)?;
            let out = g.scale_channels(f, p)?;
            Ok(g.sum(out))
        },
        &f,
        GradCheckConfig::with_tol(KINKED),
    )
    .unwrap();
    assert_passes("se composite", report);
}

#[test]
fn repeated_backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let f = random(&[4, 3, 3], -1.0, 1.0, &mut rng);
    let block = CsaBlock::new(4, 16, 0).unwrap();
    let mut g = Graph::new();
    let gate = block.mlp.bind(&mut g, true);
    let fv = g.param(f.clone());
    let nodes = block.forward(&mut g, &gate, fv).unwrap();
    let out = g.scale_channels(fv, nodes.p).unwrap();
    let loss = g.sum(out);
    let a = g.backward(loss).unwrap();
    let b = g.backward(loss).unwrap();
    for v in [fv, gate.down_weight, gate.up_bias] {
        assert_eq!(a.get(v).unwrap(), b.get(v).unwrap());
    }
    let recal = recalibrate(&f, g.value(nodes.p)).unwrap();
    assert_eq!(&recal, g.value(out));
}

#[test]
fn backward_reaches_every_trainable_leaf_once() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = g.param(Tensor::vector(vec![3.0]));
    let c = g.constant(Tensor::vector(vec![4.0, 5.0]));
    let f = g.reshape(a, &[2, 1, 1]).unwrap();
    // a used twice: through `f` and as the gate
    let y = g.scale_channels(f, a).unwrap();
    let y2 = g.reshape(y, &[2]).unwrap();
    let f2 = g.reshape(c, &[2, 1, 1]).unwrap();
    let z = g.scale_channels(f2, y2).unwrap();
    let loss = g.sum(z);
    let grads = g.backward(loss).unwrap();
    // loss = Σ c_i a_i² → grad = 2 c_i a_i
    assert_eq!(grads.get(a).unwrap().data(), &[8.0, 20.0]);
    assert!(grads.get(unused).is_none());
    assert!(grads.get(c).is_none());
}

#[test]
fn non_finite_probe_is_an_error() {
    let x = Tensor::vector(vec![1.0]);
    let err = finite_diff_gradcheck(
        |g, x| {
            let f = g.reshape(x, &[1, 1, 1])?;
            let big = g.constant(Tensor::vector(vec![f64::MAX]));
            let y = g.scale_channels(f, big)?;
            Ok(g.sum(y))
        },
        &x,
        GradCheckConfig::default(),
    );
    assert!(err.is_err());
}
