use csa_core::analysis::ema;
use csa_core::attention::{hidden_width, CsaBlock, SeBlock};
use csa_core::autodiff::Checkpoint;
use csa_core::data::{Dataset, Normalization};
use csa_core::selftest::{permute_channels, permute_mlp};
use csa_core::train::{default_milestones, TrainConfig};
use csa_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn feature_map(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn finite_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn checkpoint_text_is_bit_exact(values in prop::collection::vec(finite_f64(), 1..40), split in 1usize..5) {
        let n = values.len();
        let shape = if n % split == 0 { vec![split, n / split] } else { vec![n] };
        let ck = Checkpoint {
            meta: vec![("note".into(), "free text, with spaces".into())],
            tensors: vec![("t".into(), Tensor::new(shape.clone(), values.clone()).unwrap())],
        };
        let back = Checkpoint::from_text(&ck.to_text().unwrap()).unwrap();
        let t = back.tensor("t").unwrap();
        prop_assert_eq!(t.shape(), &shape[..]);
        for (a, b) in t.data().iter().zip(&values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back.meta("note"), Some("free text, with spaces"));
    }

    #[test]
    fn csa_gate_ignores_positive_affine_maps(
        seed in any::<u64>(),
        c in 3usize..20,
        side in 2usize..6,
        a in 0.01f64..50.0,
        shift in -5.0f64..5.0,
    ) {
        let f = feature_map(seed, c, side, side);
        let block = CsaBlock::new(c, 4, seed ^ 0x5eed).unwrap();
        let (p, _) = block.csa_forward(&f).unwrap();
        let (p2, _) = block.csa_forward(&f.map(|v| a * v + shift)).unwrap();
        prop_assert!(p.max_abs_diff(&p2) < 1e-8, "{}", p.max_abs_diff(&p2));
    }

    #[test]
    fn gates_are_permutation_equivariant(seed in any::<u64>(), c in 2usize..20) {
        let f = feature_map(seed, c, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let fp = permute_channels(&f, &perm);

        let csa = CsaBlock::new(c, 4, seed).unwrap();
        let csa_perm = CsaBlock::from_mlp(4, permute_mlp(&csa.mlp, &perm));
        let (p, _) = csa.csa_forward(&f).unwrap();
        let (pp, _) = csa_perm.csa_forward(&fp).unwrap();

        let se = SeBlock::new(c, 4, seed).unwrap();
        let se_perm = SeBlock { mlp: permute_mlp(&se.mlp, &perm), ..se.clone() };
        let s = se.se_forward(&f).unwrap();
        let sp = se_perm.se_forward(&fp).unwrap();
        for (k, &src) in perm.iter().enumerate() {
            prop_assert!((pp.data()[k] - p.data()[src]).abs() < 1e-12);
            prop_assert!((sp.data()[k] - s.data()[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn csa_and_se_blocks_have_equal_parameter_counts(c in 1usize..300, r in 1usize..33) {
        let csa = CsaBlock::new(c, r, 0).unwrap();
        let se = SeBlock::new(c, r, 0).unwrap();
        let h = hidden_width(c, r);
        prop_assert_eq!(h, c.div_ceil(r).max(4));
        prop_assert_eq!(csa.param_count(), se.param_count());
        prop_assert_eq!(csa.param_count(), h * c + h + c * h + c);
    }

    #[test]
    fn gate_values_lie_in_unit_interval(seed in any::<u64>(), c in 1usize..16) {
        let f = feature_map(seed, c, 4, 4).map(|v| 100.0 * v);
        let (p, _) = CsaBlock::new(c, 2, seed).unwrap().csa_forward(&f).unwrap();
        let s = SeBlock::new(c, 2, seed).unwrap().se_forward(&f).unwrap();
        for v in p.data().iter().chain(s.data()) {
            prop_assert!(v.is_finite() && *v >= 0.0 && *v <= 1.0);
        }
    }

    #[test]
    fn normalization_gives_zero_mean_unit_std(seed in any::<u64>(), n in 2usize..12, channels in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<Tensor> = (0..n)
            .map(|_| Tensor::new(vec![channels, 3, 3], (0..channels * 9).map(|_| rng.gen_range(0.0..255.0)).collect()).unwrap())
            .collect();
        let mut data = Dataset::new(images, vec![0; n], 1).unwrap();
        let norm = Normalization::fit(&data);
        norm.apply(&mut data);
        let again = Normalization::fit(&data);
        for ch in 0..channels {
            prop_assert!(again.mean[ch].abs() < 1e-9);
            prop_assert!((again.std[ch] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn learning_rate_schedule_is_non_increasing(epochs in 1usize..200, lr in 1e-4f64..1.0) {
        let milestones = default_milestones(epochs);
        prop_assert!(milestones.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(milestones.iter().all(|&m| m > 0 && m < epochs));
        let cfg = TrainConfig { lr, ..TrainConfig::for_epochs(epochs) };
        cfg.validate().unwrap();
        prop_assert_eq!(cfg.lr_at(0), lr);
        for e in 1..epochs {
            prop_assert!(cfg.lr_at(e) <= cfg.lr_at(e - 1));
        }
    }

    #[test]
    fn ema_stays_within_the_input_range(values in prop::collection::vec(-1e3f64..1e3, 1..50), a in 0.0f64..1.0) {
        let s = ema(&values, a);
        prop_assert_eq!(s.len(), values.len());
        prop_assert_eq!(s[0], values[0]);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in &s {
            prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
        }
    }
}
