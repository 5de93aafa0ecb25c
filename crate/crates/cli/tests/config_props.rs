use csa_cli::config::{ConfigFile, ModelSection, SyntheticSection, TrainSection};
use csa_core::model::Variant;
use proptest::prelude::*;

fn layer() -> impl Strategy<Value = ConfigFile> {
    (
        prop::option::of(prop::sample::select(vec![Variant::Baseline, Variant::Se, Variant::Csa])),
        prop::option::of(1usize..40),
        prop::option::of(1e-4f64..0.5),
        prop::option::of(0..=i64::MAX as u64),
        prop::option::of(1usize..64),
        prop::option::of(prop::sample::select(vec![4usize, 8, 16])),
        prop::option::of(0.0f64..0.5),
        prop::option::of(1usize..300),
    )
        .prop_map(|(variant, epochs, lr, seed, batch, reduction, noise, limit)| ConfigFile {
            dataset: None,
            limit,
            seed,
            model: ModelSection { variant, reduction, ..ModelSection::default() },
            train: TrainSection { epochs, lr, batch_size: batch, ..TrainSection::default() },
            synthetic: SyntheticSection { noise, ..SyntheticSection::default() },
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn echo_resolves_to_the_same_run(a in layer(), b in layer()) {
        let run = a.overlay(b).resolve().unwrap();
        let echoed = ConfigFile::parse(&run.to_toml()).unwrap();
        prop_assert_eq!(&echoed, &run.echo());
        prop_assert_eq!(echoed.resolve().unwrap(), run);
    }

    #[test]
    fn seeds_beyond_toml_range_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let file = ConfigFile { seed: Some(seed), ..ConfigFile::default() };
        prop_assert!(file.resolve().is_err());
    }

    #[test]
    fn later_layer_wins_for_every_set_key(a in layer(), b in layer()) {
        let merged = a.clone().overlay(b.clone());
        prop_assert_eq!(merged.model.variant, b.model.variant.or(a.model.variant));
        prop_assert_eq!(merged.train.lr, b.train.lr.or(a.train.lr));
        prop_assert_eq!(merged.seed, b.seed.or(a.seed));
        prop_assert_eq!(merged.limit, b.limit.or(a.limit));
        prop_assert_eq!(merged.synthetic.noise, b.synthetic.noise.or(a.synthetic.noise));
        let empty = ConfigFile::default();
        prop_assert_eq!(a.clone().overlay(empty.clone()), a.clone());
        prop_assert_eq!(empty.overlay(a.clone()), a);
    }
}
