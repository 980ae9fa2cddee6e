//! Fusion behavior with real (small) networks and a simulated test set.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stressnet::dataset::{ImageSource, Modality, TreatmentLabel};
use stressnet::fusion::{
    collect_votes, predict_day, predict_sequence, Combo, DuplicationRatio, FusionModel,
};
use stressnet::network::{ArchDims, Mode, ModelFamily, Network, NetworkSpec};
use stressnet::pipeline::{InputConfig, InputKind, TensorCache};
use stressnet::simulator::{SimulatedSource, SimulatorConfig};

fn tiny_net(
    family: ModelFamily,
    channels: usize,
    kind: InputKind,
    dropout: f64,
    seed: u64,
) -> Network<f32> {
    let input = InputConfig {
        width: 24,
        height: 18,
        erosion_radius: 1,
    };
    let modality = if channels == 3 {
        Modality::Rgb
    } else {
        Modality::Thermal
    };
    let spec = NetworkSpec::shallow(
        family,
        input.shape(modality, kind),
        ArchDims {
            conv: [2, 2],
            dense: 6,
            dropout,
        },
    )
    .unwrap();
    Network::new(spec, seed).unwrap()
}

fn fixture() -> (SimulatedSource, TensorCache) {
    let src = SimulatedSource::new(SimulatorConfig {
        plants_per_treatment: 2,
        days: 6,
        canvas: (48, 36),
        seed: 2,
        ..SimulatorConfig::default()
    })
    .unwrap();
    let cache = TensorCache::build(
        &src,
        &src.plants(),
        &[Modality::Rgb, Modality::Thermal],
        InputConfig {
            width: 24,
            height: 18,
            erosion_radius: 1,
        },
    )
    .unwrap();
    (src, cache)
}

#[test]
fn zero_dropout_stochastic_equals_deterministic() {
    let (src, cache) = fixture();
    let rgb = tiny_net(ModelFamily::RgbModel, 3, InputKind::Single, 0.0, 1);
    let th = tiny_net(ModelFamily::ThermalModel, 1, InputKind::Single, 0.0, 2);
    let combo = Combo {
        rgb: Some(FusionModel {
            network: &rgb,
            kind: InputKind::Single,
        }),
        thermal: Some(FusionModel {
            network: &th,
            kind: InputKind::Single,
        }),
    };
    let ratio = DuplicationRatio::new(2, 3).unwrap();
    let plants = src.plants();
    let a = collect_votes(
        &combo,
        &cache,
        &plants,
        6,
        ratio,
        Mode::InferDeterministic,
        5,
    )
    .unwrap();
    let b = collect_votes(&combo, &cache, &plants, 6, ratio, Mode::InferStochastic, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stochastic_votes_are_reproducible_and_seed_dependent() {
    let (src, cache) = fixture();
    let rgb = tiny_net(ModelFamily::RgbModel, 3, InputKind::Single, 0.5, 1);
    let th = tiny_net(ModelFamily::ThermalModel, 1, InputKind::Triplet, 0.5, 2);
    let combo = Combo {
        rgb: Some(FusionModel {
            network: &rgb,
            kind: InputKind::Single,
        }),
        thermal: Some(FusionModel {
            network: &th,
            kind: InputKind::Triplet,
        }),
    };
    let ratio = DuplicationRatio::new(3, 4).unwrap();
    let plants = src.plants();
    let run = |seed| {
        collect_votes(
            &combo,
            &cache,
            &plants,
            6,
            ratio,
            Mode::InferStochastic,
            seed,
        )
        .unwrap()
    };
    let first = run(9);
    assert_eq!(first, run(9));
    assert!((0..5).any(|s| run(s) != first));
    for days in first.votes.values() {
        assert_eq!(days.len(), 6);
        assert!(days.iter().all(|v| v.len() == 7));
    }
    // windows per plant: days + 1 - n
    for n in 1..=6 {
        assert_eq!(
            first.rolling_accuracy(n).unwrap().total,
            plants.len() * (7 - n as usize)
        );
    }
}

#[test]
fn swapping_model_roles_with_equal_copies_keeps_the_prediction() {
    let (src, cache) = fixture();
    // both "modalities" are thermal networks so either can take either role
    let n1 = tiny_net(ModelFamily::ThermalModel, 1, InputKind::Single, 0.0, 3);
    let n2 = tiny_net(ModelFamily::ThermalModel, 1, InputKind::Single, 0.0, 4);
    let ratio = DuplicationRatio::new(2, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for plant in src.plants() {
        let days: Vec<_> = (1..=6)
            .map(|d| {
                cache
                    .input(Modality::Thermal, InputKind::Single, plant, d)
                    .unwrap()
            })
            .collect();
        let vectors = |a: &Network<f32>,
                       b: &Network<f32>,
                       rng: &mut ChaCha8Rng|
         -> Vec<Vec<TreatmentLabel>> {
            let combo = Combo {
                rgb: Some(FusionModel {
                    network: a,
                    kind: InputKind::Single,
                }),
                thermal: Some(FusionModel {
                    network: b,
                    kind: InputKind::Single,
                }),
            };
            days.iter()
                .map(|x| {
                    predict_day(
                        &combo,
                        Some(x),
                        Some(x),
                        ratio,
                        Mode::InferDeterministic,
                        rng,
                    )
                    .unwrap()
                })
                .collect()
        };
        let ab = predict_sequence(&vectors(&n1, &n2, &mut rng), 4).unwrap();
        let ba = predict_sequence(&vectors(&n2, &n1, &mut rng), 4).unwrap();
        assert_eq!(ab, ba);
    }
}

fn label() -> impl Strategy<Value = TreatmentLabel> {
    (0usize..4).prop_map(|i| TreatmentLabel::from_index(i).unwrap())
}

proptest! {
    #[test]
    fn scaling_copies_never_changes_the_sequence_prediction(
        days in proptest::collection::vec((label(), label()), 1..=17),
        p in 1u32..5, q in 1u32..5, k in 1u32..4,
    ) {
        let expand = |p: u32, q: u32| -> Vec<Vec<TreatmentLabel>> {
            days.iter()
                .map(|&(r, t)| {
                    std::iter::repeat_n(r, q as usize)
                        .chain(std::iter::repeat_n(t, p as usize))
                        .collect()
                })
                .collect()
        };
        let base = predict_sequence(&expand(p, q), (p + q) as usize).unwrap();
        let scaled = predict_sequence(&expand(k * p, k * q), (k * (p + q)) as usize).unwrap();
        prop_assert_eq!(base, scaled);
    }
}
