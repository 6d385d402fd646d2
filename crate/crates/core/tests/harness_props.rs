use proptest::prelude::*;
use promptlab::data::{shift, synthesize, Split, SyntheticSpec};
use promptlab::encoder::{argmax, cosine_classify, ClassifierMatrix, DualEncoder, EncoderConfig};
use promptlab::harness::{cosine_lr, evaluate, predict, sample_few_shot, train, EpisodeSpec, TrainConfig};
use promptlab::prompts::{PromptStrategy, StrategyConfig, StrategyKind};
use promptlab::{Error, Tensor};

fn tiny_data() -> promptlab::data::Dataset<f32> {
    synthesize(&SyntheticSpec {
        classes: 3,
        train_per_class: 8,
        test_per_class: 6,
        image_size: 16,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .0
}

fn tiny_strategy_config() -> StrategyConfig {
    StrategyConfig {
        unified_width: 16,
        transform_heads: 2,
        mlp_hidden: 8,
        ..StrategyConfig::default()
    }
}

#[test]
fn zero_shot_training_changes_nothing() {
    let data = tiny_data();
    let encoder = DualEncoder::<f32>::init(&EncoderConfig::tiny(), 1).unwrap();
    let mut s = PromptStrategy::init(StrategyKind::ZeroShot, &tiny_strategy_config(), &encoder, 1).unwrap();
    let before = evaluate(&s, &encoder, &data.class_names, &data.test).unwrap();
    let out = train(&mut s, &encoder, &data.class_names, &data.train, &TrainConfig::default(), 1).unwrap();
    assert!(out.epochs.is_empty());
    assert_eq!(out.steps, 0);
    assert_eq!(evaluate(&s, &encoder, &data.class_names, &data.test).unwrap(), before);
}

#[test]
fn evaluate_agrees_with_per_image_cosine_classifier() {
    let data = tiny_data().cast::<f64>();
    let encoder = DualEncoder::<f64>::init(&EncoderConfig::tiny(), 2).unwrap();
    let s = PromptStrategy::init(StrategyKind::ZeroShot, &tiny_strategy_config(), &encoder, 1).unwrap();
    let w: ClassifierMatrix<f64> = encoder.zero_shot_classifier(&data.class_names).unwrap();
    let mut hits = 0;
    for (img, &label) in data.test.images.iter().zip(&data.test.labels) {
        let z = encoder.image_features(std::slice::from_ref(img)).unwrap();
        let z = z.reshape(&[z.len()]).unwrap();
        let p = cosine_classify(&z, &w, encoder.logit_scale()).unwrap();
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        if argmax(p.data()) == label {
            hits += 1;
        }
    }
    let brute = hits as f64 / data.test.len() as f64;
    assert_eq!(evaluate(&s, &encoder, &data.class_names, &data.test).unwrap(), brute);
}

#[test]
fn trained_prompts_fit_the_episode_and_leave_the_backbone_alone() {
    let data = tiny_data();
    let encoder = DualEncoder::<f32>::init(&EncoderConfig::tiny(), 3).unwrap();
    let checksum = encoder.checksum();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 8,
        initial_lr: 0.01,
        ..TrainConfig::default()
    };
    for kind in [StrategyKind::TextOnly, StrategyKind::VptDeep, StrategyKind::Unified] {
        let mut s = PromptStrategy::init(kind, &tiny_strategy_config(), &encoder, 4).unwrap();
        let out = train(&mut s, &encoder, &data.class_names, &data.train, &cfg, 4).unwrap();
        assert_eq!(out.epochs.len(), 30);
        assert_eq!(out.steps, 30 * 3);
        let first = out.epochs[0].loss;
        let last = out.epochs.last().unwrap().loss;
        assert!(last < first, "{kind}: loss {first} -> {last}");
        assert_eq!(encoder.checksum(), checksum);
    }
}

#[test]
fn nan_prompt_reports_the_offending_batch() {
    let data = tiny_data();
    let encoder = DualEncoder::<f32>::init(&EncoderConfig::tiny(), 3).unwrap();
    let mut s = PromptStrategy::init(StrategyKind::TextOnly, &tiny_strategy_config(), &encoder, 4).unwrap();
    let p = &mut s.trainables_mut()[0];
    let shape = p.value().shape().to_vec();
    p.set_value(Tensor::full(&shape, f32::NAN)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    match train(&mut s, &encoder, &data.class_names, &data.train, &cfg, 1) {
        Err(Error::NonFiniteLoss(dump)) => {
            assert_eq!(dump.epoch, 0);
            assert_eq!(dump.step, 0);
            assert_eq!(dump.sample_indices.len(), 4);
            assert_eq!(dump.labels.len(), 4);
        }
        other => panic!("expected non-finite loss, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn predictions_do_not_depend_on_chunking() {
    let data = synthesize(&SyntheticSpec {
        classes: 2,
        train_per_class: 1,
        test_per_class: 70,
        image_size: 16,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .0
    .cast::<f64>();
    let encoder = DualEncoder::<f64>::init(&EncoderConfig::tiny(), 5).unwrap();
    let s = PromptStrategy::init(StrategyKind::VptDeep, &tiny_strategy_config(), &encoder, 1).unwrap();
    let all = predict(&s, &encoder, &data.class_names, &data.test.images).unwrap();
    let one_by_one: Vec<usize> = data
        .test
        .images
        .iter()
        .map(|img| predict(&s, &encoder, &data.class_names, std::slice::from_ref(img)).unwrap()[0])
        .collect();
    assert_eq!(all, one_by_one);
}

#[test]
fn larger_noise_moves_images_further() {
    let data = tiny_data();
    let dist = |a: &Split<f32>| -> f64 {
        a.images
            .iter()
            .zip(&data.test.images)
            .map(|(x, y)| x.data().iter().zip(y.data()).map(|(u, v)| ((u - v) as f64).powi(2)).sum::<f64>())
            .sum()
    };
    let d: Vec<f64> = [0.1, 0.5, 1.0]
        .iter()
        .map(|&s| dist(&shift::additive_noise(&data.test, s, 9).unwrap()))
        .collect();
    assert!(d[0] < d[1] && d[1] < d[2]);
    let same = shift::additive_noise(&data.test, 0.5, 9).unwrap();
    assert_eq!(dist(&same), d[1]);
    assert_eq!(same.labels, data.test.labels);
}

#[test]
fn schedule_endpoints() {
    assert_eq!(cosine_lr(0, 10, 0.002).unwrap(), 0.002);
    assert!(cosine_lr(10, 10, 0.002).unwrap().abs() < 1e-18);
    assert!((cosine_lr(5, 10, 0.002).unwrap() - 0.001).abs() < 1e-15);
    assert!(cosine_lr(11, 10, 0.002).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn episodes_have_exactly_n_distinct_per_class(
        shots_i in 0usize..5,
        seed in any::<u64>(),
        classes in 2usize..6,
    ) {
        let shots = [1, 2, 4, 8, 16][shots_i];
        let labels: Vec<usize> = (0..classes * 17).map(|i| i % classes).collect();
        let images = vec![Tensor::<f32>::zeros(&[1]); labels.len()];
        let split = Split::new(images, labels.clone()).unwrap();
        let names: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
        let spec = EpisodeSpec::new(shots, seed).unwrap();
        let idx = sample_few_shot(&split, &names, &spec).unwrap();
        prop_assert_eq!(idx.len(), shots * classes);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), idx.len());
        for c in 0..classes {
            prop_assert_eq!(idx.iter().filter(|&&i| labels[i] == c).count(), shots);
        }
        prop_assert_eq!(sample_few_shot(&split, &names, &spec).unwrap(), idx);
    }

    #[test]
    fn off_grid_shot_counts_are_rejected(shots in 0usize..40) {
        let ok = [1, 2, 4, 8, 16].contains(&shots);
        prop_assert_eq!(EpisodeSpec::new(shots, 0).is_ok(), ok);
    }
}
