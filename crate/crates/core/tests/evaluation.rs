use interformer::evaluation::{
    diversity, diversity_score, evaluate, extract_features, fvd, reactions, train_classifier,
    ClassifierConfig, FeatureTap, MotionClassifier,
};
use interformer::generation::GenConfig;
use interformer::model::{InterFormerModel, ModelConfig};
use interformer::numerics::gradcheck::random_tensor;
use interformer::numerics::Tensor;
use interformer::skeleton::{synthesize_dataset, Dataset, MotionSequence, Pose, SynthConfig};
use interformer::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn column(values: &[f64]) -> Tensor {
    Tensor::new(&[values.len(), 1], values.to_vec()).unwrap()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn oracle_diversity(f: &Tensor) -> f64 {
    let (b, h) = (f.shape()[0], f.shape()[1]);
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            let mut sq = 0.0;
            for c in 0..h {
                sq += (f.get(&[i, c]) - f.get(&[j, c])).powi(2);
            }
            total += sq.sqrt();
        }
    }
    total / (b * (b - 1)) as f64
}

fn three_class(seed: u64, per_class: usize) -> Dataset {
    synthesize_dataset(&SynthConfig {
        classes: vec!["push".into(), "wave".into(), "kick".into()],
        samples_per_class: per_class,
        joints: 5,
        t_range: [12, 16],
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn quick_classifier() -> ClassifierConfig {
    ClassifierConfig {
        hidden: 16,
        epochs: 25,
        seed: 1,
        ..ClassifierConfig::default()
    }
}

#[test]
fn fvd_identity_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (b, h) in [(20, 4), (6, 10), (30, 8)] {
        let a = random_tensor(&[b, h], &mut rng);
        let c = random_tensor(&[b + 3, h], &mut rng);
        assert!(fvd(&a, &a).unwrap().abs() < 1e-8);
        assert!((fvd(&a, &c).unwrap() - fvd(&c, &a).unwrap()).abs() < 1e-8);
        assert!(fvd(&a, &c).unwrap() >= 0.0);
    }
}

#[test]
fn fvd_matches_one_dimensional_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n0 = Normal::new(0.0, 1.0).unwrap();
    let n1 = Normal::new(1.0, 1.0).unwrap();
    for _ in 0..10 {
        let a: Vec<f64> = (0..200).map(|_| n0.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..150).map(|_| n1.sample(&mut rng)).collect();
        let (ma, sa) = mean_sd(&a);
        let (mb, sb) = mean_sd(&b);
        let closed = (ma - mb).powi(2) + (sa - sb).powi(2);
        assert!((fvd(&column(&a), &column(&b)).unwrap() - closed).abs() < 1e-6);
    }
    // a pure shift only moves the mean
    let a = [0.0, 1.0, 2.0, 3.0];
    let b = [2.0, 3.0, 4.0, 5.0];
    assert!((fvd(&column(&a), &column(&b)).unwrap() - 4.0).abs() < 1e-12);
}

#[test]
fn fvd_errors() {
    let a = Tensor::zeros(&[4, 3]);
    assert!(fvd(&a, &Tensor::zeros(&[4, 2])).is_err());
    assert!(fvd(&a, &Tensor::zeros(&[1, 3])).is_err());
}

#[test]
fn diversity_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let b = rng.gen_range(2..=6);
        let h = rng.gen_range(1..=6);
        let f = random_tensor(&[b, h], &mut rng);
        assert!((diversity(&f).unwrap() - oracle_diversity(&f)).abs() < 1e-12);
    }
}

#[test]
fn diversity_hand_cases() {
    assert_eq!(diversity(&column(&[0.0, 2.0])).unwrap(), 2.0);
    assert_eq!(diversity(&Tensor::full(&[5, 3], 0.4)).unwrap(), 0.0);
    assert!(diversity(&Tensor::zeros(&[1, 3])).is_err());
}

#[test]
fn diversity_score_cases() {
    assert_eq!(diversity_score(1.7, 1.7).unwrap(), 0.0);
    assert_eq!(diversity_score(2.0, 0.0).unwrap(), 100.0);
    assert_eq!(diversity_score(2.0, 3.0).unwrap(), 50.0);
    assert!(diversity_score(0.0, 1.0).is_err());
}

proptest! {
    #[test]
    fn diversity_is_invariant_to_row_order_and_rotation(
        data in prop::collection::vec(-3.0f64..3.0, 12),
        angle in 0.0f64..std::f64::consts::TAU,
        shift in 0usize..6,
    ) {
        let f = Tensor::new(&[6, 2], data.clone()).unwrap();
        let base = diversity(&f).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..6).map(|r| f.row(r).to_vec()).collect();
        rows.rotate_left(shift);
        prop_assert!((diversity(&Tensor::from_rows(&rows)).unwrap() - base).abs() < 1e-12);
        let (s, c) = angle.sin_cos();
        let rotated: Vec<Vec<f64>> = rows.iter().map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect();
        prop_assert!((diversity(&Tensor::from_rows(&rotated)).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn diversity_score_is_scale_free(gt in 0.1f64..10.0, gen in 0.0f64..10.0, c in 0.1f64..10.0) {
        let a = diversity_score(gt, gen).unwrap();
        let b = diversity_score(c * gt, c * gen).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
    }
}

#[test]
fn classifier_separates_synthetic_classes() {
    let ds = three_class(4, 20);
    let clf = train_classifier(&reactions(&ds.samples), &quick_classifier()).unwrap();
    assert!(
        clf.holdout_accuracy.unwrap() >= 90.0,
        "{:?}",
        clf.holdout_accuracy
    );
    assert_eq!(clf.classes(), ["kick", "push", "wave"]);
}

#[test]
fn classifier_training_is_deterministic() {
    let ds = three_class(5, 4);
    let cfg = ClassifierConfig {
        epochs: 3,
        ..quick_classifier()
    };
    let a = train_classifier(&reactions(&ds.samples), &cfg).unwrap();
    let b = train_classifier(&reactions(&ds.samples), &cfg).unwrap();
    for (x, y) in a.params().tensors().zip(b.params().tensors()) {
        assert_eq!(x.data(), y.data());
    }
    assert_eq!(a.holdout_accuracy, b.holdout_accuracy);
}

#[test]
fn constant_inputs_give_chance_accuracy() {
    let seq = MotionSequence::new(vec![Pose::filled(5, 0.3); 8], 15.0).unwrap();
    let data: Vec<(MotionSequence, String)> = (0..30)
        .map(|i| (seq.clone(), ["a", "b", "c"][i % 3].to_string()))
        .collect();
    let clf = train_classifier(
        &data,
        &ClassifierConfig {
            epochs: 5,
            ..quick_classifier()
        },
    )
    .unwrap();
    let seqs: Vec<&MotionSequence> = data.iter().map(|(s, _)| s).collect();
    let labels: Vec<String> = data.iter().map(|(_, l)| l.clone()).collect();
    // every input is identical, so one class is predicted for all of them
    assert!((clf.accuracy(&seqs, &labels).unwrap() - 100.0 / 3.0).abs() < 1e-9);
}

#[test]
fn features_are_per_sequence() {
    let ds = three_class(6, 2);
    let clf = MotionClassifier::new(quick_classifier(), 15, vec!["a".into(), "b".into()]).unwrap();
    let mut seqs: Vec<&MotionSequence> = ds.samples.iter().map(|s| &s.reaction).collect();
    seqs.push(seqs[0]);
    let f = extract_features(&clf, &seqs).unwrap();
    assert_eq!(f.shape(), &[seqs.len(), 16]);
    assert!(f.is_finite());
    assert_eq!(f.row(0), f.row(seqs.len() - 1));
    // batching by length must not change any row
    for (i, s) in seqs.iter().enumerate() {
        assert_eq!(extract_features(&clf, &[s]).unwrap().row(0), f.row(i));
    }
    assert!(extract_features(&clf, &[]).is_err());

    let all = MotionClassifier::new(
        ClassifierConfig {
            feature: FeatureTap::AllLayers,
            ..quick_classifier()
        },
        15,
        vec!["a".into(), "b".into()],
    )
    .unwrap();
    assert_eq!(
        extract_features(&all, &seqs).unwrap().shape(),
        &[seqs.len(), 32]
    );
}

#[test]
fn classifier_rejects_bad_input() {
    let ds = three_class(7, 3);
    let one_class: Vec<(MotionSequence, String)> = ds
        .samples
        .iter()
        .map(|s| (s.reaction.clone(), "x".to_string()))
        .collect();
    assert!(matches!(
        train_classifier(&one_class, &quick_classifier()),
        Err(Error::Invalid(_))
    ));
    let clf = MotionClassifier::new(quick_classifier(), 30, vec!["a".into(), "b".into()]).unwrap();
    assert!(matches!(
        clf.predict(&[&ds.samples[0].reaction]),
        Err(Error::JointCount(_))
    ));
}

#[test]
fn classifier_checkpoint_round_trip() {
    let ds = three_class(8, 3);
    let clf = train_classifier(
        &reactions(&ds.samples),
        &ClassifierConfig {
            epochs: 1,
            ..quick_classifier()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clf.ckpt");
    clf.save(&path).unwrap();
    let back = MotionClassifier::load(&path).unwrap();
    let seqs: Vec<&MotionSequence> = ds.samples.iter().map(|s| &s.reaction).collect();
    assert_eq!(back.classes(), clf.classes());
    assert_eq!(back.holdout_accuracy, clf.holdout_accuracy);
    assert_eq!(
        extract_features(&back, &seqs).unwrap(),
        extract_features(&clf, &seqs).unwrap()
    );
}

#[test]
fn evaluation_report_is_self_consistent() {
    let ds = three_class(9, 4);
    let clf = train_classifier(
        &reactions(&ds.samples),
        &ClassifierConfig {
            epochs: 5,
            ..quick_classifier()
        },
    )
    .unwrap();
    let model = InterFormerModel::new(
        ModelConfig {
            k: 5,
            n_layers: 1,
            ..ModelConfig::default()
        },
        ds.topology.clone(),
        0,
    )
    .unwrap();
    let report = evaluate(&model, &ds.samples, &clf, &GenConfig::default()).unwrap();

    let seqs: Vec<&MotionSequence> = ds.samples.iter().map(|s| &s.reaction).collect();
    let labels: Vec<String> = ds.samples.iter().map(|s| s.label.clone()).collect();
    let gt = &report.ground_truth;
    assert!(gt.fvd.abs() < 1e-8);
    assert_eq!(gt.diversity_score, 0.0);
    // balanced classes, so the class mean equals the overall accuracy
    assert!((gt.average_accuracy - clf.accuracy(&seqs, &labels).unwrap()).abs() < 1e-9);

    for m in [
        &report.ground_truth,
        &report.generated,
        &report.zero_velocity,
    ] {
        assert_eq!(m.per_class_accuracy.len(), 3);
        assert!(m
            .per_class_accuracy
            .iter()
            .all(|a| (0.0..=100.0).contains(a)));
        assert!(m.fvd.is_finite() && m.fvd >= -1e-6);
        assert!(m.diversity.is_finite() && m.diversity_score.is_finite());
    }
    assert!((0.0..=1.0).contains(&report.length_match_rate));
    assert_eq!(report.samples, 12);

    let table = report.to_table();
    let first_block: Vec<&str> = table.split("\n\n").next().unwrap().lines().collect();
    assert_eq!(first_block.len(), 2 + 3 + 1);
    assert!(first_block.last().unwrap().starts_with("Average"));
    let parsed: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(parsed["classes"].as_array().unwrap().len(), 3);
}
