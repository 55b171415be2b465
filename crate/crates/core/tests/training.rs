use interformer::model::{InterFormerModel, ModelConfig};
use interformer::numerics::gradcheck::{check_gradients, random_tensor};
use interformer::numerics::{Graph, NumericsError, Tensor};
use interformer::skeleton::{synthesize_dataset, InteractionSample, SynthConfig};
use interformer::training::{
    dataset_loss, first_frame_loss, sample_loss, sequence_loss, train, Schedule, TrainConfig,
    TrainLog, Trainer,
};
use interformer::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seq_loss(a: &Tensor, b: &Tensor) -> interformer::Result<f64> {
    let g = Graph::new();
    Ok(sequence_loss(g.constant(a), g.constant(b))?.item())
}

fn ff_loss(a: &Tensor, b: &Tensor) -> interformer::Result<f64> {
    let g = Graph::new();
    Ok(first_frame_loss(g.constant(a), g.constant(b))?.item())
}

fn oracle_sequence_loss(a: &Tensor, b: &Tensor) -> f64 {
    let (t, d) = (a.shape()[0], a.shape()[1]);
    let k = d / 3;
    let mut total = 0.0;
    for f in 0..t {
        for j in 0..k {
            for c in 0..3 {
                let diff = b.get(&[f, 3 * j + c]) - a.get(&[f, 3 * j + c]);
                total += diff * diff;
            }
        }
    }
    total / (t * k) as f64
}

fn oracle_first_frame_loss(a: &Tensor, b: &Tensor) -> f64 {
    let k = a.shape()[1] / 3;
    let mut total = 0.0;
    for j in 0..k {
        for c in 0..3 {
            let col = 3 * j + c;
            let real = b.get(&[1, col]) - b.get(&[0, col]);
            let gen = a.get(&[1, col]) - a.get(&[0, col]);
            total += (real - gen) * (real - gen);
        }
    }
    total / k as f64
}

fn to_numerics(e: Error) -> NumericsError {
    match e {
        Error::Numerics(n) => n,
        other => panic!("{other}"),
    }
}

fn tiny_data(
    seed: u64,
) -> (
    Vec<InteractionSample>,
    interformer::skeleton::SkeletonTopology,
) {
    let cfg = SynthConfig {
        classes: vec!["push".into(), "wave".into(), "still".into()],
        samples_per_class: 2,
        joints: 5,
        t_range: [4, 6],
        seed,
        ..SynthConfig::default()
    };
    let ds = synthesize_dataset(&cfg).unwrap();
    (ds.samples, ds.topology)
}

fn tiny_model(topology: &interformer::skeleton::SkeletonTopology, seed: u64) -> InterFormerModel {
    let cfg = ModelConfig {
        k: 5,
        n_layers: 1,
        ..ModelConfig::default()
    };
    InterFormerModel::new(cfg, topology.clone(), seed).unwrap()
}

fn tiny_config(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 2,
        steps,
        seed: 3,
        input_noise_sd: 0.01,
        ..TrainConfig::default()
    };
    cfg.adam.alpha = 1e-3;
    cfg
}

fn params_of(model: &InterFormerModel) -> Vec<Vec<f64>> {
    model
        .params()
        .tensors()
        .map(|t| t.data().to_vec())
        .collect()
}

#[test]
fn sequence_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let t = rng.gen_range(1..=5);
        let k = rng.gen_range(1..=6);
        let a = random_tensor(&[t, 3 * k], &mut rng);
        let b = random_tensor(&[t, 3 * k], &mut rng);
        let got = seq_loss(&a, &b).unwrap();
        assert!((got - oracle_sequence_loss(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn first_frame_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let t = rng.gen_range(2..=5);
        let k = rng.gen_range(1..=6);
        let a = random_tensor(&[t, 3 * k], &mut rng);
        let b = random_tensor(&[t, 3 * k], &mut rng);
        let got = ff_loss(&a, &b).unwrap();
        assert!((got - oracle_first_frame_loss(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn loss_hand_cases() {
    let y = random_tensor(&[4, 6], &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(seq_loss(&y, &y).unwrap(), 0.0);
    assert_eq!(ff_loss(&y, &y).unwrap(), 0.0);

    let zero = Tensor::zeros(&[1, 3]);
    let unit = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
    assert_eq!(seq_loss(&zero, &unit).unwrap(), 1.0);

    let real = Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let gen = Tensor::zeros(&[2, 3]);
    assert_eq!(ff_loss(&gen, &real).unwrap(), 1.0);

    let shifted = Tensor::new(&[4, 6], y.data().iter().map(|v| v + 0.7).collect()).unwrap();
    assert!(ff_loss(&shifted, &y).unwrap() < 1e-24);
}

#[test]
fn loss_errors() {
    let a = Tensor::zeros(&[3, 6]);
    assert!(seq_loss(&a, &Tensor::zeros(&[3, 3])).is_err());
    assert!(seq_loss(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[3, 4])).is_err());
    assert!(matches!(
        ff_loss(&Tensor::zeros(&[1, 6]), &Tensor::zeros(&[1, 6])),
        Err(Error::Length(_))
    ));
}

#[test]
fn loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..10 {
        let inputs = [
            random_tensor(&[4, 6], &mut rng),
            random_tensor(&[4, 6], &mut rng),
        ];
        let r = check_gradients(&inputs, 1e-5, seed, |_, v| {
            sequence_loss(v[0], v[1]).map_err(to_numerics)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let r = check_gradients(&inputs, 1e-5, seed, |_, v| {
            first_frame_loss(v[0], v[1]).map_err(to_numerics)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}

proptest! {
    #[test]
    fn first_frame_loss_ignores_translation(
        data in prop::collection::vec(-2.0f64..2.0, 36),
        shift in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let y = Tensor::new(&[3, 6], data[..18].to_vec()).unwrap();
        let y_hat = Tensor::new(&[3, 6], data[18..].to_vec()).unwrap();
        let moved: Vec<f64> = y_hat.data().iter().enumerate().map(|(i, v)| v + shift[i % 3]).collect();
        let moved = Tensor::new(&[3, 6], moved).unwrap();
        let a = ff_loss(&y_hat, &y).unwrap();
        let b = ff_loss(&moved, &y).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
    }

    #[test]
    fn losses_are_non_negative(data in prop::collection::vec(-3.0f64..3.0, 24)) {
        let a = Tensor::new(&[2, 6], data[..12].to_vec()).unwrap();
        let b = Tensor::new(&[2, 6], data[12..].to_vec()).unwrap();
        prop_assert!(seq_loss(&a, &b).unwrap() >= 0.0);
        prop_assert!(ff_loss(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn schedule_covers_each_item_once_per_epoch(
        lengths in prop::collection::vec(1usize..5, 1..30),
        batch in 1usize..6,
        seed in 0u64..100,
        epoch in 0usize..5,
    ) {
        let s = Schedule::from_lengths(&lengths, batch, seed).unwrap();
        let batches = s.epoch(epoch);
        prop_assert_eq!(batches.len(), s.batches_per_epoch());
        let mut seen = vec![0; lengths.len()];
        for b in &batches {
            prop_assert!(!b.is_empty() && b.len() <= batch);
            prop_assert!(b.iter().all(|&i| lengths[i] == lengths[b[0]]));
            for &i in b {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        for (i, b) in batches.iter().enumerate() {
            prop_assert_eq!(&s.batch(epoch * s.batches_per_epoch() + i), b);
        }
    }
}

#[test]
fn schedule_rejects_empty_input() {
    assert!(Schedule::from_lengths(&[], 2, 0).is_err());
    assert!(Schedule::from_lengths(&[3], 0, 0).is_err());
}

#[test]
fn zero_weight_drops_first_frame_term() {
    let (data, topo) = tiny_data(5);
    let model = tiny_model(&topo, 1);
    let g = Graph::new();
    let p = model.bind(&g, false);
    let with = sample_loss(&model, &g, &p, &data[0], 1.0, None).unwrap();
    let without = sample_loss(&model, &g, &p, &data[0], 0.0, None).unwrap();
    assert_eq!(without.total.item(), without.l_s.item());
    let ff = with.l_ff.unwrap().item();
    assert!((with.total.item() - with.l_s.item() - ff).abs() < 1e-12);
    assert!(dataset_loss(&model, &data).unwrap() > 0.0);
}

#[test]
fn one_step_keeps_shapes_and_is_finite() {
    let (data, topo) = tiny_data(6);
    let model = tiny_model(&topo, 2);
    let shapes: Vec<Vec<usize>> = model
        .params()
        .tensors()
        .map(|t| t.shape().to_vec())
        .collect();
    let (trained, log) = train(model, &data, &tiny_config(1)).unwrap();
    let after: Vec<Vec<usize>> = trained
        .params()
        .tensors()
        .map(|t| t.shape().to_vec())
        .collect();
    assert_eq!(shapes, after);
    assert_eq!(log.records.len(), 1);
    assert!(log.records[0].total.is_finite());
}

#[test]
fn training_is_deterministic() {
    let (data, topo) = tiny_data(7);
    let run = || train(tiny_model(&topo, 3), &data, &tiny_config(4)).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(params_of(&a), params_of(&b));
    let losses = |l: &TrainLog| l.records.iter().map(|r| r.total).collect::<Vec<_>>();
    assert_eq!(losses(&la), losses(&lb));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (data, topo) = tiny_data(8);
    let (full, _) = train(tiny_model(&topo, 4), &data, &tiny_config(6)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.ckpt");
    let mut first = Trainer::new(tiny_model(&topo, 4), &data, tiny_config(3)).unwrap();
    first.run(Some(&path), |_| {}).unwrap();
    let mut second = Trainer::resume(&path, &data, tiny_config(6)).unwrap();
    assert_eq!(second.step(), 3);
    let log = second.run(None, |_| {}).unwrap();
    assert_eq!(
        log.records.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![4, 5, 6]
    );
    assert_eq!(params_of(second.model()), params_of(&full));
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let (data, topo) = tiny_data(9);
    let mut model = tiny_model(&topo, 5);
    let name = "out.w".to_string();
    let n = model.params().by_name(&name).unwrap().numel();
    model
        .params_mut()
        .assign(&name, &vec![f64::NAN; n])
        .unwrap();
    match train(model, &data, &tiny_config(2)) {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected a non-finite error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn config_validation() {
    let (data, topo) = tiny_data(10);
    for bad in [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lambda_ff: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            input_noise_sd: -0.1,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(
            Trainer::new(tiny_model(&topo, 0), &data, bad),
            Err(Error::Config(_))
        ));
    }
    assert!(Trainer::new(tiny_model(&topo, 0), &[], TrainConfig::default()).is_err());
}

#[test]
fn csv_log_has_header_and_increasing_steps() {
    let (data, topo) = tiny_data(11);
    let (_, log) = train(tiny_model(&topo, 6), &data, &tiny_config(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    log.write_csv(&path).unwrap();
    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["step", "L_s", "L_ff", "total", "seconds"]
    );
    let steps: Vec<usize> = reader
        .records()
        .map(|r| r.unwrap()[0].parse().unwrap())
        .collect();
    assert_eq!(steps, vec![1, 2, 3]);
}
