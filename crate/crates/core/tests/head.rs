use pareidolia_core::dataset::Label;
use pareidolia_core::head::{self, toy, AdamConfig, AdamState, LinearHead, Optimizer, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_at(head: &LinearHead, rows: &[Vec<f64>], labels: &[Label]) -> f64 {
    head::loss_and_grad(head, rows, labels).unwrap().0
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for draw in 0..20 {
        let (n, d) = if draw == 0 { (5, 3) } else { (rng.random_range(1..12), rng.random_range(1..9)) };
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let labels: Vec<Label> = (0..n).map(|_| Label::from_index(rng.random_range(0..2))).collect();
        let w = (0..d * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let head = LinearHead::from_parts(d, w, [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).unwrap();
        let (_, grad) = head::loss_and_grad(&head, &rows, &labels).unwrap();
        for i in 0..head.params().len() {
            let mut plus = head.clone();
            plus.params_mut()[i] += h;
            let mut minus = head.clone();
            minus.params_mut()[i] -= h;
            let numeric = (loss_at(&plus, &rows, &labels) - loss_at(&minus, &rows, &labels)) / (2.0 * h);
            let analytic = grad.params[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn two_step_adam_matches_hand_trace() {
    let cfg = AdamConfig { learning_rate: 0.01, ..AdamConfig::default() };
    let mut theta = [0.5, -0.3];
    let mut st = AdamState::new(2);
    head::adam_update(&mut theta, &[0.3, -0.1], &mut st, &cfg).unwrap();
    assert!((theta[0] - 0.490_000_000_333_333_32).abs() < 1e-10);
    assert!((theta[1] - -0.290_000_000_999_999_9).abs() < 1e-10);
    head::adam_update(&mut theta, &[-0.2, 0.4], &mut st, &cfg).unwrap();
    assert!((theta[0] - 0.488_554_795_092_859_67).abs() < 1e-10);
    assert!((theta[1] - -0.295_595_035_748_512_88).abs() < 1e-10);
    assert!((st.m[0] - 0.007).abs() < 1e-15 && (st.m[1] - 0.031).abs() < 1e-15);
    assert!((st.v[0] - 0.000_129_91).abs() < 1e-15 && (st.v[1] - 0.000_169_99).abs() < 1e-15);
    assert_eq!(st.step_count, 2);
}

#[test]
fn separable_toy_reaches_perfect_validation() {
    let t = toy::separable_toy(1, 100);
    assert!(toy::is_separated(&t.train, &t.train_labels) && toy::is_separated(&t.val, &t.val_labels));
    for seed in [0, 1, 2, 3, 42] {
        let (best, report) =
            head::train(&toy::config(), &t.train, &t.train_labels, &t.val, &t.val_labels, seed).unwrap();
        assert_eq!(report.epochs.len(), 40);
        assert_eq!(report.best_val_acc, 1.0, "seed {seed}");
        let max = report.epochs.iter().map(|e| e.val_acc).fold(0.0, f64::max);
        assert_eq!(report.best_val_acc, max);
        assert!(report.epochs[..report.best_epoch].iter().all(|e| e.val_acc < max));
        assert!(report.best_val_acc >= report.epochs[0].val_acc);
        let rows: Vec<&[f32]> = t.val.row_iter().collect();
        assert_eq!(head::evaluate(&best, &rows, &t.val_labels).unwrap().0, report.best_val_acc);
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let t = toy::separable_toy(4, 60);
    let run = |seed| head::train(&toy::config(), &t.train, &t.train_labels, &t.val, &t.val_labels, seed).unwrap();
    let (h1, r1) = run(9);
    let (h2, r2) = run(9);
    assert_eq!(h1, h2);
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
    let (h3, _) = run(10);
    assert_ne!(h1, h3);
}

#[test]
fn full_batch_descent_loss_is_non_increasing() {
    let t = toy::separable_toy(2, 100);
    let cfg = TrainConfig { epochs: 40, batch_size: t.train.rows(), optimizer: Optimizer::Sgd { learning_rate: 0.05 } };
    let (_, report) = head::train(&cfg, &t.train, &t.train_labels, &t.val, &t.val_labels, 5).unwrap();
    for pair in report.epochs.windows(2) {
        assert!(pair[1].train_loss <= pair[0].train_loss, "{pair:?}");
    }
}

#[test]
fn divergence_aborts_with_epoch_and_batch() {
    use pareidolia_core::backbone::FeatureMatrix;
    use pareidolia_core::dataset::Orientation;
    let fm = |tag: &str| {
        let ids = (0..8).map(|i| format!("{tag}{i}")).collect();
        FeatureMatrix::new(2, vec![f32::MAX; 16], ids, "0".repeat(32), Orientation::Upright).unwrap()
    };
    let labels: Vec<Label> = (0..8).map(|i| Label::from_index(i % 2)).collect();
    let cfg = TrainConfig { epochs: 3, batch_size: 4, optimizer: Optimizer::Sgd { learning_rate: 1e300 } };
    let err = head::train(&cfg, &fm("t"), &labels, &fm("v"), &labels, 0).unwrap_err();
    assert!(matches!(err, head::HeadError::TrainingDiverged { epoch: 0, batch: 0 }), "{err}");

    let huge = LinearHead::from_parts(1, vec![1e308, -1e308], [0.0, 0.0]).unwrap();
    assert!(matches!(head::loss_and_grad(&huge, &[[10.0f64]], &[Label::Object]), Err(head::HeadError::NonFiniteLoss)));
}
