use acll::datagen::{generate_dataset, DatasetKind, DatasetParams};
use acll::net::{sgd_train, Network, TrainConfig, WeightMask};
use acll::risk::zero_one_risk;

fn train_and_score(dims: &[usize], kind: DatasetKind, params: DatasetParams, epochs: usize) -> (f64, f64) {
    let data = generate_dataset(kind, &params, 42).unwrap();
    let mut net = Network::new(dims, 1).unwrap();
    let all = WeightMask::ones(net.len());
    let cfg = TrainConfig { epochs, seed: 3, ..TrainConfig::default() };
    sgd_train(&mut net, &all, 1, &data.train, &cfg).unwrap();
    let train = zero_one_risk(&net, &all, 1, &data.train).unwrap().risk;
    let val = zero_one_risk(&net, &all, 1, &data.val).unwrap().risk;
    (train, val)
}

#[test]
fn separable_blobs_are_learned() {
    let params = DatasetParams { class_count: 2, n_per_split: 200, noise_std: 0.3 };
    let (train, _) = train_and_score(&[2, 16, 2], DatasetKind::Blobs, params, 50);
    assert!(train < 0.05, "training error {train}");
}

#[test]
fn zero_noise_blobs_are_linearly_separable() {
    // A linear model (no hidden layer) reaches zero training risk.
    let params = DatasetParams { class_count: 2, n_per_split: 50, noise_std: 0.0 };
    let (train, _) = train_and_score(&[2, 2], DatasetKind::Blobs, params, 20);
    assert_eq!(train, 0.0);
}

#[test]
fn spirals_separate_wide_from_narrow_networks() {
    let params = DatasetParams { class_count: 5, n_per_split: 2000, noise_std: 0.05 };
    let (_, wide) = train_and_score(&[2, 64, 64, 5], DatasetKind::Spirals, params, 60);
    let (_, narrow) = train_and_score(&[2, 8, 8, 5], DatasetKind::Spirals, params, 60);
    assert!(wide < 0.15, "wide network validation risk {wide}");
    assert!(narrow >= 0.15, "narrow network validation risk {narrow}");
}
