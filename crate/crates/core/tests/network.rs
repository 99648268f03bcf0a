use picoseg::binio::FormatError;
use picoseg::net::{
    bias_name, build, count_macs, eca_block, load_weights_for, save_weights, NetError, NetSpec,
    Network, Plan, WeightStore,
};
use picoseg::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(seed: u64, n: usize, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, 3, size, size], |_| rng.random_range(0.0..1.0))
}

#[test]
fn default_counts_fall_in_window() {
    let spec = NetSpec::default();
    let params = build(&spec, 0).unwrap().param_count();
    assert!((1_260_000..=1_480_000).contains(&params), "{params}");
    assert_eq!(params, Plan::new(&spec).unwrap().param_count());
    let macs = count_macs(&spec).unwrap();
    assert!((293_000_000..=397_000_000).contains(&macs), "{macs}");
}

#[test]
fn single_pointwise_layer_count() {
    let store = WeightStore::new(
        0,
        vec![
            ("p.weight".into(), Tensor::zeros([1, 3, 1, 1])),
            ("p.bias".into(), Tensor::zeros([1, 1, 1, 1])),
        ],
    )
    .unwrap();
    assert_eq!(store.param_count(), 4);
}

#[test]
fn output_matches_input_resolution() {
    for size in [32, 64, 96] {
        let spec = NetSpec::default().with_input_size(size);
        let net = Network::new(spec.clone(), build(&spec, 3).unwrap()).unwrap();
        let y = net.forward(&random_input(size as u64, 1, size)).unwrap();
        assert_eq!(y.shape(), [1, 1, size, size]);
        assert!(y.is_finite());
    }
}

#[test]
fn encoder_halves_resolution_per_stage() {
    let plan = Plan::new(&NetSpec::default()).unwrap();
    let sides: Vec<usize> = (0..4)
        .map(|i| plan.node(&format!("enc{i}.down")).unwrap().shape[1])
        .collect();
    assert_eq!(sides, vec![48, 24, 12, 6]);
    assert_eq!(plan.node("input").unwrap().shape, [3, 96, 96]);
}

#[test]
fn zero_weights_yield_head_bias() {
    let spec = NetSpec::default().with_input_size(32);
    let head_bias = bias_name("head");
    let mut store = build(&spec, 1).unwrap().map(|_, _| 0.0);
    let shape = store.require(&head_bias).unwrap().shape();
    store.replace(&head_bias, Tensor::full(shape, 0.7)).unwrap();
    let y = Network::new(spec, store)
        .unwrap()
        .forward(&random_input(5, 2, 32))
        .unwrap();
    assert!(y.data().iter().all(|&v| v == 0.7));
}

#[test]
fn zero_eca_kernel_halves_features() {
    let x = random_input(8, 2, 6);
    let y = eca_block(&x, &[0.0; 3]).unwrap();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert_eq!(*b, a / 2.0);
    }
    assert!(eca_block(&x, &[0.0; 2]).is_err());
}

#[test]
fn eca_bypass_changes_logits() {
    let spec = NetSpec::default().with_input_size(32);
    let store = build(&spec, 11).unwrap();
    let x = random_input(12, 1, 32);
    let with = Network::new(spec.clone(), store.clone())
        .unwrap()
        .forward(&x)
        .unwrap();
    let bypass = NetSpec {
        eca_bypass: true,
        ..spec
    };
    let without = Network::new(bypass, store).unwrap().forward(&x).unwrap();
    assert!(without.is_finite());
    assert_ne!(with, without);
}

#[test]
fn forward_is_deterministic() {
    let spec = NetSpec::default();
    let net = Network::new(spec.clone(), build(&spec, 21).unwrap()).unwrap();
    let x = random_input(22, 1, 96);
    assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
    assert_eq!(build(&spec, 21).unwrap(), build(&spec, 21).unwrap());
}

#[test]
fn rejects_wrong_input_shape() {
    let spec = NetSpec::default().with_input_size(32);
    let net = Network::new(spec.clone(), build(&spec, 0).unwrap()).unwrap();
    assert!(matches!(
        net.forward(&Tensor::zeros([1, 3, 64, 64])),
        Err(NetError::InputShape { size: 32, .. })
    ));
}

#[test]
fn weight_file_round_trip_and_size() {
    let spec = NetSpec::default();
    let store = build(&spec, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.psw");
    save_weights(&store, &path).unwrap();
    let len = std::fs::metadata(&path).unwrap().len();
    assert!((5_000_000..=5_900_000).contains(&len), "{len}");
    assert_eq!(load_weights_for(&path, &spec).unwrap(), store);
}

#[test]
fn weight_file_errors_are_distinct() {
    let spec = NetSpec::default().with_input_size(32);
    let bytes = build(&spec, 4).unwrap().to_bytes();

    let truncated = &bytes[..bytes.len() - 1];
    assert!(matches!(
        WeightStore::from_bytes(truncated),
        Err(NetError::Format(FormatError::Truncated { .. }))
    ));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        WeightStore::from_bytes(&bad),
        Err(NetError::Format(FormatError::BadMagic { .. }))
    ));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.psw");
    std::fs::write(&path, &bytes).unwrap();
    let other = NetSpec {
        bottleneck_channels: 288,
        ..spec
    };
    assert!(matches!(
        load_weights_for(&path, &other),
        Err(NetError::FingerprintMismatch { .. })
    ));
}

#[test]
fn fingerprint_ignores_bypass_flag() {
    let spec = NetSpec::default();
    let bypass = NetSpec {
        eca_bypass: true,
        ..spec.clone()
    };
    assert_eq!(spec.fingerprint(), bypass.fingerprint());
    assert_ne!(
        spec.fingerprint(),
        spec.clone().with_input_size(64).fingerprint()
    );
}
