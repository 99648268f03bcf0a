use std::collections::BTreeMap;

use picoseg::binio::FormatError;
use picoseg::net::{build, NetSpec, Network, WeightStore};
use picoseg::quant::{
    calibrate, decode_int8, encode_int8, export_int8, import_int8, observe_ranges, qconv,
    quantize_tensor, quantize_weights, ActParams, ActRange, CalibrationSet, QTensor, QuantError,
    QuantizedNetwork,
};
use picoseg::tensor::{conv2d, ConvParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(rng: &mut impl Rng, n: usize, size: usize) -> Tensor {
    Tensor::from_fn([n, 3, size, size], |_| rng.random_range(0.0..1.0))
}

fn calib_set(seed: u64, batches: usize, size: usize) -> CalibrationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CalibrationSet::new(
        (0..batches)
            .map(|_| random_batch(&mut rng, 2, size))
            .collect(),
    )
    .unwrap()
}

#[test]
fn rounding_error_bound_on_random_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let t = Tensor::from_fn([100, 8, 3, 3], |_| rng.random_range(-2.0..2.0));
    let q = quantize_tensor("w", &t).unwrap();
    let deq = q.dequantize();
    let per = q.channel_len();
    for ch in 0..100 {
        let s = q.scales[ch];
        assert!(s > 0.0);
        for i in ch * per..(ch + 1) * per {
            assert!((t.data()[i] - deq.data()[i]).abs() <= s / 2.0 + s * 1e-6);
        }
    }
}

#[test]
fn negation_mirrors_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let t = Tensor::from_fn([16, 4, 3, 3], |_| rng.random_range(-1.0..1.0));
    let a = quantize_tensor("w", &t).unwrap();
    let b = quantize_tensor("w", &t.map(|v| -v)).unwrap();
    assert_eq!(a.scales, b.scales);
    assert!(a.codes.iter().zip(&b.codes).all(|(x, y)| *x == -*y));
}

#[test]
fn pointwise_toy_graph_within_half_step() {
    // The float reference uses the dequantized weights and inputs, so only
    // the output rounding remains.
    let raw = Tensor::new([2, 3, 1, 1], vec![1.27, -0.5, 0.25, -0.64, 0.32, 0.0]).unwrap();
    let ql = quantize_tensor("toy.weight", &raw).unwrap();
    let w = ql.dequantize();
    let bias = vec![0.1f32, -0.2];
    let in_params = ActParams::from_range(-1.0, 1.55);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let codes: Vec<i8> = (0..3 * 25).map(|_| rng.random_range(-128..=127)).collect();
    let input = QTensor {
        shape: [1, 3, 5, 5],
        data: codes,
        params: in_params,
    };
    let fp_in = input.dequantize();
    let fp = conv2d(&fp_in, &ConvParams::new(w, bias.clone())).unwrap();
    let (lo, hi) = fp.min_max();
    let out_params = ActParams::from_range(lo, hi);

    let q = qconv(&input, &ql, &bias, 1, 0, 1, 1, out_params, false).unwrap();
    for (a, b) in q.dequantize().data().iter().zip(fp.data()) {
        assert!((a - b).abs() <= out_params.scale / 2.0 + 1e-6, "{a} vs {b}");
    }
}

#[test]
fn zero_input_follows_zero_path() {
    let spec = NetSpec::default().with_input_size(32);
    let weights = build(&spec, 5).unwrap();
    let zero_bias = weights.map(|name, v| if name.ends_with(".bias") { 0.0 } else { v });
    let params = calibrate(&spec, &zero_bias, &calib_set(6, 2, 32)).unwrap();
    let head = params.site("head").unwrap();
    let net = QuantizedNetwork::new(spec, &quantize_weights(&zero_bias).unwrap(), params).unwrap();
    let y = net.forward(&Tensor::zeros([1, 3, 32, 32])).unwrap();
    let expect = head.dequantize(head.quantize(0.0));
    assert!(y.data().iter().all(|&v| v == expect));
}

#[test]
fn integer_path_is_deterministic() {
    let spec = NetSpec::default().with_input_size(32);
    let weights = build(&spec, 7).unwrap();
    let params = calibrate(&spec, &weights, &calib_set(8, 2, 32)).unwrap();
    let net = QuantizedNetwork::new(spec, &quantize_weights(&weights).unwrap(), params).unwrap();
    let x = random_batch(&mut ChaCha8Rng::seed_from_u64(9), 1, 32);
    let a = net.forward(&x).unwrap();
    let b = net.forward(&x).unwrap();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn calibration_is_repeatable_and_ranges_nest() {
    let spec = NetSpec::default().with_input_size(32);
    let weights = build(&spec, 10).unwrap();
    let calib = calib_set(11, 4, 32);
    assert_eq!(
        calibrate(&spec, &weights, &calib).unwrap(),
        calibrate(&spec, &weights, &calib).unwrap()
    );
    let mut prev: Option<BTreeMap<String, ActRange>> = None;
    for k in 1..=calib.len() {
        let ranges = observe_ranges(&spec, &weights, &calib.prefix(k).unwrap()).unwrap();
        if let Some(prev) = &prev {
            for (site, r) in &ranges {
                assert!(r.contains(&prev[site]), "site {site} shrank at k={k}");
            }
        }
        prev = Some(ranges);
    }
}

#[test]
fn calibration_errors() {
    assert!(matches!(
        CalibrationSet::new(vec![]),
        Err(QuantError::EmptyCalibration)
    ));
    let spec = NetSpec::default().with_input_size(32);
    let weights = build(&spec, 0).unwrap();
    let wrong = CalibrationSet::new(vec![Tensor::zeros([1, 3, 16, 16])]).unwrap();
    assert!(matches!(
        calibrate(&spec, &weights, &wrong),
        Err(QuantError::CalibrationShape { .. })
    ));
}

#[test]
fn missing_site_is_reported() {
    let spec = NetSpec::default().with_input_size(32);
    let weights = build(&spec, 0).unwrap();
    let mut params = calibrate(&spec, &weights, &calib_set(1, 1, 32)).unwrap();
    params.activations.remove("head");
    let err =
        QuantizedNetwork::new(spec, &quantize_weights(&weights).unwrap(), params).unwrap_err();
    assert!(matches!(err, QuantError::MissingSite(s) if s == "head"));
}

fn default_model() -> (NetSpec, WeightStore, Vec<u8>) {
    let spec = NetSpec::default();
    let weights = build(&spec, 42).unwrap();
    let int8 = quantize_weights(&weights).unwrap();
    let params = calibrate(&spec, &weights, &calib_set(12, 1, 96)).unwrap();
    let bytes = encode_int8(&int8, &params);
    (spec, weights, bytes)
}

#[test]
fn int8_file_round_trip_and_compression() {
    let (spec, weights, bytes) = default_model();
    let (store, params) = decode_int8(&bytes, &spec).unwrap();
    assert_eq!(encode_int8(&store, &params), bytes);
    assert_eq!(store, quantize_weights(&weights).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.psq");
    export_int8(&store, &params, &path).unwrap();
    let (s2, p2) = import_int8(&path, &spec).unwrap();
    assert_eq!((s2, p2), (store, params));

    let ratio = bytes.len() as f64 / weights.to_bytes().len() as f64;
    assert!(ratio <= 0.30, "{ratio}");
}

#[test]
fn int8_file_errors() {
    let (spec, _, bytes) = default_model();
    let mut bad = bytes.clone();
    bad[1] = b'?';
    assert!(matches!(
        decode_int8(&bad, &spec),
        Err(QuantError::Format(FormatError::BadMagic { .. }))
    ));
    assert!(matches!(
        decode_int8(&bytes[..bytes.len() - 3], &spec),
        Err(QuantError::Format(FormatError::Truncated { .. }))
    ));
    let other = spec.clone().with_input_size(64);
    assert!(decode_int8(&bytes, &other).is_err());
}

#[test]
fn float_and_integer_masks_agree() {
    let spec = NetSpec::default().with_input_size(32);
    let weights = build(&spec, 13).unwrap();
    let params = calibrate(&spec, &weights, &calib_set(14, 3, 32)).unwrap();
    let q =
        QuantizedNetwork::new(spec.clone(), &quantize_weights(&weights).unwrap(), params).unwrap();
    let f = Network::new(spec, weights).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (mut agree, mut total) = (0usize, 0usize);
    for _ in 0..5 {
        let x = random_batch(&mut rng, 1, 32);
        let a = f.forward(&x).unwrap();
        let b = q.forward(&x).unwrap();
        total += a.len();
        agree += a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(u, v)| (**u > 0.0) == (**v > 0.0))
            .count();
    }
    assert!(agree as f64 / total as f64 >= 0.95);
}
