use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::{Graph, Mode, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn desk() -> ArchSpec {
    ArchSpec::desk()
}

#[test]
fn full_scale_encoder_ladder_and_latent() {
    let spec = ArchSpec::full_scale();
    let enc = Encoder::build(&spec, &mut rng(1)).unwrap();
    assert_eq!(enc.layer_channels(), vec![16, 32, 64, 128, 256, 512]);
    let z = enc.encode(&random(&[1, 3, 256, 256], 2)).unwrap();
    assert_eq!(z.shape(), &[1, 512, 4, 4]);
}

#[test]
fn full_scale_decoder_consumes_attribute_planes() {
    let spec = ArchSpec::full_scale();
    let dec = Decoder::build(&spec, 5, &mut rng(3)).unwrap();
    assert_eq!(dec.layer_input_channels(), vec![517, 261, 133, 69, 37, 21]);
    let out = dec.decode(&random(&[1, 512, 4, 4], 4), &[2]).unwrap();
    assert_eq!(out.shape(), &[1, 3, 256, 256]);
    assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn full_scale_discriminator_and_classifier_widths() {
    let spec = ArchSpec::full_scale();
    let dis = Discriminator::build(&spec, &mut rng(5)).unwrap();
    assert_eq!(dis.fc_widths(), (2048, 512, 5));
    let clf = Classifier::build(&spec, &mut rng(6)).unwrap();
    assert_eq!(clf.fc_input(), 64);
    let p = clf.classify(&random(&[2, 512, 4, 4], 7)).unwrap();
    assert_eq!(p.shape(), &[2, 2]);
}

#[test]
fn desk_encoder_ladder() {
    let enc = Encoder::build(&desk(), &mut rng(1)).unwrap();
    assert_eq!(enc.layer_channels(), vec![8, 16, 32, 64]);
    let z = enc.encode(&random(&[3, 1, 32, 32], 2)).unwrap();
    assert_eq!(z.shape(), &[3, 64, 2, 2]);
}

#[test]
fn builds_are_seed_deterministic() {
    let a = Encoder::build(&desk(), &mut rng(9)).unwrap();
    let b = Encoder::build(&desk(), &mut rng(9)).unwrap();
    let c = Encoder::build(&desk(), &mut rng(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn batched_encoding_matches_single() {
    let enc = Encoder::build(&desk(), &mut rng(1)).unwrap();
    let x = random(&[4, 1, 32, 32], 11);
    let z = enc.encode(&x).unwrap();
    for i in 0..4 {
        let zi = enc.encode(&x.slice_outer(i, i + 1).unwrap()).unwrap();
        let row = z.slice_outer(i, i + 1).unwrap();
        for (a, b) in zi.data().iter().zip(row.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn zero_parameters_give_zero_latent() {
    let mut enc = Encoder::build(&desk(), &mut rng(1)).unwrap();
    for p in enc.parameters_mut() {
        p.data_mut().fill(0.0);
    }
    let z = enc.encode(&random(&[2, 1, 32, 32], 3)).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_input_size_is_rejected() {
    let enc = Encoder::build(&desk(), &mut rng(1)).unwrap();
    assert!(matches!(enc.encode(&random(&[1, 1, 16, 16], 1)), Err(Error::InvalidArgument(_))));
    let dec = Decoder::build(&desk(), 5, &mut rng(1)).unwrap();
    assert!(dec.decode(&random(&[1, 32, 2, 2], 1), &[0]).is_err());
    let dis = Discriminator::build(&desk(), &mut rng(1)).unwrap();
    assert!(dis.discriminate(&random(&[1, 64, 4, 4], 1)).is_err());
}

#[test]
fn attr_planes_examples() {
    let p = attr_planes(1, 5, 3, 2).unwrap();
    for k in 0..5 {
        let expect = if k == 1 { 1.0 } else { 0.0 };
        assert!(p.data()[k * 6..(k + 1) * 6].iter().all(|&v| v == expect));
    }
    for pix in 0..6 {
        let s: f32 = (0..5).map(|k| p.data()[k * 6 + pix]).sum();
        assert_eq!(s, 1.0);
    }
    assert_eq!(attr_planes(0, 2, 1, 1).unwrap().data(), &[1.0, 0.0]);
    assert!(matches!(attr_planes(5, 5, 1, 1), Err(Error::InvalidArgument(_))));
}

#[test]
fn attribute_swap_changes_every_layer_input() {
    let dec = Decoder::build(&desk(), 5, &mut rng(2)).unwrap();
    let z = random(&[1, 64, 2, 2], 8);
    let taps = |y: usize| {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let (_, taps) = dec.forward_traced(&mut g, zv, &[y]).unwrap();
        taps.iter().map(|&t| g.value(t).clone()).collect::<Vec<_>>()
    };
    let (a, b) = (taps(1), taps(3));
    let differing = |ta: &Tensor, tb: &Tensor| {
        let hw = ta.shape()[2] * ta.shape()[3];
        (0..ta.shape()[1])
            .filter(|&ch| ta.data()[ch * hw..(ch + 1) * hw] != tb.data()[ch * hw..(ch + 1) * hw])
            .collect::<Vec<usize>>()
    };
    assert_eq!(differing(&a[0], &b[0]), vec![65, 67]);
    for (ta, tb) in a.iter().zip(&b) {
        let c = ta.shape()[1];
        let d = differing(ta, tb);
        assert!(d.contains(&(c - 4)) && d.contains(&(c - 2)));
    }
}

#[test]
fn vanilla_decoder_has_no_planes() {
    let dec = Decoder::build(&desk(), 0, &mut rng(2)).unwrap();
    assert_eq!(dec.layer_input_channels()[0], 64);
    assert!(Decoder::build(&desk(), 3, &mut rng(2)).is_err());
}

#[test]
fn untrained_discriminator_is_near_chance() {
    let dis = Discriminator::build(&desk(), &mut rng(4)).unwrap();
    let p = dis.discriminate(&random(&[1000, 64, 2, 2], 12)).unwrap();
    let mut mean_max = 0.0;
    for row in p.data().chunks(5) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-5);
        mean_max += row.iter().cloned().fold(0.0f32, f32::max) as f64 / 1000.0;
    }
    assert!((0.15..=0.45).contains(&mean_max), "{mean_max}");
}

#[test]
fn classifier_eval_is_deterministic() {
    let mut clf = Classifier::build(&desk(), &mut rng(4)).unwrap();
    let z = random(&[6, 64, 2, 2], 13);
    // move the running stats off their defaults first
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    clf.forward(&mut g, zv, Mode::Train, false, &mut rng(0)).unwrap();
    let a = clf.classify(&z).unwrap();
    assert_eq!(a, clf.classify(&z).unwrap());
    for row in a.data().chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() <= 1e-5);
    }
}

#[test]
fn classifier_too_small_for_pooling() {
    let spec = ArchSpec {
        classifier_stride: 2,
        ..desk()
    };
    assert!(matches!(Classifier::build(&spec, &mut rng(1)), Err(Error::InvalidArgument(_))));
}

fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k + c_out
}

#[test]
fn parameter_counts_follow_the_spec() {
    let spec = ArchSpec::full_scale();
    let ladder = [3, 16, 32, 64, 128, 256, 512];
    let enc: usize = ladder.windows(2).map(|w| conv_params(w[0], w[1], 4) + 2 * w[1]).sum();
    assert_eq!(Encoder::build(&spec, &mut rng(1)).unwrap().param_count(), enc);
    let mut dec = 0;
    for i in (1..ladder.len()).rev() {
        dec += conv_params(ladder[i] + 5, ladder[i - 1], 4);
        if i > 1 {
            dec += 2 * ladder[i - 1];
        }
    }
    assert_eq!(Decoder::build(&spec, 5, &mut rng(1)).unwrap().param_count(), dec);
    let dis = conv_params(512, 512, 4) + 2 * 512 + 2048 * 512 + 512 + 512 * 5 + 5;
    assert_eq!(Discriminator::build(&spec, &mut rng(1)).unwrap().param_count(), dis);
    let clf = [512, 512, 128, 64, 16]
        .windows(2)
        .map(|w| conv_params(w[0], w[1], 3) + 2 * w[1])
        .sum::<usize>()
        + 64 * 2
        + 2;
    assert_eq!(Classifier::build(&spec, &mut rng(1)).unwrap().param_count(), clf);
}

fn trained_stats<M: Network>(m: &mut M) {
    for (i, s) in m.bn_states_mut().iter_mut().enumerate() {
        for (j, v) in s.running_mean.iter_mut().enumerate() {
            *v = 0.01 * (i + j) as f32;
        }
        for (j, v) in s.running_var.iter_mut().enumerate() {
            *v = 1.0 + 0.1 * ((i * 7 + j) % 5) as f32;
        }
    }
}

#[test]
fn model_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut clf = Classifier::build(&desk(), &mut rng(3)).unwrap();
    trained_stats(&mut clf);
    let path = dir.path().join("clf.bin");
    save_model(&clf, &path, Some("fader")).unwrap();
    let (back, header) = load_model::<Classifier>(&path).unwrap();
    assert_eq!(back, clf);
    assert_eq!(header.provenance(), Some("fader"));
    let z = random(&[3, 64, 2, 2], 5);
    assert_eq!(back.classify(&z).unwrap(), clf.classify(&z).unwrap());
    let path2 = dir.path().join("clf2.bin");
    save_model(&back, &path2, Some("fader")).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

    let mut dec = Decoder::build(&desk(), 5, &mut rng(4)).unwrap();
    trained_stats(&mut dec);
    let bytes = encode_model(&dec, None);
    let (back, header) = decode_model::<Decoder>(&bytes).unwrap();
    assert_eq!(back, dec);
    assert_eq!(header.get("attr_planes"), Some("5"));
    assert_eq!(header.spec, desk());
}

#[test]
fn corrupt_model_files_are_rejected() {
    let enc = Encoder::build(&desk(), &mut rng(3)).unwrap();
    let bytes = encode_model(&enc, None);
    for cut in [3, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_model::<Encoder>(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    assert!(matches!(decode_model::<Decoder>(&bytes), Err(Error::Format { .. })));
}

fn small_spec() -> impl Strategy<Value = ArchSpec> {
    (1usize..=3, 2usize..=4, 0usize..=2, 2usize..=4, 0u32..=2).prop_map(|(c, depth, extra, base, k)| {
        let base = base * 2;
        ArchSpec {
            input_channels: c,
            input_size: 1 << (depth + 1 + extra.min(1)),
            depth,
            base_channels: base,
            num_attrs: 2 + k as usize,
            latent_channels: base << (depth - 1),
            leaky_slope: 0.2,
            dis_hidden: 8,
            classifier_channels: vec![8, 4],
            classifier_stride: 1,
            classifier_pool_after: 2,
            dropout: 0.3,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn autoencoder_preserves_input_shape(spec in small_spec(), seed in 0u64..1000) {
        let enc = Encoder::build(&spec, &mut rng(seed)).unwrap();
        for planes in [0, spec.num_attrs] {
            let dec = Decoder::build(&spec, planes, &mut rng(seed + 1)).unwrap();
            let x = random(&[2, spec.input_channels, spec.input_size, spec.input_size], seed);
            let out = dec.decode(&enc.encode(&x).unwrap(), &[0, spec.num_attrs - 1]).unwrap();
            prop_assert_eq!(out.shape(), x.shape());
        }
    }

    #[test]
    fn outputs_are_probability_vectors(spec in small_spec(), seed in 0u64..1000, scale in 0.0f32..50.0) {
        let mut z = random(&[3, spec.latent_channels, spec.latent_size(), spec.latent_size()], seed);
        z.data_mut().iter_mut().for_each(|v| *v *= scale);
        let k = spec.num_attrs;
        let dis = Discriminator::build(&spec, &mut rng(seed)).unwrap();
        let clf = Classifier::build(&spec, &mut rng(seed)).unwrap();
        for (p, width) in [(dis.discriminate(&z).unwrap(), k), (clf.classify(&z).unwrap(), 2)] {
            for row in p.data().chunks(width) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
            }
        }
    }
}
