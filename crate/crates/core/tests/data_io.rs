use std::fs;

use fusioninn::data::{
    dataset_split, load_grayscale, load_pairs, save_grayscale, save_pairs, synth_dataset, synth_pair,
    DataError, ImagePair, SynthConfig,
};
use fusioninn::latent::{sample_latent, LatentKind, LatentSpec};
use fusioninn::losses::{q_ssim, SsimConfig};
use fusioninn::Tensor;
use proptest::prelude::*;

#[test]
fn pgm_round_trip_stays_within_half_a_step() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pgm");
    let x: Tensor<f64> = sample_latent(&LatentSpec::new(LatentKind::Uniform01, 3), &[20, 31], 0);
    save_grayscale(&x, &path).unwrap();
    let back: Tensor<f64> = load_grayscale(&path).unwrap();
    assert_eq!(back.shape(), &[20, 31]);
    assert!(back.max_abs_diff(&x) <= 1.0 / 510.0 + 1e-15);
}

#[test]
fn pgm_header_and_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zeros.pgm");
    let mut bytes = b"P5\n# a comment\n3 2\n255\n".to_vec();
    bytes.extend([0, 0, 0, 255, 128, 0]);
    fs::write(&path, &bytes).unwrap();
    let t: Tensor<f64> = load_grayscale(&path).unwrap();
    assert_eq!(t.shape(), &[2, 3]);
    assert_eq!(&t.data()[..4], &[0.0, 0.0, 0.0, 1.0]);
    assert_eq!(t.data()[4], 128.0 / 255.0);

    let path16 = dir.path().join("deep.pgm");
    let mut bytes = b"P5 2 1 65535\n".to_vec();
    bytes.extend([0xFF, 0xFF, 0x80, 0x00]);
    fs::write(&path16, &bytes).unwrap();
    let t: Tensor<f64> = load_grayscale(&path16).unwrap();
    assert_eq!(t.data(), &[1.0, 32768.0 / 65535.0]);
}

#[test]
fn saving_rounds_half_to_even() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.pgm");
    // 0.5 * 255 = 127.5 rounds to 128; 2.5 / 255 * 255 = 2.5 rounds to 2.
    let t = Tensor::new(vec![1, 2], vec![0.5f64, 2.5 / 255.0]).unwrap();
    save_grayscale(&t, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[bytes.len() - 2..], &[128, 2]);
}

#[test]
fn malformed_files_are_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[u8]); 4] = [
        ("color.ppm", b"P6\n2 2\n255\n............"),
        ("empty.pgm", b"P5\n0 4\n255\n"),
        ("short.pgm", b"P5\n4 4\n255\n\x00\x01"),
        ("text.pgm", b"hello"),
    ];
    for (name, bytes) in cases {
        let path = dir.path().join(name);
        fs::write(&path, bytes).unwrap();
        let err = load_grayscale::<f64>(&path).unwrap_err();
        assert!(matches!(err, DataError::Format { .. }), "{name}: {err}");
    }
    let missing = load_grayscale::<f64>(&dir.path().join("nope.pgm")).unwrap_err();
    assert!(matches!(missing, DataError::Io { .. }));
}

#[test]
fn pair_directories_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { size: 16, ..Default::default() };
    let pairs: Vec<ImagePair<f64>> = synth_dataset(&cfg, 0, 4);
    save_pairs(&pairs, dir.path()).unwrap();
    let back: Vec<ImagePair<f64>> = load_pairs(dir.path()).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in pairs.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert!(a.x1.max_abs_diff(&b.x1) <= 1.0 / 510.0 + 1e-15);
    }
}

#[test]
fn synthetic_modalities_differ() {
    // Monte-Carlo over 500 default pairs: at least 95% must have SSIM < 0.9.
    let cfg = SynthConfig::default();
    let ssim = SsimConfig::default();
    let below = (0..500)
        .filter(|&i| {
            let p: ImagePair<f64> = synth_pair(&cfg, i);
            q_ssim(&p.x1, &p.x2, &ssim).unwrap() < 0.9
        })
        .count();
    assert!(below >= 475, "{below} of 500 pairs below 0.9");
}

#[test]
fn generated_pairs_satisfy_invariants() {
    for cfg in [SynthConfig::default(), SynthConfig { size: 16, seed: 9, ..Default::default() }] {
        for i in 0..1000 {
            let p: ImagePair<f64> = synth_pair(&cfg, i);
            assert!(ImagePair::new(p.id.clone(), p.x1, p.x2).is_ok(), "pair {i}");
        }
    }
}

proptest! {
    #[test]
    fn split_is_a_seeded_partition(n in 2usize..40, fraction in 0.05f64..0.95, seed in 0u64..100) {
        let cfg = SynthConfig { size: 16, ..Default::default() };
        let pairs: Vec<ImagePair<f32>> = synth_dataset(&cfg, 0, n);
        let (train, val) = dataset_split(pairs.clone(), fraction, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert!(!train.is_empty() && !val.is_empty());
        let mut ids: Vec<_> = train.iter().chain(&val).map(|p| p.id.clone()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        let again = dataset_split(pairs, fraction, seed).unwrap();
        prop_assert_eq!(again.0, train);
    }
}
