//! Metrics checked against straightforward re-derivations that share no code
//! with the library.

mod oracles;

use fusioninn::metrics::{q_fmi, q_ncie, q_p, q_ssim_fusion, q_xy};
use fusioninn::Tensor;
use oracles::*;
use proptest::prelude::*;

#[test]
fn metrics_match_brute_force_on_random_triples() {
    for seed in 0..20 {
        let [a, b, y] = triple(seed);
        let (ia, ib, iy) = (to_img(&a), to_img(&b), to_img(&y));
        let ssim = q_ssim_fusion(&a, &b, &y).unwrap().0.value;
        let ssim_ref = 0.5 * (ssim_oracle(&ia, &iy) + ssim_oracle(&ib, &iy));
        assert!((ssim - ssim_ref).abs() < 1e-10, "ssim seed {seed}: {ssim} vs {ssim_ref}");
        let fmi = q_fmi(&a, &b, &y).unwrap().value;
        assert!((fmi - fmi_oracle(&ia, &ib, &iy)).abs() < 1e-10, "fmi seed {seed}");
        let ncie = q_ncie(&a, &b, &y).unwrap().value;
        assert!((ncie - ncie_oracle(&ia, &ib, &iy)).abs() < 1e-8, "ncie seed {seed}");
        let xy = q_xy(&a, &b, &y).unwrap().value;
        assert!((xy - xy_oracle(&ia, &ib, &iy)).abs() < 1e-10, "xy seed {seed}");
        let p = q_p(&a, &b, &y).unwrap().value;
        assert!((p - qp_oracle(&ia, &ib, &iy)).abs() < 1e-10, "q_p seed {seed}: {p}");
    }
}

#[test]
fn eigen_oracle_agrees_with_known_spectrum() {
    let e = eig3_oracle([[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]]);
    let mut e = e.to_vec();
    e.sort_by(f64::total_cmp);
    for (got, want) in e.iter().zip([1.0, 3.0, 5.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn fmi_of_independent_noise_is_low() {
    // The plug-in estimate carries a small-sample bias that shrinks with the
    // number of pixels: about 0.42 at 64x64 and 0.064 at 256x256.
    let (a, b, y) = (uniform(100, 256), uniform(101, 256), uniform(102, 256));
    let v = q_fmi(&a, &b, &y).unwrap().value;
    assert!(v < 0.2, "fmi on 256x256 noise {v}");
    let (a, b, y) = (uniform(100, 64), uniform(101, 64), uniform(102, 64));
    let small = q_fmi(&a, &b, &y).unwrap().value;
    assert!((0.35..0.5).contains(&small), "fmi on 64x64 noise {small}");
    assert!(small > v);
}

#[test]
fn ncie_of_independent_noise_sits_at_the_baseline() {
    let (a, b, y) = (uniform(200, 256), uniform(201, 256), uniform(202, 256));
    let v = q_ncie(&a, &b, &y).unwrap().value;
    assert!((v - 0.805).abs() < 0.01, "ncie on noise {v}");
    let x = uniform(203, 256);
    assert!(q_ncie(&x, &x, &x).unwrap().value > v);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ncie_ignores_a_shared_pixel_shuffle(seed in 0u64..1000, key in 0u64..1000) {
        let [a, b, y] = triple(seed);
        let mut order: Vec<usize> = (0..256).collect();
        // Deterministic shuffle keyed by `key`.
        order.sort_by_key(|&i| (i as u64).wrapping_mul(2654435761).wrapping_add(key) % 1021);
        let shuffle = |t: &Tensor<f64>| Tensor::from_fn(&[16, 16], |i| t.data()[order[i]]);
        let before = q_ncie(&a, &b, &y).unwrap().value;
        let after = q_ncie(&shuffle(&a), &shuffle(&b), &shuffle(&y)).unwrap().value;
        prop_assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_range(seed in 0u64..1000) {
        let [a, b, y] = triple(seed);
        let fmi = q_fmi(&a, &b, &y).unwrap().value;
        let ncie = q_ncie(&a, &b, &y).unwrap().value;
        let xy = q_xy(&a, &b, &y).unwrap().value;
        let p = q_p(&a, &b, &y).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&fmi));
        prop_assert!((0.0..=1.0).contains(&ncie));
        prop_assert!((0.0..=1.0).contains(&xy));
        prop_assert!((-1.0..=1.0).contains(&p));
    }
}
