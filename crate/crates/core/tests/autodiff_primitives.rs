use fusioninn::autodiff::{finite_diff_check, FaultSite, GradCheckOptions, GradCheckReport, Tape, Var};
use fusioninn::flow::{FlowModel, ModelConfig};
use fusioninn::latent::{sample_latent, LatentKind, LatentSpec};
use fusioninn::losses::{ssim_on, SsimConfig};
use fusioninn::trainer::{gradient_check_model, TrainConfig};
use fusioninn::{Tensor, TensorError};
use proptest::prelude::*;

fn uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let u: Tensor<f64> = sample_latent(&LatentSpec::new(LatentKind::Uniform01, seed), shape, 0);
    u.map(|v| lo + (hi - lo) * v)
}

/// Random inputs in [-2, 2] kept at least `gap` away from zero.
fn off_zero(seed: u64, shape: &[usize], gap: f64) -> Tensor<f64> {
    uniform(seed, shape, -2.0, 2.0).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// `sum(op(params) * w)` for a fixed random weight tensor `w`, so every output
/// coordinate contributes with a distinct coefficient.
fn check_weighted<F>(params: &[Tensor<f64>], seed: u64, op: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    finite_diff_check(
        |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var, TensorError> {
            let out = op(tape, vars)?;
            let w = uniform(seed ^ 0x5eed, tape.shape(out), -1.0, 1.0);
            let w = tape.constant(w);
            let prod = tape.mul(out, w)?;
            tape.sum(prod)
        },
        params,
        GradCheckOptions::default(),
    )
    .unwrap()
}

fn assert_passes(name: &str, report: GradCheckReport) {
    assert!(
        report.passed(),
        "{name}: max relative error {:.3e}, failing {:?}",
        report.max_rel_error(),
        report.failing_params()
    );
}

#[test]
fn elementwise_unary_gradients() {
    let shape = [2, 3, 4, 4];
    let x = uniform(1, &shape, -2.0, 2.0);
    assert_passes("exp", check_weighted(&[x.clone()], 1, |t, v| t.exp(v[0])));
    assert_passes("sigmoid", check_weighted(&[x.clone()], 2, |t, v| t.sigmoid(v[0])));
    assert_passes("square", check_weighted(&[x.clone()], 3, |t, v| t.square(v[0])));
    assert_passes("scale", check_weighted(&[x.clone()], 4, |t, v| t.scale(v[0], -1.7)));
    assert_passes("add_scalar", check_weighted(&[x.clone()], 5, |t, v| t.add_scalar(v[0], 0.3)));
    assert_passes("soft_clamp", check_weighted(&[x.clone()], 6, |t, v| t.soft_clamp(v[0], 1.5)));
    let away = off_zero(2, &shape, 1e-3);
    assert_passes("relu", check_weighted(&[away], 7, |t, v| t.relu(v[0])));
    let unit = uniform(3, &shape, 0.05, 0.95);
    assert_passes("logit", check_weighted(&[unit], 8, |t, v| t.logit(v[0], 1e-6)));
}

#[test]
fn elementwise_binary_gradients() {
    let shape = [1, 2, 3, 5];
    let a = uniform(10, &shape, -2.0, 2.0);
    let b = uniform(11, &shape, -2.0, 2.0);
    let pair = [a.clone(), b.clone()];
    assert_passes("add", check_weighted(&pair, 1, |t, v| t.add(v[0], v[1])));
    assert_passes("sub", check_weighted(&pair, 2, |t, v| t.sub(v[0], v[1])));
    assert_passes("mul", check_weighted(&pair, 3, |t, v| t.mul(v[0], v[1])));
    let denom = off_zero(12, &shape, 0.5);
    assert_passes("div", check_weighted(&[a, denom], 4, |t, v| t.div(v[0], v[1])));
}

#[test]
fn reduction_gradients() {
    let x = uniform(20, &[2, 2, 3, 3], -2.0, 2.0);
    let opts = GradCheckOptions::default();
    for (name, mean) in [("sum", false), ("mean", true)] {
        let report = finite_diff_check(
            |t: &mut Tape<f64>, v: &[Var]| {
                let s = t.square(v[0])?;
                if mean {
                    t.mean(s)
                } else {
                    t.sum(s)
                }
            },
            &[x.clone()],
            opts,
        )
        .unwrap();
        assert_passes(name, report);
    }
}

#[test]
fn layout_gradients() {
    let x = uniform(30, &[2, 4, 4, 6], -2.0, 2.0);
    assert_passes("reshape", check_weighted(&[x.clone()], 1, |t, v| t.reshape(v[0], &[8, 24])));
    assert_passes("squeeze", check_weighted(&[x.clone()], 2, |t, v| t.squeeze2x2(v[0])));
    assert_passes("unsqueeze", check_weighted(&[x.clone()], 3, |t, v| t.unsqueeze2x2(v[0])));
    assert_passes(
        "permute",
        check_weighted(&[x.clone()], 4, |t, v| t.permute_channels(v[0], &[2, 0, 3, 1])),
    );
    assert_passes("slice", check_weighted(&[x.clone()], 5, |t, v| t.slice_channels(v[0], 1, 2)));
    let y = uniform(31, &[2, 3, 4, 6], -2.0, 2.0);
    assert_passes("concat", check_weighted(&[x, y], 6, |t, v| t.concat_channels(v[0], v[1])));
}

#[test]
fn filter_and_distance_gradients() {
    let x = uniform(40, &[1, 2, 7, 6], -2.0, 2.0);
    let taps = [0.25, 0.5, 0.25];
    assert_passes("filter_valid", check_weighted(&[x], 1, |t, v| t.filter_valid(v[0], &taps)));
    let a = uniform(41, &[5, 3], -2.0, 2.0);
    let b = uniform(42, &[4, 3], -2.0, 2.0);
    assert_passes("pairwise_sq_dist", check_weighted(&[a, b], 2, |t, v| t.pairwise_sq_dist(v[0], v[1])));
}

#[test]
fn conv2d_gradients_for_several_geometries() {
    // (batch, in, out, h, w, kernel, padding)
    let cases = [
        (1, 2, 3, 5, 5, 3, 1),
        (2, 1, 2, 4, 6, 3, 0),
        (1, 3, 2, 3, 4, 1, 0),
        (1, 2, 2, 6, 5, 5, 2),
        (1, 1, 1, 1, 3, 3, 1),
    ];
    for (i, &(b, c, o, h, w, k, p)) in cases.iter().enumerate() {
        let s = 100 + 10 * i as u64;
        let params = [
            uniform(s, &[b, c, h, w], -2.0, 2.0),
            uniform(s + 1, &[o, c, k, k], -1.0, 1.0),
            uniform(s + 2, &[o], -1.0, 1.0),
        ];
        let report = check_weighted(&params, s, |t, v| t.conv2d(v[0], v[1], v[2], (p, p)));
        assert_passes(&format!("conv2d case {i}"), report);
    }
}

#[test]
fn coupling_block_with_ssim_loss() {
    let mut model = FlowModel::<f64>::new(ModelConfig {
        blocks: 1,
        hidden_channels: 3,
        sigmoid_head: true,
        ..ModelConfig::default()
    })
    .unwrap();
    model.randomize_output_layers(3, 0.2);
    let x1 = uniform(50, &[1, 1, 8, 8], 0.05, 0.95);
    let x2 = uniform(51, &[1, 1, 8, 8], 0.05, 0.95);
    let cfg = SsimConfig::default();
    let params: Vec<Tensor<f64>> = model.params().into_iter().cloned().collect();
    let report = finite_diff_check(
        |t: &mut Tape<f64>, v: &[Var]| -> Result<Var, Box<dyn std::error::Error + Send + Sync>> {
            let mv = fusioninn::flow::ModelVars(v.to_vec());
            let a = t.constant(x1.clone());
            let b = t.constant(x2.clone());
            let (y, _z) = model.forward_on(t, &mv, a, b)?;
            let s1 = ssim_on(t, y, a, &cfg)?;
            let s2 = ssim_on(t, y, b, &cfg)?;
            let s = t.add(s1, s2)?;
            Ok(t.scale(s, -0.5)?)
        },
        &params,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert_passes("coupling + ssim", report);
}

fn two_block_model() -> FlowModel<f64> {
    let mut m = FlowModel::new(ModelConfig {
        blocks: 2,
        hidden_channels: 4,
        ..ModelConfig::default()
    })
    .unwrap();
    m.randomize_output_layers(9, 0.1);
    m
}

#[test]
fn total_objective_on_two_blocks() {
    let m = two_block_model();
    let x1 = uniform(60, &[2, 1, 8, 8], 0.05, 0.95);
    let x2 = uniform(61, &[2, 1, 8, 8], 0.05, 0.95);
    let report =
        gradient_check_model(&m, &x1, &x2, &TrainConfig::default(), GradCheckOptions::default(), None).unwrap();
    assert_passes("total objective", report);
}

#[test]
fn corrupted_backward_rules_are_caught() {
    let m = two_block_model();
    let x1 = uniform(60, &[2, 1, 8, 8], 0.05, 0.95);
    let x2 = uniform(61, &[2, 1, 8, 8], 0.05, 0.95);
    for site in [FaultSite::ConvKernel, FaultSite::ConvBias, FaultSite::Exp, FaultSite::Sigmoid] {
        let report = gradient_check_model(
            &m,
            &x1,
            &x2,
            &TrainConfig::default(),
            GradCheckOptions::default(),
            Some((site, 3.0)),
        )
        .unwrap();
        assert!(!report.passed(), "{site:?} fault went unnoticed");
    }
}

#[test]
fn reductions_are_bitwise_reproducible() {
    let x = uniform(70, &[4, 3, 17, 13], -1e3, 1e3);
    let run = || {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let s = t.sum(v).unwrap();
        let m = t.mean(v).unwrap();
        (t.value(s).item().to_bits(), t.value(m).item().to_bits())
    };
    let first = run();
    for _ in 0..5 {
        assert_eq!(run(), first);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exp_and_sigmoid_match_finite_differences(seed in 0u64..10_000) {
        let x = uniform(seed, &[1, 1, 3, 3], -2.0, 2.0);
        let r = check_weighted(&[x.clone()], seed, |t, v| t.exp(v[0]));
        prop_assert!(r.passed(), "exp {:.3e}", r.max_rel_error());
        let r = check_weighted(&[x], seed, |t, v| t.sigmoid(v[0]));
        prop_assert!(r.passed(), "sigmoid {:.3e}", r.max_rel_error());
    }

    #[test]
    fn squeeze_round_trip_is_bitwise(seed in 0u64..10_000, b in 1usize..3, c in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let x = uniform(seed, &[b, c, 2 * h, 2 * w], -5.0, 5.0);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let s = t.squeeze2x2(v).unwrap();
        prop_assert_eq!(t.shape(s), &[b, 4 * c, h, w][..]);
        let u = t.unsqueeze2x2(s).unwrap();
        prop_assert_eq!(t.value(u), &x);
    }
}
