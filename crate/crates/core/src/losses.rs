//! Differentiable training objectives.
//!
//! Every loss is recorded on a [`Tape`] so that it can be differentiated with
//! respect to the network parameters, or with respect to the images when they
//! are recorded as trainable leaves. Squared-error terms are averaged over
//! pixels (and batch) so their magnitude is comparable with the SSIM terms.

use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Mixing weights: `lambda` trades SSIM against squared error, `alpha` trades
/// the forward objectives against decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.8,
            alpha: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(lambda: f64, alpha: f64) -> Result<Self, TensorError> {
        let w = LossWeights { lambda, alpha };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TensorError::contract(
                    "loss weights",
                    format!("{name} = {v} is outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

/// Gaussian-window SSIM parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    /// Window extent; shrunk to the largest odd size that fits smaller images.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Window extent used for an `h x w` image.
    pub fn window_for(&self, h: usize, w: usize) -> usize {
        let fit = h.min(w);
        let fit = if fit % 2 == 0 { fit.saturating_sub(1) } else { fit };
        self.window.min(fit).max(1)
    }

    /// Normalised 1-d Gaussian taps; their outer product is the 2-d window.
    pub fn taps(&self, size: usize) -> Vec<f64> {
        let c = (size as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..size)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

fn as_image4(t: &Tensor<impl Scalar>) -> Vec<usize> {
    match t.shape() {
        [h, w] => vec![1, 1, *h, *w],
        [c, h, w] => vec![1, *c, *h, *w],
        s => s.to_vec(),
    }
}

/// Mean of the local SSIM map between `a` and `b` (`[B, C, H, W]`).
pub fn ssim_on<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    cfg: &SsimConfig,
) -> Result<Var, TensorError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op: "ssim",
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        });
    }
    let [_, _, h, w] = tape.value(a).dims4("ssim")?;
    let taps: Vec<T> = cfg.taps(cfg.window_for(h, w)).into_iter().map(T::of).collect();
    let mu_a = tape.filter_valid(a, &taps)?;
    let mu_b = tape.filter_valid(b, &taps)?;
    let aa = tape.square(a)?;
    let bb = tape.square(b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.filter_valid(aa, &taps)?;
    let e_bb = tape.filter_valid(bb, &taps)?;
    let e_ab = tape.filter_valid(ab, &taps)?;
    let mu_a2 = tape.square(mu_a)?;
    let mu_b2 = tape.square(mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_a2)?;
    let var_b = tape.sub(e_bb, mu_b2)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let (c1, c2) = (T::of(cfg.c1()), T::of(cfg.c2()));
    let two = T::of(2.0);
    let lum_num = tape.scale(mu_ab, two)?;
    let lum_num = tape.add_scalar(lum_num, c1)?;
    let cs_num = tape.scale(cov, two)?;
    let cs_num = tape.add_scalar(cs_num, c2)?;
    let num = tape.mul(lum_num, cs_num)?;
    let lum_den = tape.add(mu_a2, mu_b2)?;
    let lum_den = tape.add_scalar(lum_den, c1)?;
    let cs_den = tape.add(var_a, var_b)?;
    let cs_den = tape.add_scalar(cs_den, c2)?;
    let den = tape.mul(lum_den, cs_den)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// SSIM between two images of equal shape (`[H, W]` or `[B, C, H, W]`).
pub fn q_ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<T, TensorError> {
    a.expect_same_shape("ssim", b)?;
    let mut tape = Tape::new();
    let va = tape.constant(a.reshape(&as_image4(a))?);
    let vb = tape.constant(b.reshape(&as_image4(b))?);
    let s = ssim_on(&mut tape, va, vb, cfg)?;
    Ok(tape.value(s).item())
}

fn mean_sq_diff<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, TensorError> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Mixed SSIM / squared-error objective between two reference images and
/// their counterparts.
#[derive(Debug, Clone, Copy)]
pub struct MixedLoss {
    pub total: Var,
    /// `(1 - SSIM(ref1, cand1)) + (1 - SSIM(ref2, cand2))`.
    pub ssim: Var,
    /// Per-pixel mean squared error summed over both pairs.
    pub l2: Var,
}

fn mixed_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pairs: [(Var, Var); 2],
    lambda: f64,
    cfg: &SsimConfig,
) -> Result<MixedLoss, TensorError> {
    let s1 = ssim_on(tape, pairs[0].0, pairs[0].1, cfg)?;
    let s2 = ssim_on(tape, pairs[1].0, pairs[1].1, cfg)?;
    let s = tape.add(s1, s2)?;
    let neg = tape.scale(s, -T::one())?;
    let ssim = tape.add_scalar(neg, T::of(2.0))?;
    let m1 = mean_sq_diff(tape, pairs[0].1, pairs[0].0)?;
    let m2 = mean_sq_diff(tape, pairs[1].1, pairs[1].0)?;
    let l2 = tape.add(m1, m2)?;
    let ws = tape.scale(ssim, T::of(lambda))?;
    let wl = tape.scale(l2, T::of(1.0 - lambda))?;
    let total = tape.add(ws, wl)?;
    Ok(MixedLoss { total, ssim, l2 })
}

/// `lambda * L_ssim(x, y) + (1 - lambda) * L_l2(x, y)` for a fused image `y`.
pub fn loss_fusion_on<T: Scalar>(
    tape: &mut Tape<T>,
    x1: Var,
    x2: Var,
    y: Var,
    w: &LossWeights,
    cfg: &SsimConfig,
) -> Result<MixedLoss, TensorError> {
    mixed_loss(tape, [(x1, y), (x2, y)], w.lambda, cfg)
}

/// The same mix between each source and its reconstruction.
pub fn loss_dec_on<T: Scalar>(
    tape: &mut Tape<T>,
    x1: Var,
    x2: Var,
    x1_hat: Var,
    x2_hat: Var,
    w: &LossWeights,
    cfg: &SsimConfig,
) -> Result<MixedLoss, TensorError> {
    mixed_loss(tape, [(x1, x1_hat), (x2, x2_hat)], w.lambda, cfg)
}

/// `alpha * (fusion + latent) + (1 - alpha) * dec`.
pub fn loss_total_on<T: Scalar>(
    tape: &mut Tape<T>,
    fusion: Var,
    latent: Var,
    dec: Var,
    w: &LossWeights,
) -> Result<Var, TensorError> {
    let fwd = tape.add(fusion, latent)?;
    let fwd = tape.scale(fwd, T::of(w.alpha))?;
    let d = tape.scale(dec, T::of(1.0 - w.alpha))?;
    tape.add(fwd, d)
}

/// Scalar form of [`loss_total_on`], evaluated in the same order.
pub fn loss_total(fusion: f64, latent: f64, dec: f64, w: &LossWeights) -> f64 {
    w.alpha * (fusion + latent) + (1.0 - w.alpha) * dec
}

/// Inverse-multiquadratic kernel scales used by the latent MMD.
pub const MMD_SCALES: [f64; 3] = [0.2, 1.0, 5.0];

fn imq_mean<T: Scalar>(tape: &mut Tape<T>, dist: Var, scale: f64, dim: usize) -> Result<Var, TensorError> {
    let r = tape.scale(dist, T::of(1.0 / dim as f64))?;
    let den = tape.add_scalar(r, T::of(scale))?;
    let num = tape.constant(Tensor::full(tape.shape(den), T::of(scale)));
    let k = tape.div(num, den)?;
    tape.mean(k)
}

/// Biased squared MMD between two sample sets (rows after flattening the
/// trailing axes) with the kernel `sum_c c / (c + |a - b|^2 / d)`.
pub fn mmd_imq_on<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    scales: &[f64],
) -> Result<Var, TensorError> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.is_empty() || sb.is_empty() || sa[1..] != sb[1..] {
        return Err(TensorError::ShapeMismatch {
            op: "mmd",
            left: sa,
            right: sb,
        });
    }
    let dim: usize = sa[1..].iter().product();
    let a = tape.reshape(a, &[sa[0], dim])?;
    let b = tape.reshape(b, &[sb[0], dim])?;
    let daa = tape.pairwise_sq_dist(a, a)?;
    let dbb = tape.pairwise_sq_dist(b, b)?;
    let dab = tape.pairwise_sq_dist(a, b)?;
    let mut acc: Option<Var> = None;
    for &c in scales {
        let kaa = imq_mean(tape, daa, c, dim)?;
        let kbb = imq_mean(tape, dbb, c, dim)?;
        let kab = imq_mean(tape, dab, c, dim)?;
        let within = tape.add(kaa, kbb)?;
        let cross = tape.scale(kab, T::of(2.0))?;
        let term = tape.sub(within, cross)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| TensorError::contract("mmd", "no kernel scales given"))
}

/// Latent loss: MMD between a batch of latents and an equally sized batch
/// drawn from the prior.
pub fn mmd_latent_on<T: Scalar>(tape: &mut Tape<T>, z: Var, prior: Var) -> Result<Var, TensorError> {
    let (nz, np) = (tape.shape(z)[0], tape.shape(prior)[0]);
    if nz < 2 || np < 2 {
        return Err(TensorError::contract(
            "mmd_latent",
            format!("needs at least 2 samples per set, got {nz} and {np}"),
        ));
    }
    mmd_imq_on(tape, z, prior, &MMD_SCALES)
}

/// Value of [`mmd_latent_on`] for plain tensors.
pub fn mmd_latent<T: Scalar>(z: &Tensor<T>, prior: &Tensor<T>) -> Result<T, TensorError> {
    let mut tape = Tape::new();
    let a = tape.constant(z.clone());
    let b = tape.constant(prior.clone());
    let m = mmd_latent_on(&mut tape, a, b)?;
    Ok(tape.value(m).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{sample_latent, LatentKind, LatentSpec};

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, h, w], |i| f(i / w, i % w))
    }

    fn noise(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        sample_latent(&LatentSpec::new(LatentKind::Uniform01, seed), &[1, 1, h, w], 0)
    }

    #[test]
    fn window_taps_sum_to_one() {
        let cfg = SsimConfig::default();
        let taps = cfg.taps(11);
        let total: f64 = taps.iter().flat_map(|a| taps.iter().map(move |b| a * b)).sum();
        assert!((total - 1.0).abs() < 1e-14);
        assert_eq!(cfg.window_for(64, 64), 11);
        assert_eq!(cfg.window_for(8, 8), 7);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let x = noise(16, 16, 1);
        let s = q_ssim(&x, &x, &SsimConfig::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_constant_images_matches_closed_form() {
        let cfg = SsimConfig::default();
        let a = img(16, 16, |_, _| 0.5);
        let b = img(16, 16, |_, _| 0.25);
        let c1 = cfg.c1();
        let expected = (2.0 * 0.5 * 0.25 + c1) / (0.25 + 0.0625 + c1);
        let s = q_ssim(&a, &b, &cfg).unwrap();
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = noise(16, 16, 2);
        let b = noise(16, 16, 3);
        let cfg = SsimConfig::default();
        let ab = q_ssim(&a, &b, &cfg).unwrap();
        let ba = q_ssim(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn ssim_shape_mismatch() {
        let a = noise(16, 16, 2);
        let b = noise(16, 12, 3);
        assert!(q_ssim(&a, &b, &SsimConfig::default()).is_err());
    }

    fn fusion_value(x1: &Tensor<f64>, x2: &Tensor<f64>, y: &Tensor<f64>, w: LossWeights) -> (f64, f64, f64) {
        let mut tape = Tape::new();
        let (a, b, c) = (tape.constant(x1.clone()), tape.constant(x2.clone()), tape.constant(y.clone()));
        let l = loss_fusion_on(&mut tape, a, b, c, &w, &SsimConfig::default()).unwrap();
        (tape.value(l.total).item(), tape.value(l.ssim).item(), tape.value(l.l2).item())
    }

    #[test]
    fn fusion_loss_vanishes_for_identical_images() {
        let x = noise(16, 16, 4);
        let (total, _, _) = fusion_value(&x, &x, &x, LossWeights::default());
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn fusion_loss_endpoints() {
        let (x1, x2, y) = (noise(16, 16, 1), noise(16, 16, 2), noise(16, 16, 3));
        let (total, ssim, _) = fusion_value(&x1, &x2, &y, LossWeights::new(1.0, 0.5).unwrap());
        assert_eq!(total, ssim);
        let x1 = img(16, 16, |_, _| 0.0);
        let x2 = img(16, 16, |_, _| 1.0);
        let y = img(16, 16, |_, _| 0.5);
        let (total, _, l2) = fusion_value(&x1, &x2, &y, LossWeights::new(0.0, 0.5).unwrap());
        assert!((l2 - 0.5).abs() < 1e-15);
        assert!((total - 0.5).abs() < 1e-15);
    }

    #[test]
    fn decomposition_loss_cases() {
        let cfg = SsimConfig::default();
        let x1 = noise(16, 16, 5);
        let x2 = noise(16, 16, 6);
        let eval = |h1: &Tensor<f64>, h2: &Tensor<f64>, w: LossWeights| {
            let mut tape = Tape::new();
            let v: Vec<Var> = [&x1, &x2, h1, h2].iter().map(|t| tape.constant((*t).clone())).collect();
            let l = loss_dec_on(&mut tape, v[0], v[1], v[2], v[3], &w, &cfg).unwrap();
            (tape.value(l.total).item(), tape.value(l.ssim).item(), tape.value(l.l2).item())
        };
        let (perfect, _, _) = eval(&x1, &x2, LossWeights::default());
        assert!(perfect.abs() < 1e-12);
        let shifted = x1.map(|v| v + 0.1);
        let (total, _, l2) = eval(&shifted, &x2, LossWeights::new(0.0, 0.5).unwrap());
        assert!((l2 - 0.01).abs() < 1e-12);
        assert_eq!(total, l2);
        let (total, ssim, _) = eval(&shifted, &x2, LossWeights::new(1.0, 0.5).unwrap());
        assert_eq!(total, ssim);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::new(0.8, 0.5).unwrap();
        assert!((loss_total(0.4, 0.1, 0.6, &w) - 0.55).abs() < 1e-15);
        let one = LossWeights::new(0.8, 1.0).unwrap();
        assert_eq!(loss_total(0.4, 0.1, 0.6, &one), 0.4 + 0.1);
        let zero = LossWeights::new(0.8, 0.0).unwrap();
        assert_eq!(loss_total(0.4, 0.1, 0.6, &zero), 0.6);
        let mut tape = Tape::<f64>::new();
        let v: Vec<Var> = [0.4, 0.1, 0.6].iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
        let t = loss_total_on(&mut tape, v[0], v[1], v[2], &w).unwrap();
        assert_eq!(tape.value(t).item(), loss_total(0.4, 0.1, 0.6, &w));
    }

    #[test]
    fn weights_outside_unit_interval_are_rejected() {
        assert!(LossWeights::new(1.2, 0.5).is_err());
        assert!(LossWeights::new(0.5, -0.1).is_err());
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let z: Tensor<f64> = sample_latent(&LatentSpec::new(LatentKind::StandardNormal, 1), &[8, 1, 4, 4], 0);
        assert!(mmd_latent(&z, &z).unwrap().abs() < 1e-15);
    }

    #[test]
    fn mmd_two_point_closed_form() {
        let (d, c, scale) = (5usize, 0.7f64, 1.0f64);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, d]));
        let b = tape.constant(Tensor::full(&[1, d], c));
        let m = mmd_imq_on(&mut tape, a, b, &[scale]).unwrap();
        let expected = 2.0 - 2.0 * scale / (scale + c * c);
        assert!((tape.value(m).item() - expected).abs() < 1e-14);
    }

    #[test]
    fn mmd_latent_needs_two_samples() {
        let z = Tensor::<f64>::zeros(&[1, 4]);
        assert!(mmd_latent(&z, &z).is_err());
    }
}
