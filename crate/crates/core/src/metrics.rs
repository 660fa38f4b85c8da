//! Fusion quality metrics.
//!
//! All metrics take three single-channel images of equal size (`x1`, `x2`,
//! the sources, and `y`, the fused image) with values in `[0, 1]` and are
//! evaluated in `f64` regardless of the input scalar type. Degenerate inputs
//! (flat images, no gradients) score a defined value and set a flag instead
//! of failing.

use std::fmt;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::losses::{q_ssim, SsimConfig};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const BINS: usize = 256;

/// Sigmoid constants of the gradient-transfer metric.
pub const XY_GAMMA_G: f64 = 0.9994;
pub const XY_KAPPA_G: f64 = -15.0;
pub const XY_SIGMA_G: f64 = 0.5;
pub const XY_GAMMA_A: f64 = 0.9879;
pub const XY_KAPPA_A: f64 = -22.0;
pub const XY_SIGMA_A: f64 = 0.8;

/// Side of the sliding window used by [`q_p`].
pub const QP_WINDOW: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{metric}: image of shape {shape:?} is too small (needs at least {min}x{min})")]
    TooSmall {
        metric: &'static str,
        shape: Vec<usize>,
        min: usize,
    },
    #[error("{metric}: non-finite value")]
    NonFinite { metric: &'static str },
}

/// A metric value and whether a degenerate-input convention produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn ok(value: f64) -> Self {
        Score {
            value,
            degenerate: false,
        }
    }

    fn degenerate(value: f64) -> Self {
        Score {
            value,
            degenerate: true,
        }
    }
}

/// A single-channel image in row-major `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    /// Accepts `[H, W]` or any shape whose leading axes are all 1.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self, TensorError> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
            return Err(TensorError::contract(
                "metric",
                format!("expected a single image, got shape {s:?}"),
            ));
        }
        Ok(Plane {
            h: s[s.len() - 2],
            w: s[s.len() - 1],
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        })
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![1, 1, self.h, self.w], self.data.clone()).expect("consistent plane")
    }
}

fn planes<T: Scalar>(
    metric: &'static str,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    y: &Tensor<T>,
    min: usize,
) -> Result<[Plane; 3], MetricError> {
    x1.expect_same_shape(metric, x2)?;
    x1.expect_same_shape(metric, y)?;
    let p = [Plane::from_tensor(x1)?, Plane::from_tensor(x2)?, Plane::from_tensor(y)?];
    if p[0].h < min || p[0].w < min {
        return Err(MetricError::TooSmall {
            metric,
            shape: x1.shape().to_vec(),
            min,
        });
    }
    if p.iter().any(|q| q.data.iter().any(|v| !v.is_finite())) {
        return Err(MetricError::NonFinite { metric });
    }
    Ok(p)
}

/// Mean of the two source-to-fused SSIMs, with the per-source values.
pub fn q_ssim_fusion<T: Scalar>(
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    y: &Tensor<T>,
) -> Result<(Score, f64, f64), MetricError> {
    let [a, b, f] = planes("q_ssim", x1, x2, y, 1)?;
    let cfg = SsimConfig::default();
    let s1 = q_ssim(&a.to_tensor(), &f.to_tensor(), &cfg)?;
    let s2 = q_ssim(&b.to_tensor(), &f.to_tensor(), &cfg)?;
    Ok((Score::ok((s1 + s2) / 2.0), s1, s2))
}

/// Sobel responses `(gx, gy)` over the interior, each `(h-2) x (w-2)`.
pub fn sobel(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (p.h - 2, p.w - 2);
    let mut gx = Vec::with_capacity(oh * ow);
    let mut gy = Vec::with_capacity(oh * ow);
    for r in 1..p.h - 1 {
        for c in 1..p.w - 1 {
            let v = |dr: isize, dc: isize| p.at((r as isize + dr) as usize, (c as isize + dc) as usize);
            gx.push((v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1)));
            gy.push((v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1)));
        }
    }
    (gx, gy)
}

fn magnitude(gx: &[f64], gy: &[f64]) -> Vec<f64> {
    gx.iter().zip(gy).map(|(a, b)| a.hypot(*b)).collect()
}

/// Bin index of a value in `[0, 1]`.
pub fn quantize(v: f64) -> usize {
    ((v * BINS as f64).floor().max(0.0) as usize).min(BINS - 1)
}

/// Marginal and joint histograms of two equally long sequences of bins.
pub struct JointHistogram {
    pub n: usize,
    pub a: Vec<u64>,
    pub b: Vec<u64>,
    pub joint: Vec<u64>,
}

impl JointHistogram {
    pub fn new(a: &[usize], b: &[usize]) -> Self {
        let mut h = JointHistogram {
            n: a.len(),
            a: vec![0; BINS],
            b: vec![0; BINS],
            joint: vec![0; BINS * BINS],
        };
        for (&i, &j) in a.iter().zip(b) {
            h.a[i] += 1;
            h.b[j] += 1;
            h.joint[i * BINS + j] += 1;
        }
        h
    }

    /// Entropies `(H(a), H(b), H(a, b))` in nats.
    pub fn entropies(&self) -> (f64, f64, f64) {
        let n = self.n as f64;
        let ent = |counts: &[u64]| -> f64 {
            counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    -p * p.ln()
                })
                .sum()
        };
        (ent(&self.a), ent(&self.b), ent(&self.joint))
    }
}

/// Normalised mutual information `2 I(a; b) / (H(a) + H(b))` of two binned
/// signals, or `None` when either signal has zero entropy.
pub fn nmi(a: &[usize], b: &[usize]) -> Option<f64> {
    let (ha, hb, hab) = JointHistogram::new(a, b).entropies();
    if ha <= 0.0 || hb <= 0.0 {
        return None;
    }
    Some((2.0 * (ha + hb - hab) / (ha + hb)).clamp(0.0, 1.0))
}

/// Gradient-magnitude map rescaled to `[0, 1]` and binned, or `None` when the
/// map is constant.
fn feature_bins(p: &Plane) -> Option<Vec<usize>> {
    let (gx, gy) = sobel(p);
    let g = magnitude(&gx, &gy);
    let lo = g.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return None;
    }
    Some(g.iter().map(|v| quantize((v - lo) / (hi - lo))).collect())
}

/// Feature mutual information: mean NMI between the gradient-magnitude maps
/// of each source and of the fused image.
pub fn q_fmi<T: Scalar>(x1: &Tensor<T>, x2: &Tensor<T>, y: &Tensor<T>) -> Result<Score, MetricError> {
    let [a, b, f] = planes("q_fmi", x1, x2, y, 3)?;
    let ff = feature_bins(&f);
    let mut degenerate = false;
    let mut total = 0.0;
    for src in [&a, &b] {
        match (feature_bins(src), &ff) {
            (Some(fs), Some(ff)) => match nmi(&fs, ff) {
                Some(v) => total += v,
                None => degenerate = true,
            },
            _ => degenerate = true,
        }
    }
    Ok(Score {
        value: total / 2.0,
        degenerate,
    })
}

/// Nonlinear correlation coefficient of two binned signals: `H(a) + H(b) -
/// H(a, b)` with entropies in base `BINS`.
pub fn ncc(a: &[usize], b: &[usize]) -> f64 {
    let (ha, hb, hab) = JointHistogram::new(a, b).entropies();
    (ha + hb - hab) / (BINS as f64).ln()
}

/// Nonlinear correlation matrix over `{x1, x2, y}` with unit diagonal.
pub fn ncc_matrix(images: &[&[usize]; 3]) -> [[f64; 3]; 3] {
    let mut r = [[1.0; 3]; 3];
    for i in 0..3 {
        for j in i + 1..3 {
            let v = ncc(images[i], images[j]);
            r[i][j] = v;
            r[j][i] = v;
        }
    }
    r
}

/// `1 + sum (l/3) log_256 (l/3)` over the eigenvalues `l` of a 3x3 nonlinear
/// correlation matrix; non-positive eigenvalues contribute nothing.
pub fn ncie_from_eigenvalues(eig: &[f64; 3]) -> f64 {
    let k = 3.0;
    let base = (BINS as f64).ln();
    1.0 + eig
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| (l / k) * (l / k).ln() / base)
        .sum::<f64>()
}

/// Eigenvalues of a symmetric 3x3 matrix, ascending.
pub fn symmetric_eigenvalues(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let mat = Matrix3::from_fn(|i, j| m[i][j]);
    let mut ev: Vec<f64> = SymmetricEigen::new(mat).eigenvalues.iter().cloned().collect();
    ev.sort_by(f64::total_cmp);
    [ev[0], ev[1], ev[2]]
}

/// Nonlinear correlation information entropy of the three images.
pub fn q_ncie<T: Scalar>(x1: &Tensor<T>, x2: &Tensor<T>, y: &Tensor<T>) -> Result<Score, MetricError> {
    let [a, b, f] = planes("q_ncie", x1, x2, y, 1)?;
    let bins: Vec<Vec<usize>> = [&a, &b, &f]
        .iter()
        .map(|p| p.data.iter().map(|&v| quantize(v)).collect())
        .collect();
    let r = ncc_matrix(&[&bins[0], &bins[1], &bins[2]]);
    let eig = symmetric_eigenvalues(&r);
    if eig.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite { metric: "q_ncie" });
    }
    Ok(Score::ok(ncie_from_eigenvalues(&eig)))
}

/// Edge orientation in `(-pi/2, pi/2]`.
fn orientation(gx: f64, gy: f64) -> f64 {
    if gx == 0.0 {
        if gy == 0.0 {
            0.0
        } else {
            std::f64::consts::FRAC_PI_2
        }
    } else {
        (gy / gx).atan()
    }
}

/// Strength and orientation preservation of one source edge in the fused
/// image.
pub fn edge_preservation(g_src: f64, a_src: f64, g_fused: f64, a_fused: f64) -> f64 {
    use std::f64::consts::FRAC_PI_2;
    let g = if g_src == 0.0 || g_fused == 0.0 {
        0.0
    } else if g_src > g_fused {
        g_fused / g_src
    } else {
        g_src / g_fused
    };
    let a = ((a_src - a_fused).abs() - FRAC_PI_2).abs() / FRAC_PI_2;
    let qg = XY_GAMMA_G / (1.0 + (XY_KAPPA_G * (g - XY_SIGMA_G)).exp());
    let qa = XY_GAMMA_A / (1.0 + (XY_KAPPA_A * (a - XY_SIGMA_A)).exp());
    qg * qa
}

/// Largest value [`q_xy`] can take: both preservation factors at 1.
pub fn q_xy_ceiling() -> f64 {
    edge_preservation(1.0, 0.0, 1.0, 0.0)
}

/// Gradient-based edge transfer metric, weighted by source edge strength.
pub fn q_xy<T: Scalar>(x1: &Tensor<T>, x2: &Tensor<T>, y: &Tensor<T>) -> Result<Score, MetricError> {
    let [a, b, f] = planes("q_xy", x1, x2, y, 3)?;
    let grads = |p: &Plane| {
        let (gx, gy) = sobel(p);
        let g = magnitude(&gx, &gy);
        let o: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| orientation(*x, *y)).collect();
        (g, o)
    };
    let (ga, oa) = grads(&a);
    let (gb, ob) = grads(&b);
    let (gf, of) = grads(&f);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..gf.len() {
        let qa = edge_preservation(ga[i], oa[i], gf[i], of[i]);
        let qb = edge_preservation(gb[i], ob[i], gf[i], of[i]);
        num += qa * ga[i] + qb * gb[i];
        den += ga[i] + gb[i];
    }
    if den == 0.0 {
        return Ok(Score::degenerate(0.0));
    }
    Ok(Score::ok(num / den))
}

/// Mean and population variance of a window, with flat windows reported as
/// exactly zero variance.
fn window_moments(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let flat = vals.iter().all(|&v| v == vals[0]);
    if flat {
        return (vals[0], 0.0);
    }
    (mean, vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

/// Universal quality index of two equally sized windows.
///
/// Flat windows are handled term by term: when both windows are flat only
/// the luminance factor remains, when both means are zero only the
/// contrast-structure factor remains, and when both hold it scores 1.
pub fn quality_index(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = window_moments(a);
    let (mb, vb) = window_moments(b);
    let n = a.len() as f64;
    let cov = if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n
    };
    let lum_den = ma * ma + mb * mb;
    let con_den = va + vb;
    match (lum_den == 0.0, con_den == 0.0) {
        (true, true) => 1.0,
        (false, true) => 2.0 * ma * mb / lum_den,
        (true, false) => 2.0 * cov / con_den,
        (false, false) => 4.0 * cov * ma * mb / (con_den * lum_den),
    }
}

/// Saliency-weighted fusion quality index over 8x8 windows with unit step,
/// using local variance as saliency.
pub fn q_p<T: Scalar>(x1: &Tensor<T>, x2: &Tensor<T>, y: &Tensor<T>) -> Result<Score, MetricError> {
    let [a, b, f] = planes("q_p", x1, x2, y, QP_WINDOW)?;
    let n = QP_WINDOW;
    let mut wa = vec![0.0; n * n];
    let mut wb = vec![0.0; n * n];
    let mut wf = vec![0.0; n * n];
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..=a.h - n {
        for c in 0..=a.w - n {
            for i in 0..n {
                let row = (r + i) * a.w + c;
                wa[i * n..(i + 1) * n].copy_from_slice(&a.data[row..row + n]);
                wb[i * n..(i + 1) * n].copy_from_slice(&b.data[row..row + n]);
                wf[i * n..(i + 1) * n].copy_from_slice(&f.data[row..row + n]);
            }
            let (_, sa) = window_moments(&wa);
            let (_, sb) = window_moments(&wb);
            let weight = sa.max(sb);
            if weight == 0.0 {
                continue;
            }
            let lambda = sa / (sa + sb);
            let q = lambda * quality_index(&wa, &wf) + (1.0 - lambda) * quality_index(&wb, &wf);
            num += weight * q;
            den += weight;
        }
    }
    if den == 0.0 {
        return Ok(Score::degenerate(0.0));
    }
    Ok(Score::ok(num / den))
}

/// Per-pair evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub id: String,
    pub q_ssim: f64,
    pub q_ssim_1: f64,
    pub q_ssim_2: f64,
    pub q_fmi: f64,
    pub q_ncie: f64,
    pub q_xy: f64,
    pub q_p: f64,
    /// Decomposition SSIMs, when reconstructions were supplied.
    pub dec_ssim_1: Option<f64>,
    pub dec_ssim_2: Option<f64>,
    /// Names of metrics that fell back to a degenerate-input convention.
    pub flags: Vec<&'static str>,
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "id", "q_ssim", "q_ssim_1", "q_ssim_2", "q_fmi", "q_ncie", "q_xy", "q_p", "dec_ssim_1",
    "dec_ssim_2", "flags",
];

impl MetricReport {
    /// Scores a fused image, and optionally a decomposition `(x1_hat, x2_hat)`.
    pub fn evaluate<T: Scalar>(
        id: impl Into<String>,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
        y: &Tensor<T>,
        decomposition: Option<(&Tensor<T>, &Tensor<T>)>,
    ) -> Result<Self, MetricError> {
        let mut flags = Vec::new();
        let mut take = |name: &'static str, s: Score| {
            if s.degenerate {
                flags.push(name);
            }
            s.value
        };
        let (ssim, s1, s2) = q_ssim_fusion(x1, x2, y)?;
        let q_ssim_v = take("q_ssim", ssim);
        let q_fmi_v = take("q_fmi", q_fmi(x1, x2, y)?);
        let q_ncie_v = take("q_ncie", q_ncie(x1, x2, y)?);
        let q_xy_v = take("q_xy", q_xy(x1, x2, y)?);
        let q_p_v = take("q_p", q_p(x1, x2, y)?);
        let (dec_ssim_1, dec_ssim_2) = match decomposition {
            Some((h1, h2)) => {
                let cfg = SsimConfig::default();
                (
                    Some(q_ssim(x1, h1, &cfg)?.as_f64()),
                    Some(q_ssim(x2, h2, &cfg)?.as_f64()),
                )
            }
            None => (None, None),
        };
        let report = MetricReport {
            id: id.into(),
            q_ssim: q_ssim_v,
            q_ssim_1: s1,
            q_ssim_2: s2,
            q_fmi: q_fmi_v,
            q_ncie: q_ncie_v,
            q_xy: q_xy_v,
            q_p: q_p_v,
            dec_ssim_1,
            dec_ssim_2,
            flags,
        };
        if report.values().iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite { metric: "report" });
        }
        Ok(report)
    }

    fn values(&self) -> Vec<f64> {
        let mut v = vec![
            self.q_ssim,
            self.q_ssim_1,
            self.q_ssim_2,
            self.q_fmi,
            self.q_ncie,
            self.q_xy,
            self.q_p,
        ];
        v.extend(self.dec_ssim_1);
        v.extend(self.dec_ssim_2);
        v
    }

    pub fn tsv_header() -> String {
        REPORT_COLUMNS.join("\t")
    }

    pub fn tsv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(format_sig).unwrap_or_else(|| "NA".to_string());
        let flags = if self.flags.is_empty() {
            "-".to_string()
        } else {
            self.flags.join(",")
        };
        [
            self.id.clone(),
            format_sig(self.q_ssim),
            format_sig(self.q_ssim_1),
            format_sig(self.q_ssim_2),
            format_sig(self.q_fmi),
            format_sig(self.q_ncie),
            format_sig(self.q_xy),
            format_sig(self.q_p),
            opt(self.dec_ssim_1),
            opt(self.dec_ssim_2),
            flags,
        ]
        .join("\t")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tsv_row())
    }
}

/// Plain decimal with ten significant digits.
pub fn format_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (9 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Column-wise mean of several reports; decomposition columns are averaged
/// over the reports that have them.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    let n = reports.len();
    if n == 0 {
        return None;
    }
    let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    let avg_opt = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
        let vals: Vec<f64> = reports.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mut flags: Vec<&'static str> = reports.iter().flat_map(|r| r.flags.iter().cloned()).collect();
    flags.sort_unstable();
    flags.dedup();
    Some(MetricReport {
        id: "mean".to_string(),
        q_ssim: avg(&|r| r.q_ssim),
        q_ssim_1: avg(&|r| r.q_ssim_1),
        q_ssim_2: avg(&|r| r.q_ssim_2),
        q_fmi: avg(&|r| r.q_fmi),
        q_ncie: avg(&|r| r.q_ncie),
        q_xy: avg(&|r| r.q_xy),
        q_p: avg(&|r| r.q_p),
        dec_ssim_1: avg_opt(&|r| r.dec_ssim_1),
        dec_ssim_2: avg_opt(&|r| r.dec_ssim_2),
        flags,
    })
}
