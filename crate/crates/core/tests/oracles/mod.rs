//! Brute-force re-derivations of the fusion metrics that share no code
//! with the library. Used by the metric tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::HashMap;
use std::f64::consts::PI;

use fusioninn::latent::{sample_latent, LatentKind, LatentSpec};
use fusioninn::Tensor;

pub type Img = Vec<Vec<f64>>;

pub fn to_img(t: &Tensor<f64>) -> Img {
    let w = t.shape()[t.shape().len() - 1];
    t.data().chunks(w).map(|r| r.to_vec()).collect()
}

pub fn uniform(seed: u64, n: usize) -> Tensor<f64> {
    sample_latent(&LatentSpec::new(LatentKind::Uniform01, seed), &[n, n], 0)
}

/// Sources plus a fused image that depends on both, so every metric sits
/// away from its extremes.
pub fn triple(seed: u64) -> [Tensor<f64>; 3] {
    let a = uniform(3 * seed, 16);
    let b = uniform(3 * seed + 1, 16);
    let e = uniform(3 * seed + 2, 16);
    let y = Tensor::from_fn(&[16, 16], |i| 0.45 * a.data()[i] + 0.35 * b.data()[i] + 0.2 * e.data()[i]);
    [a, b, y]
}

pub fn ssim_oracle(a: &Img, b: &Img) -> f64 {
    let n = a.len().min(a[0].len()).min(11);
    let n = if n % 2 == 0 { n - 1 } else { n };
    let c = (n as f64 - 1.0) / 2.0;
    let mut win = vec![vec![0.0; n]; n];
    let mut tot = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5)).exp();
            tot += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (oh, ow) = (a.len() - n + 1, a[0].len() - n + 1);
    let mut acc = 0.0;
    for r in 0..oh {
        for s in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let w = win[i][j] / tot;
                    let (x, y) = (a[r + i][s + j], b[r + i][s + j]);
                    ma += w * x;
                    mb += w * y;
                    saa += w * x * x;
                    sbb += w * y * y;
                    sab += w * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    acc / (oh * ow) as f64
}

pub fn sobel_oracle(img: &Img) -> (Img, Img) {
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let (h, w) = (img.len(), img[0].len());
    let mut gx = vec![vec![0.0; w - 2]; h - 2];
    let mut gy = vec![vec![0.0; w - 2]; h - 2];
    for r in 0..h - 2 {
        for c in 0..w - 2 {
            for i in 0..3 {
                for j in 0..3 {
                    gx[r][c] += kx[i][j] * img[r + i][c + j];
                    gy[r][c] += kx[j][i] * img[r + i][c + j];
                }
            }
        }
    }
    (gx, gy)
}

pub fn bin(v: f64) -> usize {
    ((v * 256.0) as usize).min(255)
}

pub fn mutual_info_oracle(a: &[usize], b: &[usize]) -> (f64, f64, f64) {
    let n = a.len() as f64;
    let mut pa: HashMap<usize, f64> = HashMap::new();
    let mut pb: HashMap<usize, f64> = HashMap::new();
    let mut pab: HashMap<(usize, usize), f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *pa.entry(x).or_default() += 1.0 / n;
        *pb.entry(y).or_default() += 1.0 / n;
        *pab.entry((x, y)).or_default() += 1.0 / n;
    }
    let mi: f64 = pab.iter().map(|(&(x, y), &p)| p * (p / (pa[&x] * pb[&y])).ln()).sum();
    let ha: f64 = -pa.values().map(|p| p * p.ln()).sum::<f64>();
    let hb: f64 = -pb.values().map(|p| p * p.ln()).sum::<f64>();
    (mi, ha, hb)
}

pub fn fmi_oracle(a: &Img, b: &Img, f: &Img) -> f64 {
    let feature = |img: &Img| -> Vec<usize> {
        let (gx, gy) = sobel_oracle(img);
        let mag: Vec<f64> = gx
            .iter()
            .flatten()
            .zip(gy.iter().flatten())
            .map(|(x, y)| (x * x + y * y).sqrt())
            .collect();
        let lo = mag.iter().cloned().fold(f64::MAX, f64::min);
        let hi = mag.iter().cloned().fold(f64::MIN, f64::max);
        mag.iter().map(|v| bin((v - lo) / (hi - lo))).collect()
    };
    let ff = feature(f);
    let nmi = |src: &Img| {
        let (mi, ha, hb) = mutual_info_oracle(&feature(src), &ff);
        2.0 * mi / (ha + hb)
    };
    0.5 * (nmi(a) + nmi(b))
}

/// Eigenvalues of a symmetric 3x3 matrix by the trigonometric solution of its
/// characteristic cubic.
pub fn eig3_oracle(m: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    if p == 0.0 {
        return [q; 3];
    }
    let mut bm = m;
    for (i, row) in bm.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (m[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = bm[0][0] * (bm[1][1] * bm[2][2] - bm[1][2] * bm[2][1])
        - bm[0][1] * (bm[1][0] * bm[2][2] - bm[1][2] * bm[2][0])
        + bm[0][2] * (bm[1][0] * bm[2][1] - bm[1][1] * bm[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

pub fn ncie_oracle(a: &Img, b: &Img, f: &Img) -> f64 {
    let flat = |img: &Img| -> Vec<usize> { img.iter().flatten().map(|&v| bin(v)).collect() };
    let imgs = [flat(a), flat(b), flat(f)];
    let ncc = |x: &[usize], y: &[usize]| {
        let (mi, _, _) = mutual_info_oracle(x, y);
        mi / 256f64.ln()
    };
    let mut r = [[1.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                r[i][j] = ncc(&imgs[i], &imgs[j]);
            }
        }
    }
    1.0 + eig3_oracle(r)
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|l| (l / 3.0) * (l / 3.0).log(256.0))
        .sum::<f64>()
}

pub fn xy_oracle(a: &Img, b: &Img, f: &Img) -> f64 {
    let polar = |img: &Img| -> Vec<(f64, f64)> {
        let (gx, gy) = sobel_oracle(img);
        gx.iter()
            .flatten()
            .zip(gy.iter().flatten())
            .map(|(&x, &y)| ((x * x + y * y).sqrt(), y.atan2(x).rem_euclid(PI)))
            .collect()
    };
    let (pa, pb, pf) = (polar(a), polar(b), polar(f));
    let transfer = |(gs, os): (f64, f64), (gf, of): (f64, f64)| {
        let g = if gs == 0.0 || gf == 0.0 { 0.0 } else { gs.min(gf) / gs.max(gf) };
        let d = (os - of).abs();
        let a = (d - PI / 2.0).abs() * 2.0 / PI;
        let qg = 0.9994 / (1.0 + (-15.0 * (g - 0.5)).exp());
        let qa = 0.9879 / (1.0 + (-22.0 * (a - 0.8)).exp());
        qg * qa
    };
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..pf.len() {
        num += transfer(pa[i], pf[i]) * pa[i].0 + transfer(pb[i], pf[i]) * pb[i].0;
        den += pa[i].0 + pb[i].0;
    }
    num / den
}

pub fn qp_oracle(a: &Img, b: &Img, f: &Img) -> f64 {
    let stats = |x: &Img, y: &Img, r: usize, c: usize| {
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in r..r + 8 {
            for j in c..c + 8 {
                let (u, v) = (x[i][j], y[i][j]);
                sx += u;
                sy += v;
                sxx += u * u;
                syy += v * v;
                sxy += u * v;
            }
        }
        let n = 64.0;
        let (mx, my) = (sx / n, sy / n);
        (mx, my, sxx / n - mx * mx, syy / n - my * my, sxy / n - mx * my)
    };
    let q0 = |x: &Img, r: usize, c: usize| {
        let (mx, my, vx, vy, cxy) = stats(x, f, r, c);
        4.0 * cxy * mx * my / ((vx + vy) * (mx * mx + my * my))
    };
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..=a.len() - 8 {
        for c in 0..=a[0].len() - 8 {
            let sa = stats(a, a, r, c).2;
            let sb = stats(b, b, r, c).2;
            let lambda = sa / (sa + sb);
            let weight = sa.max(sb);
            num += weight * (lambda * q0(a, r, c) + (1.0 - lambda) * q0(b, r, c));
            den += weight;
        }
    }
    num / den
}
