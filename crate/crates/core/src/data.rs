//! Synthetic two-modality image pairs, PGM files and dataset splitting.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::latent::stream_rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Two co-registered single-channel images, each `[H, W]` with values in
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair<T> {
    pub id: String,
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
}

impl<T: Scalar> ImagePair<T> {
    pub fn new(id: impl Into<String>, x1: Tensor<T>, x2: Tensor<T>) -> Result<Self, DataError> {
        let id = id.into();
        x1.expect_same_shape("image pair", &x2)?;
        if x1.shape().len() != 2 {
            return Err(DataError::Invalid(format!(
                "pair {id}: expected [H, W] images, got {:?}",
                x1.shape()
            )));
        }
        let ok = |t: &Tensor<T>| {
            t.data()
                .iter()
                .all(|v| v.is_finite() && *v >= T::zero() && *v <= T::one())
        };
        if !ok(&x1) || !ok(&x2) {
            return Err(DataError::Invalid(format!("pair {id}: values outside [0, 1]")));
        }
        Ok(ImagePair { id, x1, x2 })
    }

    pub fn height(&self) -> usize {
        self.x1.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.x1.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> ImagePair<U> {
        ImagePair {
            id: self.id.clone(),
            x1: self.x1.cast(),
            x2: self.x2.cast(),
        }
    }
}

/// Stacks the pairs into two `[B, 1, H, W]` batches.
pub fn batch<T: Scalar>(pairs: &[&ImagePair<T>]) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let first = pairs
        .first()
        .ok_or_else(|| TensorError::contract("batch", "no pairs"))?;
    let shape = [pairs.len(), 1, first.height(), first.width()];
    let x1: Vec<&Tensor<T>> = pairs.iter().map(|p| &p.x1).collect();
    let x2: Vec<&Tensor<T>> = pairs.iter().map(|p| &p.x2).collect();
    Ok((Tensor::stack(&x1)?.reshape(&shape)?, Tensor::stack(&x2)?.reshape(&shape)?))
}

/// Parameters of the synthetic anatomy.
///
/// Each image shows a soft elliptical head on a dark background with a set of
/// rotated, soft-edged blobs. The blobs are split into two non-empty groups:
/// the first modality renders group A bright and hides group B; the second
/// renders group B bright and group A faint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub size: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub background: f64,
    /// Head intensity in each modality.
    pub tissue: [f64; 2],
    /// Intensity added by a bright blob.
    pub bright: f64,
    /// Intensity added by a group-A blob in the second modality.
    pub faint: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            size: 64,
            min_blobs: 3,
            max_blobs: 8,
            background: 0.02,
            tissue: [0.25, 0.15],
            bright: 0.65,
            faint: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.size < 16 || self.size % 2 != 0 {
            return Err(DataError::Invalid(format!(
                "synthetic size must be even and at least 16, got {}",
                self.size
            )));
        }
        if self.min_blobs < 2 || self.min_blobs > self.max_blobs {
            return Err(DataError::Invalid(format!(
                "blob count range {}..={} must start at 2 or more and be non-empty",
                self.min_blobs, self.max_blobs
            )));
        }
        Ok(())
    }
}

/// Offset separating the synthetic-data key space from latent draws.
const SYNTH_KEY: u64 = 0x5EED_DA7A_0000_0000;

/// Geometry of one blob in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub angle: f64,
    /// Whether the first modality shows this blob bright.
    pub in_a: bool,
}

impl Blob {
    /// Soft plateau: about 1 inside the ellipse, falling to 0 outside.
    fn profile(&self, r: f64, c: f64) -> f64 {
        let (dy, dx) = (r - self.center.0, c - self.center.1);
        let (s, co) = self.angle.sin_cos();
        let u = (co * dx + s * dy) / self.radii.1;
        let v = (-s * dx + co * dy) / self.radii.0;
        let g = (-0.5 * (u * u + v * v)).exp();
        1.0 / (1.0 + (-12.0 * (g - 0.45)).exp())
    }
}

/// Blob layout of pair `index`, drawn from its own random stream.
pub fn synth_layout(cfg: &SynthConfig, index: u64) -> (Vec<Blob>, [f64; 4]) {
    let mut rng = stream_rng(cfg.seed ^ SYNTH_KEY, index);
    let n = cfg.size as f64;
    let head = [
        n * rng.random_range(0.46..0.54),
        n * rng.random_range(0.46..0.54),
        n * rng.random_range(0.36..0.44),
        n * rng.random_range(0.32..0.42),
    ];
    let count = rng.random_range(cfg.min_blobs..=cfg.max_blobs);
    let mut blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let rad: f64 = rng.random_range(0.0..0.7);
            Blob {
                center: (head[0] + rad * head[2] * ang.sin(), head[1] + rad * head[3] * ang.cos()),
                radii: (n * rng.random_range(0.04..0.11), n * rng.random_range(0.04..0.11)),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                in_a: rng.random_bool(0.5),
            }
        })
        .collect();
    // Both groups must be non-empty.
    if blobs.iter().all(|b| b.in_a) {
        blobs[0].in_a = false;
    } else if blobs.iter().all(|b| !b.in_a) {
        blobs[0].in_a = true;
    }
    (blobs, head)
}

/// Deterministic synthetic pair number `index`.
pub fn synth_pair<T: Scalar>(cfg: &SynthConfig, index: u64) -> ImagePair<T> {
    let (blobs, head) = synth_layout(cfg, index);
    let n = cfg.size;
    let mut x1 = Vec::with_capacity(n * n);
    let mut x2 = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let (rf, cf) = (r as f64 + 0.5, c as f64 + 0.5);
            let d = ((rf - head[0]) / head[2]).powi(2) + ((cf - head[1]) / head[3]).powi(2);
            let mask = 1.0 / (1.0 + (-10.0 * (1.0 - d.sqrt())).exp());
            let (mut a, mut b) = (0.0f64, 0.0f64);
            for blob in &blobs {
                let p = blob.profile(rf, cf);
                if blob.in_a {
                    a = a.max(p * cfg.bright);
                    b = b.max(p * cfg.faint);
                } else {
                    b = b.max(p * cfg.bright);
                }
            }
            let v1 = cfg.background + cfg.tissue[0] * mask + a;
            let v2 = cfg.background + cfg.tissue[1] * mask + b;
            x1.push(T::of(v1.clamp(0.0, 1.0)));
            x2.push(T::of(v2.clamp(0.0, 1.0)));
        }
    }
    ImagePair {
        id: format!("synth-{index:05}"),
        x1: Tensor::new(vec![n, n], x1).expect("n*n values"),
        x2: Tensor::new(vec![n, n], x2).expect("n*n values"),
    }
}

/// Pairs `first..first + count`.
pub fn synth_dataset<T: Scalar>(cfg: &SynthConfig, first: u64, count: usize) -> Vec<ImagePair<T>> {
    (first..first + count as u64).map(|i| synth_pair(cfg, i)).collect()
}

/// Seeded shuffle, then the first `round(fraction * n)` pairs (at least one,
/// leaving at least one) go to training.
pub fn dataset_split<T: Clone>(
    pairs: Vec<ImagePair<T>>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<ImagePair<T>>, Vec<ImagePair<T>>), DataError> {
    if pairs.len() < 2 {
        return Err(DataError::Invalid(format!(
            "need at least 2 pairs to split, got {}",
            pairs.len()
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "split fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    let mut pairs = pairs;
    let mut rng = stream_rng(seed, 0x5_9117);
    pairs.shuffle(&mut rng);
    let n = pairs.len();
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let val = pairs.split_off(n_train);
    Ok((pairs, val))
}

fn pgm_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return None;
    }
    Some((tokens, i + 1))
}

/// Reads a binary PGM (`P5`, 8- or 16-bit) as an `[H, W]` tensor scaled to
/// `[0, 1]` by the file's maximum value.
pub fn load_grayscale<T: Scalar>(path: &Path) -> Result<Tensor<T>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let fmt = |reason: String| DataError::Format {
        path: path.to_path_buf(),
        reason,
    };
    match bytes.get(..2) {
        Some(b"P5") => {}
        Some(b"P6") | Some(b"P3") => return Err(fmt("multi-channel image; expected grayscale P5".into())),
        _ => return Err(fmt("not a binary PGM (missing P5 magic)".into())),
    }
    let (tokens, offset) = pgm_tokens(&bytes[2..], 3).ok_or_else(|| fmt("truncated header".into()))?;
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| fmt(format!("bad {what} {s:?}")));
    let (w, h, maxval) = (num(&tokens[0], "width")?, num(&tokens[1], "height")?, num(&tokens[2], "maxval")?);
    if w == 0 || h == 0 {
        return Err(fmt(format!("zero-size image {w}x{h}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(fmt(format!("maxval {maxval} outside 1..=65535")));
    }
    let raster = &bytes[2 + offset..];
    let depth = if maxval > 255 { 2 } else { 1 };
    if raster.len() < w * h * depth {
        return Err(fmt(format!(
            "raster holds {} bytes, expected {}",
            raster.len(),
            w * h * depth
        )));
    }
    let scale = 1.0 / maxval as f64;
    let data = (0..w * h)
        .map(|i| {
            let v = if depth == 1 {
                raster[i] as usize
            } else {
                (raster[2 * i] as usize) << 8 | raster[2 * i + 1] as usize
            };
            T::of((v.min(maxval) as f64) * scale)
        })
        .collect();
    Ok(Tensor::new(vec![h, w], data)?)
}

/// Writes an image (`[H, W]`, or with leading unit axes) as 8-bit PGM,
/// clamping to `[0, 1]` and rounding half to even.
pub fn save_grayscale<T: Scalar>(image: &Tensor<T>, path: &Path) -> Result<(), DataError> {
    let s = image.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(DataError::Invalid(format!(
            "cannot save tensor of shape {s:?} as a grayscale image"
        )));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if !image.is_finite() {
        return Err(DataError::Invalid(format!("{}: image has non-finite values", path.display())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round_ties_even() as u8),
    );
    fs::write(path, out).map_err(io_err(path))
}

/// Directories of a pair dataset: `root/x1/<id>.pgm` and `root/x2/<id>.pgm`.
pub fn pair_dirs(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("x1"), root.join("x2"))
}

pub fn save_pairs<T: Scalar>(pairs: &[ImagePair<T>], root: &Path) -> Result<(), DataError> {
    let (d1, d2) = pair_dirs(root);
    for d in [&d1, &d2] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    for p in pairs {
        save_grayscale(&p.x1, &d1.join(format!("{}.pgm", p.id)))?;
        save_grayscale(&p.x2, &d2.join(format!("{}.pgm", p.id)))?;
    }
    Ok(())
}

/// Loads every pair under `root`, sorted by id. Both modality directories
/// must hold the same file names.
pub fn load_pairs<T: Scalar>(root: &Path) -> Result<Vec<ImagePair<T>>, DataError> {
    let (d1, d2) = pair_dirs(root);
    let ids = |d: &Path| -> Result<Vec<String>, DataError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(d).map_err(io_err(d))? {
            let path = entry.map_err(io_err(d))?.path();
            if path.extension().is_some_and(|e| e == "pgm") {
                if let Some(stem) = path.file_stem() {
                    ids.push(stem.to_string_lossy().into_owned());
                }
            }
        }
        ids.sort();
        Ok(ids)
    };
    let (a, b) = (ids(&d1)?, ids(&d2)?);
    if a != b {
        return Err(DataError::Invalid(format!(
            "{} and {} hold different image names",
            d1.display(),
            d2.display()
        )));
    }
    if a.is_empty() {
        return Err(DataError::Invalid(format!("no .pgm pairs under {}", root.display())));
    }
    a.iter()
        .map(|id| {
            let x1 = load_grayscale(&d1.join(format!("{id}.pgm")))?;
            let x2 = load_grayscale(&d2.join(format!("{id}.pgm")))?;
            ImagePair::new(id.clone(), x1, x2)
        })
        .collect()
}
