//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to its default; unknown or repeated keys are errors. [`RunConfig::to_text`]
//! writes every key in a fixed order with round-trip exact numbers, which is
//! the form stored in checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fusioninn::data::{dataset_split, load_pairs, synth_dataset, ImagePair, SynthConfig};
use fusioninn::flow::ModelConfig;
use fusioninn::latent::LatentKind;
use fusioninn::losses::LossWeights;
use fusioninn::optim::AdamConfig;
use fusioninn::trainer::TrainConfig;

use crate::CliError;

/// Learning rate of the desk-scale preset. Sixty epochs of 200 pairs is a few
/// hundred steps, too few for the library default of `3e-4` to converge.
pub const DESK_LR: f64 = 2e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub sigmoid_head: bool,
    pub clamp_scale: Option<f64>,
    pub final_relu: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    pub lambda: f64,
    pub alpha: f64,
    pub latent: LatentKind,
    pub synth_seed: u64,
    pub synth_size: usize,
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_min_blobs: usize,
    pub synth_max_blobs: usize,
    pub synth_background: f64,
    pub synth_tissue_1: f64,
    pub synth_tissue_2: f64,
    pub synth_bright: f64,
    pub synth_faint: f64,
    /// Directory with `x1/` and `x2/` PGM folders; replaces synthetic data.
    pub data_dir: Option<PathBuf>,
    /// Share of `data_dir` pairs used for training; the rest validate.
    pub train_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let s = SynthConfig::default();
        RunConfig {
            k: m.blocks,
            hidden_channels: m.hidden_channels,
            kernel_size: m.kernel_size,
            sigmoid_head: m.sigmoid_head,
            clamp_scale: m.clamp_scale,
            final_relu: m.final_relu,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: DESK_LR,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            seed: 0,
            lambda: t.weights.lambda,
            alpha: t.weights.alpha,
            latent: t.latent,
            synth_seed: s.seed,
            synth_size: s.size,
            synth_train: 200,
            synth_val: 50,
            synth_min_blobs: s.min_blobs,
            synth_max_blobs: s.max_blobs,
            synth_background: s.background,
            synth_tissue_1: s.tissue[0],
            synth_tissue_2: s.tissue[1],
            synth_bright: s.bright,
            synth_faint: s.faint,
            data_dir: None,
            train_fraction: 0.8,
        }
    }
}

pub const KEYS: [&str; 31] = [
    "k",
    "hidden_channels",
    "kernel_size",
    "sigmoid_head",
    "clamp_scale",
    "final_relu",
    "epochs",
    "batch_size",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "plateau_factor",
    "plateau_patience",
    "seed",
    "lambda",
    "alpha",
    "latent",
    "synth_seed",
    "synth_size",
    "synth_train",
    "synth_val",
    "synth_min_blobs",
    "synth_max_blobs",
    "synth_background",
    "synth_tissue_1",
    "synth_tissue_2",
    "synth_bright",
    "synth_faint",
    "data_dir",
    "train_fraction",
];

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{e}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_opt_f64(v: &str) -> Result<Option<f64>, String> {
    if v == "none" {
        Ok(None)
    } else {
        parse(v).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "k" => self.k = parse(v)?,
            "hidden_channels" => self.hidden_channels = parse(v)?,
            "kernel_size" => self.kernel_size = parse(v)?,
            "sigmoid_head" => self.sigmoid_head = parse_bool(v)?,
            "clamp_scale" => self.clamp_scale = parse_opt_f64(v)?,
            "final_relu" => self.final_relu = parse_bool(v)?,
            "epochs" => self.epochs = parse(v)?,
            "batch_size" => self.batch_size = parse(v)?,
            "lr" => self.lr = parse(v)?,
            "adam_beta1" => self.adam_beta1 = parse(v)?,
            "adam_beta2" => self.adam_beta2 = parse(v)?,
            "adam_eps" => self.adam_eps = parse(v)?,
            "plateau_factor" => self.plateau_factor = parse(v)?,
            "plateau_patience" => self.plateau_patience = parse(v)?,
            "seed" => self.seed = parse(v)?,
            "lambda" => self.lambda = parse(v)?,
            "alpha" => self.alpha = parse(v)?,
            "latent" => self.latent = parse(v)?,
            "synth_seed" => self.synth_seed = parse(v)?,
            "synth_size" => self.synth_size = parse(v)?,
            "synth_train" => self.synth_train = parse(v)?,
            "synth_val" => self.synth_val = parse(v)?,
            "synth_min_blobs" => self.synth_min_blobs = parse(v)?,
            "synth_max_blobs" => self.synth_max_blobs = parse(v)?,
            "synth_background" => self.synth_background = parse(v)?,
            "synth_tissue_1" => self.synth_tissue_1 = parse(v)?,
            "synth_tissue_2" => self.synth_tissue_2 = parse(v)?,
            "synth_bright" => self.synth_bright = parse(v)?,
            "synth_faint" => self.synth_faint = parse(v)?,
            "data_dir" => {
                self.data_dir = match v {
                    "none" | "" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            "train_fraction" => self.train_fraction = parse(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:?}"));
        match key {
            "k" => self.k.to_string(),
            "hidden_channels" => self.hidden_channels.to_string(),
            "kernel_size" => self.kernel_size.to_string(),
            "sigmoid_head" => self.sigmoid_head.to_string(),
            "clamp_scale" => opt(self.clamp_scale),
            "final_relu" => self.final_relu.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => format!("{:?}", self.lr),
            "adam_beta1" => format!("{:?}", self.adam_beta1),
            "adam_beta2" => format!("{:?}", self.adam_beta2),
            "adam_eps" => format!("{:?}", self.adam_eps),
            "plateau_factor" => format!("{:?}", self.plateau_factor),
            "plateau_patience" => self.plateau_patience.to_string(),
            "seed" => self.seed.to_string(),
            "lambda" => format!("{:?}", self.lambda),
            "alpha" => format!("{:?}", self.alpha),
            "latent" => self.latent.to_string(),
            "synth_seed" => self.synth_seed.to_string(),
            "synth_size" => self.synth_size.to_string(),
            "synth_train" => self.synth_train.to_string(),
            "synth_val" => self.synth_val.to_string(),
            "synth_min_blobs" => self.synth_min_blobs.to_string(),
            "synth_max_blobs" => self.synth_max_blobs.to_string(),
            "synth_background" => format!("{:?}", self.synth_background),
            "synth_tissue_1" => format!("{:?}", self.synth_tissue_1),
            "synth_tissue_2" => format!("{:?}", self.synth_tissue_2),
            "synth_bright" => format!("{:?}", self.synth_bright),
            "synth_faint" => format!("{:?}", self.synth_faint),
            "data_dir" => self
                .data_dir
                .as_ref()
                .map_or("none".to_string(), |p| p.display().to_string()),
            "train_fraction" => format!("{:?}", self.train_fraction),
            _ => unreachable!("key table covers every field"),
        }
    }

    /// Parses configuration text; `origin` names the source in errors.
    pub fn parse_text(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| CliError::Usage(format!("{origin}:{line_no}: {m}"));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let canonical = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| err(format!("unknown key {key:?}")))?;
            if seen.contains(canonical) {
                return Err(err(format!("key {key:?} given twice")));
            }
            seen.push(canonical);
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.validate().map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{origin}: {m}")),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    /// Every key, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: String| CliError::Usage(e);
        self.model_config()
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        self.synth_config()
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        if self.data_dir.is_none() && (self.synth_train < 2 || self.synth_val < 1) {
            return Err(usage(format!(
                "synth_train must be at least 2 and synth_val at least 1, got {} and {}",
                self.synth_train, self.synth_val
            )));
        }
        if self.data_dir.is_none() {
            let f = fusioninn::flow::FlowModel::<f64>::new(self.model_config())
                .map_err(|e| usage(e.to_string()))?
                .spatial_factor();
            if self.synth_size % f != 0 {
                return Err(usage(format!(
                    "synth_size {} is not divisible by {f}, the resampling factor of k = {}",
                    self.synth_size, self.k
                )));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(usage(format!(
                "train_fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            blocks: self.k,
            hidden_channels: self.hidden_channels,
            kernel_size: self.kernel_size,
            seed: self.seed,
            sigmoid_head: self.sigmoid_head,
            clamp_scale: self.clamp_scale,
            final_relu: self.final_relu,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            seed: self.seed,
            weights: LossWeights {
                lambda: self.lambda,
                alpha: self.alpha,
            },
            latent: self.latent,
            ..TrainConfig::default()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.synth_seed,
            size: self.synth_size,
            min_blobs: self.synth_min_blobs,
            max_blobs: self.synth_max_blobs,
            background: self.synth_background,
            tissue: [self.synth_tissue_1, self.synth_tissue_2],
            bright: self.synth_bright,
            faint: self.synth_faint,
        }
    }

    /// Training and validation pairs: from `data_dir` split by
    /// `train_fraction`, or synthetic pairs `0..synth_train` and the
    /// `synth_val` pairs after them.
    pub fn datasets(&self) -> Result<(Vec<ImagePair<f64>>, Vec<ImagePair<f64>>), CliError> {
        match &self.data_dir {
            Some(dir) => {
                let pairs = load_pairs(dir)?;
                Ok(dataset_split(pairs, self.train_fraction, self.seed)?)
            }
            None => {
                let s = self.synth_config();
                Ok((
                    synth_dataset(&s, 0, self.synth_train),
                    synth_dataset(&s, self.synth_train as u64, self.synth_val),
                ))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig::default();
        c.lr = 0.1 + 0.2;
        c.clamp_scale = Some(1.9);
        c.latent = LatentKind::Uniform01;
        c.data_dir = Some(PathBuf::from("/tmp/pairs"));
        let back = RunConfig::parse_text(&c.to_text(), "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(c.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn errors_cite_lines() {
        let e = RunConfig::parse_text("k = 2\n\n# c\nbogus = 1\n", "run.cfg").unwrap_err();
        assert!(e.to_string().contains("run.cfg:4"), "{e}");
        let e = RunConfig::parse_text("k = 2\nk = 3\n", "run.cfg").unwrap_err();
        assert!(e.to_string().contains("run.cfg:2"), "{e}");
        let e = RunConfig::parse_text("alpha = high\n", "run.cfg").unwrap_err();
        assert!(e.to_string().contains("run.cfg:1"), "{e}");
        let e = RunConfig::parse_text("just words\n", "run.cfg").unwrap_err();
        assert!(e.to_string().contains("run.cfg:1"), "{e}");
    }

    #[test]
    fn semantic_validation() {
        assert!(RunConfig::parse_text("alpha = 1.5", "c").is_err());
        assert!(RunConfig::parse_text("synth_size = 33", "c").is_err());
        assert!(RunConfig::parse_text("kernel_size = 4", "c").is_err());
        assert!(RunConfig::parse_text("latent = cauchy", "c").is_err());
        let c = RunConfig::parse_text("k = 4 # deeper\nlatent = ones\nclamp_scale = none", "c").unwrap();
        assert_eq!(c.k, 4);
        assert_eq!(c.latent, LatentKind::Ones);
    }

    #[test]
    fn defaults_match_library_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.model_config(), ModelConfig::default());
        assert_eq!(
            c.train_config(),
            TrainConfig {
                lr: DESK_LR,
                ..TrainConfig::default()
            }
        );
        assert_eq!(c.synth_config(), SynthConfig::default());
    }

    #[test]
    fn shipped_presets_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        assert_eq!(RunConfig::load(&dir.join("desk.cfg")).unwrap(), RunConfig::default());
        let full = RunConfig::load(&dir.join("full.cfg")).unwrap();
        assert_eq!((full.epochs, full.batch_size, full.lr), (400, 64, 3e-4));
    }
}
