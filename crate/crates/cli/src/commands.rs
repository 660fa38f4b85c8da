//! The subcommands. Each one reads its inputs, does its work in `f64`, and
//! writes files or a tab-separated table to stdout.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fusioninn::autodiff::{FaultSite, GradCheckOptions};
use fusioninn::data::{batch, load_grayscale, load_pairs, save_grayscale, save_pairs, synth_dataset, ImagePair};
use fusioninn::flow::FlowModel;
use fusioninn::latent::{sample_latent, LatentKind, LatentSpec};
use fusioninn::metrics::{format_sig, mean_report, MetricReport};
use fusioninn::trainer::{gradient_check_model, validation_latent, EpochLog, TrainError, Trainer};
use fusioninn::{FlowModel32, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::{rawfile, CliError};

#[derive(Debug, Parser)]
#[command(name = "fusioninn", version, about = "Invertible image fusion and decomposition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic training and validation pairs as PGM folders.
    GenerateData(GenerateArgs),
    /// Train a model and write a checkpoint plus an epoch log.
    Train(TrainArgs),
    /// Fuse two source images; writes the fused image and the latent.
    Fuse(FuseArgs),
    /// Recover both sources from a fused image and a latent.
    Decompose(DecomposeArgs),
    /// Measure the worst round-trip error of a model on random inputs.
    Roundtrip(RoundtripArgs),
    /// Score a checkpoint with the fusion metrics.
    Eval(EvalArgs),
    /// Train and score one model per point of a parameter grid.
    Ablate(AblateArgs),
    /// Compare tape gradients of the full objective with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; receives train/ and val/.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_latent)]
    pub latent: Option<LatentKind>,
    /// Epoch log (default: the checkpoint path with `.log` appended).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write every step's loss breakdown to this file.
    #[arg(long)]
    pub steps: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub x1: PathBuf,
    #[arg(long)]
    pub x2: PathBuf,
    /// Fused image (PGM).
    #[arg(long)]
    pub out: PathBuf,
    /// Forward latent, stored unquantized.
    #[arg(long)]
    pub z_file: PathBuf,
    /// Also store the fused image unquantized.
    #[arg(long)]
    pub y_raw: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fused image, PGM or raw tensor file.
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long)]
    pub out_x1: PathBuf,
    #[arg(long)]
    pub out_x2: PathBuf,
    /// Latent to decode from; sampled from the prior when absent.
    #[arg(long, conflicts_with_all = ["seed", "latent"])]
    pub z_file: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_latent)]
    pub latent: Option<LatentKind>,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    #[arg(long, conflicts_with = "config")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side (default: the checkpoint resolution or `synth_size`).
    #[arg(long)]
    pub size: Option<usize>,
    /// Draw the output layers of every subnet uniformly from [-B, B].
    #[arg(long, value_name = "B")]
    pub randomize: Option<f64>,
    /// Run the inverse pass in 32-bit floats.
    #[arg(long)]
    pub truncate_f32: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory with x1/ and x2/ (default: the validation set of the
    /// checkpoint's configuration).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_latent)]
    pub latent: Vec<LatentKind>,
    /// Directory for per-cell checkpoints and summary.tsv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model and loss settings (default: k = 2, hidden_channels = 4).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    /// Corrupt one backward rule (conv-kernel, conv-bias, exp, sigmoid).
    #[arg(long, value_parser = parse_fault)]
    pub fault: Option<FaultSite>,
}

fn parse_latent(s: &str) -> Result<LatentKind, String> {
    s.parse().map_err(|e: fusioninn::latent::ParseLatentError| e.to_string())
}

fn parse_fault(s: &str) -> Result<FaultSite, String> {
    match s {
        "conv-kernel" => Ok(FaultSite::ConvKernel),
        "conv-bias" => Ok(FaultSite::ConvBias),
        "exp" => Ok(FaultSite::Exp),
        "sigmoid" => Ok(FaultSite::Sigmoid),
        _ => Err(format!("unknown fault site {s:?} (expected conv-kernel, conv-bias, exp or sigmoid)")),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData(a) => generate_data(&a),
        Command::Train(a) => train(&a),
        Command::Fuse(a) => fuse(&a),
        Command::Decompose(a) => decompose(&a),
        Command::Roundtrip(a) => roundtrip(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

pub fn generate_data(a: &GenerateArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let s = cfg.synth_config();
    s.validate()?;
    let train = synth_dataset::<f64>(&s, 0, cfg.synth_train);
    let val = synth_dataset::<f64>(&s, cfg.synth_train as u64, cfg.synth_val);
    save_pairs(&train, &a.out.join("train"))?;
    save_pairs(&val, &a.out.join("val"))?;
    println!("wrote {} training and {} validation pairs to {}", train.len(), val.len(), a.out.display());
    Ok(())
}

fn common_resolution(pairs: &[ImagePair<f64>], what: &str) -> Result<(usize, usize), CliError> {
    let first = pairs
        .first()
        .ok_or_else(|| CliError::Input(format!("{what} set is empty")))?;
    let hw = (first.height(), first.width());
    if let Some(p) = pairs.iter().find(|p| (p.height(), p.width()) != hw) {
        return Err(CliError::Input(format!(
            "{what} pair {} is {}x{}, expected {}x{}",
            p.id,
            p.height(),
            p.width(),
            hw.0,
            hw.1
        )));
    }
    Ok(hw)
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(l) = a.latent {
        cfg.latent = l;
    }
    cfg.validate()?;
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log", a.out.display())));
    let report = train_to(&cfg, &a.out, &log_path, a.steps.as_deref())?;
    println!("{}", report.trim_end());
    Ok(())
}

/// Trains per `cfg`, saving after every epoch so the last stable state
/// survives a divergence. Returns the final log line (or a note that no
/// epochs ran).
fn train_to(cfg: &RunConfig, out: &Path, log_path: &Path, steps_path: Option<&Path>) -> Result<String, CliError> {
    let (train_set, val_set) = cfg.datasets()?;
    let resolution = common_resolution(&train_set, "training")?;
    if common_resolution(&val_set, "validation")? != resolution {
        return Err(CliError::Input("training and validation images differ in size".into()));
    }
    let model = FlowModel::new(cfg.model_config())?;
    let f = model.spatial_factor();
    if resolution.0 % f != 0 || resolution.1 % f != 0 {
        return Err(CliError::Input(format!(
            "images are {}x{} but k = {} needs both sides divisible by {f}",
            resolution.0, resolution.1, cfg.k
        )));
    }
    let mut ckpt = Checkpoint {
        config: cfg.clone(),
        resolution: Some(resolution),
        trainer: Trainer::new(model, cfg.train_config())?,
    };
    ckpt.save(out)?;

    let mut log = BufWriter::new(File::create(log_path).map_err(io_err(log_path))?);
    writeln!(log, "{}", EpochLog::HEADER).map_err(io_err(log_path))?;
    log.flush().map_err(io_err(log_path))?;
    let mut steps = match steps_path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(io_err(p))?);
            writeln!(w, "step\tL_total\tL_fusion\tL_SSIM\tL_l2\tL_latent\tL_dec\tL_dec_SSIM\tL_dec_l2")
                .map_err(io_err(p))?;
            Some((p, w))
        }
        None => None,
    };

    let mut last = format!("trained 0 epochs; wrote {}", out.display());
    while ckpt.trainer.epoch < cfg.epochs {
        let mut step_err = None;
        let result = ckpt.trainer.run_epoch(&train_set, &val_set, |step, b| {
            if let Some((p, w)) = steps.as_mut() {
                let r = writeln!(
                    w,
                    "{step}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}",
                    b.total, b.fusion, b.ssim, b.l2, b.latent, b.dec, b.dec_ssim, b.dec_l2
                );
                if let Err(e) = r {
                    step_err.get_or_insert(io_err(p)(e));
                }
            }
        });
        if let Some(e) = step_err {
            return Err(e);
        }
        let line = match result {
            Ok(line) => line,
            Err(e @ TrainError::NonFinite { .. }) => {
                return Err(CliError::Numeric(format!(
                    "{e}; {} keeps the state after epoch {}",
                    out.display(),
                    ckpt.trainer.epoch
                )))
            }
            Err(e) => return Err(e.into()),
        };
        // run_epoch may have updated parameters before failing; only a
        // completed epoch is saved.
        ckpt.save(out)?;
        writeln!(log, "{line}").map_err(io_err(log_path))?;
        log.flush().map_err(io_err(log_path))?;
        last = line.to_string();
    }
    if let Some((p, mut w)) = steps {
        w.flush().map_err(io_err(p))?;
    }
    Ok(last)
}

fn image_tensor(t: Tensor<f64>) -> Result<Tensor<f64>, CliError> {
    let (h, w) = (t.shape()[t.shape().len() - 2], t.shape()[t.shape().len() - 1]);
    Ok(t.reshape(&[1, 1, h, w])?)
}

fn check_resolution(ckpt: &Checkpoint, t: &Tensor<f64>, what: &Path) -> Result<(), CliError> {
    let s = t.shape();
    let hw = (s[s.len() - 2], s[s.len() - 1]);
    if let Some(r) = ckpt.resolution {
        if r != hw {
            return Err(CliError::Input(format!(
                "{} is {}x{}, but the model was trained on {}x{} images",
                what.display(),
                hw.0,
                hw.1,
                r.0,
                r.1
            )));
        }
    }
    let f = ckpt.trainer.model.spatial_factor();
    if hw.0 % f != 0 || hw.1 % f != 0 {
        return Err(CliError::Input(format!(
            "{} is {}x{}; both sides must be divisible by {f}",
            what.display(),
            hw.0,
            hw.1
        )));
    }
    Ok(())
}

pub fn fuse(a: &FuseArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let x1 = image_tensor(load_grayscale(&a.x1)?)?;
    let x2 = image_tensor(load_grayscale(&a.x2)?)?;
    check_resolution(&ckpt, &x1, &a.x1)?;
    check_resolution(&ckpt, &x2, &a.x2)?;
    let (y, z) = ckpt.trainer.model.forward(&x1, &x2)?;
    save_grayscale(&y, &a.out)?;
    rawfile::save(&z, &a.z_file)?;
    if let Some(p) = &a.y_raw {
        rawfile::save(&y, p)?;
    }
    Ok(())
}

pub fn decompose(a: &DecomposeArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let y = if rawfile::is_raw(&a.y) {
        rawfile::load(&a.y)?
    } else {
        load_grayscale(&a.y)?
    };
    let y = image_tensor(y)?;
    check_resolution(&ckpt, &y, &a.y)?;
    let z = match &a.z_file {
        Some(p) => {
            let z = image_tensor(rawfile::load(p)?)?;
            if z.shape() != y.shape() {
                return Err(CliError::Input(format!(
                    "{} has shape {:?}, the fused image {:?}",
                    p.display(),
                    z.shape(),
                    y.shape()
                )));
            }
            z
        }
        None => {
            let spec = LatentSpec::new(
                a.latent.unwrap_or(ckpt.config.latent),
                a.seed.unwrap_or(ckpt.config.seed),
            );
            sample_latent(&spec, y.shape(), 0)
        }
    };
    let (h1, h2) = ckpt.trainer.model.inverse(&y, &z)?;
    save_grayscale(&h1, &a.out_x1)?;
    save_grayscale(&h2, &a.out_x2)?;
    Ok(())
}

pub fn roundtrip(a: &RoundtripArgs) -> Result<(), CliError> {
    let (mut model, resolution) = match &a.checkpoint {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            (c.trainer.model, c.resolution)
        }
        None => {
            let cfg = load_config(a.config.as_deref())?;
            cfg.validate()?;
            let side = cfg.synth_size;
            (FlowModel::new(cfg.model_config())?, Some((side, side)))
        }
    };
    if let Some(b) = a.randomize {
        if !(b.is_finite() && b >= 0.0) {
            return Err(CliError::Usage(format!("--randomize needs a finite bound >= 0, got {b}")));
        }
        model.randomize_output_layers(a.seed, b);
    }
    let (h, w) = match (a.size, resolution) {
        (Some(s), _) => (s, s),
        (None, Some(r)) => r,
        (None, None) => (32, 32),
    };
    let f = model.spatial_factor();
    if h % f != 0 || w % f != 0 {
        return Err(CliError::Usage(format!("{h}x{w} inputs are not divisible by {f}")));
    }
    let model32: Option<FlowModel32> = a.truncate_f32.then(|| model.cast());
    let spec = LatentSpec::new(LatentKind::Uniform01, a.seed);
    let mut worst = 0.0f64;
    for t in 0..a.trials as u64 {
        let draw = |i: u64| {
            sample_latent::<f64>(&spec, &[1, 1, h, w], 2 * t + i).map(|u| 0.01 + 0.98 * u)
        };
        let (x1, x2) = (draw(0), draw(1));
        let (y, z) = model.forward(&x1, &x2)?;
        let (r1, r2) = match &model32 {
            Some(m) => {
                let (a, b) = m.inverse(&y.cast(), &z.cast())?;
                (a.cast(), b.cast())
            }
            None => model.inverse(&y, &z)?,
        };
        worst = worst.max(r1.max_abs_diff(&x1)).max(r2.max_abs_diff(&x2));
    }
    println!("trials\t{}\nmax_abs_error\t{worst:e}", a.trials);
    if worst < 1e-5 {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("round-trip error {worst:e} is not below 1e-5")))
    }
}

/// Scores every pair: fusion metrics on `y = f(x1, x2)` and decomposition
/// SSIM from the same latent draws the trainer's validation uses.
pub fn evaluate_pairs(ckpt: &Checkpoint, pairs: &[ImagePair<f64>]) -> Result<Vec<MetricReport>, CliError> {
    let spec = ckpt.trainer.config.latent_spec();
    let model = &ckpt.trainer.model;
    pairs
        .iter()
        .map(|p| {
            let (x1, x2) = batch(&[p])?;
            let (y, z) = model.forward(&x1, &x2)?;
            let zd = validation_latent(&spec, &p.id, z.shape());
            let full = model
                .inverse(&y, &zd)
                .map_err(CliError::from)
                .and_then(|(h1, h2)| Ok(MetricReport::evaluate(p.id.clone(), &x1, &x2, &y, Some((&h1, &h2)))?))
                .and_then(|r| match (r.dec_ssim_1, r.dec_ssim_2) {
                    (Some(a), Some(b)) if a.is_finite() && b.is_finite() => Ok(r),
                    _ => Err(CliError::Numeric(format!("{}: decomposition is not finite", p.id))),
                });
            match full {
                // Same convention as validation: an untrained inverse that
                // overflows scores 0.
                Err(CliError::Numeric(_)) if !ckpt.trainer.config.uses_inverse_pass() => {
                    let mut r = MetricReport::evaluate(p.id.clone(), &x1, &x2, &y, None)?;
                    r.dec_ssim_1 = Some(0.0);
                    r.dec_ssim_2 = Some(0.0);
                    r.flags.push("decode");
                    Ok(r)
                }
                other => other,
            }
        })
        .collect()
}

pub fn metric_table(reports: &[MetricReport]) -> String {
    let mut s = MetricReport::tsv_header();
    s.push('\n');
    for r in reports {
        s.push_str(&r.tsv_row());
        s.push('\n');
    }
    if let Some(m) = mean_report(reports) {
        s.push_str(&m.tsv_row());
        s.push('\n');
    }
    s
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let pairs = match &a.data {
        Some(dir) => load_pairs(dir)?,
        None => ckpt.config.datasets()?.1,
    };
    if pairs.is_empty() {
        return Err(CliError::Input("no image pairs to evaluate".into()));
    }
    for p in &pairs {
        let t = p.x1.reshape(&[1, 1, p.height(), p.width()])?;
        check_resolution(&ckpt, &t, Path::new(&p.id))?;
    }
    let table = metric_table(&evaluate_pairs(&ckpt, &pairs)?);
    match &a.out {
        Some(p) => fs::write(p, table).map_err(io_err(p)),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

pub const SUMMARY_HEADER: &str =
    "cell\tk\tlambda\talpha\tlatent\tseed\tfusion_ssim_1\tfusion_ssim_2\tdec_ssim_1\tdec_ssim_2\tstatus";

/// Grid cells in row-major order (k outermost, latent innermost). Empty
/// lists fall back to the base configuration's value.
pub fn grid(base: &RunConfig, a: &AblateArgs) -> Vec<RunConfig> {
    fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
        if v.is_empty() {
            vec![d]
        } else {
            v.to_vec()
        }
    }
    let ks = or(&a.k, base.k);
    let ls = or(&a.lambda, base.lambda);
    let al = or(&a.alpha, base.alpha);
    let lat = or(&a.latent, base.latent);
    let mut cells = Vec::new();
    for &k in &ks {
        for &lambda in &ls {
            for &alpha in &al {
                for &latent in &lat {
                    cells.push(RunConfig {
                        k,
                        lambda,
                        alpha,
                        latent,
                        seed: base.seed.wrapping_add(cells.len() as u64),
                        ..base.clone()
                    });
                }
            }
        }
    }
    cells
}

pub fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let base = load_config(a.config.as_deref())?;
    base.validate()?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for (i, cfg) in grid(&base, a).iter().enumerate() {
        let ckpt_path = a.out.join(format!("cell-{i:03}.finn"));
        let log_path = a.out.join(format!("cell-{i:03}.log"));
        let outcome = cfg
            .validate()
            .and_then(|_| train_to(cfg, &ckpt_path, &log_path, None))
            .and_then(|_| {
                let ckpt = Checkpoint::load(&ckpt_path)?;
                let reports = evaluate_pairs(&ckpt, &cfg.datasets()?.1)?;
                mean_report(&reports).ok_or_else(|| CliError::Input("empty validation set".into()))
            });
        let cols = match &outcome {
            Ok(m) => [
                format_sig(m.q_ssim_1),
                format_sig(m.q_ssim_2),
                m.dec_ssim_1.map(format_sig).unwrap_or_else(|| "NA".into()),
                m.dec_ssim_2.map(format_sig).unwrap_or_else(|| "NA".into()),
                "ok".to_string(),
            ]
            .join("\t"),
            Err(e) => format!(
                "NA\tNA\tNA\tNA\tfailed: {}",
                e.to_string().replace(['\t', '\n'], " ")
            ),
        };
        let row = format!(
            "{i}\t{}\t{}\t{}\t{}\t{}\t{cols}\n",
            cfg.k, cfg.lambda, cfg.alpha, cfg.latent, cfg.seed
        );
        print!("{row}");
        summary.push_str(&row);
    }
    let p = a.out.join("summary.tsv");
    fs::write(&p, summary).map_err(io_err(&p))
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig {
            k: 2,
            hidden_channels: 4,
            ..RunConfig::default()
        },
    };
    cfg.validate()?;
    let mut model = FlowModel::new(cfg.model_config())?;
    model.randomize_output_layers(cfg.seed, 0.1);
    let f = model.spatial_factor();
    if a.size % f != 0 {
        return Err(CliError::Usage(format!("--size {} is not divisible by {f}", a.size)));
    }
    let spec = LatentSpec::new(LatentKind::Uniform01, cfg.seed);
    let shape = [2, 1, a.size, a.size];
    let x1 = sample_latent::<f64>(&spec, &shape, 0).map(|u| 0.05 + 0.9 * u);
    let x2 = sample_latent::<f64>(&spec, &shape, 1).map(|u| 0.05 + 0.9 * u);
    let report = gradient_check_model(
        &model,
        &x1,
        &x2,
        &cfg.train_config(),
        GradCheckOptions::default(),
        a.fault.map(|s| (s, 3.0)),
    )
    .map_err(|e| CliError::Numeric(e.to_string()))?;
    println!(
        "parameters\t{}\nmax_rel_error\t{:e}\ntolerance\t{:e}",
        report.entries.len(),
        report.max_rel_error(),
        report.options_tolerance
    );
    if report.passed() {
        println!("result\tpass");
        Ok(())
    } else {
        let names = model.param_names();
        let failing: Vec<&str> = report.failing_params().iter().map(|&i| names[i].as_str()).collect();
        println!("result\tfail\nfailing\t{}", failing.join(","));
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:e}",
            report.max_rel_error()
        )))
    }
}
