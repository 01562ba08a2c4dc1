//! `sgq` command-line front end.
//!
//! [`run`] parses arguments and dispatches to one subcommand, writing all
//! normal output to the supplied writer. Lines that carry wall-clock times
//! start with [`TIME_PREFIX`] so runs can be diffed after filtering them out.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sgq_core::data::{self, ppm, split_dataset, synthetic_dataset, Dataset, Split, SyntheticSpec};
use sgq_core::nn::Architecture;
use sgq_core::quant::{quantize_weights_ptq, Bits};
use sgq_core::saliency::{compute_saliency_for, SaliencyMap, SaliencyTarget};
use sgq_core::train::{
    evaluate_metrics, train_with_progress, write_log_csv, Checkpoint, Mode, TrainConfig,
};
use sgq_core::{Error, Tensor};

pub const TIME_PREFIX: &str = "[time]";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Samples per class of the synthetic corpus when not given.
pub const DEFAULT_SYNTHETIC_PER_CLASS: usize = 250;

#[derive(Debug, Parser)]
#[command(
    name = "sgq",
    version,
    about = "Saliency-guided quantization-aware training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a CSV log beside it.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Post-training weight quantization of a checkpoint.
    Quantize(QuantizeArgs),
    /// Export saliency maps as PGM images.
    Saliency(SaliencyArgs),
    /// Write the synthetic corpus as PPM files.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Corpus root with one sub-directory of PPM images per class.
    #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use the generated blob-position corpus.
    #[arg(long)]
    synthetic: bool,
    /// Images per class of the synthetic corpus.
    #[arg(long, value_name = "N")]
    synthetic_per_class: Option<usize>,
    /// Side length images are resized to.
    #[arg(long, value_name = "N")]
    resolution: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Flat key=value file; command-line flags take precedence.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, default_value = "model.sqck", value_name = "PATH")]
    out: PathBuf,
    #[arg(long, value_name = "MODE")]
    mode: Option<Mode>,
    #[arg(long, value_name = "K")]
    bits: Option<Bits>,
    #[arg(long, value_name = "R")]
    mask_ratio: Option<f32>,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    batch: Option<usize>,
    #[arg(long, value_name = "F")]
    lr: Option<f32>,
    #[arg(long, value_name = "F")]
    alpha_lr: Option<f32>,
    #[arg(long, value_name = "F")]
    alpha_init: Option<f32>,
    /// Weight of the L2 penalty on α.
    #[arg(long, value_name = "F")]
    eta: Option<f32>,
    #[arg(long, value_name = "F")]
    lambda1: Option<f32>,
    #[arg(long, value_name = "F")]
    lambda2: Option<f32>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Saliency objective: loss or logit.
    #[arg(long, value_name = "TARGET")]
    saliency: Option<SaliencyTarget>,
    /// Layer layout, e.g. conv:16,act,pool,dense:8.
    #[arg(long, value_name = "SPEC")]
    arch: Option<Architecture>,
    /// Force augmentation on (default for --data).
    #[arg(long, conflicts_with = "no_augment")]
    augment: bool,
    /// Force augmentation off (default for --synthetic).
    #[arg(long)]
    no_augment: bool,
    /// In sgt_pact mode, keep PACT but skip k-bit rounding.
    #[arg(long)]
    no_fake_quant: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Split seed; defaults to the seed stored in the checkpoint.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    input: PathBuf,
    #[arg(long, value_name = "K")]
    bits: Bits,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SaliencyArgs {
    checkpoint: PathBuf,
    /// PPM images; when omitted, test-split samples of the dataset are used.
    images: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// At most this many dataset samples.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    #[arg(long, default_value = ".", value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_name = "N", default_value_t = DEFAULT_SYNTHETIC_PER_CLASS)]
    synthetic_per_class: usize,
    #[arg(long, value_name = "N", default_value_t = data::DEFAULT_RESOLUTION)]
    resolution: usize,
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (expected train, val or test)")),
    }
}

/// Command failure carrying the exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
            Error::Shape { .. } | Error::Backward(_) => EXIT_INTERNAL,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_INTERNAL,
            message: format!("output: {e}"),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code; errors are reported on `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Quantize(a) => cmd_quantize(a, out),
        Command::Saliency(a) => cmd_saliency(a, out),
        Command::Synth(a) => cmd_synth(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

/// Applies a flat `key=value` file; blank lines and `#` comments are skipped.
fn apply_config_file(cfg: &mut TrainConfig, path: &Path) -> CmdResult {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let known = cfg
            .set(k, v)
            .map_err(|e| usage(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !known {
            return Err(usage(format!(
                "{}:{}: unknown key {:?}",
                path.display(),
                n + 1,
                k.trim()
            )));
        }
    }
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig {
        augment: !a.data.synthetic,
        ..TrainConfig::default()
    };
    if let Some(path) = &a.config {
        apply_config_file(&mut cfg, path)?;
    }
    macro_rules! take {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { cfg.$field = v; })*
        };
    }
    take!(
        mode => mode, bits => bits, mask_ratio => mask_ratio, epochs => epochs, batch => batch_size,
        lr => lr, alpha_lr => alpha_lr, alpha_init => alpha_init, eta => alpha_reg,
        lambda1 => lambda1, lambda2 => lambda2, seed => seed,
    );
    if let Some(t) = a.saliency {
        cfg.saliency_target = Some(t);
    }
    if let Some(arch) = &a.arch {
        cfg.arch = Some(arch.clone());
    }
    if a.augment {
        cfg.augment = true;
    }
    if a.no_augment {
        cfg.augment = false;
    }
    if a.no_fake_quant {
        cfg.fake_quant = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads or generates the dataset and assigns splits with `seed`.
fn load_data(d: &DataArgs, default_resolution: usize, seed: u64) -> Result<Dataset, Failure> {
    let resolution = d.resolution.unwrap_or(default_resolution);
    let mut ds = match (&d.data, d.synthetic) {
        (Some(root), _) => data::load_image_dataset(root, resolution)?,
        (None, true) => synthetic_dataset(SyntheticSpec::new(
            d.synthetic_per_class.unwrap_or(DEFAULT_SYNTHETIC_PER_CLASS),
            resolution,
            seed,
        ))?,
        (None, false) => return Err(usage("no dataset: pass --data DIR or --synthetic")),
    };
    if ds.skipped > 0 {
        log::warn!("{} unreadable images skipped", ds.skipped);
    }
    split_dataset(&mut ds, data::DEFAULT_FRACTIONS, seed)?;
    Ok(ds)
}

fn print_metrics(out: &mut dyn Write, title: &str, m: &sgq_core::Metrics) -> std::io::Result<()> {
    writeln!(out, "{title}:")?;
    write!(out, "{m}")
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = resolve_config(&a)?;
    let ds = load_data(&a.data, data::DEFAULT_RESOLUTION, cfg.seed)?;
    let counts: Vec<usize> = Split::ALL.iter().map(|&s| ds.indices(s).len()).collect();
    writeln!(
        out,
        "data: {} classes, {} train / {} val / {} test, {}x{}",
        ds.num_classes(),
        counts[0],
        counts[1],
        counts[2],
        ds.input.height,
        ds.input.width
    )?;
    writeln!(
        out,
        "mode {} | bits {} | epochs {} | batch {} | seed {}",
        cfg.mode, cfg.bits, cfg.epochs, cfg.batch_size, cfg.seed
    )?;

    let start = Instant::now();
    let mut last = start;
    let mut io_result = Ok(());
    let outcome = train_with_progress(&cfg, &ds, |e| {
        let now = Instant::now();
        if io_result.is_err() {
            return;
        }
        io_result = writeln!(
            out,
            "epoch {:>3}  loss {:.6}  val acc {:.2}%  sens {:.2}%  spec {:.2}%",
            e.epoch,
            e.train_loss,
            100.0 * e.val_accuracy,
            100.0 * e.val_sensitivity,
            100.0 * e.val_specificity
        )
        .and_then(|_| {
            writeln!(
                out,
                "{TIME_PREFIX} epoch {} took {:.2}s",
                e.epoch,
                (now - last).as_secs_f64()
            )
        });
        last = now;
    })?;
    io_result?;
    writeln!(
        out,
        "{TIME_PREFIX} training took {:.2}s",
        start.elapsed().as_secs_f64()
    )?;

    outcome.checkpoint(&cfg, &ds.class_names).save(&a.out)?;
    let log_path = a.out.with_extension("csv");
    write_log_csv(&outcome.log, &log_path)?;
    writeln!(
        out,
        "best epoch {}; checkpoint {}; log {}",
        outcome.best_epoch,
        a.out.display(),
        log_path.display()
    )?;
    print_metrics(out, "validation", &outcome.val_metrics)?;
    if let Some(m) = &outcome.test_metrics {
        print_metrics(out, "test", m)?;
        writeln!(out, "test accuracy: {:.2}%", 100.0 * m.accuracy)?;
    }
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io { .. } => e.into(),
        other => usage(format!("{}: {other}", path.display())),
    })
}

/// Seed for re-deriving splits: explicit flag, else the one used in training.
fn ckpt_seed(ck: &Checkpoint, flag: Option<u64>) -> Result<u64, Failure> {
    match flag {
        Some(s) => Ok(s),
        None => Ok(ck.config()?.map_or(0, |c| c.seed)),
    }
}

fn check_compatible(ck: &Checkpoint, ds: &Dataset) -> CmdResult {
    let m = &ck.model;
    if m.num_classes() != ds.num_classes() {
        return Err(usage(format!(
            "checkpoint has {} classes, dataset {}",
            m.num_classes(),
            ds.num_classes()
        )));
    }
    if m.input_shape() != ds.input {
        return Err(usage(format!(
            "checkpoint expects {:?} inputs, dataset has {:?}",
            m.input_shape(),
            ds.input
        )));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let ck = load_ckpt(&a.checkpoint)?;
    let ds = load_data(
        &a.data,
        ck.model.input_shape().height,
        ckpt_seed(&ck, a.seed)?,
    )?;
    check_compatible(&ck, &ds)?;
    let start = Instant::now();
    let m = evaluate_metrics(&ck.model, &ds, a.split)?;
    writeln!(
        out,
        "{TIME_PREFIX} evaluation took {:.2}s",
        start.elapsed().as_secs_f64()
    )?;
    writeln!(
        out,
        "checkpoint {} on {:?} split ({} samples)",
        a.checkpoint.display(),
        a.split,
        m.total()
    )?;
    write!(out, "{m}")?;
    Ok(())
}

fn file_len(path: &Path) -> Result<u64, Failure> {
    fs::metadata(path)
        .map(|m| m.len())
        .map_err(|e| Failure::from(Error::io(path, e)))
}

fn cmd_quantize(a: QuantizeArgs, out: &mut dyn Write) -> CmdResult {
    let mut ck = load_ckpt(&a.input)?;
    if let Some(k) = ck.packed_bits() {
        if k != a.bits {
            return Err(usage(format!(
                "{} already holds {k}-bit packed weights; cannot requantize to {} bits",
                a.input.display(),
                a.bits
            )));
        }
    }
    ck.model = quantize_weights_ptq(&ck.model, a.bits);
    ck.metadata.insert("ptq.bits".into(), a.bits.to_string());
    ck.save(&a.out)?;
    let (before, after) = (file_len(&a.input)?, file_len(&a.out)?);
    writeln!(out, "input  {}: {before} bytes", a.input.display())?;
    writeln!(out, "output {}: {after} bytes", a.out.display())?;
    writeln!(out, "ratio {:.4}", after as f64 / before as f64)?;
    Ok(())
}

fn class_name(ck: &Checkpoint, c: usize) -> String {
    ck.class_names()
        .and_then(|n| n.get(c).cloned())
        .unwrap_or_else(|| c.to_string())
}

fn cmd_saliency(a: SaliencyArgs, out: &mut dyn Write) -> CmdResult {
    let ck = load_ckpt(&a.checkpoint)?;
    let shape = ck.model.input_shape();
    let target = ck
        .config()?
        .map_or(SaliencyTarget::Loss, |c| c.saliency_target());

    let mut inputs: Vec<(String, Tensor)> = Vec::new();
    if a.images.is_empty() {
        let ds = load_data(&a.data, shape.height, ckpt_seed(&ck, a.seed)?)?;
        check_compatible(&ck, &ds)?;
        let idx = ds.indices(Split::Test);
        for &i in idx.iter().take(a.limit.unwrap_or(usize::MAX)) {
            inputs.push((ds.samples[i].name.clone(), ds.samples[i].image.clone()));
        }
    } else {
        if shape.height != shape.width {
            return Err(usage("image inputs need a model with square inputs"));
        }
        for path in &a.images {
            let bytes = fs::read(path).map_err(|e| Failure::from(Error::io(path, e)))?;
            let img =
                ppm::decode_ppm(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            inputs.push((stem, data::rgb_to_tensor(&img, shape.height)));
        }
    }
    fs::create_dir_all(&a.out).map_err(|e| Failure::from(Error::io(&a.out, e)))?;

    for (stem, image) in inputs {
        let dims = image.shape().to_vec();
        let x = image.reshape([1, dims[0], dims[1], dims[2]])?;
        let logits = ck.model.logits(&x)?;
        let predicted = sgq_core::nn::argmax(logits.data());
        // The prediction stands in for the unknown label.
        let s = compute_saliency_for(&ck.model, &x, &[predicted], target)?;
        let map = SaliencyMap::new(s.reshape(dims.clone())?, predicted)?;
        let path = a.out.join(format!("{stem}.saliency.pgm"));
        fs::write(&path, map.to_pgm()?).map_err(|e| Failure::from(Error::io(&path, e)))?;
        writeln!(
            out,
            "{stem}: predicted {} ({predicted}) -> {}",
            class_name(&ck, predicted),
            path.display()
        )?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> CmdResult {
    let ds = synthetic_dataset(SyntheticSpec::new(
        a.synthetic_per_class,
        a.resolution,
        a.seed,
    ))?;
    ds.write_corpus(&a.out)?;
    writeln!(
        out,
        "wrote {} images in {} classes to {}",
        ds.len(),
        ds.num_classes(),
        a.out.display()
    )?;
    Ok(())
}
