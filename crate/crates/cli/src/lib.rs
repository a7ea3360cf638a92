//! The `trupnet` command line.
//!
//! Progress goes to stderr; machine-readable results (CSV, `key=value`,
//! images, checkpoints) go to files. Exit codes: 0 success, 1 runtime or
//! data error, 2 usage error.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use trupnet::data::{self, pnm, SplitSpec};
use trupnet::fps::{self, MonotonicClock};
use trupnet::gradcheck;
use trupnet::metrics;
use trupnet::model::binarize;
use trupnet::train::{TrainConfig, Trainer, LOG_HEADER};
use trupnet::{Error, ModelConfig, Result, TransRUPNet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "trupnet", version, about = "TransRUPNet polyp segmentation from scratch")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (images/*.ppm, masks/*.pgm, split files)
    SynthData(SynthArgs),
    /// Train a model and write a resumable checkpoint
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write a per-image CSV
    Eval(EvalArgs),
    /// Predict a binary mask for one image
    Predict(PredictArgs),
    /// Measure single-image inference throughput
    Bench(BenchArgs),
    /// Compare analytic gradients with finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training share; the rest is halved into val and test. Defaults to all.
    #[arg(long)]
    pub train_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Architecture preset: default, toy or tiny
    #[arg(long, default_value = "default")]
    pub model: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory; also receives train_log.csv
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f32,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Save every N epochs (0: only at the end)
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub no_augment: bool,
    /// Continue from the checkpoint in --out up to --epochs in total
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split file to evaluate (train, val or test); all images if absent
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub threshold: Option<f32>,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input P6 image
    #[arg(long)]
    pub image: PathBuf,
    /// Output P5 mask at the model's input resolution
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f32>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint to benchmark; a freshly initialised model if absent
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[arg(long, default_value = "fps.txt")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random draws per op
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Parameter scalars checked per draw of the tiny model
    #[arg(long, default_value_t = 10)]
    pub model_params: usize,
    /// Also write the table as CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::SynthData(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => grad(a),
    }
}

fn synth(a: SynthArgs) -> Result<i32> {
    let samples = data::synth_dataset(a.n, a.size, a.seed)?;
    for s in &samples {
        data::save_sample(&a.out, s)?;
    }
    let ids: Vec<String> = samples.into_iter().map(|s| s.id).collect();
    let spec = SplitSpec::with_remainder_halved(ids.len(), a.train_n.unwrap_or(ids.len()), a.seed)?;
    let (tr, va, te) = data::split_dataset(ids, &spec)?;
    data::write_split_manifest(&a.out, [&tr, &va, &te])?;
    eprintln!(
        "wrote {} samples ({}/{}/{}) to {}",
        spec.total(),
        tr.len(),
        va.len(),
        te.len(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

/// Samples listed in `<dir>/<split>.txt`, or every sample when the file is
/// missing.
fn load_split(dir: &Path, split: &str, target: (usize, usize)) -> Result<Vec<data::Sample>> {
    match data::read_split(dir, &format!("{split}.txt"))? {
        Some(ids) if !ids.is_empty() => data::load_ids(dir, &ids, target),
        Some(_) => Err(Error::Data(format!("{split}.txt in {} is empty", dir.display()))),
        None => data::load_dir(dir, target),
    }
}

fn train(a: TrainArgs) -> Result<i32> {
    let mut trainer = if a.resume {
        let mut t = Trainer::restore(&a.out)?;
        t.config.epochs = a.epochs;
        eprintln!("resumed at epoch {}", t.epochs_done());
        t
    } else {
        let config = ModelConfig::preset(&a.model.model)?.with_input_size(a.size, a.size);
        let model = TransRUPNet::new(config, a.seed)?;
        Trainer::new(
            model,
            TrainConfig {
                lr: a.lr,
                batch_size: a.batch,
                epochs: a.epochs,
                seed: a.seed,
                checkpoint_every: a.checkpoint_every,
                augment: !a.no_augment,
            },
        )?
    };
    let samples = load_split(&a.data, "train", trainer.model.config().input_size)?;
    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("train_log.csv");
    let fresh = !a.resume || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&log_path)?;
    if fresh {
        writeln!(log, "{LOG_HEADER}")?;
    }
    while trainer.epochs_done() < trainer.config.epochs {
        let stats = trainer.train_epoch(&samples, Some(&mut log))?;
        eprintln!("epoch {} loss {:.5}", stats.epoch, stats.mean_loss);
        let every = trainer.config.checkpoint_every;
        if every > 0 && stats.epoch % every == 0 {
            trainer.save_checkpoint(&a.out)?;
        }
    }
    trainer.save_checkpoint(&a.out)?;
    eprintln!("checkpoint written to {}", a.out.display());
    Ok(EXIT_OK)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let model = TransRUPNet::load(&a.ckpt)?;
    let target = model.config().input_size;
    let samples = match &a.split {
        Some(split) => load_split(&a.data, split, target)?,
        None => data::load_dir(&a.data, target)?,
    };
    let threshold = a.threshold.unwrap_or(model.config().threshold);
    let report = metrics::evaluate_dataset(&model, &samples, threshold, a.batch)?;
    fs::write(&a.out, report.to_csv())?;
    let m = report.aggregate;
    eprintln!(
        "{} images: mDSC {:.4} mIoU {:.4} recall {:.4} precision {:.4} F2 {:.4}",
        report.n_images(),
        m.dice,
        m.iou,
        m.recall,
        m.precision,
        m.f2
    );
    Ok(EXIT_OK)
}

fn predict(a: PredictArgs) -> Result<i32> {
    let model = TransRUPNet::load(&a.ckpt)?;
    let image = data::load_image(&a.image, model.config().input_size)?;
    let threshold = a.threshold.unwrap_or(model.config().threshold);
    let x = image.reshape(&[1, 3, image.shape()[1], image.shape()[2]])?;
    let probs = model.infer(&x)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Contract(format!("threshold {threshold} outside (0, 1)")));
    }
    let mask = binarize(&probs, threshold);
    let (h, w) = (mask.shape()[2], mask.shape()[3]);
    pnm::write_pnm(&a.out, &pnm::tensor_to_image(&mask.reshape(&[1, h, w])?)?)?;
    eprintln!("mask written to {}", a.out.display());
    Ok(EXIT_OK)
}

fn bench(a: BenchArgs) -> Result<i32> {
    let model = match &a.ckpt {
        Some(dir) => TransRUPNet::load(dir)?,
        None => TransRUPNet::new(ModelConfig::preset(&a.model.model)?.with_input_size(a.size, a.size), a.seed)?,
    };
    let stats = fps::bench_model(&model, (a.size, a.size), a.warmup, a.frames, &mut MonotonicClock::default())?;
    fs::write(&a.out, stats.to_kv())?;
    eprintln!("{:.2} fps over {} frames", stats.fps, stats.n_frames);
    Ok(EXIT_OK)
}

fn grad(a: GradcheckArgs) -> Result<i32> {
    let rows = gradcheck::run_suite(a.seed, a.seeds, a.model_params)?;
    let mut csv = String::from("op,seeds,checked,max_violation,max_rel_error,passed\n");
    println!("{:<22} {:>6} {:>8} {:>14} {:>14}  result", "op", "seeds", "checked", "max_violation", "max_rel_error");
    for r in &rows {
        println!(
            "{:<22} {:>6} {:>8} {:>14.3e} {:>14.3e}  {}",
            r.name,
            r.seeds,
            r.checked,
            r.max_violation,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{},{},{},{:e},{:e},{}\n",
            r.name, r.seeds, r.checked, r.max_violation, r.max_rel_error, r.passed
        ));
    }
    if let Some(out) = &a.out {
        fs::write(out, csv)?;
    }
    Ok(if rows.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_ERROR })
}
