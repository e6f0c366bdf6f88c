use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use prefilter::classifier::Classifier;
use prefilter::codec::{Codec, CodecRegistry, QualityRange};
use prefilter::config::{preset_name, Preset, RunConfig, TrainConfig};
use prefilter::distortion::FilterMode;
use prefilter::eval::{build_rd_curve, emit_report, read_curves_csv, task_accuracy_curve, write_curves_csv, Metric, RdCurve};
use prefilter::filter::{Filter, FilterCheckpoint};
use prefilter::image::Image;
use prefilter::surrogate::Surrogate;
use prefilter::trainer::{self, GanOptions, RunDir};
use prefilter::{Error, Result};

pub const EXIT_USAGE: u8 = 2;

/// Exit status for a failed run, by error category.
pub fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => EXIT_USAGE,
        "input" => 3,
        "io" => 4,
        "checkpoint" => 5,
        "adapter" => 6,
        "numeric" => 7,
        _ => 8,
    }
}

#[derive(Debug, Parser)]
#[command(name = "prefilter", version, about = "Train and evaluate learned pre-filters for conventional image codecs")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the differentiable surrogate codec.
    TrainSurrogate(Flags),
    /// Train a pre-filter against a frozen surrogate (mode from the config).
    TrainFilter(Flags),
    /// Apply a trained filter to images and write PNGs.
    FilterImages(Flags),
    /// Rate-distortion sweep of a codec, with and without a filter.
    EvalRd(Flags),
    /// Classification accuracy versus rate.
    EvalTask(Flags),
    /// Savings analysis and plots from evaluation CSVs.
    Report(Flags),
}

#[derive(Debug, Clone, Args)]
struct Flags {
    /// TOML overrides layered on the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; everything the run writes goes here.
    #[arg(long)]
    out: PathBuf,
    /// Directory of codec adapter TOML files.
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// desk_scale | paper_scale.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    codec: Option<String>,
    /// Comma-separated quality settings.
    #[arg(long, value_delimiter = ',')]
    qualities: Option<Vec<i32>>,
    /// psnr | ms_ssim | ms_ssim_db | mse.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    filter_checkpoint: Option<PathBuf>,
    #[arg(long)]
    surrogate_checkpoint: Option<PathBuf>,
    /// Frozen classifier for task training and evaluation.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Write the run directory and configuration snapshot without training.
    #[arg(long)]
    dry_run: bool,
    /// Input images, image directories, or (for `report`) CSV files.
    inputs: Vec<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    let (name, flags) = match &cli.command {
        Command::TrainSurrogate(f) => ("train-surrogate", f),
        Command::TrainFilter(f) => ("train-filter", f),
        Command::FilterImages(f) => ("filter-images", f),
        Command::EvalRd(f) => ("eval-rd", f),
        Command::EvalTask(f) => ("eval-task", f),
        Command::Report(f) => ("report", f),
    };
    std::fs::create_dir_all(&flags.out).map_err(|e| Error::io(&flags.out, e))?;
    write_run_config(name, flags)?;
    match cli.command {
        Command::TrainSurrogate(f) => train_surrogate(&f),
        Command::TrainFilter(f) => train_filter(&f),
        Command::FilterImages(f) => filter_images(&f),
        Command::EvalRd(f) => eval_rd(&f),
        Command::EvalTask(f) => eval_task(&f),
        Command::Report(f) => report(&f),
    }
}

fn write_run_config(subcommand: &str, f: &Flags) -> Result<()> {
    let rc = RunConfig {
        subcommand: subcommand.into(),
        config: f.config.clone(),
        seed: f.seed,
        out: f.out.clone(),
        adapters: f.adapters.clone(),
        preset: f.preset.clone(),
        codec: f.codec.clone(),
        qualities: f.qualities.clone(),
        metric: f.metric.clone(),
        filter_checkpoint: f.filter_checkpoint.clone(),
        surrogate_checkpoint: f.surrogate_checkpoint.clone(),
        inputs: f.inputs.clone(),
    };
    let path = f.out.join("run.toml");
    let text = toml::to_string_pretty(&rc).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn train_config(f: &Flags) -> Result<TrainConfig> {
    let fallback: Preset = f.preset.as_deref().unwrap_or("desk_scale").parse()?;
    let mut cfg = match &f.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut over: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if f.preset.is_some() {
                over.insert("preset".into(), toml::Value::String(preset_name(fallback).into()));
            }
            let preset = match over.get("preset") {
                Some(toml::Value::String(s)) => s.parse()?,
                _ => fallback,
            };
            TrainConfig::layered(preset, over)?
        }
        None => TrainConfig::preset(fallback),
    };
    if let Some(seed) = f.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &f.surrogate_checkpoint {
        cfg.surrogate_checkpoint = Some(p.clone());
    }
    if let Some(p) = &f.classifier {
        cfg.task.classifier = Some(p.clone());
    }
    if let Some(c) = &f.codec {
        cfg.task.codec = c.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn registry(f: &Flags) -> Result<CodecRegistry> {
    let mut reg = CodecRegistry::with_builtins();
    if let Some(dir) = &f.adapters {
        reg.load_dir(dir)?;
    }
    Ok(reg)
}

fn train_surrogate(f: &Flags) -> Result<()> {
    let cfg = train_config(f)?;
    let corpus = trainer::load_corpus(&cfg.data, cfg.seed)?;
    let run = RunDir::create(&f.out, &cfg)?;
    if f.dry_run {
        return Ok(());
    }
    let out = trainer::train_surrogate(&cfg, &corpus, Some(&run))?;
    log::info!(
        "surrogate {} trained for {} iterations; final loss {:.4}",
        out.model.content_hash(),
        out.model.iterations,
        out.trace.last().map_or(f64::NAN, |r| r.loss)
    );
    Ok(())
}

fn train_filter(f: &Flags) -> Result<()> {
    let mut cfg = train_config(f)?;
    if f.dry_run {
        RunDir::create(&f.out, &cfg)?;
        return Ok(());
    }
    let path = cfg
        .surrogate_checkpoint
        .clone()
        .ok_or_else(|| Error::Config("train-filter needs --surrogate-checkpoint or surrogate_checkpoint in the config".into()))?;
    let surrogate = Surrogate::load(&path)?;
    match cfg.filter.mode {
        FilterMode::MsssimRetarget => {
            let corpus = trainer::load_corpus(&cfg.data, cfg.seed)?;
            let run = RunDir::create(&f.out, &cfg)?;
            trainer::train_filter(&cfg, &surrogate, &corpus, Some(&run))?;
        }
        FilterMode::Gan => {
            let corpus = trainer::load_corpus(&cfg.data, cfg.seed)?;
            let extractor = trainer::perceptual_extractor(&cfg)?;
            let run = RunDir::create(&f.out, &cfg)?;
            trainer::train_filter_gan(&cfg, &surrogate, &corpus, Some(&extractor), &GanOptions::default(), Some(&run))?;
        }
        FilterMode::Task => {
            let reg = registry(f)?;
            let codec = reg.get(&cfg.task.codec)?;
            let data = trainer::task_dataset(&cfg, cfg.task.train_images, cfg.seed)?;
            let classifier = if cfg.task.classifier.is_some() {
                trainer::prepare_classifier(&cfg, &data, None)?
            } else {
                let scratch = RunDir::create(&f.out, &cfg)?;
                let c = trainer::prepare_classifier(&cfg, &data, Some(&scratch))?;
                cfg.task.classifier = Some(f.out.join("classifier.json"));
                c
            };
            let run = RunDir::create(&f.out, &cfg)?;
            trainer::train_filter_task(&cfg, &surrogate, &classifier, codec, &data, Some(&run))?;
        }
    }
    log::info!("filter written to {}", f.out.join("filter.json").display());
    Ok(())
}

/// Loads a filter checkpoint together with the surrogate it references.
fn load_filter(f: &Flags) -> Result<Option<(Filter, Surrogate, FilterCheckpoint)>> {
    let Some(path) = &f.filter_checkpoint else {
        return Ok(None);
    };
    let ck = FilterCheckpoint::load(path)?;
    let surrogate_path = match &f.surrogate_checkpoint {
        Some(p) => p.clone(),
        None => ck
            .train_config()?
            .and_then(|c| c.surrogate_checkpoint)
            .ok_or_else(|| Error::Config("cannot locate the filter's surrogate; pass --surrogate-checkpoint".into()))?,
    };
    let surrogate = Surrogate::load(&surrogate_path)?;
    let filter = Filter::from_checkpoint(&ck, &surrogate)?;
    Ok(Some((filter, surrogate, ck)))
}

fn input_images(inputs: &[PathBuf]) -> Result<Vec<(PathBuf, Image)>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(trainer::load_image_dir(p)?);
        } else {
            out.push((p.clone(), Image::load(p)?));
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("no input images".into()));
    }
    Ok(out)
}

fn dataset_tag(inputs: &[PathBuf]) -> String {
    match inputs {
        [one] if one.is_dir() => one.file_name().map_or("images".into(), |n| n.to_string_lossy().into_owned()),
        _ => "images".into(),
    }
}

fn filter_images(f: &Flags) -> Result<()> {
    let (filter, surrogate, _) =
        load_filter(f)?.ok_or_else(|| Error::Config("filter-images needs --filter-checkpoint".into()))?;
    for (path, image) in input_images(&f.inputs)? {
        let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let target = f.out.join(format!("{stem}.png"));
        if target.canonicalize().ok() == path.canonicalize().ok() {
            return Err(Error::InvalidInput(format!("refusing to overwrite input {}", path.display())));
        }
        filter.apply(&surrogate, &image)?.save_png(&target)?;
    }
    Ok(())
}

fn default_qualities(r: QualityRange) -> Vec<i32> {
    let span = (r.max - r.min) as f64;
    let mut q: Vec<i32> = (1..10).map(|k| r.min + (span * k as f64 / 10.0).round() as i32).collect();
    q.dedup();
    q
}

fn qualities(f: &Flags, codec: &dyn Codec) -> Result<Vec<i32>> {
    let q = f.qualities.clone().unwrap_or_else(|| default_qualities(codec.quality_range()));
    if q.is_empty() {
        return Err(Error::Config("empty quality list".into()));
    }
    for &x in &q {
        codec.check_quality(x).map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(q)
}

fn eval_rd(f: &Flags) -> Result<()> {
    let reg = registry(f)?;
    let codec = reg.get(f.codec.as_deref().unwrap_or("jpeg"))?;
    let qs = qualities(f, codec)?;
    let metric: Metric = f.metric.as_deref().unwrap_or("ms_ssim").parse()?;
    if metric == Metric::Top1 {
        return Err(Error::Config("top-1 accuracy is evaluated by eval-task".into()));
    }
    let images: Vec<Image> = input_images(&f.inputs)?.into_iter().map(|(_, im)| im).collect();
    let tag = dataset_tag(&f.inputs);
    let mut curves = vec![build_rd_curve(&tag, &images, codec, &qs, metric, None)?];
    if let Some((filter, surrogate, _)) = load_filter(f)? {
        let apply = |im: &Image| filter.apply(&surrogate, im);
        curves.push(build_rd_curve(&tag, &images, codec, &qs, metric, Some(&apply))?);
    }
    write_curves_csv(&f.out.join("rd.csv"), &curves)
}

fn eval_task(f: &Flags) -> Result<()> {
    let cfg = train_config(f)?;
    let reg = registry(f)?;
    let codec = reg.get(&cfg.task.codec)?;
    let qs = qualities(f, codec)?;
    let filter = load_filter(f)?;
    let classifier_path = cfg
        .task
        .classifier
        .clone()
        .or_else(|| {
            let ck = filter.as_ref()?;
            ck.2.train_config().ok().flatten()?.task.classifier
        })
        .ok_or_else(|| Error::Config("eval-task needs a classifier (--classifier or task.classifier)".into()))?;
    let classifier = Classifier::load(&classifier_path)?;
    let (tag, data) = match f.inputs.as_slice() {
        [dir] => (dataset_tag(&f.inputs), trainer::load_labeled_dir(dir, cfg.task.image_size)?.1),
        [] => ("gratings".into(), prefilter::synth::grating_dataset(200, cfg.task.image_size, cfg.seed ^ 0xE7A1)),
        _ => return Err(Error::InvalidInput("eval-task takes one labeled directory".into())),
    };
    let mut curves: Vec<RdCurve> = vec![task_accuracy_curve(&tag, &data, Some(&classifier), codec, &qs, None)?];
    if let Some((filter, surrogate, _)) = &filter {
        let apply = |im: &Image| filter.apply(surrogate, im);
        curves.push(task_accuracy_curve(&tag, &data, Some(&classifier), codec, &qs, Some(&apply))?);
    }
    write_curves_csv(&f.out.join("task.csv"), &curves)
}

fn report(f: &Flags) -> Result<()> {
    if f.inputs.is_empty() {
        return Err(Error::Config("report needs at least one evaluation CSV".into()));
    }
    let mut curves = Vec::new();
    for p in &f.inputs {
        curves.extend(read_curves_csv(p)?);
    }
    let curves = curves
        .into_iter()
        .map(|c| {
            if c.metric == Metric::Top1 {
                Ok(c)
            } else {
                RdCurve::new(&c.dataset, &c.codec, c.filtered, c.metric, c.points)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    for p in emit_report(&curves, &f.out)? {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}
