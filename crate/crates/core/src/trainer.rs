//! Data pipeline and training loops.
//!
//! Every loop is single-threaded and driven by seeded ChaCha streams, so a
//! given `(config, seed, corpus)` reproduces its loss trace bit for bit.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{gan_loss_discriminator, gan_loss_filter, Discriminator};
use crate::autograd::{Graph, Tensor, Var};
use crate::classifier::{Classifier, ClassifierConfig, TaskClassifier};
use crate::codec::{straight_through_decode, Codec};
use crate::config::{DataConfig, TrainConfig};
use crate::distortion::{
    filter_loss, ms_ssim_var, mse_var, perceptual_loss_var, FeatureExtractor, FilterMode, LossTerms, LossWeights,
    MsSsimConfig, MSE_SCALE,
};
use crate::filter::{Filter, FilterCheckpoint};
use crate::image::Image;
use crate::nn::{grad_norm, Adam, LrSchedule};
use crate::surrogate::{QuantizationMode, Surrogate, SurrogateDistortion};
use crate::synth;
use crate::{Error, Result};

/// Random resize (shorter side uniform in `resize`, upscaling capped at
/// `max_upscale`) followed by a uniform random `crop x crop` window.
/// Returns `None` when the source is smaller than the crop.
pub fn sample_training_crop(
    image: &Image,
    crop: usize,
    resize: Option<[usize; 2]>,
    max_upscale: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Image> {
    let (h, w) = (image.height(), image.width());
    if h.min(w) < crop {
        return None;
    }
    let resized;
    let src = match resize {
        Some([lo, hi]) => {
            let target = rng.random_range(lo..=hi) as f64;
            let scale = (target / h.min(w) as f64).min(max_upscale);
            let (nh, nw) = (((h as f64 * scale).round() as usize).max(crop), ((w as f64 * scale).round() as usize).max(crop));
            resized = if (nh, nw) == (h, w) { image.clone() } else { image.resize(nh, nw) };
            &resized
        }
        None => image,
    };
    let top = rng.random_range(0..=src.height() - crop);
    let left = rng.random_range(0..=src.width() - crop);
    src.crop(top, left, crop, crop).ok()
}

/// Training images: every PNG/JPEG in the configured directory (sorted by
/// name), or a synthetic dead-leaves corpus.
pub fn load_corpus(data: &DataConfig, seed: u64) -> Result<Vec<Image>> {
    let Some(dir) = &data.corpus else {
        return Ok(synth::corpus(data.synthetic_count, data.synthetic_size, data.synthetic_size, seed));
    };
    let images = load_image_dir(dir)?;
    if images.is_empty() {
        return Err(Error::InvalidInput(format!("no images in {}", dir.display())));
    }
    Ok(images.into_iter().map(|(_, im)| im).collect())
}

pub fn image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_image_dir(dir: &Path) -> Result<Vec<(PathBuf, Image)>> {
    image_paths(dir)?.into_iter().map(|p| Image::load(&p).map(|im| (p, im))).collect()
}

/// Labeled images from one subdirectory per class, resized to `size`.
/// Returns the class names in label order.
pub fn load_labeled_dir(dir: &Path, size: usize) -> Result<(Vec<String>, Vec<(Image, usize)>)> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut classes: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    classes.sort();
    if classes.len() < 2 {
        return Err(Error::InvalidInput(format!("{} needs at least two class subdirectories", dir.display())));
    }
    let mut data = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        for (_, im) in load_image_dir(class)? {
            data.push((im.resize(size, size), label));
        }
    }
    let names = classes.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();
    Ok((names, data))
}

/// Labeled task data: the configured directory, or `count` synthetic
/// gratings drawn with `seed`.
pub fn task_dataset(config: &TrainConfig, count: usize, seed: u64) -> Result<Vec<(Image, usize)>> {
    match &config.task.labeled_corpus {
        Some(dir) => Ok(load_labeled_dir(dir, config.task.image_size)?.1),
        None => Ok(synth::grating_dataset(count, config.task.image_size, seed)),
    }
}

/// The configured frozen classifier, or one trained on `data` (and saved
/// as `classifier.json` in the run directory).
pub fn prepare_classifier(config: &TrainConfig, data: &[(Image, usize)], run: Option<&RunDir>) -> Result<Classifier> {
    if let Some(path) = &config.task.classifier {
        return Classifier::load(path);
    }
    let classes = data.iter().map(|d| d.1).max().map_or(0, |m| m + 1);
    let mut c = Classifier::new(ClassifierConfig { classes, ..ClassifierConfig::default() }, config.seed ^ 0xC1A5)?;
    let schedule = LrSchedule::constant(config.task.classifier_iterations, config.task.classifier_lr);
    let trace = c.train(data, &schedule, 16, config.seed ^ 0xC1A6)?;
    log::info!("classifier trained: final loss {:.4}", trace.last().copied().unwrap_or(f64::NAN));
    if let Some(run) = run {
        c.save(&run.root().join("classifier.json"))?;
    }
    Ok(c)
}

/// Feature stack for the GAN perceptual term.
pub fn perceptual_extractor(config: &TrainConfig) -> Result<Classifier> {
    match &config.filter.perceptual {
        Some(path) => Classifier::load(path),
        None => {
            log::warn!("no perceptual network configured; using fixed random convolutional features");
            Classifier::new(ClassifierConfig::default(), config.seed ^ 0x7E47)
        }
    }
}

/// Seed-ordered stream of training batches.
pub struct CropSampler<'a> {
    corpus: &'a [Image],
    data: DataConfig,
    rng: ChaCha8Rng,
}

impl<'a> CropSampler<'a> {
    pub fn new(corpus: &'a [Image], data: &DataConfig, seed: u64) -> Result<Self> {
        let usable = corpus.iter().filter(|im| im.height().min(im.width()) >= data.crop).count();
        if usable == 0 {
            return Err(Error::InvalidInput(format!("no corpus image has a side of at least {} px", data.crop)));
        }
        if usable < corpus.len() {
            log::warn!("{} of {} corpus images are smaller than {} px and will be skipped", corpus.len() - usable, corpus.len(), data.crop);
        }
        Ok(CropSampler { corpus, data: data.clone(), rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<Image> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            let i = self.rng.random_range(0..self.corpus.len());
            let d = &self.data;
            match sample_training_crop(&self.corpus[i], d.crop, d.resize_short_side, d.max_upscale, &mut self.rng) {
                Some(c) => out.push(c),
                None => log::debug!("skipping corpus image {i}: smaller than {} px", d.crop),
            }
        }
        out
    }
}

/// One row of a loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    /// Which parameter set this step updated.
    pub role: String,
    pub lr: f64,
    pub loss: f64,
    pub rate_bpp: f64,
    /// Mode-specific distortion: MSE, MS-SSIM, discriminator real score or cross-entropy.
    pub distortion: f64,
    pub grad_norm: f64,
}

/// GAN alternation log: which parameter set a step updated and on which batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: u64,
    pub updated: String,
    pub batch: u64,
}

/// Output directory of one training run.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory and writes `config.toml`.
    pub fn create(root: &Path, config: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        let cfg = root.join("config.toml");
        std::fs::write(&cfg, config.to_toml()).map_err(|e| Error::io(&cfg, e))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:07}.json"))
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        write_csv(&self.root.join(name), rows)
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.into() })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.into() })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.into() })?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e.into() })
}

/// Scales `grads` down to `max_norm` when their global norm exceeds it.
pub fn clip_gradients(grads: &mut [Tensor], norm: f64, max_norm: Option<f64>) {
    if let Some(m) = max_norm {
        if norm > m {
            let s = m / norm;
            for g in grads {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

fn log_progress(trace: &[LossRecord]) {
    if let Some(r) = trace.last().filter(|r| (r.iteration + 1) % 100 == 0) {
        log::info!("{} step {}: loss {:.5} rate {:.4} bpp, distortion {:.5}", r.role, r.iteration + 1, r.loss, r.rate_bpp, r.distortion);
    }
}

fn check_step(iteration: u64, loss: f64, gnorm: f64, what: &str) -> Result<()> {
    if !loss.is_finite() || !gnorm.is_finite() {
        return Err(Error::Diverged { iteration, message: format!("{what} loss {loss}, gradient norm {gnorm}") });
    }
    Ok(())
}

/// Surrogate distortion `D_S` on the MSE-equivalent scale its lambda expects.
fn surrogate_distortion<'g>(
    kind: SurrogateDistortion,
    recon: crate::autograd::Var<'g>,
    x: crate::autograd::Var<'g>,
) -> Result<(crate::autograd::Var<'g>, f64)> {
    Ok(match kind {
        SurrogateDistortion::Mse => {
            let m = mse_var(recon, x);
            (m.mul_scalar(MSE_SCALE), m.item())
        }
        SurrogateDistortion::MsSsim => {
            let s = ms_ssim_var(recon, x, &MsSsimConfig::default())?.mean();
            (s.neg().add_scalar(1.0).mul_scalar(LossWeights::RETARGET_RATIO), s.item())
        }
    })
}

pub struct TrainOutcome<M> {
    pub model: M,
    pub trace: Vec<LossRecord>,
    pub updates: Vec<UpdateRecord>,
}

/// Minimizes `bpp + lambda_S * D_S` on the noise-quantization path.
///
/// On a non-finite loss or gradient, training stops. The parameters from
/// before the failing step are written as `last_valid.json` in the run
/// directory and a `Diverged` error is returned.
pub fn train_surrogate(config: &TrainConfig, corpus: &[Image], run: Option<&RunDir>) -> Result<TrainOutcome<Surrogate>> {
    config.validate()?;
    let mut model = Surrogate::new(config.surrogate.clone(), config.seed)?;
    let sched = &config.surrogate_schedule;
    let lr = sched.lr_schedule();
    let mut sampler = CropSampler::new(corpus, &config.data, config.seed ^ 0xDA7A)?;
    let mut noise = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0015E);
    let mut adam = Adam::new(model.params());
    let mut trace = Vec::new();
    let lambda = config.surrogate.lambda;
    for it in 0..lr.total_iterations() {
        let batch = Image::batch(&sampler.next_batch(sched.batch_size))?;
        let g = Graph::new();
        let p = model.bind(&g, true);
        let x = g.constant(batch);
        let pass = model.forward(&p, x, QuantizationMode::Noise, &mut noise, true)?;
        let bpp = pass.mean_bpp();
        let (d, d_value) = surrogate_distortion(config.surrogate.distortion, pass.reconstruction.expect("decoded"), x)?;
        let loss = bpp.add(d.mul_scalar(lambda));
        let mut grads = p.grads(&g.backward(loss));
        let gnorm = grad_norm(&grads);
        if let Err(e) = check_step(it, loss.item(), gnorm, "surrogate") {
            if let Some(run) = run {
                model.save(&run.root().join("last_valid.json"))?;
                run.write_csv("loss.csv", &trace)?;
            }
            return Err(e);
        }
        let rate = lr.lr_at(it);
        clip_gradients(&mut grads, gnorm, sched.clip_norm);
        adam.step(model.params_mut(), &grads, rate);
        model.iterations = it + 1;
        trace.push(LossRecord {
            iteration: it,
            role: "surrogate".into(),
            lr: rate,
            loss: loss.item(),
            rate_bpp: bpp.item(),
            distortion: d_value,
            grad_norm: gnorm,
        });
        log_progress(&trace);
        if let Some(run) = run {
            if (it + 1) % config.checkpoint_every == 0 {
                model.save(&run.checkpoint_path(it + 1))?;
                run.write_csv("loss.csv", &trace)?;
            }
        }
    }
    if let Some(run) = run {
        model.save(&run.root().join("surrogate.json"))?;
        run.write_csv("loss.csv", &trace)?;
    }
    Ok(TrainOutcome { model, trace, updates: Vec::new() })
}

fn save_filter(run: &RunDir, path: &Path, filter: &Filter, config: &TrainConfig, disc: Option<&Discriminator>) -> Result<()> {
    let mut ck: FilterCheckpoint = filter.to_checkpoint(config.filter.mode, config.loss_weights());
    ck.discriminator = disc.map(Discriminator::to_state);
    ck.train_config = Some(serde_json::to_value(config).map_err(|e| Error::Checkpoint(e.to_string()))?);
    let _ = run;
    ck.save(path)
}

fn new_filter(config: &TrainConfig, surrogate: &Surrogate) -> Result<Filter> {
    Filter::new(config.filter_network(), surrogate, config.seed ^ 0xF117)
}

fn diverged_filter(run: Option<&RunDir>, filter: &Filter, config: &TrainConfig, trace: &[LossRecord], e: Error) -> Error {
    if let Some(run) = run {
        let saved = save_filter(run, &run.root().join("last_valid.json"), filter, config, None)
            .and_then(|_| run.write_csv("loss.csv", trace));
        if let Err(io) = saved {
            log::error!("could not save last valid filter: {io}");
        }
    }
    e
}

/// MS-SSIM retargeting: minimizes `g_R(f(I)) + lambda_T * (1 - MS-SSIM(g_D(f(I)), I))`
/// with the surrogate frozen.
pub fn train_filter(config: &TrainConfig, surrogate: &Surrogate, corpus: &[Image], run: Option<&RunDir>) -> Result<TrainOutcome<Filter>> {
    config.validate()?;
    if config.filter.mode != FilterMode::MsssimRetarget {
        return Err(Error::Config(format!("train_filter runs msssim_retarget, config says {:?}", config.filter.mode)));
    }
    let weights = config.loss_weights();
    let mut filter = new_filter(config, surrogate)?;
    let sched = &config.filter_schedule;
    let lr = sched.lr_schedule();
    let mut sampler = CropSampler::new(corpus, &config.data, config.seed ^ 0xDA7A)?;
    let mut noise = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0015E);
    let mut adam = Adam::new(filter.params());
    let mut jitter = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5A1F);
    let ms_cfg = MsSsimConfig::default();
    let mut trace = Vec::new();
    for it in 0..lr.total_iterations() {
        let batch = Image::batch(&sampler.next_batch(sched.batch_size))?;
        let g = Graph::new();
        let fp = filter.bind(&g, true);
        let sp = surrogate.bind(&g, false);
        let x = g.constant(batch);
        let filtered = filter.forward(&fp, surrogate, x)?;
        let (filtered, x) = shifted_window(filtered, x, config.filter.shift_jitter, &mut jitter)?;
        let pass = surrogate.forward(&sp, filtered, QuantizationMode::Noise, &mut noise, true)?;
        let rate = pass.mean_bpp();
        let ms = ms_ssim_var(pass.reconstruction.expect("decoded"), x, &ms_cfg)?.mean();
        let terms = LossTerms { rate_bpp: Some(rate), ms_ssim: Some(ms), ..LossTerms::default() };
        let loss = filter_loss(&terms, &weights, FilterMode::MsssimRetarget)?;
        let mut grads = fp.grads(&g.backward(loss));
        let gnorm = grad_norm(&grads);
        if let Err(e) = check_step(it, loss.item(), gnorm, "filter") {
            return Err(diverged_filter(run, &filter, config, &trace, e));
        }
        let step_lr = lr.lr_at(it);
        clip_gradients(&mut grads, gnorm, sched.clip_norm);
        adam.step(filter.params_mut(), &grads, step_lr);
        filter.iterations = it + 1;
        trace.push(LossRecord {
            iteration: it,
            role: "filter".into(),
            lr: step_lr,
            loss: loss.item(),
            rate_bpp: rate.item(),
            distortion: ms.item(),
            grad_norm: gnorm,
        });
        log_progress(&trace);
        if let Some(run) = run {
            if (it + 1) % config.checkpoint_every == 0 {
                save_filter(run, &run.checkpoint_path(it + 1), &filter, config, None)?;
                run.write_csv("loss.csv", &trace)?;
            }
        }
    }
    if let Some(run) = run {
        save_filter(run, &run.root().join("filter.json"), &filter, config, None)?;
        run.write_csv("loss.csv", &trace)?;
    }
    Ok(TrainOutcome { model: filter, trace, updates: Vec::new() })
}

/// The same random window of both batches, `jitter` px smaller on each side.
fn shifted_window<'g>(a: Var<'g>, b: Var<'g>, jitter: usize, rng: &mut ChaCha8Rng) -> Result<(Var<'g>, Var<'g>)> {
    if jitter == 0 {
        return Ok((a, b));
    }
    let (_, _, h, w) = a.value().dims4();
    if h < jitter + 16 || w < jitter + 16 {
        return Err(Error::Config(format!("training crop {h}x{w} is too small for a shift jitter of {jitter}")));
    }
    let (dy, dx) = (rng.random_range(0..=jitter), rng.random_range(0..=jitter));
    let (h, w) = (h - jitter, w - jitter);
    Ok((a.crop(dy, dx, h, w), b.crop(dy, dx, h, w)))
}

#[derive(Clone, Debug, Default)]
pub struct GanOptions {
    /// Skip filter updates (discriminator-only smoke runs).
    pub freeze_filter: bool,
}

/// Adversarial filter training. Even steps update the filter, odd steps the
/// discriminator, each on its own freshly drawn batch. The discriminator
/// compares originals (real) against filtered images (fake); the target
/// codec is never invoked.
pub fn train_filter_gan(
    config: &TrainConfig,
    surrogate: &Surrogate,
    corpus: &[Image],
    extractor: Option<&dyn FeatureExtractor>,
    options: &GanOptions,
    run: Option<&RunDir>,
) -> Result<TrainOutcome<(Filter, Discriminator)>> {
    config.validate()?;
    let extractor = extractor.ok_or_else(|| Error::Config("GAN mode needs a perceptual feature extractor".into()))?;
    let weights = config.loss_weights();
    let mut filter = new_filter(config, surrogate)?;
    let mut disc = Discriminator::new(config.adversary.clone(), config.seed ^ 0xD15C)?;
    let sched = &config.filter_schedule;
    let lr = sched.lr_schedule();
    let mut sampler = CropSampler::new(corpus, &config.data, config.seed ^ 0xDA7A)?;
    let mut noise = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0015E);
    let mut filter_adam = Adam::new(filter.params());
    let mut disc_adam = Adam::new(disc.params());
    let (mut trace, mut updates) = (Vec::new(), Vec::new());
    for step in 0..lr.total_iterations() {
        let batch = Image::batch(&sampler.next_batch(sched.batch_size))?;
        let step_lr = lr.lr_at(step);
        let g = Graph::new();
        let x = g.constant(batch);
        if step % 2 == 0 {
            let fp = filter.bind(&g, true);
            let sp = surrogate.bind(&g, false);
            let dp = disc.bind(&g, false);
            let filtered = filter.forward(&fp, surrogate, x)?;
            let rate = surrogate.forward(&sp, filtered, QuantizationMode::Noise, &mut noise, false)?.mean_bpp();
            let fake = disc.discriminate(&dp, filtered);
            let terms = LossTerms {
                rate_bpp: Some(rate),
                gan: Some(gan_loss_filter(fake)),
                perceptual: Some(perceptual_loss_var(filtered, x, extractor)),
                mse: Some(mse_var(filtered, x)),
                ..LossTerms::default()
            };
            let loss = filter_loss(&terms, &weights, FilterMode::Gan)?;
            let mut grads = fp.grads(&g.backward(loss));
            let gnorm = grad_norm(&grads);
            if let Err(e) = check_step(step, loss.item(), gnorm, "filter") {
                return Err(diverged_filter(run, &filter, config, &trace, e));
            }
            if !options.freeze_filter {
                clip_gradients(&mut grads, gnorm, sched.clip_norm);
                filter_adam.step(filter.params_mut(), &grads, step_lr);
                filter.iterations += 1;
                updates.push(UpdateRecord { step, updated: "filter".into(), batch: step });
            }
            trace.push(LossRecord {
                iteration: step,
                role: "filter".into(),
                lr: step_lr,
                loss: loss.item(),
                rate_bpp: rate.item(),
                distortion: terms.perceptual.expect("set").item(),
                grad_norm: gnorm,
            });
        } else {
            let fp = filter.bind(&g, false);
            let dp = disc.bind(&g, true);
            let filtered = filter.forward(&fp, surrogate, x)?;
            let real = disc.discriminate(&dp, x);
            let fake = disc.discriminate(&dp, filtered);
            let loss = gan_loss_discriminator(real, fake);
            let mut grads = dp.grads(&g.backward(loss));
            let gnorm = grad_norm(&grads);
            if let Err(e) = check_step(step, loss.item(), gnorm, "discriminator") {
                return Err(diverged_filter(run, &filter, config, &trace, e));
            }
            clip_gradients(&mut grads, gnorm, sched.clip_norm);
            disc_adam.step(disc.params_mut(), &grads, step_lr);
            updates.push(UpdateRecord { step, updated: "discriminator".into(), batch: step });
            trace.push(LossRecord {
                iteration: step,
                role: "discriminator".into(),
                lr: step_lr,
                loss: loss.item(),
                rate_bpp: f64::NAN,
                distortion: real.mean().item(),
                grad_norm: gnorm,
            });
        }
        log_progress(&trace);
        if let Some(run) = run {
            if (step + 1) % config.checkpoint_every == 0 {
                save_filter(run, &run.checkpoint_path(step + 1), &filter, config, Some(&disc))?;
                run.write_csv("loss.csv", &trace)?;
                run.write_csv("updates.csv", &updates)?;
            }
        }
    }
    if let Some(run) = run {
        save_filter(run, &run.root().join("filter.json"), &filter, config, Some(&disc))?;
        run.write_csv("loss.csv", &trace)?;
        run.write_csv("updates.csv", &updates)?;
    }
    Ok(TrainOutcome { model: (filter, disc), trace, updates })
}

/// Task-aware training: the filtered batch goes through the real codec
/// (straight-through) before the frozen classifier. Codec failures are
/// retried up to `task.codec_attempts` times, then training halts.
pub fn train_filter_task(
    config: &TrainConfig,
    surrogate: &Surrogate,
    classifier: &dyn TaskClassifier,
    codec: &dyn Codec,
    data: &[(Image, usize)],
    run: Option<&RunDir>,
) -> Result<TrainOutcome<Filter>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("task training needs labeled images".into()));
    }
    let mut task_config = config.clone();
    task_config.filter.mode = FilterMode::Task;
    let config = &task_config;
    let weights = config.loss_weights();
    let mut filter = new_filter(config, surrogate)?;
    let sched = &config.filter_schedule;
    let lr = sched.lr_schedule();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xDA7A);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut noise = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0015E);
    let mut adam = Adam::new(filter.params());
    let mut trace = Vec::new();
    for it in 0..lr.total_iterations() {
        let mut idx = Vec::with_capacity(sched.batch_size);
        while idx.len() < sched.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let images: Vec<Image> = idx.iter().map(|&i| data[i].0.clone()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data[i].1).collect();
        let g = Graph::new();
        let fp = filter.bind(&g, true);
        let sp = surrogate.bind(&g, false);
        let x = g.constant(Image::batch(&images)?);
        let filtered = filter.forward(&fp, surrogate, x)?;
        let mut attempt = 0;
        let (decoded, _) = loop {
            attempt += 1;
            match straight_through_decode(filtered, codec, config.task.quality) {
                Ok(r) => break r,
                Err(e) if attempt < config.task.codec_attempts.max(1) => {
                    log::warn!("codec call failed at iteration {it} (attempt {attempt}): {e}; retrying");
                }
                Err(e) => return Err(diverged_filter(run, &filter, config, &trace, e)),
            }
        };
        let ce = classifier.logits(&g, decoded).cross_entropy(&labels);
        let rate = surrogate.forward(&sp, filtered, QuantizationMode::Noise, &mut noise, false)?.mean_bpp();
        let terms = LossTerms { rate_bpp: Some(rate), cross_entropy: Some(ce), mse: Some(mse_var(filtered, x)), ..LossTerms::default() };
        let loss = filter_loss(&terms, &weights, FilterMode::Task)?;
        let mut grads = fp.grads(&g.backward(loss));
        let gnorm = grad_norm(&grads);
        if let Err(e) = check_step(it, loss.item(), gnorm, "filter") {
            return Err(diverged_filter(run, &filter, config, &trace, e));
        }
        let step_lr = lr.lr_at(it);
        clip_gradients(&mut grads, gnorm, sched.clip_norm);
        adam.step(filter.params_mut(), &grads, step_lr);
        filter.iterations = it + 1;
        trace.push(LossRecord {
            iteration: it,
            role: "filter".into(),
            lr: step_lr,
            loss: loss.item(),
            rate_bpp: rate.item(),
            distortion: ce.item(),
            grad_norm: gnorm,
        });
        log_progress(&trace);
        if let Some(run) = run {
            if (it + 1) % config.checkpoint_every == 0 {
                save_filter(run, &run.checkpoint_path(it + 1), &filter, config, None)?;
                run.write_csv("loss.csv", &trace)?;
            }
        }
    }
    if let Some(run) = run {
        save_filter(run, &run.root().join("filter.json"), &filter, config, None)?;
        run.write_csv("loss.csv", &trace)?;
    }
    Ok(TrainOutcome { model: filter, trace, updates: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    fn tiny_config(iterations: u64) -> TrainConfig {
        let mut c = TrainConfig::preset(Preset::DeskScale);
        c.data.synthetic_count = 4;
        c.data.synthetic_size = 48;
        c.data.crop = 32;
        c.surrogate.latent_channels = 4;
        c.surrogate.hidden_channels = 4;
        c.surrogate_schedule.batch_size = 2;
        c.surrogate_schedule.stages = vec![(iterations, 1e-3)];
        c.filter.network.upsample_channels = vec![8, 8, 16, 16];
        c.filter.network.trunk_channels = 4;
        c.filter.network.res_blocks = 1;
        c.filter_schedule.batch_size = 2;
        c.filter_schedule.stages = vec![(iterations, 1e-3)];
        c.adversary.width = 4;
        c.adversary.blocks_per_stage = 1;
        c.checkpoint_every = 2;
        c
    }

    #[test]
    fn shifted_windows_stay_aligned() {
        let g = Graph::new();
        let t = Tensor::from_fn([1, 1, 40, 40], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (a, b) = shifted_window(g.constant(t.clone()), g.constant(t.clone()), 8, &mut rng).unwrap();
            assert_eq!(a.value(), b.value());
            assert_eq!(a.value().dims4(), (1, 1, 32, 32));
        }
        assert!(shifted_window(g.constant(t.clone()), g.constant(t), 30, &mut rng).is_err());
    }

    #[test]
    fn crop_sampling_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let big = Image::filled(300, 450, [0.2; 3]);
        let c = sample_training_crop(&big, 256, Some([512, 1024]), 2.0, &mut rng).unwrap();
        assert_eq!((c.height(), c.width()), (256, 256));
        assert!(sample_training_crop(&Image::filled(200, 200, [0.2; 3]), 256, Some([512, 1024]), 2.0, &mut rng).is_none());
        let img = synth::corpus(1, 64, 80, 3).remove(0);
        let a: Vec<Image> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..3).map(|_| sample_training_crop(&img, 32, None, 2.0, &mut r).unwrap()).collect()
        };
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let b: Vec<Image> = (0..3).map(|_| sample_training_crop(&img, 32, None, 2.0, &mut r).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn surrogate_run_writes_layout_and_is_reproducible() {
        let cfg = tiny_config(4);
        let corpus = load_corpus(&cfg.data, cfg.seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path(), &cfg).unwrap();
        let a = train_surrogate(&cfg, &corpus, Some(&run)).unwrap();
        let b = train_surrogate(&cfg, &corpus, None).unwrap();
        assert_eq!(a.trace, b.trace);
        for f in ["config.toml", "loss.csv", "surrogate.json", "checkpoints/step_0000002.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(read_loss_trace(&dir.path().join("loss.csv")).unwrap(), a.trace);
        let s = Surrogate::load(&dir.path().join("surrogate.json")).unwrap();
        assert_eq!(s.iterations, 4);
    }

    #[test]
    fn filter_training_leaves_surrogate_untouched() {
        let cfg = tiny_config(2);
        let corpus = load_corpus(&cfg.data, 0).unwrap();
        let s = train_surrogate(&cfg, &corpus, None).unwrap().model;
        let before = s.params().clone();
        let out = train_filter(&cfg, &s, &corpus, None).unwrap();
        assert_eq!(s.params(), &before);
        assert_eq!(out.trace.len(), 2);
        assert!(out.trace.iter().all(|r| r.grad_norm > 0.0));
    }

    #[test]
    fn gan_alternates_strictly() {
        let cfg = tiny_config(6);
        let corpus = load_corpus(&cfg.data, 0).unwrap();
        let s = Surrogate::new(cfg.surrogate.clone(), 0).unwrap();
        let ext = crate::classifier::Classifier::new(Default::default(), 0).unwrap();
        let out = train_filter_gan(&cfg, &s, &corpus, Some(&ext), &GanOptions::default(), None).unwrap();
        assert_eq!(out.updates.len(), 6);
        for u in &out.updates {
            assert_eq!(u.updated == "filter", u.step % 2 == 0);
        }
        assert!(train_filter_gan(&cfg, &s, &corpus, None, &GanOptions::default(), None).is_err());
    }
}
