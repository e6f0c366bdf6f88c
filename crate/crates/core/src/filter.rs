//! The trainable pre-filter and direct per-image optimization.
//!
//! The filter sees the input image together with the frozen surrogate's
//! per-latent entropy, upsampled to pixel resolution by a transposed-conv
//! stack, and predicts a correction through a small residual trunk.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::DiscriminatorState;
use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint::{self, FORMAT_VERSION};
use crate::distortion::{ms_ssim_var, mse_var, FilterMode, LossWeights, MsSsimConfig, MSE_SCALE};
use crate::image::Image;
use crate::nn::{Adam, Bound, Conv2d, ParamStore, Padding, ResBlock, TensorRecord, Upsample2};
use crate::surrogate::{QuantizationMode, Surrogate, SurrogateDistortion};
use crate::{Error, Result};

/// Channels of the pixel-resolution entropy map.
pub const PIXEL_ENTROPY_CHANNELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Fan-in scaled uniform init everywhere.
    Standard,
    /// Output conv weights scaled by 1e-3 and its bias zeroed.
    LowVariance,
}

impl std::str::FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(InitMode::Standard),
            "low_variance" => Ok(InitMode::LowVariance),
            other => Err(Error::Config(format!("unknown init mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// `clamp(I + trunk(...), 0, 1)`.
    Residual,
    /// `clamp(trunk(...), 0, 1)`.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Output channels of each stride-2 transposed conv; the last must be 16.
    pub upsample_channels: Vec<usize>,
    pub trunk_channels: usize,
    pub res_blocks: usize,
    pub init_mode: InitMode,
    /// Zero the output conv entirely, making a residual filter the identity.
    #[serde(default)]
    pub zero_output: bool,
    pub output: OutputMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            upsample_channels: vec![128, 64, 32, 16],
            trunk_channels: 64,
            res_blocks: 4,
            init_mode: InitMode::LowVariance,
            zero_output: false,
            output: OutputMode::Residual,
        }
    }
}

impl FilterConfig {
    pub fn desk_scale() -> Self {
        FilterConfig { upsample_channels: vec![32, 32, 16, 16], trunk_channels: 16, res_blocks: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.upsample_channels.len() != 4 {
            return Err(Error::Config("the entropy upsampler needs exactly 4 stages (16x)".into()));
        }
        if self.upsample_channels.last() != Some(&PIXEL_ENTROPY_CHANNELS) {
            return Err(Error::Config(format!("the last upsampling stage must have {PIXEL_ENTROPY_CHANNELS} channels")));
        }
        if self.upsample_channels.contains(&0) || self.trunk_channels == 0 {
            return Err(Error::Config("filter channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    up: Vec<Upsample2>,
    head: Conv2d,
    blocks: Vec<ResBlock>,
    out: Conv2d,
}

/// Filter parameters bound to one surrogate, identified by its content hash.
#[derive(Clone, Debug)]
pub struct Filter {
    config: FilterConfig,
    latent_channels: usize,
    store: ParamStore,
    layers: Layers,
    surrogate_hash: String,
    pub seed: u64,
    pub iterations: u64,
}

impl Filter {
    pub fn new(config: FilterConfig, surrogate: &Surrogate, seed: u64) -> Result<Self> {
        config.validate()?;
        let latent_channels = surrogate.latent_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut up = Vec::with_capacity(4);
        let mut cin = latent_channels;
        for (i, &cout) in config.upsample_channels.iter().enumerate() {
            up.push(Upsample2::new(&mut store, &format!("up{i}"), cin, cout, 4, &mut rng));
            cin = cout;
        }
        let r = Padding::Reflect;
        let t = config.trunk_channels;
        let head = Conv2d::new(&mut store, "head", 3 + PIXEL_ENTROPY_CHANNELS, t, 3, 1, r, &mut rng);
        let blocks = (0..config.res_blocks).map(|i| ResBlock::new(&mut store, &format!("block{i}"), t, r, &mut rng)).collect();
        let out = Conv2d::new(&mut store, "out", t, 3, 3, 1, r, &mut rng);
        if config.zero_output {
            store.get_mut(out.weight).data_mut().fill(0.0);
            store.get_mut(out.bias).data_mut().fill(0.0);
        } else if config.init_mode == InitMode::LowVariance {
            let w = store.get_mut(out.weight);
            *w = w.scale(1e-3);
            store.get_mut(out.bias).data_mut().fill(0.0);
        }
        Ok(Filter {
            config,
            latent_channels,
            store,
            layers: Layers { up, head, blocks, out },
            surrogate_hash: surrogate.content_hash().to_string(),
            seed,
            iterations: 0,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn surrogate_hash(&self) -> &str {
        &self.surrogate_hash
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        self.store.bind(g, trainable)
    }

    /// Channel counts along the upsampler, starting at the latent width.
    pub fn upsample_schedule(&self) -> Vec<usize> {
        std::iter::once(self.latent_channels).chain(self.config.upsample_channels.iter().copied()).collect()
    }

    pub fn check_surrogate(&self, surrogate: &Surrogate) -> Result<()> {
        if surrogate.content_hash() != self.surrogate_hash {
            return Err(Error::Checkpoint(format!(
                "filter was trained against surrogate {}, got {}",
                short(&self.surrogate_hash),
                short(surrogate.content_hash())
            )));
        }
        Ok(())
    }

    /// `[N, C, h, w]` latent entropy to the `[N, 16, 16h, 16w]` pixel map.
    pub fn entropy_to_pixel<'g>(&self, p: &Bound<'g>, entropy: Var<'g>) -> Result<Var<'g>> {
        let shape = entropy.shape();
        if shape.len() != 4 || shape[1] != self.latent_channels {
            return Err(Error::Shape(format!(
                "entropy map {shape:?} does not match a {}-channel surrogate",
                self.latent_channels
            )));
        }
        let mut h = entropy;
        for (i, up) in self.layers.up.iter().enumerate() {
            h = up.forward(p, h);
            if i + 1 < self.layers.up.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Filtered batch for an NCHW input batch `x`.
    pub fn forward<'g>(&self, p: &Bound<'g>, surrogate: &Surrogate, x: Var<'g>) -> Result<Var<'g>> {
        self.check_surrogate(surrogate)?;
        let (_, _, h, w) = x.value().dims4();
        let bits = surrogate.latent_bits(&x.value())?;
        let pixel = self.entropy_to_pixel(p, x.graph().constant(bits))?.crop(0, 0, h, w);
        let mut t = self.layers.head.forward(p, Var::concat_channels(&[x, pixel]));
        for b in &self.layers.blocks {
            t = b.forward(p, t);
        }
        let r = self.layers.out.forward(p, t.relu());
        Ok(match self.config.output {
            OutputMode::Residual => x.add(r).clamp(0.0, 1.0),
            OutputMode::Direct => r.clamp(0.0, 1.0),
        })
    }

    pub fn apply(&self, surrogate: &Surrogate, image: &Image) -> Result<Image> {
        image.validate()?;
        let g = Graph::new();
        let p = self.bind(&g, false);
        let y = self.forward(&p, surrogate, g.constant(image.to_tensor()))?;
        if !y.value().all_finite() {
            return Err(Error::NonFinite("filter output".into()));
        }
        Image::from_tensor(&y.value())
    }

    pub fn to_checkpoint(&self, mode: FilterMode, weights: LossWeights) -> FilterCheckpoint {
        FilterCheckpoint {
            format_version: FORMAT_VERSION,
            kind: "filter".into(),
            content_hash: checkpoint::content_hash(&self.config, &self.store),
            surrogate_hash: self.surrogate_hash.clone(),
            config: self.config.clone(),
            latent_channels: self.latent_channels,
            seed: self.seed,
            iterations: self.iterations,
            mode,
            weights,
            tensors: self.store.to_records(),
            discriminator: None,
            train_config: None,
        }
    }

    pub fn from_checkpoint(ck: &FilterCheckpoint, surrogate: &Surrogate) -> Result<Self> {
        checkpoint::check_header("filter checkpoint", &ck.kind, "filter", ck.format_version)?;
        let mut f = Filter::new(ck.config.clone(), surrogate, ck.seed)?;
        if ck.surrogate_hash != f.surrogate_hash {
            return Err(Error::Checkpoint(format!(
                "filter checkpoint references surrogate {}, got {}",
                short(&ck.surrogate_hash),
                short(&f.surrogate_hash)
            )));
        }
        f.store.load_records(&ck.tensors)?;
        if checkpoint::content_hash(&f.config, &f.store) != ck.content_hash {
            return Err(Error::Checkpoint("filter checkpoint content hash mismatch (corrupted file?)".into()));
        }
        f.iterations = ck.iterations;
        Ok(f)
    }

    pub fn load(path: &Path, surrogate: &Surrogate) -> Result<(Self, FilterCheckpoint)> {
        let ck = FilterCheckpoint::load(path)?;
        Ok((Self::from_checkpoint(&ck, surrogate)?, ck))
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilterCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub content_hash: String,
    /// Content hash of the surrogate the filter was trained against.
    pub surrogate_hash: String,
    pub config: FilterConfig,
    pub latent_channels: usize,
    pub seed: u64,
    pub iterations: u64,
    pub mode: FilterMode,
    pub weights: LossWeights,
    pub tensors: Vec<TensorRecord>,
    pub discriminator: Option<DiscriminatorState>,
    /// Snapshot of the training configuration that produced the weights.
    pub train_config: Option<serde_json::Value>,
}

impl FilterCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: FilterCheckpoint = checkpoint::read_json(path)?;
        checkpoint::check_header("filter checkpoint", &ck.kind, "filter", ck.format_version)?;
        Ok(ck)
    }

    /// The training configuration stored with the weights, if any.
    pub fn train_config(&self) -> Result<Option<crate::config::TrainConfig>> {
        self.train_config
            .clone()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| Error::Checkpoint(format!("unreadable training config in filter checkpoint: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaOptions {
    pub lambda_t: f64,
    pub distortion: SurrogateDistortion,
    pub steps: usize,
    pub lr: f64,
    /// Seed of the quantization noise, frozen across steps.
    pub seed: u64,
}

impl Default for DeltaOptions {
    fn default() -> Self {
        DeltaOptions { lambda_t: 100.0, distortion: SurrogateDistortion::MsSsim, steps: 100, lr: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct DeltaResult {
    /// `clamp(I + zeta*, 0, 1)` for the best iterate.
    pub image: Image,
    /// Objective before each update and after the last (`steps + 1` values
    /// unless optimization diverged).
    pub losses: Vec<f64>,
    pub bpp: Vec<f64>,
    pub best_step: usize,
}

struct DeltaEval {
    loss: f64,
    bpp: f64,
    grad: Tensor,
}

fn delta_objective(surrogate: &Surrogate, original: &Tensor, zeta: &Tensor, opts: &DeltaOptions) -> Result<DeltaEval> {
    let g = Graph::new();
    let p = surrogate.bind(&g, false);
    let z = g.leaf(zeta.clone());
    let target = g.constant(original.clone());
    let x = target.add(z).clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pass = surrogate.forward(&p, x, QuantizationMode::Noise, &mut rng, true)?;
    let recon = pass.reconstruction.expect("decode requested");
    let bpp = pass.mean_bpp();
    let d = match opts.distortion {
        SurrogateDistortion::Mse => mse_var(recon, target).mul_scalar(MSE_SCALE),
        SurrogateDistortion::MsSsim => ms_ssim_var(recon, target, &MsSsimConfig::default())?.mean().neg().add_scalar(1.0),
    };
    let loss = bpp.add(d.mul_scalar(opts.lambda_t));
    let grads = g.backward(loss);
    Ok(DeltaEval { loss: loss.item(), bpp: bpp.item(), grad: grads.get_or_zeros(z) })
}

/// Gradient descent (Adam) on an additive perturbation `zeta` of one image,
/// minimizing `g_R(I + zeta) + lambda_t * D_T(g_D(I + zeta), I)`. The best
/// iterate seen is returned, so the result never scores worse than `I`.
pub fn optimize_delta(image: &Image, surrogate: &Surrogate, opts: &DeltaOptions) -> Result<DeltaResult> {
    image.validate()?;
    if opts.steps == 0 {
        return Err(Error::InvalidInput("optimize_delta needs at least one step".into()));
    }
    if !(opts.lambda_t > 0.0) {
        return Err(Error::InvalidInput(format!("lambda_t must be positive, got {}", opts.lambda_t)));
    }
    let original = image.to_tensor();
    let mut zeta = ParamStore::new();
    let id = zeta.add("zeta", Tensor::zeros(original.shape().to_vec()));
    let mut adam = Adam::new(&zeta);
    let (mut losses, mut bpp) = (Vec::new(), Vec::new());
    let mut best = (f64::INFINITY, 0, zeta.get(id).clone());
    for step in 0..=opts.steps {
        let eval = delta_objective(surrogate, &original, zeta.get(id), opts)?;
        if !eval.loss.is_finite() || !eval.grad.all_finite() {
            log::warn!("optimize_delta diverged at step {step}; returning best iterate {}", best.1);
            break;
        }
        losses.push(eval.loss);
        bpp.push(eval.bpp);
        if eval.loss < best.0 {
            best = (eval.loss, step, zeta.get(id).clone());
        }
        if step < opts.steps {
            adam.step(&mut zeta, &[eval.grad], opts.lr);
        }
    }
    let out = original.zip_map(&best.2, |a, b| (a + b).clamp(0.0, 1.0));
    Ok(DeltaResult { image: Image::from_tensor(&out)?, losses, bpp, best_step: best.1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::SurrogateConfig;
    use crate::synth;

    fn surrogate() -> Surrogate {
        Surrogate::new(
            SurrogateConfig { latent_channels: 8, hidden_channels: 8, lambda: 0.2, distortion: SurrogateDistortion::Mse },
            5,
        )
        .unwrap()
    }

    fn small_config() -> FilterConfig {
        FilterConfig { upsample_channels: vec![8, 8, 16, 16], trunk_channels: 8, res_blocks: 2, ..FilterConfig::default() }
    }

    #[test]
    fn default_schedule_halves_to_sixteen() {
        let s = surrogate();
        let f = Filter::new(FilterConfig::default(), &s, 0).unwrap();
        assert_eq!(f.upsample_schedule(), vec![8, 128, 64, 32, 16]);
        assert!(FilterConfig { upsample_channels: vec![8, 8, 8, 8], ..FilterConfig::default() }.validate().is_err());
    }

    #[test]
    fn pixel_map_is_sixteen_times_the_latent() {
        let s = surrogate();
        let f = Filter::new(small_config(), &s, 0).unwrap();
        let g = Graph::new();
        let p = f.bind(&g, false);
        let e = f.entropy_to_pixel(&p, g.constant(Tensor::zeros([1, 8, 3, 2]))).unwrap();
        assert_eq!(e.shape(), vec![1, 16, 48, 32]);
        assert!(f.entropy_to_pixel(&p, g.constant(Tensor::zeros([1, 7, 3, 2]))).is_err());
    }

    #[test]
    fn zero_output_filter_is_identity() {
        let s = surrogate();
        let f = Filter::new(FilterConfig { zero_output: true, ..small_config() }, &s, 1).unwrap();
        let img = synth::corpus(1, 40, 56, 2).remove(0);
        assert_eq!(f.apply(&s, &img).unwrap(), img);
    }

    #[test]
    fn low_variance_correction_is_tiny() {
        let s = surrogate();
        let f = Filter::new(FilterConfig { init_mode: InitMode::LowVariance, ..small_config() }, &s, 1).unwrap();
        let img = synth::corpus(1, 48, 48, 4).remove(0);
        let out = f.apply(&s, &img).unwrap();
        assert!(out.max_abs_diff(&img) < 0.01);
    }

    #[test]
    fn mismatched_surrogate_is_refused() {
        let s = surrogate();
        let other = Surrogate::new(s.config().clone(), 6).unwrap();
        let f = Filter::new(small_config(), &s, 0).unwrap();
        let img = Image::filled(32, 32, [0.5; 3]);
        assert!(matches!(f.apply(&other, &img), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = surrogate();
        let f = Filter::new(small_config(), &s, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        f.to_checkpoint(FilterMode::MsssimRetarget, LossWeights::retarget(0.2)).save(&path).unwrap();
        let (back, ck) = Filter::load(&path, &s).unwrap();
        assert_eq!(back.params(), f.params());
        assert_eq!(ck.weights.lambda_t, 100.0);
        let other = Surrogate::new(s.config().clone(), 6).unwrap();
        assert!(Filter::load(&path, &other).is_err());
    }

    #[test]
    fn zero_learning_rate_returns_input() {
        let s = surrogate();
        let img = synth::corpus(1, 32, 32, 8).remove(0);
        let r = optimize_delta(&img, &s, &DeltaOptions { lr: 0.0, steps: 2, ..DeltaOptions::default() }).unwrap();
        assert_eq!(r.image, img);
        assert_eq!(r.losses.len(), 3);
    }
}
