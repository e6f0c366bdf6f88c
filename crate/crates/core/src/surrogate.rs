//! Differentiable surrogate codec: a four-stage GDN autoencoder with a
//! mean-scale Gaussian hyperprior (no autoregressive context model).
//!
//! The surrogate never produces a bitstream. It supplies a differentiable
//! rate estimate and reconstruction standing in for a conventional codec.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::image::Image;
use crate::nn::{Bound, Conv2d, Gdn, ParamId, ParamStore, Padding, Upsample2};
use crate::{Error, Result};

/// Total spatial downsampling of the analysis transform.
pub const DOWNSAMPLING: usize = 16;

/// Probability floor of the entropy model.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Lower bound on predicted scales.
pub const SCALE_BOUND: f64 = 0.11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateDistortion {
    Mse,
    MsSsim,
}

impl std::str::FromStr for SurrogateDistortion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mse" => Ok(Self::Mse),
            "ms_ssim" | "msssim" => Ok(Self::MsSsim),
            other => Err(Error::Config(format!("unknown surrogate distortion `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizationMode {
    /// Additive `U[-0.5, 0.5)` noise (training relaxation).
    Noise,
    Round,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    /// Latent channels `C`.
    pub latent_channels: usize,
    /// Width of the hidden transform layers.
    pub hidden_channels: usize,
    /// Rate-distortion trade-off the surrogate is trained for.
    pub lambda: f64,
    pub distortion: SurrogateDistortion,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig { latent_channels: 128, hidden_channels: 128, lambda: 0.2, distortion: SurrogateDistortion::Mse }
    }
}

impl SurrogateConfig {
    pub fn paper_scale(lambda: f64) -> Self {
        SurrogateConfig { latent_channels: 320, hidden_channels: 192, lambda, distortion: SurrogateDistortion::Mse }
    }

    pub fn desk_scale(lambda: f64) -> Self {
        SurrogateConfig { latent_channels: 32, hidden_channels: 32, lambda, distortion: SurrogateDistortion::Mse }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::Config("surrogate channel counts must be positive".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("surrogate lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    enc: [Conv2d; 4],
    enc_gdn: [Gdn; 3],
    dec: [Upsample2; 4],
    dec_igdn: [Gdn; 3],
    hyper_enc: [Conv2d; 3],
    hyper_dec: [Upsample2; 2],
    hyper_mean: Conv2d,
    hyper_scale: Conv2d,
    z_mean: ParamId,
    z_scale: ParamId,
}

/// Trained (or freshly initialized) surrogate parameters. Immutable once
/// training ends; the config records `lambda` and the training distortion.
#[derive(Clone, Debug)]
pub struct Surrogate {
    config: SurrogateConfig,
    store: ParamStore,
    layers: Layers,
    pub seed: u64,
    pub iterations: u64,
    hash: OnceLock<String>,
}

/// Quantized (or relaxed) latents of one or more images.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    /// `[N, C, ceil(H/16), ceil(W/16)]`.
    pub values: Tensor,
    /// Hyper-latent, quantized with the same mode.
    pub hyper: Tensor,
    pub mode: QuantizationMode,
    /// Height and width of the original (unpadded) input.
    pub image_dims: (usize, usize),
}

/// Per-element code length estimates of a [`LatentCode`], in bits.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    /// Same shape as the latent values; every element is `>= 0`.
    pub bits: Tensor,
    /// Code length of the hyper-latent side information, per batch item.
    pub side_bits: Vec<f64>,
}

impl EntropyMap {
    pub fn from_bits(bits: Tensor) -> Self {
        let n = bits.shape()[0];
        EntropyMap { bits, side_bits: vec![0.0; n] }
    }
}

/// `(total_bits, bits per original pixel)` summed over the batch.
pub fn rate(entropy: &EntropyMap, image_dims: (usize, usize)) -> (f64, f64) {
    let total = entropy.bits.sum() + entropy.side_bits.iter().sum::<f64>();
    let items = entropy.bits.shape()[0] as f64;
    (total, total / (items * (image_dims.0 * image_dims.1) as f64))
}

/// Bits of `value` under a unit-bin discretized Gaussian with the given
/// mean and scale, floored at [`LIKELIHOOD_FLOOR`].
pub fn gaussian_bits<'g>(value: Var<'g>, mean: Var<'g>, scale: Var<'g>) -> Var<'g> {
    let centered = value.sub(mean).abs();
    let upper = centered.neg().add_scalar(0.5).div(scale).normal_cdf();
    let lower = centered.neg().add_scalar(-0.5).div(scale).normal_cdf();
    upper.sub(lower).clamp_min(LIKELIHOOD_FLOOR).log2().neg()
}

/// Graph outputs of one surrogate pass over an NCHW batch.
pub struct SurrogatePass<'g> {
    pub latent: Var<'g>,
    pub hyper: Var<'g>,
    pub latent_bits: Var<'g>,
    pub hyper_bits: Var<'g>,
    /// Bits per original pixel, per item: `[N]`.
    pub bpp: Var<'g>,
    /// Reconstruction cropped to the input size, clamped to `[0, 1]`.
    pub reconstruction: Option<Var<'g>>,
}

impl<'g> SurrogatePass<'g> {
    pub fn mean_bpp(&self) -> Var<'g> {
        self.bpp.mean()
    }
}

fn padded(n: usize) -> usize {
    n.div_ceil(DOWNSAMPLING) * DOWNSAMPLING
}

/// Latent spatial size for an `h x w` input.
pub fn latent_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(DOWNSAMPLING), w.div_ceil(DOWNSAMPLING))
}

impl Surrogate {
    pub fn new(config: SurrogateConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, n) = (config.latent_channels, config.hidden_channels);
        let z = Padding::Zero;
        let enc = [
            Conv2d::new(&mut store, "enc0", 3, n, 5, 2, z, &mut rng),
            Conv2d::new(&mut store, "enc1", n, n, 5, 2, z, &mut rng),
            Conv2d::new(&mut store, "enc2", n, n, 5, 2, z, &mut rng),
            Conv2d::new(&mut store, "enc3", n, c, 5, 2, z, &mut rng),
        ];
        let enc_gdn = [0, 1, 2].map(|i| Gdn::new(&mut store, &format!("enc_gdn{i}"), n, false));
        let dec = [
            Upsample2::new(&mut store, "dec0", c, n, 5, &mut rng),
            Upsample2::new(&mut store, "dec1", n, n, 5, &mut rng),
            Upsample2::new(&mut store, "dec2", n, n, 5, &mut rng),
            Upsample2::new(&mut store, "dec3", n, 3, 5, &mut rng),
        ];
        let dec_igdn = [0, 1, 2].map(|i| Gdn::new(&mut store, &format!("dec_igdn{i}"), n, true));
        let hyper_enc = [
            Conv2d::new(&mut store, "henc0", c, n, 3, 1, z, &mut rng),
            Conv2d::new(&mut store, "henc1", n, n, 5, 2, z, &mut rng),
            Conv2d::new(&mut store, "henc2", n, n, 5, 2, z, &mut rng),
        ];
        let hyper_dec = [
            Upsample2::new(&mut store, "hdec0", n, n, 5, &mut rng),
            Upsample2::new(&mut store, "hdec1", n, n, 5, &mut rng),
        ];
        let hyper_mean = Conv2d::new(&mut store, "hmean", n, c, 3, 1, z, &mut rng);
        let hyper_scale = Conv2d::new(&mut store, "hscale", n, c, 3, 1, z, &mut rng);
        let z_mean = store.add("z_prior.mean", Tensor::zeros([n]));
        let z_scale = store.add("z_prior.scale", Tensor::full([n], 1.0));
        let layers = Layers { enc, enc_gdn, dec, dec_igdn, hyper_enc, hyper_dec, hyper_mean, hyper_scale, z_mean, z_scale };
        Ok(Surrogate { config, store, layers, seed, iterations: 0, hash: OnceLock::new() })
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.hash = OnceLock::new();
        &mut self.store
    }

    /// SHA-256 over the config and every weight; filter checkpoints use it
    /// to pin the surrogate they were trained against.
    pub fn content_hash(&self) -> &str {
        self.hash.get_or_init(|| crate::checkpoint::content_hash(&self.config, &self.store))
    }

    /// Per-element latent bits of an NCHW batch under rounding, as a constant.
    pub fn latent_bits(&self, x: &Tensor) -> Result<Tensor> {
        if !x.all_finite() {
            return Err(Error::NonFinite("surrogate input".into()));
        }
        let g = Graph::new();
        let p = self.bind(&g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&p, g.constant(x.clone()), QuantizationMode::Round, &mut rng, false)?;
        Ok((*pass.latent_bits.value()).clone())
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        self.store.bind(g, trainable)
    }

    /// Analysis transform on an NCHW batch, reflect-padded to multiples of 16.
    pub fn analysis<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let (_, c, h, w) = x.value().dims4();
        if c != 3 {
            return Err(Error::Shape(format!("surrogate expects 3 channels, got {c}")));
        }
        let (ph, pw) = (padded(h) - h, padded(w) - w);
        if ph >= h || pw >= w {
            return Err(Error::InvalidInput(format!("{h}x{w} input too small to reflect-pad to a multiple of 16")));
        }
        let mut y = x.reflect_pad(0, ph, 0, pw);
        for i in 0..4 {
            y = self.layers.enc[i].forward(p, y);
            if i < 3 {
                y = self.layers.enc_gdn[i].forward(p, y);
            }
        }
        Ok(y)
    }

    fn quantize<'g>(&self, v: Var<'g>, mode: QuantizationMode, rng: &mut ChaCha8Rng) -> Var<'g> {
        match mode {
            QuantizationMode::Noise => {
                let shape = v.shape();
                let noise = Tensor::from_fn(shape, |_| rng.random_range(-0.5..0.5));
                v.add(v.graph().constant(noise))
            }
            QuantizationMode::Round => v.round_ste(),
            QuantizationMode::None => v,
        }
    }

    /// Hyper-analysis, hyperprior bits and the per-element latent bits.
    /// Returns `(hyper, hyper_bits, latent_bits)`.
    fn entropy_model<'g>(
        &self,
        p: &Bound<'g>,
        latent: Var<'g>,
        raw_latent: Var<'g>,
        mode: QuantizationMode,
        rng: &mut ChaCha8Rng,
    ) -> (Var<'g>, Var<'g>, Var<'g>) {
        let l = &self.layers;
        let mut z = l.hyper_enc[0].forward(p, raw_latent).relu();
        z = l.hyper_enc[1].forward(p, z).relu();
        z = l.hyper_enc[2].forward(p, z);
        let z_hat = self.quantize(z, mode, rng);
        let (n, _, zh, zw) = z_hat.value().dims4();
        let z_mu = p.var(l.z_mean).expand_channels(n, zh, zw);
        let z_sigma = p.var(l.z_scale).softplus().add_scalar(SCALE_BOUND).expand_channels(n, zh, zw);
        let z_bits = gaussian_bits(z_hat, z_mu, z_sigma);

        let (_, _, yh, yw) = latent.value().dims4();
        let mut h = l.hyper_dec[0].forward(p, z_hat).relu();
        h = l.hyper_dec[1].forward(p, h).relu();
        let h = h.crop(0, 0, yh, yw);
        let mu = l.hyper_mean.forward(p, h);
        let sigma = l.hyper_scale.forward(p, h).softplus().add_scalar(SCALE_BOUND);
        let y_bits = gaussian_bits(latent, mu, sigma);
        (z_hat, z_bits, y_bits)
    }

    pub fn synthesis<'g>(&self, p: &Bound<'g>, latent: Var<'g>, dims: (usize, usize)) -> Var<'g> {
        let mut x = latent;
        for i in 0..4 {
            x = self.layers.dec[i].forward(p, x);
            if i < 3 {
                x = self.layers.dec_igdn[i].forward(p, x);
            }
        }
        x.crop(0, 0, dims.0, dims.1).clamp_ste(0.0, 1.0)
    }

    /// Full pass: analysis, quantization, entropy model and optionally synthesis.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        x: Var<'g>,
        mode: QuantizationMode,
        rng: &mut ChaCha8Rng,
        decode: bool,
    ) -> Result<SurrogatePass<'g>> {
        let (_, _, h, w) = x.value().dims4();
        let raw = self.analysis(p, x)?;
        let latent = self.quantize(raw, mode, rng);
        let (hyper, hyper_bits, latent_bits) = self.entropy_model(p, latent, raw, mode, rng);
        let pixels = (h * w) as f64;
        let per_item = |bits: Var<'g>| {
            let shape = bits.shape();
            let count = (shape[1] * shape[2] * shape[3]) as f64;
            bits.mean_per_item().mul_scalar(count / pixels)
        };
        let bpp = per_item(latent_bits).add(per_item(hyper_bits));
        let reconstruction = decode.then(|| self.synthesis(p, latent, (h, w)));
        Ok(SurrogatePass { latent, hyper, latent_bits, hyper_bits, bpp, reconstruction })
    }

    /// Encodes one image. `seed` drives the noise of [`QuantizationMode::Noise`].
    pub fn encode(&self, image: &Image, mode: QuantizationMode, seed: u64) -> Result<LatentCode> {
        image.validate()?;
        let g = Graph::new();
        let p = self.bind(&g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = g.constant(image.to_tensor());
        let raw = self.analysis(&p, x)?;
        let latent = self.quantize(raw, mode, &mut rng);
        let (hyper, _, _) = self.entropy_model(&p, latent, raw, mode, &mut rng);
        let values = (*latent.value()).clone();
        if !values.all_finite() {
            return Err(Error::NonFinite("surrogate latent".into()));
        }
        Ok(LatentCode { values, hyper: (*hyper.value()).clone(), mode, image_dims: (image.height(), image.width()) })
    }

    fn check_latent(&self, latent: &LatentCode) -> Result<()> {
        let (_, c, h, w) = latent.values.dims4();
        let expect = latent_dims(latent.image_dims.0, latent.image_dims.1);
        if c != self.config.latent_channels || (h, w) != expect {
            return Err(Error::Shape(format!(
                "latent {:?} does not match a {}-channel surrogate for {:?} images",
                latent.values.shape(),
                self.config.latent_channels,
                latent.image_dims
            )));
        }
        Ok(())
    }

    /// Per-element code length of `latent` under the hyperprior it carries.
    pub fn entropy_estimate(&self, latent: &LatentCode) -> Result<EntropyMap> {
        self.check_latent(latent)?;
        let g = Graph::new();
        let p = self.bind(&g, false);
        let l = &self.layers;
        let z_hat = g.constant(latent.hyper.clone());
        let (n, _, zh, zw) = latent.hyper.dims4();
        let z_mu = p.var(l.z_mean).expand_channels(n, zh, zw);
        let z_sigma = p.var(l.z_scale).softplus().add_scalar(SCALE_BOUND).expand_channels(n, zh, zw);
        let z_bits = gaussian_bits(z_hat, z_mu, z_sigma).value();
        let (_, _, yh, yw) = latent.values.dims4();
        let mut h = l.hyper_dec[0].forward(&p, z_hat).relu();
        h = l.hyper_dec[1].forward(&p, h).relu();
        let h = h.crop(0, 0, yh, yw);
        let mu = l.hyper_mean.forward(&p, h);
        let sigma = l.hyper_scale.forward(&p, h).softplus().add_scalar(SCALE_BOUND);
        let bits = gaussian_bits(g.constant(latent.values.clone()), mu, sigma);
        let per = z_bits.len() / n;
        let side_bits = z_bits.data().chunks(per).map(|c| c.iter().sum()).collect();
        Ok(EntropyMap { bits: (*bits.value()).clone(), side_bits })
    }

    pub fn decode(&self, latent: &LatentCode) -> Result<Image> {
        self.check_latent(latent)?;
        if latent.values.shape()[0] != 1 {
            return Err(Error::Shape("decode() takes a single latent".into()));
        }
        let g = Graph::new();
        let p = self.bind(&g, false);
        let x = self.synthesis(&p, g.constant(latent.values.clone()), latent.image_dims);
        Image::from_tensor(&x.value())
    }

    /// Surrogate bits-per-pixel estimate for one image (rounded latents).
    pub fn estimate_bpp(&self, image: &Image) -> Result<f64> {
        let latent = self.encode(image, QuantizationMode::Round, 0)?;
        let entropy = self.entropy_estimate(&latent)?;
        Ok(rate(&entropy, latent.image_dims).1)
    }

    pub(crate) fn from_parts(config: SurrogateConfig, store: ParamStore, seed: u64, iterations: u64) -> Result<Self> {
        let mut s = Surrogate::new(config, seed)?;
        if s.store.names().ne(store.names()) {
            return Err(Error::Checkpoint("surrogate tensor layout does not match its config".into()));
        }
        for (a, b) in s.store.tensors().zip(store.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint("surrogate tensor shapes do not match its config".into()));
            }
        }
        s.store = store;
        s.iterations = iterations;
        Ok(s)
    }
}
