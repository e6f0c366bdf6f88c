//! Distortion measures and the composite filter objective.
//!
//! Every rate term is in bits per pixel. Mean squared error enters training
//! objectives on the 8-bit scale (`255^2 * mse`), the usual convention under
//! which surrogate trade-offs around `lambda = 0.1..0.4` are meaningful;
//! [`mse`] itself reports the `[0, 1]` scale.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::image::Image;
use crate::{Error, Result};

/// Multiplier that puts a `[0, 1]`-scale MSE on the 8-bit scale.
pub const MSE_SCALE: f64 = 255.0 * 255.0;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Mean squared difference over all samples of two equally sized images.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same_dims(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// `-10 log10(1 - msssim)`, the usual dB presentation of MS-SSIM.
pub fn ms_ssim_db(value: f64) -> f64 {
    -10.0 * (1.0 - value).max(1e-12).log10()
}

fn check_same_dims(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse_var<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    a.sub(b).square().mean()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsSsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
    pub weights: Vec<f64>,
    /// `None` uses as many of `weights` as the input size allows (at least
    /// one); `Some(s)` demands exactly `s` scales and fails on small inputs.
    pub scales: Option<usize>,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
            weights: MS_SSIM_WEIGHTS.to_vec(),
            scales: None,
        }
    }
}

impl MsSsimConfig {
    pub fn gaussian_window(&self) -> Vec<f64> {
        let c = (self.window / 2) as f64;
        let w: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }

    /// Scale count for a `h x w` input. With automatic scales the leading
    /// weights are renormalized to sum to one.
    pub fn resolve_scales(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        let fits = |s: usize| (h.min(w) >> (s - 1)) >= self.window;
        let count = match self.scales {
            Some(s) => {
                if s == 0 || s > self.weights.len() {
                    return Err(Error::Config(format!("{s} MS-SSIM scales requested, {} weights", self.weights.len())));
                }
                if !fits(s) {
                    return Err(Error::InvalidInput(format!(
                        "{h}x{w} input is too small for {s} MS-SSIM scales (need {} px)",
                        self.window << (s - 1)
                    )));
                }
                return Ok(self.weights[..s].to_vec());
            }
            None => (1..=self.weights.len()).rev().find(|&s| fits(s)).ok_or_else(|| {
                Error::InvalidInput(format!("{h}x{w} input is smaller than the {} px MS-SSIM window", self.window))
            })?,
        };
        let w = &self.weights[..count];
        let total: f64 = w.iter().sum();
        Ok(w.iter().map(|v| v / total).collect())
    }
}

/// Per-item MS-SSIM of two NCHW batches, averaged over channels; shape `[N]`.
pub fn ms_ssim_var<'g>(a: Var<'g>, b: Var<'g>, cfg: &MsSsimConfig) -> Result<Var<'g>> {
    let shape = a.shape();
    if shape != b.shape() || shape.len() != 4 {
        return Err(Error::Shape(format!("MS-SSIM inputs {:?} vs {:?}", shape, b.shape())));
    }
    let weights = cfg.resolve_scales(shape[2], shape[3])?;
    let window = cfg.gaussian_window();
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let (mut x, mut y) = (a, b);
    let mut product: Option<Var<'g>> = None;
    for (j, &wj) in weights.iter().enumerate() {
        if j > 0 {
            x = x.avg_pool2();
            y = y.avg_pool2();
        }
        let mu_x = x.separable_filter_valid(&window);
        let mu_y = y.separable_filter_valid(&window);
        let mu_xx = mu_x.square();
        let mu_yy = mu_y.square();
        let mu_xy = mu_x.mul(mu_y);
        let var_x = x.square().separable_filter_valid(&window).sub(mu_xx);
        let var_y = y.square().separable_filter_valid(&window).sub(mu_yy);
        let cov = x.mul(y).separable_filter_valid(&window).sub(mu_xy);
        let cs_map = cov.mul_scalar(2.0).add_scalar(c2).div(var_x.add(var_y).add_scalar(c2));
        let term = if j + 1 == weights.len() {
            let l_map = mu_xy.mul_scalar(2.0).add_scalar(c1).div(mu_xx.add(mu_yy).add_scalar(c1));
            l_map.mul(cs_map).mean_hw()
        } else {
            cs_map.mean_hw()
        };
        let term = term.relu().pow_nonneg(wj);
        product = Some(match product {
            None => term,
            Some(p) => p.mul(term),
        });
    }
    Ok(product.expect("at least one scale").mean_per_item())
}

/// MS-SSIM of two images with the standard constants; 1 means identical.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    ms_ssim_with(a, b, &MsSsimConfig::default())
}

pub fn ms_ssim_with(a: &Image, b: &Image, cfg: &MsSsimConfig) -> Result<f64> {
    check_same_dims(a, b)?;
    let g = Graph::new();
    let v = ms_ssim_var(g.constant(a.to_tensor()), g.constant(b.to_tensor()), cfg)?;
    Ok(v.value().data()[0])
}

/// Frozen feature stack used by the perceptual loss.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    /// Feature maps of the declared layers for an NCHW batch in `[0, 1]`.
    fn features<'g>(&self, graph: &'g Graph, x: Var<'g>) -> Vec<Var<'g>>;
}

/// Mean over declared layers of the mean squared feature difference.
pub fn perceptual_loss_var<'g>(a: Var<'g>, b: Var<'g>, extractor: &dyn FeatureExtractor) -> Var<'g> {
    let graph = a.graph();
    let fa = extractor.features(graph, a);
    let fb = extractor.features(graph, b);
    assert!(!fa.is_empty(), "feature extractor declared no layers");
    let n = fa.len() as f64;
    fa.into_iter()
        .zip(fb)
        .map(|(x, y)| mse_var(x, y))
        .reduce(|acc, v| acc.add(v))
        .expect("non-empty")
        .mul_scalar(1.0 / n)
}

pub fn perceptual_loss(a: &Image, b: &Image, extractor: Option<&dyn FeatureExtractor>) -> Result<f64> {
    check_same_dims(a, b)?;
    let extractor = extractor.ok_or_else(|| Error::Config("no perceptual feature extractor configured".into()))?;
    let g = Graph::new();
    Ok(perceptual_loss_var(g.constant(a.to_tensor()), g.constant(b.to_tensor()), extractor).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    MsssimRetarget,
    Gan,
    Task,
}

impl std::str::FromStr for FilterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msssim_retarget" | "msssim" => Ok(FilterMode::MsssimRetarget),
            "gan" => Ok(FilterMode::Gan),
            "task" => Ok(FilterMode::Task),
            other => Err(Error::Config(format!("unknown filter mode `{other}`"))),
        }
    }
}

/// Weights of the filter objective. `lambda_t` weighs the target distortion
/// in MS-SSIM retargeting; `lambda_task` the cross-entropy in task mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma_gan: f64,
    pub gamma_vgg: f64,
    pub gamma_mse: f64,
    pub lambda_t: f64,
    pub lambda_task: f64,
}

impl LossWeights {
    pub const RETARGET_RATIO: f64 = 500.0;

    /// MS-SSIM retargeting weights derived from the surrogate's trade-off.
    pub fn retarget(lambda_s: f64) -> Self {
        LossWeights {
            gamma_gan: 0.0,
            gamma_vgg: 0.0,
            gamma_mse: 0.0,
            lambda_t: Self::RETARGET_RATIO * lambda_s,
            lambda_task: 0.0,
        }
    }

    pub fn gan_preset() -> Self {
        LossWeights { gamma_gan: 5.0, gamma_vgg: 0.01, gamma_mse: 0.001, lambda_t: 1.0, lambda_task: 0.0 }
    }

    pub fn task_default() -> Self {
        LossWeights { gamma_gan: 0.0, gamma_vgg: 0.0, gamma_mse: 0.001, lambda_t: 1.0, lambda_task: 1.0 }
    }
}

/// Loss components available for one batch. Distortions are already reduced
/// to scalars; `mse` is on the `[0, 1]` scale.
#[derive(Clone, Copy, Default)]
pub struct LossTerms<'g> {
    pub rate_bpp: Option<Var<'g>>,
    pub ms_ssim: Option<Var<'g>>,
    pub gan: Option<Var<'g>>,
    pub perceptual: Option<Var<'g>>,
    pub mse: Option<Var<'g>>,
    pub cross_entropy: Option<Var<'g>>,
}

fn need<'g>(v: Option<Var<'g>>, what: &str, mode: FilterMode) -> Result<Var<'g>> {
    v.ok_or_else(|| Error::InvalidInput(format!("{mode:?} filter loss needs the {what} term")))
}

/// Combines the components for `mode`:
/// - retarget: `rate + lambda_t * (1 - ms_ssim)`
/// - gan: `gamma_gan * L_gan + gamma_vgg * L_vgg + gamma_mse * L_mse + rate`
/// - task: `rate + lambda_task * CE + gamma_mse * L_mse`
pub fn filter_loss<'g>(terms: &LossTerms<'g>, weights: &LossWeights, mode: FilterMode) -> Result<Var<'g>> {
    let rate = need(terms.rate_bpp, "rate", mode)?;
    Ok(match mode {
        FilterMode::MsssimRetarget => {
            let d = need(terms.ms_ssim, "MS-SSIM", mode)?.neg().add_scalar(1.0);
            rate.add(d.mul_scalar(weights.lambda_t))
        }
        FilterMode::Gan => {
            let gan = need(terms.gan, "adversarial", mode)?.mul_scalar(weights.gamma_gan);
            let vgg = need(terms.perceptual, "perceptual", mode)?.mul_scalar(weights.gamma_vgg);
            let mse = need(terms.mse, "MSE", mode)?.mul_scalar(weights.gamma_mse * MSE_SCALE);
            gan.add(vgg).add(mse).add(rate)
        }
        FilterMode::Task => {
            let ce = need(terms.cross_entropy, "cross-entropy", mode)?.mul_scalar(weights.lambda_task);
            let mse = need(terms.mse, "MSE", mode)?.mul_scalar(weights.gamma_mse * MSE_SCALE);
            rate.add(ce).add(mse)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn mse_examples() {
        let z = Image::filled(4, 4, [0.0; 3]);
        let o = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(mse(&z, &z).unwrap(), 0.0);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert!(matches!(mse(&z, &Image::filled(4, 5, [0.0; 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn ms_ssim_identity_is_exactly_one() {
        let x = noise_image(64, 48, 3);
        assert_eq!(ms_ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn scale_count_follows_input_size() {
        let cfg = MsSsimConfig::default();
        assert_eq!(cfg.resolve_scales(176, 200).unwrap().len(), 5);
        assert_eq!(cfg.resolve_scales(175, 200).unwrap().len(), 4);
        assert_eq!(cfg.resolve_scales(96, 96).unwrap().len(), 4);
        assert_eq!(cfg.resolve_scales(11, 11).unwrap().len(), 1);
        assert!(cfg.resolve_scales(10, 64).is_err());
        let strict = MsSsimConfig { scales: Some(5), ..MsSsimConfig::default() };
        assert!(matches!(strict.resolve_scales(96, 96), Err(Error::InvalidInput(_))));
        let w = cfg.resolve_scales(96, 96).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_drops_with_noise() {
        let x = noise_image(96, 96, 1).map(|v| 0.25 + 0.5 * v);
        let n1 = noise_image(96, 96, 2);
        let n2 = noise_image(96, 96, 4);
        let small = Image::new(96, 96, x.data().iter().zip(n1.data()).map(|(a, b)| a + 0.01 * (b - 0.5)).collect()).unwrap();
        let large = Image::new(96, 96, x.data().iter().zip(n2.data()).map(|(a, b)| a + 0.2 * (b - 0.5)).collect()).unwrap();
        let s_small = ms_ssim(&x, &small).unwrap();
        let s_large = ms_ssim(&x, &large).unwrap();
        assert!(s_small > s_large && s_small < 1.0 && s_large >= 0.0);
    }

    #[test]
    fn lambda_t_is_500_lambda_s() {
        assert_eq!(LossWeights::retarget(0.2).lambda_t, 100.0);
    }

    #[test]
    fn loss_modes_combine_components() {
        let g = Graph::new();
        let terms = LossTerms {
            rate_bpp: Some(g.scalar(0.7)),
            ms_ssim: Some(g.scalar(0.9)),
            gan: Some(g.scalar(0.25)),
            perceptual: Some(g.scalar(2.0)),
            mse: Some(g.scalar(1e-3)),
            cross_entropy: Some(g.scalar(1.5)),
        };
        let w = LossWeights::gan_preset();
        let retarget = filter_loss(&terms, &LossWeights::retarget(0.1), FilterMode::MsssimRetarget).unwrap();
        assert!((retarget.item() - (0.7 + 50.0 * 0.1)).abs() < 1e-12);
        let gan = filter_loss(&terms, &w, FilterMode::Gan).unwrap();
        assert!((gan.item() - (5.0 * 0.25 + 0.01 * 2.0 + 0.001 * 1e-3 * MSE_SCALE + 0.7)).abs() < 1e-12);
        let task = filter_loss(&terms, &LossWeights::task_default(), FilterMode::Task).unwrap();
        assert!((task.item() - (0.7 + 1.5 + 0.001 * 1e-3 * MSE_SCALE)).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_leave_rate_only() {
        let g = Graph::new();
        let terms = LossTerms {
            rate_bpp: Some(g.scalar(0.42)),
            ms_ssim: Some(g.scalar(0.8)),
            gan: Some(g.scalar(0.3)),
            perceptual: Some(g.scalar(0.1)),
            mse: Some(g.scalar(0.01)),
            cross_entropy: Some(g.scalar(2.0)),
        };
        let zero = LossWeights { gamma_gan: 0.0, gamma_vgg: 0.0, gamma_mse: 0.0, lambda_t: 0.0, lambda_task: 0.0 };
        for mode in [FilterMode::MsssimRetarget, FilterMode::Gan, FilterMode::Task] {
            assert_eq!(filter_loss(&terms, &zero, mode).unwrap().item(), 0.42);
        }
    }

    #[test]
    fn missing_component_is_rejected() {
        let g = Graph::new();
        let terms = LossTerms { rate_bpp: Some(g.scalar(1.0)), ..Default::default() };
        assert!(filter_loss(&terms, &LossWeights::gan_preset(), FilterMode::Gan).is_err());
        assert!(filter_loss(&LossTerms::default(), &LossWeights::retarget(0.1), FilterMode::MsssimRetarget).is_err());
    }

    #[test]
    fn perceptual_without_extractor_is_config_error() {
        let x = Image::filled(8, 8, [0.5; 3]);
        assert!(matches!(perceptual_loss(&x, &x, None), Err(Error::Config(_))));
    }
}
