//! Multi-scale least-squares discriminator.
//!
//! Three stages of two residual blocks each, with 2x2 average pooling in
//! front of stages two and three. Each stage ends in a 1x1 prediction conv;
//! the score is the mean sigmoid probability averaged over the stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::image::Image;
use crate::nn::{Bound, Conv2d, ParamStore, Padding, ResBlock, TensorRecord};
use crate::{Error, Result};

pub const STAGES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub width: usize,
    pub blocks_per_stage: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { width: 64, blocks_per_stage: 2 }
    }
}

impl DiscriminatorConfig {
    pub fn desk_scale() -> Self {
        DiscriminatorConfig { width: 16, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<ResBlock>,
    head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    input: Conv2d,
    stages: Vec<Stage>,
    pub seed: u64,
}

/// Serialized discriminator, stored inside GAN filter checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminatorState {
    pub config: DiscriminatorConfig,
    pub seed: u64,
    pub tensors: Vec<TensorRecord>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.width == 0 {
            return Err(Error::Config("discriminator width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.width;
        let input = Conv2d::new(&mut store, "input", 3, w, 3, 1, Padding::Zero, &mut rng);
        let stages = (0..STAGES)
            .map(|s| Stage {
                blocks: (0..config.blocks_per_stage)
                    .map(|b| ResBlock::new(&mut store, &format!("stage{s}.block{b}"), w, Padding::Zero, &mut rng))
                    .collect(),
                head: Conv2d::new(&mut store, &format!("stage{s}.head"), w, 1, 1, 1, Padding::Zero, &mut rng),
            })
            .collect();
        Ok(Discriminator { config, store, input, stages, seed })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        self.store.bind(g, trainable)
    }

    /// Pre-sigmoid prediction maps `p_s`, at scales 1, 1/2 and 1/4.
    pub fn stage_logits<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Vec<Var<'g>> {
        let mut h = self.input.forward(p, x);
        let mut out = Vec::with_capacity(STAGES);
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                h = h.avg_pool2();
            }
            for b in &stage.blocks {
                h = b.forward(p, h);
            }
            out.push(stage.head.forward(p, h.relu()));
        }
        out
    }

    /// Per-item score in `[0, 1]`, shape `[N]`.
    pub fn discriminate<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let n = x.shape()[0];
        self.stage_logits(p, x)
            .into_iter()
            .map(|l| l.sigmoid().mean_hw().reshape([n]))
            .reduce(|a, b| a.add(b))
            .expect("three stages")
            .mul_scalar(1.0 / STAGES as f64)
    }

    pub fn score(&self, image: &Image) -> Result<f64> {
        image.validate()?;
        let g = Graph::new();
        let p = self.bind(&g, false);
        Ok(self.discriminate(&p, g.constant(image.to_tensor())).item())
    }

    pub fn to_state(&self) -> DiscriminatorState {
        DiscriminatorState { config: self.config.clone(), seed: self.seed, tensors: self.store.to_records() }
    }

    pub fn from_state(state: &DiscriminatorState) -> Result<Self> {
        let mut d = Discriminator::new(state.config.clone(), state.seed)?;
        d.store.load_records(&state.tensors)?;
        Ok(d)
    }
}

/// `E[(1 - s_fake)^2]`, minimized by the filter.
pub fn gan_loss_filter<'g>(fake_scores: Var<'g>) -> Var<'g> {
    fake_scores.neg().add_scalar(1.0).square().mean()
}

/// `E[(1 - s_real)^2] + E[s_fake^2]`, minimized by the discriminator.
pub fn gan_loss_discriminator<'g>(real_scores: Var<'g>, fake_scores: Var<'g>) -> Var<'g> {
    real_scores.neg().add_scalar(1.0).square().mean().add(fake_scores.square().mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    #[test]
    fn loss_identities() {
        let g = Graph::new();
        let s = |v: f64| g.constant(Tensor::full([4], v));
        assert_eq!(gan_loss_filter(s(1.0)).item(), 0.0);
        assert_eq!(gan_loss_filter(s(0.0)).item(), 1.0);
        assert_eq!(gan_loss_filter(s(0.5)).item(), 0.25);
        assert_eq!(gan_loss_discriminator(s(1.0), s(0.0)).item(), 0.0);
        assert_eq!(gan_loss_discriminator(s(0.0), s(1.0)).item(), 2.0);
        assert_eq!(gan_loss_discriminator(s(0.5), s(0.5)).item(), 0.5);
    }

    #[test]
    fn zero_heads_score_one_half() {
        let mut d = Discriminator::new(DiscriminatorConfig { width: 4, blocks_per_stage: 1 }, 0).unwrap();
        let heads: Vec<_> = d.stages.iter().map(|s| s.head).collect();
        for h in heads {
            d.params_mut().get_mut(h.weight).data_mut().fill(0.0);
            d.params_mut().get_mut(h.bias).data_mut().fill(0.0);
        }
        let img = Image::from_fn(16, 16, |c, y, x| ((c + y * x) % 7) as f64 / 6.0);
        assert_eq!(d.score(&img).unwrap(), 0.5);
    }

    #[test]
    fn stages_run_at_three_scales() {
        let d = Discriminator::new(DiscriminatorConfig { width: 4, blocks_per_stage: 2 }, 1).unwrap();
        let g = Graph::new();
        let p = d.bind(&g, false);
        let maps = d.stage_logits(&p, g.constant(Tensor::full([2, 3, 32, 24], 0.3)));
        let dims: Vec<_> = maps.iter().map(|m| (m.shape()[2], m.shape()[3])).collect();
        assert_eq!(dims, vec![(32, 24), (16, 12), (8, 6)]);
        assert_eq!(d.discriminate(&p, g.constant(Tensor::full([2, 3, 32, 24], 0.3))).shape(), vec![2]);
    }
}
