//! Small convolutional classifier: the frozen task network for task-aware
//! filtering and the default feature stack of the perceptual loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, FORMAT_VERSION};
use crate::distortion::FeatureExtractor;
use crate::image::Image;
use crate::nn::{Adam, Bound, Conv2d, Linear, LrSchedule, ParamStore, Padding, TensorRecord};
use crate::{Error, Result};

/// A frozen, differentiable image classifier.
pub trait TaskClassifier {
    fn classes(&self) -> usize;
    /// Logits `[N, classes]` for an NCHW batch in `[0, 1]`.
    fn logits<'g>(&self, graph: &'g Graph, x: Var<'g>) -> Var<'g>;

    fn predict(&self, images: &[Image]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for img in images {
            let g = Graph::new();
            let logits = self.logits(&g, g.constant(img.to_tensor())).value();
            let row = logits.data();
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            out.push(best);
        }
        Ok(out)
    }
}

pub fn top1_accuracy(classifier: &dyn TaskClassifier, images: &[Image], labels: &[usize]) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidInput(format!("{} images for {} labels", images.len(), labels.len())));
    }
    let pred = classifier.predict(images)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Widths of the conv layers; all but the first downsample by 2.
    pub widths: Vec<usize>,
    /// Kernel size of the first (full-resolution) layer; the rest use 3x3.
    pub first_kernel: usize,
    pub classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { widths: vec![16, 32, 32, 32], first_kernel: 5, classes: crate::synth::GRATING_CLASSES }
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    fc: Linear,
    pub seed: u64,
    pub iterations: u64,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.classes < 2 || config.first_kernel % 2 == 0 {
            return Err(Error::Config("classifier needs at least one layer, two classes and an odd first kernel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            let (k, stride) = if i == 0 { (config.first_kernel, 1) } else { (3, 2) };
            convs.push(Conv2d::new(&mut store, &format!("conv{i}"), cin, w, k, stride, Padding::Zero, &mut rng));
            cin = w;
        }
        let fc = Linear::new(&mut store, "fc", cin, config.classes, &mut rng);
        Ok(Classifier { config, store, convs, fc, seed, iterations: 0 })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn activations<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Vec<Var<'g>> {
        let mut h = x.add_scalar(-0.5);
        let mut acts = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = c.forward(p, h).relu();
            acts.push(h);
        }
        acts
    }

    fn logits_bound<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let last = *self.activations(p, x).last().expect("at least one layer");
        self.fc.forward(p, last.mean_hw())
    }

    /// Supervised training with Adam on random minibatches; returns the loss trace.
    pub fn train(&mut self, data: &[(Image, usize)], schedule: &LrSchedule, batch: usize, seed: u64) -> Result<Vec<f64>> {
        if data.is_empty() || batch == 0 {
            return Err(Error::InvalidInput("classifier training needs data and a positive batch size".into()));
        }
        if let Some((_, l)) = data.iter().find(|(_, l)| *l >= self.config.classes) {
            return Err(Error::InvalidInput(format!("label {l} outside {} classes", self.config.classes)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam = Adam::new(&self.store);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        let mut trace = Vec::new();
        for it in 0..schedule.total_iterations() {
            let mut idx = Vec::with_capacity(batch);
            while idx.len() < batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let images: Vec<Image> = idx.iter().map(|&i| data[i].0.clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].1).collect();
            let g = Graph::new();
            let p = self.store.bind(&g, true);
            let loss = self.logits_bound(&p, g.constant(Image::batch(&images)?)).cross_entropy(&labels);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged { iteration: it, message: "classifier loss is not finite".into() });
            }
            let grads = p.grads(&g.backward(loss));
            adam.step(&mut self.store, &grads, schedule.lr_at(it));
            trace.push(value);
            self.iterations += 1;
        }
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_json(
            path,
            &ClassifierCheckpoint {
                format_version: FORMAT_VERSION,
                kind: "classifier".into(),
                content_hash: checkpoint::content_hash(&self.config, &self.store),
                config: self.config.clone(),
                seed: self.seed,
                iterations: self.iterations,
                tensors: self.store.to_records(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: ClassifierCheckpoint = checkpoint::read_json(path)?;
        checkpoint::check_header("classifier checkpoint", &ck.kind, "classifier", ck.format_version)?;
        let mut c = Classifier::new(ck.config, ck.seed)?;
        c.store.load_records(&ck.tensors)?;
        if checkpoint::content_hash(&c.config, &c.store) != ck.content_hash {
            return Err(Error::Checkpoint("classifier checkpoint content hash mismatch".into()));
        }
        c.iterations = ck.iterations;
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassifierCheckpoint {
    format_version: u32,
    kind: String,
    content_hash: String,
    config: ClassifierConfig,
    seed: u64,
    iterations: u64,
    tensors: Vec<TensorRecord>,
}

impl TaskClassifier for Classifier {
    fn classes(&self) -> usize {
        self.config.classes
    }

    fn logits<'g>(&self, graph: &'g Graph, x: Var<'g>) -> Var<'g> {
        let p = self.store.bind(graph, false);
        self.logits_bound(&p, x)
    }
}

impl FeatureExtractor for Classifier {
    fn name(&self) -> &str {
        "classifier"
    }

    fn features<'g>(&self, graph: &'g Graph, x: Var<'g>) -> Vec<Var<'g>> {
        let p = self.store.bind(graph, false);
        self.activations(&p, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortion::perceptual_loss;
    use crate::synth;

    #[test]
    fn learns_gratings_above_chance() {
        let data = synth::grating_dataset(300, 32, 1);
        let mut c = Classifier::new(ClassifierConfig { widths: vec![8, 16, 16], first_kernel: 5, classes: 10 }, 0).unwrap();
        let trace = c.train(&data, &LrSchedule::constant(800, 2e-3), 16, 2).unwrap();
        let head: f64 = trace[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = trace[trace.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        let test = synth::grating_dataset(100, 32, 99);
        let (imgs, labels): (Vec<_>, Vec<_>) = test.into_iter().unzip();
        assert!(top1_accuracy(&c, &imgs, &labels).unwrap() > 0.2);
    }

    #[test]
    fn perceptual_loss_properties() {
        let c = Classifier::new(ClassifierConfig::default(), 3).unwrap();
        let a = synth::corpus(1, 24, 24, 1).remove(0);
        let b = synth::corpus(1, 24, 24, 2).remove(0);
        assert_eq!(perceptual_loss(&a, &a, Some(&c)).unwrap(), 0.0);
        let ab = perceptual_loss(&a, &b, Some(&c)).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, perceptual_loss(&b, &a, Some(&c)).unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let c = Classifier::new(ClassifierConfig::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        c.save(&path).unwrap();
        assert_eq!(Classifier::load(&path).unwrap().params(), c.params());
    }
}
