//! Parameter storage, the handful of layers the models are built from, and Adam.

use base64::Engine as _;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Tensor, Var};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
}

/// Named, ordered parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.value)
    }

    /// Puts every parameter on `graph`, as gradient leaves when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { graph.leaf(p.value.clone()) } else { graph.constant(p.value.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.params.iter().map(|p| TensorRecord::encode(&p.name, &p.value)).collect()
    }

    /// Loads values by name into an already-constructed store of the same layout.
    pub fn load_records(&mut self, records: &[TensorRecord]) -> Result<(), Error> {
        if records.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let rec = records
                .iter()
                .find(|r| r.name == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            let t = rec.decode()?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}

/// Serialized tensor: little-endian `f64` payload, base64 encoded.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorRecord {
    pub fn encode(name: &str, t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor, Error> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", self.name)))?;
        if bytes.len() % 8 != 0 || bytes.len() / 8 != self.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!("tensor {}: payload size does not match shape", self.name)));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::new(self.shape.clone(), data))
    }
}

/// Parameters of one store placed on a graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order (zeros where unused).
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

/// Global L2 norm across a gradient list.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl Conv2d {
    /// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[cout, cin, kernel, kernel], bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform(&[cout], bound, rng));
        Conv2d { weight, bias, stride, kernel, padding }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let half = self.kernel / 2;
        match self.padding {
            Padding::Zero => x.conv2d(p.var(self.weight), Some(p.var(self.bias)), self.stride, half),
            Padding::Reflect => x
                .reflect_pad(half, half, half, half)
                .conv2d(p.var(self.weight), Some(p.var(self.bias)), self.stride, 0),
        }
    }
}

/// Stride-2 transposed convolution producing exactly twice the input size.
#[derive(Clone, Copy, Debug)]
pub struct Upsample2 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Upsample2 {
    /// `kernel` must be 4 (pad 1) or 5 (pad 2, output padding 1).
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(kernel == 4 || kernel == 5, "unsupported upsampling kernel {kernel}");
        let bound = 1.0 / ((cin * kernel * kernel) as f64 / 4.0).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[cin, cout, kernel, kernel], bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform(&[cout], bound, rng));
        Upsample2 { weight, bias, kernel }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let (pad, out_pad) = if self.kernel == 4 { (1, 0) } else { (2, 1) };
        x.conv_transpose2d(p.var(self.weight), Some(p.var(self.bias)), 2, pad, out_pad)
    }
}

/// Generalized divisive normalization: `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`,
/// or its approximate inverse `x_i * sqrt(...)`.
///
/// `beta = b^2 + 1e-6` and `gamma = g^2` keep the constraints `beta > 0`, `gamma >= 0`.
#[derive(Clone, Copy, Debug)]
pub struct Gdn {
    pub beta: ParamId,
    pub gamma: ParamId,
    pub inverse: bool,
}

impl Gdn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, inverse: bool) -> Self {
        let beta = store.add(format!("{name}.beta"), Tensor::full([channels], 1.0));
        let g0 = 0.1f64.sqrt();
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::from_fn([channels, channels, 1, 1], |i| if i % (channels + 1) == 0 { g0 } else { 0.0 }),
        );
        Gdn { beta, gamma, inverse }
    }

    pub fn effective_beta(&self, store: &ParamStore) -> Tensor {
        store.get(self.beta).map(|b| b * b + 1e-6)
    }

    pub fn effective_gamma(&self, store: &ParamStore) -> Tensor {
        store.get(self.gamma).map(|g| g * g)
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let beta = p.var(self.beta).square().add_scalar(1e-6);
        let gamma = p.var(self.gamma).square();
        let norm = x.square().conv2d(gamma, Some(beta), 1, 0).sqrt();
        if self.inverse {
            x.mul(norm)
        } else {
            x.div(norm)
        }
    }
}

/// Two 3x3 convolutions with pre-activation ReLU and an identity skip.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, padding: Padding, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, padding, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, padding, rng),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.conv1.forward(p, x.relu());
        let h = self.conv2.forward(p, h.relu());
        x.add(h)
    }
}

/// Fully connected layer on `[batch, features]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[cin, cout], bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform(&[cout], bound, rng));
        Linear { weight, bias }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.matmul(p.var(self.weight)).add_row_bias(p.var(self.bias))
    }
}

/// Piecewise-constant learning rate: `stages[i] = (iterations, lr)` run back to back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub stages: Vec<(u64, f64)>,
}

impl LrSchedule {
    pub fn constant(iterations: u64, lr: f64) -> Self {
        LrSchedule { stages: vec![(iterations, lr)] }
    }

    pub fn total_iterations(&self) -> u64 {
        self.stages.iter().map(|s| s.0).sum()
    }

    /// Learning rate at zero-based iteration `it`; the last stage extends past the end.
    pub fn lr_at(&self, it: u64) -> f64 {
        let mut end = 0;
        for &(n, lr) in &self.stages {
            end += n;
            if it < end {
                return lr;
            }
        }
        self.stages.last().map(|s| s.1).unwrap_or(0.0)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
            v: store.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.params[i].value.data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn schedule_switches_exactly_at_boundary() {
        let s = LrSchedule { stages: vec![(400_000, 1e-4), (100_000, 1e-5)] };
        assert_eq!(s.lr_at(399_999), 1e-4);
        assert_eq!(s.lr_at(400_000), 1e-5);
        assert_eq!(s.total_iterations(), 500_000);
    }

    #[test]
    fn gdn_normalizes_with_identity_gamma() {
        let mut store = ParamStore::new();
        let gdn = Gdn::new(&mut store, "gdn", 2, false);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(Tensor::new([1, 2, 1, 1], vec![3.0, -1.0]));
        let y = gdn.forward(&p, x).value();
        let expect0 = 3.0 / (1.0 + 1e-6 + 0.1 * 9.0f64).sqrt();
        assert!((y.data()[0] - expect0).abs() < 1e-12);
        let igdn = Gdn::new(&mut store, "igdn", 2, true);
        let p = store.bind(&g, false);
        let back = igdn.forward(&p, g.constant((*y).clone())).value();
        // IGDN(GDN(x)) only approximates x, but preserves sign and ordering.
        assert!(back.data()[0] > 0.0 && back.data()[1] < 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new([2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let g = Graph::new();
            let p = store.bind(&g, true);
            let loss = p.var(id).add_scalar(-1.0).square().sum();
            let grads = p.grads(&g.backward(loss));
            opt.step(&mut store, &grads, 0.01);
        }
        assert!(store.get(id).data().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn records_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new();
        Conv2d::new(&mut a, "c", 3, 4, 3, 1, Padding::Zero, &mut rng);
        let recs = a.to_records();
        let mut b = ParamStore::new();
        Conv2d::new(&mut b, "c", 3, 4, 3, 1, Padding::Zero, &mut ChaCha8Rng::seed_from_u64(9));
        b.load_records(&recs).unwrap();
        assert_eq!(a, b);
    }
}
