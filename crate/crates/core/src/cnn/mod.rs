//! 3D convolutional classifier: Conv → ReLU → AvgPool blocks followed by a
//! dense layer and softmax, with exact backpropagation.
//!
//! Activations are stored position-major with channels innermost, so the
//! network input for a [`BinaryImage`] is its raw voxel order.

mod io;
mod layers;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::voxel::BinaryImage;

pub use io::{load_model, read_model, save_model, write_model};
pub use train::{evaluate, train, Adam, EpochRecord, Evaluation, Example, TrainConfig};

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("input has {got} values, network expects {expected}")]
    Shape { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shape classes predicted by the network, in output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Tetrahedron = 0,
    Prism = 1,
    Cube = 2,
    Other = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Tetrahedron, Label::Prism, Label::Cube, Label::Other];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Tetrahedron => "tetrahedron",
            Label::Prism => "prism",
            Label::Cube => "cube",
            Label::Other => "other",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown label '{s}'"))
    }
}

/// Layer sizes. Each block is a same-padded stride-1 convolution with
/// `channels` filters of side `kernels[b]`, a ReLU and a 2×2×2 average pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub input: usize,
    pub channels: usize,
    pub kernels: Vec<usize>,
    pub classes: usize,
}

impl Arch {
    /// 16³ input, three blocks of 8 filters with sides 8, 4 and 2, four classes.
    pub fn standard() -> Self {
        Self {
            input: 16,
            channels: 8,
            kernels: vec![8, 4, 2],
            classes: 4,
        }
    }

    pub fn validate(&self) -> Result<(), CnnError> {
        let blocks = self.kernels.len();
        if self.input == 0 || self.channels == 0 || self.classes < 2 {
            return Err(CnnError::Architecture(format!("{self:?}")));
        }
        if blocks == 0 || self.input % (1 << blocks) != 0 {
            return Err(CnnError::Architecture(format!(
                "input side {} is not divisible by 2^{blocks}",
                self.input
            )));
        }
        if self.kernels.iter().any(|&k| k == 0) {
            return Err(CnnError::Architecture("zero kernel size".into()));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input.pow(3)
    }

    /// Spatial side at the input of block `b`.
    fn side(&self, b: usize) -> usize {
        self.input >> b
    }

    fn in_channels(&self, b: usize) -> usize {
        if b == 0 {
            1
        } else {
            self.channels
        }
    }

    pub fn flat_len(&self) -> usize {
        self.side(self.kernels.len()).pow(3) * self.channels
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut conv = Vec::new();
        for (b, &k) in self.kernels.iter().enumerate() {
            let w = k.pow(3) * self.in_channels(b) * self.channels;
            conv.push(ConvSlot {
                weights: offset,
                bias: offset + w,
                kernel: k,
                cin: self.in_channels(b),
            });
            offset += w + self.channels;
        }
        let dense_w = offset;
        let dense_b = dense_w + self.classes * self.flat_len();
        Layout {
            conv,
            dense_w,
            dense_b,
            total: dense_b + self.classes,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvSlot {
    weights: usize,
    bias: usize,
    kernel: usize,
    cin: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    conv: Vec<ConvSlot>,
    dense_w: usize,
    dense_b: usize,
    total: usize,
}

/// Network parameters in one flat vector: for each block the conv weights
/// `[kz][ky][kx][in][out]` then biases, then dense weights `[class][feature]`
/// and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    arch: Arch,
    layout: Layout,
    params: Vec<f64>,
}

/// Intermediate values kept for backpropagation.
struct Trace {
    /// Input of each block.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation convolution output of each block.
    pre: Vec<Vec<f64>>,
    flat: Vec<f64>,
    probs: Vec<f64>,
}

impl CnnModel {
    pub fn zeros(arch: Arch) -> Result<Self, CnnError> {
        arch.validate()?;
        let layout = arch.layout();
        Ok(Self {
            params: vec![0.0; layout.total],
            layout,
            arch,
        })
    }

    /// Glorot-uniform weights and zero biases from a seeded generator.
    pub fn new(arch: Arch, rng_seed: u64) -> Result<Self, CnnError> {
        let mut m = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        for slot in m.layout.conv.clone() {
            let k3 = slot.kernel.pow(3);
            let limit = (6.0 / ((slot.cin + m.arch.channels) * k3) as f64).sqrt();
            for w in &mut m.params[slot.weights..slot.bias] {
                *w = rng.gen_range(-limit..limit);
            }
        }
        let limit = (6.0 / (m.arch.flat_len() + m.arch.classes) as f64).sqrt();
        let (a, b) = (m.layout.dense_w, m.layout.dense_b);
        for w in &mut m.params[a..b] {
            *w = rng.gen_range(-limit..limit);
        }
        Ok(m)
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self, CnnError> {
        let mut m = Self::zeros(arch)?;
        if params.len() != m.params.len() {
            return Err(CnnError::Format(format!(
                "expected {} parameters, found {}",
                m.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(CnnError::Format("non-finite parameter".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, input: &[f64]) -> Result<(), CnnError> {
        if input.len() != self.arch.input_len() {
            return Err(CnnError::Shape {
                expected: self.arch.input_len(),
                got: input.len(),
            });
        }
        Ok(())
    }

    fn run(&self, input: &[f64]) -> Trace {
        let c = self.arch.channels;
        let mut inputs = Vec::with_capacity(self.layout.conv.len());
        let mut pre = Vec::with_capacity(self.layout.conv.len());
        let mut x = input.to_vec();
        for (b, slot) in self.layout.conv.iter().enumerate() {
            let side = self.arch.side(b);
            let z = layers::conv_forward(
                &x,
                side,
                slot.cin,
                &self.params[slot.weights..slot.bias],
                &self.params[slot.bias..slot.bias + c],
                slot.kernel,
                c,
            );
            let activated: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            let pooled = layers::pool_forward(&activated, side, c);
            inputs.push(std::mem::replace(&mut x, pooled));
            pre.push(z);
        }
        let logits = layers::dense_forward(
            &x,
            &self.params[self.layout.dense_w..self.layout.dense_b],
            &self.params[self.layout.dense_b..self.layout.total],
        );
        Trace {
            inputs,
            pre,
            flat: x,
            probs: softmax(&logits),
        }
    }

    /// Pre-softmax scores.
    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>, CnnError> {
        self.check_input(input)?;
        let t = self.run(input);
        Ok(layers::dense_forward(
            &t.flat,
            &self.params[self.layout.dense_w..self.layout.dense_b],
            &self.params[self.layout.dense_b..self.layout.total],
        ))
    }

    /// Class probabilities.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, CnnError> {
        self.check_input(input)?;
        Ok(self.run(input).probs)
    }

    pub fn probabilities(&self, img: &BinaryImage) -> Vec<f64> {
        self.run(&img.to_f64()).probs
    }

    /// Most probable class; ties go to the lowest class index.
    pub fn predict(&self, img: &BinaryImage) -> Label {
        Label::from_index(argmax(&self.probabilities(img))).unwrap_or(Label::Other)
    }

    /// Cross-entropy loss and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, input: &[f64], label: usize) -> Result<(f64, Vec<f64>), CnnError> {
        self.check_input(input)?;
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate_gradient(input, label, &mut grad);
        Ok((loss, grad))
    }

    /// Adds the gradient of one sample to `grad` and returns its loss.
    pub(crate) fn accumulate_gradient(&self, input: &[f64], label: usize, grad: &mut [f64]) -> f64 {
        let t = self.run(input);
        let c = self.arch.channels;
        let loss = cross_entropy(&t.probs, label);
        let mut dlogits = t.probs.clone();
        dlogits[label] -= 1.0;
        let (dw, rest) = grad[self.layout.dense_w..].split_at_mut(self.layout.dense_b - self.layout.dense_w);
        let mut dx = layers::dense_backward(
            &t.flat,
            &self.params[self.layout.dense_w..self.layout.dense_b],
            &dlogits,
            dw,
            &mut rest[..self.arch.classes],
        );
        for (b, slot) in self.layout.conv.iter().enumerate().rev() {
            let side = self.arch.side(b);
            let mut dz = layers::pool_backward(&dx, side, c);
            for (d, &z) in dz.iter_mut().zip(&t.pre[b]) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            let (dw, db) = grad[slot.weights..slot.bias + c].split_at_mut(slot.bias - slot.weights);
            dx = layers::conv_backward(
                &t.inputs[b],
                side,
                slot.cin,
                &self.params[slot.weights..slot.bias],
                slot.kernel,
                c,
                &dz,
                dw,
                db,
                b > 0,
            );
        }
        loss
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Negative log-probability of the true class.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(f64::MIN_POSITIVE).ln()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reduced() -> Arch {
        Arch {
            input: 4,
            channels: 2,
            kernels: vec![3, 2],
            classes: 4,
        }
    }

    #[test]
    fn standard_parameter_count() {
        let a = Arch::standard();
        assert_eq!(a.flat_len(), 64);
        let expected = (512 * 8 + 8) + (64 * 8 * 8 + 8) + (8 * 8 * 8 + 8) + (4 * 64 + 4);
        assert_eq!(a.num_params(), expected);
    }

    #[test]
    fn zero_model_gives_uniform_probabilities() {
        let m = CnnModel::zeros(Arch::standard()).unwrap();
        let p = m.forward(&vec![0.0; 4096]).unwrap();
        for v in p {
            assert_relative_eq!(v, 0.25, epsilon = 1e-15);
        }
        let loss = cross_entropy(&[0.25; 4], 2);
        assert_relative_eq!(loss, 4f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = CnnModel::new(Arch::standard(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x: Vec<f64> = (0..4096).map(|_| f64::from(rng.gen::<bool>() as u8)).collect();
            let p = m.forward(&x).unwrap();
            assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let m = CnnModel::zeros(Arch::standard()).unwrap();
        assert!(matches!(m.forward(&[0.0; 100]), Err(CnnError::Shape { expected: 4096, got: 100 })));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let label = rng.gen_range(0..4);
            let p = softmax(&z);
            // log-sum-exp form of the same quantity
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            assert_relative_eq!(cross_entropy(&p, label), lse - z[label], epsilon = 1e-12);
        }
        assert!(cross_entropy(&[1.0 - 1e-12, 1e-12 / 3.0, 1e-12 / 3.0, 1e-12 / 3.0], 0) < 1e-11);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = CnnModel::new(reduced(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (_, g) = m.loss_and_gradient(&x, 1).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for i in 0..m.params().len() {
            let mut plus = m.clone();
            plus.params_mut()[i] += h;
            let mut minus = m.clone();
            minus.params_mut()[i] -= h;
            let fd = (plus.loss_and_gradient(&x, 1).unwrap().0 - minus.loss_and_gradient(&x, 1).unwrap().0) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn zero_input_has_zero_first_layer_weight_gradient() {
        let m = CnnModel::new(reduced(), 3).unwrap();
        let (_, g) = m.loss_and_gradient(&[0.0; 64], 0).unwrap();
        let slot = m.layout.conv[0];
        assert!(g[slot.weights..slot.bias].iter().all(|&v| v == 0.0));
        assert!(g[m.layout.dense_b..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn argmax_prefers_lowest_index_and_ignores_shifts() {
        assert_eq!(argmax(&[0.3, 0.3, 0.2]), 0);
        let z = [0.1, 2.0, -1.0, 2.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.0).collect();
        assert_eq!(argmax(&softmax(&z)), argmax(&softmax(&shifted)));
        assert_eq!(argmax(&z), 1);
    }

    #[test]
    fn label_names_round_trip() {
        for l in Label::ALL {
            assert_eq!(l.name().parse::<Label>().unwrap(), l);
            assert_eq!(Label::from_index(l.index()), Some(l));
        }
    }
}
