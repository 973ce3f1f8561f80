//! Minibatch Adam training with early stopping, and confusion-matrix
//! evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{argmax, cross_entropy, CnnError, CnnModel};

/// One labelled network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub rng_seed: u64,
    /// Feed each training image through a random symmetry of the cube
    /// (axis permutation plus reflections) every time it is visited.
    #[serde(default)]
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 100,
            patience: 5,
            rng_seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), CnnError> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(CnnError::Config(format!("{self:?}")))
        }
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Mean loss and summed gradient over a batch. Per-sample gradients are
/// computed in parallel and added in sample order, so the result does not
/// depend on the thread count.
fn batch_gradient(model: &CnnModel, batch: &[&Example]) -> (f64, Vec<f64>) {
    let n = model.params().len();
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|ex| {
            let mut g = vec![0.0; n];
            let loss = model.accumulate_gradient(&ex.input, ex.label, &mut g);
            (loss, g)
        })
        .collect();
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad)
}

/// Number of symmetries of the cube.
pub const CUBE_SYMMETRIES: usize = 48;

/// Applies symmetry `k < 48` of the cube to a single-channel `side³` image
/// stored x-fastest: `k / 8` picks the axis permutation, the low three bits
/// the reflected axes.
pub fn cube_symmetry(input: &[f64], side: usize, k: usize) -> Vec<f64> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let perm = PERMS[k / 8];
    let mut out = vec![0.0; input.len()];
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let src = [x, y, z];
                let mut dst = [0; 3];
                for a in 0..3 {
                    let c = src[perm[a]];
                    dst[a] = if k >> a & 1 == 1 { side - 1 - c } else { c };
                }
                out[(dst[2] * side + dst[1]) * side + dst[0]] = input[(z * side + y) * side + x];
            }
        }
    }
    out
}

/// Mean loss and accuracy over a set.
pub fn loss_and_accuracy(model: &CnnModel, set: &[Example]) -> (f64, f64) {
    let results: Vec<(f64, bool)> = set
        .par_iter()
        .map(|ex| {
            let p = model.run(&ex.input).probs;
            (cross_entropy(&p, ex.label), argmax(&p) == ex.label)
        })
        .collect();
    let loss = results.iter().map(|r| r.0).sum::<f64>() / set.len() as f64;
    let acc = results.iter().filter(|r| r.1).count() as f64 / set.len() as f64;
    (loss, acc)
}

/// Trains with shuffled minibatches; after each epoch the validation loss is
/// measured and training stops once it has not improved for `patience`
/// epochs. Returns the parameters with the best validation loss.
pub fn train(
    model: CnnModel,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
) -> Result<(CnnModel, Vec<EpochRecord>), CnnError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(CnnError::EmptySplit("training"));
    }
    if val_set.is_empty() {
        return Err(CnnError::EmptySplit("validation"));
    }
    let len = model.arch().input_len();
    if let Some(bad) = train_set.iter().chain(val_set).find(|e| e.input.len() != len) {
        return Err(CnnError::Shape {
            expected: len,
            got: bad.input.len(),
        });
    }
    let side = model.arch().input;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut model = model;
    let mut adam = Adam::new(model.params().len(), cfg);
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<Example> = if cfg.augment {
                chunk
                    .iter()
                    .map(|&i| Example {
                        input: cube_symmetry(&train_set[i].input, side, rng.gen_range(0..CUBE_SYMMETRIES)),
                        label: train_set[i].label,
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let batch: Vec<&Example> = if cfg.augment {
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &train_set[i]).collect()
            };
            let (loss, grad) = batch_gradient(&model, &batch);
            total += loss * batch.len() as f64;
            adam.step(model.params_mut(), &grad);
        }
        let (val_loss, val_accuracy) = loss_and_accuracy(&model, val_set);
        history.push(EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss,
            val_accuracy,
        });
        log::info!("epoch {epoch}: train {:.4} val {val_loss:.4} acc {val_accuracy:.3}", total / train_set.len() as f64);
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, history))
}

/// Confusion counts (rows = true class), their row-normalized form and the
/// overall accuracy.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Evaluation {
    pub counts: Vec<Vec<usize>>,
    pub matrix: Vec<Vec<f64>>,
    pub accuracy: f64,
}

impl Evaluation {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Self {
        let mut counts = vec![vec![0usize; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            counts[t][p] += 1;
        }
        let matrix = counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if n > 0 { c as f64 / n as f64 } else { 0.0 })
                    .collect()
            })
            .collect();
        let correct = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
        Self {
            counts,
            matrix,
            accuracy: if truth.is_empty() {
                0.0
            } else {
                correct as f64 / truth.len() as f64
            },
        }
    }

    /// Diagonal of the row-normalized matrix.
    pub fn per_class_recall(&self) -> Vec<f64> {
        (0..self.matrix.len()).map(|i| self.matrix[i][i]).collect()
    }
}

pub fn evaluate(model: &CnnModel, set: &[Example]) -> Evaluation {
    let predicted: Vec<usize> = set.par_iter().map(|ex| argmax(&model.run(&ex.input).probs)).collect();
    let truth: Vec<usize> = set.iter().map(|e| e.label).collect();
    Evaluation::from_predictions(&truth, &predicted, model.arch().classes)
}

#[cfg(test)]
mod tests {
    use super::super::Arch;
    use super::*;

    #[test]
    fn cube_symmetries_are_distinct_bijections() {
        let side = 3;
        let img: Vec<f64> = (0..27).map(|i| i as f64).collect();
        let mut seen = std::collections::HashSet::new();
        for k in 0..CUBE_SYMMETRIES {
            let t = cube_symmetry(&img, side, k);
            let mut sorted = t.clone();
            sorted.sort_by(f64::total_cmp);
            assert_eq!(sorted, img);
            // The centre voxel is fixed by every symmetry.
            assert_eq!(t[13], 13.0);
            seen.insert(t.iter().map(|v| *v as u8).collect::<Vec<u8>>());
        }
        assert_eq!(seen.len(), CUBE_SYMMETRIES);
        assert_eq!(cube_symmetry(&img, side, 0), img);
    }

    #[test]
    fn reflections_are_involutions() {
        let img: Vec<f64> = (0..64).map(|i| (i * 7 % 13) as f64).collect();
        for k in 0..8 {
            assert_eq!(cube_symmetry(&cube_symmetry(&img, 4, k), 4, k), img);
        }
    }
    use rand::Rng;

    fn tiny() -> Arch {
        Arch {
            input: 4,
            channels: 2,
            kernels: vec![3, 2],
            classes: 4,
        }
    }

    /// Four easily separable classes: a filled octant in a class-dependent
    /// corner, with random speckle.
    fn toy_set(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 4;
                let mut input = vec![0.0; 64];
                for z in 0..4 {
                    for y in 0..4 {
                        for x in 0..4 {
                            let corner = [(x < 2) as usize, (y < 2) as usize];
                            let on = corner[0] + 2 * corner[1] == label && z < 2;
                            let noise = rng.gen_bool(0.05);
                            input[(z * 4 + y) * 4 + x] = f64::from((on ^ noise) as u8);
                        }
                    }
                }
                Example { input, label }
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss() {
        let data = toy_set(200, 1);
        let cfg = TrainConfig {
            max_epochs: 30,
            patience: 30,
            batch_size: 16,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (_, hist) = train(CnnModel::new(tiny(), 2).unwrap(), &data[..160], &data[160..], &cfg).unwrap();
        assert_eq!(hist.len(), 30);
        assert!(hist.last().unwrap().train_loss < hist[0].train_loss);
    }

    #[test]
    fn noisy_validation_triggers_early_stop() {
        let data = toy_set(120, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let val: Vec<Example> = toy_set(40, 5)
            .into_iter()
            .map(|mut e| {
                e.label = rng.gen_range(0..4);
                e
            })
            .collect();
        let cfg = TrainConfig {
            max_epochs: 50,
            patience: 1,
            batch_size: 8,
            learning_rate: 5e-2,
            ..Default::default()
        };
        let (_, hist) = train(CnnModel::new(tiny(), 2).unwrap(), &data, &val, &cfg).unwrap();
        assert!(hist.len() < 50, "{}", hist.len());
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_set(64, 9);
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 16,
            ..Default::default()
        };
        let a = train(CnnModel::new(tiny(), 1).unwrap(), &data[..48], &data[48..], &cfg).unwrap();
        let b = train(CnnModel::new(tiny(), 1).unwrap(), &data[..48], &data[48..], &cfg).unwrap();
        assert_eq!(a.0.params(), b.0.params());
    }

    #[test]
    fn empty_split_is_an_error() {
        let data = toy_set(8, 1);
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(CnnModel::new(tiny(), 1).unwrap(), &data, &[], &cfg),
            Err(CnnError::EmptySplit("validation"))
        ));
    }

    #[test]
    fn duplicated_sample_doubles_the_summed_gradient() {
        let m = CnnModel::new(tiny(), 7).unwrap();
        let ex = &toy_set(1, 2)[0];
        let (_, single) = m.loss_and_gradient(&ex.input, ex.label).unwrap();
        let mut twice = vec![0.0; single.len()];
        m.accumulate_gradient(&ex.input, ex.label, &mut twice);
        m.accumulate_gradient(&ex.input, ex.label, &mut twice);
        for (a, b) in single.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn confusion_matrix_patterns() {
        let perfect = Evaluation::from_predictions(&[0, 1, 2], &[0, 1, 2], 3);
        assert_eq!(perfect.matrix, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(perfect.accuracy, 1.0);
        let constant = Evaluation::from_predictions(&[0, 1, 2, 2], &[1, 1, 1, 1], 3);
        for row in &constant.matrix {
            assert_eq!(row, &vec![0.0, 1.0, 0.0]);
        }
        assert_eq!(constant.accuracy, 0.25);
    }
}
