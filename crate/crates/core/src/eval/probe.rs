// SPDX-License-Identifier: MIT OR Apache-2.0

//! Softmax linear probe on frozen CLS embeddings, trained with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 1e-3,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// Parameters are kept in `f64`; [`ProbeModel::weight`] exposes them as a
/// tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major `[classes × dim]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ProbeModel {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        let n = num_classes * dim;
        Self {
            num_classes,
            dim,
            w: vec![0.0; n],
            b: vec![0.0; num_classes],
            m_w: vec![0.0; n],
            v_w: vec![0.0; n],
            m_b: vec![0.0; num_classes],
            v_b: vec![0.0; num_classes],
            step: 0,
        }
    }

    pub fn weight(&self) -> Tensor {
        Tensor::new(vec![self.num_classes, self.dim], self.w.iter().map(|&x| x as f32).collect()).expect("probe shape")
    }

    pub fn bias(&self) -> Tensor {
        Tensor::from_vec(self.b.iter().map(|&x| x as f32).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).all(|x| x.is_finite())
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| {
                let row = &self.w[c * self.dim..(c + 1) * self.dim];
                self.b[c] + row.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>()
            })
            .collect()
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: &[f32]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        best
    }

    /// Mean softmax cross-entropy over the given samples and its gradient.
    pub fn loss_and_grad(&self, xs: &[&[f32]], ys: &[usize]) -> (f64, Gradient) {
        let mut grad = Gradient {
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.num_classes],
        };
        let mut loss = 0.0;
        let n = xs.len().max(1) as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let z = self.logits(x);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let sum: f64 = exps.iter().sum();
            loss += sum.ln() + zmax - z[y];
            for c in 0..self.num_classes {
                let d = exps[c] / sum - if c == y { 1.0 } else { 0.0 };
                grad.b[c] += d / n;
                for (g, &v) in grad.w[c * self.dim..(c + 1) * self.dim].iter_mut().zip(x.iter()) {
                    *g += d * v as f64 / n;
                }
            }
        }
        (loss / n, grad)
    }

    pub fn loss(&self, xs: &[&[f32]], ys: &[usize]) -> f64 {
        self.loss_and_grad(xs, ys).0
    }

    fn adam_step(&mut self, g: &Gradient, cfg: &ProbeConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        };
        update(&mut self.w, &mut self.m_w, &mut self.v_w, &g.w);
        update(&mut self.b, &mut self.m_b, &mut self.v_b, &g.b);
    }

    pub fn accuracy(&self, xs: &[Vec<f32>], ys: &[usize]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let correct = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        correct as f64 / xs.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct ProbeTraining {
    pub model: ProbeModel,
    /// Full-data loss before training and after every step.
    pub losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Trains from zero initialization for `cfg.epochs` passes over a seeded
/// shuffle of the data, in mini-batches of `cfg.batch_size`.
pub fn train_probe(embeddings: &[Vec<f32>], labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<ProbeTraining> {
    if embeddings.is_empty() {
        return Err(Error::Input("no training embeddings".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::Input(format!("{} embeddings but {} labels", embeddings.len(), labels.len())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::Input("embeddings differ in dimension".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Input(format!("label {bad} outside {num_classes} classes")));
    }
    let mut warnings = Vec::new();
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        log::warn!("probe training data has a single class");
        warnings.push("training data contains a single class".into());
    }

    let xs: Vec<&[f32]> = embeddings.iter().map(Vec::as_slice).collect();
    let mut model = ProbeModel::zeros(num_classes, dim);
    let mut losses = vec![model.loss(&xs, labels)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let bx: Vec<&[f32]> = batch.iter().map(|&i| xs[i]).collect();
            let by: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (_, g) = model.loss_and_grad(&bx, &by);
            model.adam_step(&g, cfg);
            losses.push(model.loss(&xs, labels));
        }
    }
    if !model.is_finite() {
        return Err(Error::NonFinite("probe parameters".into()));
    }
    Ok(ProbeTraining { model, losses, warnings })
}
