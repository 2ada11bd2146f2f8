// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` tensors and the handful of kernels a ViT forward
//! pass and a linear probe need.
//!
//! All reductions accumulate in `f64` and sum in ascending index order, so
//! every kernel is bitwise reproducible across calls and runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Input(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `[rows × last_dim]`.
    pub fn num_rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let d = self.last_dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.last_dim())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `[m×k] · [k×n]`, accumulated in `f64` left to right over `k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = a.data[i * k + p] as f64;
            let brow = &b.data[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `y = x·Wᵀ + b` over the last axis of `x`; `weight` is `[out × in]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if weight.shape.len() != 2 || weight.shape[1] != x.last_dim() {
        return Err(Error::Dimension {
            op: "linear",
            left: x.shape.clone(),
            right: weight.shape.clone(),
        });
    }
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    if let Some(b) = bias {
        if b.shape != [out_dim] {
            return Err(Error::Dimension {
                op: "linear bias",
                left: vec![out_dim],
                right: b.shape.clone(),
            });
        }
    }
    let rows = x.num_rows();
    let mut data = Vec::with_capacity(rows * out_dim);
    for r in 0..rows {
        let xr = &x.data[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let mut s = dot_f64(xr, weight.row(o));
            if let Some(b) = bias {
                s += b.data[o] as f64;
            }
            data.push(s as f32);
        }
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().expect("non-empty shape") = out_dim;
    Tensor::new(shape, data)
}

/// Layer normalization over the last axis with biased (1/N) variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gamma.shape.clone(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut data = Vec::with_capacity(x.len());
    for row in x.rows() {
        let n = d as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for ((&v, &g), &b) in row.iter().zip(&gamma.data).zip(&beta.data) {
            data.push(((v as f64 - mean) * inv * g as f64 + b as f64) as f32);
        }
    }
    Tensor::new(x.shape.clone(), data)
}

/// Max-subtracted softmax over the last axis.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        softmax_row_into(row, &mut out);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub(crate) fn softmax_row_into(row: &[f32], out: &mut Vec<f32>) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    out.extend(exps.iter().map(|e| (e / total) as f32));
}

/// MLP nonlinearity, selected by the bundle manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    GeluExact,
    QuickGelu,
    /// Pass-through; only used by linear toy models.
    Identity,
}

impl ActivationKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "gelu_exact" | "gelu" => Ok(Self::GeluExact),
            "quick_gelu" => Ok(Self::QuickGelu),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown activation kind `{other}`"))),
        }
    }

    pub fn apply_scalar(self, x: f32) -> f32 {
        let v = x as f64;
        let y = match self {
            Self::GeluExact => 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)),
            Self::QuickGelu => v / (1.0 + (-1.702 * v).exp()),
            Self::Identity => v,
        };
        y as f32
    }
}

pub fn activation(x: &Tensor, kind: ActivationKind) -> Tensor {
    x.map(|v| kind.apply_scalar(v))
}

/// Euclidean norm accumulated in `f64`.
pub fn norm(v: &[f32]) -> f64 {
    dot_f64(v, v).sqrt()
}

/// Rescales every row of `x` to unit L2 norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(x.len());
    for row in x.rows() {
        let n = norm(row);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate("cannot normalize a zero-norm vector".into()));
        }
        data.extend(row.iter().map(|&v| (v as f64 / n) as f32));
    }
    Tensor::new(x.shape.clone(), data)
}

/// Cosine similarity in double precision, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok((dot_f64(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let a = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        let b = Tensor::from_rows(&[vec![5., 6.], vec![7., 8.]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[7, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for p in 0..5 {
                    s += a.data()[i * 5 + p] as f64 * b.data()[p * 3 + j] as f64;
                }
                assert!((c.data()[i * 3 + j] as f64 - s).abs() < 1e-6);
            }
        }
        let ai = matmul(&a, &Tensor::eye(5)).unwrap();
        assert_eq!(matmul(&ai, &b).unwrap(), c);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn linear_cases() {
        let x = Tensor::from_vec(vec![1., 1.]);
        let w = Tensor::from_rows(&[vec![2., 0.], vec![0., 3.]]).unwrap();
        let b = Tensor::from_vec(vec![1., 1.]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[3., 4.]);
        assert_eq!(linear(&x, &Tensor::eye(2), None).unwrap(), x);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 6], &mut rng);
        let w = random(&[5, 6], &mut rng);
        let b = random(&[5], &mut rng);
        let y = linear(&x, &w, Some(&b)).unwrap();
        let wt: Vec<f32> = (0..6).flat_map(|i| (0..5).map(move |o| (i, o))).map(|(i, o)| w.data()[o * 6 + i]).collect();
        let xw = matmul(&x, &Tensor::new(vec![6, 5], wt).unwrap()).unwrap();
        for r in 0..4 {
            for o in 0..5 {
                let expect = xw.data()[r * 5 + o] + b.data()[o];
                assert!((y.data()[r * 5 + o] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let c = Tensor::from_vec(vec![3.0; 8]);
        let g = Tensor::from_vec(vec![1.0; 8]);
        let zero = Tensor::from_vec(vec![0.0; 8]);
        assert!(layer_norm(&c, &g, &zero, LN_EPS).unwrap().data().iter().all(|&v| v == 0.0));
        let beta = Tensor::from_vec((0..8).map(|i| i as f32).collect());
        let y = layer_norm(&c, &g, &beta, LN_EPS).unwrap();
        for (a, b) in y.data().iter().zip(beta.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[64], &mut rng);
        let y = layer_norm(&x, &Tensor::from_vec(vec![1.0; 64]), &Tensor::from_vec(vec![0.0; 64]), LN_EPS).unwrap();
        let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let var = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_lastdim(&Tensor::from_vec(vec![0., 0.]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_lastdim(&Tensor::from_vec(vec![1000., 0.]));
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-30);

        // Integer logits: exp(k) against a high-precision series evaluation.
        let logits = [0.0f32, 1.0, 2.0, -1.0];
        let exact = |k: i32| -> f64 {
            let mut term = 1.0f64;
            let mut sum = 1.0f64;
            let x = k as f64;
            for n in 1..60 {
                term *= x / n as f64;
                sum += term;
            }
            sum
        };
        let e: Vec<f64> = logits.iter().map(|&l| exact(l as i32)).collect();
        let z: f64 = e.iter().sum();
        let s = softmax_lastdim(&Tensor::from_vec(logits.to_vec()));
        for (p, ei) in s.data().iter().zip(&e) {
            assert!((*p as f64 - ei / z).abs() < 1e-6);
        }
    }

    #[test]
    fn activation_cases() {
        for k in [ActivationKind::GeluExact, ActivationKind::QuickGelu] {
            assert_eq!(k.apply_scalar(0.0), 0.0);
        }
        assert!((ActivationKind::GeluExact.apply_scalar(10.0) - 10.0).abs() < 1e-6);
        let oracle = 1.0f64 / (1.0 + (-1.702f64).exp());
        assert!((ActivationKind::QuickGelu.apply_scalar(1.0) as f64 - oracle).abs() < 1e-6);
        assert!(ActivationKind::parse("relu6").is_err());
    }

    #[test]
    fn cosine_cases() {
        let v = [1.0f32, 2.0, 3.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
        assert!(l2_normalize(&Tensor::zeros(&[3])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
            for (x, y) in a.iter().zip(&b) {
                ab += *x as f64 * *y as f64;
                aa += (*x as f64).powi(2);
                bb += (*y as f64).powi(2);
            }
            let c = cosine(&a, &b).unwrap();
            assert!((c - ab / (aa.sqrt() * bb.sqrt())).abs() < 1e-6);
            assert!((-1.0..=1.0).contains(&c));
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e4f32..1e4f32, 1..32)) {
            let s = softmax_lastdim(&Tensor::from_vec(row));
            let total: f64 = s.data().iter().map(|&v| v as f64).sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-6);
            proptest::prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn kernels_are_pure(row in proptest::collection::vec(-10f32..10f32, 4)) {
            let x = Tensor::from_vec(row);
            let g = Tensor::from_vec(vec![1.0; 4]);
            let b = Tensor::from_vec(vec![0.5; 4]);
            let y1 = layer_norm(&x, &g, &b, LN_EPS).unwrap();
            let y2 = layer_norm(&x, &g, &b, LN_EPS).unwrap();
            proptest::prop_assert_eq!(y1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                                      y2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
