// SPDX-License-Identifier: MIT OR Apache-2.0

//! Text interpretations of latent tokens.
//!
//! A token `(i, j)` is carried through blocks `i..=L` with attention
//! disabled, projected into the joint space and ranked against a vocabulary.
//! The smoothed variant averages each ablated block over Gaussian-perturbed
//! copies of the token, with a per-(layer, position) noise scale calibrated
//! from how far the ablated path drifts from the full one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{block_ablated, forward_ablated_from, forward_full, project_to_joint, rank_by_cosine, ActivationTrace, RankedText, TokenRef};
use crate::error::{Error, Result};
use crate::io::bundle::ModelBundle;
use crate::io::vocab::Vocabulary;
use crate::tensor::Tensor;

pub const DRIFT_FORMAT_VERSION: u32 = 1;

/// How the scalar drift is turned into noise: it is used as the standard
/// deviation of every component independently.
pub const NOISE_MODEL: &str = "per_component_std";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingInfo {
    pub samples: usize,
    pub seed: u64,
    pub noise_model: String,
    pub calibration_set_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interpretation {
    pub token: TokenRef,
    pub ranking: Vec<RankedText>,
    pub smoothing_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<SmoothingInfo>,
}

impl Interpretation {
    pub fn top(&self) -> Option<&RankedText> {
        self.ranking.first()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    /// Mean of the CLS sigmas over layers.
    pub cls_mean: f64,
    /// Mean of the non-CLS sigmas over layers and positions.
    pub other_mean: f64,
}

/// Histogram of per-token L2 distances between the attention-on and
/// attention-off block outputs, split into CLS and other tokens.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftHistogram {
    pub edges: Vec<f64>,
    pub cls: Vec<u64>,
    pub other: Vec<u64>,
}

const HISTOGRAM_BINS: usize = 20;

impl DriftHistogram {
    fn build(cls: &[f64], other: &[f64]) -> Self {
        let max = cls.iter().chain(other).copied().fold(0.0f64, f64::max);
        let width = if max > 0.0 { max / HISTOGRAM_BINS as f64 } else { 1.0 };
        let edges = (0..=HISTOGRAM_BINS).map(|b| b as f64 * width).collect();
        let count = |xs: &[f64]| {
            let mut c = vec![0u64; HISTOGRAM_BINS];
            for &x in xs {
                c[((x / width) as usize).min(HISTOGRAM_BINS - 1)] += 1;
            }
            c
        };
        Self {
            edges,
            cls: count(cls),
            other: count(other),
        }
    }
}

/// Noise scales per `(layer 1..=L, position 0..=T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftTable {
    pub format_version: u32,
    pub calibration_set_id: String,
    pub noise_model: String,
    /// `sigma[i - 1][j]` for layer `i`.
    pub sigma: Vec<Vec<f64>>,
    pub summary: DriftSummary,
    #[serde(default)]
    pub histogram: DriftHistogram,
}

impl DriftTable {
    /// Table of zeros, the degenerate no-noise calibration.
    pub fn zeros(num_layers: usize, seq_len: usize) -> Self {
        Self {
            format_version: DRIFT_FORMAT_VERSION,
            calibration_set_id: "zeros".into(),
            noise_model: NOISE_MODEL.into(),
            sigma: vec![vec![0.0; seq_len]; num_layers],
            summary: DriftSummary::default(),
            histogram: DriftHistogram::default(),
        }
    }

    /// Same value everywhere.
    pub fn constant(num_layers: usize, seq_len: usize, sigma: f64) -> Self {
        let mut t = Self::zeros(num_layers, seq_len);
        t.calibration_set_id = format!("constant:{sigma}");
        t.sigma.iter_mut().flatten().for_each(|s| *s = sigma);
        t.summary = DriftSummary {
            cls_mean: sigma,
            other_mean: sigma,
        };
        t
    }

    pub fn num_layers(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self, layer: usize, position: usize) -> f64 {
        self.sigma[layer - 1][position]
    }

    pub fn check(&self, bundle: &ModelBundle) -> Result<()> {
        let m = &bundle.manifest;
        if self.format_version != DRIFT_FORMAT_VERSION {
            return Err(Error::Version {
                expected: DRIFT_FORMAT_VERSION,
                found: self.format_version,
            });
        }
        if self.sigma.len() != m.num_layers || self.sigma.iter().any(|r| r.len() != m.seq_len()) {
            return Err(Error::Compatibility(format!(
                "drift table does not cover {} layers x {} positions",
                m.num_layers,
                m.seq_len()
            )));
        }
        if self.sigma.iter().flatten().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Input("drift sigmas must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: DriftTable = serde_json::from_str(s)?;
        if t.format_version != DRIFT_FORMAT_VERSION {
            return Err(Error::Version {
                expected: DRIFT_FORMAT_VERSION,
                found: t.format_version,
            });
        }
        Ok(t)
    }
}

/// Per-image contribution to a drift calibration.
struct DriftSums {
    with_attn: Vec<f64>,
    without_attn: Vec<f64>,
    cls_dist: Vec<f64>,
    other_dist: Vec<f64>,
}

/// For every layer `i` and position `j`, the L2 distance between the
/// calibration-set means of block `i`'s output with attention (full trace)
/// and without it (ablated block applied to `h_{i-1}[j]`).
pub fn calibrate_drift(inputs: &[Tensor], bundle: &ModelBundle, calibration_set_id: &str) -> Result<DriftTable> {
    if inputs.is_empty() {
        return Err(Error::Input("empty calibration set".into()));
    }
    let m = &bundle.manifest;
    let (l, n, d) = (m.num_layers, m.seq_len(), m.hidden_dim);
    let per_image = inputs
        .par_iter()
        .map(|patches| {
            let trace = forward_full(patches, bundle, None)?;
            let mut s = DriftSums {
                with_attn: vec![0.0; l * n * d],
                without_attn: vec![0.0; l * n * d],
                cls_dist: Vec::new(),
                other_dist: Vec::new(),
            };
            for i in 1..=l {
                for j in 0..n {
                    let with = trace.states[i].row(j);
                    let without = block_ablated(trace.states[i - 1].row(j), i, bundle)?;
                    let base = ((i - 1) * n + j) * d;
                    let mut sq = 0.0f64;
                    for c in 0..d {
                        s.with_attn[base + c] = with[c] as f64;
                        s.without_attn[base + c] = without[c] as f64;
                        sq += (with[c] as f64 - without[c] as f64).powi(2);
                    }
                    if j == 0 {
                        s.cls_dist.push(sq.sqrt());
                    } else {
                        s.other_dist.push(sq.sqrt());
                    }
                }
            }
            Ok(s)
        })
        .collect::<Result<Vec<DriftSums>>>()?;

    let mut with_sum = vec![0.0f64; l * n * d];
    let mut without_sum = vec![0.0f64; l * n * d];
    let mut cls_dist = Vec::new();
    let mut other_dist = Vec::new();
    for s in per_image {
        with_sum.iter_mut().zip(&s.with_attn).for_each(|(a, b)| *a += b);
        without_sum.iter_mut().zip(&s.without_attn).for_each(|(a, b)| *a += b);
        cls_dist.extend(s.cls_dist);
        other_dist.extend(s.other_dist);
    }
    let count = inputs.len() as f64;
    let mut sigma = vec![vec![0.0; n]; l];
    for (i, row) in sigma.iter_mut().enumerate() {
        for (j, s) in row.iter_mut().enumerate() {
            let base = (i * n + j) * d;
            let sq: f64 = (0..d)
                .map(|c| (with_sum[base + c] / count - without_sum[base + c] / count).powi(2))
                .sum();
            *s = sq.sqrt();
        }
    }
    let cls_mean = sigma.iter().map(|r| r[0]).sum::<f64>() / l as f64;
    let other_mean = if n > 1 {
        sigma.iter().map(|r| r[1..].iter().sum::<f64>()).sum::<f64>() / (l * (n - 1)) as f64
    } else {
        0.0
    };
    Ok(DriftTable {
        format_version: DRIFT_FORMAT_VERSION,
        calibration_set_id: calibration_set_id.to_string(),
        noise_model: NOISE_MODEL.into(),
        sigma,
        summary: DriftSummary { cls_mean, other_mean },
        histogram: DriftHistogram::build(&cls_dist, &other_dist),
    })
}

/// Random-smoothing parameters.
#[derive(Clone, Debug)]
pub struct Smoothing<'a> {
    pub drift: &'a DriftTable,
    pub samples: usize,
    pub seed: u64,
}

impl<'a> Smoothing<'a> {
    pub const DEFAULT_SAMPLES: usize = 100;

    pub fn new(drift: &'a DriftTable, samples: usize, seed: u64) -> Self {
        Self { drift, samples, seed }
    }
}

fn finish(token: TokenRef, out: &[f32], bundle: &ModelBundle, vocab: &Vocabulary, top_k: Option<usize>, smoothing: Option<SmoothingInfo>) -> Result<Interpretation> {
    let mut ranking = rank_by_cosine(&project_to_joint(out, bundle)?, vocab)?;
    if let Some(k) = top_k {
        ranking.truncate(k.max(1));
    }
    Ok(Interpretation {
        token,
        ranking,
        smoothing_used: smoothing.is_some(),
        smoothing,
    })
}

/// Ranks the vocabulary against token `(i, j)` carried through the
/// attention-ablated blocks `i..=L`.
pub fn interpret(token: TokenRef, trace: &ActivationTrace, bundle: &ModelBundle, vocab: &Vocabulary, top_k: Option<usize>) -> Result<Interpretation> {
    vocab.check_dim(bundle.manifest.joint_dim)?;
    let out = forward_ablated_from(token, trace, bundle)?;
    finish(token, &out, bundle, vocab, top_k, None)
}

/// Ablated forward where each block output is the mean over `samples`
/// noisy copies of its input. Noise is drawn layer-major, sample-minor from a
/// ChaCha stream seeded with `seed`.
pub fn smoothed_ablated_from(token: TokenRef, trace: &ActivationTrace, bundle: &ModelBundle, smoothing: &Smoothing<'_>) -> Result<Vec<f32>> {
    token.validate(bundle)?;
    if smoothing.samples < 1 {
        return Err(Error::Input("smoothing needs at least one sample".into()));
    }
    smoothing.drift.check(bundle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(smoothing.seed);
    let mut x = trace.token(token).to_vec();
    let mut noisy = vec![0.0f32; x.len()];
    let mut acc = vec![0.0f64; x.len()];
    for k in token.layer..=bundle.manifest.num_layers {
        let sigma = smoothing.drift.sigma(k, token.position);
        if sigma == 0.0 {
            x = block_ablated(&x, k, bundle)?;
            continue;
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for _ in 0..smoothing.samples {
            for (n, &v) in noisy.iter_mut().zip(&x) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *n = (v as f64 + sigma * z) as f32;
            }
            let y = block_ablated(&noisy, k, bundle)?;
            acc.iter_mut().zip(&y).for_each(|(a, &b)| *a += b as f64);
        }
        x = acc.iter().map(|a| (a / smoothing.samples as f64) as f32).collect();
    }
    Ok(x)
}

pub fn interpret_smoothed(
    token: TokenRef,
    trace: &ActivationTrace,
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    smoothing: &Smoothing<'_>,
    top_k: Option<usize>,
) -> Result<Interpretation> {
    vocab.check_dim(bundle.manifest.joint_dim)?;
    let out = smoothed_ablated_from(token, trace, bundle, smoothing)?;
    let info = SmoothingInfo {
        samples: smoothing.samples,
        seed: smoothing.seed,
        noise_model: smoothing.drift.noise_model.clone(),
        calibration_set_id: smoothing.drift.calibration_set_id.clone(),
    };
    finish(token, &out, bundle, vocab, top_k, Some(info))
}

/// [`interpret`] or [`interpret_smoothed`], depending on `smoothing`.
pub fn interpret_with(
    token: TokenRef,
    trace: &ActivationTrace,
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    top_k: Option<usize>,
    smoothing: Option<&Smoothing<'_>>,
) -> Result<Interpretation> {
    match smoothing {
        Some(s) => interpret_smoothed(token, trace, bundle, vocab, s, top_k),
        None => interpret(token, trace, bundle, vocab, top_k),
    }
}

/// Interpretations of every position of `layer`, in position order.
pub fn interpret_layer(
    layer: usize,
    trace: &ActivationTrace,
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    top_k: Option<usize>,
    smoothing: Option<&Smoothing<'_>>,
) -> Result<Vec<Interpretation>> {
    (0..bundle.manifest.seq_len())
        .into_par_iter()
        .map(|j| interpret_with(TokenRef::new(layer, j), trace, bundle, vocab, top_k, smoothing))
        .collect()
}
