// SPDX-License-Identifier: MIT OR Apache-2.0

//! ViT image encoder: patch embedding, pre-LN transformer blocks, the
//! attention-ablated single-token block, and retrieval in the joint space.
//!
//! Token addressing: `TokenRef { layer: i, position: j }` names `h_{i-1}[j]`,
//! the input of block `i`. `i` runs over `1..=L+1`; `i = L+1` is the final
//! residual state, which needs no ablation to be read out.

use serde::{Deserialize, Serialize};

use crate::edit::InterventionPlan;
use crate::error::{Error, Result};
use crate::io::bundle::{BlockWeights, ModelBundle};
use crate::io::vocab::Vocabulary;
use crate::tensor::{self, activation, layer_norm, linear, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenRef {
    pub layer: usize,
    pub position: usize,
}

impl TokenRef {
    pub fn new(layer: usize, position: usize) -> Self {
        Self { layer, position }
    }

    pub fn validate(&self, bundle: &ModelBundle) -> Result<()> {
        let m = &bundle.manifest;
        if self.layer == 0 || self.layer > m.num_layers + 1 || self.position >= m.seq_len() {
            return Err(Error::Input(format!(
                "token ({}, {}) out of range: layer must be in 1..={}, position in 0..{}",
                self.layer,
                self.position,
                m.num_layers + 1,
                m.seq_len()
            )));
        }
        Ok(())
    }
}

/// Everything recorded during a full forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    /// `h_0 … h_L`, each `[(1+T) × D]`, as computed by the blocks.
    pub states: Vec<Tensor>,
    /// Per block, `[H × (1+T) × (1+T)]` post-softmax weights.
    pub attentions: Vec<Tensor>,
    /// Per state index, the edited copy actually consumed downstream when an
    /// intervention replaced rows of that state.
    pub edited: Vec<Option<Tensor>>,
}

impl ActivationTrace {
    pub fn num_layers(&self) -> usize {
        self.attentions.len()
    }

    /// The value of `h_{i-1}` after interventions: the input of block `i`
    /// (or the final state for `i = L+1`).
    pub fn block_input(&self, layer: usize) -> &Tensor {
        let idx = layer - 1;
        self.edited[idx].as_ref().unwrap_or(&self.states[idx])
    }

    /// Row `j` of the block input at layer `i`.
    pub fn token(&self, token: TokenRef) -> &[f32] {
        self.block_input(token.layer).row(token.position)
    }
}

/// Projects patches, prepends the class embedding and adds positions.
pub fn embed(patches: &Tensor, bundle: &ModelBundle) -> Result<Tensor> {
    let m = &bundle.manifest;
    if patches.shape() != [m.num_patches(), m.patch_dim()] {
        return Err(Error::Dimension {
            op: "embed",
            left: patches.shape().to_vec(),
            right: vec![m.num_patches(), m.patch_dim()],
        });
    }
    let projected = linear(patches, &bundle.patch_embed, None)?;
    let d = m.hidden_dim;
    let mut data = Vec::with_capacity(m.seq_len() * d);
    data.extend_from_slice(bundle.class_embedding.data());
    data.extend_from_slice(projected.data());
    for (v, p) in data.iter_mut().zip(bundle.pos_embedding.data()) {
        *v += p;
    }
    Tensor::new(vec![m.seq_len(), d], data)
}

fn block(bundle: &ModelBundle, k: usize) -> Result<&BlockWeights> {
    if k == 0 || k > bundle.blocks.len() {
        return Err(Error::Input(format!("block index {k} outside 1..={}", bundle.blocks.len())));
    }
    Ok(&bundle.blocks[k - 1])
}

/// Writes the plan's replacements for `layer` into a copy of `h`, if any apply.
fn apply_replacements(h: &Tensor, layer: usize, plan: Option<&InterventionPlan>) -> Result<Option<Tensor>> {
    let Some(plan) = plan else { return Ok(None) };
    let mut edited: Option<Tensor> = None;
    for r in plan.replacements().iter().filter(|r| r.layer == layer) {
        let t = edited.get_or_insert_with(|| h.clone());
        if r.position >= t.num_rows() {
            return Err(Error::Input(format!("replacement position {} out of range", r.position)));
        }
        let row = t.row_mut(r.position);
        match r.value.as_slice() {
            None => row.iter_mut().for_each(|v| *v = 0.0),
            Some(v) if v.len() == row.len() => row.copy_from_slice(v),
            Some(v) => {
                return Err(Error::Compatibility(format!(
                    "replacement for ({layer}, {}) has dim {}, model dim is {}",
                    r.position,
                    v.len(),
                    row.len()
                )))
            }
        }
    }
    Ok(edited)
}

fn mlp_residual(h: &Tensor, w: &BlockWeights, bundle: &ModelBundle) -> Result<Tensor> {
    let m = &bundle.manifest;
    let x = layer_norm(h, &w.ln2_gamma, &w.ln2_beta, m.ln_eps)?;
    let hidden = activation(&linear(&x, &w.fc1_weight, Some(&w.fc1_bias))?, m.activation);
    let y = linear(&hidden, &w.fc2_weight, Some(&w.fc2_bias))?;
    h.add(&y)
}

/// Multi-head self-attention sub-layer on an already normalized sequence.
/// Returns the output projection and the `[H × N × N]` weights.
fn attention(x: &Tensor, w: &BlockWeights, bundle: &ModelBundle) -> Result<(Tensor, Tensor)> {
    let m = &bundle.manifest;
    let (n, d, heads, dh) = (x.num_rows(), m.hidden_dim, m.num_heads, m.head_dim());
    let q = linear(x, &w.q_weight, Some(&w.q_bias))?;
    let k = linear(x, &w.k_weight, Some(&w.k_bias))?;
    let v = linear(x, &w.v_weight, Some(&w.v_bias))?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut weights = Vec::with_capacity(heads * n * n);
    let mut ctx = vec![0.0f32; n * d];
    let mut logits = vec![0.0f32; n];
    let mut probs = Vec::with_capacity(n);
    for head in 0..heads {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            for (j, l) in logits.iter_mut().enumerate() {
                let kj = &k.row(j)[cols.clone()];
                let s: f64 = qi.iter().zip(kj).map(|(&a, &b)| a as f64 * b as f64).sum();
                *l = (s * scale) as f32;
            }
            probs.clear();
            tensor::softmax_row_into(&logits, &mut probs);
            for c in cols.clone() {
                let s: f64 = probs.iter().enumerate().map(|(j, &p)| p as f64 * v.row(j)[c] as f64).sum();
                ctx[i * d + c] = s as f32;
            }
            weights.extend_from_slice(&probs);
        }
    }
    let ctx = Tensor::new(vec![n, d], ctx)?;
    let out = linear(&ctx, &w.out_weight, Some(&w.out_bias))?;
    Ok((out, Tensor::new(vec![heads, n, n], weights)?))
}

/// Output of one full block: the (possibly edited) input, the next state
/// and the attention weights.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub edited_input: Option<Tensor>,
    pub next: Tensor,
    pub attention: Tensor,
}

/// Block `k` (1-based) on the whole sequence. Plan replacements addressed to
/// layer `k` overwrite rows of the block input before the first layer norm.
pub fn block_full(h: &Tensor, k: usize, bundle: &ModelBundle, plan: Option<&InterventionPlan>) -> Result<BlockOutput> {
    let w = block(bundle, k)?;
    let edited_input = apply_replacements(h, k, plan)?;
    let input = edited_input.as_ref().unwrap_or(h);
    let x = layer_norm(input, &w.ln1_gamma, &w.ln1_beta, bundle.manifest.ln_eps)?;
    let (attn_out, attention) = attention(&x, w, bundle)?;
    let mid = input.add(&attn_out)?;
    let next = mlp_residual(&mid, w, bundle)?;
    Ok(BlockOutput {
        edited_input,
        next,
        attention,
    })
}

/// Block `k` on a single token with keys and queries disabled: the value
/// path through the output projection plus residual, then the MLP sub-block.
pub fn block_ablated(h_row: &[f32], k: usize, bundle: &ModelBundle) -> Result<Vec<f32>> {
    let w = block(bundle, k)?;
    let h = Tensor::new(vec![1, h_row.len()], h_row.to_vec())?;
    let x = layer_norm(&h, &w.ln1_gamma, &w.ln1_beta, bundle.manifest.ln_eps)?;
    let v = linear(&x, &w.v_weight, Some(&w.v_bias))?;
    let o = linear(&v, &w.out_weight, Some(&w.out_bias))?;
    let mid = h.add(&o)?;
    Ok(mlp_residual(&mid, w, bundle)?.into_data())
}

pub fn forward_full(patches: &Tensor, bundle: &ModelBundle, plan: Option<&InterventionPlan>) -> Result<ActivationTrace> {
    if let Some(p) = plan {
        p.validate(bundle)?;
    }
    let l = bundle.manifest.num_layers;
    let mut states = Vec::with_capacity(l + 1);
    let mut attentions = Vec::with_capacity(l);
    let mut edited = Vec::with_capacity(l + 1);
    states.push(embed(patches, bundle)?);
    for k in 1..=l {
        let out = block_full(&states[k - 1], k, bundle, plan)?;
        edited.push(out.edited_input);
        attentions.push(out.attention);
        states.push(out.next);
    }
    edited.push(apply_replacements(&states[l], l + 1, plan)?);
    Ok(ActivationTrace {
        states,
        attentions,
        edited,
    })
}

/// Runs token `(i, j)` through blocks `i..=L` with attention disabled.
pub fn forward_ablated_from(token: TokenRef, trace: &ActivationTrace, bundle: &ModelBundle) -> Result<Vec<f32>> {
    token.validate(bundle)?;
    if trace.states.len() != bundle.manifest.num_layers + 1 {
        return Err(Error::Compatibility("trace was not produced by this bundle".into()));
    }
    let mut x = trace.token(token).to_vec();
    for k in token.layer..=bundle.manifest.num_layers {
        x = block_ablated(&x, k, bundle)?;
    }
    Ok(x)
}

/// Final layer norm, visual projection, L2 normalization.
pub fn project_to_joint(v: &[f32], bundle: &ModelBundle) -> Result<Vec<f32>> {
    let x = Tensor::new(vec![1, v.len()], v.to_vec())?;
    let x = layer_norm(&x, &bundle.ln_post_gamma, &bundle.ln_post_beta, bundle.manifest.ln_eps)?;
    let y = linear(&x, &bundle.visual_projection, None)?;
    Ok(tensor::l2_normalize(&y)?.into_data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedText {
    /// Index of the entry in its vocabulary.
    pub index: usize,
    pub text: String,
    pub cosine: f64,
}

/// Vocabulary entries sorted by descending cosine to `embedding`; ties keep
/// vocabulary order.
pub fn rank_by_cosine(embedding: &[f32], vocab: &Vocabulary) -> Result<Vec<RankedText>> {
    if vocab.is_empty() {
        return Err(Error::Input("empty vocabulary".into()));
    }
    vocab.check_dim(embedding.len())?;
    let mut ranked = (0..vocab.len())
        .map(|i| {
            Ok(RankedText {
                index: i,
                text: vocab.text(i).to_string(),
                cosine: tensor::cosine(embedding, vocab.embedding(i))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.cosine.total_cmp(&a.cosine).then(a.index.cmp(&b.index)));
    Ok(ranked)
}

/// Zero-shot classification of the final CLS token against `vocab`.
pub fn classify(
    patches: &Tensor,
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    plan: Option<&InterventionPlan>,
) -> Result<Vec<RankedText>> {
    vocab.check_dim(bundle.manifest.joint_dim)?;
    let trace = forward_full(patches, bundle, plan)?;
    classify_trace(&trace, bundle, vocab)
}

/// Classification from an existing trace (final CLS after interventions).
pub fn classify_trace(trace: &ActivationTrace, bundle: &ModelBundle, vocab: &Vocabulary) -> Result<Vec<RankedText>> {
    let cls = trace.token(TokenRef::new(bundle.manifest.num_layers + 1, 0));
    rank_by_cosine(&project_to_joint(cls, bundle)?, vocab)
}
