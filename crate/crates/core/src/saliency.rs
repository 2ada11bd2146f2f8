// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-rollout saliency for latent tokens and the
//! intersection-over-prediction (IOP) score of thresholded masks.
//!
//! Rollout for token `(i, j)` multiplies the head-averaged, residual-mixed
//! (`0.5·A + 0.5·I`, rows renormalized) attention of blocks `1..i` and reads
//! row `j`: how much each input token flows into `h_{i-1}[j]`.

use serde::{Deserialize, Serialize};

use crate::engine::{ActivationTrace, TokenRef};
use crate::error::{Error, Result};
use crate::io::image::{BoxAnnotation, ImageInput};
use crate::tensor::{matmul, Tensor};

pub const RESIDUAL_WEIGHT: f32 = 0.5;
pub const MASK_THRESHOLD: f32 = 0.9;

/// Rollout matrix over blocks `1..upto_layer` (none for `upto_layer = 1`).
pub fn rollout(trace: &ActivationTrace, upto_layer: usize) -> Result<Tensor> {
    let l = trace.num_layers();
    if upto_layer == 0 || upto_layer > l + 1 {
        return Err(Error::Input(format!("rollout layer {upto_layer} outside 1..={}", l + 1)));
    }
    let n = trace.states[0].num_rows();
    let mut acc = Tensor::eye(n);
    for attn in &trace.attentions[..upto_layer - 1] {
        let heads = attn.shape()[0];
        let mut mixed = vec![0.0f32; n * n];
        for i in 0..n {
            let mut row = vec![0.0f64; n];
            for h in 0..heads {
                let base = (h * n + i) * n;
                for (j, r) in row.iter_mut().enumerate() {
                    *r += attn.data()[base + j] as f64;
                }
            }
            for (j, r) in row.iter_mut().enumerate() {
                *r = (1.0 - RESIDUAL_WEIGHT as f64) * *r / heads as f64 + if i == j { RESIDUAL_WEIGHT as f64 } else { 0.0 };
            }
            let total: f64 = row.iter().sum();
            for (j, r) in row.iter().enumerate() {
                mixed[i * n + j] = (r / total) as f32;
            }
        }
        acc = matmul(&Tensor::new(vec![n, n], mixed)?, &acc)?;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub token: TokenRef,
    pub grid_size: usize,
    /// Row-major `grid_size²` weights in `[0, 1]`.
    pub grid: Vec<f32>,
    pub mask: Vec<bool>,
    pub threshold: f32,
    pub residual_weight: f32,
}

impl SaliencyMap {
    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Min-max normalized rollout row restricted to patch columns, thresholded
/// at 0.9. A constant row yields an all-zero grid and an empty mask.
pub fn token_saliency(token: TokenRef, trace: &ActivationTrace) -> Result<SaliencyMap> {
    let r = rollout(trace, token.layer)?;
    let n = r.num_rows();
    if token.position >= n {
        return Err(Error::Input(format!("position {} outside 0..{n}", token.position)));
    }
    let grid_size = ((n - 1) as f64).sqrt().round() as usize;
    if grid_size * grid_size != n - 1 {
        return Err(Error::Config(format!("{} patch tokens do not form a square grid", n - 1)));
    }
    Ok(saliency_from_row(token, &r.row(token.position)[1..], grid_size))
}

pub(crate) fn saliency_from_row(token: TokenRef, patch_row: &[f32], grid_size: usize) -> SaliencyMap {
    let min = patch_row.iter().copied().fold(f32::INFINITY, f32::min);
    let max = patch_row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let grid: Vec<f32> = if max > min {
        patch_row.iter().map(|&v| (v - min) / (max - min)).collect()
    } else {
        vec![0.0; patch_row.len()]
    };
    let mask = if max > min {
        grid.iter().map(|&g| g >= MASK_THRESHOLD).collect()
    } else {
        vec![false; grid.len()]
    };
    SaliencyMap {
        token,
        grid_size,
        grid,
        mask,
        threshold: MASK_THRESHOLD,
        residual_weight: RESIDUAL_WEIGHT,
    }
}

/// `area(truth ∩ prediction) / area(prediction)` in model-input pixels, with
/// every mask cell upscaled to a `patch_size²` block. `None` for an empty mask.
pub fn iop(mask: &[bool], grid_size: usize, patch_size: usize, truth: &[BoxAnnotation]) -> Option<f64> {
    let size = grid_size * patch_size;
    let mut covered = vec![false; size * size];
    for b in truth {
        for y in (b.y0 as usize)..(b.y1 as usize).min(size) {
            for x in (b.x0 as usize)..(b.x1 as usize).min(size) {
                covered[y * size + x] = true;
            }
        }
    }
    let (mut pred, mut inter) = (0u64, 0u64);
    for (cell, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (gy, gx) = (cell / grid_size, cell % grid_size);
        for y in gy * patch_size..(gy + 1) * patch_size {
            for x in gx * patch_size..(gx + 1) * patch_size {
                pred += 1;
                inter += u64::from(covered[y * size + x]);
            }
        }
    }
    (pred > 0).then(|| inter as f64 / pred as f64)
}

/// Red heat overlay on the model-input crop with mask cells outlined in yellow.
pub fn overlay(view: &ImageInput, map: &SaliencyMap) -> Result<ImageInput> {
    let size = view.width() as usize;
    if view.height() as usize != size || size % map.grid_size != 0 {
        return Err(Error::Input("overlay needs the square model-input view".into()));
    }
    let cell = size / map.grid_size;
    let mut out = view.clone();
    for y in 0..size {
        for x in 0..size {
            let idx = (y / cell) * map.grid_size + x / cell;
            let a = 0.6 * map.grid[idx];
            let p = view.pixel(x as u32, y as u32);
            let blend = |c: u8, t: f32| (c as f32 * (1.0 - a) + t * a).round() as u8;
            let mut rgb = [blend(p[0], 255.0), blend(p[1], 0.0), blend(p[2], 0.0)];
            let edge = x % cell == 0 || y % cell == 0 || x % cell == cell - 1 || y % cell == cell - 1;
            if map.mask[idx] && edge {
                rgb = [255, 255, 0];
            }
            out.set_pixel(x as u32, y as u32, rgb);
        }
    }
    Ok(out)
}
