// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interpretation-quality metrics: rank change under object masking and
//! saliency overlap with annotated objects.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{forward_full, ActivationTrace, TokenRef};
use crate::error::{Error, Result};
use crate::eval::experiments::derive_seed;
use crate::interpret::interpret;
use crate::io::bundle::ModelBundle;
use crate::io::image::{mask_boxes, preprocess, random_mask_like, BoxAnnotation, CropGeometry, ImageInput, MaskFill};
use crate::io::vocab::Vocabulary;
use crate::saliency::{iop, token_saliency};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskCondition {
    ObjectMask,
    RandomMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankChangeRecord {
    pub image_id: String,
    pub token: TokenRef,
    pub original_top_text: String,
    pub original_rank: usize,
    pub post_mask_rank: usize,
    pub rank_change: usize,
    pub condition: MaskCondition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRankChange {
    pub layer: usize,
    pub object_mean: f64,
    pub object_count: usize,
    pub random_mean: f64,
    pub random_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankChangeReport {
    pub per_layer: Vec<LayerRankChange>,
    pub records: Vec<RankChangeRecord>,
    pub warnings: Vec<String>,
}

impl RankChangeReport {
    /// Mean over all object-mask records divided by the mean over all
    /// random-mask records, minus one.
    pub fn object_over_random(&self) -> Option<f64> {
        let mean = |c| {
            let v: Vec<f64> = self.records.iter().filter(|r| r.condition == c).map(|r| r.rank_change as f64).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let (o, r) = (mean(MaskCondition::ObjectMask)?, mean(MaskCondition::RandomMask)?);
        (r > 0.0).then(|| o / r - 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct AnnotatedImage {
    pub id: String,
    /// Boxes are taken from `image.boxes`, in original pixel coordinates.
    pub image: ImageInput,
}

#[derive(Clone, Debug)]
pub struct RankChangeOptions {
    /// Token layers scored; `1..=L+1` when unset.
    pub layers: Option<Vec<usize>>,
    pub fill: MaskFill,
    pub seed: u64,
}

impl Default for RankChangeOptions {
    fn default() -> Self {
        Self {
            layers: None,
            fill: MaskFill::Mean,
            seed: 0,
        }
    }
}

fn all_layers(bundle: &ModelBundle, layers: &Option<Vec<usize>>) -> Result<Vec<usize>> {
    let l = bundle.manifest.num_layers;
    let v = layers.clone().unwrap_or_else(|| (1..=l + 1).collect());
    if let Some(bad) = v.iter().find(|&&i| i == 0 || i > l + 1) {
        return Err(Error::Input(format!("layer {bad} outside 1..={}", l + 1)));
    }
    Ok(v)
}

fn rank_of(text: &str, token: TokenRef, trace: &ActivationTrace, bundle: &ModelBundle, vocab: &Vocabulary) -> Result<usize> {
    let interp = interpret(token, trace, bundle, vocab, None)?;
    interp
        .ranking
        .iter()
        .position(|r| r.text == text)
        .map(|p| p + 1)
        .ok_or_else(|| Error::Input(format!("`{text}` missing from ranking")))
}

/// Rank of each token's original top-1 text after masking `mask` in the
/// image.
pub fn rank_change_for_tokens(
    image_id: &str,
    image: &ImageInput,
    tokens: &[TokenRef],
    mask: &[BoxAnnotation],
    condition: MaskCondition,
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    fill: MaskFill,
) -> Result<Vec<RankChangeRecord>> {
    let trace = forward_full(&preprocess(image, &bundle.manifest)?, bundle, None)?;
    let masked = forward_full(&preprocess(&mask_boxes(image, mask, fill, &bundle.manifest)?, &bundle.manifest)?, bundle, None)?;
    tokens
        .iter()
        .map(|&t| {
            let top = interpret(t, &trace, bundle, vocab, Some(1))?.ranking[0].text.clone();
            let post = rank_of(&top, t, &masked, bundle, vocab)?;
            Ok(RankChangeRecord {
                image_id: image_id.into(),
                token: t,
                original_top_text: top,
                original_rank: 1,
                post_mask_rank: post,
                rank_change: post - 1,
                condition,
            })
        })
        .collect()
}

/// Top-1 texts of every token in `layers`, grouped by annotated label.
fn tokens_by_label(
    trace: &ActivationTrace,
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    layers: &[usize],
    labels: &[String],
) -> Result<BTreeMap<String, Vec<TokenRef>>> {
    let mut out: BTreeMap<String, Vec<TokenRef>> = BTreeMap::new();
    for &i in layers {
        for j in 0..bundle.manifest.seq_len() {
            let t = TokenRef::new(i, j);
            let top = interpret(t, trace, bundle, vocab, Some(1))?;
            let text = &top.ranking[0].text;
            if labels.iter().any(|l| l == text) {
                out.entry(text.clone()).or_default().push(t);
            }
        }
    }
    Ok(out)
}

fn labels_of(boxes: &[BoxAnnotation]) -> Vec<String> {
    let mut v: Vec<String> = boxes.iter().map(|b| b.label.clone()).collect();
    v.sort();
    v.dedup();
    v
}

/// For every token whose top-1 text names an annotated object, the rank
/// change of that text when the object's boxes are masked, and when an
/// equal-area random rectangle is masked instead; averaged per layer.
pub fn rank_change_eval(images: &[AnnotatedImage], bundle: &ModelBundle, vocab: &Vocabulary, opts: &RankChangeOptions) -> Result<RankChangeReport> {
    vocab.check_dim(bundle.manifest.joint_dim)?;
    let layers = all_layers(bundle, &opts.layers)?;
    let mut warnings = Vec::new();
    for label in images.iter().flat_map(|a| labels_of(&a.image.boxes)) {
        if vocab.index_of(&label).is_none() {
            let w = format!("annotated label `{label}` not in vocabulary");
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
    }
    let per_image: Vec<Vec<RankChangeRecord>> = images
        .par_iter()
        .enumerate()
        .map(|(idx, a)| {
            let img = &a.image;
            let trace = forward_full(&preprocess(img, &bundle.manifest)?, bundle, None)?;
            let groups = tokens_by_label(&trace, bundle, vocab, &layers, &labels_of(&img.boxes))?;
            let mut records = Vec::new();
            for (k, (label, tokens)) in groups.iter().enumerate() {
                let boxes: Vec<BoxAnnotation> = img.boxes.iter().filter(|b| &b.label == label).cloned().collect();
                records.extend(rank_change_for_tokens(&a.id, img, tokens, &boxes, MaskCondition::ObjectMask, bundle, vocab, opts.fill)?);
                let random = random_mask_like(&boxes, img.width(), img.height(), derive_seed(opts.seed, &[idx as u64, k as u64]))?;
                records.extend(rank_change_for_tokens(&a.id, img, tokens, &random, MaskCondition::RandomMask, bundle, vocab, opts.fill)?);
            }
            Ok(records)
        })
        .collect::<Result<_>>()?;
    let records: Vec<RankChangeRecord> = per_image.into_iter().flatten().collect();
    if records.is_empty() {
        warnings.push("no token's top-1 interpretation matched an annotated label".into());
    }
    let per_layer = layers
        .iter()
        .map(|&layer| {
            let stat = |c: MaskCondition| {
                let v: Vec<f64> = records
                    .iter()
                    .filter(|r| r.token.layer == layer && r.condition == c)
                    .map(|r| r.rank_change as f64)
                    .collect();
                let mean = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
                (mean, v.len())
            };
            let (object_mean, object_count) = stat(MaskCondition::ObjectMask);
            let (random_mean, random_count) = stat(MaskCondition::RandomMask);
            LayerRankChange {
                layer,
                object_mean,
                object_count,
                random_mean,
                random_count,
            }
        })
        .collect();
    Ok(RankChangeReport { per_layer, records, warnings })
}

#[derive(Clone, Debug)]
pub struct IopOptions {
    pub threshold: f64,
    pub layers: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for IopOptions {
    fn default() -> Self {
        Self {
            threshold: 0.75,
            layers: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerIop {
    pub layer: usize,
    /// Tokens with a non-empty mask.
    pub scored: usize,
    /// Matching tokens whose mask was empty.
    pub excluded: usize,
    pub above: usize,
    pub fraction: f64,
    pub random_above: usize,
    pub random_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IopReport {
    pub threshold: f64,
    pub per_layer: Vec<LayerIop>,
    pub warnings: Vec<String>,
}

/// Per-token result: `(layer, iop against truth, iop against random box)`.
type IopSample = (usize, Option<f64>, Option<f64>);

/// Share of tokens, per layer, whose saliency mask lies inside the boxes of
/// the object their top-1 text names (IOP above the threshold), next to the
/// same share for an equal-area random rectangle.
pub fn iop_coverage(images: &[AnnotatedImage], bundle: &ModelBundle, vocab: &Vocabulary, opts: &IopOptions) -> Result<IopReport> {
    vocab.check_dim(bundle.manifest.joint_dim)?;
    let layers = all_layers(bundle, &opts.layers)?;
    let m = &bundle.manifest;
    let size = m.image_size as u32;
    let per_image: Vec<Vec<IopSample>> = images
        .par_iter()
        .enumerate()
        .map(|(idx, a)| {
            let img = &a.image;
            let geometry = CropGeometry::new(img.width(), img.height(), size);
            let trace = forward_full(&preprocess(img, m)?, bundle, None)?;
            let groups = tokens_by_label(&trace, bundle, vocab, &layers, &labels_of(&img.boxes))?;
            let mut out = Vec::new();
            for (k, (label, tokens)) in groups.iter().enumerate() {
                let truth: Vec<BoxAnnotation> = img
                    .boxes
                    .iter()
                    .filter(|b| &b.label == label)
                    .filter_map(|b| geometry.map_box(b, img.width(), img.height()))
                    .collect();
                let random = random_mask_like(&truth, size, size, derive_seed(opts.seed, &[idx as u64, k as u64]))?;
                for &t in tokens {
                    let map = token_saliency(t, &trace)?;
                    out.push((
                        t.layer,
                        iop(&map.mask, map.grid_size, m.patch_size, &truth),
                        iop(&map.mask, map.grid_size, m.patch_size, &random),
                    ));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let samples: Vec<IopSample> = per_image.into_iter().flatten().collect();
    let mut warnings = Vec::new();
    if samples.is_empty() {
        warnings.push("no token's top-1 interpretation matched an annotated label".into());
    }
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let per_layer = layers
        .iter()
        .map(|&layer| {
            let here: Vec<&IopSample> = samples.iter().filter(|s| s.0 == layer).collect();
            let scored = here.iter().filter(|s| s.1.is_some()).count();
            let above = here.iter().filter(|s| s.1.is_some_and(|v| v > opts.threshold)).count();
            let random_above = here.iter().filter(|s| s.1.is_some() && s.2.is_some_and(|v| v > opts.threshold)).count();
            LayerIop {
                layer,
                scored,
                excluded: here.len() - scored,
                above,
                fraction: frac(above, scored),
                random_above,
                random_fraction: frac(random_above, scored),
            }
        })
        .collect();
    Ok(IopReport {
        threshold: opts.threshold,
        per_layer,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::toy::{make_toy_model, ToyKind, ToySpec};

    fn identity() -> (crate::eval::toy::ToyFixture, Vec<AnnotatedImage>) {
        let fx = make_toy_model(&ToySpec::new(ToyKind::Identity, 4)).unwrap();
        let imgs = fx
            .images
            .iter()
            .map(|i| AnnotatedImage {
                id: i.name.clone(),
                image: i.image.clone(),
            })
            .collect();
        (fx, imgs)
    }

    #[test]
    fn empty_mask_no_rank_change() {
        let (fx, imgs) = identity();
        let tokens: Vec<TokenRef> = (0..17).map(|j| TokenRef::new(2, j)).collect();
        let recs = rank_change_for_tokens("a", &imgs[0].image, &tokens, &[], MaskCondition::ObjectMask, &fx.bundle, &fx.vocab, MaskFill::Mean).unwrap();
        assert!(recs.iter().all(|r| r.rank_change == 0));
    }

    #[test]
    fn object_mask_demotes_random_elsewhere_does_not() {
        let (fx, imgs) = identity();
        let r = rank_change_eval(&imgs, &fx.bundle, &fx.vocab, &RankChangeOptions::default()).unwrap();
        let objects: Vec<_> = r.records.iter().filter(|x| x.condition == MaskCondition::ObjectMask).collect();
        assert!(!objects.is_empty());
        assert!(objects.iter().all(|x| x.post_mask_rank > 1 && x.original_top_text == "apple"));
        // a rectangle off the object's patches leaves every apple token at rank 1
        let img = &imgs[0].image;
        let tokens: Vec<TokenRef> = objects.iter().filter(|x| x.image_id == imgs[0].id).map(|x| x.token).collect();
        let elsewhere = [BoxAnnotation::new("r", 8, 8, 16, 12)];
        let recs = rank_change_for_tokens("a", img, &tokens, &elsewhere, MaskCondition::RandomMask, &fx.bundle, &fx.vocab, MaskFill::Mean).unwrap();
        assert!(recs.iter().all(|x| x.rank_change == 0));
        assert_eq!(r, rank_change_eval(&imgs, &fx.bundle, &fx.vocab, &RankChangeOptions::default()).unwrap());
    }

    #[test]
    fn iop_full_box_and_concentrated_attention() {
        let (fx, mut imgs) = identity();
        let r = iop_coverage(&imgs, &fx.bundle, &fx.vocab, &IopOptions::default()).unwrap();
        for l in &r.per_layer {
            if l.scored > 0 {
                assert_eq!(l.fraction, 1.0);
                assert!(l.random_fraction < 1.0);
            }
        }
        let scored: usize = r.per_layer.iter().map(|l| l.scored).sum();
        assert!(scored > 0);
        for a in &mut imgs {
            a.image.boxes = vec![BoxAnnotation::new("apple", 0, 0, 16, 16)];
        }
        let full = iop_coverage(&imgs, &fx.bundle, &fx.vocab, &IopOptions::default()).unwrap();
        assert!(full.per_layer.iter().filter(|l| l.scored > 0).all(|l| l.fraction == 1.0));
    }

    #[test]
    fn empty_masks_are_excluded() {
        let (fx, mut imgs) = identity();
        // CLS reads as "photo"; its layer-1 saliency row has no patch mass
        for a in &mut imgs {
            let mut boxes = a.image.boxes.clone();
            boxes.push(BoxAnnotation::new("photo", 0, 0, 16, 16));
            a.image.boxes = boxes;
        }
        let r = iop_coverage(&imgs, &fx.bundle, &fx.vocab, &IopOptions { layers: Some(vec![1]), ..IopOptions::default() }).unwrap();
        let l1 = &r.per_layer[0];
        assert_eq!(l1.excluded, imgs.len());
        let trace = forward_full(&preprocess(&imgs[0].image, &fx.bundle.manifest).unwrap(), &fx.bundle, None).unwrap();
        assert_eq!(token_saliency(TokenRef::new(1, 0), &trace).unwrap().mask_count(), 0);
        let apples: usize = imgs
            .iter()
            .map(|a| {
                let t = forward_full(&preprocess(&a.image, &fx.bundle.manifest).unwrap(), &fx.bundle, None).unwrap();
                (1..17).filter(|&j| interpret(TokenRef::new(1, j), &t, &fx.bundle, &fx.vocab, Some(1)).unwrap().ranking[0].text == "apple").count()
            })
            .sum();
        assert_eq!(l1.scored, apples);
        assert_eq!(l1.fraction, l1.above as f64 / l1.scored as f64);
    }
}
