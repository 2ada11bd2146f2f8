// SPDX-License-Identifier: MIT OR Apache-2.0

//! Control-task pipelines: typographic attack repair, entity swapping and
//! spurious-feature removal.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::edit::{build_swap_plan, build_zero_plan, match_tokens, DonorPool, InterventionPlan, MatchOptions, WordList};
use crate::engine::{classify_trace, forward_full, project_to_joint, ActivationTrace, TokenRef};
use crate::error::{Error, Result};
use crate::eval::probe::{train_probe, ProbeConfig};
use crate::interpret::{DriftTable, Smoothing};
use crate::io::bundle::ModelBundle;
use crate::io::vocab::Vocabulary;
use crate::tensor::Tensor;

pub const COND_NONE: &str = "none";
pub const COND_RANDOM: &str = "random";
pub const COND_OURS: &str = "ours";
pub const COND_OURS_RS: &str = "ours+rs";

/// splitmix64 over the parts, for per-item seeds.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Debug)]
pub struct LabeledInput {
    pub id: String,
    pub patches: Tensor,
    pub label: String,
    pub group: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SmoothingConfig {
    pub drift: DriftTable,
    pub samples: usize,
    pub seed: u64,
}

impl SmoothingConfig {
    fn smoothing(&self) -> Smoothing<'_> {
        Smoothing::new(&self.drift, self.samples, self.seed)
    }

    fn describe(&self) -> Value {
        json!({"samples": self.samples, "seed": self.seed, "calibration_set_id": self.drift.calibration_set_id})
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub set: String,
    pub condition: String,
    pub correct: usize,
    pub total: usize,
    /// Accuracy, or flip rate for the entity experiment.
    pub accuracy_pct: f64,
    /// Share of baseline failures fixed by the condition, when any exist.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restored_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupAccuracy>,
    pub mean_replaced_per_layer: BTreeMap<usize, f64>,
}

impl ConditionRow {
    pub fn worst_group(&self) -> Option<&GroupAccuracy> {
        self.groups.iter().min_by(|a, b| a.accuracy_pct.total_cmp(&b.accuracy_pct).then_with(|| a.group.cmp(&b.group)))
    }

    pub fn mean_replaced(&self) -> f64 {
        self.mean_replaced_per_layer.values().fold(0.0, |a, b| a + b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub rows: Vec<ConditionRow>,
    pub config: BTreeMap<String, Value>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn row(&self, set: &str, condition: &str) -> Option<&ConditionRow> {
        self.rows.iter().find(|r| r.set == set && r.condition == condition)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One line per (set, condition, group); the group `all` carries the
    /// condition totals.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(["experiment", "set", "condition", "group", "correct", "total", "accuracy_pct", "mean_replaced"])
            .map_err(csv_err)?;
        for r in &self.rows {
            let replaced = format!("{:.4}", r.mean_replaced());
            w.write_record([
                self.experiment.as_str(),
                &r.set,
                &r.condition,
                "all",
                &r.correct.to_string(),
                &r.total.to_string(),
                &format!("{:.4}", r.accuracy_pct),
                &replaced,
            ])
            .map_err(csv_err)?;
            for g in &r.groups {
                w.write_record([
                    self.experiment.as_str(),
                    &r.set,
                    &r.condition,
                    &g.group,
                    &g.correct.to_string(),
                    &g.total.to_string(),
                    &format!("{:.4}", g.accuracy_pct),
                    &replaced,
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        Ok(())
    }
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

/// Per-image outcome of one condition.
#[derive(Clone, Debug)]
struct Outcome {
    hit: bool,
    group: Option<String>,
    baseline_hit: bool,
    replaced: BTreeMap<usize, usize>,
}

fn summarize(set: &str, condition: &str, outcomes: &[Outcome], with_groups: bool) -> ConditionRow {
    let total = outcomes.len();
    let correct = outcomes.iter().filter(|o| o.hit).count();
    let failures = outcomes.iter().filter(|o| !o.baseline_hit).count();
    let restored = outcomes.iter().filter(|o| !o.baseline_hit && o.hit).count();
    let mut layers: BTreeMap<usize, f64> = BTreeMap::new();
    for o in outcomes {
        for (&l, &c) in &o.replaced {
            *layers.entry(l).or_default() += c as f64;
        }
    }
    layers.values_mut().for_each(|v| *v /= total.max(1) as f64);
    let mut groups = Vec::new();
    if with_groups {
        let mut by: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for o in outcomes {
            let e = by.entry(o.group.clone().unwrap_or_else(|| "ungrouped".into())).or_default();
            e.0 += usize::from(o.hit);
            e.1 += 1;
        }
        groups = by
            .into_iter()
            .map(|(group, (c, t))| GroupAccuracy {
                group,
                correct: c,
                total: t,
                accuracy_pct: pct(c, t),
            })
            .collect();
    }
    ConditionRow {
        set: set.into(),
        condition: condition.into(),
        correct,
        total,
        accuracy_pct: pct(correct, total),
        restored_pct: (failures > 0).then(|| pct(restored, failures)),
        groups,
        mean_replaced_per_layer: layers,
    }
}

fn default_layers(bundle: &ModelBundle, layers: &Option<Vec<usize>>) -> Vec<usize> {
    layers.clone().unwrap_or_else(|| (1..=bundle.manifest.num_layers).collect())
}

/// Zero plan with the same per-layer counts as `guided`, positions drawn
/// uniformly among non-CLS tokens.
pub fn random_zero_plan(guided: &InterventionPlan, seq_len: usize, seed: u64) -> InterventionPlan {
    let tokens = random_positions(guided.replaced_per_layer(), seq_len, seed);
    build_zero_plan(&tokens)
}

fn random_positions(counts: &BTreeMap<usize, usize>, seq_len: usize, seed: u64) -> Vec<TokenRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (&layer, &count) in counts {
        let n = count.min(seq_len - 1);
        for p in sample(&mut rng, seq_len - 1, n) {
            out.push(TokenRef::new(layer, p + 1));
        }
    }
    out
}

fn top1(trace: &ActivationTrace, bundle: &ModelBundle, classes: &Vocabulary) -> Result<String> {
    Ok(classify_trace(trace, bundle, classes)?[0].text.clone())
}

fn check_wordlist(list: &WordList, vocab: &Vocabulary) -> Result<Vec<String>> {
    let missing = list.missing_from(vocab);
    if missing.len() == list.words.len() {
        return Err(Error::Compatibility(format!("word list `{}` shares no words with vocabulary `{}`", list.id, vocab.id())));
    }
    Ok(if missing.is_empty() {
        Vec::new()
    } else {
        vec![format!("{} words of `{}` not in vocabulary `{}`", missing.len(), list.id, vocab.id())]
    })
}

#[derive(Clone, Debug)]
pub struct AttackOptions {
    /// Layers searched for matching tokens; all blocks when unset.
    pub layers: Option<Vec<usize>>,
    pub skip_cls: bool,
    pub seed: u64,
    pub smoothing: Option<SmoothingConfig>,
}

impl Default for AttackOptions {
    fn default() -> Self {
        Self {
            layers: None,
            skip_cls: true,
            seed: 0,
            smoothing: None,
        }
    }
}

/// Accuracy on clean and attacked images without intervention, with random
/// zeroing, with word-list zeroing and with smoothed word-list zeroing.
#[allow(clippy::too_many_arguments)]
pub fn typographical_experiment(
    clean: &[LabeledInput],
    attacked: &[LabeledInput],
    wordlist: &WordList,
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    class_vocab: &Vocabulary,
    opts: &AttackOptions,
) -> Result<ExperimentReport> {
    let mut warnings = check_wordlist(wordlist, vocab)?;
    let layers = default_layers(bundle, &opts.layers);
    let n = bundle.manifest.seq_len();
    let mut rows = Vec::new();
    for (set_idx, (set, inputs)) in [("clean", clean), ("attacked", attacked)].into_iter().enumerate() {
        let per_image: Vec<Vec<Outcome>> = inputs
            .par_iter()
            .enumerate()
            .map(|(idx, input)| {
                let trace = forward_full(&input.patches, bundle, None)?;
                let base = top1(&trace, bundle, class_vocab)? == input.label;
                let outcome = |plan: &InterventionPlan| -> Result<Outcome> {
                    let t = forward_full(&input.patches, bundle, Some(plan))?;
                    Ok(Outcome {
                        hit: top1(&t, bundle, class_vocab)? == input.label,
                        group: input.group.clone(),
                        baseline_hit: base,
                        replaced: plan.replaced_per_layer().clone(),
                    })
                };
                let mut outs = vec![Outcome {
                    hit: base,
                    group: input.group.clone(),
                    baseline_hit: base,
                    replaced: BTreeMap::new(),
                }];
                let mopts = MatchOptions {
                    skip_cls: opts.skip_cls,
                    ..MatchOptions::default()
                };
                let guided = build_zero_plan(&match_tokens(&trace, bundle, vocab, wordlist, &layers, &mopts)?.tokens);
                let random = random_zero_plan(&guided, n, derive_seed(opts.seed, &[set_idx as u64, idx as u64]));
                outs.push(outcome(&random)?);
                outs.push(outcome(&guided)?);
                if let Some(sc) = &opts.smoothing {
                    let mopts = MatchOptions {
                        skip_cls: opts.skip_cls,
                        smoothing: Some(sc.smoothing()),
                        ..MatchOptions::default()
                    };
                    let rs = build_zero_plan(&match_tokens(&trace, bundle, vocab, wordlist, &layers, &mopts)?.tokens);
                    outs.push(outcome(&rs)?);
                }
                Ok(outs)
            })
            .collect::<Result<_>>()?;
        let mut conds = vec![COND_NONE, COND_RANDOM, COND_OURS];
        if opts.smoothing.is_some() {
            conds.push(COND_OURS_RS);
        }
        for (c, name) in conds.iter().enumerate() {
            let col: Vec<Outcome> = per_image.iter().map(|o| o[c].clone()).collect();
            rows.push(summarize(set, name, &col, false));
        }
    }
    if clean.is_empty() && attacked.is_empty() {
        warnings.push("no images".into());
    }
    let mut config = BTreeMap::new();
    config.insert("wordlist".into(), json!(wordlist.id));
    config.insert("vocab_id".into(), json!(vocab.id()));
    config.insert("class_vocab_id".into(), json!(class_vocab.id()));
    config.insert("bundle_id".into(), json!(bundle.id()));
    config.insert("layers".into(), json!(layers));
    config.insert("skip_cls".into(), json!(opts.skip_cls));
    config.insert("seed".into(), json!(opts.seed));
    config.insert("smoothing".into(), opts.smoothing.as_ref().map_or(Value::Null, SmoothingConfig::describe));
    Ok(ExperimentReport {
        experiment: "typographic".into(),
        rows,
        config,
        warnings,
    })
}

#[derive(Clone, Debug)]
pub struct EntityOptions {
    pub layers: Option<Vec<usize>>,
    pub skip_cls: bool,
    pub seed: u64,
    pub smoothing: Option<SmoothingConfig>,
    /// Class a successful swap should produce.
    pub target_label: String,
}

impl EntityOptions {
    pub fn new(target_label: impl Into<String>) -> Self {
        Self {
            layers: None,
            skip_cls: true,
            seed: 0,
            smoothing: None,
            target_label: target_label.into(),
        }
    }
}

/// Swaps source-concept tokens for donor-concept tokens of the same layer
/// and reports how often the class flips to the target label.
#[allow(clippy::too_many_arguments)]
pub fn entity_intervention_experiment(
    sources: &[LabeledInput],
    donors: &[LabeledInput],
    source_words: &WordList,
    donor_words: &WordList,
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    class_vocab: &Vocabulary,
    opts: &EntityOptions,
) -> Result<ExperimentReport> {
    let mut warnings = check_wordlist(source_words, vocab)?;
    warnings.extend(check_wordlist(donor_words, vocab)?);
    if class_vocab.index_of(&opts.target_label).is_none() {
        return Err(Error::Input(format!("target label `{}` not in class vocabulary", opts.target_label)));
    }
    let layers = default_layers(bundle, &opts.layers);
    let n = bundle.manifest.seq_len();
    let smoothing = opts.smoothing.as_ref().map(SmoothingConfig::smoothing);
    let plain = MatchOptions {
        skip_cls: opts.skip_cls,
        ..MatchOptions::default()
    };
    let smoothed = MatchOptions {
        skip_cls: opts.skip_cls,
        smoothing,
        ..MatchOptions::default()
    };

    let harvest = |mopts: &MatchOptions<'_>| -> Result<DonorPool> {
        let found: Vec<(ActivationTrace, Vec<TokenRef>)> = donors
            .par_iter()
            .map(|d| {
                let trace = forward_full(&d.patches, bundle, None)?;
                let tokens = match_tokens(&trace, bundle, vocab, donor_words, &layers, mopts)?.tokens;
                Ok((trace, tokens))
            })
            .collect::<Result<_>>()?;
        let mut pool = DonorPool::default();
        for ((trace, tokens), d) in found.iter().zip(donors) {
            pool.harvest(trace, tokens, &d.id);
        }
        Ok(pool)
    };
    let pool = harvest(&plain)?;
    let rs_pool = if opts.smoothing.is_some() { Some(harvest(&smoothed)?) } else { None };
    if pool.is_empty() {
        warnings.push("no donor tokens matched the donor word list".into());
    }

    let per_image: Vec<(Vec<Outcome>, Vec<String>)> = sources
        .par_iter()
        .enumerate()
        .map(|(idx, input)| {
            let trace = forward_full(&input.patches, bundle, None)?;
            let before = top1(&trace, bundle, class_vocab)?;
            let base = before == opts.target_label;
            let mut notes = Vec::new();
            let seed = derive_seed(opts.seed, &[idx as u64]);
            let outcome = |plan: &InterventionPlan| -> Result<Outcome> {
                let t = forward_full(&input.patches, bundle, Some(plan))?;
                let after = top1(&t, bundle, class_vocab)?;
                Ok(Outcome {
                    hit: after == opts.target_label && !base,
                    group: input.group.clone(),
                    baseline_hit: true,
                    replaced: plan.replaced_per_layer().clone(),
                })
            };
            let mut outs = vec![Outcome {
                hit: false,
                group: input.group.clone(),
                baseline_hit: true,
                replaced: BTreeMap::new(),
            }];
            let targets = match_tokens(&trace, bundle, vocab, source_words, &layers, &plain)?.tokens;
            let swap = build_swap_plan(&targets, &pool, seed);
            notes.extend(swap.warnings);
            let rand_targets = random_positions(swap.plan.replaced_per_layer(), n, derive_seed(seed, &[1]));
            let random = build_swap_plan(&rand_targets, &pool, derive_seed(seed, &[2]));
            outs.push(outcome(&random.plan)?);
            outs.push(outcome(&swap.plan)?);
            if let Some(rs_pool) = &rs_pool {
                let targets = match_tokens(&trace, bundle, vocab, source_words, &layers, &smoothed)?.tokens;
                let swap = build_swap_plan(&targets, rs_pool, seed);
                notes.extend(swap.warnings);
                outs.push(outcome(&swap.plan)?);
            }
            Ok((outs, notes))
        })
        .collect::<Result<_>>()?;
    let mut conds = vec![COND_NONE, COND_RANDOM, COND_OURS];
    if opts.smoothing.is_some() {
        conds.push(COND_OURS_RS);
    }
    let rows = conds
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let col: Vec<Outcome> = per_image.iter().map(|(o, _)| o[c].clone()).collect();
            summarize("source", name, &col, false)
        })
        .collect();
    let unmatched: usize = per_image.iter().map(|(_, w)| w.len()).sum();
    if unmatched > 0 {
        warnings.push(format!("{unmatched} target tokens had no same-layer donor"));
    }
    let mut config = BTreeMap::new();
    config.insert("metric".into(), json!("flip_rate"));
    config.insert("target_label".into(), json!(opts.target_label));
    config.insert("source_wordlist".into(), json!(source_words.id));
    config.insert("donor_wordlist".into(), json!(donor_words.id));
    config.insert("donor_images".into(), json!(donors.iter().map(|d| d.id.as_str()).collect::<Vec<_>>()));
    config.insert("vocab_id".into(), json!(vocab.id()));
    config.insert("class_vocab_id".into(), json!(class_vocab.id()));
    config.insert("bundle_id".into(), json!(bundle.id()));
    config.insert("layers".into(), json!(layers));
    config.insert("skip_cls".into(), json!(opts.skip_cls));
    config.insert("seed".into(), json!(opts.seed));
    config.insert("smoothing".into(), opts.smoothing.as_ref().map_or(Value::Null, SmoothingConfig::describe));
    Ok(ExperimentReport {
        experiment: "entity".into(),
        rows,
        config,
        warnings,
    })
}

#[derive(Clone, Debug)]
pub struct DebiasOptions {
    /// Layer searched for tokens to keep; the last block when unset.
    pub layer: Option<usize>,
    pub skip_cls: bool,
    pub probe: ProbeConfig,
    pub smoothing: Option<SmoothingConfig>,
}

impl Default for DebiasOptions {
    fn default() -> Self {
        Self {
            layer: None,
            skip_cls: true,
            probe: ProbeConfig::default(),
            smoothing: None,
        }
    }
}

/// Normalized joint-space CLS embedding of the final state.
pub fn cls_embedding(trace: &ActivationTrace, bundle: &ModelBundle) -> Result<Vec<f32>> {
    project_to_joint(trace.states.last().expect("trace has states").row(0), bundle)
}

/// Embeddings of every input, with the word-list plan applied when a
/// match option is given; also returns per-image replacement counts.
fn debias_embeddings(
    inputs: &[LabeledInput],
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    wordlist: &WordList,
    layer: usize,
    mopts: Option<&MatchOptions<'_>>,
) -> Result<Vec<(Vec<f32>, BTreeMap<usize, usize>)>> {
    inputs
        .par_iter()
        .map(|input| {
            let trace = forward_full(&input.patches, bundle, None)?;
            let Some(mopts) = mopts else {
                return Ok((cls_embedding(&trace, bundle)?, BTreeMap::new()));
            };
            let plan = build_zero_plan(&match_tokens(&trace, bundle, vocab, wordlist, &[layer], mopts)?.tokens);
            let t = forward_full(&input.patches, bundle, Some(&plan))?;
            Ok((cls_embedding(&t, bundle)?, plan.replaced_per_layer().clone()))
        })
        .collect()
}

/// Trains a linear probe on un-edited embeddings and on embeddings edited
/// with the word list at one layer, reporting per-group test accuracy.
pub fn debias_experiment(
    train: &[LabeledInput],
    test: &[LabeledInput],
    wordlist: &WordList,
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    opts: &DebiasOptions,
) -> Result<ExperimentReport> {
    let warnings = check_wordlist(wordlist, vocab)?;
    let layer = opts.layer.unwrap_or(bundle.manifest.num_layers);
    if layer == 0 || layer > bundle.manifest.num_layers + 1 {
        return Err(Error::Input(format!("layer {layer} outside 1..={}", bundle.manifest.num_layers + 1)));
    }
    let classes: Vec<String> = train.iter().map(|s| s.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let class_of = |label: &str| -> Result<usize> {
        classes
            .binary_search_by(|c| c.as_str().cmp(label))
            .map_err(|_| Error::Input(format!("test label `{label}` absent from training labels")))
    };
    let ytrain: Vec<usize> = train.iter().map(|s| class_of(&s.label)).collect::<Result<_>>()?;
    let ytest: Vec<usize> = test.iter().map(|s| class_of(&s.label)).collect::<Result<_>>()?;

    let plain = MatchOptions {
        skip_cls: opts.skip_cls,
        ..MatchOptions::default()
    };
    let smoothed = opts.smoothing.as_ref().map(|sc| MatchOptions {
        skip_cls: opts.skip_cls,
        smoothing: Some(sc.smoothing()),
        ..MatchOptions::default()
    });
    let mut conditions: Vec<(&str, Option<&MatchOptions<'_>>)> = vec![(COND_NONE, None), (COND_OURS, Some(&plain))];
    if let Some(s) = &smoothed {
        conditions.push((COND_OURS_RS, Some(s)));
    }
    let mut rows = Vec::new();
    let mut warnings = warnings;
    for (name, mopts) in conditions {
        let tr = debias_embeddings(train, bundle, vocab, wordlist, layer, mopts)?;
        let te = debias_embeddings(test, bundle, vocab, wordlist, layer, mopts)?;
        let xs: Vec<Vec<f32>> = tr.into_iter().map(|(e, _)| e).collect();
        let training = train_probe(&xs, &ytrain, classes.len(), &opts.probe)?;
        warnings.extend(training.warnings.iter().map(|w| format!("{name}: {w}")));
        let outcomes: Vec<Outcome> = te
            .iter()
            .zip(test)
            .zip(&ytest)
            .map(|(((e, replaced), s), &y)| Outcome {
                hit: training.model.predict(e) == y,
                group: s.group.clone(),
                baseline_hit: true,
                replaced: replaced.clone(),
            })
            .collect();
        rows.push(summarize("test", name, &outcomes, true));
    }
    let mut config = BTreeMap::new();
    config.insert("wordlist".into(), json!(wordlist.id));
    config.insert("vocab_id".into(), json!(vocab.id()));
    config.insert("bundle_id".into(), json!(bundle.id()));
    config.insert("layer".into(), json!(layer));
    config.insert("skip_cls".into(), json!(opts.skip_cls));
    config.insert("classes".into(), json!(classes));
    config.insert("probe".into(), serde_json::to_value(&opts.probe)?);
    config.insert("weighting".into(), json!("group_size"));
    config.insert("train_size".into(), json!(train.len()));
    config.insert("smoothing".into(), opts.smoothing.as_ref().map_or(Value::Null, SmoothingConfig::describe));
    Ok(ExperimentReport {
        experiment: "debias".into(),
        rows,
        config,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::toy::{make_toy_model, ImageRole, ToyFixture, ToyKind, ToySpec};
    use crate::io::image::preprocess;

    pub(crate) fn inputs(fx: &ToyFixture, role: ImageRole) -> Vec<LabeledInput> {
        fx.images_with_role(role)
            .map(|i| LabeledInput {
                id: i.name.clone(),
                patches: preprocess(&i.image, &fx.bundle.manifest).unwrap(),
                label: i.label.clone().unwrap_or_default(),
                group: i.group.clone(),
            })
            .collect()
    }

    #[test]
    fn attack_report_shape_and_determinism() {
        let fx = make_toy_model(&ToySpec::new(ToyKind::PlantedAttack, 11)).unwrap();
        let cv = fx.class_vocab.as_ref().unwrap();
        let run = || {
            typographical_experiment(
                &inputs(&fx, ImageRole::Clean),
                &inputs(&fx, ImageRole::Attacked),
                fx.wordlist("typographic").unwrap(),
                &fx.bundle,
                &fx.vocab,
                cv,
                &AttackOptions::default(),
            )
            .unwrap()
        };
        let r = run();
        assert_eq!(r, run());
        assert_eq!(r.row("clean", COND_NONE).unwrap().accuracy_pct, 100.0);
        assert_eq!(r.row("attacked", COND_NONE).unwrap().accuracy_pct, 0.0);
        assert_eq!(r.row("attacked", COND_OURS).unwrap().accuracy_pct, 100.0);
        assert_eq!(r.row("attacked", COND_OURS).unwrap().restored_pct, Some(100.0));
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 6);
    }

    #[test]
    fn entity_swap_flips_and_self_swap_does_not() {
        let fx = make_toy_model(&ToySpec::new(ToyKind::TwoConcept, 2)).unwrap();
        let cv = fx.class_vocab.as_ref().unwrap();
        let src = inputs(&fx, ImageRole::Source);
        let don = inputs(&fx, ImageRole::Donor);
        let car = fx.wordlist("car").unwrap();
        let plane = fx.wordlist("airplane").unwrap();
        let r = entity_intervention_experiment(&src, &don, car, plane, &fx.bundle, &fx.vocab, cv, &EntityOptions::new("airport")).unwrap();
        assert_eq!(r.row("source", COND_OURS).unwrap().accuracy_pct, 100.0);
        let same = entity_intervention_experiment(&src, &src, car, car, &fx.bundle, &fx.vocab, cv, &EntityOptions::new("airport")).unwrap();
        assert_eq!(same.row("source", COND_OURS).unwrap().accuracy_pct, 0.0);
    }

    #[test]
    fn debias_groups_recombine() {
        let fx = make_toy_model(&ToySpec::new(ToyKind::Spurious, 0)).unwrap();
        let r = debias_experiment(
            &inputs(&fx, ImageRole::Train),
            &inputs(&fx, ImageRole::Test),
            fx.wordlist("hair").unwrap(),
            &fx.bundle,
            &fx.vocab,
            &DebiasOptions::default(),
        )
        .unwrap();
        for row in &r.rows {
            let c: usize = row.groups.iter().map(|g| g.correct).sum();
            let t: usize = row.groups.iter().map(|g| g.total).sum();
            assert_eq!((c, t), (row.correct, row.total));
        }
        let base = r.row("test", COND_NONE).unwrap().worst_group().unwrap().accuracy_pct;
        let ours = r.row("test", COND_OURS).unwrap().worst_group().unwrap().accuracy_pct;
        eprintln!("{}", r.to_json().unwrap());
        assert!(ours > base, "worst group {base} -> {ours}");
    }

    #[test]
    fn empty_match_debias_equals_baseline() {
        let fx = make_toy_model(&ToySpec::new(ToyKind::Spurious, 1)).unwrap();
        // every interpretation is on this list, so keep-matching replaces nothing
        let all = WordList::new("all", fx.vocab.texts().to_vec(), crate::edit::MatchMode::KeepMatching).unwrap();
        let train: Vec<_> = inputs(&fx, ImageRole::Train).into_iter().take(64).collect();
        let test = inputs(&fx, ImageRole::Test);
        let r = debias_experiment(&train, &test, &all, &fx.bundle, &fx.vocab, &DebiasOptions::default()).unwrap();
        let (a, b) = (r.row("test", COND_NONE).unwrap(), r.row("test", COND_OURS).unwrap());
        assert_eq!(a.groups, b.groups);
        assert_eq!(b.mean_replaced(), 0.0);
    }

    #[test]
    fn random_plan_matches_counts() {
        let guided = build_zero_plan(&[TokenRef::new(1, 3), TokenRef::new(1, 5), TokenRef::new(2, 0)]);
        let r = random_zero_plan(&guided, 17, 4);
        assert_eq!(r.replaced_per_layer(), guided.replaced_per_layer());
        assert!(r.replacements().iter().all(|x| x.position >= 1));
        assert_eq!(r, random_zero_plan(&guided, 17, 4));
    }
}
