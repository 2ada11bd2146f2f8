// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interpretation-guided interventions: select latent tokens whose
//! interpretation falls in (or outside) a word list, then zero them or swap
//! in same-layer tokens harvested from donor images.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{classify_trace, forward_full, ActivationTrace, RankedText, TokenRef};
use crate::error::{Error, Result};
use crate::interpret::{interpret_with, Smoothing};
use crate::io::bundle::ModelBundle;
use crate::io::vocab::Vocabulary;
use crate::tensor::Tensor;

/// Replacement payload: the zero vector or an explicit `D`-vector.
#[derive(Clone, Debug, PartialEq)]
pub enum ReplacementValue {
    Zero,
    Vector(Vec<f32>),
}

impl ReplacementValue {
    /// `None` for [`ReplacementValue::Zero`].
    pub fn as_slice(&self) -> Option<&[f32]> {
        match self {
            ReplacementValue::Zero => None,
            ReplacementValue::Vector(v) => Some(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ReplacementJson", into = "ReplacementJson")]
pub struct Replacement {
    pub layer: usize,
    pub position: usize,
    pub value: ReplacementValue,
}

impl Replacement {
    pub fn zero(layer: usize, position: usize) -> Self {
        Self {
            layer,
            position,
            value: ReplacementValue::Zero,
        }
    }

    pub fn vector(layer: usize, position: usize, value: Vec<f32>) -> Self {
        Self {
            layer,
            position,
            value: ReplacementValue::Vector(value),
        }
    }

    pub fn token(&self) -> TokenRef {
        TokenRef::new(self.layer, self.position)
    }
}

/// Wire form: `value` is `"zero"` or base64 of little-endian `f32`s.
#[derive(Serialize, Deserialize)]
struct ReplacementJson {
    layer: usize,
    position: usize,
    value: String,
}

impl From<Replacement> for ReplacementJson {
    fn from(r: Replacement) -> Self {
        let value = match &r.value {
            ReplacementValue::Zero => "zero".to_string(),
            ReplacementValue::Vector(v) => {
                let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                B64.encode(bytes)
            }
        };
        Self {
            layer: r.layer,
            position: r.position,
            value,
        }
    }
}

impl TryFrom<ReplacementJson> for Replacement {
    type Error = String;

    fn try_from(j: ReplacementJson) -> std::result::Result<Self, String> {
        if j.value == "zero" {
            return Ok(Replacement::zero(j.layer, j.position));
        }
        let bytes = B64.decode(j.value.as_bytes()).map_err(|e| format!("bad base64 value: {e}"))?;
        if bytes.len() % 4 != 0 {
            return Err("replacement value is not a whole number of f32s".into());
        }
        let v = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Replacement::vector(j.layer, j.position, v))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub rule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wordlist_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor_image_id: Option<String>,
}

/// Per-layer token replacements applied to block inputs during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawPlan")]
pub struct InterventionPlan {
    replacements: Vec<Replacement>,
    #[serde(default)]
    pub provenance: Provenance,
    /// Replacements per layer; recomputed on construction and ignored on input.
    #[serde(default)]
    stats: BTreeMap<usize, usize>,
}

#[derive(Deserialize)]
struct RawPlan {
    replacements: Vec<Replacement>,
    #[serde(default)]
    provenance: Provenance,
}

impl From<RawPlan> for InterventionPlan {
    fn from(raw: RawPlan) -> Self {
        InterventionPlan::from_replacements(raw.replacements).with_provenance(raw.provenance)
    }
}

impl InterventionPlan {
    /// Sorts by `(layer, position)` and keeps the first replacement of any
    /// duplicated address.
    pub fn from_replacements(replacements: Vec<Replacement>) -> Self {
        let mut seen = HashSet::new();
        let mut kept: Vec<Replacement> = replacements.into_iter().filter(|r| seen.insert(r.token())).collect();
        kept.sort_by_key(|r| r.token());
        let mut plan = Self {
            replacements: kept,
            provenance: Provenance::default(),
            stats: BTreeMap::new(),
        };
        plan.refresh_stats();
        plan
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    fn refresh_stats(&mut self) {
        self.stats.clear();
        for r in &self.replacements {
            *self.stats.entry(r.layer).or_default() += 1;
        }
    }

    pub fn replacements(&self) -> &[Replacement] {
        &self.replacements
    }

    pub fn is_empty(&self) -> bool {
        self.replacements.is_empty()
    }

    pub fn len(&self) -> usize {
        self.replacements.len()
    }

    /// Number of replaced tokens per layer.
    pub fn replaced_per_layer(&self) -> &BTreeMap<usize, usize> {
        &self.stats
    }

    /// Union with another plan; on a shared address `self` wins.
    pub fn merged(&self, other: &InterventionPlan) -> InterventionPlan {
        let all = self.replacements.iter().chain(&other.replacements).cloned().collect();
        InterventionPlan::from_replacements(all).with_provenance(self.provenance.clone())
    }

    pub fn validate(&self, bundle: &ModelBundle) -> Result<()> {
        let d = bundle.manifest.hidden_dim;
        let mut seen = HashSet::new();
        for r in &self.replacements {
            r.token().validate(bundle)?;
            if !seen.insert(r.token()) {
                return Err(Error::Input(format!("duplicate replacement at ({}, {})", r.layer, r.position)));
            }
            if let Some(v) = r.value.as_slice() {
                if v.len() != d {
                    return Err(Error::Compatibility(format!(
                        "replacement at ({}, {}) has dim {}, model dim is {d}",
                        r.layer,
                        r.position,
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Input("non-finite replacement value".into()));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Select tokens whose interpretation is in the list.
    #[default]
    #[serde(alias = "remove", alias = "remove-matching")]
    RemoveMatching,
    /// Select tokens whose interpretation is outside the list.
    #[serde(alias = "keep", alias = "keep-matching")]
    KeepMatching,
}

impl MatchMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "remove" | "remove_matching" | "remove-matching" => Ok(Self::RemoveMatching),
            "keep" | "keep_matching" | "keep-matching" => Ok(Self::KeepMatching),
            other => Err(Error::Input(format!("unknown match mode `{other}`"))),
        }
    }
}

/// Word lists shipped with the crate, one phrase per line.
pub const BUILTIN_WORDLISTS: [(&str, &str); 5] = [
    ("typographic", include_str!("../data/wordlists/typographic.txt")),
    ("airplane", include_str!("../data/wordlists/airplane.txt")),
    ("car", include_str!("../data/wordlists/car.txt")),
    ("hair", include_str!("../data/wordlists/hair.txt")),
    ("gender", include_str!("../data/wordlists/gender.txt")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordList {
    pub id: String,
    pub words: Vec<String>,
    #[serde(default)]
    pub mode: MatchMode,
}

impl WordList {
    pub fn new(id: impl Into<String>, words: Vec<String>, mode: MatchMode) -> Result<Self> {
        let id = id.into();
        if words.is_empty() {
            return Err(Error::Input(format!("word list `{id}` is empty")));
        }
        Ok(Self { id, words, mode })
    }

    /// Parses one phrase per line; blank lines are skipped.
    pub fn parse(id: impl Into<String>, text: &str, mode: MatchMode) -> Result<Self> {
        let words = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        Self::new(id, words, mode)
    }

    pub fn load(path: &Path, mode: MatchMode) -> Result<Self> {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "wordlist".into());
        Self::parse(id, &std::fs::read_to_string(path)?, mode)
    }

    pub fn builtin(name: &str, mode: MatchMode) -> Result<Self> {
        let (_, text) = BUILTIN_WORDLISTS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::NotFound(format!("no built-in word list `{name}`")))?;
        Self::parse(name, text, mode)
    }

    pub fn contains(&self, text: &str) -> bool {
        self.words.iter().any(|w| w == text)
    }

    /// Words absent from `vocab`; each one is also logged as a warning.
    pub fn missing_from(&self, vocab: &Vocabulary) -> Vec<String> {
        let present: HashSet<&str> = vocab.texts().iter().map(String::as_str).collect();
        let mut seen = HashSet::new();
        let missing: Vec<String> = self
            .words
            .iter()
            .filter(|w| !present.contains(w.as_str()) && seen.insert(w.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            log::warn!("word list `{}`: {} words not in vocabulary `{}`", self.id, missing.len(), vocab.id());
        }
        missing
    }
}

#[derive(Clone, Debug)]
pub struct MatchOptions<'a> {
    /// A token matches when any of its top-k texts is in the list.
    pub top_k_membership: usize,
    pub skip_cls: bool,
    pub smoothing: Option<Smoothing<'a>>,
}

impl Default for MatchOptions<'_> {
    fn default() -> Self {
        Self {
            top_k_membership: 1,
            skip_cls: false,
            smoothing: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenMatches {
    pub tokens: Vec<TokenRef>,
    pub warnings: Vec<String>,
}

/// Tokens of `layers` whose interpretation is in the word list (or outside
/// it, for keep-matching lists), ordered by layer then position.
pub fn match_tokens(
    trace: &ActivationTrace,
    bundle: &ModelBundle,
    vocab: &Vocabulary,
    wordlist: &WordList,
    layers: &[usize],
    opts: &MatchOptions<'_>,
) -> Result<TokenMatches> {
    if vocab.is_empty() {
        return Err(Error::Input("empty vocabulary".into()));
    }
    if opts.top_k_membership == 0 {
        return Err(Error::Input("top_k_membership must be at least 1".into()));
    }
    let l = bundle.manifest.num_layers;
    if let Some(bad) = layers.iter().find(|&&i| i == 0 || i > l + 1) {
        return Err(Error::Input(format!("layer {bad} outside 1..={}", l + 1)));
    }
    let mut warnings = Vec::new();
    let missing = wordlist.missing_from(vocab);
    if missing.len() == wordlist.words.len() {
        warnings.push(format!("word list `{}` shares no words with vocabulary `{}`", wordlist.id, vocab.id()));
    } else if !missing.is_empty() {
        warnings.push(format!("{} words of `{}` not in vocabulary: {}", missing.len(), wordlist.id, missing.join(", ")));
    }

    let layer_set: BTreeSet<usize> = layers.iter().copied().collect();
    let start = usize::from(opts.skip_cls);
    let candidates: Vec<TokenRef> = layer_set
        .iter()
        .flat_map(|&i| (start..bundle.manifest.seq_len()).map(move |j| TokenRef::new(i, j)))
        .collect();
    let flags = candidates
        .par_iter()
        .map(|&t| {
            let interp = interpret_with(t, trace, bundle, vocab, Some(opts.top_k_membership), opts.smoothing.as_ref())?;
            let hit = interp.ranking.iter().any(|r| wordlist.contains(&r.text));
            Ok(match wordlist.mode {
                MatchMode::RemoveMatching => hit,
                MatchMode::KeepMatching => !hit,
            })
        })
        .collect::<Result<Vec<bool>>>()?;
    let tokens = candidates.into_iter().zip(flags).filter(|(_, f)| *f).map(|(t, _)| t).collect();
    Ok(TokenMatches { tokens, warnings })
}

/// Every token replaced by the zero vector at its block input.
pub fn build_zero_plan(tokens: &[TokenRef]) -> InterventionPlan {
    InterventionPlan::from_replacements(tokens.iter().map(|t| Replacement::zero(t.layer, t.position)).collect())
        .with_provenance(Provenance {
            rule: "zero".into(),
            ..Provenance::default()
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DonorToken {
    pub image_id: String,
    pub position: usize,
    pub value: Vec<f32>,
}

/// Donor token values grouped by layer, harvested from one or more traces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DonorPool {
    by_layer: BTreeMap<usize, Vec<DonorToken>>,
}

impl DonorPool {
    pub fn harvest(&mut self, trace: &ActivationTrace, tokens: &[TokenRef], image_id: &str) {
        for t in tokens {
            self.by_layer.entry(t.layer).or_default().push(DonorToken {
                image_id: image_id.to_string(),
                position: t.position,
                value: trace.token(*t).to_vec(),
            });
        }
    }

    pub fn layer(&self, layer: usize) -> &[DonorToken] {
        self.by_layer.get(&layer).map_or(&[], Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.by_layer.values().all(Vec::is_empty)
    }

    pub fn image_ids(&self) -> BTreeSet<&str> {
        self.by_layer.values().flatten().map(|d| d.image_id.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwapPlan {
    pub plan: InterventionPlan,
    pub warnings: Vec<String>,
}

/// Each target `(k, j)` receives the block-input value of a donor token drawn
/// uniformly (seeded) from the donors of the same layer `k`. Targets without
/// a same-layer donor are left alone and reported.
pub fn build_swap_plan(targets: &[TokenRef], donors: &DonorPool, seed: u64) -> SwapPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted: Vec<TokenRef> = targets.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut replacements = Vec::new();
    let mut warnings = Vec::new();
    for t in sorted {
        let pool = donors.layer(t.layer);
        if pool.is_empty() {
            warnings.push(format!("no donor token at layer {} for target ({}, {})", t.layer, t.layer, t.position));
            continue;
        }
        let pick = if pool.len() == 1 { 0 } else { rng.random_range(0..pool.len()) };
        replacements.push(Replacement::vector(t.layer, t.position, pool[pick].value.clone()));
    }
    let ids = donors.image_ids();
    let plan = InterventionPlan::from_replacements(replacements).with_provenance(Provenance {
        rule: "swap".into(),
        wordlist_id: None,
        donor_image_id: (ids.len() == 1).then(|| ids.iter().next().map(|s| s.to_string())).flatten(),
    });
    SwapPlan { plan, warnings }
}

#[derive(Clone, Debug)]
pub struct Applied {
    pub ranking: Vec<RankedText>,
    pub trace: ActivationTrace,
}

/// Forward pass with the plan injected at block inputs, then classification.
pub fn apply(plan: &InterventionPlan, patches: &Tensor, bundle: &ModelBundle, vocab: &Vocabulary) -> Result<Applied> {
    vocab.check_dim(bundle.manifest.joint_dim)?;
    let trace = forward_full(patches, bundle, Some(plan))?;
    let ranking = classify_trace(&trace, bundle, vocab)?;
    Ok(Applied { ranking, trace })
}
