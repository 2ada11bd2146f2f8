// SPDX-License-Identifier: MIT OR Apache-2.0

//! Session state and request handlers behind the HTTP API.
//!
//! Every handler here is a plain function of the session and a request, so
//! the HTTP layer in [`http`] only does transport. Numerics depend on the
//! request and the stored inputs alone.

pub mod http;

use std::sync::{Arc, OnceLock};

use base64::Engine as _;
use indexmap::IndexMap;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edit::{build_swap_plan, build_zero_plan, match_tokens, DonorPool, InterventionPlan, MatchMode, MatchOptions, Provenance, WordList};
use crate::engine::{classify_trace, forward_full, ActivationTrace, RankedText, TokenRef};
use crate::error::{Error, Result};
use crate::interpret::{calibrate_drift, interpret, interpret_layer, interpret_with, DriftTable, Interpretation, Smoothing};
use crate::io::bundle::ModelBundle;
use crate::io::image::{model_view, preprocess, ImageInput};
use crate::io::vocab::Vocabulary;
use crate::saliency::{overlay, token_saliency, SaliencyMap};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub image_capacity: usize,
    pub plan_capacity: usize,
    pub vocab_capacity: usize,
    pub max_upload_bytes: usize,
    pub default_top_k: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            image_capacity: 256,
            plan_capacity: 256,
            vocab_capacity: 16,
            max_upload_bytes: 32 << 20,
            default_top_k: 5,
        }
    }
}

/// Insertion-ordered map that evicts its oldest entries past `capacity`.
/// Entries listed in `pinned` are never evicted.
#[derive(Debug)]
pub struct BoundedStore<T> {
    capacity: usize,
    items: IndexMap<String, Arc<T>>,
}

impl<T> BoundedStore<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: IndexMap::new(),
        }
    }

    /// Inserts (or refreshes) `id`; returns the ids evicted to make room.
    pub fn insert(&mut self, id: String, value: Arc<T>, pinned: &[&str]) -> Vec<String> {
        self.items.shift_remove(&id);
        self.items.insert(id, value);
        let mut evicted = Vec::new();
        let mut i = 0;
        while self.items.len() > self.capacity && i < self.items.len() {
            let key = self.items.get_index(i).map(|(k, _)| k.clone()).expect("index in range");
            if pinned.contains(&key.as_str()) || i == self.items.len() - 1 {
                i += 1;
                continue;
            }
            self.items.shift_remove_index(i);
            evicted.push(key);
        }
        evicted
    }

    pub fn get(&self, id: &str) -> Option<Arc<T>> {
        self.items.get(id).cloned()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.items.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = &Arc<T>> {
        self.items.values()
    }
}

/// An uploaded image with its preprocessed patches and a lazily computed
/// un-edited trace.
#[derive(Debug)]
pub struct StoredImage {
    pub id: String,
    pub bytes: Vec<u8>,
    pub image: ImageInput,
    pub patches: Tensor,
    trace: OnceLock<ActivationTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub bundle_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub grid: usize,
    pub seq_len: usize,
    pub joint_dim: usize,
    pub activation: crate::tensor::ActivationKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabInfo {
    pub id: String,
    pub size: usize,
    pub dim: usize,
    pub renormalized: usize,
    pub default: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub seq_len: usize,
    /// Base64 PNG of the model's resized, center-cropped view.
    pub thumbnail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SmoothingRequest {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretRequest {
    pub image_id: String,
    pub layer: usize,
    #[serde(default)]
    pub position: Option<usize>,
    #[serde(default)]
    pub vocab_id: Option<String>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub smoothing: Option<SmoothingRequest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretResponse {
    pub image_id: String,
    pub layer: usize,
    pub vocab_id: String,
    pub interpretations: Vec<Interpretation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRequest {
    pub image_id: String,
    pub token: TokenRef,
    #[serde(default)]
    pub overlay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyResponse {
    pub image_id: String,
    #[serde(flatten)]
    pub map: SaliencyMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay_png: Option<String>,
}

/// A built-in list by name, or an inline list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WordlistRef {
    Builtin(String),
    Inline {
        #[serde(default)]
        id: Option<String>,
        words: Vec<String>,
    },
}

impl WordlistRef {
    pub fn resolve(&self, mode: MatchMode) -> Result<WordList> {
        match self {
            WordlistRef::Builtin(name) => WordList::builtin(name, mode),
            WordlistRef::Inline { id, words } => WordList::new(id.clone().unwrap_or_else(|| "inline".into()), words.clone(), mode),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRequest {
    pub image_id: String,
    pub wordlist: WordlistRef,
    #[serde(default)]
    pub mode: MatchMode,
    /// Defaults to every block, `1..=L`.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub skip_cls: bool,
    #[serde(default)]
    pub vocab_id: Option<String>,
    #[serde(default)]
    pub top_k_membership: Option<usize>,
    #[serde(default)]
    pub smoothing: Option<SmoothingRequest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResponse {
    pub image_id: String,
    pub tokens: Vec<TokenRef>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Zero,
    Swap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleRequest {
    pub rule: RuleKind,
    pub wordlist: WordlistRef,
    #[serde(default)]
    pub mode: MatchMode,
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub skip_cls: bool,
    #[serde(default)]
    pub donor_image_id: Option<String>,
    /// Words selecting donor tokens; required for swaps.
    #[serde(default)]
    pub donor_wordlist: Option<WordlistRef>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub smoothing: Option<SmoothingRequest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterveneRequest {
    pub image_id: String,
    /// Vocabulary for matching and refreshed interpretations.
    #[serde(default)]
    pub vocab_id: Option<String>,
    /// Vocabulary ranked against the final CLS embedding; `vocab_id` when unset.
    #[serde(default)]
    pub class_vocab_id: Option<String>,
    #[serde(default)]
    pub plan: Option<InterventionPlan>,
    #[serde(default)]
    pub plan_id: Option<String>,
    #[serde(default)]
    pub rule: Option<RuleRequest>,
    #[serde(default)]
    pub top_k: Option<usize>,
    /// Layers whose tokens are re-interpreted after the edit; defaults to
    /// the layers the plan touches.
    #[serde(default)]
    pub refresh_layers: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterveneResponse {
    pub image_id: String,
    pub plan_id: String,
    pub plan: InterventionPlan,
    pub replaced_per_layer: std::collections::BTreeMap<usize, usize>,
    pub ranking_before: Vec<RankedText>,
    pub ranking_after: Vec<RankedText>,
    pub interpretations_after: Vec<Interpretation>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRequest {
    #[serde(default)]
    pub image_ids: Vec<String>,
    #[serde(default)]
    pub calibration_set_id: Option<String>,
    /// A precomputed table, used instead of calibrating.
    #[serde(default)]
    pub table: Option<DriftTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftInfo {
    pub calibration_set_id: String,
    pub noise_model: String,
    pub num_layers: usize,
    pub summary: crate::interpret::DriftSummary,
}

fn content_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// One bundle per process, with bounded image, plan and vocabulary stores.
#[derive(Debug)]
pub struct SessionState {
    bundle: Arc<ModelBundle>,
    bundle_id: String,
    config: ServiceConfig,
    default_vocab: RwLock<Option<String>>,
    vocabs: RwLock<BoundedStore<Vocabulary>>,
    images: RwLock<BoundedStore<StoredImage>>,
    plans: RwLock<BoundedStore<InterventionPlan>>,
    drift: RwLock<Option<Arc<DriftTable>>>,
}

impl SessionState {
    pub fn new(bundle: ModelBundle, config: ServiceConfig) -> Self {
        let bundle_id = bundle.id();
        Self {
            bundle: Arc::new(bundle),
            bundle_id,
            default_vocab: RwLock::new(None),
            vocabs: RwLock::new(BoundedStore::new(config.vocab_capacity)),
            images: RwLock::new(BoundedStore::new(config.image_capacity)),
            plans: RwLock::new(BoundedStore::new(config.plan_capacity)),
            drift: RwLock::new(None),
            config,
        }
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn model_summary(&self) -> ModelSummary {
        let m = &self.bundle.manifest;
        ModelSummary {
            bundle_id: self.bundle_id.clone(),
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            num_heads: m.num_heads,
            patch_size: m.patch_size,
            image_size: m.image_size,
            grid: m.grid(),
            seq_len: m.seq_len(),
            joint_dim: m.joint_dim,
            activation: m.activation,
        }
    }

    fn vocab_info(&self, v: &Vocabulary) -> VocabInfo {
        VocabInfo {
            id: v.id().to_string(),
            size: v.len(),
            dim: v.dim(),
            renormalized: v.renormalized(),
            default: self.default_vocab.read().as_deref() == Some(v.id()),
        }
    }

    /// Registers a vocabulary; the first one becomes the default.
    pub fn add_vocab(&self, vocab: Vocabulary) -> Result<VocabInfo> {
        vocab.check_dim(self.bundle.manifest.joint_dim)?;
        let id = vocab.id().to_string();
        {
            let mut d = self.default_vocab.write();
            if d.is_none() {
                *d = Some(id.clone());
            }
        }
        let pinned = self.default_vocab.read().clone().unwrap_or_default();
        let v = Arc::new(vocab);
        let evicted = self.vocabs.write().insert(id, v.clone(), &[pinned.as_str()]);
        for e in evicted {
            log::info!("evicted vocabulary `{e}`");
        }
        Ok(self.vocab_info(&v))
    }

    pub fn vocabs(&self) -> Vec<VocabInfo> {
        let store = self.vocabs.read();
        store.values().map(|v| self.vocab_info(v)).collect()
    }

    pub fn vocab(&self, id: Option<&str>) -> Result<Arc<Vocabulary>> {
        let id = match id {
            Some(id) => id.to_string(),
            None => self.default_vocab.read().clone().ok_or_else(|| Error::NotFound("no vocabulary loaded".into()))?,
        };
        self.vocabs.read().get(&id).ok_or_else(|| Error::NotFound(format!("vocabulary `{id}`")))
    }

    /// Decodes and stores an encoded image; the id is a content hash, so
    /// repeated uploads return the same id.
    pub fn add_image(&self, bytes: Vec<u8>) -> Result<ImageInfo> {
        let id = content_id(&bytes);
        let stored = match self.images.read().get(&id) {
            Some(s) => s,
            None => {
                let image = ImageInput::from_encoded(&bytes)?;
                let patches = preprocess(&image, &self.bundle.manifest)?;
                Arc::new(StoredImage {
                    id: id.clone(),
                    bytes,
                    image,
                    patches,
                    trace: OnceLock::new(),
                })
            }
        };
        for e in self.images.write().insert(id.clone(), stored.clone(), &[]) {
            log::info!("evicted image `{e}`");
        }
        let m = &self.bundle.manifest;
        Ok(ImageInfo {
            image_id: id,
            width: stored.image.width(),
            height: stored.image.height(),
            grid_rows: m.grid(),
            grid_cols: m.grid(),
            seq_len: m.seq_len(),
            thumbnail: b64(&model_view(&stored.image, m.image_size)?.encode_png()?),
        })
    }

    pub fn image(&self, id: &str) -> Result<Arc<StoredImage>> {
        self.images.read().get(id).ok_or_else(|| Error::NotFound(format!("image `{id}`")))
    }

    fn trace<'a>(&self, img: &'a StoredImage) -> Result<&'a ActivationTrace> {
        if let Some(t) = img.trace.get() {
            return Ok(t);
        }
        let t = forward_full(&img.patches, &self.bundle, None)?;
        Ok(img.trace.get_or_init(|| t))
    }

    pub fn set_drift(&self, table: DriftTable) -> Result<DriftInfo> {
        table.check(&self.bundle)?;
        let info = DriftInfo {
            calibration_set_id: table.calibration_set_id.clone(),
            noise_model: table.noise_model.clone(),
            num_layers: table.num_layers(),
            summary: table.summary.clone(),
        };
        *self.drift.write() = Some(Arc::new(table));
        Ok(info)
    }

    pub fn drift(&self) -> Option<Arc<DriftTable>> {
        self.drift.read().clone()
    }

    /// Installs a supplied table or calibrates one from stored images.
    pub fn calibrate(&self, req: &DriftRequest) -> Result<DriftInfo> {
        if let Some(t) = &req.table {
            return self.set_drift(t.clone());
        }
        if req.image_ids.is_empty() {
            return Err(Error::Input("drift calibration needs image_ids or a table".into()));
        }
        let inputs = req
            .image_ids
            .iter()
            .map(|id| Ok(self.image(id)?.patches.clone()))
            .collect::<Result<Vec<_>>>()?;
        let id = req.calibration_set_id.clone().unwrap_or_else(|| content_id(req.image_ids.join(",").as_bytes()));
        self.set_drift(calibrate_drift(&inputs, &self.bundle, &id)?)
    }

    fn smoothing_table(&self, req: &Option<SmoothingRequest>) -> Result<Option<(Arc<DriftTable>, usize, u64)>> {
        match req {
            Some(s) if s.enabled => {
                let table = self
                    .drift()
                    .ok_or_else(|| Error::NotFound("no drift table loaded; calibrate one first".into()))?;
                let samples = s.samples.unwrap_or(Smoothing::DEFAULT_SAMPLES);
                Ok(Some((table, samples, s.seed)))
            }
            _ => Ok(None),
        }
    }

    pub fn interpret(&self, req: &InterpretRequest) -> Result<InterpretResponse> {
        let img = self.image(&req.image_id)?;
        let vocab = self.vocab(req.vocab_id.as_deref())?;
        let trace = self.trace(&img)?;
        let top_k = Some(req.top_k.unwrap_or(self.config.default_top_k));
        let sm = self.smoothing_table(&req.smoothing)?;
        let smoothing = sm.as_ref().map(|(t, n, s)| Smoothing::new(t, *n, *s));
        let interpretations = match req.position {
            Some(j) => vec![interpret_with(TokenRef::new(req.layer, j), trace, &self.bundle, &vocab, top_k, smoothing.as_ref())?],
            None => interpret_layer(req.layer, trace, &self.bundle, &vocab, top_k, smoothing.as_ref())?,
        };
        Ok(InterpretResponse {
            image_id: req.image_id.clone(),
            layer: req.layer,
            vocab_id: vocab.id().to_string(),
            interpretations,
        })
    }

    pub fn saliency(&self, req: &SaliencyRequest) -> Result<SaliencyResponse> {
        let img = self.image(&req.image_id)?;
        req.token.validate(&self.bundle)?;
        let map = token_saliency(req.token, self.trace(&img)?)?;
        let overlay_png = if req.overlay {
            let view = model_view(&img.image, self.bundle.manifest.image_size)?;
            Some(b64(&overlay(&view, &map)?.encode_png()?))
        } else {
            None
        };
        Ok(SaliencyResponse {
            image_id: req.image_id.clone(),
            map,
            overlay_png,
        })
    }

    fn layers_or_all(&self, layers: &Option<Vec<usize>>) -> Vec<usize> {
        layers.clone().unwrap_or_else(|| (1..=self.bundle.manifest.num_layers).collect())
    }

    pub fn match_tokens(&self, req: &MatchRequest) -> Result<MatchResponse> {
        let img = self.image(&req.image_id)?;
        let vocab = self.vocab(req.vocab_id.as_deref())?;
        let wordlist = req.wordlist.resolve(req.mode)?;
        let sm = self.smoothing_table(&req.smoothing)?;
        let opts = MatchOptions {
            top_k_membership: req.top_k_membership.unwrap_or(1),
            skip_cls: req.skip_cls,
            smoothing: sm.as_ref().map(|(t, n, s)| Smoothing::new(t, *n, *s)),
        };
        let m = match_tokens(self.trace(&img)?, &self.bundle, &vocab, &wordlist, &self.layers_or_all(&req.layers), &opts)?;
        Ok(MatchResponse {
            image_id: req.image_id.clone(),
            tokens: m.tokens,
            warnings: m.warnings,
        })
    }

    fn plan_from_rule(&self, img: &StoredImage, vocab: &Vocabulary, rule: &RuleRequest) -> Result<(InterventionPlan, Vec<String>)> {
        let wordlist = rule.wordlist.resolve(rule.mode)?;
        let sm = self.smoothing_table(&rule.smoothing)?;
        let opts = MatchOptions {
            skip_cls: rule.skip_cls,
            smoothing: sm.as_ref().map(|(t, n, s)| Smoothing::new(t, *n, *s)),
            ..MatchOptions::default()
        };
        let layers = self.layers_or_all(&rule.layers);
        let found = match_tokens(self.trace(img)?, &self.bundle, vocab, &wordlist, &layers, &opts)?;
        let mut warnings = found.warnings;
        let plan = match rule.rule {
            RuleKind::Zero => {
                let mut plan = build_zero_plan(&found.tokens);
                plan.provenance.wordlist_id = Some(wordlist.id.clone());
                plan
            }
            RuleKind::Swap => {
                let donor_id = rule
                    .donor_image_id
                    .as_deref()
                    .ok_or_else(|| Error::Input("swap rule needs donor_image_id".into()))?;
                let donor_words = rule
                    .donor_wordlist
                    .as_ref()
                    .ok_or_else(|| Error::Input("swap rule needs donor_wordlist".into()))?
                    .resolve(MatchMode::RemoveMatching)?;
                let donor = self.image(donor_id)?;
                let donor_trace = self.trace(&donor)?;
                let donor_tokens = match_tokens(donor_trace, &self.bundle, vocab, &donor_words, &layers, &opts)?;
                warnings.extend(donor_tokens.warnings);
                let mut pool = DonorPool::default();
                pool.harvest(donor_trace, &donor_tokens.tokens, donor_id);
                let swap = build_swap_plan(&found.tokens, &pool, rule.seed);
                warnings.extend(swap.warnings);
                let mut plan = swap.plan;
                plan.provenance = Provenance {
                    rule: "swap".into(),
                    wordlist_id: Some(wordlist.id.clone()),
                    donor_image_id: Some(donor_id.to_string()),
                };
                plan
            }
        };
        Ok((plan, warnings))
    }

    pub fn plan(&self, id: &str) -> Result<Arc<InterventionPlan>> {
        self.plans.read().get(id).ok_or_else(|| Error::NotFound(format!("plan `{id}`")))
    }

    pub fn intervene(&self, req: &InterveneRequest) -> Result<InterveneResponse> {
        let img = self.image(&req.image_id)?;
        let vocab = self.vocab(req.vocab_id.as_deref())?;
        let class_vocab = match &req.class_vocab_id {
            Some(id) => self.vocab(Some(id))?,
            None => vocab.clone(),
        };
        let sources = usize::from(req.plan.is_some()) + usize::from(req.plan_id.is_some()) + usize::from(req.rule.is_some());
        if sources != 1 {
            return Err(Error::Input("exactly one of plan, plan_id or rule is required".into()));
        }
        let (plan, warnings) = if let Some(p) = &req.plan {
            (p.clone(), Vec::new())
        } else if let Some(id) = &req.plan_id {
            ((*self.plan(id)?).clone(), Vec::new())
        } else {
            self.plan_from_rule(&img, &vocab, req.rule.as_ref().expect("counted above"))?
        };
        plan.validate(&self.bundle)?;
        let top_k = req.top_k.unwrap_or(self.config.default_top_k).max(1);
        let before = self.trace(&img)?;
        let mut ranking_before = classify_trace(before, &self.bundle, &class_vocab)?;
        ranking_before.truncate(top_k);
        let after = forward_full(&img.patches, &self.bundle, Some(&plan))?;
        let mut ranking_after = classify_trace(&after, &self.bundle, &class_vocab)?;
        ranking_after.truncate(top_k);
        let refresh = req
            .refresh_layers
            .clone()
            .unwrap_or_else(|| plan.replaced_per_layer().keys().copied().collect());
        let mut warnings = warnings;
        let mut interpretations_after = Vec::new();
        for layer in refresh {
            for j in 0..self.bundle.manifest.seq_len() {
                let t = TokenRef::new(layer, j);
                match interpret(t, &after, &self.bundle, &vocab, Some(top_k)) {
                    Ok(i) => interpretations_after.push(i),
                    // an edited token can read out as the zero vector
                    Err(Error::Degenerate(_)) => warnings.push(format!("token ({layer}, {j}) has no direction after the edit")),
                    Err(e) => return Err(e),
                }
            }
        }
        let plan_id = content_id(&serde_json::to_vec(&plan)?);
        self.plans.write().insert(plan_id.clone(), Arc::new(plan.clone()), &[]);
        Ok(InterveneResponse {
            image_id: req.image_id.clone(),
            plan_id,
            replaced_per_layer: plan.replaced_per_layer().clone(),
            plan,
            ranking_before,
            ranking_after,
            interpretations_after,
            warnings,
        })
    }
}
