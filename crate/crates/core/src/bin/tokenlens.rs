// SPDX-License-Identifier: MIT OR Apache-2.0

//! `tokenlens` command-line entry point.
//!
//! Every command prints one JSON document (to stdout or `--output`). On
//! failure a `{"code", "message"}` object goes to stderr and the process
//! exits nonzero: 2 for usage errors, 1 otherwise.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use tokenlens::edit::{InterventionPlan, MatchMode, WordList};
use tokenlens::engine::{forward_full, TokenRef};
use tokenlens::eval::attack::{synthesize_attack, AttackStyle};
use tokenlens::eval::experiments::{
    debias_experiment, entity_intervention_experiment, typographical_experiment, AttackOptions, DebiasOptions, EntityOptions, ExperimentReport,
    LabeledInput, SmoothingConfig,
};
use tokenlens::eval::metrics::{iop_coverage, rank_change_eval, AnnotatedImage, IopOptions, RankChangeOptions};
use tokenlens::eval::probe::ProbeConfig;
use tokenlens::eval::report::{iop_chart, rank_change_chart};
use tokenlens::eval::toy::{make_toy_model, ImageRole, ToyKind, ToySpec};
use tokenlens::interpret::{calibrate_drift, DriftTable, Smoothing};
use tokenlens::io::image::{model_view, preprocess, BoxAnnotation, ImageInput, MaskFill};
use tokenlens::saliency::{overlay, token_saliency};
use tokenlens::service::http::serve_listener;
use tokenlens::service::{
    InterpretRequest, InterveneRequest, RuleKind, RuleRequest, ServiceConfig, SessionState, SmoothingRequest, WordlistRef,
};
use tokenlens::{Error, ModelBundle, Vocabulary};

#[derive(Parser, Debug)]
#[command(name = "tokenlens", version, about = "Interpret and edit vision-transformer latent tokens")]
struct Cli {
    /// Write the JSON result here instead of stdout.
    #[arg(long, short, global = true, env = "TOKENLENS_OUTPUT")]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rank vocabulary texts for the tokens of one layer.
    Interpret(InterpretArgs),
    /// Calibrate a drift table from a directory of images.
    Drift(DriftArgs),
    /// Attention-rollout saliency of one token.
    Saliency(SaliencyArgs),
    /// Apply a token replacement plan or rule and compare rankings.
    Edit(EditArgs),
    /// Run an evaluation over a dataset file.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write a toy bundle with fixtures.
    Toy(ToyArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Bundle directory.
    #[arg(long, env = "TOKENLENS_BUNDLE")]
    bundle: PathBuf,
}

#[derive(Args, Debug)]
struct SmoothArgs {
    /// Interpret through random smoothing; needs `--drift`.
    #[arg(long)]
    smoothing: bool,
    /// Drift table JSON.
    #[arg(long, env = "TOKENLENS_DRIFT")]
    drift: Option<PathBuf>,
    #[arg(long, default_value_t = Smoothing::DEFAULT_SAMPLES)]
    samples: usize,
}

#[derive(Args, Debug)]
struct InterpretArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, env = "TOKENLENS_VOCAB")]
    vocab: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Token layer, `1..=L+1`.
    #[arg(long)]
    layer: usize,
    /// Token position; every position of the layer when omitted.
    #[arg(long)]
    position: Option<usize>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[command(flatten)]
    smooth: SmoothArgs,
    #[arg(long, env = "TOKENLENS_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DriftArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Directory of calibration images (png/jpg).
    #[arg(long)]
    images: PathBuf,
    /// Defaults to the directory name.
    #[arg(long)]
    calibration_set_id: Option<String>,
}

#[derive(Args, Debug)]
struct SaliencyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    position: usize,
    /// Also write a heatmap overlay PNG.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Rule {
    Zero,
    Swap,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Remove,
    Keep,
}

impl From<Mode> for MatchMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Remove => MatchMode::RemoveMatching,
            Mode::Keep => MatchMode::KeepMatching,
        }
    }
}

#[derive(Args, Debug)]
struct EditArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, env = "TOKENLENS_VOCAB")]
    vocab: PathBuf,
    /// Vocabulary for the final classification; `--vocab` when omitted.
    #[arg(long, env = "TOKENLENS_CLASS_VOCAB")]
    class_vocab: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    /// Plan JSON to apply as is.
    #[arg(long, conflicts_with_all = ["wordlist", "rule"])]
    plan: Option<PathBuf>,
    /// Word-list file or built-in list name.
    #[arg(long)]
    wordlist: Option<String>,
    #[arg(long, value_enum, default_value = "zero")]
    rule: Rule,
    #[arg(long, value_enum, default_value = "remove")]
    mode: Mode,
    /// Comma-separated layers to match in; every block when omitted.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    skip_cls: bool,
    /// Donor image for swaps.
    #[arg(long)]
    donor_image: Option<PathBuf>,
    /// Word list selecting donor tokens.
    #[arg(long)]
    donor_wordlist: Option<String>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, env = "TOKENLENS_SEED", default_value_t = 0)]
    seed: u64,
    /// Also write the applied plan here.
    #[arg(long)]
    plan_out: Option<PathBuf>,
    #[command(flatten)]
    smooth: SmoothArgs,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Rank change of token interpretations under object and random masks.
    RankChange(RankChangeArgs),
    /// Share of token saliency masks inside the named object's boxes.
    Iop(IopArgs),
    /// Typographic attack repair by word-list zeroing.
    Attack(AttackArgs),
    /// Concept swap between source and donor images.
    Entity(EntityArgs),
    /// Probe accuracy per group before and after keep-list editing.
    Debias(DebiasArgs),
}

#[derive(Args, Debug)]
struct EvalCommon {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, env = "TOKENLENS_VOCAB")]
    vocab: PathBuf,
    /// Dataset JSON: `[{file, role?, label?, group?, boxes?}]`, paths
    /// relative to the dataset file.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, env = "TOKENLENS_SEED", default_value_t = 0)]
    seed: u64,
    /// Directory for JSON/CSV reports and charts.
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RankChangeArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long, value_enum, default_value = "mean")]
    fill: Fill,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fill {
    Mean,
    Zero,
}

#[derive(Args, Debug)]
struct IopArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long, default_value_t = 0.75)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long, env = "TOKENLENS_CLASS_VOCAB")]
    class_vocab: PathBuf,
    #[arg(long, default_value = "typographic")]
    wordlist: String,
    /// Text pasted on clean images when the dataset has no `attacked` role.
    #[arg(long)]
    attack_text: Option<String>,
    #[arg(long)]
    keep_cls: bool,
    #[command(flatten)]
    smooth: SmoothArgs,
}

#[derive(Args, Debug)]
struct EntityArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long, env = "TOKENLENS_CLASS_VOCAB")]
    class_vocab: PathBuf,
    #[arg(long)]
    source_wordlist: String,
    #[arg(long)]
    donor_wordlist: String,
    /// Class a successful swap produces.
    #[arg(long)]
    target_label: String,
    #[arg(long)]
    keep_cls: bool,
    #[command(flatten)]
    smooth: SmoothArgs,
}

#[derive(Args, Debug)]
struct DebiasArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long)]
    wordlist: String,
    #[arg(long, value_enum, default_value = "keep")]
    mode: Mode,
    /// Layer whose tokens are filtered; the last block when omitted.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    keep_cls: bool,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[command(flatten)]
    smooth: SmoothArgs,
}

#[derive(Args, Debug)]
struct ToyArgs {
    #[arg(long, default_value = "identity")]
    kind: String,
    #[arg(long, env = "TOKENLENS_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Vocabulary files; the first is the default.
    #[arg(long, env = "TOKENLENS_VOCAB", value_delimiter = ',')]
    vocab: Vec<PathBuf>,
    #[arg(long, env = "TOKENLENS_DRIFT")]
    drift: Option<PathBuf>,
    #[arg(long, env = "TOKENLENS_HOST", default_value = "127.0.0.1")]
    host: String,
    /// 0 picks a free port; the bound address is printed on startup.
    #[arg(long, env = "TOKENLENS_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "TOKENLENS_MAX_IMAGES", default_value_t = 256)]
    max_images: usize,
}

/// One dataset record.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    boxes: Vec<BoxAnnotation>,
}

struct Dataset {
    dir: PathBuf,
    entries: Vec<Entry>,
}

impl Dataset {
    fn load(path: &Path) -> tokenlens::Result<Self> {
        let entries: Vec<Entry> = serde_json::from_slice(&fs::read(path)?)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { dir, entries })
    }

    fn image(&self, e: &Entry) -> tokenlens::Result<ImageInput> {
        ImageInput::open(&self.dir.join(&e.file))?.with_boxes(e.boxes.clone())
    }

    fn with_role<'a>(&'a self, role: &'a str) -> impl Iterator<Item = &'a Entry> {
        self.entries.iter().filter(move |e| e.role.as_deref() == Some(role))
    }

    fn annotated(&self) -> tokenlens::Result<Vec<AnnotatedImage>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(AnnotatedImage {
                    id: e.file.to_string_lossy().into_owned(),
                    image: self.image(e)?,
                })
            })
            .collect()
    }

    fn labeled(&self, role: &str, bundle: &ModelBundle) -> tokenlens::Result<Vec<LabeledInput>> {
        self.with_role(role).map(|e| labeled(e, self.image(e)?, bundle)).collect()
    }
}

fn labeled(e: &Entry, image: ImageInput, bundle: &ModelBundle) -> tokenlens::Result<LabeledInput> {
    let label = e
        .label
        .clone()
        .ok_or_else(|| Error::Input(format!("dataset entry `{}` has no label", e.file.display())))?;
    Ok(LabeledInput {
        id: e.file.to_string_lossy().into_owned(),
        patches: preprocess(&image, &bundle.manifest)?,
        label,
        group: e.group.clone(),
    })
}

fn load_wordlist(spec: &str, mode: MatchMode) -> tokenlens::Result<WordList> {
    let path = Path::new(spec);
    if path.is_file() {
        WordList::load(path, mode)
    } else {
        WordList::builtin(spec, mode)
    }
}

fn wordlist_ref(spec: &str) -> tokenlens::Result<WordlistRef> {
    let path = Path::new(spec);
    if path.is_file() {
        let list = WordList::load(path, MatchMode::default())?;
        Ok(WordlistRef::Inline {
            id: Some(list.id),
            words: list.words,
        })
    } else {
        Ok(WordlistRef::Builtin(spec.to_string()))
    }
}

fn load_drift(path: &Path) -> tokenlens::Result<DriftTable> {
    DriftTable::from_json(&fs::read_to_string(path)?)
}

fn smoothing_config(s: &SmoothArgs, seed: u64, bundle: &ModelBundle) -> tokenlens::Result<Option<SmoothingConfig>> {
    if !s.smoothing {
        return Ok(None);
    }
    let path = s.drift.as_ref().ok_or_else(|| Error::Config("--smoothing needs --drift".into()))?;
    let drift = load_drift(path)?;
    drift.check(bundle)?;
    Ok(Some(SmoothingConfig {
        drift,
        samples: s.samples,
        seed,
    }))
}

fn session(bundle: &Path, vocabs: &[&Path]) -> tokenlens::Result<SessionState> {
    let s = SessionState::new(ModelBundle::load(bundle)?, ServiceConfig::default());
    for v in vocabs {
        s.add_vocab(Vocabulary::load(v)?)?;
    }
    Ok(s)
}

fn vocab_id(path: &Path) -> tokenlens::Result<String> {
    Ok(Vocabulary::load(path)?.id().to_string())
}

fn to_value<T: Serialize>(v: &T) -> tokenlens::Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn run_interpret(a: &InterpretArgs) -> tokenlens::Result<Value> {
    let s = session(&a.model.bundle, &[&a.vocab])?;
    let smoothing = if a.smooth.smoothing {
        let path = a.smooth.drift.as_ref().ok_or_else(|| Error::Config("--smoothing needs --drift".into()))?;
        s.set_drift(load_drift(path)?)?;
        Some(SmoothingRequest {
            enabled: true,
            samples: Some(a.smooth.samples),
            seed: a.seed,
        })
    } else {
        None
    };
    let img = s.add_image(fs::read(&a.image)?)?;
    to_value(&s.interpret(&InterpretRequest {
        image_id: img.image_id,
        layer: a.layer,
        position: a.position,
        vocab_id: None,
        top_k: Some(a.top_k),
        smoothing,
    })?)
}

fn run_drift(a: &DriftArgs) -> tokenlens::Result<Value> {
    let bundle = ModelBundle::load(&a.model.bundle)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&a.images)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    let inputs = files
        .iter()
        .map(|p| preprocess(&ImageInput::open(p)?, &bundle.manifest))
        .collect::<tokenlens::Result<Vec<_>>>()?;
    let id = a.calibration_set_id.clone().unwrap_or_else(|| {
        a.images
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "calibration".into())
    });
    to_value(&calibrate_drift(&inputs, &bundle, &id)?)
}

fn run_saliency(a: &SaliencyArgs) -> tokenlens::Result<Value> {
    let bundle = ModelBundle::load(&a.model.bundle)?;
    let image = ImageInput::open(&a.image)?;
    let token = TokenRef::new(a.layer, a.position);
    token.validate(&bundle)?;
    let trace = forward_full(&preprocess(&image, &bundle.manifest)?, &bundle, None)?;
    let map = token_saliency(token, &trace)?;
    if let Some(path) = &a.overlay {
        overlay(&model_view(&image, bundle.manifest.image_size)?, &map)?.save_png(path)?;
    }
    to_value(&map)
}

fn run_edit(a: &EditArgs) -> tokenlens::Result<Value> {
    let mut vocabs: Vec<&Path> = vec![&a.vocab];
    if let Some(c) = &a.class_vocab {
        vocabs.push(c);
    }
    let s = session(&a.model.bundle, &vocabs)?;
    let image_id = s.add_image(fs::read(&a.image)?)?.image_id;
    let class_vocab_id = a.class_vocab.as_deref().map(vocab_id).transpose()?;
    let smoothing = if a.smooth.smoothing {
        let path = a.smooth.drift.as_ref().ok_or_else(|| Error::Config("--smoothing needs --drift".into()))?;
        s.set_drift(load_drift(path)?)?;
        Some(SmoothingRequest {
            enabled: true,
            samples: Some(a.smooth.samples),
            seed: a.seed,
        })
    } else {
        None
    };
    let (plan, rule) = match (&a.plan, &a.wordlist) {
        (Some(p), _) => (Some(InterventionPlan::from_json(&fs::read_to_string(p)?)?), None),
        (None, Some(w)) => {
            let donor_image_id = a.donor_image.as_ref().map(|p| Ok::<_, Error>(s.add_image(fs::read(p)?)?.image_id)).transpose()?;
            let rule = RuleRequest {
                rule: match a.rule {
                    Rule::Zero => RuleKind::Zero,
                    Rule::Swap => RuleKind::Swap,
                },
                wordlist: wordlist_ref(w)?,
                mode: a.mode.into(),
                layers: a.layers.clone(),
                skip_cls: a.skip_cls,
                donor_image_id,
                donor_wordlist: a.donor_wordlist.as_deref().map(wordlist_ref).transpose()?,
                seed: a.seed,
                smoothing,
            };
            (None, Some(rule))
        }
        (None, None) => return Err(Error::Config("edit needs --plan or --wordlist".into())),
    };
    let resp = s.intervene(&InterveneRequest {
        image_id,
        vocab_id: None,
        class_vocab_id,
        plan,
        plan_id: None,
        rule,
        top_k: Some(a.top_k),
        refresh_layers: None,
    })?;
    if let Some(out) = &a.plan_out {
        fs::write(out, serde_json::to_string_pretty(&resp.plan)?)?;
    }
    to_value(&resp)
}

fn write_experiment(report: &ExperimentReport, dir: &Option<PathBuf>, stem: &str) -> tokenlens::Result<Value> {
    if let Some(d) = dir {
        report.write(d, stem)?;
    }
    to_value(report)
}

fn write_json_report<T: Serialize>(report: &T, dir: &Option<PathBuf>, stem: &str, chart: impl FnOnce() -> tokenlens::Result<ImageInput>) -> tokenlens::Result<Value> {
    let v = to_value(report)?;
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        fs::write(d.join(format!("{stem}.json")), serde_json::to_string_pretty(&v)?)?;
        chart()?.save_png(&d.join(format!("{stem}.png")))?;
    }
    Ok(v)
}

fn run_eval(cmd: &EvalCommand) -> tokenlens::Result<Value> {
    match cmd {
        EvalCommand::RankChange(a) => {
            let c = &a.common;
            let bundle = ModelBundle::load(&c.model.bundle)?;
            let vocab = Vocabulary::load(&c.vocab)?;
            let images = Dataset::load(&c.dataset)?.annotated()?;
            let opts = RankChangeOptions {
                layers: c.layers.clone(),
                fill: match a.fill {
                    Fill::Mean => MaskFill::Mean,
                    Fill::Zero => MaskFill::Zero,
                },
                seed: c.seed,
            };
            let report = rank_change_eval(&images, &bundle, &vocab, &opts)?;
            let mut v = write_json_report(&report, &c.report_dir, "rank_change", || rank_change_chart(&report))?;
            v["object_over_random"] = json!(report.object_over_random());
            Ok(v)
        }
        EvalCommand::Iop(a) => {
            let c = &a.common;
            let bundle = ModelBundle::load(&c.model.bundle)?;
            let vocab = Vocabulary::load(&c.vocab)?;
            let images = Dataset::load(&c.dataset)?.annotated()?;
            let opts = IopOptions {
                threshold: a.threshold,
                layers: c.layers.clone(),
                seed: c.seed,
            };
            let report = iop_coverage(&images, &bundle, &vocab, &opts)?;
            write_json_report(&report, &c.report_dir, "iop", || iop_chart(&report))
        }
        EvalCommand::Attack(a) => {
            let c = &a.common;
            let bundle = ModelBundle::load(&c.model.bundle)?;
            let vocab = Vocabulary::load(&c.vocab)?;
            let class_vocab = Vocabulary::load(&a.class_vocab)?;
            let ds = Dataset::load(&c.dataset)?;
            let clean = ds.labeled("clean", &bundle)?;
            let mut attacked = ds.labeled("attacked", &bundle)?;
            if attacked.is_empty() {
                let text = a
                    .attack_text
                    .as_deref()
                    .ok_or_else(|| Error::Input("dataset has no `attacked` images; pass --attack-text".into()))?;
                for (i, e) in ds.with_role("clean").enumerate() {
                    let img = synthesize_attack(&ds.image(e)?, text, c.seed.wrapping_add(i as u64), &AttackStyle::default())?;
                    attacked.push(labeled(e, img, &bundle)?);
                }
            }
            let opts = AttackOptions {
                layers: c.layers.clone(),
                skip_cls: !a.keep_cls,
                seed: c.seed,
                smoothing: smoothing_config(&a.smooth, c.seed, &bundle)?,
            };
            let wl = load_wordlist(&a.wordlist, MatchMode::RemoveMatching)?;
            let report = typographical_experiment(&clean, &attacked, &wl, &bundle, &vocab, &class_vocab, &opts)?;
            write_experiment(&report, &c.report_dir, "attack")
        }
        EvalCommand::Entity(a) => {
            let c = &a.common;
            let bundle = ModelBundle::load(&c.model.bundle)?;
            let vocab = Vocabulary::load(&c.vocab)?;
            let class_vocab = Vocabulary::load(&a.class_vocab)?;
            let ds = Dataset::load(&c.dataset)?;
            let opts = EntityOptions {
                layers: c.layers.clone(),
                skip_cls: !a.keep_cls,
                seed: c.seed,
                smoothing: smoothing_config(&a.smooth, c.seed, &bundle)?,
                target_label: a.target_label.clone(),
            };
            let report = entity_intervention_experiment(
                &ds.labeled("source", &bundle)?,
                &ds.labeled("donor", &bundle)?,
                &load_wordlist(&a.source_wordlist, MatchMode::RemoveMatching)?,
                &load_wordlist(&a.donor_wordlist, MatchMode::RemoveMatching)?,
                &bundle,
                &vocab,
                &class_vocab,
                &opts,
            )?;
            write_experiment(&report, &c.report_dir, "entity")
        }
        EvalCommand::Debias(a) => {
            let c = &a.common;
            let bundle = ModelBundle::load(&c.model.bundle)?;
            let vocab = Vocabulary::load(&c.vocab)?;
            let ds = Dataset::load(&c.dataset)?;
            let opts = DebiasOptions {
                layer: a.layer,
                skip_cls: !a.keep_cls,
                probe: ProbeConfig {
                    epochs: a.epochs,
                    lr: a.lr,
                    batch_size: a.batch_size,
                    seed: c.seed,
                    ..ProbeConfig::default()
                },
                smoothing: smoothing_config(&a.smooth, c.seed, &bundle)?,
            };
            let wl = load_wordlist(&a.wordlist, a.mode.into())?;
            let report = debias_experiment(&ds.labeled("train", &bundle)?, &ds.labeled("test", &bundle)?, &wl, &bundle, &vocab, &opts)?;
            write_experiment(&report, &c.report_dir, "debias")
        }
    }
}

fn role_name(role: ImageRole) -> tokenlens::Result<String> {
    Ok(to_value(&role)?.as_str().unwrap_or("plain").to_string())
}

fn run_toy(a: &ToyArgs) -> tokenlens::Result<Value> {
    let mut spec = ToySpec::new(ToyKind::parse(&a.kind)?, a.seed);
    if let Some(n) = a.num_layers {
        spec.num_layers = n;
    }
    if let Some(d) = a.hidden_dim {
        spec.hidden_dim = d;
    }
    if let Some(h) = a.num_heads {
        spec.num_heads = h;
    }
    let fx = make_toy_model(&spec)?;
    let out = &a.out;
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("wordlists"))?;
    fx.bundle.save(&out.join("bundle"))?;
    let vocab_path = out.join(format!("{}.tlv", fx.vocab.id()));
    fx.vocab.save(&vocab_path)?;
    let class_path = match &fx.class_vocab {
        Some(cv) => {
            let p = out.join(format!("{}.tlv", cv.id()));
            cv.save(&p)?;
            Some(p)
        }
        None => None,
    };
    let mut entries = Vec::new();
    for img in &fx.images {
        let file = PathBuf::from("images").join(format!("{}.png", img.name));
        img.image.save_png(&out.join(&file))?;
        entries.push(Entry {
            file,
            role: Some(role_name(img.role)?),
            label: img.label.clone(),
            group: img.group.clone(),
            boxes: img.image.boxes.clone(),
        });
    }
    fs::write(out.join("dataset.json"), serde_json::to_string_pretty(&entries)?)?;
    let mut lists = BTreeMap::new();
    for wl in &fx.wordlists {
        let p = out.join("wordlists").join(format!("{}.txt", wl.id));
        fs::write(&p, wl.words.join("\n") + "\n")?;
        lists.insert(wl.id.clone(), p);
    }
    Ok(json!({
        "spec": spec,
        "bundle_dir": out.join("bundle"),
        "bundle_id": fx.bundle.id(),
        "vocab": vocab_path,
        "class_vocab": class_path,
        "dataset": out.join("dataset.json"),
        "images": entries.len(),
        "wordlists": lists,
        "attack_patch": fx.attack_patch,
    }))
}

fn run_serve(a: &ServeArgs) -> tokenlens::Result<Value> {
    let config = ServiceConfig {
        image_capacity: a.max_images,
        ..ServiceConfig::default()
    };
    let state = SessionState::new(ModelBundle::load(&a.model.bundle)?, config);
    for v in &a.vocab {
        state.add_vocab(Vocabulary::load(v)?)?;
    }
    if let Some(d) = &a.drift {
        state.set_drift(load_drift(d)?)?;
    }
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Error::Config(format!("bad listen address: {e}")))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let bound = listener.local_addr()?;
        let mut stdout = std::io::stdout();
        writeln!(stdout, "{}", json!({"listening": bound.to_string(), "model": state.model_summary()}))?;
        stdout.flush()?;
        serve_listener(listener, Arc::new(state)).await
    })?;
    Ok(json!({"status": "stopped"}))
}

fn run(cli: &Cli) -> tokenlens::Result<Option<Value>> {
    let v = match &cli.command {
        Command::Interpret(a) => run_interpret(a)?,
        Command::Drift(a) => run_drift(a)?,
        Command::Saliency(a) => run_saliency(a)?,
        Command::Edit(a) => run_edit(a)?,
        Command::Eval(c) => run_eval(c)?,
        Command::Toy(a) => run_toy(a)?,
        Command::Serve(a) => {
            run_serve(a)?;
            return Ok(None);
        }
    };
    Ok(Some(v))
}

fn emit(output: &Option<PathBuf>, v: &Value) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(v).expect("json values serialize");
    match output {
        Some(p) => fs::write(p, text + "\n"),
        None => writeln!(std::io::stdout(), "{text}"),
    }
}

fn fail(code: &str, message: &str, exit: u8) -> ExitCode {
    eprintln!("{}", json!({"code": code, "message": message}));
    ExitCode::from(exit)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TOKENLENS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    match run(&cli) {
        Ok(Some(v)) => match emit(&cli.output, &v) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail("io", &e.to_string(), 1),
        },
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => fail(e.code(), &e.to_string(), 1),
    }
}
