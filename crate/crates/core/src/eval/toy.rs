// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale toy encoders with fixtures whose interpretation and
//! intervention behavior is known by construction.
//!
//! Planted kinds express every concept as a unit direction orthogonal to the
//! all-ones vector. Layer norm (gamma 1, beta 0) maps such a vector `x` to
//! `√D·x/‖x‖`, so a token carrying a single concept enters attention with a
//! fixed magnitude regardless of its pixel intensity. Queries and keys are
//! zero, which makes every attention row uniform; one head's value/output
//! pair routes chosen concepts into every token, including CLS.
//!
//! Image patches are solid colors. The patch embedding reads the mean of
//! each normalized channel, so a channel at the preprocessing mean
//! contributes nothing and a saturated channel writes its direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::edit::{MatchMode, WordList};
use crate::engine::forward_full;
use crate::error::{Error, Result};
use crate::io::bundle::{Manifest, ModelBundle, BUNDLE_FORMAT_VERSION};
use crate::io::image::{preprocess, BoxAnnotation, ImageInput};
use crate::io::vocab::Vocabulary;
use crate::tensor::{ActivationKind, Tensor};

/// Pixel value equal to the toy preprocessing mean.
pub const MID: u8 = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// All block weights zero: every block is the residual identity.
    Identity,
    /// Dense random weights.
    Random,
    /// Zero LN gammas and identity activation: every block adds a constant.
    Linear,
    /// A text patch overrides the scene class through one head.
    PlantedAttack,
    /// Scene class is decided by which vehicle concept rides on the road.
    TwoConcept,
    /// Gender tokens act as a spurious shortcut for hair color.
    Spurious,
}

impl ToyKind {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown toy kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub seed: u64,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    /// Patches per side.
    pub grid: usize,
    pub mlp_dim: usize,
}

impl ToySpec {
    pub fn new(kind: ToyKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            patch_size: 4,
            grid: 4,
            mlp_dim: 32,
        }
    }

    fn validate(&self) -> Result<()> {
        let planted = !matches!(self.kind, ToyKind::Random | ToyKind::Linear);
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.patch_size == 0 || self.grid == 0 || self.mlp_dim == 0 {
            return Err(Error::Config("toy dimensions must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config("hidden_dim must be divisible by num_heads".into()));
        }
        if planted && self.hidden_dim < 12 {
            return Err(Error::Config("planted toy kinds need hidden_dim >= 12".into()));
        }
        if planted && self.hidden_dim / self.num_heads < 3 {
            return Err(Error::Config("planted toy kinds need head_dim >= 3".into()));
        }
        if matches!(self.kind, ToyKind::PlantedAttack | ToyKind::TwoConcept | ToyKind::Spurious) && self.grid < 3 {
            return Err(Error::Config("planted scenes need at least a 3x3 patch grid".into()));
        }
        if self.kind == ToyKind::Spurious && self.num_layers < 2 {
            return Err(Error::Config("spurious kind needs at least 2 layers".into()));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        let mid = MID as f32 / 255.0;
        Manifest {
            format_version: BUNDLE_FORMAT_VERSION,
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            patch_size: self.patch_size,
            image_size: self.patch_size * self.grid,
            mlp_dim: self.mlp_dim,
            joint_dim: self.hidden_dim,
            activation: if self.kind == ToyKind::Linear {
                ActivationKind::Identity
            } else {
                ActivationKind::QuickGelu
            },
            ln_eps: 1e-5,
            preprocess_mean: [mid; 3],
            preprocess_std: [0.5; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Plain,
    Clean,
    Attacked,
    Source,
    Donor,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureImage {
    pub name: String,
    pub role: ImageRole,
    pub image: ImageInput,
    pub label: Option<String>,
    pub group: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ToyFixture {
    pub spec: ToySpec,
    pub bundle: ModelBundle,
    /// Interpretation vocabulary.
    pub vocab: Vocabulary,
    /// Class prompts for zero-shot classification, when the kind has classes.
    pub class_vocab: Option<Vocabulary>,
    pub images: Vec<FixtureImage>,
    pub wordlists: Vec<WordList>,
    /// Patch index (row-major) of the planted text patch, for the attack kind.
    pub attack_patch: Option<usize>,
}

impl ToyFixture {
    pub fn images_with_role(&self, role: ImageRole) -> impl Iterator<Item = &FixtureImage> {
        self.images.iter().filter(move |i| i.role == role)
    }

    pub fn wordlist(&self, id: &str) -> Option<&WordList> {
        self.wordlists.iter().find(|w| w.id == id)
    }
}

/// Orthonormal directions in the complement of the all-ones vector.
fn zero_mean_basis(d: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let mut basis: Vec<Vec<f64>> = vec![ones];
    while basis.len() < count + 1 {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis.remove(0);
    basis
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Tensor builder working in `f64` until the end.
struct Weights {
    spec: ToySpec,
    manifest: Manifest,
    patch_dirs: [Vec<f64>; 3],
    class_embedding: Vec<f64>,
    pos: Vec<Vec<f64>>,
    /// Per block: `(in_dir, out_dir, gain)` routes of head 0's value/output.
    routes: Vec<Vec<(Vec<f64>, Vec<f64>, f64)>>,
}

impl Weights {
    fn new(spec: &ToySpec) -> Self {
        let manifest = spec.manifest();
        let d = spec.hidden_dim;
        Self {
            spec: spec.clone(),
            patch_dirs: [vec![0.0; d], vec![0.0; d], vec![0.0; d]],
            class_embedding: vec![0.0; d],
            pos: vec![vec![0.0; d]; manifest.seq_len()],
            routes: vec![Vec::new(); spec.num_layers],
            manifest,
        }
    }

    fn build(self) -> Result<ModelBundle> {
        let m = &self.manifest;
        let (d, p2) = (m.hidden_dim, m.patch_size * m.patch_size);
        let mut patch = vec![0.0f32; d * m.patch_dim()];
        for (c, dir) in self.patch_dirs.iter().enumerate() {
            for (row, &v) in dir.iter().enumerate() {
                for k in 0..p2 {
                    patch[row * m.patch_dim() + c * p2 + k] = (v / p2 as f64) as f32;
                }
            }
        }
        let mut tensors = vec![
            Tensor::new(vec![d, m.patch_dim()], patch)?,
            Tensor::from_vec(to_f32(&self.class_embedding)),
            Tensor::from_rows(&self.pos.iter().map(|r| to_f32(r)).collect::<Vec<_>>())?,
        ];
        let dh = m.head_dim();
        for routes in &self.routes {
            if routes.len() > dh {
                return Err(Error::Config("more value routes than head dimensions".into()));
            }
            let mut v = vec![0.0f32; d * d];
            let mut out = vec![0.0f32; d * d];
            for (r, (input, output, gain)) in routes.iter().enumerate() {
                for c in 0..d {
                    v[r * d + c] = input[c] as f32;
                    out[c * d + r] = (output[c] * gain) as f32;
                }
            }
            let zd = || Tensor::zeros(&[d]);
            tensors.extend([
                Tensor::from_vec(vec![1.0; d]),
                zd(),
                Tensor::zeros(&[d, d]),
                zd(),
                Tensor::zeros(&[d, d]),
                zd(),
                Tensor::new(vec![d, d], v)?,
                zd(),
                Tensor::new(vec![d, d], out)?,
                zd(),
                Tensor::from_vec(vec![1.0; d]),
                zd(),
                Tensor::zeros(&[m.mlp_dim, d]),
                Tensor::zeros(&[m.mlp_dim]),
                Tensor::zeros(&[d, m.mlp_dim]),
                zd(),
            ]);
        }
        tensors.extend([Tensor::from_vec(vec![1.0; d]), Tensor::zeros(&[d]), Tensor::eye(d)]);
        let _ = &self.spec;
        ModelBundle::from_tensors(self.manifest, tensors)
    }
}

fn vocab_from_dirs(id: &str, entries: &[(&str, Vec<f64>)]) -> Result<Vocabulary> {
    let texts = entries.iter().map(|(t, _)| t.to_string()).collect();
    let rows: Vec<Vec<f32>> = entries
        .iter()
        .map(|(_, v)| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / n) as f32).collect()
        })
        .collect();
    Vocabulary::new(id, texts, Tensor::from_rows(&rows)?)
}

/// Scene image from a per-patch color grid.
fn scene(spec: &ToySpec, colors: &[[u8; 3]], boxes: Vec<BoxAnnotation>) -> Result<ImageInput> {
    let size = (spec.patch_size * spec.grid) as u32;
    let mut img = ImageInput::solid(size, size, [MID; 3])?;
    let p = spec.patch_size as u32;
    for (i, c) in colors.iter().enumerate() {
        let (gy, gx) = ((i / spec.grid) as u32, (i % spec.grid) as u32);
        img.fill_rect(gx * p, gy * p, (gx + 1) * p, (gy + 1) * p, *c);
    }
    img.with_boxes(boxes)
}

fn patch_box(spec: &ToySpec, label: &str, cells: &[usize]) -> Vec<BoxAnnotation> {
    let p = spec.patch_size as u32;
    cells
        .iter()
        .map(|&c| {
            let (gy, gx) = ((c / spec.grid) as u32, (c % spec.grid) as u32);
            BoxAnnotation::new(label, gx * p, gy * p, (gx + 1) * p, (gy + 1) * p)
        })
        .collect()
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| (rng.random_range(-1.0..1.0) * scale) as f32).collect()).expect("positive shape")
}

fn random_image(spec: &ToySpec, rng: &mut ChaCha8Rng) -> Result<ImageInput> {
    let size = (spec.patch_size * spec.grid) as u32;
    let pixels = (0..size * size * 3).map(|_| rng.random::<u8>()).collect();
    ImageInput::new(size, size, pixels, Vec::new())
}

fn random_vocab(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vocabulary> {
    let rows: Vec<Vec<f32>> = (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut *rng)).map(|x: f64| x as f32).collect())
        .collect();
    let texts = (0..count).map(|i| format!("word{i:02}")).collect();
    Vocabulary::new("random", texts, Tensor::from_rows(&rows)?)
}

/// Dense random weights; with `linear`, LN gammas are zero (blocks become
/// `x ↦ x + c`) and the MLP activation is the identity.
fn dense_random(spec: &ToySpec, linear: bool, rng: &mut ChaCha8Rng) -> Result<ModelBundle> {
    let m = spec.manifest();
    let (d, mlp) = (m.hidden_dim, m.mlp_dim);
    let s_in = 1.0 / (d as f64).sqrt();
    let mut tensors = vec![
        random_tensor(&[d, m.patch_dim()], 1.0 / (m.patch_dim() as f64).sqrt(), rng),
        random_tensor(&[d], 1.0, rng),
        random_tensor(&[m.seq_len(), d], 0.5, rng),
    ];
    for _ in 0..m.num_layers {
        let gamma = |rng: &mut ChaCha8Rng| {
            if linear {
                Tensor::zeros(&[d])
            } else {
                Tensor::from_vec((0..d).map(|_| 1.0 + rng.random_range(-0.2..0.2)).collect())
            }
        };
        let g1 = gamma(rng);
        let b1 = random_tensor(&[d], 0.1, rng);
        tensors.extend([g1, b1]);
        for _ in 0..4 {
            tensors.push(random_tensor(&[d, d], 2.0 * s_in, rng));
            tensors.push(random_tensor(&[d], 0.1, rng));
        }
        let g2 = gamma(rng);
        tensors.extend([
            g2,
            random_tensor(&[d], 0.1, rng),
            random_tensor(&[mlp, d], s_in, rng),
            random_tensor(&[mlp], 0.1, rng),
            random_tensor(&[d, mlp], 1.0 / (mlp as f64).sqrt(), rng),
            random_tensor(&[d], 0.1, rng),
        ]);
    }
    tensors.extend([
        Tensor::from_vec((0..d).map(|_| 1.0 + rng.random_range(-0.2..0.2)).collect()),
        random_tensor(&[d], 0.1, rng),
        random_tensor(&[m.joint_dim, d], s_in, rng),
    ]);
    ModelBundle::from_tensors(m, tensors)
}

const RED: [u8; 3] = [255, MID, MID];
const GREEN: [u8; 3] = [MID, 255, MID];
const BLUE: [u8; 3] = [MID, MID, 255];

/// Builds the toy encoder, vocabularies and fixture images for `spec`.
/// Identical specs give bitwise identical fixtures.
pub fn make_toy_model(spec: &ToySpec) -> Result<ToyFixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x746f_6b65_6e6c_656e);
    match spec.kind {
        ToyKind::Random | ToyKind::Linear => {
            let bundle = dense_random(spec, spec.kind == ToyKind::Linear, &mut rng)?;
            let vocab = random_vocab(12, bundle.manifest.joint_dim, &mut rng)?;
            let images = (0..3)
                .map(|i| {
                    Ok(FixtureImage {
                        name: format!("random{i}"),
                        role: ImageRole::Plain,
                        image: random_image(spec, &mut rng)?,
                        label: None,
                        group: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ToyFixture {
                spec: spec.clone(),
                bundle,
                vocab,
                class_vocab: None,
                images,
                wordlists: Vec::new(),
                attack_patch: None,
            })
        }
        ToyKind::Identity => identity_fixture(spec, &mut rng),
        ToyKind::PlantedAttack => attack_fixture(spec, &mut rng),
        ToyKind::TwoConcept => two_concept_fixture(spec, &mut rng),
        ToyKind::Spurious => spurious_fixture(spec, &mut rng),
    }
}

/// Red "apple" patches on a blue "sky" with a green "grass" bottom row.
/// Positions carry a shared "blank" offset plus a small unique signature.
fn identity_fixture(spec: &ToySpec, rng: &mut ChaCha8Rng) -> Result<ToyFixture> {
    let dirs = zero_mean_basis(spec.hidden_dim, spec.hidden_dim - 1, rng);
    let mut w = Weights::new(spec);
    w.patch_dirs = [dirs[0].clone(), dirs[1].clone(), dirs[2].clone()];
    w.class_embedding = dirs[4].clone();
    for p in w.pos.iter_mut() {
        let mut v = scaled(&dirs[3], 0.3);
        for extra in &dirs[5..] {
            v = add(&v, &scaled(extra, 0.05 * rng.random_range(-1.0..1.0)));
        }
        *p = v;
    }
    let bundle = w.build()?;
    let vocab = vocab_from_dirs(
        "identity",
        &[
            ("apple", dirs[0].clone()),
            ("grass", dirs[1].clone()),
            ("sky", dirs[2].clone()),
            ("blank", dirs[3].clone()),
            ("photo", dirs[4].clone()),
        ],
    )?;
    let g = spec.grid;
    let apple_cells: Vec<usize> = vec![0, 1, g, g + 1];
    let mut colors = vec![BLUE; g * g];
    for &c in &apple_cells {
        colors[c] = RED;
    }
    for c in colors.iter_mut().skip(g * (g - 1)) {
        *c = GREEN;
    }
    let main = scene(spec, &colors, vec![BoxAnnotation::new("apple", 0, 0, 2 * spec.patch_size as u32, 2 * spec.patch_size as u32)])?;
    let mut shifted = colors.clone();
    shifted.rotate_right(1);
    let images = vec![
        FixtureImage {
            name: "apple_scene".into(),
            role: ImageRole::Plain,
            image: main,
            label: Some("apple".into()),
            group: None,
        },
        FixtureImage {
            name: "apple_scene_shifted".into(),
            role: ImageRole::Plain,
            image: scene(spec, &shifted, patch_box(spec, "apple", &apple_cells.iter().map(|c| (c + 1) % (g * g)).collect::<Vec<_>>()))?,
            label: Some("apple".into()),
            group: None,
        },
    ];
    Ok(ToyFixture {
        spec: spec.clone(),
        bundle,
        vocab,
        class_vocab: None,
        images,
        wordlists: Vec::new(),
        attack_patch: None,
    })
}

/// Vocabulary with one entry per token of `patches` under `bundle`: entry
/// `token_j` is the projected, normalized layer-0 token `j`. Under an
/// identity model every `(i, j)` retrieves `token_j` with cosine 1.
pub fn planted_vocabulary(bundle: &ModelBundle, patches: &Tensor) -> Result<Vocabulary> {
    let trace = forward_full(patches, bundle, None)?;
    let rows = trace.states[0]
        .rows()
        .map(|r| crate::engine::project_to_joint(r, bundle))
        .collect::<Result<Vec<_>>>()?;
    let texts = (0..rows.len()).map(|j| format!("token_{j}")).collect();
    Vocabulary::new("planted", texts, Tensor::from_rows(&rows)?)
}

/// Forest scene; the attacked copy carries one red "text" patch. Block 1
/// averages every token into every other with one head, mapping the text
/// concept to "ocean" at a gain that outweighs the whole forest. The text
/// patch's own residual is large enough that its ablated interpretation
/// stays "text".
fn attack_fixture(spec: &ToySpec, rng: &mut ChaCha8Rng) -> Result<ToyFixture> {
    let dirs = zero_mean_basis(spec.hidden_dim, 8, rng);
    let (forest, ocean, text, cls) = (&dirs[0], &dirs[1], &dirs[2], &dirs[3]);
    let text_scale = rng.random_range(400.0..600.0);
    let forest_gain = rng.random_range(0.8..1.2);
    let text_gain = rng.random_range(35.0..45.0);
    let mut w = Weights::new(spec);
    w.patch_dirs = [scaled(text, text_scale), forest.clone(), vec![0.0; spec.hidden_dim]];
    w.class_embedding = scaled(cls, 10.0);
    w.routes[0] = vec![(forest.clone(), forest.clone(), forest_gain), (text.clone(), ocean.clone(), text_gain)];
    let bundle = w.build()?;

    let vocab = vocab_from_dirs(
        "attack-words",
        &[
            ("forest", forest.clone()),
            ("ocean", ocean.clone()),
            ("text", text.clone()),
            ("image", cls.clone()),
            ("runway", dirs[4].clone()),
            ("parking", dirs[5].clone()),
        ],
    )?;
    let class_vocab = vocab_from_dirs(
        "attack-classes",
        &[
            ("forest", forest.clone()),
            ("ocean", ocean.clone()),
            ("runway", dirs[4].clone()),
            ("parking", dirs[5].clone()),
            ("residential", dirs[6].clone()),
        ],
    )?;
    let t = spec.grid * spec.grid;
    let clean_colors: Vec<[u8; 3]> = (0..t).map(|_| [MID, rng.random_range(200..=255), MID]).collect();
    let attack_patch = rng.random_range(0..t);
    let mut attacked = clean_colors.clone();
    attacked[attack_patch] = RED;
    let images = vec![
        FixtureImage {
            name: "forest".into(),
            role: ImageRole::Clean,
            image: scene(spec, &clean_colors, Vec::new())?,
            label: Some("forest".into()),
            group: None,
        },
        FixtureImage {
            name: "forest_attacked".into(),
            role: ImageRole::Attacked,
            image: scene(spec, &attacked, patch_box(spec, "text", &[attack_patch]))?,
            label: Some("forest".into()),
            group: None,
        },
    ];
    Ok(ToyFixture {
        spec: spec.clone(),
        bundle,
        vocab,
        class_vocab: Some(class_vocab),
        images,
        wordlists: vec![WordList::builtin("typographic", MatchMode::RemoveMatching)?],
        attack_patch: Some(attack_patch),
    })
}

/// Road scenes with "car" patches (highway) or "plane" patches (airport).
/// The class prompts are `road+car` and `road+plane`, so swapping car tokens
/// for plane tokens flips the prediction.
fn two_concept_fixture(spec: &ToySpec, rng: &mut ChaCha8Rng) -> Result<ToyFixture> {
    let dirs = zero_mean_basis(spec.hidden_dim, 8, rng);
    let (car, road, plane, cls) = (&dirs[0], &dirs[1], &dirs[2], &dirs[3]);
    let mut w = Weights::new(spec);
    w.patch_dirs = [car.clone(), road.clone(), plane.clone()];
    w.class_embedding = scaled(cls, 10.0);
    w.routes[0] = vec![
        (car.clone(), car.clone(), rng.random_range(0.8..1.2)),
        (road.clone(), road.clone(), rng.random_range(0.8..1.2)),
        (plane.clone(), plane.clone(), rng.random_range(0.8..1.2)),
    ];
    let bundle = w.build()?;
    let vocab = vocab_from_dirs(
        "entity-words",
        &[
            ("car", car.clone()),
            ("road", road.clone()),
            ("plane", plane.clone()),
            ("image", cls.clone()),
            ("grass", dirs[4].clone()),
        ],
    )?;
    let class_vocab = vocab_from_dirs(
        "entity-classes",
        &[
            ("highway", add(road, car)),
            ("airport", add(road, plane)),
            ("forest", dirs[4].clone()),
        ],
    )?;
    let t = spec.grid * spec.grid;
    let mut images = Vec::new();
    for (role, vehicle, label, count) in [(ImageRole::Source, RED, "highway", 3), (ImageRole::Donor, BLUE, "airport", 2)] {
        for n in 0..count {
            let mut colors = vec![GREEN; t];
            let k = rng.random_range(1..=3.min(t - 1));
            let mut cells: Vec<usize> = (0..t).collect();
            for i in 0..k {
                let j = rng.random_range(i..t);
                cells.swap(i, j);
                colors[cells[i]] = vehicle;
            }
            images.push(FixtureImage {
                name: format!("{label}{n}"),
                role,
                image: scene(spec, &colors, Vec::new())?,
                label: Some(label.into()),
                group: None,
            });
        }
    }
    Ok(ToyFixture {
        spec: spec.clone(),
        bundle,
        vocab,
        class_vocab: Some(class_vocab),
        images,
        wordlists: vec![
            WordList::builtin("car", MatchMode::RemoveMatching)?,
            WordList::builtin("airplane", MatchMode::RemoveMatching)?,
        ],
        attack_patch: None,
    })
}

/// Portraits with a few hair patches (red channel: gray `+`, dark `−`), many
/// gender patches (green channel: male `+`, female `−`) and blue skin.
/// Aggregation into CLS happens in the last block. Training images tie
/// gray hair to men and dark hair to women 9 times out of 10; the test split
/// is balanced over the four (hair, gender) groups.
fn spurious_fixture(spec: &ToySpec, rng: &mut ChaCha8Rng) -> Result<ToyFixture> {
    let dirs = zero_mean_basis(spec.hidden_dim, 8, rng);
    let (hair, gender, skin, cls) = (&dirs[0], &dirs[1], &dirs[2], &dirs[3]);
    let mut w = Weights::new(spec);
    w.patch_dirs = [hair.clone(), gender.clone(), skin.clone()];
    w.class_embedding = scaled(cls, 1.0);
    let last = spec.num_layers - 1;
    w.routes[last] = vec![
        (hair.clone(), hair.clone(), 1.0),
        (gender.clone(), gender.clone(), 1.0),
        (skin.clone(), skin.clone(), 1.0),
    ];
    let bundle = w.build()?;
    let neg = |v: &Vec<f64>| scaled(v, -1.0);
    let vocab = vocab_from_dirs(
        "portrait-words",
        &[
            ("gray hair", hair.clone()),
            ("hair", neg(hair)),
            ("male", gender.clone()),
            ("female", neg(gender)),
            ("face", skin.clone()),
            ("image", cls.clone()),
        ],
    )?;
    let t = spec.grid * spec.grid;
    let portrait = |gray: bool, male: bool, rng: &mut ChaCha8Rng| -> Result<ImageInput> {
        let n_hair = rng.random_range(2..=3);
        let n_gender = rng.random_range(t / 2..=t / 2 + 2).min(t - n_hair - 1);
        let mut cells: Vec<usize> = (0..t).collect();
        for i in 0..t {
            let j = rng.random_range(i..t);
            cells.swap(i, j);
        }
        let mut colors = vec![BLUE; t];
        for &c in &cells[..n_hair] {
            let r = if gray { rng.random_range(230..=255) } else { rng.random_range(0..=25) };
            colors[c] = [r, MID.wrapping_add(rng.random_range(0..12)), MID];
        }
        for &c in &cells[n_hair..n_hair + n_gender] {
            let g = if male { rng.random_range(230..=255) } else { rng.random_range(0..=25) };
            colors[c] = [MID.wrapping_add(rng.random_range(0..12)), g, MID];
        }
        scene(spec, &colors, Vec::new())
    };
    let mut images = Vec::new();
    let group_name = |gray: bool, male: bool| format!("{}/{}", if gray { "gray" } else { "not gray" }, if male { "male" } else { "female" });
    for n in 0..512 {
        let gray = n % 2 == 0;
        let male = if rng.random_range(0..10) < 9 { gray } else { !gray };
        images.push(FixtureImage {
            name: format!("train{n}"),
            role: ImageRole::Train,
            image: portrait(gray, male, rng)?,
            label: Some(if gray { "gray" } else { "not gray" }.into()),
            group: Some(group_name(gray, male)),
        });
    }
    for n in 0..128 {
        let (gray, male) = (n % 2 == 0, (n / 2) % 2 == 0);
        images.push(FixtureImage {
            name: format!("test{n}"),
            role: ImageRole::Test,
            image: portrait(gray, male, rng)?,
            label: Some(if gray { "gray" } else { "not gray" }.into()),
            group: Some(group_name(gray, male)),
        });
    }
    Ok(ToyFixture {
        spec: spec.clone(),
        bundle,
        vocab,
        class_vocab: None,
        images,
        wordlists: vec![WordList::builtin("hair", MatchMode::KeepMatching)?],
        attack_patch: None,
    })
}

/// Preprocesses every fixture image of `role`.
pub fn fixture_inputs(fx: &ToyFixture, role: ImageRole) -> Result<Vec<Tensor>> {
    fx.images_with_role(role).map(|i| preprocess(&i.image, &fx.bundle.manifest)).collect()
}
