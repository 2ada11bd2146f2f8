// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints one PASS/FAIL line; exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tokenlens::edit::{InterventionPlan, Replacement};
use tokenlens::engine::{block_ablated, block_full, classify_trace, forward_ablated_from, forward_full, project_to_joint, ActivationTrace, TokenRef};
use tokenlens::eval::experiments::{
    debias_experiment, entity_intervention_experiment, typographical_experiment, AttackOptions, DebiasOptions, EntityOptions, LabeledInput,
    COND_NONE, COND_OURS, COND_RANDOM,
};
use tokenlens::eval::probe::{train_probe, ProbeConfig, ProbeModel};
use tokenlens::eval::toy::{make_toy_model, planted_vocabulary, FixtureImage, ImageRole, ToyFixture, ToyKind, ToySpec};
use tokenlens::interpret::{calibrate_drift, interpret, interpret_smoothed, smoothed_ablated_from, DriftTable, Smoothing};
use tokenlens::io::image::{preprocess, BoxAnnotation, ImageInput};
use tokenlens::saliency::{iop, rollout};
use tokenlens::tensor::{layer_norm, linear, Tensor};
use tokenlens::{ModelBundle, Vocabulary};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn toy(kind: ToyKind, seed: u64, layers: usize, dim: usize, heads: usize) -> Result<ToyFixture, String> {
    let mut spec = ToySpec::new(kind, seed);
    spec.num_layers = layers;
    spec.hidden_dim = dim;
    spec.num_heads = heads;
    ok(make_toy_model(&spec))
}

fn patches(fx: &ToyFixture, img: &ImageInput) -> Result<Tensor, String> {
    ok(preprocess(img, &fx.bundle.manifest))
}

fn random_image(size: usize, rng: &mut ChaCha8Rng) -> ImageInput {
    let pixels = (0..size * size * 3).map(|_| rng.random::<u8>()).collect();
    ImageInput::new(size as u32, size as u32, pixels, Vec::new()).expect("valid image")
}

fn gaussian(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| (scale * Distribution::<f64>::sample(&StandardNormal, rng)) as f32).collect()
}

fn labeled(fx: &ToyFixture, role: ImageRole) -> Result<Vec<LabeledInput>, String> {
    fx.images_with_role(role)
        .map(|i: &FixtureImage| {
            Ok(LabeledInput {
                id: i.name.clone(),
                patches: patches(fx, &i.image)?,
                label: i.label.clone().ok_or("unlabelled fixture image")?,
                group: i.group.clone(),
            })
        })
        .collect()
}

fn random_model_configs() -> impl Iterator<Item = (u64, usize, usize, usize)> {
    (0..200u64).map(|m| {
        let l = [1, 2, 4][(m % 3) as usize];
        let d = [8, 16][((m / 3) % 2) as usize];
        let h = [1, 2][((m / 6) % 2) as usize];
        (m, l, d, h)
    })
}

fn single_token_equivalence() -> Check {
    let mut worst = 0.0f64;
    let mut rows = 0;
    for (seed, l, d, h) in random_model_configs() {
        let fx = toy(ToyKind::Random, seed, l, d, h)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = ok(forward_full(&patches(&fx, &fx.images[0].image)?, &fx.bundle, None))?;
        for k in 1..=l {
            let mut inputs: Vec<Vec<f32>> = (0..2).map(|_| gaussian(d, 1.0, &mut rng)).collect();
            inputs.push(trace.states[k - 1].row(rng.random_range(0..trace.states[0].num_rows())).to_vec());
            for x in inputs {
                let ablated = ok(block_ablated(&x, k, &fx.bundle))?;
                let full = ok(block_full(&ok(Tensor::new(vec![1, d], x))?, k, &fx.bundle, None))?;
                for (a, b) in ablated.iter().zip(full.next.row(0)) {
                    worst = worst.max((*a as f64 - *b as f64).abs());
                }
                rows += 1;
            }
        }
    }
    ensure(worst < 1e-5, || format!("max abs diff {worst:e}"))?;
    Ok(format!("200 models, {rows} rows, max |diff| {worst:.2e} < 1e-5"))
}

fn locality() -> Check {
    let mut runner = TestRunner::new(PropConfig {
        cases: 100,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (any::<u64>(), 0usize..3, 0usize..2, 0usize..2, any::<prop::sample::Index>(), any::<prop::sample::Index>(), any::<u64>());
    let result = runner.run(&strategy, |(seed, li, di, hi, layer_ix, pos_ix, noise_seed)| {
        let (l, d, h) = ([1, 2, 4][li], [8, 16][di], [1, 2][hi]);
        let fx = toy(ToyKind::Random, seed, l, d, h).map_err(TestCaseError::fail)?;
        let x = patches(&fx, &fx.images[0].image).map_err(TestCaseError::fail)?;
        let trace = forward_full(&x, &fx.bundle, None).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let n = trace.states[0].num_rows();
        let token = TokenRef::new(1 + layer_ix.index(l + 1), pos_ix.index(n));
        let base = forward_ablated_from(token, &trace, &fx.bundle).map_err(|e| TestCaseError::fail(e.to_string()))?;

        // every other row of every state replaced by noise
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut other: ActivationTrace = trace.clone();
        for state in other.states.iter_mut() {
            for j in (0..n).filter(|&j| j != token.position) {
                state.row_mut(j).copy_from_slice(&gaussian(d, 5.0, &mut rng));
            }
        }
        let perturbed = forward_ablated_from(token, &other, &fx.bundle).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(base.iter().zip(&perturbed).all(|(a, b)| a.to_bits() == b.to_bits()));

        // at layer 1, other image patches may change freely
        if token.layer == 1 && token.position > 0 {
            let mut y = x.clone();
            let pd = y.last_dim();
            for p in (0..y.num_rows()).filter(|&p| p + 1 != token.position) {
                y.row_mut(p).copy_from_slice(&gaussian(pd, 1.0, &mut rng));
            }
            let t2 = forward_full(&y, &fx.bundle, None).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let again = forward_ablated_from(token, &t2, &fx.bundle).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(base.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok("100 random cases, outputs bitwise identical".into())
}

fn random_vocab(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vocabulary, String> {
    let mut rows: Vec<Vec<f32>> = (0..count)
        .map(|_| {
            let v = gaussian(dim, 1.0, rng);
            let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            v.iter().map(|x| (*x as f64 / n) as f32).collect()
        })
        .collect();
    // exact duplicates force ties
    for i in 0..20 {
        rows[count - 1 - i] = rows[i * 7].clone();
    }
    let texts = (0..count).map(|i| format!("w{i}")).collect();
    ok(Vocabulary::new("random", texts, ok(Tensor::from_rows(&rows))?))
}

fn retrieval_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let fx = toy(ToyKind::Random, 77, 2, 16, 2)?;
    let vocab = random_vocab(1000, fx.bundle.manifest.joint_dim, &mut rng)?;
    let traces = fx
        .images
        .iter()
        .map(|i| ok(forward_full(&patches(&fx, &i.image)?, &fx.bundle, None)))
        .collect::<Result<Vec<_>, _>>()?;
    let n = fx.bundle.manifest.seq_len();
    let mut ties = 0;
    for t in 0..50 {
        let trace = &traces[t % traces.len()];
        let token = TokenRef::new(rng.random_range(1..=3), rng.random_range(0..n));
        let got = ok(interpret(token, trace, &fx.bundle, &vocab, None))?.ranking;
        let e = ok(project_to_joint(&ok(forward_ablated_from(token, trace, &fx.bundle))?, &fx.bundle))?;
        let en = e.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let mut oracle: Vec<(usize, f64)> = (0..vocab.len())
            .map(|w| {
                let v = vocab.embedding(w);
                let vn = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                let dot: f64 = e.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum();
                (w, dot / (en * vn))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ties += oracle.windows(2).filter(|w| w[0].1 == w[1].1).count();
        ensure(got.len() == oracle.len(), || format!("token {token:?}: ranking has {} entries", got.len()))?;
        for (r, (g, (w, c))) in got.iter().zip(&oracle).enumerate() {
            ensure(g.index == *w && g.text == vocab.text(*w), || format!("token {token:?} rank {r}: got {} want {w}", g.index))?;
            ensure((g.cosine - c).abs() <= 1e-12, || format!("token {token:?} rank {r}: cosine {} vs {c}", g.cosine))?;
        }
    }
    Ok(format!("50 tokens x 1000 words, orders identical, {ties} exact ties broken by index"))
}

fn identity_interpretation() -> Check {
    let mut checked = 0;
    for seed in 0..5 {
        let fx = toy(ToyKind::Identity, seed, 3, 16, 2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images: Vec<ImageInput> = fx.images.iter().map(|i| i.image.clone()).collect();
        images.push(random_image(fx.bundle.manifest.image_size, &mut rng));
        for img in &images {
            let x = patches(&fx, img)?;
            let vocab = ok(planted_vocabulary(&fx.bundle, &x))?;
            let trace = ok(forward_full(&x, &fx.bundle, None))?;
            for i in 1..=fx.bundle.manifest.num_layers + 1 {
                for j in 0..fx.bundle.manifest.seq_len() {
                    let r = ok(interpret(TokenRef::new(i, j), &trace, &fx.bundle, &vocab, Some(1)))?;
                    let want = format!("token_{j}");
                    ensure(r.ranking[0].text == want, || format!("seed {seed} ({i}, {j}): top-1 {}", r.ranking[0].text))?;
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} tokens across all layers retrieve their planted word"))
}

fn final_layer_consistency() -> Check {
    let mut cases = 0;
    let mut fixtures = Vec::new();
    for seed in 0..10 {
        fixtures.push(toy(ToyKind::Random, seed, 1 + (seed as usize % 3), 16, 2)?);
    }
    fixtures.push(toy(ToyKind::PlantedAttack, 3, 2, 16, 2)?);
    fixtures.push(toy(ToyKind::TwoConcept, 3, 2, 16, 2)?);
    for fx in &fixtures {
        let vocab = fx.class_vocab.as_ref().unwrap_or(&fx.vocab);
        let l = fx.bundle.manifest.num_layers;
        for img in &fx.images {
            let trace = ok(forward_full(&patches(fx, &img.image)?, &fx.bundle, None))?;
            let a = ok(interpret(TokenRef::new(l + 1, 0), &trace, &fx.bundle, vocab, None))?.ranking;
            let b = ok(classify_trace(&trace, &fx.bundle, vocab))?;
            let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.index == y.index && x.text == y.text && x.cosine.to_bits() == y.cosine.to_bits());
            ensure(same, || format!("{:?} image {}: rankings differ", fx.spec.kind, img.name))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} images, rankings bitwise equal"))
}

fn bias_free(bundle: &mut ModelBundle) {
    let d = bundle.manifest.hidden_dim;
    for b in bundle.blocks.iter_mut() {
        b.ln1_beta = Tensor::zeros(&[d]);
        b.ln2_beta = Tensor::zeros(&[d]);
        b.q_bias = Tensor::zeros(&[d]);
        b.k_bias = Tensor::zeros(&[d]);
    }
}

fn zero_token_attention() -> Check {
    let (mut worst_logit, mut worst_row) = (0.0f64, 0.0f64);
    let mut cases = 0;
    for seed in 0..12u64 {
        let mut fx = toy(ToyKind::Random, seed, 1 + (seed as usize % 4), [8, 16][seed as usize % 2], [1, 2][(seed as usize / 2) % 2])?;
        bias_free(&mut fx.bundle);
        let m = fx.bundle.manifest.clone();
        let (n, dh) = (m.seq_len(), m.head_dim());
        let x = patches(&fx, &fx.images[0].image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 1..=m.num_layers {
            let j = rng.random_range(0..n);
            let plan = InterventionPlan::from_replacements(vec![Replacement::zero(k, j)]);
            let trace = ok(forward_full(&x, &fx.bundle, Some(&plan)))?;
            let w = &fx.bundle.blocks[k - 1];
            let ln = ok(layer_norm(trace.block_input(k), &w.ln1_gamma, &w.ln1_beta, m.ln_eps))?;
            let q = ok(linear(&ln, &w.q_weight, Some(&w.q_bias)))?;
            let kk = ok(linear(&ln, &w.k_weight, Some(&w.k_bias)))?;
            let attn = &trace.attentions[k - 1];
            for head in 0..m.num_heads {
                let cols = head * dh..(head + 1) * dh;
                for i in (0..n).filter(|&i| i != j) {
                    let s: f64 = q.row(i)[cols.clone()].iter().zip(&kk.row(j)[cols.clone()]).map(|(a, b)| *a as f64 * *b as f64).sum();
                    worst_logit = worst_logit.max((s / (dh as f64).sqrt()).abs());
                }
                let row = &attn.data()[(head * n + j) * n..(head * n + j + 1) * n];
                for p in row {
                    worst_row = worst_row.max((*p as f64 - 1.0 / n as f64).abs());
                }
            }
            cases += 1;
        }
    }
    ensure(worst_logit <= 1e-6, || format!("logit toward zeroed token {worst_logit:e}"))?;
    ensure(worst_row <= 1e-6, || format!("own attention row off uniform by {worst_row:e}"))?;
    Ok(format!("{cases} zeroed tokens, max |logit| {worst_logit:.1e}, max row deviation {worst_row:.1e}"))
}

fn smoothing_degeneracy() -> Check {
    // zero noise
    let fx = toy(ToyKind::Random, 5, 2, 16, 2)?;
    let (l, n) = (fx.bundle.manifest.num_layers, fx.bundle.manifest.seq_len());
    let trace = ok(forward_full(&patches(&fx, &fx.images[1].image)?, &fx.bundle, None))?;
    let zeros = DriftTable::zeros(l, n);
    let bits = |r: &[tokenlens::RankedText]| r.iter().map(|x| (x.index, x.cosine.to_bits())).collect::<Vec<_>>();
    for (t, samples) in [(TokenRef::new(1, 0), 1), (TokenRef::new(1, 5), 7), (TokenRef::new(2, 16), 3), (TokenRef::new(3, 2), 5)] {
        let plain = ok(interpret(t, &trace, &fx.bundle, &fx.vocab, None))?;
        let sm = ok(interpret_smoothed(t, &trace, &fx.bundle, &fx.vocab, &Smoothing::new(&zeros, samples, 9), None))?;
        ensure(bits(&plain.ranking) == bits(&sm.ranking), || format!("{t:?}: zero-sigma ranking differs"))?;
    }

    // fixed seed
    let noisy = DriftTable::constant(l, n, 0.3);
    for samples in [1, 16] {
        let s = Smoothing::new(&noisy, samples, 1234);
        let a = ok(interpret_smoothed(TokenRef::new(1, 4), &trace, &fx.bundle, &fx.vocab, &s, None))?;
        let b = ok(interpret_smoothed(TokenRef::new(1, 4), &trace, &fx.bundle, &fx.vocab, &s, None))?;
        ensure(bits(&a.ranking) == bits(&b.ranking), || format!("samples {samples}: seeded runs differ"))?;
    }

    // linear toy: gap of the sample mean
    let lin = toy(ToyKind::Linear, 11, 2, 16, 2)?;
    let d = lin.bundle.manifest.hidden_dim;
    let trace = ok(forward_full(&patches(&lin, &lin.images[0].image)?, &lin.bundle, None))?;
    let sigma = 0.5;
    let table = DriftTable::constant(2, n, sigma);
    let samples = 10_000;
    let mut worst_ratio = 0.0f64;
    for (i, t) in [TokenRef::new(1, 0), TokenRef::new(1, 7), TokenRef::new(2, 3)].into_iter().enumerate() {
        let exact = ok(forward_ablated_from(t, &trace, &lin.bundle))?;
        let sm = ok(smoothed_ablated_from(t, &trace, &lin.bundle, &Smoothing::new(&table, samples, 40 + i as u64)))?;
        let gap = exact.iter().zip(&sm).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>().sqrt();
        let blocks = (l + 1 - t.layer) as f64;
        let sigma_eff = sigma * (blocks * d as f64).sqrt();
        let bound = 3.0 * sigma_eff / (samples as f64).sqrt();
        ensure(gap < bound, || format!("{t:?}: gap {gap:.4} >= bound {bound:.4}"))?;
        worst_ratio = worst_ratio.max(gap / bound);
    }
    Ok(format!("zero sigma exact, seeded runs bitwise equal, LLN gap at 1e4 samples <= {:.2} of bound", worst_ratio))
}

fn drift_zero_case() -> Check {
    let mut cells = 0;
    for seed in 0..3 {
        let fx = toy(ToyKind::Identity, seed, 2, 16, 2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = fx.images.iter().map(|i| patches(&fx, &i.image)).collect::<Result<Vec<_>, _>>()?;
        for _ in 0..3 {
            inputs.push(patches(&fx, &random_image(fx.bundle.manifest.image_size, &mut rng))?);
        }
        let table = ok(calibrate_drift(&inputs, &fx.bundle, "identity"))?;
        ensure(table.sigma.iter().flatten().all(|&s| s == 0.0), || format!("seed {seed}: nonzero drift"))?;
        ensure(table.summary.cls_mean == 0.0 && table.summary.other_mean == 0.0, || "nonzero summary".into())?;
        cells += table.sigma.iter().map(Vec::len).sum::<usize>();
    }
    Ok(format!("{cells} drift cells, all exactly zero"))
}

fn rollout_and_iop() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let fx = toy(ToyKind::Random, seed, 1 + seed as usize % 4, 16, 2)?;
        let trace = ok(forward_full(&patches(&fx, &fx.images[0].image)?, &fx.bundle, None))?;
        for upto in 1..=fx.bundle.manifest.num_layers + 1 {
            let r = ok(rollout(&trace, upto))?;
            for row in r.rows() {
                worst = worst.max((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("rollout row sum off by {worst:e}"))?;

    let (g, p) = (4, 4);
    let cell = |r: usize, c: usize| -> Vec<bool> {
        let mut m = vec![false; g * g];
        m[r * g + c] = true;
        m
    };
    let contained = iop(&cell(1, 1), g, p, &[BoxAnnotation::new("x", 0, 0, 16, 16)]);
    let disjoint = iop(&cell(0, 0), g, p, &[BoxAnnotation::new("x", 8, 8, 16, 16)]);
    let mut four = vec![false; g * g];
    for c in [0, 1, 4, 5] {
        four[c] = true;
    }
    // truth covers three of the four masked cells
    let three = iop(&four, g, p, &[BoxAnnotation::new("x", 0, 0, 8, 4), BoxAnnotation::new("x", 0, 4, 4, 8)]);
    ensure(contained == Some(1.0), || format!("containment {contained:?}"))?;
    ensure(disjoint == Some(0.0), || format!("disjoint {disjoint:?}"))?;
    ensure(three == Some(0.75), || format!("three of four {three:?}"))?;
    ensure(iop(&[false; 16], g, p, &[]).is_none(), || "empty mask scored".into())?;
    Ok(format!("row sums within {worst:.1e}; IOP 1.0 / 0.0 / 0.75 exact"))
}

fn clusters(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu: Vec<f32> = (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let s = if y == 1 { 1.0 } else { -1.0 };
        let noise = gaussian(dim, 0.3, &mut rng);
        xs.push(mu.iter().zip(noise).map(|(m, e)| s * m + e).collect());
        ys.push(y);
    }
    (xs, ys)
}

fn probe_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (xs, ys) = clusters(60, 7, 4);
    let ys: Vec<usize> = ys.iter().enumerate().map(|(i, &y)| if i % 5 == 0 { 2 } else { y }).collect();
    let mut model = ProbeModel::zeros(3, 7);
    for p in model.w.iter_mut().chain(model.b.iter_mut()) {
        *p = rng.random_range(-0.5..0.5);
    }
    let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
    let (_, g) = model.loss_and_grad(&refs, &ys);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(0..model.w.len() + model.b.len());
        let (mut plus, mut minus) = (model.clone(), model.clone());
        let analytic = if k < model.w.len() {
            plus.w[k] += h;
            minus.w[k] -= h;
            g.w[k]
        } else {
            plus.b[k - model.w.len()] += h;
            minus.b[k - model.w.len()] -= h;
            g.b[k - model.w.len()]
        };
        let numeric = (plus.loss(&refs, &ys) - minus.loss(&refs, &ys)) / (2.0 * h);
        worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8));
    }
    ensure(worst < 1e-4, || format!("gradient relative error {worst:e}"))?;

    let (xs, ys) = clusters(2048, 16, 8);
    let cfg = ProbeConfig::default();
    let t = ok(train_probe(&xs, &ys, 2, &cfg))?;
    let acc = t.model.accuracy(&xs, &ys);
    ensure(cfg.epochs == 1 && cfg.lr == 1e-3, || "probe defaults changed".into())?;
    ensure(acc == 1.0, || format!("train accuracy {acc}"))?;
    Ok(format!("20 coords, max rel err {worst:.1e}; separable data 100% after 1 epoch ({} Adam steps, lr 1e-3)", t.model.step))
}

fn planted_attack() -> Check {
    let (mut guided, mut random, mut broken) = (0, 0, 0);
    let seeds = 100;
    for seed in 0..seeds {
        let fx = toy(ToyKind::PlantedAttack, seed, 2, 16, 2)?;
        let class_vocab = fx.class_vocab.as_ref().ok_or("attack fixture has no classes")?;
        let wl = fx.wordlist("typographic").ok_or("no typographic list")?;
        let opts = AttackOptions { seed, ..AttackOptions::default() };
        let r = ok(typographical_experiment(&labeled(&fx, ImageRole::Clean)?, &labeled(&fx, ImageRole::Attacked)?, wl, &fx.bundle, &fx.vocab, class_vocab, &opts))?;
        let row = |c: &str| r.row("attacked", c).ok_or(format!("missing row {c}"));
        let none = row(COND_NONE)?;
        if none.correct == none.total {
            continue;
        }
        broken += 1;
        guided += usize::from(row(COND_OURS)?.correct == row(COND_OURS)?.total);
        random += usize::from(row(COND_RANDOM)?.correct == row(COND_RANDOM)?.total);
    }
    ensure(broken == seeds as usize, || format!("attack succeeded in only {broken}/{seeds} fixtures"))?;
    let (g, r) = (100.0 * guided as f64 / broken as f64, 100.0 * random as f64 / broken as f64);
    ensure(guided == broken, || format!("guided restores {g:.0}%"))?;
    ensure(r <= 50.0, || format!("random restores {r:.0}%"))?;
    Ok(format!("{seeds} fixtures: guided restores {g:.0}%, random {r:.0}% (<= 50%)"))
}

fn two_concept_swap() -> Check {
    let seeds = 50;
    let mut flipped = 0;
    let mut total = 0;
    for seed in 0..seeds {
        let fx = toy(ToyKind::TwoConcept, seed, 2, 16, 2)?;
        let class_vocab = fx.class_vocab.as_ref().ok_or("no classes")?;
        let opts = EntityOptions {
            seed,
            ..EntityOptions::new("airport")
        };
        let r = ok(entity_intervention_experiment(
            &labeled(&fx, ImageRole::Source)?,
            &labeled(&fx, ImageRole::Donor)?,
            fx.wordlist("car").ok_or("no car list")?,
            fx.wordlist("airplane").ok_or("no airplane list")?,
            &fx.bundle,
            &fx.vocab,
            class_vocab,
            &opts,
        ))?;
        let ours = r.row("source", COND_OURS).ok_or("missing row")?;
        flipped += ours.correct;
        total += ours.total;
    }
    ensure(flipped == total, || format!("{flipped}/{total} flipped"))?;
    Ok(format!("{seeds} fixtures, {flipped}/{total} source images flip to the donor class"))
}

fn spurious_debias() -> Check {
    let mut lines = Vec::new();
    for seed in 0..3 {
        let fx = toy(ToyKind::Spurious, seed, 2, 16, 2)?;
        let opts = DebiasOptions {
            probe: ProbeConfig { seed, ..ProbeConfig::default() },
            ..DebiasOptions::default()
        };
        let r = ok(debias_experiment(
            &labeled(&fx, ImageRole::Train)?,
            &labeled(&fx, ImageRole::Test)?,
            fx.wordlist("hair").ok_or("no hair list")?,
            &fx.bundle,
            &fx.vocab,
            &opts,
        ))?;
        let worst = |c: &str| -> Result<f64, String> {
            Ok(r.row("test", c).and_then(|row| row.worst_group()).ok_or(format!("no groups for {c}"))?.accuracy_pct)
        };
        let (base, ours) = (worst(COND_NONE)?, worst(COND_OURS)?);
        ensure(ours > base, || format!("seed {seed}: worst group {base:.1}% -> {ours:.1}%"))?;
        lines.push(format!("{base:.0}->{ours:.0}"));
    }
    Ok(format!("worst-group accuracy per seed: {}", lines.join(", ")))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let minute = Duration::from_secs(60);
    let criteria = [
        Criterion { name: "single-token equivalence", budget: minute, run: single_token_equivalence },
        Criterion { name: "locality", budget: minute, run: locality },
        Criterion { name: "retrieval oracle equivalence", budget: minute, run: retrieval_oracle },
        Criterion { name: "identity-model interpretation", budget: minute, run: identity_interpretation },
        Criterion { name: "final-layer consistency", budget: minute, run: final_layer_consistency },
        Criterion { name: "zero-token attention", budget: minute, run: zero_token_attention },
        Criterion { name: "random-smoothing degeneracy", budget: 2 * minute, run: smoothing_degeneracy },
        Criterion { name: "drift zero case", budget: minute, run: drift_zero_case },
        Criterion { name: "rollout and IOP", budget: minute, run: rollout_and_iop },
        Criterion { name: "probe gradient and training", budget: minute, run: probe_checks },
        Criterion { name: "planted-attack repair", budget: 2 * minute, run: planted_attack },
        Criterion { name: "two-concept swap", budget: 2 * minute, run: two_concept_swap },
        Criterion { name: "spurious-feature debias", budget: 3 * minute, run: spurious_debias },
    ];
    println!("\nacceptance suite");
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(c.run)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())),
        };
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.budget => Err(format!("{detail}; over time budget")),
            other => other,
        };
        let timing = format!("{:.1}s/{}s", elapsed.as_secs_f64(), c.budget.as_secs());
        match outcome {
            Ok(detail) => println!("PASS  {:<30} {detail} [{timing}]", c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:<30} {why} [{timing}]", c.name);
            }
        }
    }
    println!(
        "SKIP  {:<30} needs an exported full-size checkpoint and the original datasets",
        "full-scale magnitudes"
    );
    println!("{} passed, {failed} failed, 1 skipped\n", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
