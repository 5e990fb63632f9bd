// SPDX-License-Identifier: MIT OR Apache-2.0

//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fail.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use traitscope::assessment::{format_delta, run_inventory, run_safety, AssessmentItem, PromptTemplate, Subscale};
use traitscope::background::{contrastive_feature_search, monosemanticity_check, FactorRegistry, SearchThresholds};
use traitscope::experiment::{replay, Experiment, Overrides, Request, SweepKind};
use traitscope::fixtures;
use traitscope::linalg::{self, Matrix};
use traitscope::pressure::direction_extract;
use traitscope::sae::{sae_gradients, SaeModel, SaeTrainConfig, SparsityInput};
use traitscope::steering::{coefficient_scan, linear_grid, over_steer_detect, OverSteerConfig};
use traitscope::synthetic::{mean_l0, random_orthogonal, random_unit, two_clusters, PlantedDictionary};
use traitscope::{FeatureKind, FeatureVector, PositionRule, SteeringHook};

const CLOSED_FORM_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const RECOVERY_MIN_COS: f64 = 0.9;
const SINGLE_PAIR_TOL: f64 = 1e-12;
const TWO_CLUSTER_MIN_COS: f64 = 0.99;
const ROTATION_TOL: f64 = 1e-6;
const SCAN_MONOTONE_SLACK: f64 = 1e-9;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_sae(d: usize, m: usize, rng: &mut ChaCha8Rng) -> SaeModel {
    SaeModel::new(
        0,
        random_matrix(d, m, rng),
        random_matrix(m, d, rng),
        random_vec(m, rng),
        random_vec(d, rng),
    )
    .unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sae_closed_form() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(4..=16);
        let m = rng.random_range(d.max(8)..=64);
        let sae = random_sae(d, m, &mut rng);
        let z = random_vec(d, &mut rng);
        let a_in = random_vec(m, &mut rng);

        let mut enc = vec![0.0; m];
        for (j, e) in enc.iter_mut().enumerate() {
            let mut s = sae.b_enc()[j];
            for k in 0..d {
                s += (z[k] - sae.b_dec()[k]) * sae.w_enc().get(k, j);
            }
            *e = if s > 0.0 { s } else { 0.0 };
        }
        let decode = |a: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|k| sae.b_dec()[k] + (0..m).map(|j| a[j] * sae.w_dec().get(j, k)).sum::<f64>())
                .collect()
        };
        let got_enc = sae.encode(&z).map_err(err)?;
        ensure(got_enc.iter().all(|&x| x >= 0.0), "negative activation")?;
        worst = worst
            .max(max_abs_diff(&got_enc, &enc))
            .max(max_abs_diff(&sae.decode(&a_in).map_err(err)?, &decode(&a_in)))
            .max(max_abs_diff(&sae.reconstruct(&z).map_err(err)?, &decode(&enc)));
    }
    ensure(worst <= CLOSED_FORM_TOL, format!("max deviation {worst:e}"))?;
    Ok(format!("100 instances, max deviation {worst:.1e} (tol {CLOSED_FORM_TOL:e})"))
}

/// Parameters flattened in the order w_enc, w_dec, b_enc, b_dec.
fn flatten(sae: &SaeModel) -> Vec<f64> {
    let mut p = sae.w_enc().as_slice().to_vec();
    p.extend_from_slice(sae.w_dec().as_slice());
    p.extend_from_slice(sae.b_enc());
    p.extend_from_slice(sae.b_dec());
    p
}

fn unflatten(d: usize, m: usize, p: &[f64]) -> SaeModel {
    let (we, rest) = p.split_at(d * m);
    let (wd, rest) = rest.split_at(m * d);
    let (be, bd) = rest.split_at(m);
    SaeModel::new(
        0,
        Matrix::from_vec(d, m, we.to_vec()).unwrap(),
        Matrix::from_vec(m, d, wd.to_vec()).unwrap(),
        be.to_vec(),
        bd.to_vec(),
    )
    .unwrap()
}

fn away_from_kinks(sae: &SaeModel, z: &[f64]) -> bool {
    let shifted: Vec<f64> = z.iter().zip(sae.b_dec()).map(|(a, b)| a - b).collect();
    let centered: Vec<f64> = sae
        .w_enc()
        .vec_mul(&shifted)
        .iter()
        .zip(sae.b_enc())
        .map(|(a, b)| a + b)
        .collect();
    let raw: Vec<f64> = sae
        .w_enc()
        .vec_mul(z)
        .iter()
        .zip(sae.b_enc())
        .map(|(a, b)| a + b)
        .collect();
    centered.iter().chain(&raw).all(|x| x.abs() > 1e-2)
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for &(d, m) in &[(1usize, 1usize), (3, 4)] {
        for input in [SparsityInput::Raw, SparsityInput::Centered] {
            let (sae, z) = loop {
                let sae = random_sae(d, m, &mut rng);
                let z = random_vec(d, &mut rng);
                if away_from_kinks(&sae, &z) {
                    break (sae, z);
                }
            };
            let alpha = 0.3;
            let g = sae_gradients(&sae, &z, alpha, input).map_err(err)?;
            let mut analytic = g.w_enc.as_slice().to_vec();
            analytic.extend_from_slice(g.w_dec.as_slice());
            analytic.extend_from_slice(&g.b_enc);
            analytic.extend_from_slice(&g.b_dec);
            let p = flatten(&sae);
            for i in 0..p.len() {
                let loss = |delta: f64| {
                    let mut q = p.clone();
                    q[i] += delta;
                    unflatten(d, m, &q).loss(&z, alpha, input).unwrap().total
                };
                let numeric = (loss(h) - loss(-h)) / (2.0 * h);
                let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    ensure(worst < GRAD_REL_TOL, format!("max relative error {worst:e}"))?;
    Ok(format!("{checked} partials, max relative error {worst:.1e} (tol {GRAD_REL_TOL:e})"))
}

fn planted_recovery() -> Check {
    let planted = PlantedDictionary::generate(16, 8, 20_000, 3, 11).map_err(err)?;
    let train = |alpha: f64, input: SparsityInput| -> std::result::Result<(f64, f64), String> {
        let config = SaeTrainConfig {
            alpha,
            learning_rate: 0.1,
            steps: 8000,
            batch_size: 64,
            seed: 5,
            n_features: 32,
            sparsity_input: input,
            ..SaeTrainConfig::default()
        };
        let (sae, _) = SaeModel::train(&planted.samples, &config).map_err(err)?;
        let min_cos = planted.recovery(&sae).into_iter().fold(f64::INFINITY, f64::min);
        Ok((min_cos, mean_l0(&sae, &planted.samples).map_err(err)?))
    };
    let alphas = [0.0, 0.01, 0.1];
    let run = |input| alphas.iter().map(|&a| train(a, input)).collect::<std::result::Result<Vec<_>, _>>();
    let centered = run(SparsityInput::Centered)?;
    let raw = run(SparsityInput::Raw)?;
    let fmt = |rs: &[(f64, f64)]| {
        rs.iter()
            .zip(alphas)
            .map(|((c, l0), a)| format!("a={a}: cos {c:.3} L0 {l0:.2}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let detail = format!("penalty on encoder activations [{}]; penalty on zW_enc+b_enc [{}]", fmt(&centered), fmt(&raw));
    let recovered = centered[2].0 > RECOVERY_MIN_COS;
    let l0_ok = centered.windows(2).all(|w| w[1].1 <= w[0].1);
    ensure(recovered && l0_ok, detail.clone())?;
    Ok(detail)
}

fn position_rules() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    for case in 0..50 {
        let t = rng.random_range(1..=12);
        let d = rng.random_range(1..=24);
        let base = random_vec(t * d, &mut rng);
        let feature = FeatureVector::new(FeatureKind::Background, 0, random_vec(d, &mut rng));
        let c = rng.random_range(0.5..5.0);
        for rule in [PositionRule::AllButLast, PositionRule::LastOnly] {
            let hook = SteeringHook::with_rule(feature.clone(), c, 0, rule).map_err(err)?;
            let mut resid = base.clone();
            hook.apply(&mut resid, t, d).map_err(err)?;
            for pos in 0..t {
                let touched = match rule {
                    PositionRule::AllButLast => pos + 1 < t,
                    PositionRule::LastOnly => pos + 1 == t,
                };
                for k in 0..d {
                    let i = pos * d + k;
                    let want = if touched { base[i] + c * feature.values[k] } else { base[i] };
                    ensure(
                        resid[i].to_bits() == want.to_bits(),
                        format!("case {case} {rule:?}: t={t} d={d} pos={pos} k={k}"),
                    )?;
                }
            }
        }
    }

    let model = common::toy_model(41);
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let prompts = ["Question: Are you calm? Answer: ", "Hello there", "A"];
    let mut n = 0;
    for prompt in prompts {
        for rule in [PositionRule::AllButLast, PositionRule::LastOnly] {
            for layer in 0..model.n_layers() {
                let f = FeatureVector::new(FeatureKind::Background, layer, random_unit(model.d_model(), &mut rng));
                let hook = SteeringHook::with_rule(f, 0.0, layer, rule).map_err(err)?;
                let plain = model.next_token_logits(prompt, &[]).map_err(err)?;
                let hooked = model.next_token_logits(prompt, &[hook.clone()]).map_err(err)?;
                ensure(
                    plain.iter().zip(&hooked).all(|(a, b)| a.to_bits() == b.to_bits()),
                    format!("c=0 changed logits for {prompt:?}"),
                )?;
                let g0 = model.generate_tokens(prompt, &[], 8).map_err(err)?;
                let g1 = model.generate_tokens(prompt, &[hook], 8).map_err(err)?;
                ensure(g0 == g1, format!("c=0 changed generation for {prompt:?}"))?;
                n += 1;
            }
        }
    }
    Ok(format!("50 tensor cases bitwise; {n} zero-coefficient model runs bitwise identical"))
}

fn direction_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let d = 12;
    let p = random_vec(d, &mut rng);
    let q = random_vec(d, &mut rng);
    let diff: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a - b).collect();
    let len = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    let expected: Vec<f64> = diff.iter().map(|x| x / len).collect();
    let single = direction_extract(&[p], &[q]).map_err(err)?;
    let single_err = max_abs_diff(&single.direction.values, &expected);
    ensure(single_err <= SINGLE_PAIR_TOL, format!("single pair off by {single_err:e}"))?;

    let axis = random_unit(d, &mut rng);
    let (pos, neg) = two_clusters(&axis, 3.0, 0.3, 60, 501);
    let r = direction_extract(&pos, &neg).map_err(err)?;
    let cos = linalg::cosine(&r.direction.values, &axis).abs();
    ensure(cos > TWO_CLUSTER_MIN_COS, format!("two-cluster |cos| {cos}"))?;

    let rot = random_orthogonal(d, 502);
    let apply = |v: &Vec<f64>| -> Vec<f64> { (0..d).map(|i| (0..d).map(|j| rot.get(i, j) * v[j]).sum()).collect() };
    let (pos2, neg2) = two_clusters(&axis, 1.0, 0.8, 20, 503);
    let before = direction_extract(&pos2, &neg2).map_err(err)?;
    let rpos: Vec<Vec<f64>> = pos2.iter().map(apply).collect();
    let rneg: Vec<Vec<f64>> = neg2.iter().map(apply).collect();
    let after = direction_extract(&rpos, &rneg).map_err(err)?;
    let rot_err = max_abs_diff(&after.direction.values, &apply(&before.direction.values));
    ensure(rot_err <= ROTATION_TOL, format!("rotation error {rot_err:e}"))?;
    Ok(format!(
        "single pair {single_err:.1e} (tol {SINGLE_PAIR_TOL:e}); two-cluster |cos| {cos:.5} (> {TWO_CLUSTER_MIN_COS}); rotation {rot_err:.1e} (tol {ROTATION_TOL:e})"
    ))
}

fn contrastive_search() -> Check {
    let model = common::toy_model(21);
    let planted = common::planted(&model, 64);
    let specs = common::marked_specs();
    let home_spec = specs.iter().find(|s| s.factor == common::HOME_FACTOR).ok_or("home factor missing")?;
    let pos = home_spec.categories[common::HOME_CATEGORY].clone();
    let neg: Vec<String> = home_spec
        .categories
        .iter()
        .filter(|(c, _)| c.as_str() != common::HOME_CATEGORY)
        .flat_map(|(_, p)| p.iter().cloned())
        .collect();
    let t = SearchThresholds::default();
    let found = contrastive_feature_search(&pos, &neg, &planted.sae, &model, t, 2).map_err(err)?;
    ensure(
        found == vec![planted.home_feature],
        format!("search returned {found:?}, planted {}", planted.home_feature),
    )?;
    let home = monosemanticity_check(planted.home_feature, common::HOME_FACTOR, &specs, &planted.sae, &model, t.tau_off)
        .map_err(err)?;
    ensure(home.pass, format!("home feature flagged on {:?}", home.violators))?;
    let dense = monosemanticity_check(
        planted.always_on_feature,
        common::HOME_FACTOR,
        &specs,
        &planted.sae,
        &model,
        t.tau_off,
    )
    .map_err(err)?;
    ensure(
        !dense.pass && dense.violators.len() == specs.len() - 1,
        format!("always-on feature report {dense:?}"),
    )?;
    Ok(format!(
        "found [{}]; home passes; always-on fails on all {} other factors",
        planted.home_feature,
        dense.violators.len()
    ))
}

fn scan_and_over_steer() -> Check {
    let mut points = 0;
    for seed in 0..4u64 {
        let toy = common::toy(seed);
        let a_id = common::toy_model(seed).option_token("A").map_err(err)?;
        let a = toy.unembedding(a_id).to_vec();
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let centered: Vec<f64> = a.iter().map(|x| x - mean).collect();
        let n = linalg::norm(&centered);
        let layer = toy.config().n_layers - 1;
        let feature = FeatureVector::new(FeatureKind::Pressure, layer, centered.iter().map(|x| x / n).collect());
        let model = traitscope::ModelHandle::new(toy);
        let items = fixtures::personality_items().map_err(err)?;
        for item in items.iter().take(3) {
            let prompt = PromptTemplate::default().render(item);
            let grid = linear_grid(0.0, 40.0, 2.0);
            let curve = coefficient_scan(&model, &feature, layer, &grid, &prompt, &["A", "B", "C", "D"]).map_err(err)?;
            let logits = &curve.logits["A"];
            ensure(
                logits.windows(2).all(|w| w[1] >= w[0] - SCAN_MONOTONE_SLACK),
                format!("A logit decreased (seed {seed}, item {}): {logits:?}", item.id),
            )?;
            points += logits.len();
        }
    }
    let cfg = OverSteerConfig::default();
    ensure(cfg.detect(fixtures::OVERSTEER_WOMAN), "WOMAN fixture not flagged")?;
    ensure(
        over_steer_detect(fixtures::OVERSTEER_WOMAN, cfg.window, cfg.max_repeat),
        "WOMAN fixture not flagged by over_steer_detect",
    )?;
    let clean = fixtures::clean_sentences();
    ensure(clean.len() == 200, format!("clean corpus has {} sentences", clean.len()))?;
    if let Some(bad) = clean.iter().find(|s| cfg.detect(s)) {
        return Err(format!("clean sentence flagged: {bad:?}"));
    }
    Ok(format!(
        "A logit non-decreasing over {points} grid points (slack {SCAN_MONOTONE_SLACK:e}); WOMAN flagged; 0/200 clean flagged"
    ))
}

fn random_items(rng: &mut ChaCha8Rng, safety: bool, set: usize) -> Vec<AssessmentItem> {
    let subscales: &[Subscale] = if safety { &Subscale::SAFETY } else { &Subscale::PERSONALITY };
    let n = rng.random_range(1..=12);
    let words = ["calm", "help", "wait", "leave", "ask", "share", "stop", "plan"];
    (0..n)
        .map(|i| {
            let n_opts = rng.random_range(2..=4);
            let keys: Vec<String> = ["A", "B", "C", "D"][..n_opts].iter().map(|s| s.to_string()).collect();
            let options = keys
                .iter()
                .map(|k| (k.clone(), words[rng.random_range(0..words.len())].to_string()))
                .collect();
            let aligned_keys: BTreeSet<String> = if safety {
                BTreeSet::from([keys[rng.random_range(0..n_opts)].clone()])
            } else {
                let mut s: BTreeSet<String> = keys.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
                if s.is_empty() {
                    s.insert(keys[0].clone());
                }
                s
            };
            AssessmentItem {
                id: format!("s{set}-{i:02}"),
                question: format!("Would you {}?", words[rng.random_range(0..words.len())]),
                options,
                subscale: subscales[rng.random_range(0..subscales.len())],
                aligned_keys,
            }
        })
        .collect()
}

/// Argmax over option logits straight from the model, first key on ties.
fn brute_force(model: &traitscope::ModelHandle, items: &[AssessmentItem]) -> std::result::Result<BTreeMap<Subscale, f64>, String> {
    let template = PromptTemplate::default();
    let mut counts: BTreeMap<Subscale, (u32, u32)> = BTreeMap::new();
    for item in items {
        let logits = model.next_token_logits(&template.render(item), &[]).map_err(err)?;
        let mut best_key = None;
        let mut best = f64::NEG_INFINITY;
        for key in item.options.keys() {
            let v = logits[model.option_token(key).map_err(err)? as usize];
            if v > best {
                best = v;
                best_key = Some(key);
            }
        }
        let e = counts.entry(item.subscale).or_default();
        e.1 += 1;
        if item.aligned_keys.contains(best_key.unwrap()) {
            e.0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(s, (a, t))| (s, 100.0 * a as f64 / t as f64))
        .collect())
}

fn scoring_oracle() -> Check {
    let model = common::toy_model(61);
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let template = PromptTemplate::default();
    for set in 0..200 {
        let safety = set % 2 == 1;
        let items = random_items(&mut rng, safety, set);
        let expected = brute_force(&model, &items)?;
        if safety {
            let got = run_safety(&model, &items, &[], &template).map_err(err)?;
            let avg = expected.values().sum::<f64>() / expected.len() as f64;
            ensure(got.categories == expected && got.average == avg, format!("set {set}: {got:?} vs {expected:?}"))?;
        } else {
            let got = run_inventory(&model, &items, &[], &template).map_err(err)?;
            ensure(got == expected, format!("set {set}: {got:?} vs {expected:?}"))?;
        }
    }
    let cases = [(93.0, 92.7, "92.7 ↓ (0.3)"), (78.0, 76.4, "76.4 ↓ (1.6)"), (4.3, 4.3, "4.3")];
    for (base, steered, want) in cases {
        let got = format_delta(base, steered);
        ensure(got == want, format!("format_delta({base}, {steered}) = {got:?}, want {want:?}"))?;
    }
    Ok("200 item sets exact; delta strings exact".into())
}

fn registry_fidelity() -> Check {
    let reg = FactorRegistry::from_json(fixtures::REGISTRY_SNIPPET_JSON).map_err(err)?;
    let want = BTreeSet::from([81363, 53333, 10022, 1739]);
    ensure(reg.indices() == want, format!("indices {:?}", reg.indices()))?;
    let back = reg.to_snippet_json().map_err(err)?;
    ensure(back == fixtures::REGISTRY_SNIPPET_JSON, "snippet bytes differ after round trip")?;
    Ok(format!("indices {want:?}; {} bytes identical", back.len()))
}

fn end_to_end() -> Check {
    let project = common::toy_project();
    let mut exp = Experiment::load(&project.config, &Overrides::default()).map_err(err)?;
    let requests = [
        Request::Sweep {
            kind: SweepKind::Factor,
            factor: Some(common::HOME_FACTOR.into()),
            suite: traitscope::assessment::Suite::Personality,
        },
        Request::Sweep {
            kind: SweepKind::Pressure,
            factor: None,
            suite: traitscope::assessment::Suite::Safety,
        },
    ];
    let mut files = 0;
    for request in &requests {
        let outcome = exp.execute(request).map_err(err)?;
        let r = replay(&outcome.run_dir.join("manifest.json"), None).map_err(err)?;
        ensure(r.all_match(), format!("replay mismatch {:?}", r.artifacts))?;
        for name in ["report.md", "report.csv", "sweep.json"] {
            let a = fs::read(outcome.run_dir.join(name)).map_err(err)?;
            let b = fs::read(r.rerun.run_dir.join(name)).map_err(err)?;
            ensure(a == b, format!("{name} differs on replay"))?;
            files += 1;
        }
    }
    Ok(format!("factor and pressure sweeps replayed; {files} report files byte-identical"))
}

fn main() {
    let checks: [(&str, fn() -> Check); 10] = [
        ("sae-closed-form", sae_closed_form),
        ("sae-gradient-check", gradient_check),
        ("planted-dictionary-recovery", planted_recovery),
        ("position-rule-exactness", position_rules),
        ("direction-extraction", direction_checks),
        ("contrastive-feature-search", contrastive_search),
        ("coefficient-scan-and-over-steer", scan_and_over_steer),
        ("scoring-oracle", scoring_oracle),
        ("registry-fidelity", registry_fidelity),
        ("end-to-end-determinism", end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
