// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;
use std::fs;

use traitscope::assessment::{
    answer_item, format_delta, parse_items, tally_answers, PromptTemplate, Subscale, Suite,
};
use traitscope::experiment::{
    emit_report, Condition, Experiment, Overrides, ReportFormat, Request, SweepKind, SweepResult,
};
use traitscope::pressure::direction_extract;
use traitscope::synthetic::random_unit;
use traitscope::{fixtures, Error, FeatureKind, FeatureVector, SteeringHook};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fixture_inventories_cover_every_subscale() {
    let personality = fixtures::personality_items().unwrap();
    let safety = fixtures::safety_items().unwrap();
    for s in Subscale::PERSONALITY {
        assert!(personality.iter().any(|i| i.subscale == s), "{s}");
    }
    for s in Subscale::SAFETY {
        assert!(safety.iter().any(|i| i.subscale == s), "{s}");
    }
    assert!(safety.iter().all(|i| i.aligned_keys.len() == 1));
}

const ITEM: &str = r#"{"id": "x-1", "question": "Pick?", "options": {"A": "yes", "B": "no"}, "subscale": "Openness", "aligned_keys": ["A"]}"#;

#[test]
fn malformed_items_are_schema_errors() {
    let bad_key = ITEM.replace(r#"["A"]"#, r#"["E"]"#);
    assert!(matches!(parse_items(&bad_key), Err(Error::Schema { .. })));
    let dup = format!("{ITEM}\n{ITEM}\n");
    match parse_items(&dup) {
        Err(Error::Schema { location, message }) => {
            assert_eq!(location, "line 2");
            assert!(message.contains("duplicate"));
        }
        other => panic!("unexpected {other:?}"),
    }
    let two_correct = ITEM.replace("Openness", "EM").replace(r#"["A"]"#, r#"["A", "B"]"#);
    assert!(parse_items(&two_correct).is_err());
    assert!(matches!(parse_items("\n\n"), Err(Error::EmptyInput(_))));
}

#[test]
fn a_strong_push_toward_a_picks_a() {
    let toy = common::toy(9);
    let model = common::toy_model(9);
    let item = parse_items(ITEM).unwrap().remove(0);
    let u = toy.unembedding(model.option_token("A").unwrap());
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    let layer = toy.config().n_layers - 1;
    let f = FeatureVector::new(FeatureKind::Pressure, layer, u.iter().map(|v| v - mean).collect());
    let hook = SteeringHook::new(f, 500.0, layer).unwrap();
    assert_eq!(answer_item(&model, &item, &[hook], &PromptTemplate::default()).unwrap(), "A");
}

#[test]
fn tallies_count_aligned_answers() {
    let mut text = String::new();
    for i in 0..4 {
        text.push_str(&ITEM.replace("x-1", &format!("o-{i}")));
        text.push('\n');
        text.push_str(&ITEM.replace("x-1", &format!("e-{i}")).replace("Openness", "Extraversion"));
        text.push('\n');
    }
    let items = parse_items(&text).unwrap();
    let answers: BTreeMap<String, String> = items
        .iter()
        .map(|i| {
            let n: usize = i.id[2..].parse().unwrap();
            let key = match (i.subscale, n) {
                (Subscale::Openness, 0..=2) => "A",
                (Subscale::Extraversion, 0..=1) => "A",
                _ => "B",
            };
            (i.id.clone(), key.to_string())
        })
        .collect();
    let t = tally_answers(&items, &answers).unwrap();
    assert_eq!(t[&Subscale::Openness].score(), 75.0);
    assert_eq!(t[&Subscale::Extraversion].score(), 50.0);
    let mut partial = answers.clone();
    partial.remove("o-0");
    assert!(matches!(tally_answers(&items, &partial), Err(Error::Missing { .. })));
}

fn single(base: f64, steered: f64) -> SweepResult {
    SweepResult::new(
        "One",
        Suite::Personality,
        "toy",
        1.0,
        vec!["Openness".into()],
        vec![base],
        vec![Condition {
            name: "Trust".into(),
            scores: vec![steered],
        }],
    )
    .unwrap()
}

#[test]
fn single_cell_reports() {
    let md = emit_report(&single(80.0, 70.0), ReportFormat::Markdown).unwrap();
    assert_eq!(
        md,
        "### One\n\n| Subscales | Base | Trust |\n| --- | --- | --- |\n| Openness | 80.0 | **70.0 ↓ (10.0)** |\n"
    );
    let csv = emit_report(&single(80.0, 70.0), ReportFormat::Csv).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().ends_with(",10,down,true"));
    assert_eq!(format_delta(4.3, 4.3), "4.3");
}

#[test]
fn ties_highlight_the_first_condition() {
    let r = SweepResult::new(
        "T",
        Suite::Safety,
        "toy",
        1.0,
        vec!["EM".into(), "IA".into()],
        vec![50.0, 50.0],
        vec![
            Condition {
                name: "p".into(),
                scores: vec![60.0, 51.0],
            },
            Condition {
                name: "q".into(),
                scores: vec![40.0, 55.0],
            },
        ],
    )
    .unwrap();
    assert_eq!(r.highlight, vec![Some(0), Some(1)]);
    assert!(SweepResult::new("T", Suite::Safety, "toy", 1.0, vec!["EM".into()], vec![], vec![]).is_err());
}

fn write_directions(project: &common::ToyProject, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let names: Vec<String> = (0..n).map(|i| format!("P{i}")).collect();
    let mut blocks = String::new();
    for name in &names {
        let v = random_unit(32, &mut rng);
        let d = direction_extract(&[v], &[vec![0.0; 32]])
            .unwrap()
            .with_layer(common::LAYER)
            .with_pressure(name);
        let file = format!("synthetic-{name}.json");
        fs::write(project.root().join(&file), d.to_json().unwrap()).unwrap();
        blocks.push_str(&format!("\n[[directions]]\npressure = \"{name}\"\npath = \"{file}\"\n"));
    }
    let text = fs::read_to_string(&project.config).unwrap();
    let head = text.split("\n[[directions]]").next().unwrap().to_string();
    fs::write(&project.config, format!("{head}{blocks}")).unwrap();
    names
}

#[test]
fn pressure_sweep_fills_the_whole_matrix() {
    let project = common::toy_project();
    let names = write_directions(&project, 7);
    let mut exp = Experiment::load(&project.config, &Overrides::default()).unwrap();
    let result = exp.run_pressure_sweep(Suite::Personality).unwrap();
    assert_eq!(result.rows.len(), 8);
    assert_eq!(result.conditions.iter().map(|c| c.name.clone()).collect::<Vec<_>>(), names);
    assert!(result.conditions.iter().all(|c| c.scores.len() == 8));
    let md = emit_report(&result, ReportFormat::Markdown).unwrap();
    assert_eq!(md.lines().count(), 4 + 8);
}

#[test]
fn zero_coefficient_leaves_every_cell_flat() {
    let project = common::toy_project();
    let text = fs::read_to_string(&project.config).unwrap();
    fs::write(
        &project.config,
        text.replace("pressure_coefficient = 3.0", "pressure_coefficient = 0.0"),
    )
    .unwrap();
    let mut exp = Experiment::load(&project.config, &Overrides::default()).unwrap();
    let result = exp.run_pressure_sweep(Suite::Safety).unwrap();
    for c in &result.conditions {
        assert_eq!(c.scores, result.base);
    }
    assert_eq!(result.rows[0], "Average");
}

#[test]
fn reruns_write_identical_artifacts() {
    let project = common::toy_project();
    let request = Request::Sweep {
        kind: SweepKind::Factor,
        factor: Some(common::HOME_FACTOR.into()),
        suite: Suite::Personality,
    };
    let mut exp = Experiment::load(&project.config, &Overrides::default()).unwrap();
    let a = exp.execute(&request).unwrap();
    let mut exp = Experiment::load(&project.config, &Overrides::default()).unwrap();
    let b = exp.execute(&request).unwrap();
    assert_ne!(a.run_dir, b.run_dir);
    for name in ["sweep.json", "report.md", "report.csv"] {
        assert_eq!(
            fs::read(a.run_dir.join(name)).unwrap(),
            fs::read(b.run_dir.join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(a.manifest.artifacts.len(), 3);
}

#[test]
fn unknown_factor_and_missing_directions_are_reported() {
    let project = common::toy_project();
    let mut exp = Experiment::load(&project.config, &Overrides::default()).unwrap();
    assert!(matches!(
        exp.run_factor_sweep("Hair colour", Suite::Personality),
        Err(Error::Missing { kind: "factor", .. })
    ));
    let text = fs::read_to_string(&project.config).unwrap();
    let head = text.split("\n[[directions]]").next().unwrap().to_string();
    fs::write(&project.config, head).unwrap();
    let mut exp = Experiment::load(&project.config, &Overrides::default()).unwrap();
    assert!(matches!(exp.run_pressure_sweep(Suite::Safety), Err(Error::Missing { .. })));
}
