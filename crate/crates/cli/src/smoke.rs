//! Synthetic end-to-end run used by `self-test` and the acceptance suite.
//!
//! Eight classes in two groups of four. Each class gets two images whose
//! HOI feature is built from the class hierarchy itself: an easy one close
//! to the class's own first-level embedding, and a hard one that sits
//! nearest the first-level embedding of a sibling but carries the class's
//! second-level (comparative) embedding. Flat scoring picks the sibling on
//! hard images; hierarchical scoring recovers the true class.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use sgc_core::eval::{Category, ImageAnnotations, ImageId};
use sgc_core::io::{read_json, write_json_atomic};
use sgc_core::synthetic::grouped_task;
use sgc_core::{
    cosine_sim, dgw_weights, hungarian, l2_normalize, BBox, ClassHierarchy, DecoderParams,
    DetectionRecord, EvalReport, GroundTruth, GroundTruthInstance, LayerFeatureStack, Matrix,
    Vector,
};

use crate::commands::ScoreLine;

pub const GROUPS: usize = 2;
pub const PER_GROUP: usize = 4;
pub const EMBED_DIM: usize = 128;
pub const LAYERS: usize = 12;
pub const TOKENS: usize = 2;
/// Weight of the comparative embedding in a hard image's feature.
pub const HARD_MIX: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct ImageCase {
    pub class_id: usize,
    pub hard: bool,
    pub feature: Vector,
}

#[derive(Debug, Clone)]
pub struct SmokeOutcome {
    pub hierarchy: ClassHierarchy,
    pub cases: Vec<ImageCase>,
    pub map_hierarchical: f64,
    pub map_flat: f64,
    pub elapsed: Duration,
}

fn mix(a: &Vector, b: &Vector, wb: f64) -> anyhow::Result<Vector> {
    let v: Vec<f64> = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x + wb * y)
        .collect();
    Ok(l2_normalize(&Vector::new(v)?)?)
}

/// Easy and hard image features for every class, in class-id order.
pub fn image_cases(h: &ClassHierarchy) -> anyhow::Result<Vec<ImageCase>> {
    let mut cases = Vec::new();
    let mut classes: Vec<_> = h.classes.iter().collect();
    classes.sort_by_key(|c| c.id);
    for c in &classes {
        let [first, second, ..] = c.levels.as_slice() else {
            bail!("class `{}` has a single description level", c.name);
        };
        let mut sibling = None;
        let mut best = f64::NEG_INFINITY;
        for o in classes.iter().filter(|o| o.id != c.id) {
            let sim = cosine_sim(&first.embedding, &o.levels[0].embedding)?;
            if sim > best {
                best = sim;
                sibling = Some(o);
            }
        }
        let sibling = sibling.context("need at least two classes")?;
        cases.push(ImageCase {
            class_id: c.id,
            hard: false,
            feature: mix(&first.embedding, &second.embedding, 1.0)?,
        });
        cases.push(ImageCase {
            class_id: c.id,
            hard: true,
            feature: mix(&sibling.levels[0].embedding, &second.embedding, HARD_MIX)?,
        });
    }
    Ok(cases)
}

/// A stack whose every token at layer `l` is `(1 + l/10) * x`.
pub fn stack_for(x: &Vector) -> anyhow::Result<LayerFeatureStack> {
    let layers = (1..=LAYERS)
        .map(|l| {
            let row = x.scale(1.0 + l as f64 / 10.0).into_inner();
            Matrix::from_rows(vec![row; TOKENS])
        })
        .collect::<sgc_core::Result<Vec<_>>>()?;
    Ok(LayerFeatureStack::new(layers)?)
}

fn human_box() -> BBox {
    BBox::new(10.0, 10.0, 50.0, 90.0).unwrap()
}

fn object_box() -> BBox {
    BBox::new(40.0, 30.0, 90.0, 80.0).unwrap()
}

pub fn ground_truth(h: &ClassHierarchy, cases: &[ImageCase]) -> GroundTruth {
    let mut categories: Vec<Category> = h
        .classes
        .iter()
        .map(|c| Category {
            id: c.id,
            name: c.name.clone(),
        })
        .collect();
    categories.sort_by_key(|c| c.id);
    GroundTruth {
        images: cases
            .iter()
            .enumerate()
            .map(|(i, c)| ImageAnnotations {
                image_id: ImageId::Int(i as u64),
                instances: vec![GroundTruthInstance {
                    human_box: human_box(),
                    object_box: object_box(),
                    category_id: c.class_id,
                }],
            })
            .collect(),
        categories,
    }
}

/// One detection per image with the fused class scores as category scores.
pub fn detections(lines: &[ScoreLine], num_classes: usize) -> Vec<DetectionRecord> {
    lines
        .iter()
        .map(|line| {
            let mut scores = vec![0.0; num_classes];
            for r in &line.ranking {
                scores[r.breakdown.class_id] = r.breakdown.s;
            }
            DetectionRecord {
                image_id: ImageId::Int(line.query as u64),
                human_box: human_box(),
                object_box: object_box(),
                category_scores: scores,
                box_score: 1.0,
            }
        })
        .collect()
}

fn read_score_lines(path: &Path) -> anyhow::Result<Vec<ScoreLine>> {
    Ok(sgc_core::io::read_json_lines(path)?)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(sgc_core::io::write_atomic(path, out.as_bytes())?)
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Runs build-hierarchy, aggregate, score and eval through `sgc`, which
/// receives the arguments after the program name.
pub fn run_smoke(
    dir: &Path,
    mut sgc: impl FnMut(&[String]) -> anyhow::Result<()>,
) -> anyhow::Result<SmokeOutcome> {
    let started = Instant::now();
    let mut call = |args: &[&str]| {
        let owned: Vec<String> = args.iter().map(|a| a.to_string()).collect();
        sgc(&owned).with_context(|| format!("sgc {}", args.join(" ")))
    };
    let path = |name: &str| -> PathBuf { dir.join(name) };

    let task = grouped_task(GROUPS, PER_GROUP);
    write_json_atomic(&path("classes.json"), &task.names)?;
    write_json_atomic(&path("fixture.json"), &task.fixture)?;
    call(&[
        "build-hierarchy",
        "--classes",
        &s(&path("classes.json")),
        "--out",
        &s(&path("hierarchy.json")),
        "--provider",
        "fixture",
        "--fixture",
        &s(&path("fixture.json")),
        "--encoder",
        "stub",
        "--encoder-dim",
        &EMBED_DIM.to_string(),
        "--cache-dir",
        &s(&path("cache")),
    ])?;
    let hierarchy = ClassHierarchy::read_json(&path("hierarchy.json"))?;
    let cases = image_cases(&hierarchy)?;

    let probe = vec![1.0 / (EMBED_DIM as f64).sqrt(); EMBED_DIM];
    let decoder = DecoderParams::with_queries(Matrix::from_rows(vec![probe])?);
    write_json_atomic(&path("decoder.json"), &decoder)?;
    let mut queries = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let stack = path(&format!("stack_{i}.json"));
        let x = path(&format!("x_{i}.json"));
        stack_for(&case.feature)?.write_json(&stack)?;
        call(&[
            "aggregate",
            "--features",
            &s(&stack),
            "--out",
            &s(&path(&format!("z_{i}.json"))),
            "--decoder",
            &s(&path("decoder.json")),
            "--decoded-out",
            &s(&x),
        ])?;
        let decoded: Matrix = read_json(&x)?;
        queries.push(decoded.row(0).to_vec());
    }
    write_json_atomic(&path("queries.json"), &Matrix::from_rows(queries)?)?;

    let gt = ground_truth(&hierarchy, &cases);
    write_json_atomic(&path("gt.json"), &gt)?;
    let mut maps = Vec::new();
    for lambda in ["0.5", "0"] {
        let scores = path(&format!("scores_{lambda}.jsonl"));
        let dets = path(&format!("detections_{lambda}.jsonl"));
        let report = path(&format!("report_{lambda}.json"));
        call(&[
            "score",
            "--hierarchy",
            &s(&path("hierarchy.json")),
            "--queries",
            &s(&path("queries.json")),
            "--out",
            &s(&scores),
            "--lambda",
            lambda,
        ])?;
        write_jsonl(
            &dets,
            &detections(&read_score_lines(&scores)?, hierarchy.classes.len()),
        )?;
        call(&[
            "eval",
            "--detections",
            &s(&dets),
            "--gt",
            &s(&path("gt.json")),
            "--out",
            &s(&report),
        ])?;
        maps.push(read_json::<EvalReport>(&report)?.map);
    }

    Ok(SmokeOutcome {
        hierarchy,
        cases,
        map_hierarchical: maps[0],
        map_flat: maps[1],
        elapsed: started.elapsed(),
    })
}

/// Cheap library checks printed by `self-test` ahead of the end-to-end run.
pub fn quick_checks() -> Vec<(String, bool)> {
    let mut out = Vec::new();
    let last_weight_is_one = (1..=6).all(|d| {
        dgw_weights(d, 1.0)
            .map(|w| w[d - 1] == 1.0)
            .unwrap_or(false)
    });
    out.push(("layer weights: deepest layer of a block has weight 1".into(), last_weight_is_one));

    let m = Matrix::from_rows(vec![
        vec![4.0, 1.0, 3.0],
        vec![2.0, 0.0, 5.0],
        vec![3.0, 2.0, 2.0],
    ])
    .unwrap();
    let cost = hungarian(&m).map(|a| a.total_cost).unwrap_or(f64::NAN);
    out.push(("assignment: 3x3 textbook instance costs 5".into(), cost == 5.0));

    let a = Vector::new(vec![1.0, 0.0]).unwrap();
    let b = Vector::new(vec![1.0, 1.0]).unwrap();
    let c = cosine_sim(&a, &b).unwrap_or(f64::NAN);
    out.push((
        "cosine: 45 degrees".into(),
        (c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12,
    ));
    out
}
