use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sgc_core::eval::read_detections;
use sgc_core::io::{read_json, write_atomic, write_json_atomic};
use sgc_core::{
    aggregate as gsa_aggregate, build_hierarchy, classify, decode, evaluate_map, CachedProvider,
    ClassHierarchy, DecoderParams, Error, FixtureProvider, GroundTruth, HttpProvider,
    LayerFeatureStack, LlmProvider, Matrix, ScoreBreakdown, TextEncoder, Vector,
};

use crate::config::{EncoderKind, ProviderKind, RunConfig};
use crate::{smoke, AggregateArgs, BuildArgs, EvalArgs, ScoreArgs, SelfTestArgs};

pub fn aggregate(args: &AggregateArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let stack = LayerFeatureStack::read_json(&args.features)?;
    cfg.gsa.partition.validate_for(stack.num_layers())?;
    let decoder = args
        .decoder
        .as_deref()
        .map(DecoderParams::read_json)
        .transpose()?;
    if let Some(d) = &decoder {
        d.validate(stack.dim())?;
    }

    let z = gsa_aggregate(&stack, &cfg.gsa)?;
    let decoded = decoder.as_ref().map(|d| decode(&z, d)).transpose()?;

    write_json_atomic(&args.out, &z)?;
    if let (Some(out), Some(x)) = (&args.decoded_out, &decoded) {
        write_json_atomic(out, &x.features)?;
    }
    if let (Some(out), Some(x)) = (&args.attention_out, &decoded) {
        write_json_atomic(out, &x.attention)?;
    }
    eprintln!(
        "aggregated {} layers with partition {} into {}x{}",
        stack.num_layers(),
        cfg.gsa.partition,
        z.rows(),
        z.cols()
    );
    Ok(())
}

/// A class list is either a JSON array of strings or one name per line
/// (blank lines and `#` comments skipped).
pub fn read_class_list(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading class list {}", path.display()))?;
    let names: Vec<String> = if text.trim_start().starts_with('[') {
        read_json(path)?
    } else {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_owned)
            .collect()
    };
    if names.is_empty() {
        return Err(Error::EmptyInput(format!("class list {} is empty", path.display())).into());
    }
    Ok(names)
}

fn make_provider(cfg: &RunConfig) -> anyhow::Result<Box<dyn LlmProvider>> {
    let p = &cfg.provider;
    let base: Box<dyn LlmProvider> = match p.kind {
        ProviderKind::Fixture => Box::new(FixtureProvider::from_file(
            p.fixture.as_deref().expect("validated"),
        )?),
        ProviderKind::Stub => Box::new(FixtureProvider::generative(cfg.seed)),
        ProviderKind::Http => Box::new(HttpProvider::new(p.http.clone())?),
    };
    Ok(match &p.cache_dir {
        Some(dir) => Box::new(CachedProvider::new(base, dir.clone())),
        None => base,
    })
}

pub fn build(args: &BuildArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    cfg.validate_for_build()?;
    let names = read_class_list(&args.classes)?;
    let encoder = match cfg.encoder.kind {
        EncoderKind::Stub => TextEncoder::stub(cfg.encoder.dim, cfg.seed)?,
        EncoderKind::File => {
            TextEncoder::from_file(cfg.encoder.embeddings.as_deref().expect("validated"))?
        }
    };
    let llm = make_provider(cfg)?;

    let started = Instant::now();
    let hierarchy = build_hierarchy(&names, cfg.build, llm.as_ref(), &encoder)?;
    let prompts: usize = hierarchy.build_log.iter().map(|e| e.llm_requests).sum();
    hierarchy.write_json(&args.out)?;
    eprintln!(
        "built {} classes (max depth {}) in {:.2?}; prompts issued: {prompts}; LLM calls: {}",
        hierarchy.classes.len(),
        hierarchy.classes.iter().map(|c| c.depth()).max().unwrap_or(0),
        started.elapsed(),
        llm.backend_calls()
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum QueryFile {
    Matrix(Matrix),
    Rows(Vec<Vec<f64>>),
}

/// Query embeddings as rows; accepts a matrix file or a bare array of rows.
pub fn read_queries(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    Ok(match read_json::<QueryFile>(path)? {
        QueryFile::Matrix(m) => (0..m.rows()).map(|r| m.row(r).to_vec()).collect(),
        QueryFile::Rows(rows) => rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedClass {
    pub name: String,
    #[serde(flatten)]
    pub breakdown: ScoreBreakdown,
}

/// One line of `score` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub query: usize,
    pub ranking: Vec<RankedClass>,
}

pub fn score(args: &ScoreArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let hierarchy = ClassHierarchy::read_json(&args.hierarchy)?;
    let rows = read_queries(&args.queries)?;
    let dim = hierarchy.dim().ok_or(Error::EmptyHierarchy)?;
    let mut scorer = cfg.scorer.clone();
    scorer.text_token = hierarchy.text_token.clone();

    let mut out = String::new();
    for (i, row) in rows.into_iter().enumerate() {
        if row.len() != dim {
            return Err(anyhow::Error::new(Error::DimMismatch {
                expected: dim,
                found: row.len(),
            })
            .context(format!("query {i}")));
        }
        let x = Vector::new(row).with_context(|| format!("query {i}"))?;
        let ranking = classify(&x, &hierarchy, &scorer)
            .with_context(|| format!("query {i}"))?
            .into_iter()
            .map(|b| RankedClass {
                name: hierarchy
                    .classes
                    .iter()
                    .find(|c| c.id == b.class_id)
                    .map(|c| c.name.clone())
                    .unwrap_or_default(),
                breakdown: b,
            })
            .collect();
        out.push_str(&serde_json::to_string(&ScoreLine { query: i, ranking })?);
        out.push('\n');
    }
    emit(args.out.as_deref(), out.as_bytes())
}

pub fn eval(args: &EvalArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let gt = GroundTruth::read_json(&args.gt)?;
    let dets = read_detections(&args.detections)?;
    let report = evaluate_map(&dets, &gt, &cfg.eval)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    emit(args.out.as_deref(), json.as_bytes())?;
    eprintln!(
        "mAP {:.6} over {} categories ({} detections, {} images)",
        report.map,
        report.per_category_ap.len(),
        dets.len(),
        report.num_images
    );
    Ok(())
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match path {
        Some(p) => write_atomic(p, bytes)?,
        None => std::io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

pub fn self_test(args: &SelfTestArgs, _cfg: &RunConfig) -> anyhow::Result<()> {
    let tmp;
    let dir = match &args.keep {
        Some(d) => {
            std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
            d.clone()
        }
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let checks = smoke::quick_checks();
    let outcome = smoke::run_smoke(&dir, |args| crate::run(std::iter::once("sgc").chain(args.iter().map(String::as_str))))?;
    let mut failed = 0;
    for (name, ok) in checks.iter().map(|(n, ok)| (n.as_str(), *ok)).chain([(
        "end-to-end: hierarchical scoring beats flat scoring",
        outcome.map_hierarchical > outcome.map_flat,
    )]) {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    println!(
        "mAP lambda=0.5: {:.4}, lambda=0: {:.4}, elapsed {:.2?}",
        outcome.map_hierarchical, outcome.map_flat, outcome.elapsed
    );
    if failed > 0 {
        bail!("{failed} self-test check(s) failed");
    }
    Ok(())
}
