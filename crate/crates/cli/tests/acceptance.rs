//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Expected values come from oracles written out here, not from
//! the library under test.

// `!(x <= tol)` also fails on NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgc_cli::smoke;
use sgc_core::eval::{Category, ImageAnnotations, ImageId};
use sgc_core::hierarchy::{BuildAction, ClassEntry, Level};
use sgc_core::llm::{CachedProvider, FixtureProvider, LlmProvider};
use sgc_core::matching::{cost_terms, neg_log_softmax};
use sgc_core::synthetic::grouped_task;
use sgc_core::{
    aggregate, aggregate_grad, build_hierarchy, classify, decode, dgw_weights, evaluate_map,
    evaluator_bits, hungarian, inference_score, match_cost, running_average, BBox, BuildConfig,
    ClassHierarchy, DecoderParams, DetectionRecord, EvalSettings, GroundTruth,
    GroundTruthInstance, GsaParams, HoiPrediction, ImageSize, Interpolation, LayerFeatureStack,
    MatchCostWeights, Matrix, ScorerConfig, TextEncoder, Vector,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: &[Criterion] = &[
        ("layer weights match the Gaussian formula; deepest layer weight is exactly 1", c01_dgw),
        ("analytic gradients match central differences on 20 stacks in < 5 s", c02_gradients),
        ("aggregation is linear and block-scale equivariant on 100 instances", c03_linearity),
        ("decoder rows sum to 1, ignore token order, single token is exact", c04_decoder),
        ("hand-built 3-class hierarchy scores match the spreadsheet oracle", c05_scoring_oracle),
        ("running average equals the longest-increasing-prefix mean on 1000 sequences", c06_prefix),
        ("12-class build is deterministic, K=2 at depth 2, warm cache makes 0 calls", c07_build),
        ("assignment matches brute force on 200 matrices; n=100 in < 1 s", c08_hungarian),
        ("matching cost decomposition with weights (5, 2, 5) matches hand evaluation", c09_match_cost),
        ("mAP: perfect, wrong category, dual-IoU rule and a hand-computed PR curve", c10_map),
        ("box-score exponent is pointwise and leaves equal-confidence ranking unchanged", c11_gamma),
        ("end-to-end synthetic run: hierarchical scoring beats flat scoring in < 30 s", c12_smoke),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = started.elapsed();
        match result {
            Ok(detail) => println!("PASS {:>2} {name} [{detail}; {elapsed:.2?}]", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_stack(rng: &mut ChaCha8Rng, layers: usize, tokens: usize, dim: usize) -> LayerFeatureStack {
    LayerFeatureStack::new((0..layers).map(|_| random_matrix(rng, tokens, dim)).collect()).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng) -> GsaParams {
    GsaParams::new("6-8,9-11,12".parse().unwrap(), rng.random_range(0.5..2.0))
        .unwrap()
        .with_block_weights((0..3).map(|_| rng.random_range(0.2..3.0)).collect())
        .unwrap()
}

fn c01_dgw() -> Outcome {
    let mut worst = 0.0f64;
    for sigma in [0.5, 1.0, 2.0] {
        for d in 1..=6usize {
            let w = dgw_weights(d, sigma).map_err(|e| e.to_string())?;
            ensure!(w.len() == d, "d={d}: {} weights", w.len());
            for (i, &got) in w.iter().enumerate() {
                let l = (i + 1) as f64;
                let want = (-(d as f64 - l).powi(2) / (2.0 * sigma * sigma)).exp();
                worst = worst.max((got - want).abs());
            }
            ensure!(w[d - 1] == 1.0, "d={d} sigma={sigma}: deepest weight {}", w[d - 1]);
        }
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("max deviation {worst:.1e}"))
}

fn c02_gradients() -> Outcome {
    let started = Instant::now();
    let mut rng = rng(2024);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut check = |analytic: &Matrix, plus: Matrix, minus: Matrix| -> Result<(), String> {
        for ((a, p), m) in analytic.as_slice().iter().zip(plus.as_slice()).zip(minus.as_slice()) {
            let n = (p - m) / (2.0 * h);
            let abs = (a - n).abs();
            // below 1e-9 absolute, rounding in the difference dominates
            if abs < 1e-9 {
                continue;
            }
            let rel = abs / a.abs().max(n.abs());
            worst = worst.max(rel);
            ensure!(rel <= 1e-5, "analytic {a} vs numeric {n} (rel {rel:e})");
        }
        Ok(())
    };
    for _ in 0..20 {
        let stack = random_stack(&mut rng, 12, 4, 8);
        let params = random_params(&mut rng);
        let grad = aggregate_grad(&stack, &params).map_err(|e| e.to_string())?;
        let z_with = |f: &dyn Fn(&mut GsaParams)| {
            let mut p = params.clone();
            f(&mut p);
            aggregate(&stack, &p).unwrap()
        };
        check(
            &grad.d_sigma,
            z_with(&|p| p.sigma += h),
            z_with(&|p| p.sigma -= h),
        )?;
        for s in 0..3 {
            check(
                &grad.d_block_weights[s],
                z_with(&|p| p.block_weights[s] += h),
                z_with(&|p| p.block_weights[s] -= h),
            )?;
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("worst relative error {worst:.1e}"))
}

fn c03_linearity() -> Outcome {
    let mut rng = rng(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s1 = random_stack(&mut rng, 12, 3, 5);
        let s2 = random_stack(&mut rng, 12, 3, 5);
        let params = random_params(&mut rng);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let lhs = aggregate(&s1.combine(a, &s2, b).unwrap(), &params).unwrap();
        let z1 = aggregate(&s1, &params).unwrap();
        let z2 = aggregate(&s2, &params).unwrap();
        for ((l, x), y) in lhs.as_slice().iter().zip(z1.as_slice()).zip(z2.as_slice()) {
            worst = worst.max((l - (a * x + b * y)).abs());
        }

        let c = rng.random_range(0.1..10.0);
        let scaled = params
            .clone()
            .with_block_weights(params.block_weights.iter().map(|w| w * c).collect())
            .unwrap();
        let zc = aggregate(&s1, &scaled).unwrap();
        for (x, y) in z1.as_slice().iter().zip(zc.as_slice()) {
            worst = worst.max((c * x - y).abs());
        }
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("max deviation {worst:.1e}"))
}

fn c04_decoder() -> Outcome {
    let mut rng = rng(9);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (t, c, nq) = (7, 5, 4);
        let z = random_matrix(&mut rng, t, c);
        let dec = DecoderParams {
            queries: random_matrix(&mut rng, nq, c),
            w_q: random_matrix(&mut rng, c, c),
            w_k: random_matrix(&mut rng, c, c),
            w_v: random_matrix(&mut rng, c, c),
        };
        let out = decode(&z, &dec).map_err(|e| e.to_string())?;
        for r in 0..nq {
            let sum: f64 = out.attention.row(r).iter().sum();
            worst = worst.max((sum - 1.0).abs());
        }
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut rng);
        let permuted = Matrix::from_rows(order.iter().map(|&i| z.row(i).to_vec()).collect()).unwrap();
        let out_p = decode(&permuted, &dec).unwrap();
        worst = worst.max(out.features.max_abs_diff(&out_p.features).unwrap());

        // one token: every query attends to it with weight 1, so X rows are z W_v
        let single = random_matrix(&mut rng, 1, c);
        let one = decode(&single, &dec).unwrap();
        let zv: Vec<f64> = (0..c)
            .map(|j| (0..c).map(|k| single.get(0, k) * dec.w_v.get(k, j)).sum())
            .collect();
        for r in 0..nq {
            ensure!(one.attention.row(r) == [1.0], "single-token attention {:?}", one.attention.row(r));
            ensure!(one.features.row(r) == zv.as_slice(), "single-token output differs");
        }
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("max deviation {worst:.1e}"))
}

/// Hand-built hierarchy. Levels are not unit vectors on purpose.
fn spreadsheet_hierarchy() -> ClassHierarchy {
    let class = |id: usize, name: &str, levels: [[f64; 3]; 3]| ClassEntry {
        id,
        name: name.into(),
        levels: levels
            .iter()
            .enumerate()
            .map(|(i, v)| Level {
                text: format!("{name} level {}", i + 1),
                embedding: Vector::new(v.to_vec()).unwrap(),
            })
            .collect(),
    };
    ClassHierarchy {
        grouping_threshold: 6,
        max_depth: 3,
        classes: vec![
            // rising then falling
            class(0, "a", [[1.0, 0.2, 0.0], [2.0, 0.1, 0.3], [0.0, 1.0, 1.0]]),
            // monotonically rising
            class(1, "b", [[0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [3.0, 1.0, 0.5]]),
            // falling at once
            class(2, "c", [[0.9, 0.1, 0.1], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]),
        ],
        build_log: vec![],
        text_token: None,
    }
}

/// Straight transcription of the scoring rules, one cell at a time.
fn spreadsheet_row(x: &[f64], levels: &[Vec<f64>], lambda: f64, tau: f64, token: Option<&[f64]>) -> (Vec<f64>, Vec<u8>, f64, f64) {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let p: Vec<f64> = levels
        .iter()
        .map(|e| e.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / (norm(e) * norm(x)))
        .collect();
    let u: Vec<u8> = (0..p.len() - 1).map(|k| u8::from(p[k + 1] > p[k] + tau)).collect();
    let mut accepted = 1;
    while accepted < p.len() && u[accepted - 1] == 1 {
        accepted += 1;
    }
    let r = p[..accepted].iter().sum::<f64>() / accepted as f64;
    let offset = token.map_or(0.0, |t| t.iter().zip(x).map(|(a, b)| a * b).sum());
    let s = (1.0 - lambda) * (p[0] + offset) + lambda * r;
    (p, u, r, s)
}

fn c05_scoring_oracle() -> Outcome {
    let base = spreadsheet_hierarchy();
    let queries = [[1.0, 0.5, 0.2], [0.3, 0.9, 0.4], [0.2, 0.1, 1.0]];
    let token = [0.05, -0.02, 0.1];
    let mut worst = 0.0f64;
    let mut cases = 0;
    for use_token in [false, true] {
        let mut h = base.clone();
        h.text_token = use_token.then(|| Vector::new(token.to_vec()).unwrap());
        for lambda in [0.0, 0.5, 1.0] {
            for tau in [0.0, 0.3] {
                let mut cfg = ScorerConfig::new(lambda, tau).map_err(|e| e.to_string())?;
                cfg.text_token = h.text_token.clone();
                for q in &queries {
                    let x = Vector::new(q.to_vec()).unwrap();
                    let ranked = classify(&x, &h, &cfg).map_err(|e| e.to_string())?;
                    let mut oracle = Vec::new();
                    for c in &h.classes {
                        let levels: Vec<Vec<f64>> =
                            c.levels.iter().map(|l| l.embedding.as_slice().to_vec()).collect();
                        let (p, u, r, s) = spreadsheet_row(q, &levels, lambda, tau, use_token.then_some(&token[..]));
                        let got = ranked.iter().find(|b| b.class_id == c.id).ok_or("class missing")?;
                        ensure!(got.u == u, "class {} lambda {lambda} tau {tau}: u {:?} vs {u:?}", c.id, got.u);
                        for (a, b) in got.p.iter().zip(&p) {
                            worst = worst.max((a - b).abs());
                        }
                        worst = worst.max((got.r - r).abs()).max((got.s - s).abs());
                        oracle.push((s, c.id));
                    }
                    oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                    let order: Vec<usize> = ranked.iter().map(|b| b.class_id).collect();
                    ensure!(
                        order == oracle.iter().map(|o| o.1).collect::<Vec<_>>(),
                        "ranking {order:?} differs from oracle at lambda {lambda} tau {tau}"
                    );
                    cases += 1;
                }
            }
        }
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("{cases} query/config cases, max deviation {worst:.1e}"))
}

fn c06_prefix() -> Outcome {
    let mut rng = rng(6);
    for i in 0..1000 {
        let len = rng.random_range(1..=6);
        // coarse grid so ties (not accepted) show up often
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(-4..=4) as f64 / 4.0).collect();
        let tau = if i % 2 == 0 { 0.0 } else { 0.25 };
        let mut prefix = 1;
        while prefix < len && p[prefix] > p[prefix - 1] + tau {
            prefix += 1;
        }
        let want = p[..prefix].iter().sum::<f64>() / prefix as f64;
        let got = running_average(&p, &evaluator_bits(&p, tau)).map_err(|e| e.to_string())?;
        ensure!(got == want, "p={p:?} tau={tau}: {got} vs {want}");
    }
    Ok("1000 sequences, exact equality".into())
}

fn c07_build() -> Outcome {
    let task = grouped_task(2, 6);
    let encoder = TextEncoder::stub(64, 0).unwrap();
    let cfg = BuildConfig::default();
    ensure!(cfg.grouping_threshold == 6, "default N is {}", cfg.grouping_threshold);
    let build = |llm: &dyn LlmProvider| {
        build_hierarchy(&task.names, cfg, llm, &encoder)
            .and_then(|h| Ok((h.to_json()?, h)))
            .map_err(|e| e.to_string())
    };
    let (first, h) = build(&FixtureProvider::new(task.fixture.clone()))?;
    let (second, _) = build(&FixtureProvider::new(task.fixture.clone()))?;
    ensure!(first == second, "two builds differ");

    let depth2: Vec<_> = h.build_log.iter().filter(|e| e.depth == 2).collect();
    ensure!(!depth2.is_empty(), "no depth-2 log entries");
    for e in &depth2 {
        ensure!(e.k == 12usize.div_ceil(6), "K={} at depth 2", e.k);
        let g = e.members.len();
        let want = if g == 1 {
            BuildAction::Singleton
        } else if 2 * g > 6 {
            BuildAction::SummaryCompare
        } else {
            BuildAction::DirectCompare
        };
        ensure!(e.action == want, "group of {g} used {:?}", e.action);
    }
    let mut groups: Vec<Vec<usize>> = depth2.iter().map(|e| e.members.clone()).collect();
    groups.sort();
    ensure!(groups == task.groups, "clusters {groups:?}");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cold = CachedProvider::new(FixtureProvider::new(task.fixture.clone()), dir.path());
    let (cold_json, _) = build(&cold)?;
    let warm = CachedProvider::new(FixtureProvider::new(task.fixture.clone()), dir.path());
    let (warm_json, _) = build(&warm)?;
    ensure!(warm.backend_calls() == 0, "warm rebuild made {} calls", warm.backend_calls());
    ensure!(cold_json == first && warm_json == first, "cached builds differ");

    // and through the binary, bytes on disk
    let classes = dir.path().join("classes.json");
    let fixture = dir.path().join("fixture.json");
    sgc_core::io::write_json_atomic(&classes, &task.names).unwrap();
    sgc_core::io::write_json_atomic(&fixture, &task.fixture).unwrap();
    let cache = dir.path().join("cli-cache");
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("h{run}.json"));
        let o = Command::new(env!("CARGO_BIN_EXE_sgc"))
            .args(["build-hierarchy", "--classes"])
            .arg(&classes)
            .arg("--fixture")
            .arg(&fixture)
            .arg("--cache-dir")
            .arg(&cache)
            .args(["--encoder-dim", "64", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        let stderr = String::from_utf8_lossy(&o.stderr).into_owned();
        ensure!(o.status.success(), "sgc failed: {stderr}");
        if run == 1 {
            ensure!(stderr.contains("LLM calls: 0"), "warm CLI run: {stderr}");
        }
        outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure!(outputs[0] == outputs[1], "CLI outputs differ");
    Ok(format!(
        "{} cold calls, 0 warm; depth-2 clusters of sizes {:?}",
        cold.backend_calls(),
        groups.iter().map(Vec::len).collect::<Vec<_>>()
    ))
}

/// Exhaustive minimum over all permutations (Heap's algorithm).
fn brute_force_assignment(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let cost = |p: &[usize]| p.iter().enumerate().map(|(r, &c)| m.get(r, c)).sum::<f64>();
    let mut best = cost(&perm);
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn c08_hungarian() -> Outcome {
    let mut rng = rng(8);
    for i in 0..200 {
        let n = 1 + i % 8;
        let m = Matrix::new(n, n, (0..n * n).map(|_| rng.random_range(-10.0..50.0)).collect()).unwrap();
        let got = hungarian(&m).map_err(|e| e.to_string())?;
        let mut cols: Vec<usize> = got.pairs.iter().map(|p| p.1).collect();
        cols.sort_unstable();
        ensure!(cols == (0..n).collect::<Vec<_>>(), "not a permutation: {:?}", got.pairs);
        let want = brute_force_assignment(&m);
        ensure!((got.total_cost - want).abs() <= 1e-9, "n={n}: {} vs {want}", got.total_cost);

        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..5 {
            perm.shuffle(&mut rng);
            let c: f64 = perm.iter().enumerate().map(|(r, &c)| m.get(r, c)).sum();
            ensure!(got.total_cost <= c + 1e-9, "random permutation beats solver");
        }
    }

    let m = Matrix::new(100, 100, (0..10_000).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let started = Instant::now();
    let big = hungarian(&m).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "n=100 took {elapsed:?}");
    let mut perm: Vec<usize> = (0..100).collect();
    for _ in 0..1000 {
        perm.shuffle(&mut rng);
        let c: f64 = perm.iter().enumerate().map(|(r, &c)| m.get(r, c)).sum();
        ensure!(big.total_cost <= c + 1e-9, "random permutation beats the n=100 solution");
    }
    Ok(format!("n=100 solved in {elapsed:.2?}"))
}

fn bbox(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn c09_match_cost() -> Outcome {
    // lambda_b = 5, lambda_cls = 2, lambda_iou = 5
    let w = MatchCostWeights::new(5.0, 5.0, 2.0).map_err(|e| e.to_string())?;
    let image = ImageSize::new(100.0, 100.0).unwrap();
    let gt = GroundTruthInstance {
        human_box: bbox(0.0, 0.0, 20.0, 20.0),
        object_box: bbox(50.0, 50.0, 70.0, 90.0),
        category_id: 0,
    };
    let mut worst = 0.0f64;

    // human shifted right by half its width; object exact
    let pred = HoiPrediction {
        human_box: bbox(10.0, 0.0, 30.0, 20.0),
        object_box: bbox(50.0, 50.0, 70.0, 90.0),
        class_scores: vec![2.0, 0.0],
        box_score: 1.0,
    };
    let l1 = 0.1; // cx 0.1 -> 0.2
    let giou = 1.0 - 200.0 / 600.0; // enclosing box equals the union
    let cls = (1.0 + (-2.0f64).exp()).ln();
    let t = cost_terms(&pred, &gt, image).map_err(|e| e.to_string())?;
    for (got, want) in [(t.box_l1, l1), (t.giou, giou), (t.cls, cls)] {
        worst = worst.max((got - want).abs());
    }
    let total = match_cost(&pred, &gt, &w, image).map_err(|e| e.to_string())?;
    worst = worst.max((total - (5.0 * l1 + 5.0 * giou + 2.0 * cls)).abs());

    // disjoint human, object shrunk inside, three categories, target not the top
    let pred = HoiPrediction {
        human_box: bbox(40.0, 0.0, 60.0, 20.0),
        object_box: bbox(55.0, 60.0, 65.0, 80.0),
        class_scores: vec![0.5, 1.5, -1.0],
        box_score: 0.7,
    };
    // human: cx 0.1 -> 0.5; giou: 0 - (1200 - 800) / 1200
    let human_l1 = 0.4;
    let human_giou = 1.0 + 400.0 / 1200.0;
    // object: w 0.2 -> 0.1, h 0.4 -> 0.2, centers equal; nested so giou = 200/800
    let object_l1 = 0.1 + 0.2;
    let object_giou = 1.0 - 200.0 / 800.0;
    let z = 0.5f64.exp() + 1.5f64.exp() + (-1.0f64).exp();
    let cls = -(0.5f64.exp() / z).ln();
    let t = cost_terms(&pred, &gt, image).map_err(|e| e.to_string())?;
    for (got, want) in [
        (t.box_l1, human_l1 + object_l1),
        (t.giou, human_giou + object_giou),
        (t.cls, cls),
    ] {
        worst = worst.max((got - want).abs());
    }
    let total = match_cost(&pred, &gt, &w, image).map_err(|e| e.to_string())?;
    let want = 5.0 * (human_l1 + object_l1) + 5.0 * (human_giou + object_giou) + 2.0 * cls;
    worst = worst.max((total - want).abs());

    // coincident boxes: only the class term remains
    let pred = HoiPrediction {
        human_box: gt.human_box,
        object_box: gt.object_box,
        class_scores: vec![6.0, 0.0],
        box_score: 1.0,
    };
    let t = cost_terms(&pred, &gt, image).map_err(|e| e.to_string())?;
    ensure!(t.box_l1 == 0.0 && t.giou == 0.0, "box terms {} {}", t.box_l1, t.giou);
    let total = match_cost(&pred, &gt, &w, image).map_err(|e| e.to_string())?;
    let nll = neg_log_softmax(&[6.0, 0.0], 0).unwrap();
    ensure!(total == 2.0 * nll, "coincident cost {total} vs {}", 2.0 * nll);
    worst = worst.max((nll - (1.0 + (-6.0f64).exp()).ln()).abs());

    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("max deviation {worst:.1e}"))
}

fn det(image: u64, h: BBox, o: BBox, scores: Vec<f64>, box_score: f64) -> DetectionRecord {
    DetectionRecord {
        image_id: ImageId::Int(image),
        human_box: h,
        object_box: o,
        category_scores: scores,
        box_score,
    }
}

/// Human box, object box, category.
type Instance = (BBox, BBox, usize);

fn gt_of(images: Vec<(u64, Vec<Instance>)>, categories: usize) -> GroundTruth {
    GroundTruth {
        images: images
            .into_iter()
            .map(|(id, inst)| ImageAnnotations {
                image_id: ImageId::Int(id),
                instances: inst
                    .into_iter()
                    .map(|(h, o, c)| GroundTruthInstance {
                        human_box: h,
                        object_box: o,
                        category_id: c,
                    })
                    .collect(),
            })
            .collect(),
        categories: (0..categories)
            .map(|id| Category {
                id,
                name: format!("c{id}"),
            })
            .collect(),
    }
}

fn c10_map() -> Outcome {
    let settings = EvalSettings::default();
    let run = |dets: &[DetectionRecord], gt: &GroundTruth, s: &EvalSettings| {
        evaluate_map(dets, gt, s).map_err(|e| e.to_string())
    };
    let hb = bbox(0.0, 0.0, 10.0, 10.0);
    let ob = bbox(20.0, 20.0, 30.0, 30.0);

    // perfect
    let gt = gt_of(
        vec![(1, vec![(hb, ob, 0)]), (2, vec![(hb, ob, 1), (bbox(40.0, 40.0, 50.0, 50.0), ob, 0)])],
        2,
    );
    let dets = vec![
        det(1, hb, ob, vec![0.9, 0.1], 0.9),
        det(2, hb, ob, vec![0.2, 0.8], 0.6),
        det(2, bbox(40.0, 40.0, 50.0, 50.0), ob, vec![0.7, 0.3], 0.5),
    ];
    let perfect = run(&dets, &gt, &settings)?.map;
    ensure!(perfect == 1.0, "perfect fixture mAP {perfect}");

    // right boxes, wrong category
    let gt = gt_of(vec![(1, vec![(hb, ob, 0)])], 2);
    let report = run(&[det(1, hb, ob, vec![0.1, 0.9], 1.0)], &gt, &settings)?;
    ensure!(report.per_category_ap.get(&0) == Some(&0.0), "wrong-category AP {:?}", report.per_category_ap);

    // human IoU 0.6 (60/100) but object IoU 0.4 (40/100): false positive
    let gt = gt_of(vec![(1, vec![(hb, ob, 0)])], 1);
    let human_06 = bbox(0.0, 0.0, 10.0, 6.0);
    let object_04 = bbox(20.0, 20.0, 30.0, 24.0);
    let object_06 = bbox(20.0, 20.0, 30.0, 26.0);
    let fp = run(&[det(1, human_06, object_04, vec![1.0], 1.0)], &gt, &settings)?.map;
    ensure!(fp == 0.0, "human 0.6 / object 0.4 counted as TP (AP {fp})");
    let tp = run(&[det(1, human_06, object_06, vec![1.0], 1.0)], &gt, &settings)?.map;
    ensure!(tp == 1.0, "human 0.6 / object 0.6 not a TP (AP {tp})");

    // mixed: 5 GT over two images, 10 ranked detections
    // outcome by rank: TP TP FP TP FP FP TP FP FP TP
    let g: Vec<(u64, BBox, BBox)> = vec![
        (1, bbox(0.0, 0.0, 10.0, 10.0), bbox(20.0, 0.0, 30.0, 10.0)),
        (1, bbox(0.0, 40.0, 10.0, 50.0), bbox(20.0, 40.0, 30.0, 50.0)),
        (1, bbox(0.0, 80.0, 10.0, 90.0), bbox(20.0, 80.0, 30.0, 90.0)),
        (2, bbox(0.0, 0.0, 10.0, 10.0), bbox(20.0, 0.0, 30.0, 10.0)),
        (2, bbox(50.0, 50.0, 60.0, 60.0), bbox(70.0, 50.0, 80.0, 60.0)),
    ];
    let gt = gt_of(
        vec![
            (1, g[..3].iter().map(|(_, h, o)| (*h, *o, 0)).collect()),
            (2, g[3..].iter().map(|(_, h, o)| (*h, *o, 0)).collect()),
        ],
        1,
    );
    let far = bbox(200.0, 200.0, 210.0, 210.0);
    let ranked = [
        (1, g[0].1, g[0].2),       // TP
        (2, g[3].1, g[3].2),       // TP
        (1, far, far),             // FP, nothing there
        (1, g[1].1, g[1].2),       // TP
        (1, g[0].1, g[0].2),       // FP, duplicate
        (2, g[4].1, far),          // FP, object misses
        (2, g[4].1, g[4].2),       // TP
        (2, g[0].1, g[3].2),       // FP, duplicate of a matched GT
        (1, far, g[2].2),          // FP, human misses
        (1, g[2].1, g[2].2),       // TP
    ];
    let dets: Vec<DetectionRecord> = ranked
        .iter()
        .enumerate()
        .map(|(i, (img, h, o))| det(*img, *h, *o, vec![1.0 - i as f64 * 0.05], 1.0))
        .collect();
    // precision at the recall steps 0.2 0.4 0.6 0.8 1.0, taking the max
    // precision at any higher recall: 1, 1, 3/4, 4/7, 1/2
    let all_points = 0.2 * (1.0 + 1.0 + 0.75 + 4.0 / 7.0 + 0.5);
    // 11 recall thresholds: five at 1, two at 3/4, two at 4/7, two at 1/2
    let eleven = (5.0 + 2.0 * 0.75 + 2.0 * 4.0 / 7.0 + 2.0 * 0.5) / 11.0;
    let got = run(&dets, &gt, &settings)?.map;
    ensure!((got - all_points).abs() <= 1e-6, "all-points AP {got} vs {all_points}");
    let got11 = run(
        &dets,
        &gt,
        &EvalSettings {
            interpolation: Interpolation::ElevenPoint,
            ..settings.clone()
        },
    )?
    .map;
    ensure!((got11 - eleven).abs() <= 1e-6, "11-point AP {got11} vs {eleven}");
    Ok(format!("mixed AP {got:.6} (all points), {got11:.6} (11 points)"))
}

fn c11_gamma() -> Outcome {
    let mut rng = rng(11);
    for _ in 0..1000 {
        let s = rng.random_range(-2.0..2.0);
        let c = rng.random_range(0.0..=1.0);
        let gamma = rng.random_range(1.01..6.0);
        let got = inference_score(s, c, gamma).map_err(|e| e.to_string())?;
        let want = s * f64::powf(c, gamma);
        ensure!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{s}*{c}^{gamma}: {got} vs {want}");
    }
    ensure!(inference_score(1.0, 0.5, 1.0).is_err(), "gamma 1 accepted");

    // equal box scores: ranking and AP do not depend on gamma
    let c = 0.6;
    let scores: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
    let order = |gamma: f64| {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        let key = |i: usize| inference_score(scores[i], c, gamma).unwrap();
        idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
        idx
    };
    let base = order(1.5);
    for gamma in [2.0, 3.0, 8.0] {
        ensure!(order(gamma) == base, "ranking changed at gamma {gamma}");
    }

    let hb = bbox(0.0, 0.0, 10.0, 10.0);
    let ob = bbox(20.0, 20.0, 30.0, 30.0);
    let gt = gt_of((0..10).map(|i| (i, vec![(hb, ob, (i % 2) as usize)])).collect(), 2);
    let dets: Vec<DetectionRecord> = (0..20)
        .map(|i| {
            let s = rng.random_range(0.0..1.0);
            det(i % 10, hb, ob, vec![s, 1.0 - s], c)
        })
        .collect();
    let mut maps = Vec::new();
    for gamma in [1.5, 2.0, 5.0] {
        let settings = EvalSettings {
            gamma,
            ..EvalSettings::default()
        };
        maps.push(evaluate_map(&dets, &gt, &settings).map_err(|e| e.to_string())?.per_category_ap);
    }
    ensure!(maps.windows(2).all(|w| w[0] == w[1]), "AP changed with gamma: {maps:?}");
    Ok("1000 pointwise samples; ranking and AP stable for gamma in 1.5..8".into())
}

fn c12_smoke() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outcome = smoke::run_smoke(dir.path(), |args| {
        let o = Command::new(env!("CARGO_BIN_EXE_sgc")).args(args).output()?;
        if !o.status.success() {
            anyhow::bail!("{}", String::from_utf8_lossy(&o.stderr));
        }
        Ok(())
    })
    .map_err(|e| format!("{e:#}"))?;
    let classes = outcome.hierarchy.classes.len();
    ensure!(classes == smoke::GROUPS * smoke::PER_GROUP, "{classes} classes");
    ensure!(outcome.elapsed < Duration::from_secs(30), "took {:?}", outcome.elapsed);
    ensure!(
        outcome.map_hierarchical > outcome.map_flat,
        "mAP lambda=0.5 {} vs lambda=0 {}",
        outcome.map_hierarchical,
        outcome.map_flat
    );
    Ok(format!(
        "{classes} classes, {} images; mAP {:.4} (lambda 0.5) vs {:.4} (lambda 0)",
        outcome.cases.len(),
        outcome.map_hierarchical,
        outcome.map_flat
    ))
}
