//! Recursive cluster-then-compare construction of per-class description
//! sequences.
//!
//! Level 1 of every class is its initial (non-comparative) description.
//! Classes are then clustered in embedding space; each multi-member cluster
//! asks the LLM for comparative descriptions, which become the next level,
//! and the procedure recurses into the cluster.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{check_dim, l2_normalize, Vector};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::io;
use crate::llm::{self, LlmProvider};

pub const DEFAULT_GROUPING_THRESHOLD: usize = 6;
pub const DEFAULT_MAX_DEPTH: usize = 3;
pub const KMEANS_MAX_ITERS: usize = 100;
/// Independent k-means++ restarts; the lowest-inertia run wins.
pub const KMEANS_RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub text: String,
    pub embedding: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    pub levels: Vec<Level>,
}

impl ClassEntry {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareStrategy {
    SummaryCompare,
    DirectCompare,
}

/// What happened to one cluster during the build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuildAction {
    /// Root group; every class received its initial description.
    Initial,
    SummaryCompare,
    DirectCompare,
    /// Single-member cluster; nothing to compare against.
    Singleton,
    /// Same membership as the group it was split from; recursion stops.
    NoProgress,
}

impl From<CompareStrategy> for BuildAction {
    fn from(s: CompareStrategy) -> Self {
        match s {
            CompareStrategy::SummaryCompare => BuildAction::SummaryCompare,
            CompareStrategy::DirectCompare => BuildAction::DirectCompare,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildLogEntry {
    /// Level index produced for the members of this cluster.
    pub depth: usize,
    /// Number of clusters requested in the round that produced this cluster.
    pub k: usize,
    /// Member class ids, ascending.
    pub members: Vec<usize>,
    pub action: BuildAction,
    /// Prompts issued for this cluster (cache hits included).
    pub llm_requests: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassHierarchy {
    #[serde(rename = "N")]
    pub grouping_threshold: usize,
    pub max_depth: usize,
    pub classes: Vec<ClassEntry>,
    pub build_log: Vec<BuildLogEntry>,
    /// Optional learned text-token offset used by the fused score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_token: Option<Vector>,
}

impl ClassHierarchy {
    pub fn dim(&self) -> Option<usize> {
        self.classes
            .first()
            .and_then(|c| c.levels.first())
            .map(|l| l.embedding.dim())
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim().ok_or(Error::EmptyHierarchy)?;
        let mut ids: Vec<usize> = self.classes.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSetting("duplicate class id in hierarchy".into()));
        }
        for c in &self.classes {
            if c.levels.is_empty() {
                return Err(Error::EmptyInput(format!("class `{}` has no levels", c.name)));
            }
            for l in &c.levels {
                check_dim(dim, l.embedding.dim())?;
            }
        }
        if let Some(t) = &self.text_token {
            check_dim(dim, t.dim())?;
        }
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let h: ClassHierarchy = io::read_json(path)?;
        h.validate()
            .map_err(|e| Error::schema(path, e.to_string()))?;
        Ok(h)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json()?.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster index for each input point.
    pub assignments: Vec<usize>,
    /// Cluster means.
    pub centroids: Vec<Vector>,
    pub inertia: f64,
    pub iterations: usize,
}

impl KMeansResult {
    /// Member indices per cluster, each ascending.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centroids.len()];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn unit_centroids(&self) -> Result<Vec<Vector>> {
        self.centroids.iter().map(l2_normalize).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

fn means(points: &[Vector], assign: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assign) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p.as_slice()) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    sums
}

/// Moves the point farthest from its own centroid into each empty cluster.
fn repair_empty(points: &[Vector], assign: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        assign.iter().for_each(|&c| counts[c] += 1);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let mut donor = None;
        let mut best = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let c = assign[i];
            if counts[c] < 2 {
                continue;
            }
            let d = sq_dist(p.as_slice(), &centroids[c]);
            if d > best {
                best = d;
                donor = Some(i);
            }
        }
        let i = donor.expect("k <= n guarantees a cluster with two points");
        assign[i] = empty;
        centroids[empty] = points[i].as_slice().to_vec();
    }
}

/// Lloyd's algorithm with k-means++ seeding, restarted
/// [`KMEANS_RESTARTS`] times from one seeded stream. Deterministic for a
/// given seed; ties in inertia keep the earliest run.
pub fn kmeans(points: &[Vector], k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::BadK { k, points: n });
    }
    let dim = points[0].dim();
    for p in points {
        check_dim(dim, p.dim())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    // a single run suffices when every point is its own cluster
    let restarts = if k == n || k == 1 { 1 } else { KMEANS_RESTARTS };
    for _ in 0..restarts {
        let run = lloyd(points, k, dim, &mut rng)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

fn lloyd(points: &[Vector], k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<KMeansResult> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_slice(), points[chosen[0]].as_slice()))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.unwrap()
        } else {
            // every remaining point coincides with a chosen center
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p.as_slice(), points[next].as_slice()));
        }
    }

    let mut centroids: Vec<Vec<f64>> = chosen
        .iter()
        .map(|&i| points[i].as_slice().to_vec())
        .collect();
    let mut assign: Vec<usize> = points
        .iter()
        .map(|p| nearest(p.as_slice(), &centroids))
        .collect();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        repair_empty(points, &mut assign, &mut centroids);
        centroids = means(points, &assign, k, dim);
        let next: Vec<usize> = points
            .iter()
            .map(|p| nearest(p.as_slice(), &centroids))
            .collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    repair_empty(points, &mut assign, &mut centroids);
    let centroids = means(points, &assign, k, dim);
    let inertia = points
        .iter()
        .zip(&assign)
        .map(|(p, &c)| sq_dist(p.as_slice(), &centroids[c]))
        .sum();
    Ok(KMeansResult {
        assignments: assign,
        centroids: centroids
            .into_iter()
            .map(Vector::new)
            .collect::<Result<_>>()?,
        inertia,
        iterations,
    })
}

/// `ceil(num_classes / n)`, clamped to `[1, num_classes]`.
pub fn choose_k(num_classes: usize, n: usize) -> usize {
    num_classes.div_ceil(n.max(1)).clamp(1, num_classes.max(1))
}

/// Summary-based comparison when the group strictly exceeds half the
/// grouping threshold.
pub fn select_strategy(group_size: usize, n: usize) -> CompareStrategy {
    // g > n/2 with exact halves, without floating point
    if 2 * group_size > n {
        CompareStrategy::SummaryCompare
    } else {
        CompareStrategy::DirectCompare
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildConfig {
    pub grouping_threshold: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            grouping_threshold: DEFAULT_GROUPING_THRESHOLD,
            max_depth: DEFAULT_MAX_DEPTH,
            seed: 0,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grouping_threshold == 0 {
            return Err(Error::InvalidSetting("grouping threshold N must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(Error::InvalidSetting("max_depth must be >= 1".into()));
        }
        Ok(())
    }
}

struct Builder<'a, P: ?Sized> {
    cfg: BuildConfig,
    llm: &'a P,
    encoder: &'a TextEncoder,
    classes: Vec<ClassEntry>,
    log: Vec<BuildLogEntry>,
}

impl<P: LlmProvider + ?Sized> Builder<'_, P> {
    /// Runs `prompts` through the provider, at most `max_in_flight` at a time,
    /// returning answers in input order.
    fn complete_all(&self, prompts: &[(usize, String)], depth: usize) -> Result<Vec<String>> {
        let width = self.llm.max_in_flight().max(1);
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(width) {
            let results: Vec<Result<String>> = if chunk.len() == 1 {
                vec![self.llm.complete(&chunk[0].1).map(|r| r.text)]
            } else {
                std::thread::scope(|s| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|(_, p)| s.spawn(move || self.llm.complete(p).map(|r| r.text)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("LLM worker panicked"))
                        .collect()
                })
            };
            for ((class, _), r) in chunk.iter().zip(results) {
                out.push(r.map_err(|e| self.context(*class, depth, e))?);
            }
        }
        Ok(out)
    }

    fn context(&self, class: usize, depth: usize, e: Error) -> Error {
        Error::Build {
            class: self.classes[class].name.clone(),
            depth,
            source: Box::new(e),
        }
    }

    fn push_level(&mut self, class: usize, depth: usize, text: String) -> Result<()> {
        let embedding = self
            .encoder
            .encode_answer(&text)
            .map_err(|e| self.context(class, depth, e))?;
        self.classes[class].levels.push(Level { text, embedding });
        Ok(())
    }

    fn initial(&mut self) -> Result<()> {
        let prompts: Vec<(usize, String)> = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (i, llm::initial_prompt(&c.name)))
            .collect();
        let answers = self.complete_all(&prompts, 1)?;
        for (i, text) in answers.into_iter().enumerate() {
            self.push_level(i, 1, text)?;
        }
        self.log.push(BuildLogEntry {
            depth: 1,
            k: 1,
            members: self.classes.iter().map(|c| c.id).collect(),
            action: BuildAction::Initial,
            llm_requests: prompts.len(),
        });
        Ok(())
    }

    /// Embedding used for clustering: mean of the first `depth` levels.
    fn clustering_point(&self, class: usize, depth: usize) -> Result<Vector> {
        let levels = &self.classes[class].levels[..depth];
        l2_normalize(&Vector::mean(levels.iter().map(|l| &l.embedding))?)
    }

    /// `group` holds indices into `self.classes`; each member currently has
    /// exactly `depth` levels.
    fn round(&mut self, group: &[usize], depth: usize, is_root: bool) -> Result<()> {
        if group.len() < 2 || depth >= self.cfg.max_depth {
            return Ok(());
        }
        let points = group
            .iter()
            .map(|&c| self.clustering_point(c, depth))
            .collect::<Result<Vec<_>>>()?;
        let k = choose_k(group.len(), self.cfg.grouping_threshold);
        let km = kmeans(&points, k, self.cfg.seed)?;
        let mut clusters: Vec<Vec<usize>> = km
            .clusters()
            .into_iter()
            .map(|members| members.into_iter().map(|i| group[i]).collect())
            .collect();
        clusters.sort_by_key(|c: &Vec<usize>| c[0]);

        for cluster in clusters {
            let members: Vec<usize> = cluster.iter().map(|&c| self.classes[c].id).collect();
            let mut entry = BuildLogEntry {
                depth: depth + 1,
                k,
                members,
                action: BuildAction::Singleton,
                llm_requests: 0,
            };
            if cluster.len() == 1 {
                self.log.push(entry);
                continue;
            }
            if !is_root && cluster.len() == group.len() {
                entry.action = BuildAction::NoProgress;
                self.log.push(entry);
                continue;
            }
            let strategy = select_strategy(cluster.len(), self.cfg.grouping_threshold);
            entry.action = strategy.into();
            entry.llm_requests = self.compare(&cluster, depth + 1, strategy)?;
            self.log.push(entry);
            self.round(&cluster, depth + 1, false)?;
        }
        Ok(())
    }

    /// Appends a comparative level to every member; returns the prompt count.
    fn compare(&mut self, cluster: &[usize], depth: usize, strategy: CompareStrategy) -> Result<usize> {
        let names: Vec<&str> = cluster
            .iter()
            .map(|&c| self.classes[c].name.as_str())
            .collect();
        let (prompts, extra) = match strategy {
            CompareStrategy::SummaryCompare => {
                let summary_prompt = llm::summarize_prompt(&names);
                let summary = self
                    .llm
                    .complete(&summary_prompt)
                    .map_err(|e| self.context(cluster[0], depth, e))?
                    .text;
                let summary = summary.trim();
                let prompts: Vec<(usize, String)> = cluster
                    .iter()
                    .zip(&names)
                    .map(|(&c, name)| (c, llm::summary_compare_prompt(name, summary)))
                    .collect();
                (prompts, 1)
            }
            CompareStrategy::DirectCompare => {
                let prompts = cluster
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let others: Vec<&str> = names
                            .iter()
                            .enumerate()
                            .filter(|&(j, _)| j != i)
                            .map(|(_, n)| *n)
                            .collect();
                        (c, llm::direct_compare_prompt(names[i], &others))
                    })
                    .collect::<Vec<_>>();
                (prompts, 0)
            }
        };
        let answers = self.complete_all(&prompts, depth)?;
        for ((class, _), text) in prompts.iter().zip(answers) {
            self.push_level(*class, depth, text)?;
        }
        Ok(prompts.len() + extra)
    }
}

/// Builds the class hierarchy for `names` (class ids are list positions).
pub fn build_hierarchy<P: LlmProvider + ?Sized>(
    names: &[String],
    cfg: BuildConfig,
    llm: &P,
    encoder: &TextEncoder,
) -> Result<ClassHierarchy> {
    cfg.validate()?;
    if names.is_empty() {
        return Err(Error::EmptyInput("class list is empty".into()));
    }
    let mut sorted: Vec<&String> = names.iter().collect();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidSetting(format!("duplicate class name `{}`", w[0])));
    }
    if let Some(blank) = names.iter().find(|n| n.trim().is_empty()) {
        return Err(Error::EmptyInput(format!("blank class name `{blank}`")));
    }

    let mut builder = Builder {
        cfg,
        llm,
        encoder,
        classes: names
            .iter()
            .enumerate()
            .map(|(id, name)| ClassEntry {
                id,
                name: name.clone(),
                levels: Vec::new(),
            })
            .collect(),
        log: Vec::new(),
    };
    builder.initial()?;
    let all: Vec<usize> = (0..names.len()).collect();
    builder.round(&all, 1, true)?;
    Ok(ClassHierarchy {
        grouping_threshold: cfg.grouping_threshold,
        max_depth: cfg.max_depth,
        classes: builder.classes,
        build_log: builder.log,
        text_token: None,
    })
}
