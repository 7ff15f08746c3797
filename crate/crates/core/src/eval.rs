//! HOI detection evaluation: per-category average precision and mAP.
//!
//! A triplet is a true positive when both its human box and its object box
//! overlap a not-yet-matched ground-truth instance of the same category with
//! IoU strictly above the threshold. Ground truth is matched greedily in
//! descending score order, so duplicates of one instance count once.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::matching::{inference_score, iou, BBox, GroundTruthInstance, HoiPrediction};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageId {
    Int(u64),
    Str(String),
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageId::Int(i) => write!(f, "{i}"),
            ImageId::Str(s) => f.write_str(s),
        }
    }
}

/// One line of the detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: ImageId,
    pub human_box: BBox,
    pub object_box: BBox,
    pub category_scores: Vec<f64>,
    pub box_score: f64,
}

impl DetectionRecord {
    pub fn prediction(&self) -> HoiPrediction {
        HoiPrediction {
            human_box: self.human_box,
            object_box: self.object_box,
            class_scores: self.category_scores.clone(),
            box_score: self.box_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotations {
    pub image_id: ImageId,
    pub instances: Vec<GroundTruthInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub images: Vec<ImageAnnotations>,
    pub categories: Vec<Category>,
}

impl GroundTruth {
    /// Category ids must be `0..K` in order; instances must use known ids.
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.categories.iter().enumerate() {
            if c.id != i {
                return Err(Error::InvalidSetting(format!(
                    "category ids must be 0..K in order; position {i} has id {}",
                    c.id
                )));
            }
        }
        for img in &self.images {
            for inst in &img.instances {
                if inst.category_id >= self.categories.len() {
                    return Err(Error::UnknownCategory(inst.category_id));
                }
            }
        }
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let gt: GroundTruth = io::read_json(path)?;
        gt.validate().map_err(|e| Error::schema(path, e.to_string()))?;
        Ok(gt)
    }
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    io::read_json_lines(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    AllPoints,
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    /// Exponent applied to the box score before ranking.
    pub gamma: f64,
    pub interpolation: Interpolation,
    /// Categories each detection is emitted for, by descending score;
    /// 0 emits every category.
    pub top_k: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            gamma: DEFAULT_GAMMA,
            interpolation: Interpolation::AllPoints,
            top_k: 1,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.iou_threshold) {
            return Err(Error::InvalidSetting(format!(
                "IoU threshold must lie in [0, 1), got {}",
                self.iou_threshold
            )));
        }
        inference_score(1.0, 1.0, self.gamma)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category_ap: BTreeMap<usize, f64>,
    pub map: f64,
    pub num_images: usize,
    /// Categories without ground truth, excluded from the mean.
    pub skipped_categories: Vec<usize>,
    pub settings: EvalSettings,
}

/// Area under the precision/recall curve; `recall` must be non-decreasing.
pub fn average_precision(recall: &[f64], precision: &[f64], method: Interpolation) -> f64 {
    match method {
        Interpolation::AllPoints => {
            let mut mrec = Vec::with_capacity(recall.len() + 2);
            mrec.push(0.0);
            mrec.extend_from_slice(recall);
            mrec.push(1.0);
            let mut mpre = Vec::with_capacity(precision.len() + 2);
            mpre.push(0.0);
            mpre.extend_from_slice(precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(precision)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Indices of the `top_k` highest scores (all when `top_k == 0`), ties to the
/// lower index.
fn top_categories(scores: &[f64], top_k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    if top_k > 0 {
        idx.truncate(top_k);
    }
    idx
}

fn category_ap(
    category: usize,
    dets: &[DetectionRecord],
    ranked: &[Vec<usize>],
    gt_by_image: &HashMap<&ImageId, Vec<&GroundTruthInstance>>,
    settings: &EvalSettings,
) -> Result<Option<f64>> {
    let mut pool: HashMap<&ImageId, Vec<(&GroundTruthInstance, bool)>> = HashMap::new();
    let mut npos = 0usize;
    for (img, insts) in gt_by_image {
        let of_cat: Vec<_> = insts
            .iter()
            .filter(|g| g.category_id == category)
            .map(|g| (*g, false))
            .collect();
        npos += of_cat.len();
        pool.insert(*img, of_cat);
    }
    if npos == 0 {
        return Ok(None);
    }

    let mut triplets = Vec::new();
    for (i, (d, cats)) in dets.iter().zip(ranked).enumerate() {
        if cats.contains(&category) {
            let s = inference_score(d.category_scores[category], d.box_score, settings.gamma)?;
            triplets.push((s, i));
        }
    }
    triplets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let t = settings.iou_threshold;
    let mut tp_cum = 0usize;
    let mut recall = Vec::with_capacity(triplets.len());
    let mut precision = Vec::with_capacity(triplets.len());
    for (rank, &(_, i)) in triplets.iter().enumerate() {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = pool.get(&d.image_id) {
            for (j, (g, matched)) in cands.iter().enumerate() {
                if *matched {
                    continue;
                }
                let (ih, io) = (iou(&d.human_box, &g.human_box), iou(&d.object_box, &g.object_box));
                if ih > t && io > t {
                    let overlap = ih.min(io);
                    if best.is_none_or(|(_, b)| overlap > b) {
                        best = Some((j, overlap));
                    }
                }
            }
        }
        if let Some((j, _)) = best {
            pool.get_mut(&d.image_id).unwrap()[j].1 = true;
            tp_cum += 1;
        }
        recall.push(tp_cum as f64 / npos as f64);
        precision.push(tp_cum as f64 / (rank + 1) as f64);
    }
    Ok(Some(average_precision(&recall, &precision, settings.interpolation)))
}

pub fn evaluate_map(
    dets: &[DetectionRecord],
    gt: &GroundTruth,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    settings.validate()?;
    gt.validate()?;
    let k = gt.categories.len();
    for d in dets {
        if d.category_scores.len() != k {
            return Err(Error::DimMismatch {
                expected: k,
                found: d.category_scores.len(),
            });
        }
        if d.category_scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("category scores"));
        }
        if !(0.0..=1.0).contains(&d.box_score) {
            return Err(Error::BadScore(d.box_score));
        }
    }

    let mut gt_by_image: HashMap<&ImageId, Vec<&GroundTruthInstance>> = HashMap::new();
    for img in &gt.images {
        gt_by_image
            .entry(&img.image_id)
            .or_default()
            .extend(img.instances.iter());
    }
    let ranked: Vec<Vec<usize>> = dets
        .iter()
        .map(|d| top_categories(&d.category_scores, settings.top_k))
        .collect();

    let mut per_category_ap = BTreeMap::new();
    let mut skipped_categories = Vec::new();
    for c in 0..k {
        match category_ap(c, dets, &ranked, &gt_by_image, settings)? {
            Some(ap) => {
                per_category_ap.insert(c, ap);
            }
            None => skipped_categories.push(c),
        }
    }
    if per_category_ap.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let map = per_category_ap.values().sum::<f64>() / per_category_ap.len() as f64;
    Ok(EvalReport {
        per_category_ap,
        map,
        num_images: gt_by_image.len(),
        skipped_categories,
        settings: settings.clone(),
    })
}
