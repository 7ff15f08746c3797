//! Box geometry, the composite prediction/ground-truth matching cost, and an
//! O(n^3) Hungarian solver for rectangular cost matrices.

use serde::{Deserialize, Serialize};

use crate::embedding::Matrix;
use crate::error::{Error, Result};

/// Axis-aligned box `[x1, y1, x2, y2]` with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(x1, y1, x2, y2));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    fn enclosing_area(&self, other: &BBox) -> f64 {
        (self.x2.max(other.x2) - self.x1.min(other.x1))
            * (self.y2.max(other.y2) - self.y1.min(other.y1))
    }

    /// `(cx, cy, w, h)` divided by the image size.
    pub fn normalized_cxcywh(&self, image: ImageSize) -> [f64; 4] {
        [
            (self.x1 + self.x2) / 2.0 / image.width,
            (self.y1 + self.y2) / 2.0 / image.height,
            (self.x2 - self.x1) / image.width,
            (self.y2 - self.y1) / image.height,
        ]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(b: [f64; 4]) -> Result<Self> {
        BBox::new(b[0], b[1], b[2], b[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    /// Boxes already expressed in `[0, 1]` coordinates.
    pub const UNIT: ImageSize = ImageSize {
        width: 1.0,
        height: 1.0,
    };

    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(Error::InvalidSetting(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(ImageSize { width, height })
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    inter / (a.area() + b.area() - inter)
}

/// `1 - GIoU`, in `[0, 2]`.
pub fn giou_loss(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let enclose = a.enclosing_area(b);
    let giou = inter / union - (enclose - union) / enclose;
    1.0 - giou
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiPrediction {
    pub human_box: BBox,
    pub object_box: BBox,
    /// One score per interaction category.
    pub class_scores: Vec<f64>,
    pub box_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub human_box: BBox,
    pub object_box: BBox,
    pub category_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchCostWeights {
    pub lambda_b: f64,
    pub lambda_iou: f64,
    pub lambda_cls: f64,
}

impl Default for MatchCostWeights {
    fn default() -> Self {
        MatchCostWeights {
            lambda_b: 5.0,
            lambda_iou: 5.0,
            lambda_cls: 2.0,
        }
    }
}

impl MatchCostWeights {
    pub fn new(lambda_b: f64, lambda_iou: f64, lambda_cls: f64) -> Result<Self> {
        let w = MatchCostWeights {
            lambda_b,
            lambda_iou,
            lambda_cls,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_b, self.lambda_iou, self.lambda_cls];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidSetting("cost weights must be finite and >= 0".into()));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidSetting("cost weights are all zero".into()));
        }
        Ok(())
    }
}

/// Unweighted terms of the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    /// L1 over normalized center-size coordinates, human plus object.
    pub box_l1: f64,
    /// GIoU loss, human plus object.
    pub giou: f64,
    /// Negative log-softmax of the ground-truth category.
    pub cls: f64,
}

impl CostTerms {
    pub fn weighted(&self, w: &MatchCostWeights) -> f64 {
        w.lambda_b * self.box_l1 + w.lambda_iou * self.giou + w.lambda_cls * self.cls
    }
}

/// `-log softmax(scores)[k]`, computed with a max shift.
pub fn neg_log_softmax(scores: &[f64], k: usize) -> Result<f64> {
    let target = *scores.get(k).ok_or(Error::UnknownCategory(k))?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - target)
}

pub fn cost_terms(pred: &HoiPrediction, gt: &GroundTruthInstance, image: ImageSize) -> Result<CostTerms> {
    if pred.class_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("class scores"));
    }
    let l1 = |a: &BBox, b: &BBox| -> f64 {
        a.normalized_cxcywh(image)
            .iter()
            .zip(b.normalized_cxcywh(image))
            .map(|(x, y)| (x - y).abs())
            .sum()
    };
    Ok(CostTerms {
        box_l1: l1(&pred.human_box, &gt.human_box) + l1(&pred.object_box, &gt.object_box),
        giou: giou_loss(&pred.human_box, &gt.human_box) + giou_loss(&pred.object_box, &gt.object_box),
        cls: neg_log_softmax(&pred.class_scores, gt.category_id)?,
    })
}

pub fn match_cost(
    pred: &HoiPrediction,
    gt: &GroundTruthInstance,
    w: &MatchCostWeights,
    image: ImageSize,
) -> Result<f64> {
    Ok(cost_terms(pred, gt, image)?.weighted(w))
}

/// Cost matrix with predictions as rows and ground truth as columns.
pub fn cost_matrix(
    preds: &[HoiPrediction],
    gts: &[GroundTruthInstance],
    w: &MatchCostWeights,
    image: ImageSize,
) -> Result<Matrix> {
    let data = preds
        .iter()
        .flat_map(|p| gts.iter().map(move |g| match_cost(p, g, w, image)))
        .collect::<Result<Vec<_>>>()?;
    Matrix::new(preds.len(), gts.len(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost one-to-one assignment of `min(rows, cols)` pairs
/// (shortest augmenting paths with row/column potentials).
pub fn hungarian(costs: &Matrix) -> Result<Assignment> {
    if costs.as_slice().iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFiniteCost);
    }
    let transposed = costs.rows() > costs.cols();
    let owned;
    let m = if transposed {
        owned = costs.transpose();
        &owned
    } else {
        costs
    };
    let (n, k) = (m.rows(), m.cols());

    // 1-based arrays; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; k + 1];
    let mut col_owner = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = m.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=k)
        .filter(|&j| col_owner[j] != 0)
        .map(|j| {
            let (r, c) = (col_owner[j] - 1, j - 1);
            if transposed {
                (c, r)
            } else {
                (r, c)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| costs.get(r, c)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Inference-time rescoring `s * c^gamma`, `gamma > 1`.
pub fn inference_score(s_hat: f64, c_hat: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(Error::BadGamma(gamma));
    }
    if !(0.0..=1.0).contains(&c_hat) {
        return Err(Error::BadScore(c_hat));
    }
    Ok(s_hat * c_hat.powf(gamma))
}
