//! Granularity-sensing aggregation of intermediate encoder layers.
//!
//! Layers are grouped into contiguous blocks. Inside a block of length `d`,
//! the layer at block-local position `l` (1-based) gets the distance-aware
//! Gaussian weight `exp(-(d - l)^2 / (2 sigma^2))`, so the deepest layer of
//! each block dominates. Block sums are then combined with one weight per
//! block:
//!
//! ```text
//! Z = sum_s a_s * sum_{l in block s} a_l^s * F_l
//! ```
//!
//! A single cross-attention layer turns `Z` into per-query HOI features.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::{check_dim, Matrix};
use crate::error::{Error, Result};
use crate::io;

/// Per-layer token features `F_1..F_L`, each `tokens x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatureStack {
    layers: Vec<Matrix>,
}

impl LayerFeatureStack {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::EmptyInput("feature stack has no layers".into()))?;
        let (t, c) = (first.rows(), first.cols());
        for m in &layers[1..] {
            check_dim(t, m.rows())?;
            check_dim(c, m.cols())?;
        }
        Ok(LayerFeatureStack { layers })
    }

    pub fn zeros(num_layers: usize, tokens: usize, dim: usize) -> Self {
        LayerFeatureStack {
            layers: vec![Matrix::zeros(tokens, dim); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn tokens(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols()
    }

    /// Layer by 1-based encoder index.
    pub fn layer(&self, index: usize) -> &Matrix {
        &self.layers[index - 1]
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &LayerFeatureStack, b: f64) -> Result<Self> {
        check_dim(self.num_layers(), other.num_layers())?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(x, y)| {
                let mut out = x.scale(a);
                out.add_scaled(y, b)?;
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        LayerFeatureStack::new(layers)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let file: FeatureStackFile = io::read_json(path)?;
        file.into_stack().map_err(|e| Error::schema(path, e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        io::write_json_atomic(path, &FeatureStackFile::from_stack(self))
    }
}

/// `{"layers": L, "tokens": T, "dim": C, "data": [...]}` with one entry per
/// layer. Each entry is either a flat row-major `T*C` list or `T` rows of `C`.
#[derive(Serialize, Deserialize)]
pub struct FeatureStackFile {
    pub layers: usize,
    pub tokens: usize,
    pub dim: usize,
    pub data: Vec<LayerData>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerData {
    Flat(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl FeatureStackFile {
    fn into_stack(self) -> Result<LayerFeatureStack> {
        check_dim(self.layers, self.data.len())?;
        let layers = self
            .data
            .into_iter()
            .map(|layer| {
                let m = match layer {
                    LayerData::Flat(xs) => Matrix::new(self.tokens, self.dim, xs)?,
                    LayerData::Rows(rows) => {
                        check_dim(self.tokens, rows.len())?;
                        Matrix::from_rows(rows)?
                    }
                };
                check_dim(self.dim, m.cols())?;
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        LayerFeatureStack::new(layers)
    }

    fn from_stack(stack: &LayerFeatureStack) -> Self {
        FeatureStackFile {
            layers: stack.num_layers(),
            tokens: stack.tokens(),
            dim: stack.dim(),
            data: stack
                .layers
                .iter()
                .map(|m| LayerData::Flat(m.as_slice().to_vec()))
                .collect(),
        }
    }
}

/// Inclusive 1-based layer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// Ordered, disjoint, contiguous layer blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LayerRange>", into = "Vec<LayerRange>")]
pub struct BlockPartition {
    blocks: Vec<LayerRange>,
}

impl BlockPartition {
    pub const DEFAULT_SPEC: &'static str = "6-8,9-11,12";

    pub fn new(blocks: Vec<LayerRange>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidPartition("no blocks".into()));
        }
        let mut prev_end = 0;
        for b in &blocks {
            if b.start == 0 {
                return Err(Error::InvalidPartition("layer indices start at 1".into()));
            }
            if b.start > b.end {
                return Err(Error::InvalidPartition(format!(
                    "block {}-{} is reversed",
                    b.start, b.end
                )));
            }
            if b.start <= prev_end {
                return Err(Error::InvalidPartition(format!(
                    "block {}-{} overlaps or precedes the previous block",
                    b.start, b.end
                )));
            }
            prev_end = b.end;
        }
        Ok(BlockPartition { blocks })
    }

    pub fn blocks(&self) -> &[LayerRange] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate_for(&self, num_layers: usize) -> Result<()> {
        let last = self.blocks[self.blocks.len() - 1].end;
        if last > num_layers {
            return Err(Error::PartitionOutOfRange {
                layer: last,
                num_layers,
            });
        }
        Ok(())
    }
}

impl Default for BlockPartition {
    fn default() -> Self {
        BlockPartition::DEFAULT_SPEC.parse().unwrap()
    }
}

impl TryFrom<Vec<LayerRange>> for BlockPartition {
    type Error = Error;

    fn try_from(blocks: Vec<LayerRange>) -> Result<Self> {
        BlockPartition::new(blocks)
    }
}

impl From<BlockPartition> for Vec<LayerRange> {
    fn from(p: BlockPartition) -> Self {
        p.blocks
    }
}

/// Parses `"6-8,9-11,12"`.
impl FromStr for BlockPartition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_index = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidPartition(format!("bad layer index `{t}` in `{s}`")))
        };
        let blocks = s
            .split(',')
            .map(|part| match part.split_once('-') {
                Some((a, b)) => Ok(LayerRange {
                    start: parse_index(a)?,
                    end: parse_index(b)?,
                }),
                None => {
                    let i = parse_index(part)?;
                    Ok(LayerRange { start: i, end: i })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        BlockPartition::new(blocks)
    }
}

impl fmt::Display for BlockPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            if b.start == b.end {
                write!(f, "{}", b.start)?;
            } else {
                write!(f, "{}-{}", b.start, b.end)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsaParams {
    pub partition: BlockPartition,
    pub sigma: f64,
    pub block_weights: Vec<f64>,
    /// Explicit per-layer weights for each block, replacing the
    /// sigma-derived Gaussian weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intra_weights: Option<Vec<Vec<f64>>>,
}

impl GsaParams {
    pub const DEFAULT_SIGMA: f64 = 1.0;
    /// Initial weight of the final block; every other block starts at 1.
    pub const FINAL_BLOCK_WEIGHT: f64 = 2.0;

    pub fn new(partition: BlockPartition, sigma: f64) -> Result<Self> {
        let block_weights = Self::default_block_weights(partition.num_blocks());
        let params = GsaParams {
            partition,
            sigma,
            block_weights,
            intra_weights: None,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn default_block_weights(num_blocks: usize) -> Vec<f64> {
        let mut w = vec![1.0; num_blocks];
        if num_blocks > 1 {
            w[num_blocks - 1] = Self::FINAL_BLOCK_WEIGHT;
        }
        w
    }

    pub fn with_block_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.block_weights = weights;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidSigma(self.sigma));
        }
        let s = self.partition.num_blocks();
        if self.block_weights.len() != s {
            return Err(Error::InvalidSetting(format!(
                "{} block weights for {s} blocks",
                self.block_weights.len()
            )));
        }
        if self.block_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("block weights"));
        }
        if let Some(intra) = &self.intra_weights {
            check_dim(s, intra.len())?;
            for (w, b) in intra.iter().zip(self.partition.blocks()) {
                check_dim(b.len(), w.len())?;
                if w.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("intra-block weights"));
                }
            }
        }
        Ok(())
    }

    fn intra(&self, block: usize) -> Result<Vec<f64>> {
        match &self.intra_weights {
            Some(w) => Ok(w[block].clone()),
            None => dgw_weights(self.partition.blocks()[block].len(), self.sigma),
        }
    }
}

impl Default for GsaParams {
    fn default() -> Self {
        GsaParams::new(BlockPartition::default(), Self::DEFAULT_SIGMA).unwrap()
    }
}

/// Distance-aware Gaussian weights for a block of `d` layers:
/// `exp(-(d - l)^2 / (2 sigma^2))` for `l = 1..=d`.
pub fn dgw_weights(d: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidSigma(sigma));
    }
    if d == 0 {
        return Err(Error::EmptyInput("block of zero layers".into()));
    }
    let two_var = 2.0 * sigma * sigma;
    Ok((1..=d)
        .map(|l| {
            let dist = (d - l) as f64;
            (-dist * dist / two_var).exp()
        })
        .collect())
}

fn check_stack(stack: &LayerFeatureStack, params: &GsaParams) -> Result<()> {
    params.validate()?;
    params.partition.validate_for(stack.num_layers())
}

fn block_sum(stack: &LayerFeatureStack, block: LayerRange, weights: &[f64]) -> Matrix {
    let mut acc = Matrix::zeros(stack.tokens(), stack.dim());
    for (layer, &w) in block.indices().zip(weights) {
        acc.add_scaled(stack.layer(layer), w)
            .expect("stack layers share a shape");
    }
    acc
}

/// Aggregated feature map `Z` (`tokens x dim`).
pub fn aggregate(stack: &LayerFeatureStack, params: &GsaParams) -> Result<Matrix> {
    check_stack(stack, params)?;
    let mut z = Matrix::zeros(stack.tokens(), stack.dim());
    for (s, (&block, &alpha)) in params
        .partition
        .blocks()
        .iter()
        .zip(&params.block_weights)
        .enumerate()
    {
        let intra = params.intra(s)?;
        z.add_scaled(&block_sum(stack, block, &intra), alpha)?;
    }
    Ok(z)
}

/// Gradients of every entry of `Z` with respect to the trainable scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateGrad {
    /// `dZ/dsigma`; zero when intra-block weights are overridden.
    pub d_sigma: Matrix,
    /// `dZ/da_s`, one matrix per block.
    pub d_block_weights: Vec<Matrix>,
}

pub fn aggregate_grad(stack: &LayerFeatureStack, params: &GsaParams) -> Result<AggregateGrad> {
    check_stack(stack, params)?;
    let sigma3 = params.sigma.powi(3);
    let mut d_sigma = Matrix::zeros(stack.tokens(), stack.dim());
    let mut d_block_weights = Vec::with_capacity(params.partition.num_blocks());
    for (s, (&block, &alpha)) in params
        .partition
        .blocks()
        .iter()
        .zip(&params.block_weights)
        .enumerate()
    {
        let intra = params.intra(s)?;
        d_block_weights.push(block_sum(stack, block, &intra));
        if params.intra_weights.is_none() {
            // d/dsigma exp(-k^2 / 2 sigma^2) = exp(..) * k^2 / sigma^3
            let d = block.len();
            let d_intra: Vec<f64> = intra
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let k = (d - (i + 1)) as f64;
                    w * k * k / sigma3
                })
                .collect();
            d_sigma.add_scaled(&block_sum(stack, block, &d_intra), alpha)?;
        }
    }
    Ok(AggregateGrad {
        d_sigma,
        d_block_weights,
    })
}

/// HOI queries and projection matrices of the cross-attention decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub queries: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl DecoderParams {
    /// Identity projections.
    pub fn with_queries(queries: Matrix) -> Self {
        let c = queries.cols();
        DecoderParams {
            queries,
            w_q: Matrix::identity(c),
            w_k: Matrix::identity(c),
            w_v: Matrix::identity(c),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        check_dim(dim, self.queries.cols())?;
        for w in [&self.w_q, &self.w_k, &self.w_v] {
            check_dim(dim, w.rows())?;
            check_dim(dim, w.cols())?;
        }
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Per-query HOI features, `num_queries x dim`.
    pub features: Matrix,
    /// Attention weights, `num_queries x tokens`; rows sum to one.
    pub attention: Matrix,
}

/// One scaled dot-product cross-attention layer: the HOI queries attend over
/// `Z`, which supplies both keys and values.
pub fn decode(z: &Matrix, dec: &DecoderParams) -> Result<Decoded> {
    dec.validate(z.cols())?;
    let q = dec.queries.matmul(&dec.w_q)?;
    let k = z.matmul(&dec.w_k)?;
    let v = z.matmul(&dec.w_v)?;
    let mut scores = q.matmul(&k.transpose())?.scale(1.0 / (z.cols() as f64).sqrt());
    let t = scores.cols();
    for row in scores.data_mut().chunks_mut(t) {
        softmax_in_place(row);
    }
    let features = scores.matmul(&v)?;
    Ok(Decoded {
        features,
        attention: scores,
    })
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
