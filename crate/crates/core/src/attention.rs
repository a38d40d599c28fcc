//! Toy multi-head attention probe for positional-information retention.
//!
//! Queries and keys are rotated by their id vectors before the scaled dot
//! product, so the score matrix reflects exactly what the rotary ids make
//! visible. No training, no masking, no caching: the block exists to measure
//! how id merging changes attention, not to model language.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::merge::{Token, TokenSet};
use crate::rope::{build_frequencies, rotate, ComplexEmbedding, IdVector, RopeConfig, RopeError};

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("head count must be positive")]
    ZeroHeads,
    #[error("scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("query/key width {got} does not match {expected} (heads x 2 x lanes)")]
    WidthMismatch { expected: usize, got: usize },
    #[error("id list length {ids} does not match token count {tokens}")]
    IdCountMismatch { ids: usize, tokens: usize },
    #[error("attention over zero keys is undefined")]
    NoKeys,
    #[error("token carries no source records")]
    EmptyToken,
    #[error("carried position ({0}, {1}, {2}) lies outside the grid extent")]
    PositionOutsideGrid(u32, u32, u32),
    #[error("projection input width {got} does not match weight rows {expected}")]
    ProjectionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Rope(#[from] RopeError),
}

/// Attention probe configuration. Each head spans `rope.lane_count()`
/// complex lanes, i.e. twice that many reals.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    head_count: usize,
    scale: f64,
    rope: RopeConfig,
}

impl AttentionConfig {
    /// `scale` defaults to `1/sqrt(2 * lane_count)`, the usual inverse
    /// square root of the per-head real width.
    pub fn new(
        head_count: usize,
        rope: RopeConfig,
        scale: Option<f64>,
    ) -> Result<Self, AttentionError> {
        if head_count == 0 {
            return Err(AttentionError::ZeroHeads);
        }
        let scale = scale.unwrap_or_else(|| 1.0 / (rope.real_width() as f64).sqrt());
        if !scale.is_finite() || scale <= 0.0 {
            return Err(AttentionError::BadScale(scale));
        }
        Ok(Self {
            head_count,
            scale,
            rope,
        })
    }

    pub fn head_count(&self) -> usize {
        self.head_count
    }

    pub fn head_lane_count(&self) -> usize {
        self.rope.lane_count()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rope(&self) -> &RopeConfig {
        &self.rope
    }

    /// Real width of a stacked query/key vector: all heads concatenated.
    pub fn qk_width(&self) -> usize {
        self.head_count * self.rope.real_width()
    }
}

/// Row-stochastic score matrices, one per head, with alignment metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    per_head: Vec<Vec<Vec<f64>>>,
    query_labels: Vec<String>,
    key_provenance: Vec<BTreeSet<usize>>,
}

impl AttentionMap {
    pub fn head_count(&self) -> usize {
        self.per_head.len()
    }

    pub fn query_count(&self) -> usize {
        self.per_head.first().map(|h| h.len()).unwrap_or(0)
    }

    pub fn key_count(&self) -> usize {
        self.per_head
            .first()
            .and_then(|h| h.first())
            .map(|r| r.len())
            .unwrap_or(0)
    }

    /// Score rows of one head; every row sums to one.
    pub fn scores(&self, head: usize) -> &[Vec<f64>] {
        &self.per_head[head]
    }

    pub fn query_labels(&self) -> &[String] {
        &self.query_labels
    }

    pub fn key_provenance(&self) -> &[BTreeSet<usize>] {
        &self.key_provenance
    }

    pub fn set_key_provenance(&mut self, provenance: Vec<BTreeSet<usize>>) {
        self.key_provenance = provenance;
    }

    /// Shannon entropy of every row (natural log, `0 log 0 = 0`),
    /// per head then per query.
    pub fn row_entropy(&self) -> Vec<Vec<f64>> {
        self.per_head
            .iter()
            .map(|head| head.iter().map(|row| entropy(row)).collect())
            .collect()
    }

    /// Population variance of every row's probability values,
    /// per head then per query.
    pub fn row_variance(&self) -> Vec<Vec<f64>> {
        self.per_head
            .iter()
            .map(|head| head.iter().map(|row| variance(row)).collect())
            .collect()
    }

    /// Per-key score averaged over heads and query rows.
    pub fn mean_key_scores(&self) -> Vec<f64> {
        let keys = self.key_count();
        let mut sums = vec![0.0; keys];
        let mut rows = 0usize;
        for head in &self.per_head {
            for row in head {
                for (acc, s) in sums.iter_mut().zip(row) {
                    *acc += s;
                }
                rows += 1;
            }
        }
        if rows > 0 {
            for s in sums.iter_mut() {
                *s /= rows as f64;
            }
        }
        sums
    }
}

pub fn entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

pub fn variance(row: &[f64]) -> f64 {
    if row.is_empty() {
        return 0.0;
    }
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    row.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / row.len() as f64
}

fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn head_lanes(
    stacked: &[f64],
    head: usize,
    cfg: &AttentionConfig,
) -> Result<ComplexEmbedding, AttentionError> {
    let width = cfg.rope().real_width();
    if stacked.len() != cfg.qk_width() {
        return Err(AttentionError::WidthMismatch {
            expected: cfg.qk_width(),
            got: stacked.len(),
        });
    }
    Ok(ComplexEmbedding::from_real(
        &stacked[head * width..(head + 1) * width],
    )?)
}

/// Rotates queries and keys by their id vectors and softmaxes the scaled
/// real inner products, head by head.
///
/// `queries` and `keys` stack all heads: width `head_count * 2 * lane_count`.
pub fn attention_scores(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    query_ids: &[IdVector],
    key_ids: &[IdVector],
    cfg: &AttentionConfig,
) -> Result<AttentionMap, AttentionError> {
    if keys.is_empty() {
        return Err(AttentionError::NoKeys);
    }
    if queries.len() != query_ids.len() {
        return Err(AttentionError::IdCountMismatch {
            ids: query_ids.len(),
            tokens: queries.len(),
        });
    }
    if keys.len() != key_ids.len() {
        return Err(AttentionError::IdCountMismatch {
            ids: key_ids.len(),
            tokens: keys.len(),
        });
    }
    let freqs = build_frequencies(cfg.rope());
    let mut per_head = Vec::with_capacity(cfg.head_count());
    for head in 0..cfg.head_count() {
        let rotated_keys: Vec<ComplexEmbedding> = keys
            .iter()
            .zip(key_ids)
            .map(|(k, ids)| Ok(rotate(&head_lanes(k, head, cfg)?, ids, &freqs)?))
            .collect::<Result<_, AttentionError>>()?;
        let mut rows = Vec::with_capacity(queries.len());
        for (q, ids) in queries.iter().zip(query_ids) {
            let rotated_q = rotate(&head_lanes(q, head, cfg)?, ids, &freqs)?;
            let mut row: Vec<f64> = rotated_keys
                .iter()
                .map(|k| cfg.scale() * rotated_q.re_inner(k))
                .collect();
            softmax_inplace(&mut row);
            rows.push(row);
        }
        per_head.push(rows);
    }
    Ok(AttentionMap {
        per_head,
        query_labels: (0..queries.len()).map(|i| format!("q{i}")).collect(),
        key_provenance: vec![BTreeSet::new(); keys.len()],
    })
}

/// Attention mass projected back onto the source grid, normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    t: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t, self.h, self.w)
    }

    pub fn is_planar(&self) -> bool {
        self.t == 1
    }

    pub fn get(&self, t: usize, h: usize, w: usize) -> f64 {
        self.data[(t * self.h + h) * self.w + w]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn nonzero_cells(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Deposits every key's mean attention score at all of its carried grid
/// positions, split equally among the slots. Cells never written stay zero;
/// the result is scaled by its maximum when that maximum is positive.
pub fn project_heatmap(map: &AttentionMap, tokens: &TokenSet) -> Result<Heatmap, AttentionError> {
    let extent = tokens.grid_extent;
    let scores = map.mean_key_scores();
    let (t, h, w) = (extent.t as usize, extent.h as usize, extent.w as usize);
    let mut data = vec![0.0f64; t * h * w];
    for (token, &score) in tokens.tokens.iter().zip(&scores) {
        let share = score / token.carried.len() as f64;
        for record in &token.carried {
            let p = record.position;
            if !extent.contains(p) {
                return Err(AttentionError::PositionOutsideGrid(p.t, p.h, p.w));
            }
            data[(p.t as usize * h + p.h as usize) * w + p.w as usize] += share;
        }
    }
    let max = data.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in data.iter_mut() {
            *v /= max;
        }
    }
    Ok(Heatmap { t, h, w, data })
}

/// One seeded attention block: fixed random query/key projections (identity
/// when the embedding width already matches the stacked head width) with raw
/// embeddings as values.
#[derive(Debug, Clone)]
pub struct ToyBlock {
    cfg: AttentionConfig,
    projection: Option<Projection>,
}

#[derive(Debug, Clone)]
struct Projection {
    wq: Vec<Vec<f64>>,
    wk: Vec<Vec<f64>>,
}

impl ToyBlock {
    /// Builds a block for tokens of width `embed_width`. Weights are drawn
    /// from a seeded Gaussian scaled by `1/sqrt(embed_width)`.
    pub fn seeded(cfg: AttentionConfig, embed_width: usize, seed: u64) -> Self {
        let projection = if embed_width == cfg.qk_width() {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0 / (embed_width as f64).sqrt()).expect("finite sigma");
            let mut draw = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
                (0..rows)
                    .map(|_| (0..cols).map(|_| normal.sample(&mut rng)).collect())
                    .collect()
            };
            Some(Projection {
                wq: draw(embed_width, cfg.qk_width()),
                wk: draw(embed_width, cfg.qk_width()),
            })
        };
        Self { cfg, projection }
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    fn project(
        &self,
        emb: &[f64],
        weights: Option<&Vec<Vec<f64>>>,
    ) -> Result<Vec<f64>, AttentionError> {
        match weights {
            None => {
                if emb.len() != self.cfg.qk_width() {
                    return Err(AttentionError::WidthMismatch {
                        expected: self.cfg.qk_width(),
                        got: emb.len(),
                    });
                }
                Ok(emb.to_vec())
            }
            Some(w) => {
                if emb.len() != w.len() {
                    return Err(AttentionError::ProjectionMismatch {
                        expected: w.len(),
                        got: emb.len(),
                    });
                }
                let cols = self.cfg.qk_width();
                let mut out = vec![0.0; cols];
                for (x, row) in emb.iter().zip(w) {
                    for (acc, v) in out.iter_mut().zip(row) {
                        *acc += x * v;
                    }
                }
                Ok(out)
            }
        }
    }

    fn token_ids(&self, tokens: &TokenSet) -> Result<Vec<IdVector>, AttentionError> {
        tokens
            .tokens
            .iter()
            .map(|t| {
                t.ppe_ids(self.cfg.rope()).map_err(|e| match e {
                    crate::merge::MergeError::Rope(r) => AttentionError::Rope(r),
                    _ => AttentionError::EmptyToken,
                })
            })
            .collect()
    }

    /// Self-attention map of the token set under its current ids.
    pub fn scores(&self, tokens: &TokenSet) -> Result<AttentionMap, AttentionError> {
        if tokens.is_empty() {
            return Err(AttentionError::NoKeys);
        }
        let ids = self.token_ids(tokens)?;
        let (wq, wk) = match &self.projection {
            Some(p) => (Some(&p.wq), Some(&p.wk)),
            None => (None, None),
        };
        let queries: Vec<Vec<f64>> = tokens
            .tokens
            .iter()
            .map(|t| self.project(&t.embedding, wq))
            .collect::<Result<_, _>>()?;
        let keys: Vec<Vec<f64>> = tokens
            .tokens
            .iter()
            .map(|t| self.project(&t.embedding, wk))
            .collect::<Result<_, _>>()?;
        let mut map = attention_scores(&queries, &keys, &ids, &ids, &self.cfg)?;
        map.set_key_provenance(tokens.tokens.iter().map(Token::provenance).collect());
        Ok(map)
    }

    /// Runs the block: embeddings move toward their attention-weighted
    /// mixture (`x + mean over heads of S x`), ids and provenance unchanged.
    pub fn apply(&self, tokens: &TokenSet) -> Result<(TokenSet, AttentionMap), AttentionError> {
        let map = self.scores(tokens)?;
        let n = tokens.len();
        let heads = map.head_count() as f64;
        let mut out = tokens.clone();
        for (i, token) in out.tokens.iter_mut().enumerate() {
            let mut mixed = vec![0.0f64; token.embedding.len()];
            for head in 0..map.head_count() {
                let row = &map.scores(head)[i];
                for (&weight, key) in row.iter().zip(&tokens.tokens[..n]) {
                    for (acc, v) in mixed.iter_mut().zip(&key.embedding) {
                        *acc += weight * v;
                    }
                }
            }
            for (dst, m) in token.embedding.iter_mut().zip(&mixed) {
                *dst += m / heads;
            }
        }
        Ok((out, map))
    }
}
