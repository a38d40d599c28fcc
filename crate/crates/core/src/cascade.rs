//! Multi-stage compression pipelines: a pre-block stage and/or stages
//! interleaved between toy attention blocks, with token-count accounting,
//! id-retention bookkeeping, and attention statistics in a final report.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionConfig, AttentionError, AttentionMap, ToyBlock};
use crate::cluster::{cluster_tokens, temporal_cluster, ClusterAssignment, ClusterError};
use crate::merge::{compress_stage, ids_retained, MergeError, TokenSet};
use crate::rope::RopeConfig;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("pipeline input token set is empty")]
    EmptyInput,
    #[error("stage placements must be strictly increasing, one stage per slot")]
    BadPlacement,
    #[error("stage ratio must lie in (0, 1], got {0}")]
    BadRatio(f64),
    #[error("frames do not share a common grid-cell layout")]
    MisalignedFrames,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Spatial,
    Temporal,
}

/// One compression stage. `after_block` of `None` places the stage before
/// the first attention block (the encoder/LLM interface position).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: StageKind,
    pub ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after_block: Option<usize>,
}

impl StageSpec {
    pub fn before(kind: StageKind, ratio: f64) -> Self {
        Self {
            kind,
            ratio,
            after_block: None,
        }
    }

    pub fn after(block: usize, kind: StageKind, ratio: f64) -> Self {
        Self {
            kind,
            ratio,
            after_block: Some(block),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub head_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl Default for AttentionParams {
    fn default() -> Self {
        Self {
            head_count: 2,
            scale: None,
        }
    }
}

/// Full pipeline configuration, loadable from the structured config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub rope: RopeConfig,
    #[serde(default)]
    pub attention: AttentionParams,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(rope: RopeConfig, seed: u64) -> Self {
        Self {
            rope,
            attention: AttentionParams::default(),
            stages: Vec::new(),
            seed,
        }
    }

    /// One spatial stage at the encoder/LLM interface.
    pub fn single_spatial(rope: RopeConfig, ratio: f64, seed: u64) -> Self {
        let mut cfg = Self::new(rope, seed);
        cfg.stages = vec![StageSpec::before(StageKind::Spatial, ratio)];
        cfg
    }

    /// Spatial stages after consecutive blocks, modelling in-model cascades.
    pub fn cascade(rope: RopeConfig, ratios: &[f64], seed: u64) -> Self {
        let mut cfg = Self::new(rope, seed);
        cfg.stages = ratios
            .iter()
            .enumerate()
            .map(|(b, &r)| StageSpec::after(b, StageKind::Spatial, r))
            .collect();
        cfg
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut last: Option<i64> = None;
        for stage in &self.stages {
            if !stage.ratio.is_finite() || stage.ratio <= 0.0 || stage.ratio > 1.0 {
                return Err(PipelineError::BadRatio(stage.ratio));
            }
            let slot = stage.after_block.map(|b| b as i64).unwrap_or(-1);
            if let Some(prev) = last {
                if slot <= prev {
                    return Err(PipelineError::BadPlacement);
                }
            }
            last = Some(slot);
        }
        self.attention_config()?;
        Ok(())
    }

    pub fn attention_config(&self) -> Result<AttentionConfig, PipelineError> {
        Ok(AttentionConfig::new(
            self.attention.head_count,
            self.rope.clone(),
            self.attention.scale,
        )?)
    }
}

/// Token counts of one executed stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub kind: StageKind,
    pub n_in: usize,
    pub n_out: usize,
    /// Measured retention: `n_out / n_in`.
    pub ratio_measured: f64,
}

/// Attention statistics of the final token set: per-query series averaged
/// over heads, plus their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub entropy_mean: f64,
    pub variance_mean: f64,
    pub entropy: Vec<f64>,
    pub variance: Vec<f64>,
}

impl AttentionSummary {
    pub fn from_map(map: &AttentionMap) -> Self {
        let heads = map.head_count() as f64;
        let queries = map.query_count();
        let mut entropy = vec![0.0; queries];
        for head in map.row_entropy() {
            for (acc, h) in entropy.iter_mut().zip(&head) {
                *acc += h / heads;
            }
        }
        let mut variance = vec![0.0; queries];
        for head in map.row_variance() {
            for (acc, v) in variance.iter_mut().zip(&head) {
                *acc += v / heads;
            }
        }
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        Self {
            entropy_mean: mean(&entropy),
            variance_mean: mean(&variance),
            entropy,
            variance,
        }
    }
}

/// Everything a pipeline run reports. Wall times are kept for console
/// diagnostics but stay out of the serialized form so that identical inputs
/// produce identical report bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub original_tokens: usize,
    pub final_tokens: usize,
    pub reduction_ratio: f64,
    pub ids_retained: f64,
    pub stages: Vec<StageReport>,
    pub attention: AttentionSummary,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub stage_wall_ms: Vec<f64>,
}

/// A finished run: the report plus the compressed token set itself.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub tokens: TokenSet,
}

fn frame_groups(tokens: &TokenSet) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, token) in tokens.tokens.iter().enumerate() {
        groups
            .entry(token.carried[0].position.t)
            .or_default()
            .push(i);
    }
    groups
}

/// Builds the frame-event assignment: frames cluster into events over their
/// mean embeddings, then tokens merge across frames of an event aligned by
/// grid cell. Returns `None` when only one frame exists.
pub fn temporal_assignment(
    tokens: &TokenSet,
    ratio: f64,
) -> Result<Option<ClusterAssignment>, PipelineError> {
    let groups = frame_groups(tokens);
    if groups.len() <= 1 {
        return Ok(None);
    }
    let width = tokens.tokens[0].embedding.len();
    let mut frame_means = Vec::with_capacity(groups.len());
    let mut cells: Vec<BTreeMap<(u32, u32), usize>> = Vec::with_capacity(groups.len());
    for members in groups.values() {
        let mut mean = vec![0.0f64; width];
        let mut cell_map = BTreeMap::new();
        for &i in members {
            for (acc, v) in mean.iter_mut().zip(&tokens.tokens[i].embedding) {
                *acc += v;
            }
            let p = tokens.tokens[i].carried[0].position;
            if cell_map.insert((p.h, p.w), i).is_some() {
                return Err(PipelineError::MisalignedFrames);
            }
        }
        for v in mean.iter_mut() {
            *v /= members.len() as f64;
        }
        frame_means.push(mean);
        cells.push(cell_map);
    }
    let keys: BTreeSet<(u32, u32)> = cells[0].keys().copied().collect();
    if cells
        .iter()
        .any(|c| c.keys().copied().collect::<BTreeSet<_>>() != keys)
    {
        return Err(PipelineError::MisalignedFrames);
    }

    let frame_events = temporal_cluster(&frame_means, ratio)?;

    // One cluster per (event, cell); the center is the event's center frame
    // at that cell, and every member inherits its frame's event distance.
    let mut clusters: Vec<(usize, Vec<usize>)> = Vec::new();
    for event in 0..frame_events.cluster_count() {
        let frames = frame_events.cluster_members(event);
        let center_frame = frame_events.centers()[event];
        for &key in &keys {
            let center_token = cells[center_frame][&key];
            let members = frames.iter().map(|&f| cells[f][&key]).collect();
            clusters.push((center_token, members));
        }
    }
    clusters.sort_by_key(|(center, _)| *center);

    let n = tokens.len();
    let mut member_of = vec![0usize; n];
    let mut distances = vec![0.0f64; n];
    let mut centers = Vec::with_capacity(clusters.len());
    let frame_index: BTreeMap<u32, usize> = groups
        .keys()
        .enumerate()
        .map(|(idx, &t)| (t, idx))
        .collect();
    for (j, (center, members)) in clusters.iter().enumerate() {
        centers.push(*center);
        for &i in members {
            member_of[i] = j;
            let f = frame_index[&tokens.tokens[i].carried[0].position.t];
            distances[i] = frame_events.center_distance()[f];
        }
    }
    Ok(Some(ClusterAssignment::from_parts(
        member_of, centers, distances,
    )?))
}

/// Spatial clustering run independently inside each frame group (post
/// temporal merge: inside each event), combined into one assignment.
pub fn per_event_spatial_assignment(
    tokens: &TokenSet,
    ratio: f64,
) -> Result<ClusterAssignment, PipelineError> {
    let groups = frame_groups(tokens);
    let mut clusters: Vec<(usize, Vec<usize>, Vec<f64>)> = Vec::new();
    for members in groups.values() {
        let embeddings: Vec<Vec<f64>> = members
            .iter()
            .map(|&i| tokens.tokens[i].embedding.clone())
            .collect();
        let local = cluster_tokens(&embeddings, ratio)?;
        for j in 0..local.cluster_count() {
            let local_members = local.cluster_members(j);
            let global_center = members[local.centers()[j]];
            let global_members: Vec<usize> = local_members.iter().map(|&l| members[l]).collect();
            let dists: Vec<f64> = local_members
                .iter()
                .map(|&l| local.center_distance()[l])
                .collect();
            clusters.push((global_center, global_members, dists));
        }
    }
    clusters.sort_by_key(|(center, _, _)| *center);
    let n = tokens.len();
    let mut member_of = vec![0usize; n];
    let mut distances = vec![0.0f64; n];
    let mut centers = Vec::with_capacity(clusters.len());
    for (j, (center, members, dists)) in clusters.iter().enumerate() {
        centers.push(*center);
        for (&i, &d) in members.iter().zip(dists) {
            member_of[i] = j;
            distances[i] = d;
        }
    }
    Ok(ClusterAssignment::from_parts(
        member_of, centers, distances,
    )?)
}

struct StageOutcome {
    tokens: TokenSet,
    report: Option<StageReport>,
    warning: Option<String>,
    wall_ms: f64,
}

fn apply_stage(
    tokens: TokenSet,
    stage: &StageSpec,
    rope: &RopeConfig,
) -> Result<StageOutcome, PipelineError> {
    let start = Instant::now();
    let n_in = tokens.len();
    let assignment = match stage.kind {
        StageKind::Spatial => Some(cluster_tokens(&tokens.embeddings(), stage.ratio)?),
        StageKind::Temporal => temporal_assignment(&tokens, stage.ratio)?,
    };
    match assignment {
        None => Ok(StageOutcome {
            tokens,
            report: None,
            warning: Some("temporal stage skipped: input has a single frame".to_string()),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        }),
        Some(assignment) => {
            let out = compress_stage(&tokens, &assignment, rope)?;
            let n_out = out.len();
            Ok(StageOutcome {
                tokens: out,
                report: Some(StageReport {
                    kind: stage.kind,
                    n_in,
                    n_out,
                    ratio_measured: n_out as f64 / n_in as f64,
                }),
                warning: None,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        }
    }
}

fn finish_run(
    tokens: TokenSet,
    cfg: &PipelineConfig,
    stages: Vec<StageReport>,
    warnings: Vec<String>,
    wall: Vec<f64>,
) -> Result<PipelineOutcome, PipelineError> {
    let stats_block = ToyBlock::seeded(
        cfg.attention_config()?,
        tokens.tokens[0].embedding.len(),
        cfg.seed,
    );
    let map = stats_block.scores(&tokens)?;
    let original = tokens.initial_count();
    let report = PipelineReport {
        original_tokens: original,
        final_tokens: tokens.len(),
        reduction_ratio: 1.0 - tokens.len() as f64 / original as f64,
        ids_retained: ids_retained(&tokens, original),
        stages,
        attention: AttentionSummary::from_map(&map),
        warnings,
        stage_wall_ms: wall,
    };
    Ok(PipelineOutcome { report, tokens })
}

/// Executes the configured stages in order, running a toy attention block
/// between placements, and snapshots attention statistics of the final
/// token set. Deterministic for a fixed `(tokens, cfg)` pair.
pub fn run_pipeline(
    tokens: &TokenSet,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    let embed_width = tokens.tokens[0].embedding.len();
    let mut current = tokens.clone();
    let mut stage_reports = Vec::new();
    let mut warnings = Vec::new();
    let mut wall = Vec::new();

    let record = |outcome: StageOutcome,
                  reports: &mut Vec<StageReport>,
                  warns: &mut Vec<String>,
                  wall: &mut Vec<f64>| {
        if let Some(report) = outcome.report {
            reports.push(report);
        }
        if let Some(warning) = outcome.warning {
            warns.push(warning);
        }
        wall.push(outcome.wall_ms);
        outcome.tokens
    };

    for stage in cfg.stages.iter().filter(|s| s.after_block.is_none()) {
        let outcome = apply_stage(current, stage, &cfg.rope)?;
        current = record(outcome, &mut stage_reports, &mut warnings, &mut wall);
    }
    let block_count = cfg
        .stages
        .iter()
        .filter_map(|s| s.after_block)
        .max()
        .map(|b| b + 1)
        .unwrap_or(0);
    for block_index in 0..block_count {
        let block = ToyBlock::seeded(
            cfg.attention_config()?,
            embed_width,
            cfg.seed.wrapping_add(block_index as u64 + 1),
        );
        let (updated, _) = block.apply(&current)?;
        current = updated;
        for stage in cfg
            .stages
            .iter()
            .filter(|s| s.after_block == Some(block_index))
        {
            let outcome = apply_stage(current, stage, &cfg.rope)?;
            current = record(outcome, &mut stage_reports, &mut warnings, &mut wall);
        }
    }
    finish_run(current, cfg, stage_reports, warnings, wall)
}

/// Temporal event merge followed by a spatial stage inside each event, the
/// two-step composition used for video inputs. With a single input frame the
/// temporal stage is skipped (with a warning) and the run degenerates to a
/// plain spatial pipeline.
pub fn run_spatiotemporal(
    tokens: &TokenSet,
    temporal_ratio: f64,
    spatial_ratio: f64,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    if tokens.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    for ratio in [temporal_ratio, spatial_ratio] {
        if !ratio.is_finite() || ratio <= 0.0 || ratio > 1.0 {
            return Err(PipelineError::BadRatio(ratio));
        }
    }
    let mut current = tokens.clone();
    let mut stage_reports = Vec::new();
    let mut warnings = Vec::new();
    let mut wall = Vec::new();

    let start = Instant::now();
    let temporal_ran = match temporal_assignment(&current, temporal_ratio)? {
        Some(assignment) => {
            let n_in = current.len();
            current = compress_stage(&current, &assignment, &cfg.rope)?;
            stage_reports.push(StageReport {
                kind: StageKind::Temporal,
                n_in,
                n_out: current.len(),
                ratio_measured: current.len() as f64 / n_in as f64,
            });
            true
        }
        None => {
            warnings.push("temporal stage skipped: input has a single frame".to_string());
            false
        }
    };
    wall.push(start.elapsed().as_secs_f64() * 1e3);

    let start = Instant::now();
    let assignment = if temporal_ran {
        per_event_spatial_assignment(&current, spatial_ratio)?
    } else {
        cluster_tokens(&current.embeddings(), spatial_ratio)?
    };
    let n_in = current.len();
    current = compress_stage(&current, &assignment, &cfg.rope)?;
    stage_reports.push(StageReport {
        kind: StageKind::Spatial,
        n_in,
        n_out: current.len(),
        ratio_measured: current.len() as f64 / n_in as f64,
    });
    wall.push(start.elapsed().as_secs_f64() * 1e3);

    finish_run(current, cfg, stage_reports, warnings, wall)
}
