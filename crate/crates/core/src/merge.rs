//! Cluster collapse: mean embeddings, ranked source-id selection with slot
//! repetition, and provenance bookkeeping for the ids-retained metric.
//!
//! Every token carries the grid positions that survived into its id slots.
//! A fresh (source) token carries exactly its own position; a compressed
//! token carries `capacity` slots filled from the positions of its cluster,
//! closest-to-center first. Re-merging pools the parents' slots round-robin,
//! which halves the per-parent share at each stage.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterAssignment;
use crate::rope::{fill_mrope_ids, merge_ppe_ids, IdVector, Position3D, RopeConfig, RopeError};

#[derive(Debug, Error, PartialEq)]
pub enum MergeError {
    #[error("assignment covers {assignment} tokens but {tokens} were provided")]
    SizeMismatch { assignment: usize, tokens: usize },
    #[error("embedding width mismatch at token {0}")]
    WidthMismatch(usize),
    #[error("token carries no source records")]
    EmptyCarried,
    #[error(transparent)]
    Rope(#[from] RopeError),
}

/// One surviving source position: where it sits on the grid and which
/// original token it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceRecord {
    pub position: Position3D,
    pub token_index: usize,
}

/// A token embedding plus the source positions that occupy its id slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub embedding: Vec<f64>,
    pub carried: Vec<SourceRecord>,
}

impl Token {
    /// A stage-zero token: carries exactly its own position.
    pub fn source(embedding: Vec<f64>, position: Position3D, index: usize) -> Self {
        Self {
            embedding,
            carried: vec![SourceRecord {
                position,
                token_index: index,
            }],
        }
    }

    /// Original token indices that occupy at least one carried slot.
    pub fn provenance(&self) -> BTreeSet<usize> {
        self.carried.iter().map(|r| r.token_index).collect()
    }

    /// The merged id vector for this token: each carried position fills a
    /// ranked slot (repeating cyclically up to the configured capacity) and
    /// the slots chunk the sections of `config`.
    pub fn ppe_ids(&self, config: &RopeConfig) -> Result<IdVector, MergeError> {
        if self.carried.is_empty() {
            return Err(MergeError::EmptyCarried);
        }
        let filled: Vec<IdVector> = fill_slots(&self.carried, config.capacity())
            .iter()
            .map(|r| fill_mrope_ids(r.position, config))
            .collect::<Result<_, _>>()?;
        Ok(merge_ppe_ids(&filled, config)?)
    }
}

/// Grid bounds of the source token field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridExtent {
    pub t: u32,
    pub h: u32,
    pub w: u32,
}

impl GridExtent {
    pub fn contains(&self, pos: Position3D) -> bool {
        pos.t < self.t && pos.h < self.h && pos.w < self.w
    }

    pub fn cell_count(&self) -> usize {
        self.t as usize * self.h as usize * self.w as usize
    }
}

/// Token counts of one compression stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub n_in: usize,
    pub n_out: usize,
}

/// Ordered token collection with its grid bounds and compression history.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub tokens: Vec<Token>,
    pub grid_extent: GridExtent,
    pub stage_history: Vec<StageCount>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token count before the first recorded stage (the stage-zero count).
    pub fn initial_count(&self) -> usize {
        self.stage_history
            .first()
            .map(|s| s.n_in)
            .unwrap_or(self.tokens.len())
    }

    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        self.tokens.iter().map(|t| t.embedding.clone()).collect()
    }

    /// True when every token still carries exactly its own single position.
    pub fn is_stage_zero(&self) -> bool {
        self.stage_history.is_empty()
            && self
                .tokens
                .iter()
                .enumerate()
                .all(|(i, t)| t.carried.len() == 1 && t.carried[0].token_index == i)
    }
}

/// Repeats the ranked records cyclically until `k` slots are filled.
pub fn fill_slots<T: Clone>(ranked: &[T], k: usize) -> Vec<T> {
    assert!(
        !ranked.is_empty(),
        "cannot fill slots from an empty ranking"
    );
    (0..k).map(|i| ranked[i % ranked.len()].clone()).collect()
}

/// Arithmetic mean embedding per cluster, in cluster order.
///
/// A cluster whose members are bit-identical returns that embedding
/// unchanged; summation rounding must not perturb a degenerate merge.
pub fn merge_embeddings(
    assignment: &ClusterAssignment,
    embeddings: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, MergeError> {
    if assignment.token_count() != embeddings.len() {
        return Err(MergeError::SizeMismatch {
            assignment: assignment.token_count(),
            tokens: embeddings.len(),
        });
    }
    let width = embeddings.first().map(|e| e.len()).unwrap_or(0);
    for (i, emb) in embeddings.iter().enumerate() {
        if emb.len() != width {
            return Err(MergeError::WidthMismatch(i));
        }
    }
    let m = assignment.cluster_count();
    let mut members = vec![Vec::new(); m];
    for (i, &j) in assignment.member_of().iter().enumerate() {
        members[j].push(i);
    }
    Ok(members
        .into_iter()
        .map(|cluster| {
            let first = &embeddings[cluster[0]];
            if cluster.iter().all(|&i| &embeddings[i] == first) {
                return first.clone();
            }
            let mut mean = vec![0.0f64; width];
            for &i in &cluster {
                for (acc, v) in mean.iter_mut().zip(&embeddings[i]) {
                    *acc += v;
                }
            }
            for v in mean.iter_mut() {
                *v /= cluster.len() as f64;
            }
            mean
        })
        .collect())
}

/// One cluster member offered to id selection.
#[derive(Debug, Clone, Copy)]
pub struct MemberIds<'a> {
    pub token_index: usize,
    pub importance: f64,
    pub carried: &'a [SourceRecord],
}

/// Selects the `k` source records that survive a merge.
///
/// Members are ranked by importance (descending, ties to the lower token
/// index) and their carried lists are drained round-robin: slot position
/// first, then member rank. Duplicate source tokens collapse to their
/// highest-ranked occurrence; if fewer than `k` distinct records exist the
/// ranking repeats cyclically from the top.
pub fn select_topk_ids(members: &[MemberIds<'_>], k: usize) -> Vec<SourceRecord> {
    assert!(!members.is_empty(), "cluster must be non-empty");
    let mut ranked: Vec<&MemberIds<'_>> = members.iter().collect();
    ranked.sort_by(|a, b| {
        b.importance
            .total_cmp(&a.importance)
            .then(a.token_index.cmp(&b.token_index))
    });
    let max_len = ranked.iter().map(|m| m.carried.len()).max().unwrap_or(0);
    let mut pool = Vec::new();
    let mut seen = BTreeSet::new();
    for slot in 0..max_len {
        for member in &ranked {
            if let Some(record) = member.carried.get(slot) {
                if seen.insert(record.token_index) {
                    pool.push(*record);
                }
            }
        }
    }
    fill_slots(&pool, k)
}

/// Collapses each cluster into one compressed token: mean embedding, `K`
/// carried slots selected closest-to-center first, and a stage record
/// appended to the history.
pub fn compress_stage(
    tokens: &TokenSet,
    assignment: &ClusterAssignment,
    config: &RopeConfig,
) -> Result<TokenSet, MergeError> {
    if assignment.token_count() != tokens.len() {
        return Err(MergeError::SizeMismatch {
            assignment: assignment.token_count(),
            tokens: tokens.len(),
        });
    }
    if tokens.tokens.iter().any(|t| t.carried.is_empty()) {
        return Err(MergeError::EmptyCarried);
    }
    let embeddings = tokens.embeddings();
    let means = merge_embeddings(assignment, &embeddings)?;
    let capacity = config.capacity();
    let mut compressed = Vec::with_capacity(assignment.cluster_count());
    for (j, embedding) in means.into_iter().enumerate() {
        let members: Vec<MemberIds<'_>> = assignment
            .cluster_members(j)
            .into_iter()
            .map(|i| MemberIds {
                token_index: i,
                importance: assignment.importance()[i],
                carried: &tokens.tokens[i].carried,
            })
            .collect();
        let carried = select_topk_ids(&members, capacity);
        compressed.push(Token { embedding, carried });
    }
    let mut stage_history = tokens.stage_history.clone();
    stage_history.push(StageCount {
        n_in: tokens.len(),
        n_out: compressed.len(),
    });
    Ok(TokenSet {
        tokens: compressed,
        grid_extent: tokens.grid_extent,
        stage_history,
    })
}

/// Fraction of the original tokens whose position survives in some carried
/// slot. `original_count` is the stage-zero token count.
pub fn ids_retained(tokens: &TokenSet, original_count: usize) -> f64 {
    assert!(original_count >= 1, "original count must be positive");
    let mut survivors = BTreeSet::new();
    for token in &tokens.tokens {
        survivors.extend(token.provenance());
    }
    survivors.len() as f64 / original_count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::cluster_tokens;

    fn pos(t: u32, h: u32, w: u32) -> Position3D {
        Position3D::new(t, h, w)
    }

    fn grid_set(h: u32, w: u32, mut embed: impl FnMut(u32, u32) -> Vec<f64>) -> TokenSet {
        let mut tokens = Vec::new();
        for row in 0..h {
            for col in 0..w {
                let index = (row * w + col) as usize;
                tokens.push(Token::source(embed(row, col), pos(0, row, col), index));
            }
        }
        TokenSet {
            tokens,
            grid_extent: GridExtent { t: 1, h, w },
            stage_history: Vec::new(),
        }
    }

    #[test]
    fn mean_of_two_member_cluster() {
        let assignment =
            ClusterAssignment::from_parts(vec![0, 0], vec![0], vec![0.0, 1.0]).unwrap();
        let means = merge_embeddings(&assignment, &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(means, vec![vec![2.0, 3.0]]);
    }

    #[test]
    fn singleton_clusters_return_inputs() {
        let assignment = ClusterAssignment::identity(3).unwrap();
        let embeddings = vec![vec![1.0], vec![5.0], vec![-2.0]];
        assert_eq!(
            merge_embeddings(&assignment, &embeddings).unwrap(),
            embeddings
        );
    }

    #[test]
    fn identical_member_clusters_merge_exactly() {
        // (0.1 + 0.1 + 0.1) / 3 != 0.1 in f64; the degenerate case must
        // still return the embedding bit for bit.
        let assignment =
            ClusterAssignment::from_parts(vec![0, 0, 0], vec![0], vec![0.0, 0.0, 0.0]).unwrap();
        let embeddings = vec![vec![0.1, -0.3]; 3];
        let means = merge_embeddings(&assignment, &embeddings).unwrap();
        assert_eq!(means, vec![vec![0.1, -0.3]]);
    }

    #[test]
    fn means_match_brute_force_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let embeddings: Vec<Vec<f64>> = (0..32)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let assignment = cluster_tokens(&embeddings, 5.0 / 32.0).unwrap();
        let means = merge_embeddings(&assignment, &embeddings).unwrap();
        for (j, mean) in means.iter().enumerate() {
            let members = assignment.cluster_members(j);
            for (dim, &value) in mean.iter().enumerate() {
                let mut sum = 0.0;
                for &i in &members {
                    sum += embeddings[i][dim];
                }
                assert_eq!(value, sum / members.len() as f64);
            }
        }
    }

    #[test]
    fn lone_record_repeats_across_all_slots() {
        let carried = [SourceRecord {
            position: pos(0, 2, 3),
            token_index: 7,
        }];
        let members = [MemberIds {
            token_index: 7,
            importance: 0.0,
            carried: &carried,
        }];
        let selected = select_topk_ids(&members, 8);
        assert_eq!(selected.len(), 8);
        assert!(selected.iter().all(|r| r.token_index == 7));
    }

    #[test]
    fn first_stage_takes_closest_members_in_distance_order() {
        let carried: Vec<[SourceRecord; 1]> = (0..10)
            .map(|i| {
                [SourceRecord {
                    position: pos(0, 0, i as u32),
                    token_index: i,
                }]
            })
            .collect();
        let members: Vec<MemberIds<'_>> = carried
            .iter()
            .enumerate()
            .map(|(i, c)| MemberIds {
                token_index: i,
                importance: -(i as f64), // token 0 is the center
                carried: c,
            })
            .collect();
        let selected = select_topk_ids(&members, 8);
        let picked: Vec<usize> = selected.iter().map(|r| r.token_index).collect();
        assert_eq!(picked, vec![0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn second_stage_pools_parent_heads_round_robin() {
        let parent_a: Vec<SourceRecord> = (0..8)
            .map(|i| SourceRecord {
                position: pos(0, 0, i as u32),
                token_index: i,
            })
            .collect();
        let parent_b: Vec<SourceRecord> = (0..8)
            .map(|i| SourceRecord {
                position: pos(0, 1, i as u32),
                token_index: 100 + i,
            })
            .collect();
        let members = [
            MemberIds {
                token_index: 0,
                importance: 0.0,
                carried: &parent_a,
            },
            MemberIds {
                token_index: 1,
                importance: -1.0,
                carried: &parent_b,
            },
        ];
        let selected = select_topk_ids(&members, 8);
        let picked: Vec<usize> = selected.iter().map(|r| r.token_index).collect();
        // Four from each parent's head, interleaved by slot position.
        assert_eq!(picked, vec![0, 100, 1, 101, 2, 102, 3, 103]);
    }

    #[test]
    fn duplicate_records_collapse_before_cyclic_repetition() {
        // Parent A carries two distinct records repeated across its slots;
        // parent B carries one. The distinct pool is [x, z, y] and cycles.
        let parent_a: Vec<SourceRecord> = (0..8)
            .map(|i| SourceRecord {
                position: pos(0, 0, (i % 2) as u32),
                token_index: i % 2,
            })
            .collect();
        let parent_b = [SourceRecord {
            position: pos(0, 1, 0),
            token_index: 50,
        }];
        let members = [
            MemberIds {
                token_index: 0,
                importance: 0.0,
                carried: &parent_a,
            },
            MemberIds {
                token_index: 1,
                importance: -1.0,
                carried: &parent_b,
            },
        ];
        let selected = select_topk_ids(&members, 8);
        let picked: Vec<usize> = selected.iter().map(|r| r.token_index).collect();
        assert_eq!(picked, vec![0, 50, 1, 0, 50, 1, 0, 50]);
    }

    #[test]
    fn empty_carried_lists_are_rejected() {
        let mut set = grid_set(2, 2, |r, c| vec![r as f64, c as f64]);
        set.tokens[1].carried.clear();
        let assignment = ClusterAssignment::identity(4).unwrap();
        assert_eq!(
            compress_stage(&set, &assignment, &RopeConfig::default_3d()),
            Err(MergeError::EmptyCarried)
        );
    }

    #[test]
    fn identity_assignment_preserves_embeddings_and_provenance() {
        let set = grid_set(2, 2, |r, c| vec![r as f64, c as f64]);
        let assignment = ClusterAssignment::identity(4).unwrap();
        let config = RopeConfig::default_3d();
        let out = compress_stage(&set, &assignment, &config).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.stage_history, vec![StageCount { n_in: 4, n_out: 4 }]);
        for (before, after) in set.tokens.iter().zip(&out.tokens) {
            assert_eq!(before.embedding, after.embedding);
            assert_eq!(before.provenance(), after.provenance());
            assert_eq!(after.carried.len(), 8);
            assert_eq!(
                before.ppe_ids(&config).unwrap(),
                after.ppe_ids(&config).unwrap()
            );
        }
    }

    #[test]
    fn twenty_tokens_at_default_ratio_reduce_to_nine() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let set = grid_set(4, 5, |_, _| {
            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()
        });
        let assignment = cluster_tokens(&set.embeddings(), 0.45).unwrap();
        let out = compress_stage(&set, &assignment, &RopeConfig::default_3d()).unwrap();
        assert_eq!(out.len(), 9);
        let stage = out.stage_history[0];
        assert_eq!(1.0 - stage.n_out as f64 / stage.n_in as f64, 0.55);
    }

    #[test]
    fn compressed_ids_recompute_from_carried_records() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let set = grid_set(8, 8, |_, _| {
            (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()
        });
        let assignment = cluster_tokens(&set.embeddings(), 29.0 / 64.0).unwrap();
        let config = RopeConfig::default_3d();
        let out = compress_stage(&set, &assignment, &config).unwrap();
        assert_eq!(out.len(), 29);
        for token in &out.tokens {
            assert_eq!(token.carried.len(), 8);
            let filled: Vec<IdVector> = token
                .carried
                .iter()
                .map(|r| fill_mrope_ids(r.position, &config).unwrap())
                .collect();
            let expected = merge_ppe_ids(&filled, &config).unwrap();
            assert_eq!(token.ppe_ids(&config).unwrap(), expected);
        }
    }

    #[test]
    fn retention_is_total_without_compression() {
        let set = grid_set(2, 3, |r, c| vec![r as f64 * 3.0 + c as f64]);
        assert_eq!(ids_retained(&set, 6), 1.0);
    }

    #[test]
    fn capacity_one_retention_equals_token_retention() {
        use rand::{Rng, SeedableRng};
        for seed in 0..5 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let set = grid_set(6, 6, |_, _| {
                (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()
            });
            let assignment = cluster_tokens(&set.embeddings(), 0.45).unwrap();
            let config = RopeConfig::new(vec![16, 24, 24], 10_000.0, 1).unwrap();
            let out = compress_stage(&set, &assignment, &config).unwrap();
            let expected = out.len() as f64 / set.len() as f64;
            assert_eq!(ids_retained(&out, set.len()), expected);
        }
    }

    #[test]
    fn retention_grows_with_capacity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let set = grid_set(8, 8, |_, _| {
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()
        });
        let assignment = cluster_tokens(&set.embeddings(), 0.45).unwrap();
        let mut retained = Vec::new();
        for capacity in [1usize, 8, 24] {
            let config = RopeConfig::new(vec![24, 24, 24], 10_000.0, capacity).unwrap();
            let out = compress_stage(&set, &assignment, &config).unwrap();
            retained.push(ids_retained(&out, set.len()));
        }
        assert!(retained[0] <= retained[1]);
        assert!(retained[1] <= retained[2]);
        // At 55% reduction some cluster always holds two or more tokens.
        assert!(retained[0] < retained[1]);
        // Retention floor: every compressed token preserves at least one id.
        let m = cluster_tokens(&set.embeddings(), 0.45)
            .unwrap()
            .cluster_count();
        assert!(retained[0] >= m as f64 / set.len() as f64);
    }

    #[test]
    fn mismatched_assignment_is_rejected() {
        let set = grid_set(2, 2, |r, c| vec![r as f64, c as f64]);
        let assignment = ClusterAssignment::identity(3).unwrap();
        assert!(matches!(
            compress_stage(&set, &assignment, &RopeConfig::default_3d()),
            Err(MergeError::SizeMismatch { .. })
        ));
    }
}
