//! Built-in invariant suite behind the `selftest` subcommand.
//!
//! Each check is a quick, seeded exercise of a contract the library must
//! hold everywhere: rotation unitarity, relative-position invariance,
//! partition integrity, retention monotonicity, row-stochastic attention,
//! and file round-trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_scores, project_heatmap, AttentionConfig, ToyBlock};
use crate::cluster::cluster_tokens;
use crate::io::{load_tokens, save_tokens};
use crate::merge::{compress_stage, ids_retained};
use crate::rope::{
    build_frequencies, fill_mrope_ids, merge_ppe_ids, rotate, ComplexEmbedding, IdVector,
    Position3D, RopeConfig,
};
use crate::synth::{gen_synthetic, Pattern, SynthSpec};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn random_embedding(rng: &mut ChaCha8Rng, lanes: usize) -> ComplexEmbedding {
    ComplexEmbedding::from_real(
        &(0..2 * lanes)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect::<Vec<f64>>(),
    )
    .expect("even width")
}

fn rotary_unitarity(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let lanes = rng.gen_range(1..=64);
        let config = RopeConfig::new(vec![lanes], 10_000.0, 1).unwrap();
        let freqs = build_frequencies(&config);
        let emb = random_embedding(&mut rng, lanes);
        let ids = IdVector::from_ids((0..lanes).map(|_| rng.gen_range(0..512)).collect());
        let rotated = rotate(&emb, &ids, &freqs).unwrap();
        worst = worst.max((rotated.norm() - emb.norm()).abs());
        for (a, b) in rotated.lanes().iter().zip(emb.lanes()) {
            worst = worst.max((a.norm() - b.norm()).abs());
        }
    }
    check(
        "rotary-unitarity",
        worst < 1e-10,
        format!("max norm deviation {worst:.3e} (limit 1e-10)"),
    )
}

fn rotary_shift_invariance(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let lanes = rng.gen_range(1..=64);
        let config = RopeConfig::new(vec![lanes], 10_000.0, 1).unwrap();
        let freqs = build_frequencies(&config);
        let q = random_embedding(&mut rng, lanes);
        let k = random_embedding(&mut rng, lanes);
        let (m, n, s) = (
            rng.gen_range(0..256u32),
            rng.gen_range(0..256u32),
            rng.gen_range(0..256u32),
        );
        let base = rotate(&q, &IdVector::uniform(lanes, m), &freqs)
            .unwrap()
            .re_inner(&rotate(&k, &IdVector::uniform(lanes, n), &freqs).unwrap());
        let moved = rotate(&q, &IdVector::uniform(lanes, m + s), &freqs)
            .unwrap()
            .re_inner(&rotate(&k, &IdVector::uniform(lanes, n + s), &freqs).unwrap());
        worst = worst.max((base - moved).abs());
    }
    check(
        "rotary-shift-invariance",
        worst < 1e-9,
        format!("max inner-product deviation {worst:.3e} (limit 1e-9)"),
    )
}

fn capacity_one_bit_identity(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE);
    let config = RopeConfig::new(vec![16, 24, 24], 10_000.0, 1).unwrap();
    let freqs = build_frequencies(&config);
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let pos = Position3D::new(
            rng.gen_range(0..64),
            rng.gen_range(0..64),
            rng.gen_range(0..64),
        );
        let plain = fill_mrope_ids(pos, &config).unwrap();
        let merged = merge_ppe_ids(std::slice::from_ref(&plain), &config).unwrap();
        let emb = random_embedding(&mut rng, config.lane_count());
        let a = rotate(&emb, &plain, &freqs).unwrap();
        let b = rotate(&emb, &merged, &freqs).unwrap();
        if a != b {
            mismatches += 1;
        }
    }
    check(
        "ppe-k1-bit-identity",
        mismatches == 0,
        format!("{mismatches} of 1000 trials deviated from plain rotation"),
    )
}

fn clustering_partition(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x17);
    let mut failures = Vec::new();
    for trial in 0..10 {
        let n = rng.gen_range(4..40);
        let embeddings: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let assignment = cluster_tokens(&embeddings, 0.45).unwrap();
        let again = cluster_tokens(&embeddings, 0.45).unwrap();
        if assignment != again {
            failures.push(format!("trial {trial}: nondeterministic"));
        }
        let mut sizes = vec![0usize; assignment.cluster_count()];
        for &c in assignment.member_of() {
            sizes[c] += 1;
        }
        if sizes.iter().sum::<usize>() != n || sizes.contains(&0) {
            failures.push(format!("trial {trial}: broken partition"));
        }
    }
    check(
        "clustering-partition",
        failures.is_empty(),
        if failures.is_empty() {
            "10 seeded instances partition cleanly and deterministically".to_string()
        } else {
            failures.join("; ")
        },
    )
}

fn retention_monotonicity(seed: u64) -> Check {
    let set = gen_synthetic(&SynthSpec {
        t: 1,
        h: 8,
        w: 8,
        embed_width: 8,
        pattern: Pattern::UniformNoise,
        seed,
    })
    .unwrap();
    let assignment = cluster_tokens(&set.embeddings(), 0.45).unwrap();
    let mut retained = Vec::new();
    for capacity in [1usize, 8, 24] {
        let config = RopeConfig::new(vec![24, 24, 24], 10_000.0, capacity).unwrap();
        let out = compress_stage(&set, &assignment, &config).unwrap();
        retained.push(ids_retained(&out, set.len()));
    }
    let floor = assignment.cluster_count() as f64 / set.len() as f64;
    let ok = retained[0] <= retained[1] && retained[1] <= retained[2] && retained[0] >= floor;
    check(
        "retention-monotonicity",
        ok,
        format!(
            "retained K=1/8/24: {:.4}/{:.4}/{:.4}, floor {floor:.4}",
            retained[0], retained[1], retained[2]
        ),
    )
}

fn attention_rows(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA77);
    let rope = RopeConfig::new(vec![4, 4], 10_000.0, 4).unwrap();
    let cfg = AttentionConfig::new(2, rope.clone(), None).unwrap();
    let n = 12;
    let qs: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..cfg.qk_width())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let ids: Vec<IdVector> = (0..n)
        .map(|i| fill_mrope_ids(Position3D::new(0, i / 4, i % 4), &rope).unwrap())
        .collect();
    let map = attention_scores(&qs, &qs, &ids, &ids, &cfg).unwrap();
    let mut worst_row = 0.0f64;
    let mut entropy_ok = true;
    let limit = (n as f64).ln() + 1e-9;
    for head in 0..map.head_count() {
        for row in map.scores(head) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        for h in &map.row_entropy()[head] {
            if *h < -1e-12 || *h > limit {
                entropy_ok = false;
            }
        }
    }
    check(
        "attention-rows",
        worst_row < 1e-9 && entropy_ok,
        format!("max row-sum deviation {worst_row:.3e}, entropy within [0, ln V]"),
    )
}

fn heatmap_coverage(seed: u64) -> Check {
    let set = gen_synthetic(&SynthSpec {
        t: 1,
        h: 8,
        w: 8,
        embed_width: 8,
        pattern: Pattern::Blobs { count: 4 },
        seed,
    })
    .unwrap();
    let assignment = cluster_tokens(&set.embeddings(), 0.45).unwrap();
    let mut cells = Vec::new();
    for capacity in [1usize, 8] {
        let rope = RopeConfig::new(vec![16, 24, 24], 10_000.0, capacity).unwrap();
        let out = compress_stage(&set, &assignment, &rope).unwrap();
        let cfg = AttentionConfig::new(2, rope, None).unwrap();
        let block = ToyBlock::seeded(cfg, 8, seed);
        let map = block.scores(&out).unwrap();
        cells.push(project_heatmap(&map, &out).unwrap().nonzero_cells());
    }
    check(
        "heatmap-coverage",
        cells[1] > cells[0],
        format!("nonzero cells K=1: {}, K=8: {}", cells[0], cells[1]),
    )
}

fn token_file_round_trip(seed: u64) -> Check {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return check("token-file-round-trip", false, e.to_string()),
    };
    let path = dir.path().join("selftest.ptok");
    let set = gen_synthetic(&SynthSpec {
        t: 2,
        h: 4,
        w: 4,
        embed_width: 6,
        pattern: Pattern::UniformNoise,
        seed,
    })
    .unwrap();
    if let Err(e) = save_tokens(&set, &path) {
        return check("token-file-round-trip", false, e.to_string());
    }
    match load_tokens(&path) {
        Ok(loaded) if loaded == set => {
            // A flipped payload byte must surface as a checksum error.
            let mut bytes = std::fs::read(&path).unwrap();
            let last = bytes.len() - 1;
            bytes[last] ^= 1;
            std::fs::write(&path, &bytes).unwrap();
            let corrupted = matches!(
                load_tokens(&path),
                Err(crate::io::IoError::ChecksumMismatch { .. })
            );
            check(
                "token-file-round-trip",
                corrupted,
                "round-trip identical; corruption detected".to_string(),
            )
        }
        Ok(_) => check(
            "token-file-round-trip",
            false,
            "loaded set differs from saved set".to_string(),
        ),
        Err(e) => check("token-file-round-trip", false, e.to_string()),
    }
}

fn config_gcd_rule(_seed: u64) -> Check {
    let ok = RopeConfig::new(vec![16, 24, 24], 10_000.0, 8).is_ok()
        && RopeConfig::new(vec![32, 32], 10_000.0, 32).is_ok()
        && RopeConfig::new(vec![16, 24, 24], 10_000.0, 7).is_err();
    check(
        "config-gcd-rule",
        ok,
        "capacity 8 over [16,24,24] and 32 over [32,32] accepted, 7 rejected".to_string(),
    )
}

fn gen_determinism(seed: u64) -> Check {
    let spec = SynthSpec {
        t: 2,
        h: 5,
        w: 5,
        embed_width: 7,
        pattern: Pattern::Blobs { count: 3 },
        seed,
    };
    let equal = gen_synthetic(&spec).unwrap() == gen_synthetic(&spec).unwrap();
    check(
        "gen-determinism",
        equal,
        "identical specs synthesize identical fields".to_string(),
    )
}

/// Runs every invariant check with the given base seed.
pub fn run_selftest(seed: u64) -> Vec<Check> {
    vec![
        rotary_unitarity(seed),
        rotary_shift_invariance(seed),
        capacity_one_bit_identity(seed),
        clustering_partition(seed),
        retention_monotonicity(seed),
        attention_rows(seed),
        heatmap_coverage(seed),
        token_file_round_trip(seed),
        config_gcd_rule(seed),
        gen_determinism(seed),
    ]
}
