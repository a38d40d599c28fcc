//! File formats: the binary token format with its positions sidecar, the
//! structured report and config documents, and heatmap writers.
//!
//! Token format (all integers little-endian):
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0      | 4    | magic `PTOK` |
//! | 4      | 2    | version (u16, currently 1) |
//! | 6      | 2    | flags (u16, reserved, 0) |
//! | 8      | 4    | T (u32) |
//! | 12     | 4    | H (u32) |
//! | 16     | 4    | W (u32) |
//! | 20     | 4    | N (u32) |
//! | 24     | 4    | embed_width (u32) |
//! | 28     | 4    | CRC-32 (IEEE) of the payload |
//! | 32     | N * embed_width * 4 | payload, f32 row-major |
//!
//! Per-token grid positions live in a structured-text sidecar at
//! `<path>.pos`: `positions = [[index, t, h, w], ...]`, one entry per token
//! in index order. Writes go to a temporary file first and are renamed into
//! place, so failed runs never leave partial outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::Heatmap;
use crate::cascade::{PipelineConfig, PipelineReport};
use crate::merge::{GridExtent, Token, TokenSet};
use crate::rope::Position3D;

pub const TOKEN_MAGIC: [u8; 4] = *b"PTOK";
pub const TOKEN_VERSION: u16 = 1;
const HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a token file")]
    BadMagic,
    #[error("unsupported token file version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch: header {expected:#010x}, payload {found:#010x}")]
    ChecksumMismatch { expected: u32, found: u32 },
    #[error("truncated token file: {0}")]
    Truncated(&'static str),
    #[error("positions sidecar not found: {0}")]
    SidecarMissing(PathBuf),
    #[error("bad positions sidecar: {0}")]
    BadSidecar(String),
    #[error("token count mismatch: header {header}, sidecar {sidecar}")]
    CountMismatch { header: usize, sidecar: usize },
    #[error("token {index} position ({t}, {h}, {w}) lies outside the grid")]
    PositionOutOfGrid {
        index: usize,
        t: u32,
        h: u32,
        w: u32,
    },
    #[error("token {0} has a non-finite embedding value")]
    NonFinite(usize),
    #[error("only stage-zero token sets can be saved in the token format")]
    NotStageZero,
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("graymap output requires a single-frame heatmap")]
    PlanarOnly,
}

/// Path of the positions sidecar belonging to a token file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".pos");
    PathBuf::from(name)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(dir) => tempfile::NamedTempFile::new_in(dir)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| IoError::Io(e.error))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SidecarDoc {
    positions: Vec<[u32; 4]>,
}

/// Serializes a stage-zero token set to `path` plus its `.pos` sidecar.
pub fn save_tokens(tokens: &TokenSet, path: &Path) -> Result<(), IoError> {
    if !tokens.is_stage_zero() {
        return Err(IoError::NotStageZero);
    }
    let n = tokens.len();
    let width = tokens
        .tokens
        .first()
        .map(|t| t.embedding.len())
        .unwrap_or(0);
    let mut payload = Vec::with_capacity(n * width * 4);
    for (i, token) in tokens.tokens.iter().enumerate() {
        if token.embedding.len() != width {
            return Err(IoError::BadSidecar(format!(
                "token {i} width {} differs from {width}",
                token.embedding.len()
            )));
        }
        for &v in &token.embedding {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut bytes = Vec::with_capacity(HEADER_LEN + payload.len());
    bytes.extend_from_slice(&TOKEN_MAGIC);
    bytes.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
    bytes.extend_from_slice(&0u16.to_le_bytes());
    for dim in [
        tokens.grid_extent.t,
        tokens.grid_extent.h,
        tokens.grid_extent.w,
        n as u32,
        width as u32,
    ] {
        bytes.extend_from_slice(&dim.to_le_bytes());
    }
    bytes.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    bytes.extend_from_slice(&payload);

    let sidecar = SidecarDoc {
        positions: tokens
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let p = t.carried[0].position;
                [i as u32, p.t, p.h, p.w]
            })
            .collect(),
    };
    let sidecar_text = toml::to_string(&sidecar).map_err(|e| IoError::BadSidecar(e.to_string()))?;

    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), sidecar_text.as_bytes())?;
    Ok(())
}

fn read_u16(bytes: &[u8], offset: usize) -> u16 {
    u16::from_le_bytes([bytes[offset], bytes[offset + 1]])
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

/// Loads a token file, verifying magic, version, payload checksum, and the
/// sidecar's position list against the header counts and grid bounds.
pub fn load_tokens(path: &Path) -> Result<TokenSet, IoError> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        if bytes.len() < 4 || bytes[..4] != TOKEN_MAGIC {
            return Err(IoError::BadMagic);
        }
        return Err(IoError::Truncated("header"));
    }
    if bytes[..4] != TOKEN_MAGIC {
        return Err(IoError::BadMagic);
    }
    let version = read_u16(&bytes, 4);
    if version != TOKEN_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let extent = GridExtent {
        t: read_u32(&bytes, 8),
        h: read_u32(&bytes, 12),
        w: read_u32(&bytes, 16),
    };
    let n = read_u32(&bytes, 20) as usize;
    let width = read_u32(&bytes, 24) as usize;
    let expected_crc = read_u32(&bytes, 28);
    let payload_len = n
        .checked_mul(width)
        .and_then(|c| c.checked_mul(4))
        .ok_or(IoError::Truncated("payload size overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < payload_len {
        return Err(IoError::Truncated("payload"));
    }
    if payload.len() > payload_len {
        return Err(IoError::Truncated("trailing bytes after payload"));
    }
    let found_crc = crc32fast::hash(payload);
    if found_crc != expected_crc {
        return Err(IoError::ChecksumMismatch {
            expected: expected_crc,
            found: found_crc,
        });
    }

    let side_path = sidecar_path(path);
    let sidecar_text =
        fs::read_to_string(&side_path).map_err(|_| IoError::SidecarMissing(side_path.clone()))?;
    let sidecar: SidecarDoc =
        toml::from_str(&sidecar_text).map_err(|e| IoError::BadSidecar(e.to_string()))?;
    if sidecar.positions.len() != n {
        return Err(IoError::CountMismatch {
            header: n,
            sidecar: sidecar.positions.len(),
        });
    }

    let mut tokens = Vec::with_capacity(n);
    for (i, entry) in sidecar.positions.iter().enumerate() {
        let [index, t, h, w] = *entry;
        if index as usize != i {
            return Err(IoError::BadSidecar(format!(
                "entry {i} carries index {index}; entries must be in order"
            )));
        }
        let position = Position3D::new(t, h, w);
        if !extent.contains(position) {
            return Err(IoError::PositionOutOfGrid { index: i, t, h, w });
        }
        let mut embedding = Vec::with_capacity(width);
        for dim in 0..width {
            let offset = (i * width + dim) * 4;
            let v = f32::from_le_bytes([
                payload[offset],
                payload[offset + 1],
                payload[offset + 2],
                payload[offset + 3],
            ]) as f64;
            if !v.is_finite() {
                return Err(IoError::NonFinite(i));
            }
            embedding.push(v);
        }
        tokens.push(Token::source(embedding, position, i));
    }
    Ok(TokenSet {
        tokens,
        grid_extent: extent,
        stage_history: Vec::new(),
    })
}

/// Report output style: structured for round-tripping, text for reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Structured,
    Text,
}

pub fn report_to_toml(report: &PipelineReport) -> Result<String, IoError> {
    toml::to_string(report).map_err(|e| IoError::BadConfig(e.to_string()))
}

pub fn report_from_toml(text: &str) -> Result<PipelineReport, IoError> {
    toml::from_str(text).map_err(|e| IoError::BadConfig(e.to_string()))
}

pub fn render_report_text(report: &PipelineReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "tokens: {} -> {}\nreduction_ratio: {:.6}\nids_retained: {:.6}\n",
        report.original_tokens, report.final_tokens, report.reduction_ratio, report.ids_retained
    ));
    for (i, stage) in report.stages.iter().enumerate() {
        out.push_str(&format!(
            "stage {i}: {:?} {} -> {} (retention {:.6})\n",
            stage.kind, stage.n_in, stage.n_out, stage.ratio_measured
        ));
    }
    out.push_str(&format!(
        "attention entropy mean: {:.6}\nattention variance mean: {:.9}\n",
        report.attention.entropy_mean, report.attention.variance_mean
    ));
    for warning in &report.warnings {
        out.push_str(&format!("warning: {warning}\n"));
    }
    out
}

/// Writes a report in the requested format (atomically).
pub fn save_report(
    report: &PipelineReport,
    path: &Path,
    format: ReportFormat,
) -> Result<(), IoError> {
    let text = match format {
        ReportFormat::Structured => report_to_toml(report)?,
        ReportFormat::Text => render_report_text(report),
    };
    write_atomic(path, text.as_bytes())
}

/// Reads a structured report back; text reports are presentation-only.
pub fn load_report(path: &Path) -> Result<PipelineReport, IoError> {
    report_from_toml(&fs::read_to_string(path)?)
}

pub fn load_pipeline_config(path: &Path) -> Result<PipelineConfig, IoError> {
    let text = fs::read_to_string(path)?;
    let config: PipelineConfig =
        toml::from_str(&text).map_err(|e| IoError::BadConfig(e.to_string()))?;
    config
        .validate()
        .map_err(|e| IoError::BadConfig(e.to_string()))?;
    Ok(config)
}

pub fn save_pipeline_config(config: &PipelineConfig, path: &Path) -> Result<(), IoError> {
    let text = toml::to_string(config).map_err(|e| IoError::BadConfig(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// Plain-text heatmap: one row per line, space-separated decimals, frames
/// separated by a blank line.
pub fn save_heatmap_text(heatmap: &Heatmap, path: &Path) -> Result<(), IoError> {
    let (t, h, w) = heatmap.dims();
    let mut out = String::new();
    for frame in 0..t {
        if frame > 0 {
            out.push('\n');
        }
        for row in 0..h {
            for col in 0..w {
                if col > 0 {
                    out.push(' ');
                }
                out.push_str(&format!("{:.6}", heatmap.get(frame, row, col)));
            }
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

/// 8-bit binary graymap (`P5`) of a single-frame heatmap.
pub fn save_heatmap_pgm(heatmap: &Heatmap, path: &Path) -> Result<(), IoError> {
    if !heatmap.is_planar() {
        return Err(IoError::PlanarOnly);
    }
    let (_, h, w) = heatmap.dims();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in 0..h {
        for col in 0..w {
            bytes.push((heatmap.get(0, row, col) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_synthetic, Pattern, SynthSpec};

    fn sample_set(seed: u64) -> TokenSet {
        gen_synthetic(&SynthSpec {
            t: 2,
            h: 3,
            w: 4,
            embed_width: 6,
            pattern: Pattern::UniformNoise,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.ptok");
        let set = sample_set(5);
        save_tokens(&set, &path).unwrap();
        let loaded = load_tokens(&path).unwrap();
        assert_eq!(loaded, set);
    }

    #[test]
    fn on_disk_layout_is_pinned() {
        // One token, width 1, value 1.5 (f32 LE 00 00 C0 3F, CRC 0x5CD8256F).
        // This freezes the documented byte layout; any drift is a format
        // break, not a refactor.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("golden.ptok");
        let set = TokenSet {
            tokens: vec![Token::source(vec![1.5], Position3D::new(0, 0, 0), 0)],
            grid_extent: GridExtent { t: 1, h: 1, w: 1 },
            stage_history: Vec::new(),
        };
        save_tokens(&set, &path).unwrap();
        let expected: [u8; 36] = [
            b'P', b'T', b'O', b'K', // magic
            1, 0, // version
            0, 0, // flags
            1, 0, 0, 0, // T
            1, 0, 0, 0, // H
            1, 0, 0, 0, // W
            1, 0, 0, 0, // N
            1, 0, 0, 0, // embed_width
            0x6F, 0x25, 0xD8, 0x5C, // CRC-32 of the payload
            0x00, 0x00, 0xC0, 0x3F, // 1.5f32
        ];
        assert_eq!(fs::read(&path).unwrap(), expected);
        assert_eq!(
            fs::read_to_string(sidecar_path(&path)).unwrap(),
            "positions = [[0, 0, 0, 0]]\n"
        );
    }

    #[test]
    fn zero_token_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ptok");
        let set = TokenSet {
            tokens: Vec::new(),
            grid_extent: GridExtent { t: 1, h: 1, w: 1 },
            stage_history: Vec::new(),
        };
        save_tokens(&set, &path).unwrap();
        let loaded = load_tokens(&path).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded.grid_extent, set.grid_extent);
    }

    #[test]
    fn corrupted_payload_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.ptok");
        save_tokens(&sample_set(6), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_tokens(&path),
            Err(IoError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn distinct_errors_for_distinct_corruptions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.ptok");
        save_tokens(&sample_set(7), &path).unwrap();
        let good = fs::read(&path).unwrap();

        fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_tokens(&path), Err(IoError::BadMagic)));

        let mut versioned = good.clone();
        versioned[4] = 9;
        fs::write(&path, &versioned).unwrap();
        assert!(matches!(
            load_tokens(&path),
            Err(IoError::UnsupportedVersion(9))
        ));

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_tokens(&path), Err(IoError::Truncated(_))));

        fs::write(&path, &good).unwrap();
        fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(matches!(
            load_tokens(&path),
            Err(IoError::SidecarMissing(_))
        ));
    }

    #[test]
    fn sidecar_count_must_match_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.ptok");
        save_tokens(&sample_set(8), &path).unwrap();
        let side = sidecar_path(&path);
        let text = fs::read_to_string(&side).unwrap();
        let mut doc: SidecarDoc = toml::from_str(&text).unwrap();
        doc.positions.pop();
        fs::write(&side, toml::to_string(&doc).unwrap()).unwrap();
        assert!(matches!(
            load_tokens(&path),
            Err(IoError::CountMismatch { .. })
        ));
    }

    #[test]
    fn out_of_grid_sidecar_positions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.ptok");
        save_tokens(&sample_set(9), &path).unwrap();
        let side = sidecar_path(&path);
        let mut doc: SidecarDoc = toml::from_str(&fs::read_to_string(&side).unwrap()).unwrap();
        doc.positions[0] = [0, 0, 0, 99];
        fs::write(&side, toml::to_string(&doc).unwrap()).unwrap();
        assert!(matches!(
            load_tokens(&path),
            Err(IoError::PositionOutOfGrid { index: 0, .. })
        ));
    }

    #[test]
    fn compressed_sets_cannot_be_saved() {
        use crate::cluster::cluster_tokens;
        use crate::merge::compress_stage;
        use crate::rope::RopeConfig;
        let set = sample_set(10);
        let assignment = cluster_tokens(&set.embeddings(), 0.45).unwrap();
        let compressed = compress_stage(&set, &assignment, &RopeConfig::default_3d()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            save_tokens(&compressed, &dir.path().join("x.ptok")),
            Err(IoError::NotStageZero)
        ));
    }

    #[test]
    fn config_round_trip_is_a_fixed_point() {
        use crate::cascade::{StageKind, StageSpec};
        use crate::rope::RopeConfig;
        let mut config = PipelineConfig::new(RopeConfig::default_3d(), 17);
        config.stages = vec![
            StageSpec::before(StageKind::Temporal, 0.0625),
            StageSpec::after(0, StageKind::Spatial, 0.45),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        save_pipeline_config(&config, &path).unwrap();
        let once = load_pipeline_config(&path).unwrap();
        assert_eq!(once, config);
        let path2 = dir.path().join("config2.toml");
        save_pipeline_config(&once, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn structured_reports_round_trip_losslessly() {
        use crate::cascade::{run_pipeline, PipelineConfig};
        use crate::rope::RopeConfig;
        let set = gen_synthetic(&SynthSpec {
            t: 1,
            h: 6,
            w: 6,
            embed_width: 6,
            pattern: Pattern::Blobs { count: 2 },
            seed: 12,
        })
        .unwrap();
        let cfg = PipelineConfig::single_spatial(RopeConfig::default_2d(), 0.5, 3);
        let report = run_pipeline(&set, &cfg).unwrap().report;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.toml");
        save_report(&report, &path, ReportFormat::Structured).unwrap();
        let loaded = load_report(&path).unwrap();
        assert_eq!(loaded.original_tokens, report.original_tokens);
        assert_eq!(loaded.final_tokens, report.final_tokens);
        assert_eq!(loaded.reduction_ratio, report.reduction_ratio);
        assert_eq!(loaded.ids_retained, report.ids_retained);
        assert_eq!(loaded.stages, report.stages);
        assert_eq!(loaded.attention, report.attention);
        // Serializing the loaded report reproduces the file byte for byte.
        assert_eq!(
            report_to_toml(&loaded).unwrap(),
            fs::read_to_string(&path).unwrap()
        );
    }

    #[test]
    fn invalid_config_documents_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(
            &path,
            "[rope]\nsections = [16, 24, 24]\nfreq_base = 10000.0\ncapacity = 7\n",
        )
        .unwrap();
        assert!(matches!(
            load_pipeline_config(&path),
            Err(IoError::BadConfig(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::collection::vec as pvec;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn round_trip_any_synthetic_field(
                t in 1u32..4,
                h in 1u32..5,
                w in 1u32..5,
                width in 1usize..8,
                seed in any::<u64>(),
            ) {
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("t.ptok");
                let set = gen_synthetic(&SynthSpec {
                    t,
                    h,
                    w,
                    embed_width: width,
                    pattern: Pattern::UniformNoise,
                    seed,
                })
                .unwrap();
                save_tokens(&set, &path).unwrap();
                prop_assert_eq!(load_tokens(&path).unwrap(), set);
            }

            #[test]
            fn arbitrary_bytes_never_panic_the_loader(blob in pvec(any::<u8>(), 0..200)) {
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("junk.ptok");
                fs::write(&path, &blob).unwrap();
                // Junk must surface as an error, not a crash. A blob that
                // happens to be a valid file is fine too; none of these are.
                prop_assert!(load_tokens(&path).is_err());
            }
        }
    }
}
