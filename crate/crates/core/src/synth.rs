//! Seeded synthetic token fields for tests and the CLI.
//!
//! Values are quantized to f32 on creation so that the on-disk token format
//! (f32 payload) round-trips bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::merge::{GridExtent, Token, TokenSet};
use crate::rope::Position3D;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("grid dimensions must be positive")]
    ZeroDim,
    #[error("embedding width must be positive")]
    ZeroWidth,
    #[error("pattern parameter must be positive")]
    ZeroPatternParam,
}

/// Embedding layout of the generated field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Gaussian clusters in embedding space tied to contiguous grid regions.
    Blobs { count: usize },
    /// Distinct temporal regimes: frames share a regime base vector.
    Stripes { regimes: usize },
    /// Independent uniform noise in [-1, 1).
    UniformNoise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub t: u32,
    pub h: u32,
    pub w: u32,
    pub embed_width: usize,
    pub pattern: Pattern,
    pub seed: u64,
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates a reproducible token field: same spec, same bytes.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<TokenSet, SynthError> {
    if spec.t == 0 || spec.h == 0 || spec.w == 0 {
        return Err(SynthError::ZeroDim);
    }
    if spec.embed_width == 0 {
        return Err(SynthError::ZeroWidth);
    }
    match spec.pattern {
        Pattern::Blobs { count } | Pattern::Stripes { regimes: count } if count == 0 => {
            return Err(SynthError::ZeroPatternParam)
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.t as usize * spec.h as usize * spec.w as usize;
    let width = spec.embed_width;

    // One base vector per region/regime, spread along distinct axes so that
    // groups stay well separated regardless of the seed.
    let base_vector = |group: usize| -> Vec<f64> {
        let mut base = vec![0.0f64; width];
        base[group % width] = 8.0 * (1 + group / width) as f64;
        base
    };

    let mut tokens = Vec::with_capacity(n);
    let mut index = 0usize;
    for t in 0..spec.t {
        for h in 0..spec.h {
            for w in 0..spec.w {
                let embedding: Vec<f64> = match spec.pattern {
                    Pattern::UniformNoise => (0..width)
                        .map(|_| quantize(rng.gen_range(-1.0..1.0)))
                        .collect(),
                    Pattern::Blobs { count } => {
                        let group = (index * count / n).min(count - 1);
                        base_vector(group)
                            .into_iter()
                            .map(|b| {
                                let noise: f64 = StandardNormal.sample(&mut rng);
                                quantize(b + 0.5 * noise)
                            })
                            .collect()
                    }
                    Pattern::Stripes { regimes } => {
                        let group = (t as usize * regimes / spec.t as usize).min(regimes - 1);
                        base_vector(group)
                            .into_iter()
                            .map(|b| {
                                let noise: f64 = StandardNormal.sample(&mut rng);
                                quantize(b + 0.25 * noise)
                            })
                            .collect()
                    }
                };
                tokens.push(Token::source(embedding, Position3D::new(t, h, w), index));
                index += 1;
            }
        }
    }
    Ok(TokenSet {
        tokens,
        grid_extent: GridExtent {
            t: spec.t,
            h: spec.h,
            w: spec.w,
        },
        stage_history: Vec::new(),
    })
}
