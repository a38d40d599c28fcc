//! Rotary position machinery: frequency schedule, sectioned id vectors for
//! spatiotemporal positions, multi-position id chunking, and the rotation
//! operator applied to complex-lane embeddings.
//!
//! An embedding of real width `2*D` is interpreted as `D` complex lanes
//! (adjacent-pair convention: lane `d` is built from reals `2d` and `2d+1`).
//! Lane `d` is rotated by angle `m_d * theta_d`, where `m_d` comes from an
//! [`IdVector`] and `theta_d` from a [`FrequencyTable`].

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RopeError {
    #[error("sections must have 1, 2 or 3 entries, got {0}")]
    BadSectionCount(usize),
    #[error("section sizes must be positive")]
    ZeroSection,
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("capacity {capacity} does not divide section of size {section}")]
    CapacityIndivisible { capacity: usize, section: usize },
    #[error("frequency base must be a finite value above 1, got {0}")]
    BadFreqBase(f64),
    #[error("filling from a 3D position needs 2 or 3 sections, config has {0}")]
    DimensionalityMismatch(usize),
    #[error("expected {expected} ranked id vectors, got {got}")]
    InputCountMismatch { expected: usize, got: usize },
    #[error("lane count mismatch: {0} vs {1}")]
    LaneMismatch(usize, usize),
    #[error("frequency table entries must be positive and finite")]
    BadTheta,
    #[error("real embedding width must be even, got {0}")]
    OddWidth(usize),
}

/// Sectioned rotary configuration.
///
/// `sections` split the `D` complex lanes among position axes: three entries
/// for (t, h, w), two for (h, w), one for plain sequential ids. `capacity`
/// is the number of source positions one merged token can carry; it must
/// divide every section so each section splits into equal chunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RopeConfigRepr")]
pub struct RopeConfig {
    sections: Vec<usize>,
    freq_base: f64,
    capacity: usize,
}

#[derive(Deserialize)]
struct RopeConfigRepr {
    sections: Vec<usize>,
    freq_base: f64,
    capacity: usize,
}

impl TryFrom<RopeConfigRepr> for RopeConfig {
    type Error = RopeError;

    fn try_from(repr: RopeConfigRepr) -> Result<Self, RopeError> {
        RopeConfig::new(repr.sections, repr.freq_base, repr.capacity)
    }
}

impl RopeConfig {
    pub fn new(sections: Vec<usize>, freq_base: f64, capacity: usize) -> Result<Self, RopeError> {
        if sections.is_empty() || sections.len() > 3 {
            return Err(RopeError::BadSectionCount(sections.len()));
        }
        if sections.contains(&0) {
            return Err(RopeError::ZeroSection);
        }
        if capacity == 0 {
            return Err(RopeError::ZeroCapacity);
        }
        if !freq_base.is_finite() || freq_base <= 1.0 {
            return Err(RopeError::BadFreqBase(freq_base));
        }
        for &s in &sections {
            if s % capacity != 0 {
                return Err(RopeError::CapacityIndivisible {
                    capacity,
                    section: s,
                });
            }
        }
        Ok(Self {
            sections,
            freq_base,
            capacity,
        })
    }

    /// Video default: sections [16, 24, 24], base 10000, capacity 8.
    pub fn default_3d() -> Self {
        Self::new(vec![16, 24, 24], 10_000.0, 8).expect("static config is valid")
    }

    /// Image default: sections [32, 32], base 10000, capacity 32.
    pub fn default_2d() -> Self {
        Self::new(vec![32, 32], 10_000.0, 32).expect("static config is valid")
    }

    pub fn lane_count(&self) -> usize {
        self.sections.iter().sum()
    }

    pub fn sections(&self) -> &[usize] {
        &self.sections
    }

    pub fn freq_base(&self) -> f64 {
        self.freq_base
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Real embedding width covered by this configuration (two reals per lane).
    pub fn real_width(&self) -> usize {
        2 * self.lane_count()
    }

    /// Returns the (offset, size) of each section in lane units.
    pub fn section_ranges(&self) -> Vec<(usize, usize)> {
        let mut ranges = Vec::with_capacity(self.sections.len());
        let mut offset = 0;
        for &s in &self.sections {
            ranges.push((offset, s));
            offset += s;
        }
        ranges
    }
}

/// Largest capacity usable with the given sections: their GCD.
pub fn sections_gcd(sections: &[usize]) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    sections.iter().copied().fold(0, gcd)
}

/// Per-lane rotation rates, strictly decreasing under the default schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    thetas: Vec<f64>,
}

impl FrequencyTable {
    /// Builds a table from explicit rates; intended for exact-angle tests.
    pub fn from_thetas(thetas: Vec<f64>) -> Result<Self, RopeError> {
        if thetas.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(RopeError::BadTheta);
        }
        Ok(Self { thetas })
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }
}

/// Geometric frequency schedule: `theta_d = base^(-(d-1)/D)` for `d = 1..=D`.
///
/// Lane indices run globally across all sections, so a section's rates depend
/// on where it sits in the layout.
pub fn build_frequencies(config: &RopeConfig) -> FrequencyTable {
    let d_total = config.lane_count();
    let thetas = (0..d_total)
        .map(|d| config.freq_base().powf(-(d as f64) / d_total as f64))
        .collect();
    FrequencyTable { thetas }
}

/// Spatiotemporal grid position of a source token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Position3D {
    pub t: u32,
    pub h: u32,
    pub w: u32,
}

impl Position3D {
    pub fn new(t: u32, h: u32, w: u32) -> Self {
        Self { t, h, w }
    }
}

/// Per-lane positional indices, the integer argument of the rotary exponent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdVector {
    ids: Vec<u32>,
}

impl IdVector {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    /// Every lane carries the same id (plain 1D rotary fill).
    pub fn uniform(lane_count: usize, id: u32) -> Self {
        Self {
            ids: vec![id; lane_count],
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Lane-wise sum, used to express composed rotations.
    pub fn lane_sum(&self, other: &IdVector) -> Result<IdVector, RopeError> {
        if self.len() != other.len() {
            return Err(RopeError::LaneMismatch(self.len(), other.len()));
        }
        Ok(IdVector {
            ids: self
                .ids
                .iter()
                .zip(&other.ids)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

/// Fills a sectioned id vector from a grid position: lanes of the first
/// section carry `t`, the second `h`, the third `w` (two-section layouts
/// carry `h` then `w` and ignore `t`).
pub fn fill_mrope_ids(pos: Position3D, config: &RopeConfig) -> Result<IdVector, RopeError> {
    let axes: &[u32] = match config.sections().len() {
        3 => &[pos.t, pos.h, pos.w],
        2 => &[pos.h, pos.w],
        n => return Err(RopeError::DimensionalityMismatch(n)),
    };
    let mut ids = Vec::with_capacity(config.lane_count());
    for (section_size, &axis) in config.sections().iter().zip(axes) {
        ids.extend(std::iter::repeat_n(axis, *section_size));
    }
    Ok(IdVector { ids })
}

/// Merges `K` ranked id vectors into one: each section splits into `K` equal
/// chunks and chunk `k` copies the lanes of the `k`-th ranked input, so one
/// merged token rotates with up to `K` distinct positions at once.
///
/// Callers provide exactly `config.capacity()` inputs; repeat entries to fill
/// slots when fewer distinct positions are available. Rank order is the same
/// in every section: chunk 0 carries the highest-ranked input.
pub fn merge_ppe_ids(ranked: &[IdVector], config: &RopeConfig) -> Result<IdVector, RopeError> {
    let capacity = config.capacity();
    if ranked.len() != capacity {
        return Err(RopeError::InputCountMismatch {
            expected: capacity,
            got: ranked.len(),
        });
    }
    let lane_count = config.lane_count();
    for input in ranked {
        if input.len() != lane_count {
            return Err(RopeError::LaneMismatch(input.len(), lane_count));
        }
    }
    let mut ids = vec![0u32; lane_count];
    for (offset, size) in config.section_ranges() {
        let chunk = size / capacity;
        for (k, input) in ranked.iter().enumerate() {
            let lanes = offset + k * chunk..offset + (k + 1) * chunk;
            ids[lanes.clone()].copy_from_slice(&input.ids[lanes]);
        }
    }
    Ok(IdVector { ids })
}

/// One token's query/key vector in complex-lane form.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexEmbedding {
    lanes: Vec<Complex64>,
}

impl ComplexEmbedding {
    pub fn from_lanes(lanes: Vec<Complex64>) -> Self {
        Self { lanes }
    }

    /// Interprets a real vector of even width `2D` as `D` complex lanes,
    /// pairing adjacent entries `(2d, 2d+1)` as `(re, im)`.
    pub fn from_real(values: &[f64]) -> Result<Self, RopeError> {
        if !values.len().is_multiple_of(2) {
            return Err(RopeError::OddWidth(values.len()));
        }
        Ok(Self {
            lanes: values
                .chunks_exact(2)
                .map(|pair| Complex64::new(pair[0], pair[1]))
                .collect(),
        })
    }

    pub fn to_real(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.lanes.len() * 2);
        for lane in &self.lanes {
            out.push(lane.re);
            out.push(lane.im);
        }
        out
    }

    pub fn lanes(&self) -> &[Complex64] {
        &self.lanes
    }

    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.lanes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Real part of the conjugated inner product `sum_d a_d * conj(b_d)`.
    pub fn re_inner(&self, other: &ComplexEmbedding) -> f64 {
        self.lanes
            .iter()
            .zip(&other.lanes)
            .map(|(a, b)| (a * b.conj()).re)
            .sum()
    }
}

/// Rotates lane `d` by `e^(i * m_d * theta_d)`; per-lane modulus is preserved
/// up to floating rounding regardless of the id pattern.
pub fn rotate(
    emb: &ComplexEmbedding,
    ids: &IdVector,
    freqs: &FrequencyTable,
) -> Result<ComplexEmbedding, RopeError> {
    if emb.len() != ids.len() {
        return Err(RopeError::LaneMismatch(emb.len(), ids.len()));
    }
    if emb.len() != freqs.len() {
        return Err(RopeError::LaneMismatch(emb.len(), freqs.len()));
    }
    let lanes = emb
        .lanes
        .iter()
        .zip(ids.ids().iter().zip(freqs.thetas()))
        .map(|(z, (&m, &theta))| {
            let angle = m as f64 * theta;
            z * Complex64::new(angle.cos(), angle.sin())
        })
        .collect();
    Ok(ComplexEmbedding { lanes })
}
