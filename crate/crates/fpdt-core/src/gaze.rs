//! Gaze traces and the gaze-to-attention-map rule.
//!
//! A trace is a per-frame sequence of normalized gaze coordinates. Each
//! environment step covers one GoP of `F` frames; the majority gaze tile
//! over those frames becomes the central (level 3) region, its clipped
//! 8-neighborhood the paracentral (level 2) region, and everything else
//! peripheral (level 1). Traces shorter than an episode wrap around.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::types::AttentionMap;
use crate::error::{Error, Result};
use crate::rng;

/// One gaze sample: frame index plus normalized coordinates in [0, 1]^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub frame: u64,
    pub x: f64,
    pub y: f64,
}

/// A per-frame gaze sequence with strictly increasing frame indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GazeTrace {
    pub samples: Vec<GazeSample>,
    /// Out-of-range coordinates clamped while ingesting.
    pub clamped: usize,
}

impl GazeTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parse a gaze CSV with header `frame,x,y`. Coordinates outside [0, 1] are
/// clamped and counted; malformed rows are reported with their line number.
pub fn ingest_gaze_csv(path: &Path) -> Result<GazeTrace> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::invalid(format!("cannot open gaze file {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut samples = Vec::new();
    let mut clamped = 0usize;
    let mut last_frame: Option<u64> = None;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if record.len() != 3 {
            return Err(Error::Parse { line, msg: format!("expected 3 fields, got {}", record.len()) });
        }
        let frame: u64 = record[0]
            .trim()
            .parse()
            .map_err(|e| Error::Parse { line, msg: format!("bad frame index: {e}") })?;
        let mut parse_coord = |idx: usize, name: &str| -> Result<f64> {
            let v: f64 = record[idx]
                .trim()
                .parse()
                .map_err(|e| Error::Parse { line, msg: format!("bad {name}: {e}") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("{name} is not finite") });
            }
            if (0.0..=1.0).contains(&v) {
                Ok(v)
            } else {
                clamped += 1;
                Ok(v.clamp(0.0, 1.0))
            }
        };
        let x = parse_coord(1, "x")?;
        let y = parse_coord(2, "y")?;
        if let Some(prev) = last_frame {
            if frame <= prev {
                return Err(Error::Parse { line, msg: format!("frame index {frame} not increasing") });
            }
        }
        last_frame = Some(frame);
        samples.push(GazeSample { frame, x, y });
    }
    Ok(GazeTrace { samples, clamped })
}

/// Synthesize a gaze trace as a reflected Gaussian random walk in [0, 1]^2.
pub fn synth_gaze(seed: u64, length: usize, step_sigma: f64) -> GazeTrace {
    assert!(length >= 1, "synthetic trace needs at least one frame");
    let mut rng = rng::stream(seed, &[rng::tag("synth-gaze")]);
    let mut x: f64 = rng.random();
    let mut y: f64 = rng.random();
    let normal = Normal::new(0.0, step_sigma.max(0.0)).expect("valid sigma");
    let mut samples = Vec::with_capacity(length);
    for frame in 0..length as u64 {
        samples.push(GazeSample { frame, x, y });
        if step_sigma > 0.0 {
            x = reflect(x + normal.sample(&mut rng));
            y = reflect(y + normal.sample(&mut rng));
        }
    }
    GazeTrace { samples, clamped: 0 }
}

/// Reflect a coordinate back into [0, 1].
fn reflect(v: f64) -> f64 {
    let mut v = v.rem_euclid(2.0);
    if v > 1.0 {
        v = 2.0 - v;
    }
    v
}

/// Map normalized coordinates to a tile (row, col) on an I x J grid.
fn tile_of(x: f64, y: f64, grid_i: usize, grid_j: usize) -> (usize, usize) {
    let row = ((y * grid_i as f64) as usize).min(grid_i - 1);
    let col = ((x * grid_j as f64) as usize).min(grid_j - 1);
    (row, col)
}

/// Attention map for step `t`: majority gaze tile over the GoP's `F` frames
/// is level 3, its clipped 8-neighborhood level 2, the rest level 1.
/// Exhausted traces wrap around. Majority ties break to the lowest tile
/// index.
pub fn attention_map(
    trace: &GazeTrace,
    t: usize,
    grid_i: usize,
    grid_j: usize,
    frames: usize,
) -> Result<AttentionMap> {
    if trace.is_empty() {
        return Err(Error::invalid("gaze trace is empty"));
    }
    let n = grid_i * grid_j;
    let mut votes = vec![0usize; n];
    for f in 0..frames {
        let idx = (t * frames + f) % trace.len();
        let s = &trace.samples[idx];
        let (row, col) = tile_of(s.x, s.y, grid_i, grid_j);
        votes[row * grid_j + col] += 1;
    }
    let center = votes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let (crow, ccol) = (center / grid_j, center % grid_j);
    let mut n2 = 0usize;
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let r = crow as i64 + dr;
            let c = ccol as i64 + dc;
            if r >= 0 && r < grid_i as i64 && c >= 0 && c < grid_j as i64 {
                n2 += 1;
            }
        }
    }
    Ok(AttentionMap::new(n - 1 - n2, n2, 1))
}
