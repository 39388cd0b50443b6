//! Domain types shared by the simulator, dataset, and evaluation layers.

use serde::{Deserialize, Serialize};

use crate::config::{LevelThresholds, SystemConfig};
use crate::error::{Error, Result};

/// Service tier of a user; determines resolution thresholds and the
/// hard-coded user-information code fed to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserLevel {
    Standard,
    Advanced,
    Premium,
}

impl UserLevel {
    pub const ALL: [UserLevel; 3] = [UserLevel::Standard, UserLevel::Advanced, UserLevel::Premium];

    /// User-information code appended to states: 0.6 / 0.4 / 0.2.
    pub fn code(self) -> f64 {
        match self {
            UserLevel::Premium => 0.6,
            UserLevel::Advanced => 0.4,
            UserLevel::Standard => 0.2,
        }
    }

    pub fn thresholds(self, table: &LevelThresholds) -> [f64; 3] {
        match self {
            UserLevel::Premium => table.premium,
            UserLevel::Advanced => table.advanced,
            UserLevel::Standard => table.standard,
        }
    }

    /// One-letter tag used in environment ids ("P"/"A"/"S").
    pub fn letter(self) -> char {
        match self {
            UserLevel::Premium => 'P',
            UserLevel::Advanced => 'A',
            UserLevel::Standard => 'S',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'P' => Some(UserLevel::Premium),
            'A' => Some(UserLevel::Advanced),
            'S' => Some(UserLevel::Standard),
            _ => None,
        }
    }
}

impl std::fmt::Display for UserLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            UserLevel::Premium => "premium",
            UserLevel::Advanced => "advanced",
            UserLevel::Standard => "standard",
        };
        f.write_str(s)
    }
}

/// Where a user's gaze sequence comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GazeSource {
    /// Reflected Gaussian random walk; fully determined by the seed.
    Synthetic { seed: u64, step_sigma: f64 },
    /// A gaze CSV file with header `frame,x,y`.
    File { path: String },
}

/// One user's service profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub level: UserLevel,
    /// Resolution thresholds `b_{a,th}` in bits per tile, strictly
    /// increasing in attention level.
    pub b_th: [f64; 3],
    pub gaze_source: GazeSource,
}

impl UserProfile {
    pub fn new(level: UserLevel, cfg: &SystemConfig, gaze_source: GazeSource) -> Self {
        Self { level, b_th: level.thresholds(&cfg.level_thresholds), gaze_source }
    }

    pub fn level_code(&self) -> f64 {
        self.level.code()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b_th[0] < self.b_th[1] && self.b_th[1] < self.b_th[2]) {
            return Err(Error::invalid("b_th must be strictly increasing in attention level"));
        }
        Ok(())
    }
}

/// Tile counts per attention level for one user at one step.
/// Index 0 holds level 1 (peripheral), index 2 holds level 3 (central).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttentionMap {
    pub counts: [usize; 3],
}

impl AttentionMap {
    pub fn new(n1: usize, n2: usize, n3: usize) -> Self {
        Self { counts: [n1, n2, n3] }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn validate(&self, tiles: usize) -> Result<()> {
        if self.total() != tiles {
            return Err(Error::invalid(format!(
                "attention map covers {} tiles, grid has {tiles}",
                self.total()
            )));
        }
        if self.counts[2] < 1 {
            return Err(Error::invalid("attention map must contain a central tile"));
        }
        Ok(())
    }
}

/// Instantaneous channel of one user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelState {
    /// Rayleigh power gain, unit mean.
    pub gain: f64,
    /// Distance to the base station in meters.
    pub distance_m: f64,
    /// Inter-cell interference power in W.
    pub interference_w: f64,
}

/// Flattened allocation-ratio action of length `5 * K_max`.
///
/// Per-user layout: `[r1, r2, r3, B_hat, f_hat]`, all in [0, 1]. Entries of
/// inactive users (`k >= K_e`) are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationAction {
    pub values: Vec<f64>,
}

impl AllocationAction {
    pub const PER_USER: usize = 5;

    pub fn zeros(k_max: usize) -> Self {
        Self { values: vec![0.0; Self::PER_USER * k_max] }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn k_max(&self) -> usize {
        self.values.len() / Self::PER_USER
    }

    pub fn ratios(&self, k: usize) -> [f64; 3] {
        let o = Self::PER_USER * k;
        [self.values[o], self.values[o + 1], self.values[o + 2]]
    }

    pub fn bandwidth_share(&self, k: usize) -> f64 {
        self.values[Self::PER_USER * k + 3]
    }

    pub fn cpu_share(&self, k: usize) -> f64 {
        self.values[Self::PER_USER * k + 4]
    }

    pub fn user_slice_mut(&mut self, k: usize) -> &mut [f64] {
        let o = Self::PER_USER * k;
        &mut self.values[o..o + Self::PER_USER]
    }

    /// Check the range and padding invariants for `k_e` active users.
    pub fn validate(&self, k_e: usize) -> Result<()> {
        if self.values.len() % Self::PER_USER != 0 {
            return Err(Error::invalid("action length must be a multiple of 5"));
        }
        if k_e > self.k_max() {
            return Err(Error::invalid(format!("k_e={k_e} exceeds k_max={}", self.k_max())));
        }
        for (i, &v) in self.values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("action[{i}]={v} outside [0,1]")));
            }
            if i >= Self::PER_USER * k_e && v != 0.0 {
                return Err(Error::invalid(format!("action[{i}] must be zero (inactive user)")));
            }
        }
        Ok(())
    }
}

/// Physical allocation after decoding an action.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAllocation {
    /// Resolved bits per tile, per user and attention level.
    pub bits_per_tile: Vec<[f64; 3]>,
    /// Bandwidth per user in Hz; sums to `B_max` over active users.
    pub bandwidth_hz: Vec<f64>,
    /// CPU frequency per user in Hz; sums to `f_max` over active users.
    pub cpu_hz: Vec<f64>,
}

/// Per-user outcome of one environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserStepRecord {
    pub user: usize,
    pub level: UserLevel,
    pub tiles: [usize; 3],
    /// Resolved bits per tile per level.
    pub bits_per_tile: [f64; 3],
    /// GoP data size per level in bits.
    pub gop_bits: [f64; 3],
    /// Total GoP size in bits.
    pub gop_total_bits: f64,
    pub bandwidth_hz: f64,
    pub cpu_hz: f64,
    pub rate_bps: f64,
    pub t_download_s: f64,
    pub t_render_s: f64,
    pub t_total_s: f64,
    pub qoe: f64,
    pub infeasible_link: bool,
    pub infeasible_compute: bool,
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub users: Vec<UserStepRecord>,
    pub hfqoe: f64,
    pub reward: f64,
    /// Users whose QoE fell below the threshold this step.
    pub qoe_penalty_count: usize,
    pub hfqoe_penalized: bool,
}

impl StepReport {
    /// Fixed CSV column order for report export.
    pub const CSV_HEADER: [&'static str; 18] = [
        "step", "user", "level", "N1", "N2", "N3", "b1", "b2", "b3", "B", "f", "rate", "T_d",
        "T_r", "T", "qoe", "hfqoe", "reward",
    ];

    /// One CSV row per (step, user) in the fixed column order.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.users
            .iter()
            .map(|u| {
                vec![
                    self.step.to_string(),
                    u.user.to_string(),
                    u.level.to_string(),
                    u.tiles[0].to_string(),
                    u.tiles[1].to_string(),
                    u.tiles[2].to_string(),
                    format!("{}", u.bits_per_tile[0]),
                    format!("{}", u.bits_per_tile[1]),
                    format!("{}", u.bits_per_tile[2]),
                    format!("{}", u.bandwidth_hz),
                    format!("{}", u.cpu_hz),
                    format!("{}", u.rate_bps),
                    format!("{}", u.t_download_s),
                    format!("{}", u.t_render_s),
                    format!("{}", u.t_total_s),
                    format!("{}", u.qoe),
                    format!("{}", self.hfqoe),
                    format!("{}", self.reward),
                ]
            })
            .collect()
    }
}
