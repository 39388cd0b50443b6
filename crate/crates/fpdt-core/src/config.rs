//! Configuration for the MEC simulator, dataset generation, federated
//! training, and evaluation.
//!
//! A single TOML file with sections `[system]`, `[gaze]`, `[data]`, `[fl]`,
//! `[model]`, `[eval]` configures every stage. Every field has a shipped
//! default, so an empty file (or no file) is a valid configuration.
//! Environment variables of the form `FPDT_<SECTION>_<KEY>` override
//! individual keys, e.g. `FPDT_SYSTEM_K_MAX=4` or `FPDT_FL_ROUNDS=10`;
//! values are parsed as TOML literals.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Frame sizes in bits for the four encoded resolutions (pixels x 12 bit).
pub const BITS_UHD: f64 = 12_441_600.0;
pub const BITS_FHD: f64 = 3_110_400.0;
pub const BITS_HD: f64 = 1_382_400.0;
pub const BITS_SD: f64 = 460_800.0;

/// -174 dBm/Hz thermal noise floor expressed in W/Hz.
pub const NOISE_PSD_W_PER_HZ: f64 = 3.981_071_705_534_969_5e-21; // 10^(-20.4)

/// How the noise term of the SINR denominator is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Spectral density multiplied by the allocated bandwidth.
    Psd,
    /// A flat noise power independent of bandwidth.
    Flat,
}

/// Per-level resolution thresholds `b_{a,th}` in bits per tile, for the
/// three attention levels (index 0 = level 1, peripheral).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LevelThresholds {
    pub premium: [f64; 3],
    pub advanced: [f64; 3],
    pub standard: [f64; 3],
}

impl Default for LevelThresholds {
    fn default() -> Self {
        Self {
            premium: [BITS_HD / 2.0, BITS_FHD / 2.0, BITS_UHD / 4.0],
            advanced: [BITS_SD / 1.5, BITS_HD / 2.0, BITS_FHD / 2.0],
            standard: [BITS_SD / 2.0, BITS_SD / 1.5, BITS_HD / 2.0],
        }
    }
}

/// Physical and episode constants of one simulated MEC server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    /// Number of MEC servers in the federation.
    pub mec_servers: usize,
    /// Maximum users a server can host; fixes state/action padding.
    pub k_max: usize,
    /// FoV tile grid rows.
    pub grid_i: usize,
    /// FoV tile grid columns.
    pub grid_j: usize,
    /// Frames per group of pictures.
    pub frames_per_gop: usize,
    /// Latency threshold `T_th` in seconds.
    pub latency_threshold_s: f64,
    /// Total downlink bandwidth `B_max` in Hz.
    pub total_bandwidth_hz: f64,
    /// Total CPU frequency `f_max` in Hz.
    pub total_cpu_hz: f64,
    /// Cycles per bit for the three attention levels.
    pub cycles_per_bit: [f64; 3],
    /// BS transmit power per user in W.
    pub transmit_power_w: f64,
    /// Path-loss exponent.
    pub path_loss_exponent: f64,
    pub noise_model: NoiseModel,
    /// Noise power spectral density in W/Hz (used when `noise_model = psd`).
    pub noise_psd_w_per_hz: f64,
    /// Flat noise power in W (used when `noise_model = flat`).
    pub noise_flat_w: f64,
    /// Constant inter-cell interference power in W.
    pub interference_w: f64,
    /// Compression ratio applied before transmission.
    pub compression_ratio: f64,
    /// Rendering-workload divisor; `None` means "same as compression_ratio".
    pub render_scale: Option<f64>,
    /// Rate estimation bias as a fraction of the theoretical rate.
    pub delta_r_frac: f64,
    /// Frequency estimation bias as a fraction of the allocated frequency.
    pub delta_f_frac: f64,
    /// Per-user QoE threshold.
    pub qoe_threshold: f64,
    /// Horizon-fair QoE threshold.
    pub hfqoe_threshold: f64,
    /// QoE penalty coefficient (reward shaping).
    pub penalty_qoe: f64,
    /// hfQoE penalty is `penalty_hfqoe_scale * penalty_qoe * K_e`.
    pub penalty_hfqoe_scale: f64,
    pub level_thresholds: LevelThresholds,
    /// User x-coordinate range in meters (BS at the origin).
    pub user_box_x: [f64; 2],
    /// User y-coordinate range in meters.
    pub user_box_y: [f64; 2],
    /// Steps per episode.
    pub episode_len: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            mec_servers: 5,
            k_max: 8,
            grid_i: 4,
            grid_j: 4,
            frames_per_gop: 16,
            latency_threshold_s: 0.05,
            total_bandwidth_hz: 10e6,
            total_cpu_hz: 15e9,
            cycles_per_bit: [800.0, 900.0, 1000.0],
            transmit_power_w: 1.0,
            path_loss_exponent: 4.0,
            noise_model: NoiseModel::Psd,
            noise_psd_w_per_hz: NOISE_PSD_W_PER_HZ,
            noise_flat_w: NOISE_PSD_W_PER_HZ * 10e6,
            interference_w: 0.0,
            compression_ratio: 300.0,
            render_scale: None,
            delta_r_frac: 0.0,
            delta_f_frac: 0.0,
            qoe_threshold: 0.91,
            hfqoe_threshold: 0.8,
            penalty_qoe: 1.0,
            penalty_hfqoe_scale: 1.0,
            level_thresholds: LevelThresholds::default(),
            user_box_x: [10.0, 20.0],
            user_box_y: [0.0, 5.0],
            episode_len: 100,
        }
    }
}

impl SystemConfig {
    /// Total number of FoV tiles `N = I * J`.
    pub fn tiles(&self) -> usize {
        self.grid_i * self.grid_j
    }

    /// Rendering-workload divisor, defaulting to the compression ratio.
    pub fn render_scale(&self) -> f64 {
        self.render_scale.unwrap_or(self.compression_ratio)
    }

    /// hfQoE penalty coefficient for a server with `k_e` active users.
    pub fn penalty_hfqoe(&self, k_e: usize) -> f64 {
        self.penalty_hfqoe_scale * self.penalty_qoe * k_e as f64
    }

    /// Flattened action length `5 * K_max`.
    pub fn action_dim(&self) -> usize {
        5 * self.k_max
    }

    /// Raw (un-augmented) state length: 11 values per user plus the two
    /// hfQoE snapshots.
    pub fn raw_state_dim(&self) -> usize {
        11 * self.k_max + 2
    }

    /// Augmented state length: raw plus the user-information vector.
    pub fn state_dim(&self) -> usize {
        self.raw_state_dim() + self.k_max
    }

    pub fn validate(&self) -> Result<()> {
        if self.mec_servers == 0 {
            return Err(Error::config("mec_servers must be positive"));
        }
        if self.k_max == 0 {
            return Err(Error::config("k_max must be positive"));
        }
        if self.grid_i == 0 || self.grid_j == 0 {
            return Err(Error::config("tile grid must be non-empty"));
        }
        if self.frames_per_gop == 0 {
            return Err(Error::config("frames_per_gop must be positive"));
        }
        if self.latency_threshold_s <= 0.0 {
            return Err(Error::config("latency_threshold_s must be positive"));
        }
        if self.total_bandwidth_hz <= 0.0 || self.total_cpu_hz <= 0.0 {
            return Err(Error::config("bandwidth and CPU capacities must be positive"));
        }
        let c = &self.cycles_per_bit;
        if !(c[0] <= c[1] && c[1] <= c[2]) {
            return Err(Error::config("cycles_per_bit must be non-decreasing in level"));
        }
        if self.compression_ratio < 1.0 {
            return Err(Error::config("compression_ratio must be >= 1"));
        }
        if self.render_scale() <= 0.0 {
            return Err(Error::config("render_scale must be positive"));
        }
        if self.qoe_threshold <= 0.0 || self.hfqoe_threshold <= 0.0 {
            return Err(Error::config("thresholds must be positive"));
        }
        if self.episode_len == 0 {
            return Err(Error::config("episode_len must be positive"));
        }
        for th in [
            &self.level_thresholds.premium,
            &self.level_thresholds.advanced,
            &self.level_thresholds.standard,
        ] {
            if !(th[0] < th[1] && th[1] < th[2]) {
                return Err(Error::config(
                    "level thresholds must be strictly increasing in attention level",
                ));
            }
        }
        if self.user_box_x[0] > self.user_box_x[1] || self.user_box_y[0] > self.user_box_y[1] {
            return Err(Error::config("user box ranges must be ordered"));
        }
        Ok(())
    }
}

/// Gaze-trace source used when constructing user environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GazeConfig {
    /// `"synthetic"` or `"csv"`.
    pub source: String,
    /// Directory of per-user gaze CSV files (used when `source = "csv"`).
    pub csv_dir: Option<String>,
    /// Random-walk step standard deviation for synthetic gaze.
    pub step_sigma: f64,
}

impl Default for GazeConfig {
    fn default() -> Self {
        Self { source: "synthetic".to_string(), csv_dir: None, step_sigma: 0.05 }
    }
}

/// Offline dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// User counts to simulate, each producing its own environment family.
    pub user_counts: Vec<usize>,
    /// Training environments per user count per MEC server.
    pub train_envs_per_count: usize,
    /// Level tuples reserved per user count for held-out evaluation.
    pub holdout_envs_per_count: usize,
    /// Episodes (= trajectories) collected per training environment.
    pub episodes_per_env: usize,
    /// Fractions of episodes driven by each behavior policy.
    pub policy_mix: PolicyMix,
    /// Coordinate perturbations per hill-climb action.
    pub hillclimb_iters: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            user_counts: vec![3, 4, 5, 6, 7, 8],
            train_envs_per_count: 20,
            holdout_envs_per_count: 10,
            episodes_per_env: 100,
            policy_mix: PolicyMix::default(),
            hillclimb_iters: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyMix {
    pub random: f64,
    pub proportional: f64,
    pub hillclimb: f64,
}

impl Default for PolicyMix {
    fn default() -> Self {
        Self { random: 0.3, proportional: 0.3, hillclimb: 0.4 }
    }
}

/// Federated-learning schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlConfig {
    /// Number of clients; must match the number of dataset shards.
    pub clients: usize,
    /// Communication rounds.
    pub rounds: usize,
    /// Local epochs per round; the local step budget is `epochs * iters`.
    pub local_epochs: usize,
    /// Local iterations per epoch.
    pub local_iters: usize,
    /// Sequences per gradient step, all drawn from one user environment.
    pub batch_size: usize,
    /// Base learning rate.
    pub lr: f64,
    pub weight_decay: f64,
    /// Multiplicative decay applied once per round: lr_r = lr * (1-d)^r.
    pub lr_decay_per_round: f64,
    /// Linear warm-up steps at the start of every round.
    pub warmup_steps: usize,
    /// Persist a checkpoint every this many rounds (and always at the end).
    pub checkpoint_interval: usize,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            clients: 5,
            rounds: 100,
            local_epochs: 1,
            local_iters: 10,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 1e-4,
            lr_decay_per_round: 0.01,
            warmup_steps: 3,
            checkpoint_interval: 10,
        }
    }
}

/// Decision-transformer architecture settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Training context length `L_tr` in timesteps.
    pub context_len: usize,
    /// Prompt length `L_pr` in timesteps; 0 trains a no-prompt variant.
    pub prompt_len: usize,
    /// Whether states carry the user-information vector (the explicit
    /// prompt); disabled alongside the prompt for the ablation baseline.
    pub user_info: bool,
    /// Size of the timestep-embedding table; must exceed episode_len.
    pub max_timestep: usize,
    /// Divisor applied to reward-to-go inputs before embedding.
    pub rtg_scale: f64,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            layers: 6,
            heads: 1,
            dropout: 0.1,
            context_len: 10,
            prompt_len: 5,
            user_info: true,
            max_timestep: 128,
            rtg_scale: 1000.0,
            init_std: 0.02,
        }
    }
}

/// Evaluation and sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Episodes per environment.
    pub episodes: usize,
    /// Initial reward-to-go handed to the policy.
    pub rtg_target: f64,
    /// Evaluation horizon `T_te` in steps.
    pub horizon: usize,
    /// Cap on the number of held-out environments evaluated (0 = all).
    pub max_envs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 10, rtg_target: 900.0, horizon: 100, max_envs: 0 }
    }
}

/// Root of the resolved configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    /// Master seed for all pipeline stages (overridable via `--seed`).
    pub seed: u64,
    pub system: SystemConfig,
    pub gaze: GazeConfig,
    pub data: DataConfig,
    pub fl: FlConfig,
    pub model: ModelSection,
    pub eval: EvalConfig,
}

impl AppConfig {
    /// Parse from a TOML string and apply `FPDT_*` environment overrides.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table =
            text.parse().map_err(|e| Error::config(format!("TOML parse error: {e}")))?;
        apply_env_overrides(&mut table, std::env::vars())?;
        let cfg: AppConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.model.heads != 1 {
            return Err(Error::config("only heads = 1 is supported"));
        }
        if self.model.embed_dim == 0 || self.model.layers == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.model.max_timestep < self.system.episode_len {
            return Err(Error::config("max_timestep must be >= episode_len"));
        }
        if self.model.context_len == 0 {
            return Err(Error::config("context_len must be positive"));
        }
        if self.fl.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let m = self.data.policy_mix;
        let s = m.random + m.proportional + m.hillclimb;
        if !(s > 0.0) || m.random < 0.0 || m.proportional < 0.0 || m.hillclimb < 0.0 {
            return Err(Error::config("policy_mix fractions must be non-negative, sum > 0"));
        }
        for &k in &self.data.user_counts {
            if k == 0 || k > self.system.k_max {
                return Err(Error::config(format!(
                    "user count {k} outside [1, k_max={}]",
                    self.system.k_max
                )));
            }
        }
        Ok(())
    }

    /// Serialize back to TOML (used for the run-directory snapshot).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Apply `FPDT_<SECTION>_<KEY>=value` overrides onto a parsed TOML table.
/// `FPDT_SEED` targets the top-level seed. Values are parsed as TOML
/// literals, falling back to a plain string.
fn apply_env_overrides(
    table: &mut toml::Table,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<()> {
    const SECTIONS: [&str; 6] = ["system", "gaze", "data", "fl", "model", "eval"];
    for (key, value) in vars {
        let Some(rest) = key.strip_prefix("FPDT_") else { continue };
        let parsed = parse_toml_literal(&value);
        if rest.eq_ignore_ascii_case("seed") {
            table.insert("seed".into(), parsed);
            continue;
        }
        let Some((section, field)) = rest.split_once('_') else {
            return Err(Error::config(format!("cannot interpret override {key}")));
        };
        let section = section.to_ascii_lowercase();
        if !SECTIONS.contains(&section.as_str()) {
            return Err(Error::config(format!("unknown config section in override {key}")));
        }
        let entry = table
            .entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match entry {
            toml::Value::Table(t) => {
                t.insert(field.to_ascii_lowercase(), parsed);
            }
            _ => return Err(Error::config(format!("config section {section} is not a table"))),
        }
    }
    Ok(())
}

fn parse_toml_literal(value: &str) -> toml::Value {
    let attempt = format!("v = {value}");
    if let Ok(t) = attempt.parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(value.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_reference_settings() {
        let cfg = AppConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.system.tiles(), 16);
        assert_eq!(cfg.system.state_dim(), 98);
        assert_eq!(cfg.system.action_dim(), 40);
        assert_eq!(cfg.system.render_scale(), 300.0);
        assert_eq!(cfg.model.context_len, 10);
        assert_eq!(cfg.model.prompt_len, 5);
        // -174 dBm/Hz in W/Hz.
        let psd = 10f64.powf(-20.4);
        assert!((cfg.system.noise_psd_w_per_hz - psd).abs() / psd < 1e-12);
        // Per-level thresholds are strictly increasing and match the shipped
        // resolution table.
        assert_eq!(cfg.system.level_thresholds.premium, [691_200.0, 1_555_200.0, 3_110_400.0]);
        assert_eq!(cfg.system.level_thresholds.advanced, [307_200.0, 691_200.0, 1_555_200.0]);
        assert_eq!(cfg.system.level_thresholds.standard, [230_400.0, 307_200.0, 691_200.0]);
    }

    #[test]
    fn toml_roundtrip_preserves_config() {
        let cfg = AppConfig::default();
        let text = cfg.to_toml_string();
        let back = AppConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn env_override_applies_to_nested_key() {
        let mut table: toml::Table = "".parse().unwrap();
        apply_env_overrides(
            &mut table,
            vec![
                ("FPDT_SYSTEM_K_MAX".to_string(), "4".to_string()),
                ("FPDT_SEED".to_string(), "7".to_string()),
                ("OTHER".to_string(), "ignored".to_string()),
            ]
            .into_iter(),
        )
        .unwrap();
        let cfg: AppConfig = toml::Value::Table(table).try_into().unwrap();
        assert_eq!(cfg.system.k_max, 4);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn invalid_threshold_order_is_rejected() {
        let mut cfg = AppConfig::default();
        cfg.system.level_thresholds.premium = [2.0, 1.0, 3.0];
        assert!(cfg.validate().is_err());
    }
}
