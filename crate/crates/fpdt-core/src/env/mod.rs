//! Single-MEC-server simulation environment.
//!
//! One step serves one GoP: decode the allocation, push tiles through the
//! channel/rendering formulas, score per-user QoE and server fairness, and
//! advance the gaze-driven attention maps. Every instance owns its RNG, so
//! identical `(seed, action sequence)` pairs produce bit-identical streams.

pub mod physics;
pub mod types;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::gaze::{self, GazeTrace};
use crate::rng;

use types::{
    AllocationAction, AttentionMap, ChannelState, GazeSource, StepReport, UserLevel, UserProfile,
    UserStepRecord,
};

/// Identity of a user environment: the ordered level assignment.
/// Rendered as e.g. `K3-PAS` (user count, then one letter per user).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnvId {
    pub levels: Vec<UserLevel>,
}

impl EnvId {
    pub fn new(levels: Vec<UserLevel>) -> Self {
        Self { levels }
    }

    pub fn user_count(&self) -> usize {
        self.levels.len()
    }

    pub fn parse(s: &str) -> Result<Self> {
        let rest = s
            .strip_prefix('K')
            .ok_or_else(|| Error::invalid(format!("bad env id {s}")))?;
        let (count, letters) = rest
            .split_once('-')
            .ok_or_else(|| Error::invalid(format!("bad env id {s}")))?;
        let count: usize =
            count.parse().map_err(|_| Error::invalid(format!("bad env id {s}")))?;
        let levels: Option<Vec<UserLevel>> = letters.chars().map(UserLevel::from_letter).collect();
        let levels = levels.ok_or_else(|| Error::invalid(format!("bad env id {s}")))?;
        if levels.len() != count {
            return Err(Error::invalid(format!("env id {s} count/levels mismatch")));
        }
        Ok(Self { levels })
    }
}

impl std::fmt::Display for EnvId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "K{}-", self.levels.len())?;
        for l in &self.levels {
            write!(f, "{}", l.letter())?;
        }
        Ok(())
    }
}

/// Everything needed to instantiate an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: EnvId,
    /// Root seed: gaze generation and episode streams derive from it.
    pub seed: u64,
    /// Owning MEC server (for reporting only).
    pub mec_id: usize,
    pub profiles: Vec<UserProfile>,
}

impl EnvSpec {
    /// Build a spec with synthetic per-user gaze derived from `seed`.
    pub fn synthetic(
        env_id: EnvId,
        seed: u64,
        mec_id: usize,
        cfg: &SystemConfig,
        step_sigma: f64,
    ) -> Self {
        let profiles = env_id
            .levels
            .iter()
            .enumerate()
            .map(|(k, &level)| {
                let gaze_seed = rng::mix(seed, &[rng::tag("gaze"), k as u64]);
                UserProfile::new(
                    level,
                    cfg,
                    GazeSource::Synthetic { seed: gaze_seed, step_sigma },
                )
            })
            .collect();
        Self { env_id, seed, mec_id, profiles }
    }

    pub fn k_e(&self) -> usize {
        self.env_id.user_count()
    }
}

/// Digital-user snapshot: attention tile counts and last QoE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserSnapshot {
    pub amap: AttentionMap,
    pub qoe: f64,
}

/// Latency triple of the most recent step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyTriple {
    pub download_s: f64,
    pub render_s: f64,
    pub total_s: f64,
}

/// Observable environment state (raw, un-augmented).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub t: usize,
    pub k_e: usize,
    /// Digital users at t-1.
    pub prev: Vec<UserSnapshot>,
    /// Digital users at t.
    pub cur: Vec<UserSnapshot>,
    pub latency: Vec<LatencyTriple>,
    pub hfqoe_prev: f64,
    pub hfqoe_cur: f64,
    pub terminal: bool,
}

impl EnvState {
    /// Flatten to the fixed raw layout: 11 values per user slot
    /// `[N1-, N2-, N3-, QoE-, N1, N2, N3, QoE, T_d, T_r, T]`, zero-padded to
    /// `k_max` users, then the two hfQoE snapshots. Length `11*k_max + 2`.
    pub fn to_raw(&self, k_max: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(11 * k_max + 2);
        for k in 0..k_max {
            if k < self.k_e {
                let p = &self.prev[k];
                let c = &self.cur[k];
                let l = &self.latency[k];
                out.extend_from_slice(&[
                    p.amap.counts[0] as f64,
                    p.amap.counts[1] as f64,
                    p.amap.counts[2] as f64,
                    p.qoe,
                    c.amap.counts[0] as f64,
                    c.amap.counts[1] as f64,
                    c.amap.counts[2] as f64,
                    c.qoe,
                    l.download_s,
                    l.render_s,
                    l.total_s,
                ]);
            } else {
                out.extend_from_slice(&[0.0; 11]);
            }
        }
        out.push(self.hfqoe_prev);
        out.push(self.hfqoe_cur);
        out
    }
}

/// Per-user outcome plus server aggregates for one hypothetical step.
struct Outcome {
    records: Vec<UserStepRecord>,
    qoe: Vec<f64>,
    latencies: Vec<LatencyTriple>,
    hfqoe: f64,
    reward: physics::RewardBreakdown,
}

/// A single MEC server environment.
pub struct MecEnv {
    cfg: SystemConfig,
    spec: EnvSpec,
    traces: Vec<GazeTrace>,
    rng: ChaCha8Rng,
    positions: Vec<(f64, f64)>,
    channels: Vec<ChannelState>,
    qoe_sums: Vec<f64>,
    state: EnvState,
}

impl MecEnv {
    /// Construct and reset with the spec's own seed.
    pub fn new(cfg: SystemConfig, spec: EnvSpec) -> Result<Self> {
        cfg.validate()?;
        let k_e = spec.k_e();
        if k_e == 0 || k_e > cfg.k_max {
            return Err(Error::invalid(format!("k_e={k_e} outside [1, k_max={}]", cfg.k_max)));
        }
        if spec.profiles.len() != k_e {
            return Err(Error::invalid("profile count must equal user count"));
        }
        for p in &spec.profiles {
            p.validate()?;
        }
        let frames_needed = cfg.episode_len * cfg.frames_per_gop + cfg.frames_per_gop;
        let traces: Vec<GazeTrace> = spec
            .profiles
            .iter()
            .map(|p| match &p.gaze_source {
                GazeSource::Synthetic { seed, step_sigma } => {
                    Ok(gaze::synth_gaze(*seed, frames_needed, *step_sigma))
                }
                GazeSource::File { path } => gaze::ingest_gaze_csv(std::path::Path::new(path)),
            })
            .collect::<Result<_>>()?;
        for tr in &traces {
            if tr.is_empty() {
                return Err(Error::invalid("gaze trace is empty"));
            }
        }
        let seed = spec.seed;
        let mut env = Self {
            rng: rng::stream(seed, &[rng::tag("episode"), 0]),
            positions: Vec::new(),
            channels: Vec::new(),
            qoe_sums: vec![0.0; k_e],
            state: EnvState {
                t: 0,
                k_e,
                prev: Vec::new(),
                cur: Vec::new(),
                latency: Vec::new(),
                hfqoe_prev: 1.0,
                hfqoe_cur: 1.0,
                terminal: false,
            },
            cfg,
            spec,
            traces,
        };
        env.reset(seed)?;
        Ok(env)
    }

    pub fn cfg(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn k_e(&self) -> usize {
        self.spec.k_e()
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Start a fresh episode: resample user positions, reseed the channel
    /// stream, clear QoE history. Gaze recordings stay fixed per user.
    pub fn reset(&mut self, episode_seed: u64) -> Result<EnvState> {
        let k_e = self.k_e();
        self.rng = rng::stream(episode_seed, &[rng::tag("episode-stream")]);
        self.positions = (0..k_e)
            .map(|_| {
                let x = self.rng.random_range(self.cfg.user_box_x[0]..=self.cfg.user_box_x[1]);
                let y = self.rng.random_range(self.cfg.user_box_y[0]..=self.cfg.user_box_y[1]);
                (x, y)
            })
            .collect();
        self.channels = self.sample_channels();
        self.qoe_sums = vec![0.0; k_e];
        let initial: Vec<UserSnapshot> = (0..k_e)
            .map(|k| -> Result<UserSnapshot> {
                let amap = self.amap_at(k, 0)?;
                Ok(UserSnapshot { amap, qoe: 0.0 })
            })
            .collect::<Result<_>>()?;
        self.state = EnvState {
            t: 0,
            k_e,
            prev: initial.clone(),
            cur: initial,
            latency: vec![LatencyTriple::default(); k_e],
            hfqoe_prev: 1.0,
            hfqoe_cur: 1.0,
            terminal: false,
        };
        Ok(self.state.clone())
    }

    fn sample_channels(&mut self) -> Vec<ChannelState> {
        let exp = Exp::new(1.0).expect("unit-rate exponential");
        (0..self.k_e())
            .map(|k| {
                let (x, y) = self.positions[k];
                ChannelState {
                    gain: exp.sample(&mut self.rng),
                    distance_m: (x * x + y * y).sqrt(),
                    interference_w: self.cfg.interference_w,
                }
            })
            .collect()
    }

    fn amap_at(&self, user: usize, t: usize) -> Result<AttentionMap> {
        gaze::attention_map(
            &self.traces[user],
            t,
            self.cfg.grid_i,
            self.cfg.grid_j,
            self.cfg.frames_per_gop,
        )
    }

    /// Evaluate a step without mutating anything. Infeasible links or
    /// compute saturate the affected latency at `2 * T_th` instead of
    /// erroring, keeping the learning signal finite.
    fn evaluate(&self, action: &AllocationAction) -> Result<Outcome> {
        let k_e = self.k_e();
        let decoded = physics::decode_action(action, k_e, &self.cfg, &self.spec.profiles)?;
        let saturated = 2.0 * self.cfg.latency_threshold_s;
        let mut records = Vec::with_capacity(k_e);
        let mut qoe_values = Vec::with_capacity(k_e);
        let mut latencies = Vec::with_capacity(k_e);
        for k in 0..k_e {
            let profile = &self.spec.profiles[k];
            let amap = &self.state.cur[k].amap;
            let tb = physics::tile_bits(profile, action.ratios(k), amap, self.cfg.frames_per_gop)?;
            let rate =
                physics::transmission_rate(&self.cfg, decoded.bandwidth_hz[k], &self.channels[k])?;
            let delta_r = self.cfg.delta_r_frac * rate;
            let (t_down, infeasible_link) = match physics::download_latency(
                tb.total_bits,
                self.cfg.compression_ratio,
                rate,
                delta_r,
            ) {
                Ok(t) => (t, false),
                Err(Error::InfeasibleLink { .. }) => (saturated, true),
                Err(e) => return Err(e),
            };
            let delta_f = self.cfg.delta_f_frac * decoded.cpu_hz[k];
            let (t_render, infeasible_compute) =
                match physics::render_latency(&tb.gop_bits, &self.cfg, decoded.cpu_hz[k], delta_f) {
                    Ok(t) => (t, false),
                    Err(Error::InfeasibleCompute { .. }) => (saturated, true),
                    Err(e) => return Err(e),
                };
            let t_total = physics::total_latency(t_down, t_render);
            let q = physics::qoe(t_total, &self.cfg, profile, amap, &tb.bits_per_tile);
            qoe_values.push(q);
            latencies.push(LatencyTriple { download_s: t_down, render_s: t_render, total_s: t_total });
            records.push(UserStepRecord {
                user: k,
                level: profile.level,
                tiles: amap.counts,
                bits_per_tile: tb.bits_per_tile,
                gop_bits: tb.gop_bits,
                gop_total_bits: tb.total_bits,
                bandwidth_hz: decoded.bandwidth_hz[k],
                cpu_hz: decoded.cpu_hz[k],
                rate_bps: rate,
                t_download_s: t_down,
                t_render_s: t_render,
                t_total_s: t_total,
                qoe: q,
                infeasible_link,
                infeasible_compute,
            });
        }
        // Average QoE over the horizon including this step.
        let steps_done = (self.state.t + 1) as f64;
        let avg: Vec<f64> = (0..k_e)
            .map(|k| (self.qoe_sums[k] + qoe_values[k]) / steps_done)
            .collect();
        let hfqoe = physics::hfqoe(&avg)?;
        let reward = physics::reward(&qoe_values, hfqoe, &self.cfg);
        Ok(Outcome { records, qoe: qoe_values, latencies, hfqoe, reward })
    }

    /// Counterfactual one-step reward of `action` from the current state.
    pub fn peek_reward(&self, action: &AllocationAction) -> Result<f64> {
        Ok(self.evaluate(action)?.reward.reward)
    }

    /// Apply an action, advance one GoP, and return the next state, the
    /// reward, and the full step report.
    pub fn step(&mut self, action: &AllocationAction) -> Result<(EnvState, f64, StepReport)> {
        if self.state.terminal {
            return Err(Error::invalid("episode already terminated"));
        }
        let outcome = self.evaluate(action)?;
        let step_index = self.state.t;
        let k_e = self.k_e();
        for k in 0..k_e {
            self.qoe_sums[k] += outcome.qoe[k];
        }
        let t_next = step_index + 1;
        let next_cur: Vec<UserSnapshot> = (0..k_e)
            .map(|k| -> Result<UserSnapshot> {
                Ok(UserSnapshot { amap: self.amap_at(k, t_next)?, qoe: outcome.qoe[k] })
            })
            .collect::<Result<_>>()?;
        self.state = EnvState {
            t: t_next,
            k_e,
            prev: std::mem::take(&mut self.state.cur),
            cur: next_cur,
            latency: outcome.latencies.clone(),
            hfqoe_prev: self.state.hfqoe_cur,
            hfqoe_cur: outcome.hfqoe,
            terminal: t_next >= self.cfg.episode_len,
        };
        self.channels = self.sample_channels();
        let report = StepReport {
            step: step_index,
            users: outcome.records,
            hfqoe: outcome.hfqoe,
            reward: outcome.reward.reward,
            qoe_penalty_count: outcome.reward.qoe_penalty_count,
            hfqoe_penalized: outcome.reward.hfqoe_penalized,
        };
        Ok((self.state.clone(), outcome.reward.reward, report))
    }
}

/// Write step reports as CSV with the fixed column order.
pub fn write_report_csv<W: std::io::Write>(reports: &[StepReport], w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer.write_record(StepReport::CSV_HEADER)?;
    for r in reports {
        for row in r.csv_rows() {
            writer.write_record(&row)?;
        }
    }
    writer.flush()?;
    Ok(())
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::invalid(format!("csv error: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(levels: Vec<UserLevel>, seed: u64, cfg: &SystemConfig) -> EnvSpec {
        EnvSpec::synthetic(EnvId::new(levels), seed, 0, cfg, 0.05)
    }

    fn full_action(k_e: usize, k_max: usize) -> AllocationAction {
        let mut a = AllocationAction::zeros(k_max);
        for k in 0..k_e {
            a.user_slice_mut(k).copy_from_slice(&[1.0, 1.0, 1.0, 0.5, 0.5]);
        }
        a
    }

    #[test]
    fn reset_is_deterministic_and_initial_hfqoe_is_one() {
        let cfg = SystemConfig::default();
        let sp = spec(vec![UserLevel::Premium, UserLevel::Standard], 5, &cfg);
        let mut env1 = MecEnv::new(cfg.clone(), sp.clone()).unwrap();
        let mut env2 = MecEnv::new(cfg, sp).unwrap();
        let s1 = env1.reset(17).unwrap();
        let s2 = env2.reset(17).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.hfqoe_cur, 1.0);
        assert_eq!(s1.hfqoe_prev, 1.0);
        assert!(!s1.terminal);
        assert_eq!(s1.prev, s1.cur);
    }

    #[test]
    fn zero_user_spec_rejected() {
        let cfg = SystemConfig::default();
        let sp = spec(vec![], 5, &cfg);
        assert!(MecEnv::new(cfg, sp).is_err());
    }

    #[test]
    fn step_streams_are_bit_identical_across_runs() {
        let cfg = SystemConfig::default();
        let sp = spec(vec![UserLevel::Premium, UserLevel::Advanced, UserLevel::Standard], 7, &cfg);
        let run = |seed: u64| {
            let mut env = MecEnv::new(SystemConfig::default(), sp.clone()).unwrap();
            env.reset(seed).unwrap();
            let mut out = Vec::new();
            for _ in 0..10 {
                let a = full_action(3, 8);
                let (s, r, rep) = env.step(&a).unwrap();
                out.push((s, r.to_bits(), rep));
            }
            out
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn zero_resolution_action_gives_pure_penalty_reward() {
        let cfg = SystemConfig::default();
        let k_e = 3;
        let sp = spec(vec![UserLevel::Premium; 3], 11, &cfg);
        let mut env = MecEnv::new(cfg.clone(), sp).unwrap();
        let (_, r, rep) = env.step(&AllocationAction::zeros(8)).unwrap();
        // All QoE are zero: every user misses the threshold; fairness is
        // perfect (all equal), so no hfQoE penalty.
        for u in &rep.users {
            assert_eq!(u.qoe, 0.0);
        }
        assert_eq!(rep.hfqoe, 1.0);
        let expect = -cfg.penalty_qoe * k_e as f64 * cfg.qoe_threshold;
        assert!((r - expect).abs() < 1e-12);
    }

    #[test]
    fn episode_terminates_at_episode_len() {
        let mut cfg = SystemConfig::default();
        cfg.episode_len = 4;
        let sp = spec(vec![UserLevel::Standard], 2, &cfg);
        let mut env = MecEnv::new(cfg, sp).unwrap();
        let a = full_action(1, 8);
        for i in 0..4 {
            let (s, _, _) = env.step(&a).unwrap();
            assert_eq!(s.terminal, i == 3);
        }
        assert!(env.step(&a).is_err());
    }

    #[test]
    fn report_invariants_hold() {
        let cfg = SystemConfig::default();
        let sp = spec(vec![UserLevel::Premium, UserLevel::Standard], 13, &cfg);
        let mut env = MecEnv::new(cfg, sp).unwrap();
        for _ in 0..20 {
            let (_, _, rep) = env.step(&full_action(2, 8)).unwrap();
            assert!(rep.hfqoe <= 1.0);
            for u in &rep.users {
                assert_eq!(u.t_total_s, u.t_download_s + u.t_render_s);
                let g: f64 = u.gop_bits.iter().sum();
                assert_eq!(u.gop_total_bits, g);
            }
        }
    }

    #[test]
    fn peek_matches_step_reward() {
        let cfg = SystemConfig::default();
        let sp = spec(vec![UserLevel::Advanced, UserLevel::Standard], 23, &cfg);
        let mut env = MecEnv::new(cfg, sp).unwrap();
        let a = full_action(2, 8);
        for _ in 0..5 {
            let peeked = env.peek_reward(&a).unwrap();
            let (_, r, _) = env.step(&a).unwrap();
            assert_eq!(peeked.to_bits(), r.to_bits());
        }
    }

    #[test]
    fn raw_state_layout_has_expected_length_and_padding() {
        let cfg = SystemConfig::default();
        let sp = spec(vec![UserLevel::Premium, UserLevel::Standard], 3, &cfg);
        let env = MecEnv::new(cfg.clone(), sp).unwrap();
        let raw = env.state().to_raw(cfg.k_max);
        assert_eq!(raw.len(), cfg.raw_state_dim());
        // Padding slots (users 2..8) are zero.
        for k in 2..8 {
            for i in 0..11 {
                assert_eq!(raw[11 * k + i], 0.0);
            }
        }
        assert_eq!(raw[88], 1.0);
        assert_eq!(raw[89], 1.0);
    }

    #[test]
    fn zero_bandwidth_share_saturates_latency() {
        let cfg = SystemConfig::default();
        let sp = spec(vec![UserLevel::Premium, UserLevel::Standard], 29, &cfg);
        let mut env = MecEnv::new(cfg.clone(), sp).unwrap();
        let mut a = AllocationAction::zeros(8);
        // User 0 gets everything, user 1 renders content over a dead link.
        a.user_slice_mut(0).copy_from_slice(&[1.0, 1.0, 1.0, 1.0, 1.0]);
        a.user_slice_mut(1).copy_from_slice(&[1.0, 1.0, 1.0, 0.0, 0.0]);
        let (_, _, rep) = env.step(&a).unwrap();
        let u1 = &rep.users[1];
        assert!(u1.infeasible_link);
        assert!(u1.infeasible_compute);
        assert_eq!(u1.t_download_s, 2.0 * cfg.latency_threshold_s);
        assert_eq!(u1.t_render_s, 2.0 * cfg.latency_threshold_s);
        assert!(u1.qoe < 0.0);
    }

    #[test]
    fn env_id_roundtrip() {
        let id = EnvId::new(vec![UserLevel::Premium, UserLevel::Advanced, UserLevel::Standard]);
        assert_eq!(id.to_string(), "K3-PAS");
        assert_eq!(EnvId::parse("K3-PAS").unwrap(), id);
        assert!(EnvId::parse("K2-PAS").is_err());
        assert!(EnvId::parse("3-PAS").is_err());
    }

    #[test]
    fn csv_export_has_fixed_header() {
        let cfg = SystemConfig::default();
        let sp = spec(vec![UserLevel::Standard], 31, &cfg);
        let mut env = MecEnv::new(cfg, sp).unwrap();
        let (_, _, rep) = env.step(&full_action(1, 8)).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&[rep], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "step,user,level,N1,N2,N3,b1,b2,b3,B,f,rate,T_d,T_r,T,qoe,hfqoe,reward"
        );
        assert_eq!(text.lines().count(), 2);
    }
}
