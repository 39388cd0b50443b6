//! Closed-form physics of one MEC server: channel rate, latencies, QoE,
//! horizon-fair QoE, reward shaping, and action decoding.

use crate::config::{NoiseModel, SystemConfig};
use crate::error::{Error, Result};

use super::types::{
    AllocationAction, AttentionMap, ChannelState, DecodedAllocation, UserProfile,
};

/// Shannon rate of the sub-6 GHz downlink:
/// `B * log2(1 + P * h * d^-alpha / (I + noise))`.
///
/// With the PSD noise model the noise power scales with the allocated
/// bandwidth; zero bandwidth yields zero rate.
pub fn transmission_rate(cfg: &SystemConfig, b_hz: f64, ch: &ChannelState) -> Result<f64> {
    if b_hz < 0.0 {
        return Err(Error::invalid(format!("bandwidth {b_hz} Hz is negative")));
    }
    if b_hz == 0.0 {
        return Ok(0.0);
    }
    let noise_w = match cfg.noise_model {
        NoiseModel::Psd => cfg.noise_psd_w_per_hz * b_hz,
        NoiseModel::Flat => cfg.noise_flat_w,
    };
    let signal = cfg.transmit_power_w * ch.gain * ch.distance_m.powf(-cfg.path_loss_exponent);
    let sinr = signal / (ch.interference_w + noise_w);
    Ok(b_hz * (1.0 + sinr).log2())
}

/// Per-level tile data resolved from an allocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileBits {
    /// Resolved bits per tile, `b_a = b_{a,th} * r_a`.
    pub bits_per_tile: [f64; 3],
    /// GoP data per level, `g_a = N_a * b_a * F`.
    pub gop_bits: [f64; 3],
    /// `G = sum_a g_a`.
    pub total_bits: f64,
}

/// Resolve tile sizes for one user from resolution ratios.
pub fn tile_bits(
    profile: &UserProfile,
    ratios: [f64; 3],
    amap: &AttentionMap,
    frames: usize,
) -> Result<TileBits> {
    let mut bits_per_tile = [0.0; 3];
    let mut gop_bits = [0.0; 3];
    for a in 0..3 {
        let r = ratios[a];
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("ratio {r} outside [0,1]")));
        }
        bits_per_tile[a] = profile.b_th[a] * r;
        gop_bits[a] = amap.counts[a] as f64 * bits_per_tile[a] * frames as f64;
    }
    Ok(TileBits { bits_per_tile, gop_bits, total_bits: gop_bits.iter().sum() })
}

/// Calibrated download latency `G / (omega * (R - dR))` in seconds.
/// Zero payload downloads instantly; a non-positive effective rate with a
/// positive payload is an infeasible link.
pub fn download_latency(gop_bits: f64, omega: f64, rate_bps: f64, delta_r: f64) -> Result<f64> {
    if gop_bits == 0.0 {
        return Ok(0.0);
    }
    let eff = rate_bps - delta_r;
    if eff <= 0.0 {
        return Err(Error::InfeasibleLink { rate_bps: eff });
    }
    Ok(gop_bits / (omega * eff))
}

/// Calibrated rendering latency `sum_a g_a c_a / (scale * (f - df))` in
/// seconds. Zero workload renders instantly; a non-positive effective
/// frequency with a positive workload is infeasible compute.
pub fn render_latency(
    gop_bits: &[f64; 3],
    cfg: &SystemConfig,
    f_hz: f64,
    delta_f: f64,
) -> Result<f64> {
    let workload: f64 = (0..3).map(|a| gop_bits[a] * cfg.cycles_per_bit[a]).sum();
    if workload == 0.0 {
        return Ok(0.0);
    }
    let eff = f_hz - delta_f;
    if eff <= 0.0 {
        return Err(Error::InfeasibleCompute { freq_hz: eff });
    }
    Ok(workload / (cfg.render_scale() * eff))
}

pub fn total_latency(t_download: f64, t_render: f64) -> f64 {
    t_download + t_render
}

/// Attention-weighted log-resolution QoE:
/// `(1 - T/T_th) * sum_a (a N_a / N) ln(1 + b_a / b_{a,th})`.
/// Negative when the latency exceeds the threshold.
pub fn qoe(
    t_total: f64,
    cfg: &SystemConfig,
    profile: &UserProfile,
    amap: &AttentionMap,
    bits_per_tile: &[f64; 3],
) -> f64 {
    let n = cfg.tiles() as f64;
    let latency_factor = 1.0 - t_total / cfg.latency_threshold_s;
    let resolution_term: f64 = (0..3)
        .map(|a| {
            let weight = (a as f64 + 1.0) * amap.counts[a] as f64 / n;
            weight * (1.0 + bits_per_tile[a] / profile.b_th[a]).ln()
        })
        .sum();
    latency_factor * resolution_term
}

/// Horizon-fair QoE: `1 - std(avgQoE) / sqrt(K_e)` with the population
/// standard deviation.
pub fn hfqoe(avg_qoe: &[f64]) -> Result<f64> {
    if avg_qoe.is_empty() {
        return Err(Error::invalid("hfqoe needs at least one user"));
    }
    let k = avg_qoe.len() as f64;
    let mean = avg_qoe.iter().sum::<f64>() / k;
    let var = avg_qoe.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / k;
    Ok(1.0 - var.sqrt() / k.sqrt())
}

/// Reward with threshold penalties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub reward: f64,
    pub qoe_penalty_count: usize,
    pub hfqoe_penalized: bool,
}

/// `sum_k QoE_k - w1 * sum_k q_k - w2 * q_hf` where `q_k = QoE_th` whenever
/// user `k` misses the QoE threshold and `q_hf = hfQoE_th` whenever the
/// server misses the fairness threshold. `w1 : w2 = 1 : K_e`.
pub fn reward(qoe_values: &[f64], hfqoe_value: f64, cfg: &SystemConfig) -> RewardBreakdown {
    let k_e = qoe_values.len();
    let qoe_sum: f64 = qoe_values.iter().sum();
    let qoe_penalty_count = qoe_values.iter().filter(|&&q| q < cfg.qoe_threshold).count();
    let hfqoe_penalized = hfqoe_value < cfg.hfqoe_threshold;
    let penalty_qoe = cfg.penalty_qoe * qoe_penalty_count as f64 * cfg.qoe_threshold;
    let penalty_hf =
        if hfqoe_penalized { cfg.penalty_hfqoe(k_e) * cfg.hfqoe_threshold } else { 0.0 };
    RewardBreakdown { reward: qoe_sum - penalty_qoe - penalty_hf, qoe_penalty_count, hfqoe_penalized }
}

/// Decode raw allocation ratios into physical resources.
///
/// Bandwidth and frequency shares are normalized over the active users so
/// the capacity constraints hold with equality; an all-zero share vector
/// falls back to a uniform split.
pub fn decode_action(
    raw: &AllocationAction,
    k_e: usize,
    cfg: &SystemConfig,
    profiles: &[UserProfile],
) -> Result<DecodedAllocation> {
    if k_e == 0 || k_e > raw.k_max() {
        return Err(Error::invalid(format!("k_e={k_e} outside [1, {}]", raw.k_max())));
    }
    if profiles.len() < k_e {
        return Err(Error::invalid("profile list shorter than k_e"));
    }
    raw.validate(k_e)?;

    let bits_per_tile: Vec<[f64; 3]> = (0..k_e)
        .map(|k| {
            let r = raw.ratios(k);
            let th = profiles[k].b_th;
            [th[0] * r[0], th[1] * r[1], th[2] * r[2]]
        })
        .collect();

    let normalize = |shares: Vec<f64>, capacity: f64| -> Vec<f64> {
        let sum: f64 = shares.iter().sum();
        if sum == 0.0 {
            vec![capacity / k_e as f64; k_e]
        } else {
            shares.iter().map(|s| capacity * s / sum).collect()
        }
    };

    let bandwidth_hz = normalize(
        (0..k_e).map(|k| raw.bandwidth_share(k)).collect(),
        cfg.total_bandwidth_hz,
    );
    let cpu_hz = normalize((0..k_e).map(|k| raw.cpu_share(k)).collect(), cfg.total_cpu_hz);

    Ok(DecodedAllocation { bits_per_tile, bandwidth_hz, cpu_hz })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::types::GazeSource;

    fn cfg() -> SystemConfig {
        SystemConfig::default()
    }

    fn premium(cfg: &SystemConfig) -> UserProfile {
        UserProfile::new(
            crate::env::types::UserLevel::Premium,
            cfg,
            GazeSource::Synthetic { seed: 0, step_sigma: 0.05 },
        )
    }

    fn standard(cfg: &SystemConfig) -> UserProfile {
        UserProfile::new(
            crate::env::types::UserLevel::Standard,
            cfg,
            GazeSource::Synthetic { seed: 0, step_sigma: 0.05 },
        )
    }

    fn ch(gain: f64, d: f64) -> ChannelState {
        ChannelState { gain, distance_m: d, interference_w: 0.0 }
    }

    #[test]
    fn rate_zero_bandwidth_is_zero() {
        assert_eq!(transmission_rate(&cfg(), 0.0, &ch(1.0, 10.0)).unwrap(), 0.0);
    }

    #[test]
    fn rate_negative_bandwidth_rejected() {
        assert!(transmission_rate(&cfg(), -1.0, &ch(1.0, 10.0)).is_err());
    }

    #[test]
    fn rate_matches_scalar_evaluation() {
        // B=1e6 Hz, P=1 W, h=1, d=10 m, alpha=4, I=0, psd=10^-20.4 W/Hz:
        // sinr = 1e-4 / 10^-14.4, rate = 1e6 * log2(1 + sinr) ~ 3.4548e7.
        let c = cfg();
        let rate = transmission_rate(&c, 1e6, &ch(1.0, 10.0)).unwrap();
        let sinr = 1e-4 / (10f64.powf(-20.4) * 1e6);
        let expect = 1e6 * (1.0 + sinr).log2();
        assert!((rate - expect).abs() / expect < 1e-12);
        assert!((rate - 3.46e7).abs() / 3.46e7 < 0.01);
    }

    #[test]
    fn rate_monotone_in_gain() {
        let c = cfg();
        let r1 = transmission_rate(&c, 1e6, &ch(1.0, 10.0)).unwrap();
        let r2 = transmission_rate(&c, 1e6, &ch(2.0, 10.0)).unwrap();
        assert!(r2 > r1);
        let r3 = transmission_rate(&c, 1e6, &ch(1.0, 20.0)).unwrap();
        assert!(r3 < r1);
    }

    #[test]
    fn tile_bits_zero_ratio_gives_zero_gop() {
        let c = cfg();
        let p = premium(&c);
        let tb = tile_bits(&p, [0.0; 3], &AttentionMap::new(7, 8, 1), 16).unwrap();
        assert_eq!(tb.total_bits, 0.0);
    }

    #[test]
    fn tile_bits_premium_level3_single_tile() {
        // b_{3,th} = 12441600/4, ratio 1, one tile, F=16 -> 49,766,400 bits.
        let c = cfg();
        let p = premium(&c);
        let tb = tile_bits(&p, [0.0, 0.0, 1.0], &AttentionMap::new(14, 1, 1), 16).unwrap();
        assert_eq!(tb.gop_bits[2], 49_766_400.0);
    }

    #[test]
    fn tile_bits_matches_bruteforce_sum() {
        let c = cfg();
        let p = standard(&c);
        let amap = AttentionMap::new(10, 5, 1);
        let tb = tile_bits(&p, [1.0, 1.0, 1.0], &amap, 16).unwrap();
        let mut expect = 0.0;
        for a in 0..3 {
            expect += amap.counts[a] as f64 * p.b_th[a] * 16.0;
        }
        assert_eq!(tb.total_bits, expect);
    }

    #[test]
    fn download_latency_basics() {
        assert_eq!(download_latency(0.0, 300.0, 0.0, 0.0).unwrap(), 0.0);
        let t = download_latency(3e8, 300.0, 1e7, 0.0).unwrap();
        assert!((t - 0.1).abs() < 1e-15);
        assert!(matches!(
            download_latency(1.0, 300.0, 5.0, 5.0),
            Err(Error::InfeasibleLink { .. })
        ));
    }

    #[test]
    fn render_latency_basics() {
        let c = cfg();
        assert_eq!(render_latency(&[0.0; 3], &c, 15e9, 0.0).unwrap(), 0.0);
        let g = [0.0, 0.0, 49_766_400.0];
        let t = render_latency(&g, &c, 15e9, 0.0).unwrap();
        let expect = 49_766_400.0 * 1000.0 / (300.0 * 15e9);
        assert!((t - expect).abs() / expect < 1e-15);
        assert!((t - 0.01106).abs() < 1e-4);
        // Literal formula (scale 1) shows the feasibility gap.
        let mut c1 = cfg();
        c1.render_scale = Some(1.0);
        let t1 = render_latency(&g, &c1, 15e9, 0.0).unwrap();
        assert!((t1 - 3.31776).abs() < 1e-4);
        assert!(matches!(
            render_latency(&g, &c, 1.0, 1.0),
            Err(Error::InfeasibleCompute { .. })
        ));
    }

    #[test]
    fn total_latency_adds() {
        assert_eq!(total_latency(0.0, 0.0), 0.0);
        assert_eq!(total_latency(0.01, 0.02), 0.03);
    }

    #[test]
    fn qoe_zero_at_threshold_latency() {
        let c = cfg();
        let p = premium(&c);
        let amap = AttentionMap::new(7, 8, 1);
        let q = qoe(c.latency_threshold_s, &c, &p, &amap, &p.b_th.clone());
        assert_eq!(q, 0.0);
    }

    #[test]
    fn qoe_zero_resolution_is_zero() {
        let c = cfg();
        let p = premium(&c);
        let q = qoe(0.0, &c, &p, &AttentionMap::new(7, 8, 1), &[0.0; 3]);
        assert_eq!(q, 0.0);
    }

    #[test]
    fn qoe_matches_closed_form_at_thresholds() {
        // T=0, N=(10,5,1) of 16, b = b_th: ln(2) * (10 + 10 + 3) / 16.
        let c = cfg();
        let p = premium(&c);
        let q = qoe(0.0, &c, &p, &AttentionMap::new(10, 5, 1), &p.b_th.clone());
        let expect = std::f64::consts::LN_2 * 23.0 / 16.0;
        assert!((q - expect).abs() < 1e-15);
        assert!((q - 0.9964).abs() < 1e-3);
    }

    #[test]
    fn hfqoe_cases() {
        assert_eq!(hfqoe(&[0.5, 0.5, 0.5]).unwrap(), 1.0);
        assert!((hfqoe(&[0.7, 0.7, 0.7]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(hfqoe(&[0.42]).unwrap(), 1.0);
        let v = hfqoe(&[1.0, 0.8]).unwrap();
        assert!((v - (1.0 - 0.1 / 2f64.sqrt())).abs() < 1e-15);
        assert!((v - 0.92929).abs() < 1e-5);
        assert!(hfqoe(&[]).is_err());
    }

    #[test]
    fn reward_no_penalties() {
        let c = cfg();
        let out = reward(&[1.0, 0.95], 0.9, &c);
        assert_eq!(out.reward, 1.95);
        assert_eq!(out.qoe_penalty_count, 0);
        assert!(!out.hfqoe_penalized);
    }

    #[test]
    fn reward_single_qoe_penalty() {
        let c = cfg();
        let out = reward(&[1.0, 0.5], 0.9, &c);
        assert!((out.reward - 0.59).abs() < 1e-12);
        assert_eq!(out.qoe_penalty_count, 1);
    }

    #[test]
    fn reward_hfqoe_penalty_scales_with_users() {
        let c = cfg();
        let out = reward(&[1.0, 0.95], 0.7, &c);
        assert!((out.reward - (1.95 - 2.0 * 0.8)).abs() < 1e-12);
        assert!(out.hfqoe_penalized);
    }

    #[test]
    fn decode_symmetric_shares() {
        let c = cfg();
        let profiles: Vec<_> = (0..2).map(|_| premium(&c)).collect();
        let mut a = AllocationAction::zeros(8);
        a.user_slice_mut(0).copy_from_slice(&[1.0, 1.0, 1.0, 0.5, 0.5]);
        a.user_slice_mut(1).copy_from_slice(&[1.0, 1.0, 1.0, 0.5, 0.5]);
        let d = decode_action(&a, 2, &c, &profiles).unwrap();
        assert_eq!(d.bandwidth_hz, vec![5e6, 5e6]);
        assert_eq!(d.cpu_hz, vec![7.5e9, 7.5e9]);
    }

    #[test]
    fn decode_uniform_fallback_on_zero_shares() {
        let c = cfg();
        let profiles: Vec<_> = (0..3).map(|_| premium(&c)).collect();
        let mut a = AllocationAction::zeros(8);
        for k in 0..3 {
            a.user_slice_mut(k).copy_from_slice(&[1.0, 1.0, 1.0, 0.0, 0.0]);
        }
        let d = decode_action(&a, 3, &c, &profiles).unwrap();
        for k in 0..3 {
            assert!((d.bandwidth_hz[k] - 10e6 / 3.0).abs() < 1e-9);
            assert!((d.cpu_hz[k] - 15e9 / 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn decode_normalizes_shares() {
        let c = cfg();
        let profiles: Vec<_> = (0..2).map(|_| premium(&c)).collect();
        let mut a = AllocationAction::zeros(8);
        a.user_slice_mut(0).copy_from_slice(&[1.0, 1.0, 1.0, 0.2, 0.2]);
        a.user_slice_mut(1).copy_from_slice(&[1.0, 1.0, 1.0, 0.6, 0.6]);
        let d = decode_action(&a, 2, &c, &profiles).unwrap();
        assert!((d.bandwidth_hz[0] - 0.25 * 10e6).abs() < 1e-6);
        assert!((d.bandwidth_hz[1] - 0.75 * 10e6).abs() < 1e-6);
    }

    #[test]
    fn decode_rejects_k_e_above_k_max() {
        let c = cfg();
        let profiles: Vec<_> = (0..9).map(|_| premium(&c)).collect();
        let a = AllocationAction::zeros(8);
        assert!(decode_action(&a, 9, &c, &profiles).is_err());
    }
}
