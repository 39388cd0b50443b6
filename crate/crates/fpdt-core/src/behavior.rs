//! Scripted behavior policies and offline dataset collection.
//!
//! These policies populate the offline training data. The mix spans the
//! reward spectrum: uniform-random actions at the bottom, demand-weighted
//! allocation in the middle, and greedy hill-climbing on the one-step
//! reward at the top. Offline sequence training needs both good and bad
//! trajectories to learn return conditioning.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::config::{PolicyMix, SystemConfig};
use crate::env::types::{AllocationAction, UserProfile};
use crate::env::{EnvSpec, EnvState, MecEnv};
use crate::error::Result;
use crate::rng;
use crate::trajectory::{DatasetShard, Trajectory};

/// Proposal values for hill-climb coordinate moves; also the lattice that
/// the oracle of its acceptance test enumerates.
pub const HILLCLIMB_LATTICE: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorPolicy {
    Random,
    DemandProportional,
    HillClimb,
}

/// Pick a policy according to the episode mix.
pub fn choose_policy<R: Rng>(mix: &PolicyMix, rng: &mut R) -> BehaviorPolicy {
    let total = mix.random + mix.proportional + mix.hillclimb;
    let x: f64 = rng.random_range(0.0..total);
    if x < mix.random {
        BehaviorPolicy::Random
    } else if x < mix.random + mix.proportional {
        BehaviorPolicy::DemandProportional
    } else {
        BehaviorPolicy::HillClimb
    }
}

/// I.i.d. uniform entries for active users, zeros for padding slots.
pub fn random_policy<R: Rng>(k_e: usize, k_max: usize, rng: &mut R) -> AllocationAction {
    let mut a = AllocationAction::zeros(k_max);
    for v in a.values.iter_mut().take(AllocationAction::PER_USER * k_e) {
        *v = rng.random();
    }
    a
}

/// Full resolution everywhere; bandwidth shares proportional to each user's
/// attention-weighted bit demand and CPU shares proportional to the cycle
/// demand. Shares are scaled so the largest is 1.
pub fn demand_proportional_policy(
    state: &EnvState,
    profiles: &[UserProfile],
    cfg: &SystemConfig,
) -> AllocationAction {
    let k_e = state.k_e;
    let mut bits = vec![0.0; k_e];
    let mut cycles = vec![0.0; k_e];
    for k in 0..k_e {
        let counts = state.cur[k].amap.counts;
        for a in 0..3 {
            let demand = counts[a] as f64 * profiles[k].b_th[a];
            bits[k] += demand;
            cycles[k] += demand * cfg.cycles_per_bit[a];
        }
    }
    let bits_max = bits.iter().cloned().fold(0.0, f64::max);
    let cycles_max = cycles.iter().cloned().fold(0.0, f64::max);
    let mut action = AllocationAction::zeros(cfg.k_max);
    for k in 0..k_e {
        let slice = action.user_slice_mut(k);
        slice[0] = 1.0;
        slice[1] = 1.0;
        slice[2] = 1.0;
        slice[3] = if bits_max > 0.0 { bits[k] / bits_max } else { 1.0 };
        slice[4] = if cycles_max > 0.0 { cycles[k] / cycles_max } else { 1.0 };
    }
    action
}

/// Snap every active coordinate to the nearest lattice value.
fn snap_to_lattice(action: &mut AllocationAction, k_e: usize) {
    for v in action.values.iter_mut().take(AllocationAction::PER_USER * k_e) {
        *v = HILLCLIMB_LATTICE
            .iter()
            .copied()
            .min_by(|a, b| (*a - *v).abs().partial_cmp(&(*b - *v).abs()).unwrap())
            .unwrap();
    }
}

/// Greedy coordinate search on the counterfactual one-step reward: start
/// from the lattice-snapped demand-proportional action, propose `iters`
/// single-coordinate lattice values, and keep strict improvements.
pub fn hillclimb_policy<R: Rng>(env: &MecEnv, iters: usize, rng: &mut R) -> Result<AllocationAction> {
    let k_e = env.k_e();
    let mut best = demand_proportional_policy(env.state(), &env.spec().profiles, env.cfg());
    snap_to_lattice(&mut best, k_e);
    let mut best_reward = env.peek_reward(&best)?;
    let coords = AllocationAction::PER_USER * k_e;
    for _ in 0..iters {
        let coord = rng.random_range(0..coords);
        let value = HILLCLIMB_LATTICE[rng.random_range(0..HILLCLIMB_LATTICE.len())];
        let old = best.values[coord];
        if value == old {
            continue;
        }
        best.values[coord] = value;
        let r = env.peek_reward(&best)?;
        if r > best_reward {
            best_reward = r;
        } else {
            best.values[coord] = old;
        }
    }
    Ok(best)
}

/// Roll out one episode under a fixed behavior policy.
fn rollout_episode<R: Rng>(
    env: &mut MecEnv,
    policy: BehaviorPolicy,
    hillclimb_iters: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    let cfg = env.cfg().clone();
    let steps = cfg.episode_len;
    let k_e = env.k_e();
    let mut rewards = Vec::with_capacity(steps);
    let mut states = Array2::zeros((steps, cfg.raw_state_dim()));
    let mut actions = Array2::zeros((steps, cfg.action_dim()));
    for t in 0..steps {
        let raw = env.state().to_raw(cfg.k_max);
        let action = match policy {
            BehaviorPolicy::Random => random_policy(k_e, cfg.k_max, rng),
            BehaviorPolicy::DemandProportional => {
                demand_proportional_policy(env.state(), &env.spec().profiles, &cfg)
            }
            BehaviorPolicy::HillClimb => hillclimb_policy(env, hillclimb_iters, rng)?,
        };
        let (_, reward, _) = env.step(&action)?;
        states.row_mut(t).assign(&ndarray::ArrayView1::from(&raw));
        actions.row_mut(t).assign(&ndarray::ArrayView1::from(&action.values));
        rewards.push(reward);
    }
    Trajectory::new(rewards, states, actions)
}

/// Collect the offline dataset of one MEC server: `episodes_per_env`
/// trajectories per environment spec, with the behavior policy drawn per
/// episode from the mix. Environments run in parallel with independent
/// derived seeds; the shard is assembled in spec order, so output is
/// deterministic.
pub fn collect_dataset(
    cfg: &SystemConfig,
    mec_id: usize,
    specs: &[EnvSpec],
    mix: &PolicyMix,
    episodes_per_env: usize,
    hillclimb_iters: usize,
    seed: u64,
) -> Result<DatasetShard> {
    let per_env: Vec<(usize, Vec<Trajectory>)> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| -> Result<(usize, Vec<Trajectory>)> {
            let mut env = MecEnv::new(cfg.clone(), spec.clone())?;
            let mut trajectories = Vec::with_capacity(episodes_per_env);
            for ep in 0..episodes_per_env {
                let ep_seed = rng::mix(seed, &[rng::tag("episode"), mec_id as u64, i as u64, ep as u64]);
                let mut ep_rng = rng::stream(ep_seed, &[rng::tag("policy")]);
                let policy = choose_policy(mix, &mut ep_rng);
                env.reset(ep_seed)?;
                trajectories.push(rollout_episode(&mut env, policy, hillclimb_iters, &mut ep_rng)?);
            }
            Ok((i, trajectories))
        })
        .collect::<Result<_>>()?;

    let mut shard = DatasetShard { mec_id, envs: Vec::new() };
    let mut ordered = per_env;
    ordered.sort_by_key(|(i, _)| *i);
    for (i, trajectories) in ordered {
        shard.push(specs[i].env_id.clone(), trajectories);
    }
    Ok(shard)
}
