//! Federated orchestration: per-client local training, sample-weighted
//! aggregation, and the learning-rate schedule.
//!
//! Clients train in parallel on disjoint parameter copies each round; the
//! aggregation barrier produces the next global model. Every random stream
//! is derived from `(seed, round, client, iteration)`, so an interrupted
//! run resumed from a checkpoint reproduces the uninterrupted result.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::FlConfig;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, AdamW, ModelConfig, ModelParams, SequenceSample};
use crate::rng;
use crate::trajectory::{
    rewards_to_go, sample_training_prompt, top1, augment_state, DatasetShard, EnvGroup, Prompt,
    Trajectory,
};

/// Learning rate at `(round, step_in_round)`: exponential per-round decay
/// with a linear warm-up over the first `warmup_steps` of each round.
pub fn lr_at(round: usize, step_in_round: usize, fl: &FlConfig) -> f64 {
    let base = fl.lr * (1.0 - fl.lr_decay_per_round).powi(round as i32);
    if fl.warmup_steps == 0 {
        return base;
    }
    let factor = (step_in_round + 1).min(fl.warmup_steps) as f64 / fl.warmup_steps as f64;
    base * factor
}

/// Elementwise weighted mean of parameter sets. Weights must sum to 1
/// within 1e-12 and shapes must agree.
pub fn aggregate(locals: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if locals.is_empty() || locals.len() != weights.len() {
        return Err(Error::invalid("aggregate needs one weight per parameter set"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("aggregation weights sum to {sum}, expected 1")));
    }
    let cfg = &locals[0].cfg;
    for l in locals {
        if &l.cfg != cfg {
            return Err(Error::ShapeMismatch("parameter sets have different architectures".into()));
        }
    }
    let mut acc = vec![0.0; locals[0].flat_len()];
    for (l, &w) in locals.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(l.to_flat()) {
            *a += w * v;
        }
    }
    let mut out = ModelParams::zeros(cfg);
    out.set_from_flat(&acc)?;
    Ok(out)
}

/// Assemble one training sequence: the shared prompt followed by a
/// contiguous `L_tr` window of a trajectory; targets are the actions at
/// every step (prompt and window alike).
pub fn assemble_training_sample(
    prompt: &Prompt,
    traj: &Trajectory,
    start: usize,
    l_tr: usize,
    group: &EnvGroup,
    k_max: usize,
    user_info: bool,
) -> Result<SequenceSample> {
    if start + l_tr > traj.len() {
        return Err(Error::invalid("training window exceeds trajectory"));
    }
    let levels: &[crate::env::types::UserLevel] = if user_info { group.levels() } else { &[] };
    let rtg_full = rewards_to_go(&traj.rewards)?;
    let n = prompt.len() + l_tr;
    let state_dim = traj.states.ncols() + k_max;
    let action_dim = traj.actions.ncols();
    let mut rtg = Vec::with_capacity(n);
    let mut states = Array2::zeros((n, state_dim));
    let mut actions = Array2::zeros((n, action_dim));
    let mut timesteps = Vec::with_capacity(n);
    for i in 0..prompt.len() {
        rtg.push(prompt.rtg[i]);
        states.row_mut(i).assign(&prompt.states.row(i));
        actions.row_mut(i).assign(&prompt.actions.row(i));
        timesteps.push(prompt.timesteps[i]);
    }
    for w in 0..l_tr {
        let i = prompt.len() + w;
        let t = start + w;
        rtg.push(rtg_full[t]);
        let aug = augment_state(traj.states.row(t).as_slice().unwrap(), levels, k_max);
        states.row_mut(i).assign(&ndarray::ArrayView1::from(&aug));
        actions.row_mut(i).assign(&traj.actions.row(t));
        timesteps.push(t);
    }
    let targets = actions.clone();
    Ok(SequenceSample { rtg, states, actions, timesteps, targets, loss_mask: vec![true; n] })
}

/// Result of one client's local pass.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// Mean training loss over the local iterations (0 when none ran).
    pub mean_loss: f64,
    pub iters_run: usize,
}

fn eligible_envs<'a>(shard: &'a DatasetShard, cfg: &ModelConfig) -> Result<Vec<&'a EnvGroup>> {
    let min_len = cfg.context_len.max(cfg.prompt_len);
    let mut eligible = Vec::new();
    let mut skipped = 0usize;
    for g in &shard.envs {
        if g.trajectories.iter().any(|t| t.len() >= min_len) {
            eligible.push(g);
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        eprintln!(
            "warning: MEC {} skipped {skipped} environment(s) with all trajectories shorter than {min_len}",
            shard.mec_id
        );
    }
    if eligible.is_empty() {
        return Err(Error::invalid(format!(
            "MEC {}: no environment has a trajectory of length >= {min_len}",
            shard.mec_id
        )));
    }
    Ok(eligible)
}

/// One round of local training (Algorithm: per iteration, sample a user
/// environment, draw the top-1 prompt segment, build a batch of
/// prompt+window sequences from that environment, and take one optimizer
/// step).
pub fn local_training(
    global: &ModelParams,
    shard: &DatasetShard,
    fl: &FlConfig,
    round: usize,
    seed: u64,
) -> Result<LocalOutcome> {
    let cfg = global.cfg.clone();
    let k_max = cfg.action_dim / 5;
    let total_iters = fl.local_epochs * fl.local_iters;
    if total_iters == 0 {
        return Ok(LocalOutcome { params: global.clone(), mean_loss: 0.0, iters_run: 0 });
    }
    let eligible = eligible_envs(shard, &cfg)?;
    let mut params = global.clone();
    let mut opt = AdamW::new(params.flat_len(), fl.weight_decay);
    let mut loss_sum = 0.0;
    for m in 0..total_iters {
        let mut it_rng = rng::stream(seed, &[rng::tag("iter"), round as u64, m as u64]);
        let group = eligible[it_rng.random_range(0..eligible.len())];
        let best = top1(&group.trajectories)?;
        let prompt_levels: &[crate::env::types::UserLevel] =
            if cfg.user_info { group.levels() } else { &[] };
        let prompt = if cfg.prompt_len > 0 && best.len() >= cfg.prompt_len {
            sample_training_prompt(best, prompt_levels, k_max, cfg.prompt_len, &mut it_rng)?
        } else {
            Prompt::empty(best.states.ncols() + k_max, cfg.action_dim)
        };
        let windowable: Vec<&Trajectory> =
            group.trajectories.iter().filter(|t| t.len() >= cfg.context_len).collect();
        if windowable.is_empty() {
            return Err(Error::invalid("eligible environment lost its long trajectories"));
        }
        let mut batch = Vec::with_capacity(fl.batch_size);
        for _ in 0..fl.batch_size {
            let traj = windowable[it_rng.random_range(0..windowable.len())];
            let start = it_rng.random_range(0..=traj.len() - cfg.context_len);
            batch.push(assemble_training_sample(
                &prompt,
                traj,
                start,
                cfg.context_len,
                group,
                k_max,
                cfg.user_info,
            )?);
        }
        let dropout_seed = rng::mix(seed, &[rng::tag("dropout"), round as u64, m as u64]);
        let out = loss_and_grad(&params, &batch, Some(dropout_seed))?;
        loss_sum += out.loss;
        let lr = lr_at(round, m, fl);
        let mut flat = params.to_flat();
        opt.step(&mut flat, &out.grads.to_flat(), lr);
        params.set_from_flat(&flat)?;
    }
    Ok(LocalOutcome { params, mean_loss: loss_sum / total_iters as f64, iters_run: total_iters })
}

/// One line of the round log (serialized as JSON lines by the CLI).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub per_client_loss: Vec<f64>,
    pub global_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

/// Full training outcome.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub rounds: Vec<RoundLog>,
}

/// Run `rounds` of broadcast -> parallel local training -> weighted
/// aggregation, starting from `initial` (a fresh init or a resumed
/// checkpoint at `start_round`). `on_round` fires after every aggregation
/// with the new global model; any client failure aborts the round.
pub fn train_federated(
    fl: &FlConfig,
    initial: ModelParams,
    start_round: usize,
    shards: &[DatasetShard],
    seed: u64,
    mut on_round: impl FnMut(usize, &ModelParams, &RoundLog) -> Result<()>,
) -> Result<TrainOutcome> {
    if shards.is_empty() {
        return Err(Error::invalid("no dataset shards"));
    }
    if shards.len() != fl.clients {
        return Err(Error::invalid(format!(
            "config expects {} clients but {} shards are present",
            fl.clients,
            shards.len()
        )));
    }
    let n_total: usize = shards.iter().map(|s| s.total_steps()).sum();
    if n_total == 0 {
        return Err(Error::invalid("shards contain no steps"));
    }
    let weights: Vec<f64> =
        shards.iter().map(|s| s.total_steps() as f64 / n_total as f64).collect();

    let mut global = initial;
    let mut rounds = Vec::new();
    for round in start_round..fl.rounds {
        let started = std::time::Instant::now();
        let locals: Vec<LocalOutcome> = shards
            .par_iter()
            .enumerate()
            .map(|(e, shard)| {
                let client_seed = rng::mix(seed, &[rng::tag("client"), e as u64]);
                local_training(&global, shard, fl, round, client_seed)
            })
            .collect::<Result<_>>()?;
        let local_params: Vec<ModelParams> = locals.iter().map(|l| l.params.clone()).collect();
        global = aggregate(&local_params, &weights)?;
        let per_client_loss: Vec<f64> = locals.iter().map(|l| l.mean_loss).collect();
        let global_loss: f64 =
            per_client_loss.iter().zip(&weights).map(|(l, w)| l * w).sum();
        let log = RoundLog {
            round,
            per_client_loss,
            global_loss,
            lr: lr_at(round, fl.warmup_steps, fl),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        on_round(round, &global, &log)?;
        rounds.push(log);
    }
    Ok(TrainOutcome { params: global, rounds })
}
