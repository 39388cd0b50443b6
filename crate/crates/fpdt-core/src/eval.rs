//! Online-execution evaluation: prompted rollouts, suite statistics in the
//! mean (standard deviation) reporting shape, and parameter sweeps.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::{self, BehaviorPolicy};
use crate::config::{PolicyMix, SystemConfig};
use crate::env::types::AllocationAction;
use crate::env::{EnvSpec, MecEnv};
use crate::error::{Error, Result};
use crate::model::{predict_next_action, ContextStep, ModelParams};
use crate::rng;
use crate::trajectory::{augment_state, build_execution_prompt, Prompt, Trajectory};

/// What drives the action at each step of a rollout.
#[derive(Clone, Copy)]
pub enum RolloutPolicy<'a> {
    /// The pre-trained model, conditioned on the execution prompt (empty
    /// prompt for the no-prompt variant) and the running context.
    Model(&'a ModelParams),
    /// A scripted behavior policy (baseline evaluation).
    Behavior(BehaviorPolicy, usize),
    /// Behavior policy drawn per episode from the mix (baseline evaluation).
    Mix(&'a PolicyMix, usize),
    /// A fixed action every step (bypass-model oracle in tests).
    Constant(&'a AllocationAction),
}

/// Per-step record of an evaluation episode, one CSV row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeStepRecord {
    pub episode: usize,
    pub step: usize,
    pub reward: f64,
    /// Reward-to-go conditioning value used at this step.
    pub rtg: f64,
    pub min_qoe: f64,
    pub hfqoe: f64,
}

/// Outcome of one evaluation episode.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// Episode reward: the sum of step rewards.
    pub ep: f64,
    /// Mean step reward over the episode.
    pub ma: f64,
    /// Minimum over steps of the per-step minimum user QoE.
    pub min_qoe: f64,
    pub trajectory: Trajectory,
    pub steps: Vec<EpisodeStepRecord>,
}

/// Evaluation knobs shared by suites and sweeps.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub episodes: usize,
    pub rtg_target: f64,
    /// Steps per evaluation episode `T_te`.
    pub horizon: usize,
    /// Execution-prompt length override; `None` uses the trained length.
    pub prompt_len: Option<usize>,
    pub seed: u64,
}

/// Execute one episode (Algorithm: predict, step, subtract the reward from
/// the reward-to-go, append to the truncated context).
pub fn rollout(
    policy: RolloutPolicy<'_>,
    cfg: &SystemConfig,
    spec: &EnvSpec,
    opts: &EvalOptions,
    episode: usize,
) -> Result<RolloutResult> {
    if opts.horizon == 0 || opts.horizon > cfg.episode_len {
        return Err(Error::invalid(format!(
            "horizon {} outside [1, episode_len={}]",
            opts.horizon, cfg.episode_len
        )));
    }
    let mut env = MecEnv::new(cfg.clone(), spec.clone())?;
    let episode_seed =
        rng::mix(opts.seed, &[rng::tag("eval-episode"), spec.seed, episode as u64]);
    env.reset(episode_seed)?;
    let k_e = spec.k_e();
    let k_max = cfg.k_max;

    // Model-driven rollouts build the execution prompt from the initial
    // augmented state and keep a context window of the last L_tr steps.
    let mut context: Vec<ContextStep> = Vec::new();
    let mut prompt = Prompt::empty(cfg.state_dim(), cfg.action_dim());
    let mut context_cap = 1;
    let mut levels: &[crate::env::types::UserLevel] = &spec.env_id.levels;
    if let RolloutPolicy::Model(params) = policy {
        params.cfg.check_against_system(cfg)?;
        if !params.cfg.user_info {
            levels = &[];
        }
        let l_pr = opts.prompt_len.unwrap_or(params.cfg.prompt_len);
        let s0_aug = augment_state(&env.state().to_raw(k_max), levels, k_max);
        prompt = build_execution_prompt(opts.rtg_target, &s0_aug, k_e, k_max, l_pr)?;
        context_cap = params.cfg.context_len;
    }
    let mut policy_rng = rng::stream(episode_seed, &[rng::tag("eval-policy")]);
    let mix_choice = match policy {
        RolloutPolicy::Mix(mix, iters) => {
            Some((behavior::choose_policy(mix, &mut policy_rng), iters))
        }
        _ => None,
    };

    let mut rtg = opts.rtg_target;
    let mut rewards = Vec::with_capacity(opts.horizon);
    let mut states = ndarray::Array2::zeros((opts.horizon, cfg.raw_state_dim()));
    let mut actions_log = ndarray::Array2::zeros((opts.horizon, cfg.action_dim()));
    let mut steps = Vec::with_capacity(opts.horizon);
    let mut min_qoe = f64::INFINITY;

    for t in 0..opts.horizon {
        let raw = env.state().to_raw(k_max);
        let action = match policy {
            RolloutPolicy::Model(params) => {
                let aug = augment_state(&raw, levels, k_max);
                context.push(ContextStep { rtg, state: aug, action: None, timestep: t });
                if context.len() > context_cap {
                    let drop = context.len() - context_cap;
                    context.drain(..drop);
                }
                let mut values = predict_next_action(params, &prompt, &context)?;
                // Padding slots of inactive users stay zero by contract.
                for v in values.iter_mut().skip(5 * k_e) {
                    *v = 0.0;
                }
                AllocationAction::from_values(values)
            }
            RolloutPolicy::Behavior(kind, iters) => {
                behavior_action(&env, kind, iters, &mut policy_rng)?
            }
            RolloutPolicy::Mix(_, _) => {
                let (kind, iters) = mix_choice.unwrap();
                behavior_action(&env, kind, iters, &mut policy_rng)?
            }
            RolloutPolicy::Constant(a) => (*a).clone(),
        };
        let (_, reward, report) = env.step(&action)?;
        if let Some(last) = context.last_mut() {
            last.action = Some(action.values.clone());
        }
        let step_min_qoe =
            report.users.iter().map(|u| u.qoe).fold(f64::INFINITY, f64::min);
        min_qoe = min_qoe.min(step_min_qoe);
        steps.push(EpisodeStepRecord {
            episode,
            step: t,
            reward,
            rtg,
            min_qoe: step_min_qoe,
            hfqoe: report.hfqoe,
        });
        states.row_mut(t).assign(&ndarray::ArrayView1::from(&raw));
        actions_log.row_mut(t).assign(&ndarray::ArrayView1::from(&action.values));
        rewards.push(reward);
        rtg -= reward;
    }

    let ep: f64 = rewards.iter().sum();
    let ma = ep / opts.horizon as f64;
    let trajectory = Trajectory::new(rewards, states, actions_log)?;
    Ok(RolloutResult { ep, ma, min_qoe, trajectory, steps })
}

fn behavior_action<R: Rng>(
    env: &MecEnv,
    kind: BehaviorPolicy,
    hillclimb_iters: usize,
    rng: &mut R,
) -> Result<AllocationAction> {
    Ok(match kind {
        BehaviorPolicy::Random => behavior::random_policy(env.k_e(), env.cfg().k_max, rng),
        BehaviorPolicy::DemandProportional => {
            behavior::demand_proportional_policy(env.state(), &env.spec().profiles, env.cfg())
        }
        BehaviorPolicy::HillClimb => {
            let mut hc_rng = rng::stream(rng.random(), &[rng::tag("hc")]);
            behavior::hillclimb_policy(env, hillclimb_iters, &mut hc_rng)?
        }
    })
}

/// One evaluated episode in the suite table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub mec_id: usize,
    pub env_id: String,
    pub episode: usize,
    pub ep: f64,
    pub ma: f64,
    pub min_qoe: f64,
    /// Raw per-step records (CSV export only; omitted from summary JSON).
    #[serde(skip)]
    pub steps: Vec<EpisodeStepRecord>,
}

/// Mean (standard deviation) rows over all evaluated episodes, plus the raw
/// per-episode table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub episodes_per_env: usize,
    pub rtg_target: f64,
    pub ma_mean: f64,
    pub ma_std: f64,
    pub ep_mean: f64,
    pub ep_std: f64,
    pub min_qoe_mean: f64,
    pub min_qoe_std: f64,
    pub episodes: Vec<EpisodeStat>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluate `episodes` rollouts on every environment and aggregate.
/// Episodes run in parallel over (env, episode) pairs with derived seeds;
/// results are merged in index order.
pub fn evaluate_suite(
    policy: RolloutPolicy<'_>,
    cfg: &SystemConfig,
    specs: &[EnvSpec],
    opts: &EvalOptions,
) -> Result<SuiteSummary> {
    if specs.is_empty() {
        return Err(Error::invalid("no environments to evaluate"));
    }
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|s| (0..opts.episodes).map(move |e| (s, e)))
        .collect();
    let results: Vec<(usize, usize, RolloutResult)> = jobs
        .par_iter()
        .map(|&(s, e)| -> Result<(usize, usize, RolloutResult)> {
            let r = rollout(policy, cfg, &specs[s], opts, e)?;
            Ok((s, e, r))
        })
        .collect::<Result<_>>()?;
    let mut episodes = Vec::with_capacity(results.len());
    for (s, e, r) in results {
        episodes.push(EpisodeStat {
            mec_id: specs[s].mec_id,
            env_id: specs[s].env_id.to_string(),
            episode: e,
            ep: r.ep,
            ma: r.ma,
            min_qoe: r.min_qoe,
            steps: r.steps,
        });
    }
    let (ma_mean, ma_std) = mean_std(&episodes.iter().map(|x| x.ma).collect::<Vec<_>>());
    let (ep_mean, ep_std) = mean_std(&episodes.iter().map(|x| x.ep).collect::<Vec<_>>());
    let (mq_mean, mq_std) = mean_std(&episodes.iter().map(|x| x.min_qoe).collect::<Vec<_>>());
    Ok(SuiteSummary {
        episodes_per_env: opts.episodes,
        rtg_target: opts.rtg_target,
        ma_mean,
        ma_std,
        ep_mean,
        ep_std,
        min_qoe_mean: mq_mean,
        min_qoe_std: mq_std,
        episodes,
    })
}

/// Axes the sweep can vary while everything else stays fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    QoeTh,
    HfqoeTh,
    Bandwidth,
    Frequency,
    Rtg,
    PromptLen,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qoe_th" => Ok(SweepAxis::QoeTh),
            "hfqoe_th" => Ok(SweepAxis::HfqoeTh),
            "bandwidth" => Ok(SweepAxis::Bandwidth),
            "frequency" => Ok(SweepAxis::Frequency),
            "rtg" => Ok(SweepAxis::Rtg),
            "prompt_len" => Ok(SweepAxis::PromptLen),
            other => Err(Error::invalid(format!(
                "unknown sweep axis {other}; expected one of qoe_th, hfqoe_th, bandwidth, frequency, rtg, prompt_len"
            ))),
        }
    }
}

impl SweepAxis {
    /// The reference sweep grids.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepAxis::QoeTh => step_grid(0.90, 1.10, 0.05),
            SweepAxis::HfqoeTh => step_grid(0.70, 0.90, 0.05),
            SweepAxis::Bandwidth => step_grid(6e6, 14e6, 2e6),
            SweepAxis::Frequency => step_grid(11e9, 19e9, 2e9),
            SweepAxis::Rtg => step_grid(500.0, 1100.0, 50.0),
            SweepAxis::PromptLen => vec![3.0, 5.0, 7.0, 9.0],
        }
    }
}

fn step_grid(from: f64, to: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut v = from;
    while v <= to + step * 1e-9 {
        out.push(v);
        v += step;
    }
    out
}

/// Long-format sweep output: one row per (grid value, MEC server).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub mec_id: usize,
    pub ma: f64,
    pub ep: f64,
    pub min_qoe: f64,
}

/// Re-run the evaluation suite at every grid point with only the swept
/// parameter changed.
pub fn sweep(
    params: &ModelParams,
    cfg: &SystemConfig,
    specs: &[EnvSpec],
    opts: &EvalOptions,
    axis: SweepAxis,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let mut rows = Vec::new();
    for &value in grid {
        let mut sys = cfg.clone();
        let mut o = opts.clone();
        match axis {
            SweepAxis::QoeTh => sys.qoe_threshold = value,
            SweepAxis::HfqoeTh => sys.hfqoe_threshold = value,
            SweepAxis::Bandwidth => sys.total_bandwidth_hz = value,
            SweepAxis::Frequency => sys.total_cpu_hz = value,
            SweepAxis::Rtg => o.rtg_target = value,
            SweepAxis::PromptLen => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::invalid(format!("prompt_len grid value {value} not a non-negative integer")));
                }
                o.prompt_len = Some(value as usize);
            }
        }
        let summary = evaluate_suite(RolloutPolicy::Model(params), &sys, specs, &o)?;
        // Aggregate per MEC server.
        let mut mec_ids: Vec<usize> = summary.episodes.iter().map(|e| e.mec_id).collect();
        mec_ids.sort_unstable();
        mec_ids.dedup();
        for mec in mec_ids {
            let subset: Vec<&EpisodeStat> =
                summary.episodes.iter().filter(|e| e.mec_id == mec).collect();
            let ma = subset.iter().map(|e| e.ma).sum::<f64>() / subset.len() as f64;
            let ep = subset.iter().map(|e| e.ep).sum::<f64>() / subset.len() as f64;
            let mq = subset.iter().map(|e| e.min_qoe).sum::<f64>() / subset.len() as f64;
            rows.push(SweepRow { axis_value: value, mec_id: mec, ma, ep, min_qoe: mq });
        }
    }
    Ok(rows)
}
