//! End-to-end drivers behind the CLI commands: environment planning,
//! dataset generation, federated training with checkpoint resume, and
//! evaluation/sweep report emission.
//!
//! Every run directory receives the resolved config snapshot (`config.toml`)
//! and a `run.json` with the seed and version string, so a run is fully
//! reproducible from its directory.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::behavior;
use crate::config::AppConfig;
use crate::container;
use crate::env::types::{GazeSource, UserLevel, UserProfile};
use crate::env::{EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, RolloutPolicy, SuiteSummary, SweepAxis, SweepRow};
use crate::fedavg;
use crate::model::{
    load_checkpoint_expecting, save_checkpoint, Checkpoint, ModelConfig, ModelParams,
};
use crate::rng;
use crate::trajectory::{load_shard, save_shard, DatasetShard};

/// Training environments (per MEC server) plus globally held-out
/// environments for zero-shot evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvPlan {
    pub train: Vec<EnvSpec>,
    pub holdout: Vec<EnvSpec>,
}

/// Every level assignment for `count` users, in a fixed enumeration order.
fn all_level_tuples(count: usize) -> Vec<Vec<UserLevel>> {
    let mut out = vec![Vec::new()];
    for _ in 0..count {
        let mut next = Vec::with_capacity(out.len() * 3);
        for prefix in &out {
            for level in UserLevel::ALL {
                let mut t = prefix.clone();
                t.push(level);
                next.push(t);
            }
        }
        out = next;
    }
    out
}

fn make_spec(
    env_id: EnvId,
    env_seed: u64,
    mec_id: usize,
    cfg: &AppConfig,
    gaze_files: &[PathBuf],
) -> EnvSpec {
    if gaze_files.is_empty() {
        return EnvSpec::synthetic(env_id, env_seed, mec_id, &cfg.system, cfg.gaze.step_sigma);
    }
    let mut r = rng::stream(env_seed, &[rng::tag("gaze-file")]);
    let profiles = env_id
        .levels
        .iter()
        .map(|&level| {
            let idx = rand::Rng::random_range(&mut r, 0..gaze_files.len());
            UserProfile::new(
                level,
                &cfg.system,
                GazeSource::File { path: gaze_files[idx].to_string_lossy().into_owned() },
            )
        })
        .collect();
    EnvSpec { env_id, seed: env_seed, mec_id, profiles }
}

fn gaze_file_pool(cfg: &AppConfig) -> Result<Vec<PathBuf>> {
    if cfg.gaze.source != "csv" {
        return Ok(Vec::new());
    }
    let dir = cfg
        .gaze
        .csv_dir
        .as_ref()
        .ok_or_else(|| Error::config("gaze.source = \"csv\" requires gaze.csv_dir"))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::config(format!("no gaze CSV files in {dir}")));
    }
    Ok(files)
}

/// Plan training and held-out environments. Per user count, a seeded
/// shuffle of all `3^count` level tuples reserves up to
/// `holdout_envs_per_count` tuples (never more than half the pool) for
/// evaluation; every server then cycles through its own ordering of the
/// remaining tuples. Counts with fewer tuples than requested environments
/// reuse tuples under fresh gaze seeds.
pub fn plan_environments(cfg: &AppConfig, seed: u64) -> Result<EnvPlan> {
    let gaze_files = gaze_file_pool(cfg)?;
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for &count in &cfg.data.user_counts {
        let mut tuples = all_level_tuples(count);
        let mut shuffle_rng = rng::stream(seed, &[rng::tag("tuples"), count as u64]);
        tuples.shuffle(&mut shuffle_rng);
        let reserve = cfg.data.holdout_envs_per_count.min(tuples.len() / 2);
        let (held, pool) = tuples.split_at(reserve);
        if pool.is_empty() {
            return Err(Error::config(format!(
                "user count {count}: no level tuples left for training"
            )));
        }
        for (i, tup) in held.iter().enumerate() {
            let env_seed = rng::mix(seed, &[rng::tag("holdout-env"), count as u64, i as u64]);
            let mec_id = holdout.len() % cfg.system.mec_servers;
            holdout.push(make_spec(EnvId::new(tup.clone()), env_seed, mec_id, cfg, &gaze_files));
        }
        for mec in 0..cfg.system.mec_servers {
            let mut order: Vec<&Vec<UserLevel>> = pool.iter().collect();
            let mut server_rng =
                rng::stream(seed, &[rng::tag("server-pool"), mec as u64, count as u64]);
            order.shuffle(&mut server_rng);
            for i in 0..cfg.data.train_envs_per_count {
                let tup = order[i % order.len()].clone();
                let env_seed =
                    rng::mix(seed, &[rng::tag("train-env"), mec as u64, count as u64, i as u64]);
                train.push(make_spec(EnvId::new(tup), env_seed, mec, cfg, &gaze_files));
            }
        }
    }
    Ok(EnvPlan { train, holdout })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardManifestEntry {
    pub mec_id: usize,
    pub file: String,
    pub sha256: String,
    pub env_instances: usize,
    pub env_groups: usize,
    pub trajectories: usize,
    pub steps: usize,
}

/// `manifest.json` written by `gen-data` and consumed by `eval`/`sweep`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub version: String,
    pub shards: Vec<ShardManifestEntry>,
    /// Training environment instances across all servers
    /// (`servers * user_counts * train_envs_per_count`).
    pub train_env_count: usize,
    pub holdout: Vec<EnvSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnvRewardSummary {
    mec_id: usize,
    env_id: String,
    trajectories: usize,
    ep_min: f64,
    ep_mean: f64,
    ep_max: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Snapshot the resolved config and run metadata into the run directory.
pub fn write_run_info(out_dir: &Path, cfg: &AppConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;
    #[derive(Serialize)]
    struct RunInfo<'a> {
        command: &'a str,
        seed: u64,
        version: &'a str,
    }
    write_json(
        &out_dir.join("run.json"),
        &RunInfo { command, seed: cfg.seed, version: env!("CARGO_PKG_VERSION") },
    )
}

/// Generate per-server dataset shards plus `manifest.json` and
/// `summary.json` (per-environment EP reward min/mean/max).
pub fn gen_data(cfg: &AppConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    write_run_info(out_dir, cfg, "gen-data")?;
    let plan = plan_environments(cfg, cfg.seed)?;
    let mut shards = Vec::new();
    let mut entries = Vec::new();
    let mut env_summaries = Vec::new();
    for mec in 0..cfg.system.mec_servers {
        let specs: Vec<EnvSpec> =
            plan.train.iter().filter(|s| s.mec_id == mec).cloned().collect();
        let shard = behavior::collect_dataset(
            &cfg.system,
            mec,
            &specs,
            &cfg.data.policy_mix,
            cfg.data.episodes_per_env,
            cfg.data.hillclimb_iters,
            rng::mix(cfg.seed, &[rng::tag("gen-data"), mec as u64]),
        )?;
        let file = format!("shard_{mec}.bin");
        let path = out_dir.join(&file);
        save_shard(&shard, &path)?;
        for g in &shard.envs {
            let eps: Vec<f64> = g.trajectories.iter().map(|t| t.ep_reward()).collect();
            env_summaries.push(EnvRewardSummary {
                mec_id: mec,
                env_id: g.env_id.to_string(),
                trajectories: eps.len(),
                ep_min: eps.iter().cloned().fold(f64::INFINITY, f64::min),
                ep_mean: eps.iter().sum::<f64>() / eps.len() as f64,
                ep_max: eps.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            });
        }
        entries.push(ShardManifestEntry {
            mec_id: mec,
            sha256: container::sha256_hex_of_file(&path)?,
            file,
            env_instances: specs.len(),
            env_groups: shard.envs.len(),
            trajectories: shard.total_trajectories(),
            steps: shard.total_steps(),
        });
        shards.push(shard);
    }
    let manifest = Manifest {
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        shards: entries,
        train_env_count: plan.train.len(),
        holdout: plan.holdout,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    write_json(&out_dir.join("summary.json"), &env_summaries)?;
    Ok(manifest)
}

pub fn read_manifest(data_dir: &Path) -> Result<Manifest> {
    let path = data_dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::Corrupt(format!("cannot read manifest {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Load all shards listed in a data directory's manifest, verifying file
/// hashes.
pub fn load_shards(data_dir: &Path) -> Result<Vec<DatasetShard>> {
    let manifest = read_manifest(data_dir)?;
    let mut shards = Vec::with_capacity(manifest.shards.len());
    for entry in &manifest.shards {
        let path = data_dir.join(&entry.file);
        let hash = container::sha256_hex_of_file(&path)?;
        if hash != entry.sha256 {
            return Err(Error::ChecksumMismatch(format!(
                "{}: manifest says {}, file hashes to {hash}",
                entry.file, entry.sha256
            )));
        }
        shards.push(load_shard(&path)?);
    }
    Ok(shards)
}

fn checkpoint_path(out_dir: &Path, round: usize) -> PathBuf {
    out_dir.join(format!("ckpt_round_{round:05}.bin"))
}

/// Latest `ckpt_round_*.bin` in a directory, if any.
fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = std::fs::read_dir(out_dir).ok()?;
    for e in entries.filter_map(|e| e.ok()) {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(num) = name.strip_prefix("ckpt_round_").and_then(|s| s.strip_suffix(".bin")) {
            if let Ok(round) = num.parse::<usize>() {
                if best.as_ref().is_none_or(|(b, _)| round > *b) {
                    best = Some((round, e.path()));
                }
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Outcome of a training run.
pub struct TrainArtifacts {
    pub final_checkpoint: PathBuf,
    pub rounds_run: usize,
}

/// Federated training driver: loads shards, resumes from the latest
/// checkpoint in `out_dir` when one exists, persists a checkpoint every
/// `checkpoint_interval` rounds and at the end, and appends one JSON line
/// per round to `round_log.jsonl`.
pub fn train(cfg: &AppConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    write_run_info(out_dir, cfg, "train")?;
    let shards = load_shards(data_dir)?;
    let model_cfg = ModelConfig::from_sections(&cfg.model, &cfg.system);
    model_cfg.validate()?;

    let (initial, start_round) = match latest_checkpoint(out_dir) {
        Some(path) => {
            let ckpt = load_checkpoint_expecting(&path, &model_cfg)?;
            (ckpt.params, ckpt.round + 1)
        }
        None => (
            ModelParams::init(&model_cfg, rng::mix(cfg.seed, &[rng::tag("model-init")])),
            0,
        ),
    };

    let log_path = out_dir.join("round_log.jsonl");
    let mut log_file = std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    let interval = cfg.fl.checkpoint_interval.max(1);
    let rounds = cfg.fl.rounds;

    let outcome = fedavg::train_federated(
        &cfg.fl,
        initial.clone(),
        start_round,
        &shards,
        cfg.seed,
        |round, params, log| {
            use std::io::Write;
            writeln!(log_file, "{}", serde_json::to_string(log)?)?;
            if (round + 1) % interval == 0 || round + 1 == rounds {
                save_checkpoint(
                    &checkpoint_path(out_dir, round),
                    &Checkpoint { params: params.clone(), round, optimizer: None },
                )?;
            }
            Ok(())
        },
    )?;

    let final_path = out_dir.join("ckpt_final.bin");
    let (final_params, final_round) = if rounds == 0 || start_round >= rounds {
        (initial, start_round.saturating_sub(1))
    } else {
        (outcome.params, rounds - 1)
    };
    save_checkpoint(
        &final_path,
        &Checkpoint { params: final_params, round: final_round, optimizer: None },
    )?;
    Ok(TrainArtifacts { final_checkpoint: final_path, rounds_run: outcome.rounds.len() })
}

fn write_episode_csv(path: &Path, summary: &SuiteSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(e.to_string()))?;
    w.write_record(["env_id", "episode", "step", "reward", "rtg", "min_qoe", "hfqoe"])?;
    for ep in &summary.episodes {
        for s in &ep.steps {
            w.write_record(&[
                ep.env_id.clone(),
                s.episode.to_string(),
                s.step.to_string(),
                format!("{}", s.reward),
                format!("{}", s.rtg),
                format!("{}", s.min_qoe),
                format!("{}", s.hfqoe),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Evaluation driver: checks checkpoint/config compatibility, evaluates the
/// manifest's held-out environments, and writes `summary.json` plus
/// `episodes.csv`.
pub fn evaluate(
    cfg: &AppConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<SuiteSummary> {
    cfg.validate()?;
    write_run_info(out_dir, cfg, "eval")?;
    let model_cfg = ModelConfig::from_sections(&cfg.model, &cfg.system);
    let ckpt = load_checkpoint_expecting(checkpoint, &model_cfg)?;
    ckpt.params.cfg.check_against_system(&cfg.system)?;
    let manifest = read_manifest(data_dir)?;
    let mut specs = manifest.holdout;
    if specs.is_empty() {
        return Err(Error::invalid("manifest lists no held-out environments"));
    }
    if cfg.eval.max_envs > 0 && specs.len() > cfg.eval.max_envs {
        specs.truncate(cfg.eval.max_envs);
    }
    let opts = EvalOptions {
        episodes: cfg.eval.episodes,
        rtg_target: cfg.eval.rtg_target,
        horizon: cfg.eval.horizon,
        prompt_len: None,
        seed: cfg.seed,
    };
    let summary = eval::evaluate_suite(RolloutPolicy::Model(&ckpt.params), &cfg.system, &specs, &opts)?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    write_episode_csv(&out_dir.join("episodes.csv"), &summary)?;
    Ok(summary)
}

/// Sweep driver: one long-format CSV per swept axis.
pub fn run_sweep(
    cfg: &AppConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out_dir: &Path,
    axis: SweepAxis,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    write_run_info(out_dir, cfg, "sweep")?;
    let model_cfg = ModelConfig::from_sections(&cfg.model, &cfg.system);
    let ckpt = load_checkpoint_expecting(checkpoint, &model_cfg)?;
    let manifest = read_manifest(data_dir)?;
    let mut specs = manifest.holdout;
    if specs.is_empty() {
        return Err(Error::invalid("manifest lists no held-out environments"));
    }
    if cfg.eval.max_envs > 0 && specs.len() > cfg.eval.max_envs {
        specs.truncate(cfg.eval.max_envs);
    }
    let opts = EvalOptions {
        episodes: cfg.eval.episodes,
        rtg_target: cfg.eval.rtg_target,
        horizon: cfg.eval.horizon,
        prompt_len: None,
        seed: cfg.seed,
    };
    let rows = eval::sweep(&ckpt.params, &cfg.system, &specs, &opts, axis, grid)?;
    let name = format!("sweep_{}.csv", serde_json::to_string(&axis)?.trim_matches('"'));
    let mut w = csv::Writer::from_path(out_dir.join(name)).map_err(|e| Error::invalid(e.to_string()))?;
    w.write_record(["axis_value", "mec_id", "ma", "ep", "min_qoe"])?;
    for r in &rows {
        w.write_record(&[
            format!("{}", r.axis_value),
            r.mec_id.to_string(),
            format!("{}", r.ma),
            format!("{}", r.ep),
            format!("{}", r.min_qoe),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
