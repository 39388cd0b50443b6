//! Trajectories, prompts, reward-to-go, state augmentation, and dataset
//! shard serialization.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::container::{self, NamedArray, KIND_SHARD};
use crate::env::types::UserLevel;
use crate::env::EnvId;
use crate::error::{Error, Result};

/// One recorded episode: `(R_t, S_t, A_t)` for contiguous timesteps from 0.
/// States are raw (un-augmented), zero-padded to `K_max` user slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rewards: Vec<f64>,
    /// `[len, raw_state_dim]`
    pub states: Array2<f64>,
    /// `[len, action_dim]`
    pub actions: Array2<f64>,
    ep_reward: f64,
}

impl Trajectory {
    pub fn new(rewards: Vec<f64>, states: Array2<f64>, actions: Array2<f64>) -> Result<Self> {
        let len = rewards.len();
        if len == 0 {
            return Err(Error::invalid("trajectory must be non-empty"));
        }
        if states.nrows() != len || actions.nrows() != len {
            return Err(Error::ShapeMismatch(format!(
                "trajectory arrays disagree: {} rewards, {} states, {} actions",
                len,
                states.nrows(),
                actions.nrows()
            )));
        }
        let ep_reward = rewards.iter().sum();
        Ok(Self { rewards, states, actions, ep_reward })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Episode reward, cached at construction.
    pub fn ep_reward(&self) -> f64 {
        self.ep_reward
    }
}

/// Suffix sums: `out[t] = sum_{t' >= t} rewards[t']`.
pub fn rewards_to_go(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::invalid("rewards_to_go needs a non-empty input"));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        acc += r;
        out[t] = acc;
    }
    Ok(out)
}

/// The trajectory with maximal episode reward; ties break to the lowest
/// index.
pub fn top1(trajs: &[Trajectory]) -> Result<&Trajectory> {
    if trajs.is_empty() {
        return Err(Error::invalid("top1 needs a non-empty trajectory list"));
    }
    let mut best = 0;
    for (i, t) in trajs.iter().enumerate().skip(1) {
        if t.ep_reward() > trajs[best].ep_reward() {
            best = i;
        }
    }
    Ok(&trajs[best])
}

/// Append the user-information vector `U` to a raw state: the level code of
/// each active user and zero for padding slots. Output length is
/// `raw.len() + k_max`.
pub fn augment_state(raw: &[f64], levels: &[UserLevel], k_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len() + k_max);
    out.extend_from_slice(raw);
    for k in 0..k_max {
        out.push(levels.get(k).map_or(0.0, |l| l.code()));
    }
    out
}

/// A length-`L_pr` trajectory segment used to condition the model:
/// per-step reward-to-go, augmented state, action, and timestep tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub rtg: Vec<f64>,
    /// `[L_pr, augmented_state_dim]`
    pub states: Array2<f64>,
    /// `[L_pr, action_dim]`
    pub actions: Array2<f64>,
    pub timesteps: Vec<usize>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.rtg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtg.is_empty()
    }

    /// An empty prompt (no-prompt model variant).
    pub fn empty(state_dim: usize, action_dim: usize) -> Self {
        Self {
            rtg: Vec::new(),
            states: Array2::zeros((0, state_dim)),
            actions: Array2::zeros((0, action_dim)),
            timesteps: Vec::new(),
        }
    }
}

/// Sample a contiguous training prompt from the top-1 trajectory: start
/// index `i ~ Uniform[0, L - L_pr)` (forced to 0 when `L == L_pr`),
/// reward-to-go computed over the full source trajectory, states augmented
/// with the environment's user information.
pub fn sample_training_prompt<R: Rng>(
    top: &Trajectory,
    levels: &[UserLevel],
    k_max: usize,
    l_pr: usize,
    rng: &mut R,
) -> Result<Prompt> {
    if l_pr == 0 {
        let aug_dim = top.states.ncols() + k_max;
        return Ok(Prompt::empty(aug_dim, top.actions.ncols()));
    }
    let len = top.len();
    if len < l_pr {
        return Err(Error::invalid(format!(
            "trajectory length {len} shorter than prompt length {l_pr}"
        )));
    }
    let upper = (len - l_pr).max(1);
    let start = rng.random_range(0..upper);
    let rtg_full = rewards_to_go(&top.rewards)?;
    let aug_dim = top.states.ncols() + k_max;
    let mut states = Array2::zeros((l_pr, aug_dim));
    let mut actions = Array2::zeros((l_pr, top.actions.ncols()));
    let mut rtg = Vec::with_capacity(l_pr);
    let mut timesteps = Vec::with_capacity(l_pr);
    for i in 0..l_pr {
        let t = start + i;
        let aug = augment_state(top.states.row(t).as_slice().unwrap(), levels, k_max);
        states.row_mut(i).assign(&ndarray::ArrayView1::from(&aug));
        actions.row_mut(i).assign(&top.actions.row(t));
        rtg.push(rtg_full[t]);
        timesteps.push(t);
    }
    Ok(Prompt { rtg, states, actions, timesteps })
}

/// Build the execution prompt: `L_pr` identical triples of the target
/// reward-to-go, the augmented initial state, and the user-preferred action
/// (all ratios and shares 1 for active users, 0 for padding). Timestep tags
/// are all 0.
pub fn build_execution_prompt(
    rtg_target: f64,
    s0_augmented: &[f64],
    k_e: usize,
    k_max: usize,
    l_pr: usize,
) -> Result<Prompt> {
    if k_e > k_max {
        return Err(Error::invalid(format!("k_e={k_e} exceeds k_max={k_max}")));
    }
    let action_dim = 5 * k_max;
    let mut preferred = vec![0.0; action_dim];
    preferred[..5 * k_e].fill(1.0);
    let mut states = Array2::zeros((l_pr, s0_augmented.len()));
    let mut actions = Array2::zeros((l_pr, action_dim));
    for i in 0..l_pr {
        states.row_mut(i).assign(&ndarray::ArrayView1::from(s0_augmented));
        actions.row_mut(i).assign(&ndarray::ArrayView1::from(&preferred));
    }
    Ok(Prompt { rtg: vec![rtg_target; l_pr], states, actions, timesteps: vec![0; l_pr] })
}

/// All trajectories of one user environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvGroup {
    pub env_id: EnvId,
    pub trajectories: Vec<Trajectory>,
}

impl EnvGroup {
    pub fn k_e(&self) -> usize {
        self.env_id.user_count()
    }

    pub fn levels(&self) -> &[UserLevel] {
        &self.env_id.levels
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }
}

/// One MEC server's offline dataset: trajectories grouped by environment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    pub mec_id: usize,
    pub envs: Vec<EnvGroup>,
}

impl DatasetShard {
    /// Total recorded steps; the FedAvg aggregation weight `n_e`.
    pub fn total_steps(&self) -> usize {
        self.envs.iter().map(|g| g.total_steps()).sum()
    }

    pub fn total_trajectories(&self) -> usize {
        self.envs.iter().map(|g| g.trajectories.len()).sum()
    }

    /// Merge trajectories into an existing group when the env id repeats.
    pub fn push(&mut self, env_id: EnvId, trajectories: Vec<Trajectory>) {
        if let Some(g) = self.envs.iter_mut().find(|g| g.env_id == env_id) {
            g.trajectories.extend(trajectories);
        } else {
            self.envs.push(EnvGroup { env_id, trajectories });
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ShardEnvMeta {
    env_id: String,
    lengths: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShardMeta {
    mec_id: usize,
    raw_state_dim: usize,
    action_dim: usize,
    envs: Vec<ShardEnvMeta>,
}

/// Write a shard in the binary container format (kind 1).
pub fn save_shard(shard: &DatasetShard, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    let (mut sdim, mut adim) = (0usize, 0usize);
    let mut envs_meta = Vec::with_capacity(shard.envs.len());
    for (i, g) in shard.envs.iter().enumerate() {
        let mut lengths = Vec::with_capacity(g.trajectories.len());
        for (j, t) in g.trajectories.iter().enumerate() {
            sdim = t.states.ncols();
            adim = t.actions.ncols();
            lengths.push(t.len());
            arrays.push(NamedArray::new(format!("e{i}/t{j}/r"), vec![t.len()], t.rewards.clone()));
            arrays.push(NamedArray::new(
                format!("e{i}/t{j}/s"),
                vec![t.len(), sdim],
                t.states.iter().copied().collect(),
            ));
            arrays.push(NamedArray::new(
                format!("e{i}/t{j}/a"),
                vec![t.len(), adim],
                t.actions.iter().copied().collect(),
            ));
        }
        envs_meta.push(ShardEnvMeta { env_id: g.env_id.to_string(), lengths });
    }
    let meta = ShardMeta {
        mec_id: shard.mec_id,
        raw_state_dim: sdim,
        action_dim: adim,
        envs: envs_meta,
    };
    container::write_file(path, KIND_SHARD, &meta, &arrays)
}

/// Read a shard back; checksum and shape failures surface as errors.
pub fn load_shard(path: &Path) -> Result<DatasetShard> {
    let (meta, arrays): (ShardMeta, Vec<NamedArray>) = container::read_file(path, KIND_SHARD)?;
    let mut lookup = std::collections::HashMap::new();
    for a in &arrays {
        lookup.insert(a.name.clone(), a);
    }
    let mut envs = Vec::with_capacity(meta.envs.len());
    for (i, em) in meta.envs.iter().enumerate() {
        let env_id = EnvId::parse(&em.env_id)?;
        let mut trajectories = Vec::with_capacity(em.lengths.len());
        for (j, &len) in em.lengths.iter().enumerate() {
            let get = |suffix: &str| -> Result<&NamedArray> {
                lookup
                    .get(&format!("e{i}/t{j}/{suffix}"))
                    .copied()
                    .ok_or_else(|| Error::Corrupt(format!("missing array e{i}/t{j}/{suffix}")))
            };
            let r = get("r")?;
            let s = get("s")?;
            let a = get("a")?;
            if r.dims != [len] || s.dims != [len, meta.raw_state_dim] || a.dims != [len, meta.action_dim]
            {
                return Err(Error::Corrupt(format!("array shapes inconsistent for e{i}/t{j}")));
            }
            let states = Array2::from_shape_vec((len, meta.raw_state_dim), s.data.clone())
                .map_err(|e| Error::Corrupt(e.to_string()))?;
            let actions = Array2::from_shape_vec((len, meta.action_dim), a.data.clone())
                .map_err(|e| Error::Corrupt(e.to_string()))?;
            trajectories.push(Trajectory::new(r.data.clone(), states, actions)?);
        }
        envs.push(EnvGroup { env_id, trajectories });
    }
    Ok(DatasetShard { mec_id: meta.mec_id, envs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn traj(rewards: Vec<f64>, sdim: usize, adim: usize, seed: u64) -> Trajectory {
        let len = rewards.len();
        let mut r = rng::stream(seed, &[rng::tag("traj")]);
        let states = Array2::from_shape_fn((len, sdim), |_| r.random::<f64>());
        let actions = Array2::from_shape_fn((len, adim), |_| r.random::<f64>());
        Trajectory::new(rewards, states, actions).unwrap()
    }

    #[test]
    fn rtg_examples() {
        assert_eq!(rewards_to_go(&[5.0]).unwrap(), vec![5.0]);
        assert_eq!(rewards_to_go(&[1.0, 2.0, 3.0]).unwrap(), vec![6.0, 5.0, 3.0]);
        assert!(rewards_to_go(&[]).is_err());
    }

    #[test]
    fn rtg_matches_bruteforce_suffix_sums() {
        let mut r = rng::stream(1, &[]);
        let rewards: Vec<f64> = (0..100).map(|_| r.random_range(-1.0..1.0)).collect();
        let fast = rewards_to_go(&rewards).unwrap();
        for t in 0..rewards.len() {
            let brute: f64 = rewards[t..].iter().sum();
            assert!((fast[t] - brute).abs() <= 1e-12 * brute.abs().max(1.0));
        }
        let total: f64 = rewards.iter().sum();
        assert!((fast[0] - total).abs() <= 1e-12 * total.abs().max(1.0));
        assert_eq!(*fast.last().unwrap(), *rewards.last().unwrap());
    }

    #[test]
    fn top1_stable_tiebreak_and_oracle() {
        let trajs = vec![
            traj(vec![3.0], 4, 2, 0),
            traj(vec![9.0], 4, 2, 1),
            traj(vec![9.0], 4, 2, 2),
        ];
        let best = top1(&trajs).unwrap();
        assert!(std::ptr::eq(best, &trajs[1]));
        assert!(top1(&[]).is_err());

        let mut r = rng::stream(7, &[]);
        let many: Vec<Trajectory> = (0..50)
            .map(|i| traj(vec![r.random_range(-5.0..5.0); 3], 4, 2, 100 + i))
            .collect();
        let got = top1(&many).unwrap();
        let argmax = many
            .iter()
            .enumerate()
            .fold(0usize, |b, (i, t)| if t.ep_reward() > many[b].ep_reward() { i } else { b });
        assert!(std::ptr::eq(got, &many[argmax]));
    }

    #[test]
    fn augment_appends_level_codes() {
        let raw = vec![1.0, 2.0];
        let all_premium = augment_state(&raw, &[UserLevel::Premium; 4], 4);
        assert_eq!(all_premium, vec![1.0, 2.0, 0.6, 0.6, 0.6, 0.6]);
        let padded = augment_state(&raw, &[UserLevel::Standard, UserLevel::Advanced], 4);
        assert_eq!(padded, vec![1.0, 2.0, 0.2, 0.4, 0.0, 0.0]);
        let none = augment_state(&raw, &[], 4);
        assert_eq!(none, vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn augment_is_injective_in_levels() {
        // Distinct level tuples always produce distinct U vectors.
        let raw = vec![0.0];
        let mut seen = std::collections::HashSet::new();
        for a in UserLevel::ALL {
            for b in UserLevel::ALL {
                let aug = augment_state(&raw, &[a, b], 3);
                let key: Vec<u64> = aug.iter().map(|v| v.to_bits()).collect();
                assert!(seen.insert(key), "collision for {a:?},{b:?}");
            }
        }
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn training_prompt_sampling() {
        let t = traj((0..20).map(|i| i as f64).collect(), 6, 4, 3);
        let levels = [UserLevel::Premium, UserLevel::Standard];
        let mut r = rng::stream(5, &[]);
        for _ in 0..100 {
            let p = sample_training_prompt(&t, &levels, 2, 5, &mut r).unwrap();
            assert_eq!(p.len(), 5);
            // Contiguity: timestep tags are consecutive and in range.
            let s = p.timesteps[0];
            assert!(s + 5 <= 20);
            assert!(p.timesteps.iter().enumerate().all(|(i, &tt)| tt == s + i));
            // Reward-to-go comes from the source trajectory's suffix sums.
            let rtg_full = rewards_to_go(&t.rewards).unwrap();
            for i in 0..5 {
                assert_eq!(p.rtg[i], rtg_full[s + i]);
            }
            // States carry the augmentation columns.
            assert_eq!(p.states.ncols(), 6 + 2);
            assert_eq!(p.states[[0, 6]], 0.6);
            assert_eq!(p.states[[0, 7]], 0.2);
        }
    }

    #[test]
    fn training_prompt_whole_trajectory_when_lengths_match() {
        let t = traj(vec![1.0, 2.0, 3.0], 4, 2, 9);
        let levels = [UserLevel::Advanced];
        let mut r = rng::stream(1, &[]);
        let p = sample_training_prompt(&t, &levels, 1, 3, &mut r).unwrap();
        assert_eq!(p.timesteps, vec![0, 1, 2]);
        let mut r2 = rng::stream(1, &[]);
        let p2 = sample_training_prompt(&t, &levels, 1, 3, &mut r2).unwrap();
        assert_eq!(p, p2);
        assert!(sample_training_prompt(&t, &levels, 1, 4, &mut r).is_err());
    }

    #[test]
    fn execution_prompt_layout() {
        let s0 = vec![0.5; 10];
        let p = build_execution_prompt(900.0, &s0, 2, 4, 5).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.rtg.iter().all(|&v| v == 900.0));
        assert!(p.timesteps.iter().all(|&t| t == 0));
        for i in 0..5 {
            // First 10 action entries are 1 (active users), the rest 0.
            for j in 0..20 {
                let expect = if j < 10 { 1.0 } else { 0.0 };
                assert_eq!(p.actions[[i, j]], expect);
            }
        }
        assert!(build_execution_prompt(900.0, &s0, 5, 4, 5).is_err());
    }

    #[test]
    fn shard_roundtrip_and_corruption() {
        let shard = DatasetShard {
            mec_id: 3,
            envs: vec![
                EnvGroup {
                    env_id: EnvId::new(vec![UserLevel::Premium, UserLevel::Standard]),
                    trajectories: vec![traj(vec![1.0, -0.5, 2.0], 24, 10, 0)],
                },
                EnvGroup {
                    env_id: EnvId::new(vec![UserLevel::Advanced]),
                    trajectories: vec![traj(vec![0.25; 4], 24, 10, 1), traj(vec![1.5; 2], 24, 10, 2)],
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shard.bin");
        save_shard(&shard, &path).unwrap();
        let back = load_shard(&path).unwrap();
        assert_eq!(shard, back);
        assert_eq!(back.total_steps(), 9);
        assert_eq!(back.total_trajectories(), 3);

        // Flip one byte: the checksum must catch it.
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        match load_shard(&path) {
            Err(Error::ChecksumMismatch(_)) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }
    }
}
