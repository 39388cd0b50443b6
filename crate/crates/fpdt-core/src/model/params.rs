//! Parameter containers, initialization, flat views, and checkpoint I/O.

use ndarray::Array2;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::container::{self, NamedArray, KIND_CHECKPOINT};
use crate::error::{Error, Result};
use crate::rng;

use super::adamw::AdamW;
use super::ModelConfig;

/// A linear map `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearP {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl LinearP {
    fn zeros(inp: usize, out: usize) -> Self {
        Self { w: Array2::zeros((inp, out)), b: Array2::zeros((1, out)) }
    }
}

/// Layer-norm affine parameters, both `[1, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormP {
    pub g: Array2<f64>,
    pub b: Array2<f64>,
}

impl LayerNormP {
    fn identity(d: usize) -> Self {
        Self { g: Array2::ones((1, d)), b: Array2::zeros((1, d)) }
    }

    fn zeros(d: usize) -> Self {
        Self { g: Array2::zeros((1, d)), b: Array2::zeros((1, d)) }
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockP {
    pub ln1: LayerNormP,
    pub wq: LinearP,
    pub wk: LinearP,
    pub wv: LinearP,
    pub wo: LinearP,
    pub ln2: LayerNormP,
    pub fc1: LinearP,
    pub fc2: LinearP,
}

/// Full parameter set. Gradients reuse this type (a zeroed copy that
/// backward accumulates into).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub embed_rtg: LinearP,
    pub embed_state: LinearP,
    pub embed_action: LinearP,
    /// `[max_timestep, d]` additive timestep table.
    pub timestep: Array2<f64>,
    pub embed_ln: LayerNormP,
    pub blocks: Vec<BlockP>,
    pub ln_f: LayerNormP,
    pub head: LinearP,
}

impl ModelParams {
    /// All-zero parameters (gradient accumulators, checkpoint shells).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let ff = cfg.ff_dim();
        let blocks = (0..cfg.layers)
            .map(|_| BlockP {
                ln1: LayerNormP::zeros(d),
                wq: LinearP::zeros(d, d),
                wk: LinearP::zeros(d, d),
                wv: LinearP::zeros(d, d),
                wo: LinearP::zeros(d, d),
                ln2: LayerNormP::zeros(d),
                fc1: LinearP::zeros(d, ff),
                fc2: LinearP::zeros(ff, d),
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            embed_rtg: LinearP::zeros(cfg.rtg_dim, d),
            embed_state: LinearP::zeros(cfg.state_dim, d),
            embed_action: LinearP::zeros(cfg.action_dim, d),
            timestep: Array2::zeros((cfg.max_timestep, d)),
            embed_ln: LayerNormP::zeros(d),
            blocks,
            ln_f: LayerNormP::zeros(d),
            head: LinearP::zeros(d, cfg.action_dim),
        }
    }

    /// Gaussian weights (std `init_std`), zero biases, identity layer norms.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut r = rng::stream(seed, &[rng::tag("model-init")]);
        let normal = Normal::new(0.0, cfg.init_std).expect("positive std");
        let mut fill = |a: &mut Array2<f64>| {
            for v in a.iter_mut() {
                *v = normal.sample(&mut r);
            }
        };
        fill(&mut p.embed_rtg.w);
        fill(&mut p.embed_state.w);
        fill(&mut p.embed_action.w);
        fill(&mut p.timestep);
        for b in &mut p.blocks {
            fill(&mut b.wq.w);
            fill(&mut b.wk.w);
            fill(&mut b.wv.w);
            fill(&mut b.wo.w);
            fill(&mut b.fc1.w);
            fill(&mut b.fc2.w);
        }
        fill(&mut p.head.w);
        p.embed_ln = LayerNormP::identity(cfg.embed_dim);
        for b in &mut p.blocks {
            b.ln1 = LayerNormP::identity(cfg.embed_dim);
            b.ln2 = LayerNormP::identity(cfg.embed_dim);
        }
        p.ln_f = LayerNormP::identity(cfg.embed_dim);
        p
    }

    /// Canonical tensor ordering; the single source of truth for flat
    /// views, checkpoints, aggregation, and gradient grouping.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("embed_rtg/w".into(), &self.embed_rtg.w),
            ("embed_rtg/b".into(), &self.embed_rtg.b),
            ("embed_state/w".into(), &self.embed_state.w),
            ("embed_state/b".into(), &self.embed_state.b),
            ("embed_action/w".into(), &self.embed_action.w),
            ("embed_action/b".into(), &self.embed_action.b),
            ("timestep".into(), &self.timestep),
            ("embed_ln/g".into(), &self.embed_ln.g),
            ("embed_ln/b".into(), &self.embed_ln.b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}/ln1/g"), &b.ln1.g));
            out.push((format!("block{i}/ln1/b"), &b.ln1.b));
            out.push((format!("block{i}/attn/wq/w"), &b.wq.w));
            out.push((format!("block{i}/attn/wq/b"), &b.wq.b));
            out.push((format!("block{i}/attn/wk/w"), &b.wk.w));
            out.push((format!("block{i}/attn/wk/b"), &b.wk.b));
            out.push((format!("block{i}/attn/wv/w"), &b.wv.w));
            out.push((format!("block{i}/attn/wv/b"), &b.wv.b));
            out.push((format!("block{i}/attn/wo/w"), &b.wo.w));
            out.push((format!("block{i}/attn/wo/b"), &b.wo.b));
            out.push((format!("block{i}/ln2/g"), &b.ln2.g));
            out.push((format!("block{i}/ln2/b"), &b.ln2.b));
            out.push((format!("block{i}/mlp/fc1/w"), &b.fc1.w));
            out.push((format!("block{i}/mlp/fc1/b"), &b.fc1.b));
            out.push((format!("block{i}/mlp/fc2/w"), &b.fc2.w));
            out.push((format!("block{i}/mlp/fc2/b"), &b.fc2.b));
        }
        out.push(("ln_f/g".into(), &self.ln_f.g));
        out.push(("ln_f/b".into(), &self.ln_f.b));
        out.push(("head/w".into(), &self.head.w));
        out.push(("head/b".into(), &self.head.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("embed_rtg/w".into(), &mut self.embed_rtg.w),
            ("embed_rtg/b".into(), &mut self.embed_rtg.b),
            ("embed_state/w".into(), &mut self.embed_state.w),
            ("embed_state/b".into(), &mut self.embed_state.b),
            ("embed_action/w".into(), &mut self.embed_action.w),
            ("embed_action/b".into(), &mut self.embed_action.b),
            ("timestep".into(), &mut self.timestep),
            ("embed_ln/g".into(), &mut self.embed_ln.g),
            ("embed_ln/b".into(), &mut self.embed_ln.b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}/ln1/g"), &mut b.ln1.g));
            out.push((format!("block{i}/ln1/b"), &mut b.ln1.b));
            out.push((format!("block{i}/attn/wq/w"), &mut b.wq.w));
            out.push((format!("block{i}/attn/wq/b"), &mut b.wq.b));
            out.push((format!("block{i}/attn/wk/w"), &mut b.wk.w));
            out.push((format!("block{i}/attn/wk/b"), &mut b.wk.b));
            out.push((format!("block{i}/attn/wv/w"), &mut b.wv.w));
            out.push((format!("block{i}/attn/wv/b"), &mut b.wv.b));
            out.push((format!("block{i}/attn/wo/w"), &mut b.wo.w));
            out.push((format!("block{i}/attn/wo/b"), &mut b.wo.b));
            out.push((format!("block{i}/ln2/g"), &mut b.ln2.g));
            out.push((format!("block{i}/ln2/b"), &mut b.ln2.b));
            out.push((format!("block{i}/mlp/fc1/w"), &mut b.fc1.w));
            out.push((format!("block{i}/mlp/fc1/b"), &mut b.fc1.b));
            out.push((format!("block{i}/mlp/fc2/w"), &mut b.fc2.w));
            out.push((format!("block{i}/mlp/fc2/b"), &mut b.fc2.b));
        }
        out.push(("ln_f/g".into(), &mut self.ln_f.g));
        out.push(("ln_f/b".into(), &mut self.ln_f.b));
        out.push(("head/w".into(), &mut self.head.w));
        out.push(("head/b".into(), &mut self.head.b));
        out
    }

    pub fn flat_len(&self) -> usize {
        self.tensors().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (_, a) in self.tensors() {
            out.extend(a.iter());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut off = 0;
        for (_, a) in self.tensors_mut() {
            let n = a.len();
            for (dst, src) in a.iter_mut().zip(&flat[off..off + n]) {
                *dst = *src;
            }
            off += n;
        }
        Ok(())
    }

    /// `self += other` elementwise (gradient accumulation).
    pub fn add_assign(&mut self, other: &ModelParams) {
        let a = self.tensors_mut();
        let b = other.tensors();
        for ((_, x), (_, y)) in a.into_iter().zip(b) {
            *x += y;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

/// A checkpoint: parameters, optional optimizer state, and the FL round the
/// parameters were produced by.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub round: usize,
    pub optimizer: Option<AdamW>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    round: usize,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut arrays: Vec<NamedArray> = ckpt
        .params
        .tensors()
        .into_iter()
        .map(|(name, a)| NamedArray::new(name, vec![a.nrows(), a.ncols()], a.iter().copied().collect()))
        .collect();
    let optimizer = ckpt.optimizer.as_ref().map(|o| {
        arrays.push(NamedArray::new("opt/m", vec![o.m.len()], o.m.clone()));
        arrays.push(NamedArray::new("opt/v", vec![o.v.len()], o.v.clone()));
        OptimizerMeta {
            step: o.step_count(),
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        }
    });
    let meta = CheckpointMeta { model: ckpt.params.cfg.clone(), round: ckpt.round, optimizer };
    container::write_file(path, KIND_CHECKPOINT, &meta, &arrays)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (meta, arrays): (CheckpointMeta, Vec<NamedArray>) =
        container::read_file(path, KIND_CHECKPOINT)?;
    meta.model.validate()?;
    let mut params = ModelParams::zeros(&meta.model);
    let mut by_name: std::collections::HashMap<String, NamedArray> =
        arrays.into_iter().map(|a| (a.name.clone(), a)).collect();
    for (name, t) in params.tensors_mut() {
        let a = by_name
            .remove(&name)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint missing tensor {name}")))?;
        if a.dims != [t.nrows(), t.ncols()] {
            return Err(Error::Corrupt(format!(
                "tensor {name}: stored dims {:?}, expected [{}, {}]",
                a.dims,
                t.nrows(),
                t.ncols()
            )));
        }
        for (dst, src) in t.iter_mut().zip(&a.data) {
            *dst = *src;
        }
    }
    let optimizer = match meta.optimizer {
        Some(om) => {
            let m = by_name
                .remove("opt/m")
                .ok_or_else(|| Error::Corrupt("checkpoint missing opt/m".into()))?;
            let v = by_name
                .remove("opt/v")
                .ok_or_else(|| Error::Corrupt("checkpoint missing opt/v".into()))?;
            Some(AdamW::restore(m.data, v.data, om.step, om.beta1, om.beta2, om.eps, om.weight_decay)?)
        }
        None => None,
    };
    if !by_name.is_empty() {
        let extra: Vec<_> = by_name.keys().cloned().collect();
        return Err(Error::Corrupt(format!("checkpoint has unexpected tensors: {extra:?}")));
    }
    Ok(Checkpoint { params, round: meta.round, optimizer })
}

/// Load a checkpoint and require its architecture to match `expected`;
/// mismatches report the expected and found dimensions.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.params.cfg != expected {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint model (state_dim={}, action_dim={}, embed={}, layers={}, L_tr={}, L_pr={}) \
             differs from configured model (state_dim={}, action_dim={}, embed={}, layers={}, L_tr={}, L_pr={})",
            ckpt.params.cfg.state_dim,
            ckpt.params.cfg.action_dim,
            ckpt.params.cfg.embed_dim,
            ckpt.params.cfg.layers,
            ckpt.params.cfg.context_len,
            ckpt.params.cfg.prompt_len,
            expected.state_dim,
            expected.action_dim,
            expected.embed_dim,
            expected.layers,
            expected.context_len,
            expected.prompt_len,
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            layers: 2,
            heads: 1,
            dropout: 0.0,
            state_dim: 26,
            action_dim: 10,
            rtg_dim: 1,
            max_timestep: 16,
            context_len: 4,
            prompt_len: 2,
            user_info: true,
            rtg_scale: 100.0,
            init_std: 0.02,
        }
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = tiny_cfg();
        let a = ModelParams::init(&cfg, 1);
        let b = ModelParams::init(&cfg, 1);
        let c = ModelParams::init(&cfg, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
        assert_eq!(a.embed_ln.g, Array2::<f64>::ones((1, 8)));
    }

    #[test]
    fn flat_roundtrip() {
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, 3);
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.flat_len());
        let mut q = ModelParams::zeros(&cfg);
        q.set_from_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.set_from_flat(&flat[1..]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, 5);
        let opt = AdamW::new(p.flat_len(), 1e-4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &Checkpoint { params: p.clone(), round: 7, optimizer: Some(opt) })
            .unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, p);
        assert_eq!(back.round, 7);
        assert!(back.optimizer.is_some());

        let mut other = cfg.clone();
        other.state_dim = 98;
        other.action_dim = 40;
        let err = load_checkpoint_expecting(&path, &other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("98") && msg.contains("40"), "{msg}");
        assert_eq!(err.exit_code(), 3);
    }
}
