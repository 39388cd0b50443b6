//! Forward pass, exact backward pass, loss, and autoregressive prediction.
//!
//! Sequences interleave `(R_hat, S, A)` tokens per timestep, prompt steps
//! first. Every state token carries an action prediction through a sigmoid
//! head; training minimizes the MSE against target actions on masked
//! positions of both prompt and context.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::trajectory::Prompt;

use super::params::{LayerNormP, LinearP, ModelParams};

const LN_EPS: f64 = 1e-5;

/// One model input sequence of `n` timesteps (prompt + context).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub rtg: Vec<f64>,
    /// `[n, state_dim]` augmented states.
    pub states: Array2<f64>,
    /// `[n, action_dim]` input action tokens (zero placeholder allowed at a
    /// final pending step).
    pub actions: Array2<f64>,
    pub timesteps: Vec<usize>,
    /// `[n, action_dim]` regression targets per state token.
    pub targets: Array2<f64>,
    /// Which steps contribute to the loss.
    pub loss_mask: Vec<bool>,
}

impl SequenceSample {
    pub fn n_steps(&self) -> usize {
        self.rtg.len()
    }

    pub fn token_count(&self) -> usize {
        3 * self.n_steps()
    }

    pub fn validate(&self, cfg: &super::ModelConfig) -> Result<()> {
        let n = self.n_steps();
        if n == 0 {
            return Err(Error::invalid("sequence must contain at least one step"));
        }
        if self.states.nrows() != n
            || self.actions.nrows() != n
            || self.targets.nrows() != n
            || self.timesteps.len() != n
            || self.loss_mask.len() != n
        {
            return Err(Error::ShapeMismatch("sequence fields disagree on step count".into()));
        }
        if self.states.ncols() != cfg.state_dim {
            return Err(Error::ShapeMismatch(format!(
                "state tokens have {} features, model expects {}",
                self.states.ncols(),
                cfg.state_dim
            )));
        }
        if self.actions.ncols() != cfg.action_dim || self.targets.ncols() != cfg.action_dim {
            return Err(Error::ShapeMismatch(format!(
                "action tokens have {} features, model expects {}",
                self.actions.ncols(),
                cfg.action_dim
            )));
        }
        if let Some(&t) = self.timesteps.iter().find(|&&t| t >= cfg.max_timestep) {
            return Err(Error::invalid(format!(
                "timestep {t} outside embedding table of size {}",
                cfg.max_timestep
            )));
        }
        Ok(())
    }
}

/// One inference step handed to [`predict_next_action`]; the final step of
/// a context has no action yet.
#[derive(Debug, Clone)]
pub struct ContextStep {
    pub rtg: f64,
    pub state: Vec<f64>,
    pub action: Option<Vec<f64>>,
    pub timestep: usize,
}

/// Dropout behavior of a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum DropoutMode {
    /// Deterministic; no masks.
    Eval,
    /// Inverted dropout with masks drawn from the given seed.
    Train { seed: u64 },
}

// ---------------------------------------------------------------------------
// primitive layers
// ---------------------------------------------------------------------------

struct LnCache {
    x_hat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm_fwd(x: &Array2<f64>, p: &LayerNormP) -> (Array2<f64>, LnCache) {
    let n = x.nrows();
    let d = x.ncols() as f64;
    let mut x_hat = Array2::zeros(x.raw_dim());
    let mut rstd = Array1::zeros(n);
    let mut y = Array2::zeros(x.raw_dim());
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..x.ncols() {
            let xh = (x[[i, j]] - mean) * r;
            x_hat[[i, j]] = xh;
            y[[i, j]] = p.g[[0, j]] * xh + p.b[[0, j]];
        }
    }
    (y, LnCache { x_hat, rstd })
}

fn layer_norm_bwd(
    dy: &Array2<f64>,
    p: &LayerNormP,
    cache: &LnCache,
    dp: &mut LayerNormP,
) -> Array2<f64> {
    let n = dy.nrows();
    let d = dy.ncols();
    let df = d as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..n {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let g = dy[[i, j]] * p.g[[0, j]];
            m1 += g;
            m2 += g * cache.x_hat[[i, j]];
            dp.g[[0, j]] += dy[[i, j]] * cache.x_hat[[i, j]];
            dp.b[[0, j]] += dy[[i, j]];
        }
        m1 /= df;
        m2 /= df;
        let r = cache.rstd[i];
        for j in 0..d {
            let g = dy[[i, j]] * p.g[[0, j]];
            dx[[i, j]] = r * (g - m1 - cache.x_hat[[i, j]] * m2);
        }
    }
    dx
}

fn linear_fwd(x: &Array2<f64>, p: &LinearP) -> Array2<f64> {
    let mut y = x.dot(&p.w);
    y += &p.b;
    y
}

/// Accumulates weight gradients and returns the input gradient.
fn linear_bwd(x: &Array2<f64>, dy: &Array2<f64>, p: &LinearP, dp: &mut LinearP) -> Array2<f64> {
    dp.w += &x.t().dot(dy);
    let col_sums = dy.sum_axis(Axis(0));
    let mut db = dp.b.row_mut(0);
    db += &col_sums;
    dy.dot(&p.w.t())
}

fn relu_fwd(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Sample an inverted-dropout mask (entries 0 or 1/(1-p)).
fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - p;
    Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

/// Causal single-head attention: softmax over the scaled dot products of
/// each query with all keys at positions `<= i`, weighting the values.
/// Returns `(output, row-softmax probabilities)`.
pub fn causal_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    scale: f64,
) -> (Array2<f64>, Array2<f64>) {
    let n = q.nrows();
    let mut probs = Array2::zeros((n, n));
    for i in 0..n {
        let qi = q.row(i);
        let mut max = f64::NEG_INFINITY;
        let mut scores = vec![0.0; i + 1];
        for j in 0..=i {
            let s = qi.dot(&k.row(j)) * scale;
            scores[j] = s;
            if s > max {
                max = s;
            }
        }
        let mut denom = 0.0;
        for j in 0..=i {
            let e = (scores[j] - max).exp();
            scores[j] = e;
            denom += e;
        }
        for j in 0..=i {
            probs[[i, j]] = scores[j] / denom;
        }
    }
    (probs.dot(v), probs)
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    z: Array2<f64>,
    attn_resid_mask: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    f: Array2<f64>,
    mlp_resid_mask: Option<Array2<f64>>,
}

struct Cache {
    embed_ln: LnCache,
    emb_mask: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    h_states: Array2<f64>,
    preds: Array2<f64>,
}

/// Interleave `(R_hat, S, A)` token embeddings and add the timestep
/// embedding identically to all three tokens of a timestep. Prompt steps
/// come first in the sample. Output is `[3n, d]`, pre-normalization.
pub fn embed(params: &ModelParams, sample: &SequenceSample) -> Result<Array2<f64>> {
    let cfg = &params.cfg;
    sample.validate(cfg)?;
    let n = sample.n_steps();
    let d = cfg.embed_dim;
    let mut tokens = Array2::zeros((3 * n, d));
    for i in 0..n {
        let t_emb = params.timestep.row(sample.timesteps[i]);
        let rtg_in =
            Array2::from_shape_vec((1, 1), vec![sample.rtg[i] / cfg.rtg_scale]).unwrap();
        let rtg_e = linear_fwd(&rtg_in, &params.embed_rtg);
        let state_in = sample.states.row(i).insert_axis(Axis(0)).to_owned();
        let state_e = linear_fwd(&state_in, &params.embed_state);
        let act_in = sample.actions.row(i).insert_axis(Axis(0)).to_owned();
        let act_e = linear_fwd(&act_in, &params.embed_action);
        for j in 0..d {
            tokens[[3 * i, j]] = rtg_e[[0, j]] + t_emb[j];
            tokens[[3 * i + 1, j]] = state_e[[0, j]] + t_emb[j];
            tokens[[3 * i + 2, j]] = act_e[[0, j]] + t_emb[j];
        }
    }
    Ok(tokens)
}

fn forward_cached(
    params: &ModelParams,
    sample: &SequenceSample,
    mode: DropoutMode,
) -> Result<(Array2<f64>, Cache)> {
    let cfg = &params.cfg;
    let n = sample.n_steps();
    let d = cfg.embed_dim;
    let p_drop = cfg.dropout;
    let mut train_rng = match mode {
        DropoutMode::Train { seed } if p_drop > 0.0 => Some(rng::stream(seed, &[rng::tag("drop")])),
        _ => None,
    };

    let tokens_raw = embed(params, sample)?;
    let (mut x, embed_ln) = layer_norm_fwd(&tokens_raw, &params.embed_ln);
    let emb_mask = train_rng.as_mut().map(|r| dropout_mask((3 * n, d), p_drop, r));
    if let Some(m) = &emb_mask {
        x *= m;
    }

    let scale = 1.0 / (d as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.layers);
    for b in &params.blocks {
        let (h1, ln1) = layer_norm_fwd(&x, &b.ln1);
        let q = linear_fwd(&h1, &b.wq);
        let k = linear_fwd(&h1, &b.wk);
        let v = linear_fwd(&h1, &b.wv);
        let (z0, probs) = causal_attention(&q, &k, &v, scale);
        let (z, attn_mask) = match train_rng.as_mut() {
            Some(r) => {
                let m = dropout_mask((3 * n, 3 * n), p_drop, r);
                let masked = (&probs * &m).dot(&v);
                (masked, Some(m))
            }
            None => (z0, None),
        };
        let mut att = linear_fwd(&z, &b.wo);
        let attn_resid_mask = train_rng.as_mut().map(|r| dropout_mask((3 * n, d), p_drop, r));
        if let Some(m) = &attn_resid_mask {
            att *= m;
        }
        let x_mid = &x + &att;
        let (h2, ln2) = layer_norm_fwd(&x_mid, &b.ln2);
        let mut f = linear_fwd(&h2, &b.fc1);
        relu_fwd(&mut f);
        let mut y = linear_fwd(&f, &b.fc2);
        let mlp_resid_mask = train_rng.as_mut().map(|r| dropout_mask((3 * n, d), p_drop, r));
        if let Some(m) = &mlp_resid_mask {
            y *= m;
        }
        let x_out = &x_mid + &y;
        blocks.push(BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            attn_mask,
            z,
            attn_resid_mask,
            ln2,
            h2,
            f,
            mlp_resid_mask,
        });
        x = x_out;
    }

    let (h_full, ln_f) = layer_norm_fwd(&x, &params.ln_f);
    let mut h_states = Array2::zeros((n, d));
    for i in 0..n {
        h_states.row_mut(i).assign(&h_full.row(3 * i + 1));
    }
    let logits = linear_fwd(&h_states, &params.head);
    let preds = logits.mapv(|v| 1.0 / (1.0 + (-v).exp()));
    let cache = Cache { embed_ln, emb_mask, blocks, ln_f, h_states, preds: preds.clone() };
    Ok((preds, cache))
}

/// Action predictions, one per state token, each in (0, 1).
pub fn forward(
    params: &ModelParams,
    sample: &SequenceSample,
    mode: DropoutMode,
) -> Result<Array2<f64>> {
    Ok(forward_cached(params, sample, mode)?.0)
}

/// Output of a batched loss/gradient evaluation.
#[derive(Debug)]
pub struct ForwardOutput {
    pub loss: f64,
    pub grads: ModelParams,
}

/// Mean squared error over the masked action positions.
pub fn loss(preds: &Array2<f64>, targets: &Array2<f64>, mask: &[bool]) -> f64 {
    let masked = mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        return 0.0;
    }
    let denom = (masked * preds.ncols()) as f64;
    let mut acc = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for j in 0..preds.ncols() {
            let e = preds[[i, j]] - targets[[i, j]];
            acc += e * e;
        }
    }
    acc / denom
}

/// Backward for one sample; `dpred_scale` folds in the 1/batch factor.
fn backward_sample(
    params: &ModelParams,
    sample: &SequenceSample,
    cache: &Cache,
    dpred_scale: f64,
    grads: &mut ModelParams,
) {
    let cfg = &params.cfg;
    let n = sample.n_steps();
    let d = cfg.embed_dim;
    let masked = sample.loss_mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        return;
    }
    let denom = (masked * cfg.action_dim) as f64;

    // d loss / d logits through the sigmoid.
    let mut dlogits = Array2::zeros((n, cfg.action_dim));
    for i in 0..n {
        if !sample.loss_mask[i] {
            continue;
        }
        for j in 0..cfg.action_dim {
            let p = cache.preds[[i, j]];
            let dpred = dpred_scale * 2.0 * (p - sample.targets[[i, j]]) / denom;
            dlogits[[i, j]] = dpred * p * (1.0 - p);
        }
    }

    let dh_states = linear_bwd(&cache.h_states, &dlogits, &params.head, &mut grads.head);
    let mut dh_full = Array2::zeros((3 * n, d));
    for i in 0..n {
        dh_full.row_mut(3 * i + 1).assign(&dh_states.row(i));
    }

    let mut dx = layer_norm_bwd(&dh_full, &params.ln_f, &cache.ln_f, &mut grads.ln_f);

    let scale = 1.0 / (d as f64).sqrt();
    for gi in (0..params.blocks.len()).rev() {
        let b = &params.blocks[gi];
        let cb = &cache.blocks[gi];
        let gb = &mut grads.blocks[gi];

        // MLP sublayer.
        let mut dy = dx.clone();
        if let Some(m) = &cb.mlp_resid_mask {
            dy *= m;
        }
        let mut df = linear_bwd(&cb.f, &dy, &b.fc2, &mut gb.fc2);
        // ReLU derivative: 1 where the activation survived.
        for (dv, fv) in df.iter_mut().zip(cb.f.iter()) {
            if *fv <= 0.0 {
                *dv = 0.0;
            }
        }
        let dh2 = linear_bwd(&cb.h2, &df, &b.fc1, &mut gb.fc1);
        let dx_mid_from_ln2 = layer_norm_bwd(&dh2, &b.ln2, &cb.ln2, &mut gb.ln2);
        let dx_mid = &dx + &dx_mid_from_ln2;

        // Attention sublayer.
        let mut datt = dx_mid.clone();
        if let Some(m) = &cb.attn_resid_mask {
            datt *= m;
        }
        let dz = linear_bwd(&cb.z, &datt, &b.wo, &mut gb.wo);
        let dprobs_used = dz.dot(&cb.v.t());
        let probs_used = match &cb.attn_mask {
            Some(m) => &cb.probs * m,
            None => cb.probs.clone(),
        };
        let dv_mat = probs_used.t().dot(&dz);
        let dprobs = match &cb.attn_mask {
            Some(m) => &dprobs_used * m,
            None => dprobs_used,
        };
        // Softmax backward, row by row over the causal support.
        let nn = 3 * n;
        let mut dscores = Array2::zeros((nn, nn));
        for i in 0..nn {
            let mut dot = 0.0;
            for j in 0..=i {
                dot += dprobs[[i, j]] * cb.probs[[i, j]];
            }
            for j in 0..=i {
                dscores[[i, j]] = cb.probs[[i, j]] * (dprobs[[i, j]] - dot);
            }
        }
        let dq = dscores.dot(&cb.k).mapv(|v| v * scale);
        let dk = dscores.t().dot(&cb.q).mapv(|v| v * scale);
        let mut dh1 = linear_bwd(&cb.h1, &dq, &b.wq, &mut gb.wq);
        dh1 += &linear_bwd(&cb.h1, &dk, &b.wk, &mut gb.wk);
        dh1 += &linear_bwd(&cb.h1, &dv_mat, &b.wv, &mut gb.wv);
        let dx_from_ln1 = layer_norm_bwd(&dh1, &b.ln1, &cb.ln1, &mut gb.ln1);
        dx = &dx_mid + &dx_from_ln1;
    }

    // Embedding dropout and layer norm.
    if let Some(m) = &cache.emb_mask {
        dx *= m;
    }
    let dtokens = layer_norm_bwd(&dx, &params.embed_ln, &cache.embed_ln, &mut grads.embed_ln);

    // Token projections and the shared timestep table.
    for i in 0..n {
        let drtg = dtokens.row(3 * i).insert_axis(Axis(0)).to_owned();
        let dstate = dtokens.row(3 * i + 1).insert_axis(Axis(0)).to_owned();
        let dact = dtokens.row(3 * i + 2).insert_axis(Axis(0)).to_owned();
        let rtg_in =
            Array2::from_shape_vec((1, 1), vec![sample.rtg[i] / cfg.rtg_scale]).unwrap();
        linear_bwd(&rtg_in, &drtg, &params.embed_rtg, &mut grads.embed_rtg);
        let state_in = sample.states.row(i).insert_axis(Axis(0)).to_owned();
        linear_bwd(&state_in, &dstate, &params.embed_state, &mut grads.embed_state);
        let act_in = sample.actions.row(i).insert_axis(Axis(0)).to_owned();
        linear_bwd(&act_in, &dact, &params.embed_action, &mut grads.embed_action);
        let t = sample.timesteps[i];
        let mut row = grads.timestep.row_mut(t);
        row += &dtokens.row(3 * i);
        row += &dtokens.row(3 * i + 1);
        row += &dtokens.row(3 * i + 2);
    }
}

/// Batch loss (mean of per-sample MSEs) and exact gradients.
///
/// `dropout_seed = None` evaluates deterministically; with a seed, inverted
/// dropout masks are drawn per sample from derived streams, so results are
/// independent of thread scheduling.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[SequenceSample],
    dropout_seed: Option<u64>,
) -> Result<ForwardOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if !params.all_finite() {
        return Err(Error::invalid("non-finite parameters"));
    }
    let b = batch.len();
    let scale = 1.0 / b as f64;
    // Fixed-size chunks keep the reduction order independent of the number
    // of worker threads.
    let chunk = batch.len().div_ceil(8).max(1);
    let partials: Vec<Result<(f64, ModelParams)>> = {
        use rayon::prelude::*;
        batch
            .par_chunks(chunk)
            .enumerate()
            .map(|(ci, samples)| -> Result<(f64, ModelParams)> {
                let mut grads = ModelParams::zeros(&params.cfg);
                let mut loss_acc = 0.0;
                for (si, sample) in samples.iter().enumerate() {
                    let mode = match dropout_seed {
                        Some(seed) => DropoutMode::Train {
                            seed: rng::mix(seed, &[(ci * chunk + si) as u64]),
                        },
                        None => DropoutMode::Eval,
                    };
                    let (preds, cache) = forward_cached(params, sample, mode)?;
                    loss_acc += loss(&preds, &sample.targets, &sample.loss_mask);
                    backward_sample(params, sample, &cache, scale, &mut grads);
                }
                Ok((loss_acc, grads))
            })
            .collect()
    };
    let mut total_loss = 0.0;
    let mut grads = ModelParams::zeros(&params.cfg);
    for part in partials {
        let (l, g) = part?;
        total_loss += l;
        grads.add_assign(&g);
    }
    let total_loss = total_loss * scale;
    if !total_loss.is_finite() {
        return Err(Error::invalid(format!("non-finite loss {total_loss}")));
    }
    Ok(ForwardOutput { loss: total_loss, grads })
}

/// Assemble an inference sequence from a prompt and a context window whose
/// final step has no action yet (a zero placeholder token stands in).
pub fn build_inference_sample(
    cfg: &super::ModelConfig,
    prompt: &Prompt,
    context: &[ContextStep],
) -> Result<SequenceSample> {
    if context.is_empty() {
        return Err(Error::invalid("context must contain at least one step"));
    }
    let n = prompt.len() + context.len();
    let mut rtg = Vec::with_capacity(n);
    let mut states = Array2::zeros((n, cfg.state_dim));
    let mut actions = Array2::zeros((n, cfg.action_dim));
    let mut timesteps = Vec::with_capacity(n);
    for i in 0..prompt.len() {
        rtg.push(prompt.rtg[i]);
        states.row_mut(i).assign(&prompt.states.row(i));
        actions.row_mut(i).assign(&prompt.actions.row(i));
        timesteps.push(prompt.timesteps[i]);
    }
    for (c, step) in context.iter().enumerate() {
        let i = prompt.len() + c;
        rtg.push(step.rtg);
        states.row_mut(i).assign(&ArrayView1::from(&step.state[..]));
        if let Some(a) = &step.action {
            actions.row_mut(i).assign(&ArrayView1::from(&a[..]));
        }
        timesteps.push(step.timestep);
    }
    Ok(SequenceSample {
        rtg,
        states,
        actions,
        timesteps,
        targets: Array2::zeros((n, cfg.action_dim)),
        loss_mask: vec![false; n],
    })
}

/// Action prediction at the final (pending) state token. Deterministic:
/// dropout is disabled.
pub fn predict_next_action(
    params: &ModelParams,
    prompt: &Prompt,
    context: &[ContextStep],
) -> Result<Vec<f64>> {
    let sample = build_inference_sample(&params.cfg, prompt, context)?;
    let preds = forward(params, &sample, DropoutMode::Eval)?;
    let last = preds.row(sample.n_steps() - 1);
    if last.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite action prediction"));
    }
    Ok(last.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_cfg(state_dim: usize, action_dim: usize, embed: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: embed,
            layers,
            heads: 1,
            dropout: 0.1,
            state_dim,
            action_dim,
            rtg_dim: 1,
            max_timestep: 32,
            context_len: 4,
            prompt_len: 2,
            user_info: true,
            rtg_scale: 100.0,
            init_std: 0.05,
        }
    }

    fn random_sample(cfg: &ModelConfig, n: usize, seed: u64) -> SequenceSample {
        let mut r = rng::stream(seed, &[rng::tag("sample")]);
        SequenceSample {
            rtg: (0..n).map(|_| r.random_range(-2.0..2.0)).collect(),
            states: Array2::from_shape_fn((n, cfg.state_dim), |_| r.random_range(-1.0..1.0)),
            actions: Array2::from_shape_fn((n, cfg.action_dim), |_| r.random()),
            timesteps: (0..n).collect(),
            targets: Array2::from_shape_fn((n, cfg.action_dim), |_| r.random()),
            loss_mask: vec![true; n],
        }
    }

    #[test]
    fn embed_produces_three_tokens_per_step() {
        // Reference lengths: L_pr=5 + L_tr=10 -> 45 tokens.
        let cfg = tiny_cfg(6, 4, 8, 1);
        let params = ModelParams::init(&cfg, 1);
        let sample = random_sample(&cfg, 15, 2);
        let tokens = embed(&params, &sample).unwrap();
        assert_eq!(tokens.nrows(), 45);
        assert_eq!(sample.token_count(), 45);
    }

    #[test]
    fn embed_differs_only_through_timestep_table() {
        let cfg = tiny_cfg(6, 4, 8, 1);
        let params = ModelParams::init(&cfg, 3);
        let mut a = random_sample(&cfg, 2, 4);
        // Make both steps carry identical (rtg, state, action) but keep
        // distinct timesteps.
        let row_s = a.states.row(0).to_owned();
        a.states.row_mut(1).assign(&row_s);
        let row_a = a.actions.row(0).to_owned();
        a.actions.row_mut(1).assign(&row_a);
        a.rtg[1] = a.rtg[0];
        a.timesteps = vec![3, 9];
        let tokens = embed(&params, &a).unwrap();
        let d = cfg.embed_dim;
        for j in 0..d {
            let diff0 = tokens[[3, j]] - tokens[[0, j]];
            let t_diff = params.timestep[[9, j]] - params.timestep[[3, j]];
            assert!((diff0 - t_diff).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_zero_inputs_zero_params_gives_zero_tokens() {
        let cfg = tiny_cfg(6, 4, 8, 1);
        let params = ModelParams::zeros(&cfg);
        let mut s = random_sample(&cfg, 3, 5);
        s.rtg = vec![0.0; 3];
        s.states.fill(0.0);
        s.actions.fill(0.0);
        let tokens = embed(&params, &s).unwrap();
        assert!(tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_single_token_returns_value() {
        let q = Array2::from_shape_vec((1, 3), vec![0.3, -0.2, 0.9]).unwrap();
        let k = Array2::from_shape_vec((1, 3), vec![1.0, 0.5, -0.5]).unwrap();
        let v = Array2::from_shape_vec((1, 3), vec![7.0, -3.0, 2.5]).unwrap();
        let (z, probs) = causal_attention(&q, &k, &v, 1.0);
        assert_eq!(z, v);
        assert_eq!(probs[[0, 0]], 1.0);
    }

    #[test]
    fn attention_matches_hand_rolled_oracle() {
        // Independent evaluation: softmax of scaled dot products over the
        // causal support, then the weighted value sum, all in plain loops.
        let mut r = rng::stream(7, &[]);
        let n = 3;
        let d = 5;
        let q = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0));
        let k = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0));
        let v = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0));
        let scale = 1.0 / (d as f64).sqrt();
        let (z, _) = causal_attention(&q, &k, &v, scale);
        for i in 0..n {
            // weights
            let mut w = vec![0.0; i + 1];
            let mut denom = 0.0;
            for j in 0..=i {
                let mut dot = 0.0;
                for x in 0..d {
                    dot += q[[i, x]] * k[[j, x]];
                }
                w[j] = (dot * scale).exp();
                denom += w[j];
            }
            for x in 0..d {
                let mut expect = 0.0;
                for j in 0..=i {
                    expect += w[j] / denom * v[[j, x]];
                }
                assert!((z[[i, x]] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn attention_position_zero_ignores_later_tokens() {
        let mut r = rng::stream(9, &[]);
        let n = 4;
        let d = 3;
        let q = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0));
        let k = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0));
        let mut v = Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0));
        let (z1, _) = causal_attention(&q, &k, &v, 1.0);
        v[[3, 0]] += 100.0;
        let (z2, _) = causal_attention(&q, &k, &v, 1.0);
        for x in 0..d {
            assert_eq!(z1[[0, x]].to_bits(), z2[[0, x]].to_bits());
        }
    }

    #[test]
    fn forward_outputs_in_unit_interval_one_per_step() {
        let cfg = tiny_cfg(10, 6, 16, 2);
        let params = ModelParams::init(&cfg, 11);
        let sample = random_sample(&cfg, 6, 12);
        let preds = forward(&params, &sample, DropoutMode::Eval).unwrap();
        assert_eq!(preds.nrows(), 6);
        assert_eq!(preds.ncols(), 6);
        assert!(preds.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn forward_eval_is_deterministic_train_dropout_is_seeded() {
        let cfg = tiny_cfg(10, 6, 16, 2);
        let params = ModelParams::init(&cfg, 13);
        let sample = random_sample(&cfg, 5, 14);
        let e1 = forward(&params, &sample, DropoutMode::Eval).unwrap();
        let e2 = forward(&params, &sample, DropoutMode::Eval).unwrap();
        assert_eq!(e1, e2);
        let t1 = forward(&params, &sample, DropoutMode::Train { seed: 4 }).unwrap();
        let t2 = forward(&params, &sample, DropoutMode::Train { seed: 4 }).unwrap();
        let t3 = forward(&params, &sample, DropoutMode::Train { seed: 5 }).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, t3);
        assert_ne!(t1, e1);
    }

    #[test]
    fn loss_examples() {
        let p = Array2::from_shape_vec((2, 2), vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        assert_eq!(loss(&p, &p.clone(), &[true, true]), 0.0);
        let t = p.mapv(|v| v - 0.05);
        let l = loss(&p, &t, &[true, true]);
        assert!((l - 0.0025).abs() < 1e-15);
        // Brute-force oracle on random tensors.
        let mut r = rng::stream(21, &[]);
        let pr = Array2::from_shape_fn((4, 3), |_| r.random::<f64>());
        let tg = Array2::from_shape_fn((4, 3), |_| r.random::<f64>());
        let mask = [true, false, true, true];
        let mut acc = 0.0;
        let mut count = 0;
        for i in 0..4 {
            if !mask[i] {
                continue;
            }
            for j in 0..3 {
                acc += (pr[[i, j]] - tg[[i, j]]).powi(2);
                count += 1;
            }
        }
        assert!((loss(&pr, &tg, &mask) - acc / count as f64).abs() < 1e-15);
        // No masked positions: zero loss.
        assert_eq!(loss(&pr, &tg, &[false; 4]), 0.0);
    }

    #[test]
    fn zero_loss_gives_zero_grads_and_masked_targets_do_not_leak() {
        let cfg = tiny_cfg(6, 4, 8, 2);
        let params = ModelParams::init(&cfg, 31);
        let mut sample = random_sample(&cfg, 4, 32);
        let preds = forward(&params, &sample, DropoutMode::Eval).unwrap();
        sample.targets = preds;
        let out = loss_and_grad(&params, &[sample.clone()], None).unwrap();
        assert!(out.loss.abs() < 1e-30);
        for (_, g) in out.grads.tensors() {
            assert!(g.iter().all(|&v| v.abs() < 1e-14));
        }
        // Perturbing the target of a masked-out position changes nothing.
        let mut masked = sample.clone();
        masked.loss_mask = vec![true, true, false, true];
        let base = loss_and_grad(&params, &[masked.clone()], None).unwrap();
        masked.targets[[2, 0]] += 123.0;
        let bumped = loss_and_grad(&params, &[masked], None).unwrap();
        assert_eq!(base.loss.to_bits(), bumped.loss.to_bits());
        for ((_, g1), (_, g2)) in base.grads.tensors().iter().zip(bumped.grads.tensors()) {
            assert_eq!(g1, g2);
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_micro_model() {
        let mut cfg = tiny_cfg(5, 3, 6, 1);
        cfg.dropout = 0.0;
        let params = ModelParams::init(&cfg, 41);
        let batch = vec![random_sample(&cfg, 3, 42), random_sample(&cfg, 3, 43)];
        let analytic = loss_and_grad(&params, &batch, None).unwrap();
        let flat = params.to_flat();
        let gflat = analytic.grads.to_flat();
        let h = 1e-5;
        let mut fd_flat = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut fp = flat.clone();
            fp[i] += h;
            plus.set_from_flat(&fp).unwrap();
            fp[i] -= 2.0 * h;
            minus.set_from_flat(&fp).unwrap();
            let lp = loss_and_grad(&plus, &batch, None).unwrap().loss;
            let lm = loss_and_grad(&minus, &batch, None).unwrap().loss;
            fd_flat[i] = (lp - lm) / (2.0 * h);
        }
        // Per parameter group: relative error of the gradient vector norm.
        let mut off = 0;
        for (name, t) in params.tensors() {
            let n = t.len();
            let an = &gflat[off..off + n];
            let fd = &fd_flat[off..off + n];
            let diff: f64 = an.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = an
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(fd.iter().map(|v| v * v).sum::<f64>().sqrt())
                .max(1e-8);
            assert!(diff / scale < 1e-4, "group {name}: relative error {}", diff / scale);
            off += n;
        }
    }

    #[test]
    fn causality_perturbing_future_steps_keeps_earlier_predictions() {
        let cfg = tiny_cfg(8, 5, 16, 2);
        let params = ModelParams::init(&cfg, 51);
        let base = random_sample(&cfg, 6, 52);
        let preds = forward(&params, &base, DropoutMode::Eval).unwrap();
        let mut r = rng::stream(53, &[]);
        for trial in 0..20 {
            let mut perturbed = base.clone();
            let p = r.random_range(1..6usize); // perturb step p, check < p
            match trial % 3 {
                0 => perturbed.rtg[p] += r.random_range(0.1..3.0),
                1 => perturbed.states[[p, 0]] += r.random_range(0.1..3.0),
                _ => {
                    let j = r.random_range(0..cfg.action_dim);
                    perturbed.actions[[p, j]] += r.random_range(0.1..3.0);
                }
            }
            let preds2 = forward(&params, &perturbed, DropoutMode::Eval).unwrap();
            for i in 0..p {
                for j in 0..cfg.action_dim {
                    assert_eq!(
                        preds[[i, j]].to_bits(),
                        preds2[[i, j]].to_bits(),
                        "prediction {i},{j} changed after perturbing step {p}"
                    );
                }
            }
        }
    }

    #[test]
    fn predict_next_action_uses_final_state_token() {
        let cfg = tiny_cfg(6, 4, 8, 2);
        let params = ModelParams::init(&cfg, 61);
        let prompt = Prompt {
            rtg: vec![1.0, 1.0],
            states: Array2::zeros((2, 6)),
            actions: Array2::zeros((2, 4)),
            timesteps: vec![0, 0],
        };
        let mut r = rng::stream(62, &[]);
        let ctx: Vec<ContextStep> = (0..3)
            .map(|t| ContextStep {
                rtg: 1.0 - t as f64 * 0.1,
                state: (0..6).map(|_| r.random_range(-1.0..1.0)).collect(),
                action: if t < 2 { Some(vec![0.5; 4]) } else { None },
                timestep: t,
            })
            .collect();
        let a1 = predict_next_action(&params, &prompt, &ctx).unwrap();
        let a2 = predict_next_action(&params, &prompt, &ctx).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.len(), 4);
        assert!(a1.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(predict_next_action(&params, &prompt, &[]).is_err());
    }
}
