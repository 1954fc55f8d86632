//! The toy noise predictor.
//!
//! Per frame the 9-channel input (masked latent | noisy latent | agnostic
//! mask) is flattened to tokens and lifted to the model width; the timestep
//! embedding and pose features are added, then one block runs
//! Ref-Attention (residual), Env-Attention and Temporal-Attention with the
//! tunnel embeddings, followed by a SiLU MLP (residual) and a linear head
//! back to 4 latent channels.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schedule::{add_noise, NoiseSchedule};
use super::{DiffusionError, LatentClip};
use crate::embedding::frequencies;
use crate::nn::{
    env_cross_attention_var, ref_attention_var, temporal_attention_var, AttentionVars, AttentionWeights,
    NnError, Tape, Tensor, Var,
};

/// Concatenate `masked (4,H,W) | noise (4,H,W) | mask (1,H,W)` along channels.
pub fn assemble_inputs(masked: &Tensor, noise: &Tensor, mask: &Tensor) -> Result<Tensor, DiffusionError> {
    let spatial = |t: &Tensor, c: usize, what: &str| match t.shape() {
        [tc, h, w] if *tc == c => Ok((*h, *w)),
        other => Err(DiffusionError::ShapeMismatch(format!(
            "{what} must be ({c}, h, w), got {other:?}"
        ))),
    };
    let hw = spatial(masked, 4, "masked latent")?;
    if spatial(noise, 4, "noise latent")? != hw || spatial(mask, 1, "mask")? != hw {
        return Err(DiffusionError::ShapeMismatch(format!(
            "spatial sizes differ: {:?}, {:?}, {:?}",
            masked.shape(),
            noise.shape(),
            mask.shape()
        )));
    }
    let mut data = Vec::with_capacity(9 * hw.0 * hw.1);
    data.extend_from_slice(masked.data());
    data.extend_from_slice(noise.data());
    data.extend_from_slice(mask.data());
    Ok(Tensor::new(vec![9, hw.0, hw.1], data)?)
}

/// Inverse of [`assemble_inputs`].
pub fn split_inputs(x: &Tensor) -> Result<(Tensor, Tensor, Tensor), DiffusionError> {
    let [9, h, w] = x.shape()[..] else {
        return Err(DiffusionError::ShapeMismatch(format!("expected (9, h, w), got {:?}", x.shape())));
    };
    let plane = h * w;
    let part = |c0: usize, c: usize| Tensor::new(vec![c, h, w], x.data()[c0 * plane..(c0 + c) * plane].to_vec());
    Ok((part(0, 4)?, part(4, 4)?, part(8, 1)?))
}

/// Conditioning for one clip of `f` frames on an `H' x W'` latent grid at
/// model width `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInputs {
    pub masked_latent: LatentClip,
    /// Starting point of sampling.
    pub noise_latent: LatentClip,
    /// `(f, 1, H', W')`.
    pub agnostic_mask: Tensor,
    /// `(f, H' W', c)`.
    pub pose_features: Tensor,
    /// `(n_r, c)`, possibly empty.
    pub ref_tokens: Tensor,
    /// `(f, n_e, c)`.
    pub env_tokens: Tensor,
    /// `(f, c)`.
    pub tunnel_embs: Tensor,
}

impl DenoiserInputs {
    pub fn frames(&self) -> usize {
        self.masked_latent.frames()
    }

    pub fn validate(&self, width: usize) -> Result<(), DiffusionError> {
        let f = self.masked_latent.frames();
        let (h, w) = self.masked_latent.spatial();
        let bad = |what: &str, t: &Tensor, want: String| {
            DiffusionError::ShapeMismatch(format!("{what} is {:?}, expected {want}", t.shape()))
        };
        if self.noise_latent.tensor().shape() != self.masked_latent.tensor().shape() {
            return Err(bad("noise latent", self.noise_latent.tensor(), format!("{:?}", self.masked_latent.tensor().shape())));
        }
        if self.agnostic_mask.shape() != [f, 1, h, w] {
            return Err(bad("agnostic mask", &self.agnostic_mask, format!("[{f}, 1, {h}, {w}]")));
        }
        if self.pose_features.shape() != [f, h * w, width] {
            return Err(bad("pose features", &self.pose_features, format!("[{f}, {}, {width}]", h * w)));
        }
        if self.ref_tokens.rank() != 2 || self.ref_tokens.shape()[1] != width {
            return Err(bad("reference tokens", &self.ref_tokens, format!("[_, {width}]")));
        }
        match self.env_tokens.shape() {
            [fe, ne, ce] if *fe == f && *ne > 0 && *ce == width => {}
            _ => return Err(bad("env tokens", &self.env_tokens, format!("[{f}, _, {width}]"))),
        }
        if self.tunnel_embs.shape() != [f, width] {
            return Err(bad("tunnel embeddings", &self.tunnel_embs, format!("[{f}, {width}]")));
        }
        Ok(())
    }
}

/// Anything that predicts the noise in `z_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &LatentClip, t: usize, inputs: &DenoiserInputs) -> Result<Tensor, DiffusionError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    pub width: usize,
    pub time_freq_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 16,
            time_freq_dim: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    params: BTreeMap<String, Tensor>,
}

/// One fixed training clip and the `(t, eps)` draws it is fitted on.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub z0: LatentClip,
    pub inputs: DenoiserInputs,
    pub draws: Vec<(usize, Tensor)>,
}

const ATTENTION_BLOCKS: [&str; 3] = ["ref", "env", "temporal"];

impl ToyDenoiser {
    pub fn new(config: DenoiserConfig) -> Self {
        let c = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        let mut add = |name: &str, t: Tensor| {
            params.insert(name.to_string(), t);
        };
        add("stem.weight", Tensor::randn(&[9, c], 1.0 / 3.0, &mut rng));
        add("stem.bias", Tensor::zeros(&[c]));
        let td = config.time_freq_dim;
        add("time.weight", Tensor::randn(&[td, c], 1.0 / (td as f64).sqrt(), &mut rng));
        add("time.bias", Tensor::zeros(&[c]));
        for block in ATTENTION_BLOCKS {
            for (name, t) in AttentionWeights::random(c, &mut rng).named(block) {
                add(&name, t);
            }
        }
        let std = 1.0 / (c as f64).sqrt();
        add("mlp.w1", Tensor::randn(&[c, c], std, &mut rng));
        add("mlp.b1", Tensor::zeros(&[c]));
        add("mlp.w2", Tensor::randn(&[c, c], std, &mut rng));
        add("mlp.b2", Tensor::zeros(&[c]));
        add("head.weight", Tensor::randn(&[c, 4], std, &mut rng));
        add("head.bias", Tensor::zeros(&[4]));
        Self { config, params }
    }

    /// Same architecture with every parameter zero; predicts zero noise.
    pub fn zeros(config: DenoiserConfig) -> Self {
        let mut d = Self::new(config);
        for t in d.params.values_mut() {
            *t = Tensor::zeros(t.shape());
        }
        d
    }

    /// Rebuild from named tensors, e.g. a loaded container.
    pub fn from_named(config: DenoiserConfig, entries: Vec<(String, Tensor)>) -> Result<Self, DiffusionError> {
        let mut d = Self::new(config);
        let mut loaded: BTreeMap<String, Tensor> = entries.into_iter().collect();
        for (name, t) in d.params.iter_mut() {
            let Some(v) = loaded.remove(name) else {
                return Err(NnError::MissingParam(name.clone()).into());
            };
            if v.shape() != t.shape() {
                return Err(DiffusionError::ShapeMismatch(format!(
                    "{name}: {:?} vs {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
            *t = v;
        }
        Ok(d)
    }

    pub fn config(&self) -> DenoiserConfig {
        self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    fn bind(&self, tape: &Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect()
    }

    fn attention_vars(vars: &BTreeMap<String, Var>, block: &str) -> AttentionVars {
        let get = |n: &str| vars.get(&format!("{block}.{n}")).copied();
        AttentionVars {
            wq: get("wq").expect("attention weights are always present"),
            wk: get("wk").expect("attention weights are always present"),
            wv: get("wv").expect("attention weights are always present"),
            wo: get("wo").expect("attention weights are always present"),
            bq: get("bq"),
            bk: get("bk"),
            bv: get("bv"),
            bo: get("bo"),
        }
    }

    /// Predicted noise `(f, 4, H', W')` on a tape.
    pub fn forward_var(
        &self,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
        z_t: Var,
        t: usize,
        inputs: &DenoiserInputs,
    ) -> Result<Var, DiffusionError> {
        inputs.validate(self.config.width)?;
        let c = self.config.width;
        let f = inputs.frames();
        let (h, w) = inputs.masked_latent.spatial();
        let hw = h * w;
        let p = |n: &str| vars[n];

        let planes = |v: Var, ch: usize| -> Result<Var, NnError> {
            let flat = tape.reshape(v, &[f, ch, hw])?;
            tape.permute3(flat, [1, 0, 2])
        };
        let masked = planes(tape.leaf(inputs.masked_latent.tensor().clone()), 4)?;
        let noisy = planes(z_t, 4)?;
        let mask = planes(tape.leaf(inputs.agnostic_mask.clone()), 1)?;
        let stacked = tape.concat(&[masked, noisy, mask])?;
        let tokens = tape.reshape(tape.permute3(stacked, [1, 2, 0])?, &[f * hw, 9])?;

        let freqs = frequencies(self.config.time_freq_dim, 10_000.0).map_err(|e| {
            DiffusionError::ShapeMismatch(e.to_string())
        })?;
        let t_in = tape.leaf(Tensor::scalar(t as f64));
        let t_enc = tape.reshape(tape.sinusoid(t_in, &freqs)?, &[1, self.config.time_freq_dim])?;
        let t_emb = tape.silu(tape.add_tiled(tape.matmul(t_enc, p("time.weight"))?, p("time.bias"))?);
        let t_emb = tape.reshape(t_emb, &[c])?;

        let h0 = tape.add_tiled(tape.matmul(tokens, p("stem.weight"))?, p("stem.bias"))?;
        let h0 = tape.add_tiled(h0, t_emb)?;
        let pose = tape.leaf(inputs.pose_features.reshape(&[f * hw, c])?);
        let h0 = tape.reshape(tape.add(h0, pose)?, &[f, hw, c])?;

        let reference = tape.leaf(inputs.ref_tokens.clone());
        let r = ref_attention_var(tape, h0, reference, &Self::attention_vars(vars, "ref"))?;
        let h1 = tape.add(h0, r)?;
        let env = tape.leaf(inputs.env_tokens.clone());
        let h2 = env_cross_attention_var(tape, h1, env, &Self::attention_vars(vars, "env"))?;
        let embs = tape.leaf(inputs.tunnel_embs.clone());
        let h3 = temporal_attention_var(tape, h2, embs, &Self::attention_vars(vars, "temporal"))?;

        let flat = tape.reshape(h3, &[f * hw, c])?;
        let m = tape.silu(tape.add_tiled(tape.matmul(flat, p("mlp.w1"))?, p("mlp.b1"))?);
        let m = tape.add_tiled(tape.matmul(m, p("mlp.w2"))?, p("mlp.b2"))?;
        let h4 = tape.add(flat, m)?;

        let out = tape.add_tiled(tape.matmul(h4, p("head.weight"))?, p("head.bias"))?;
        let out = tape.permute3(tape.reshape(out, &[f, hw, 4])?, [0, 2, 1])?;
        Ok(tape.reshape(out, &[f, 4, h, w])?)
    }

    /// Mean noise-prediction loss over the example's draws and its gradient
    /// per parameter.
    pub fn loss_and_grads(
        &self,
        example: &TrainingExample,
        schedule: &NoiseSchedule,
    ) -> Result<(f64, BTreeMap<String, Tensor>), DiffusionError> {
        let n = example.draws.len().max(1) as f64;
        let mut total = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (t, eps) in &example.draws {
            let z_t = add_noise(example.z0.tensor(), eps, *t, schedule)?;
            let tape = Tape::new();
            let vars = self.bind(&tape);
            let z = tape.leaf(z_t);
            let pred = self.forward_var(&tape, &vars, z, *t, &example.inputs)?;
            let target = tape.leaf(eps.clone());
            let loss = tape.mse(pred, target)?;
            total += tape.value(loss).item() / n;
            let g = tape.backward(loss)?;
            for (name, var) in &vars {
                let gv = g.get_or_zeros(*var, self.params[name].shape());
                match grads.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                            *a += b / n;
                        }
                    }
                    None => {
                        grads.insert(name.clone(), gv.map(|x| x / n));
                    }
                }
            }
        }
        Ok((total, grads))
    }

    /// Fit the example with Adam for `steps` updates; returns the loss
    /// before each update and the final loss.
    pub fn train(
        &mut self,
        example: &TrainingExample,
        schedule: &NoiseSchedule,
        optimizer: &mut Adam,
        steps: usize,
    ) -> Result<Vec<f64>, DiffusionError> {
        let mut history = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            let (loss, grads) = self.loss_and_grads(example, schedule)?;
            history.push(loss);
            optimizer.update(&mut self.params, &grads);
        }
        history.push(self.loss_and_grads(example, schedule)?.0);
        Ok(history)
    }
}

impl NoisePredictor for ToyDenoiser {
    fn predict_noise(&self, z_t: &LatentClip, t: usize, inputs: &DenoiserInputs) -> Result<Tensor, DiffusionError> {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let z = tape.leaf(z_t.tensor().clone());
        let out = self.forward_var(&tape, &vars, z, t, inputs)?;
        Ok((*tape.value(out)).clone())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
    }
}
