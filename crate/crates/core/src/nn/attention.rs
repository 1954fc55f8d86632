//! Single-head scaled dot-product attention and the three wirings built on
//! it: Ref-Attention (reference tokens appended to every frame), Env-Attention
//! (cross-attention onto environment tokens) and Temporal-Attention (attention
//! across frames at each spatial position, with tunnel embeddings added).

use rand::Rng;

use super::autodiff::{Tape, Var};
use super::tensor::Tensor;
use super::NnError;

/// Linear maps `x W + b`, with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bq: Option<Tensor>,
    pub bk: Option<Tensor>,
    pub bv: Option<Tensor>,
    pub bo: Option<Tensor>,
}

impl AttentionWeights {
    pub fn identity(c: usize) -> Self {
        Self {
            wq: Tensor::identity(c),
            wk: Tensor::identity(c),
            wv: Tensor::identity(c),
            wo: Tensor::identity(c),
            bq: None,
            bk: None,
            bv: None,
            bo: None,
        }
    }

    /// Gaussian weights with std `1/sqrt(c)` and zero biases.
    pub fn random<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let std = 1.0 / (c as f64).sqrt();
        let mut w = || Tensor::randn(&[c, c], std, rng);
        Self {
            wq: w(),
            wk: w(),
            wv: w(),
            wo: w(),
            bq: Some(Tensor::zeros(&[c])),
            bk: Some(Tensor::zeros(&[c])),
            bv: Some(Tensor::zeros(&[c])),
            bo: Some(Tensor::zeros(&[c])),
        }
    }

    /// Named tensors under `prefix`, biases included when present.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (format!("{prefix}.wq"), self.wq.clone()),
            (format!("{prefix}.wk"), self.wk.clone()),
            (format!("{prefix}.wv"), self.wv.clone()),
            (format!("{prefix}.wo"), self.wo.clone()),
        ];
        for (name, b) in [("bq", &self.bq), ("bk", &self.bk), ("bv", &self.bv), ("bo", &self.bo)] {
            if let Some(b) = b {
                out.push((format!("{prefix}.{name}"), b.clone()));
            }
        }
        out
    }

    pub fn bind(&self, tape: &Tape) -> AttentionVars {
        let opt = |b: &Option<Tensor>| b.as_ref().map(|b| tape.leaf(b.clone()));
        AttentionVars {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            wo: tape.leaf(self.wo.clone()),
            bq: opt(&self.bq),
            bk: opt(&self.bk),
            bv: opt(&self.bv),
            bo: opt(&self.bo),
        }
    }

    fn check_finite(&self) -> Result<(), NnError> {
        let all = [&self.wq, &self.wk, &self.wv, &self.wo]
            .into_iter()
            .chain([&self.bq, &self.bk, &self.bv, &self.bo].into_iter().flatten());
        for t in all {
            if !t.is_finite() {
                return Err(NnError::NonFinite("attention weights"));
            }
        }
        Ok(())
    }
}

/// Attention parameters living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bq: Option<Var>,
    pub bk: Option<Var>,
    pub bv: Option<Var>,
    pub bo: Option<Var>,
}

/// A clip of per-frame token features, shape `(frames, tokens, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClip(Tensor);

impl FeatureClip {
    pub fn new(data: Tensor) -> Result<Self, NnError> {
        match data.shape() {
            [f, n, c] if *f > 0 && *n > 0 && *c > 0 => Ok(Self(data)),
            other => Err(NnError::ShapeMismatch(format!(
                "feature clip needs (f, n, c), got {other:?}"
            ))),
        }
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

fn linear(tape: &Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_tiled(y, b),
        None => Ok(y),
    }
}

/// `softmax(q kᵀ / sqrt(d)) v` on already-projected rows.
pub fn attend(tape: &Tape, q: Var, k: Var, v: Var) -> Result<Var, NnError> {
    let d = *tape.shape(q).last().expect("rank >= 1");
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let weights = tape.softmax_rows(tape.scale(logits, 1.0 / (d as f64).sqrt()));
    tape.matmul(weights, v)
}

/// Projected single-head attention: queries `q (m, c)` over keys `k` and
/// values `v` of shape `(n, c)`.
pub fn attention_var(tape: &Tape, q: Var, k: Var, v: Var, w: &AttentionVars) -> Result<Var, NnError> {
    let (nk, nv) = (tape.shape(k)[0], tape.shape(v)[0]);
    if nk != nv || nk == 0 {
        return Err(NnError::ShapeMismatch(format!("{nk} keys with {nv} values")));
    }
    let qp = linear(tape, q, w.wq, w.bq)?;
    let kp = linear(tape, k, w.wk, w.bk)?;
    let vp = linear(tape, v, w.wv, w.bv)?;
    let mixed = attend(tape, qp, kp, vp)?;
    linear(tape, mixed, w.wo, w.bo)
}

fn dims3(tape: &Tape, x: Var) -> Result<(usize, usize, usize), NnError> {
    match tape.shape(x)[..] {
        [f, n, c] => Ok((f, n, c)),
        ref other => Err(NnError::ShapeMismatch(format!("expected (f, n, c), got {other:?}"))),
    }
}

/// Every frame attends over its own tokens followed by the shared reference
/// tokens; only the frame's own token outputs are kept.
pub fn ref_attention_var(tape: &Tape, x: Var, reference: Var, w: &AttentionVars) -> Result<Var, NnError> {
    let (f, n, c) = dims3(tape, x)?;
    let ref_shape = tape.shape(reference);
    if ref_shape.len() != 2 || ref_shape[1] != c {
        return Err(NnError::ShapeMismatch(format!(
            "reference {ref_shape:?} for {c} channels"
        )));
    }
    let flat = tape.reshape(x, &[f * n, c])?;
    let q = linear(tape, flat, w.wq, w.bq)?;
    let k = linear(tape, flat, w.wk, w.bk)?;
    let v = linear(tape, flat, w.wv, w.bv)?;
    let (k_ref, v_ref) = if ref_shape[0] > 0 {
        (
            Some(linear(tape, reference, w.wk, w.bk)?),
            Some(linear(tape, reference, w.wv, w.bv)?),
        )
    } else {
        (None, None)
    };
    let mut frames = Vec::with_capacity(f);
    for i in 0..f {
        let qi = tape.slice_rows(q, i * n, n)?;
        let mut ki = tape.slice_rows(k, i * n, n)?;
        let mut vi = tape.slice_rows(v, i * n, n)?;
        if let (Some(kr), Some(vr)) = (k_ref, v_ref) {
            ki = tape.concat(&[ki, kr])?;
            vi = tape.concat(&[vi, vr])?;
        }
        frames.push(attend(tape, qi, ki, vi)?);
    }
    let mixed = tape.concat(&frames)?;
    let out = linear(tape, mixed, w.wo, w.bo)?;
    let d = *tape.shape(out).last().expect("rank 2");
    tape.reshape(out, &[f, n, d])
}

/// For each spatial token, self-attention across frames of
/// `x[:, j, :] + embs`, added back onto `x`.
pub fn temporal_attention_var(tape: &Tape, x: Var, embs: Var, w: &AttentionVars) -> Result<Var, NnError> {
    let (f, n, c) = dims3(tape, x)?;
    if tape.shape(embs) != [f, c] {
        return Err(NnError::ShapeMismatch(format!(
            "tunnel embeddings {:?} for {f} frames of {c} channels",
            tape.shape(embs)
        )));
    }
    let by_token = tape.permute3(x, [1, 0, 2])?;
    let seq = tape.add_tiled(by_token, embs)?;
    let flat = tape.reshape(seq, &[n * f, c])?;
    let q = linear(tape, flat, w.wq, w.bq)?;
    let k = linear(tape, flat, w.wk, w.bk)?;
    let v = linear(tape, flat, w.wv, w.bv)?;
    let mut tokens = Vec::with_capacity(n);
    for j in 0..n {
        let qj = tape.slice_rows(q, j * f, f)?;
        let kj = tape.slice_rows(k, j * f, f)?;
        let vj = tape.slice_rows(v, j * f, f)?;
        tokens.push(attend(tape, qj, kj, vj)?);
    }
    let mixed = tape.concat(&tokens)?;
    let out = linear(tape, mixed, w.wo, w.bo)?;
    let out = tape.reshape(out, &[n, f, c])?;
    let out = tape.permute3(out, [1, 0, 2])?;
    tape.add(x, out)
}

/// Cross-attention from clip tokens onto environment tokens, added back onto
/// `x`. `env` is either `(n_e, c)`, shared by all frames, or `(f, n_e, c)`.
pub fn env_cross_attention_var(tape: &Tape, x: Var, env: Var, w: &AttentionVars) -> Result<Var, NnError> {
    let (f, n, c) = dims3(tape, x)?;
    let env_shape = tape.shape(env);
    let (per_frame, n_e) = match env_shape[..] {
        [n_e, ce] if ce == c => (false, n_e),
        [fe, n_e, ce] if fe == f && ce == c => (true, n_e),
        _ => {
            return Err(NnError::ShapeMismatch(format!(
                "env tokens {env_shape:?} for clip ({f}, {n}, {c})"
            )))
        }
    };
    if n_e == 0 {
        return Err(NnError::ShapeMismatch("no environment tokens".into()));
    }
    let flat = tape.reshape(x, &[f * n, c])?;
    let env_flat = if per_frame {
        tape.reshape(env, &[f * n_e, c])?
    } else {
        env
    };
    let q = linear(tape, flat, w.wq, w.bq)?;
    let k = linear(tape, env_flat, w.wk, w.bk)?;
    let v = linear(tape, env_flat, w.wv, w.bv)?;
    let mut frames = Vec::with_capacity(f);
    for i in 0..f {
        let qi = tape.slice_rows(q, i * n, n)?;
        let (ki, vi) = if per_frame {
            (tape.slice_rows(k, i * n_e, n_e)?, tape.slice_rows(v, i * n_e, n_e)?)
        } else {
            (k, v)
        };
        frames.push(attend(tape, qi, ki, vi)?);
    }
    let mixed = tape.concat(&frames)?;
    let out = linear(tape, mixed, w.wo, w.bo)?;
    let out = tape.reshape(out, &[f, n, c])?;
    tape.add(x, out)
}

fn finite(t: &Tensor, what: &'static str) -> Result<(), NnError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite(what))
    }
}

fn check_channels(t: &Tensor, c: usize, what: &str) -> Result<(), NnError> {
    match t.shape() {
        [_, tc] if *tc == c => Ok(()),
        other => Err(NnError::ShapeMismatch(format!(
            "{what} has shape {other:?}, expected (_, {c})"
        ))),
    }
}

/// `softmax(Q Kᵀ / sqrt(c)) V Wo` with `Q = q Wq`, `K = k Wk`, `V = v Wv`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, w: &AttentionWeights) -> Result<Tensor, NnError> {
    finite(q, "queries")?;
    finite(k, "keys")?;
    finite(v, "values")?;
    w.check_finite()?;
    let c = w.wq.shape()[0];
    check_channels(q, c, "queries")?;
    check_channels(k, w.wk.shape()[0], "keys")?;
    check_channels(v, w.wv.shape()[0], "values")?;
    let tape = Tape::new();
    let vars = w.bind(&tape);
    let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let out = attention_var(&tape, qv, kv, vv, &vars)?;
    Ok((*tape.value(out)).clone())
}

pub fn ref_attention(x: &FeatureClip, reference: &Tensor, w: &AttentionWeights) -> Result<FeatureClip, NnError> {
    finite(x.tensor(), "features")?;
    finite(reference, "reference tokens")?;
    w.check_finite()?;
    let tape = Tape::new();
    let vars = w.bind(&tape);
    let out = ref_attention_var(&tape, tape.leaf(x.tensor().clone()), tape.leaf(reference.clone()), &vars)?;
    FeatureClip::new((*tape.value(out)).clone())
}

pub fn temporal_attention(
    x: &FeatureClip,
    tunnel_embs: &Tensor,
    w: &AttentionWeights,
) -> Result<FeatureClip, NnError> {
    finite(x.tensor(), "features")?;
    finite(tunnel_embs, "tunnel embeddings")?;
    w.check_finite()?;
    let tape = Tape::new();
    let vars = w.bind(&tape);
    let out = temporal_attention_var(&tape, tape.leaf(x.tensor().clone()), tape.leaf(tunnel_embs.clone()), &vars)?;
    FeatureClip::new((*tape.value(out)).clone())
}

pub fn env_cross_attention(
    x: &FeatureClip,
    env_tokens: &Tensor,
    w: &AttentionWeights,
) -> Result<FeatureClip, NnError> {
    finite(x.tensor(), "features")?;
    finite(env_tokens, "environment tokens")?;
    w.check_finite()?;
    let tape = Tape::new();
    let vars = w.bind(&tape);
    let out = env_cross_attention_var(&tape, tape.leaf(x.tensor().clone()), tape.leaf(env_tokens.clone()), &vars)?;
    FeatureClip::new((*tape.value(out)).clone())
}
