//! Feedforward window language model with a hand-written backward pass.
//!
//! ```text
//! x      = concat(E[c_1], ..., E[c_n])          (n·d)
//! h      = tanh(x · W1 + b1)                    (H)
//! logits = h · W2 + b2                          (|V|)
//! ```
//!
//! With tied embeddings `W2 = Eᵀ`, which needs `H = d`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::{argmax, gemm, Mat, Real};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LMRS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StudentError {
    #[error("invalid student config: {0}")]
    Config(String),
    #[error("context has {got} tokens, expected {expected}")]
    ContextLength { expected: usize, got: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged: non-finite gradient")]
    Diverged,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad checkpoint: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// 0 means "take it from the vocabulary" when training.
    pub vocab_size: usize,
    pub tie_embeddings: bool,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            context_len: 5,
            embed_dim: 64,
            hidden_dim: 128,
            vocab_size: 0,
            tie_embeddings: false,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<(), StudentError> {
        let bad = |m: &str| Err(StudentError::Config(m.to_owned()));
        if self.context_len == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("context_len, embed_dim and hidden_dim must be at least 1");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be at least 1");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and non-negative");
        }
        if self.tie_embeddings && self.hidden_dim != self.embed_dim {
            return bad("tied embeddings need hidden_dim == embed_dim");
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.context_len * self.embed_dim
    }
}

/// Student weights. Also used as the container for their gradients and
/// optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentParams<F> {
    pub config: StudentConfig,
    /// `|V| × d`
    pub emb: Vec<F>,
    /// `(n·d) × H`
    pub w1: Vec<F>,
    pub b1: Vec<F>,
    /// `H × |V|`; empty when tied.
    pub w2: Vec<F>,
    pub b2: Vec<F>,
}

pub fn init_params<F: Real>(config: &StudentConfig) -> Result<StudentParams<F>, StudentError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = config.init_scale;
    let mut draw = |n: usize| -> Vec<F> {
        (0..n)
            .map(|_| F::lit((rng.random::<f64>() * 2.0 - 1.0) * scale))
            .collect()
    };
    let mut p = StudentParams::zeros(config.clone());
    p.emb = draw(p.emb.len());
    p.w1 = draw(p.w1.len());
    p.w2 = draw(p.w2.len());
    Ok(p)
}

/// Logits for one context, with the log-sum-exp pieces.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<F> {
    pub logits: Vec<F>,
    pub max_logit: F,
    /// `Σ_j exp(logits_j - max_logit)`
    pub partition: F,
}

/// Everything a batched forward pass keeps for the backward pass.
#[derive(Clone, Debug)]
pub struct Activations<F> {
    pub rows: usize,
    contexts: Vec<u32>,
    inputs: Vec<F>,
    hidden: Vec<F>,
    /// `rows × |V|`
    pub logits: Vec<F>,
}

impl<F: Real> Activations<F> {
    pub fn row(&self, r: usize) -> &[F] {
        let v = self.logits.len() / self.rows.max(1);
        &self.logits[r * v..(r + 1) * v]
    }
}

impl<F: Real> StudentParams<F> {
    pub fn zeros(config: StudentConfig) -> Self {
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let w2 = if config.tie_embeddings { 0 } else { h * v };
        StudentParams {
            emb: vec![F::zero(); v * d],
            w1: vec![F::zero(); config.input_dim() * h],
            b1: vec![F::zero(); h],
            w2: vec![F::zero(); w2],
            b2: vec![F::zero(); v],
            config,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone())
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn context_len(&self) -> usize {
        self.config.context_len
    }

    /// Parameter blocks in declaration order.
    pub fn blocks(&self) -> [&[F]; 5] {
        [&self.emb, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<F>; 5] {
        [
            &mut self.emb,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Converts every block to another float type.
    pub fn cast<G: Real>(&self) -> StudentParams<G> {
        let conv = |b: &[F]| b.iter().map(|&x| G::lit(x.as_f64())).collect();
        StudentParams {
            config: self.config.clone(),
            emb: conv(&self.emb),
            w1: conv(&self.w1),
            b1: conv(&self.b1),
            w2: conv(&self.w2),
            b2: conv(&self.b2),
        }
    }

    fn output_weights(&self) -> Mat<'_, F> {
        let c = &self.config;
        if c.tie_embeddings {
            Mat::new(&self.emb, c.vocab_size, c.embed_dim).t()
        } else {
            Mat::new(&self.w2, c.hidden_dim, c.vocab_size)
        }
    }

    fn check_contexts(&self, contexts: &[u32]) -> Result<usize, StudentError> {
        let n = self.config.context_len;
        if contexts.is_empty() || !contexts.len().is_multiple_of(n) {
            return Err(StudentError::ContextLength {
                expected: n,
                got: contexts.len() % n,
            });
        }
        if let Some(&id) = contexts.iter().find(|&&id| id as usize >= self.vocab_size()) {
            return Err(StudentError::IdOutOfRange {
                id,
                vocab: self.vocab_size(),
            });
        }
        Ok(contexts.len() / n)
    }

    pub fn forward(&self, context: &[u32]) -> Result<ForwardOutput<F>, StudentError> {
        if context.len() != self.config.context_len {
            return Err(StudentError::ContextLength {
                expected: self.config.context_len,
                got: context.len(),
            });
        }
        let act = self.forward_batch(context)?;
        let logits = act.logits;
        let (_, max_logit) = argmax(&logits);
        let partition = logits.iter().map(|&x| (x - max_logit).exp()).sum();
        Ok(ForwardOutput {
            logits,
            max_logit,
            partition,
        })
    }

    /// Forward pass over `rows` contexts laid out back to back.
    pub fn forward_batch(&self, contexts: &[u32]) -> Result<Activations<F>, StudentError> {
        let rows = self.check_contexts(contexts)?;
        let c = &self.config;
        let (d, h, v, nd) = (c.embed_dim, c.hidden_dim, c.vocab_size, c.input_dim());

        let mut inputs = Vec::with_capacity(rows * nd);
        for &id in contexts {
            let id = id as usize;
            inputs.extend_from_slice(&self.emb[id * d..(id + 1) * d]);
        }

        let mut hidden = Vec::with_capacity(rows * h);
        for _ in 0..rows {
            hidden.extend_from_slice(&self.b1);
        }
        gemm(
            F::one(),
            Mat::new(&inputs, rows, nd),
            Mat::new(&self.w1, nd, h),
            F::one(),
            &mut hidden,
        );
        hidden.iter_mut().for_each(|x| *x = x.tanh());

        let mut logits = Vec::with_capacity(rows * v);
        for _ in 0..rows {
            logits.extend_from_slice(&self.b2);
        }
        gemm(
            F::one(),
            Mat::new(&hidden, rows, h),
            self.output_weights(),
            F::one(),
            &mut logits,
        );
        Ok(Activations {
            rows,
            contexts: contexts.to_vec(),
            inputs,
            hidden,
            logits,
        })
    }

    /// Adds the gradient of `Σ logits ⊙ upstream` into `grads`.
    pub fn backward(
        &self,
        act: &Activations<F>,
        upstream: &[F],
        grads: &mut StudentParams<F>,
    ) -> Result<(), StudentError> {
        let c = &self.config;
        let (d, h, v, nd) = (c.embed_dim, c.hidden_dim, c.vocab_size, c.input_dim());
        let rows = act.rows;
        if upstream.len() != rows * v {
            return Err(StudentError::Shape(format!(
                "upstream has {} entries, expected {}",
                upstream.len(),
                rows * v
            )));
        }
        if grads.config != self.config {
            return Err(StudentError::Shape("gradient buffer config differs".into()));
        }
        let up = Mat::new(upstream, rows, v);
        let hid = Mat::new(&act.hidden, rows, h);

        for r in 0..rows {
            for (g, &u) in grads.b2.iter_mut().zip(&upstream[r * v..(r + 1) * v]) {
                *g = *g + u;
            }
        }
        let mut d_hidden = vec![F::zero(); rows * h];
        if c.tie_embeddings {
            // logits = h·Eᵀ: dE += upᵀ·h, dh = up·E
            gemm(F::one(), up.t(), hid, F::one(), &mut grads.emb);
            gemm(F::one(), up, Mat::new(&self.emb, v, d), F::zero(), &mut d_hidden);
        } else {
            gemm(F::one(), hid.t(), up, F::one(), &mut grads.w2);
            gemm(F::one(), up, Mat::new(&self.w2, h, v).t(), F::zero(), &mut d_hidden);
        }

        for (dh, &y) in d_hidden.iter_mut().zip(&act.hidden) {
            *dh = *dh * (F::one() - y * y);
        }
        for r in 0..rows {
            for (g, &x) in grads.b1.iter_mut().zip(&d_hidden[r * h..(r + 1) * h]) {
                *g = *g + x;
            }
        }
        let d_pre = Mat::new(&d_hidden, rows, h);
        gemm(F::one(), Mat::new(&act.inputs, rows, nd).t(), d_pre, F::one(), &mut grads.w1);

        let mut d_inputs = vec![F::zero(); rows * nd];
        gemm(F::one(), d_pre, Mat::new(&self.w1, nd, h).t(), F::zero(), &mut d_inputs);
        for (slot, &id) in act.contexts.iter().enumerate() {
            let id = id as usize;
            let src = &d_inputs[slot * d..(slot + 1) * d];
            for (g, &x) in grads.emb[id * d..(id + 1) * d].iter_mut().zip(src) {
                *g = *g + x;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StudentError> {
        let path = path.as_ref();
        let io_err = |source| StudentError::Io {
            path: path.to_owned(),
            source,
        };
        let mut out = Vec::with_capacity(16 + self.num_params() * 4);
        let header = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for block in self.blocks() {
            for &x in block {
                out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(&out).map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StudentError> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| StudentError::Io {
                path: path.to_owned(),
                source,
            })?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, StudentError> {
        let bad = |m: &str| StudentError::Format(m.to_owned());
        if bytes.len() < 12 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("magic mismatch"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != CHECKPOINT_VERSION {
            return Err(StudentError::Format(format!("unsupported version {version}")));
        }
        let header_len = u32_at(8) as usize;
        let header = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| bad("truncated header"))?;
        let config: StudentConfig = serde_json::from_slice(header)
            .map_err(|e| StudentError::Format(format!("header: {e}")))?;
        config.validate()?;
        let mut params = StudentParams::<F>::zeros(config);
        let body = &bytes[12 + header_len..];
        if body.len() != params.num_params() * 4 {
            return Err(bad("parameter block size does not match the config"));
        }
        let mut floats = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        for block in params.blocks_mut() {
            for x in block.iter_mut() {
                *x = F::lit(floats.next().expect("sized above") as f64);
            }
        }
        if !params.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState<F> {
    pub config: AdamConfig,
    pub step: u64,
    m: StudentParams<F>,
    v: StudentParams<F>,
}

impl<F: Real> OptimState<F> {
    pub fn new(config: AdamConfig, params: &StudentParams<F>) -> Self {
        OptimState {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Clips `grads` to the global norm, then takes one bias-corrected
    /// adaptive-moment step. Returns the pre-clip gradient norm.
    pub fn step(
        &mut self,
        params: &mut StudentParams<F>,
        grads: &StudentParams<F>,
    ) -> Result<f64, StudentError> {
        if grads.config != params.config || self.m.config != params.config {
            return Err(StudentError::Shape("optimizer state does not match parameters".into()));
        }
        let sq: f64 = grads
            .blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|&g| {
                let g = g.as_f64();
                g * g
            })
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(StudentError::Diverged);
        }
        let c = &self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - c.beta1), F::lit(1.0 - c.beta2));
        let corr1 = F::lit(1.0 - c.beta1.powi(t));
        let corr2 = F::lit(1.0 - c.beta2.powi(t));
        let (lr, eps, clip) = (F::lit(c.lr), F::lit(c.eps), F::lit(clip));

        let blocks = params.blocks_mut().into_iter().zip(self.m.blocks_mut());
        for (i, (p, m)) in blocks.enumerate() {
            let v = &mut self.v.blocks_mut()[i];
            let g = grads.blocks()[i];
            for j in 0..p.len() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
