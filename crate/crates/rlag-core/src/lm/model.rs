//! From-scratch decoder-only causal transformer.
//!
//! Pre-norm blocks without biases or learned norm gains, learned absolute
//! positional embeddings, GELU feed-forward, and an untied output projection.
//! The output projection starts at zero, so a fresh model is exactly uniform
//! over the vocabulary and tokens that never occur in training keep exactly
//! tied logits (their projection columns receive identical updates).
//!
//! All scoring goes through one forward implementation on a [`Tape`]; the
//! no-gradient paths simply register the parameters as non-differentiable
//! leaves.

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;

/// Architecture and initialization seed of the tiny LM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub seed: u32,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 0, // filled from the vocabulary at build time
            context_len: 256,
            seed: 1,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.context_len == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::contract(
                "n_layers, d_ff, vocab_size and context_len must be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter names in storage order; checkpoints use the same order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.n_layers {
            for part in ["wq", "wk", "wv", "wo", "w1", "w2"] {
                names.push(format!("layer{l}.{part}"));
            }
        }
        names.push("w_out".to_string());
        names
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let d = self.d_model;
        let mut shapes = vec![vec![self.vocab_size, d], vec![self.context_len, d]];
        for _ in 0..self.n_layers {
            shapes.push(vec![d, d]); // wq
            shapes.push(vec![d, d]); // wk
            shapes.push(vec![d, d]); // wv
            shapes.push(vec![d, d]); // wo
            shapes.push(vec![d, self.d_ff]); // w1
            shapes.push(vec![self.d_ff, d]); // w2
        }
        shapes.push(vec![d, self.vocab_size]);
        shapes
    }
}

/// Model parameters plus a version counter that advances on every optimizer
/// step; sampled outcomes are tagged with it to assert on-policy freshness.
#[derive(Debug, Clone)]
pub struct LmParams {
    config: LmConfig,
    tensors: Vec<Arc<Tensor>>,
    version: u64,
}

/// Tape handles for one registration of the parameters.
pub struct LmVars {
    vars: Vec<Var>,
}

impl LmVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    fn tok_emb(&self) -> Var {
        self.vars[0]
    }

    fn pos_emb(&self) -> Var {
        self.vars[1]
    }

    fn layer(&self, l: usize) -> &[Var] {
        &self.vars[2 + l * 6..2 + (l + 1) * 6]
    }

    fn w_out(&self) -> Var {
        self.vars[self.vars.len() - 1]
    }
}

impl LmParams {
    /// Deterministic initialization: a pure function of `(config, seed)`.
    /// Weights are N(0, 0.02) except the zero output projection.
    pub fn init(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed as u64);
        let names = config.param_names();
        let shapes = config.param_shapes();
        let mut tensors = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(shapes) {
            let n: usize = shape.iter().product();
            let data = if name == "w_out" {
                vec![0.0; n]
            } else {
                (0..n).map(|_| 0.02 * normal(&mut rng)).collect()
            };
            tensors.push(Arc::new(Tensor::new(shape, data)?));
        }
        Ok(LmParams {
            config,
            tensors,
            version: 0,
        })
    }

    pub fn from_tensors(config: LmConfig, tensors: Vec<Arc<Tensor>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (t, shape) in tensors.iter().zip(&shapes) {
            if t.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter shape {:?} does not match expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(LmParams {
            config,
            tensors,
            version: 0,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Arc<Tensor>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Arc<Tensor>] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Refills every tensor (output projection included) with N(0, std)
    /// noise. Useful for randomized checks that need a non-degenerate model.
    pub fn randomize(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for tensor in &mut self.tensors {
            for v in Arc::make_mut(tensor).data_mut() {
                *v = std * normal(&mut rng);
            }
        }
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Registers every parameter on a tape. `trainable` decides whether the
    /// leaves can receive gradients.
    pub fn leaves(&self, tape: &mut Tape, trainable: bool) -> LmVars {
        LmVars {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(Arc::clone(t), trainable))
                .collect(),
        }
    }

    /// Runs the transformer over `ids` and returns per-position next-token
    /// log-probabilities for the requested row range: entry `(r, v)` is
    /// `log p(token v follows ids[sel.start + r])`.
    ///
    /// The output projection is applied only to the selected rows, which is
    /// what makes option scoring cheap: everything before the answer segment
    /// skips the `[d_model, vocab]` matmul.
    pub fn forward_rows(
        &self,
        tape: &mut Tape,
        vars: &LmVars,
        ids: &[usize],
        sel: Range<usize>,
    ) -> Result<Var> {
        let t_len = ids.len();
        if t_len == 0 {
            return Err(Error::EmptyInput("forward on empty sequence".into()));
        }
        if t_len > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: t_len,
                context_len: self.config.context_len,
                detail: String::new(),
            });
        }
        if sel.start >= sel.end || sel.end > t_len {
            return Err(Error::contract(format!(
                "selected rows {sel:?} invalid for sequence of {t_len}"
            )));
        }
        if let Some(bad) = ids.iter().find(|i| **i >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} out of vocabulary range {}",
                self.config.vocab_size
            )));
        }

        let tok = tape.gather_rows(vars.tok_emb(), ids)?;
        let pos = tape.slice_rows(vars.pos_emb(), 0..t_len)?;
        let mut x = tape.add(tok, pos)?;

        let mask = tape.constant(causal_mask(t_len));
        let n_heads = self.config.n_heads;
        let head_dim = self.config.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();

        for l in 0..self.config.n_layers {
            let [wq, wk, wv, wo, w1, w2] = self.layer_vars(vars, l);

            let h = tape.layer_norm(x, LN_EPS)?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;

            let mut head_outs = Vec::with_capacity(n_heads);
            for hd in 0..n_heads {
                let cols = hd * head_dim..(hd + 1) * head_dim;
                let qh = tape.slice_cols(q, cols.clone())?;
                let kh = tape.slice_cols(k, cols.clone())?;
                let vh = tape.slice_cols(v, cols)?;
                let kh = tape.scalar_mul(kh, scale);
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.add(scores, mask)?;
                let attn_log = tape.log_softmax(scores)?;
                let attn = tape.exp(attn_log);
                head_outs.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat_cols(&head_outs)?;
            let proj = tape.matmul(merged, wo)?;
            x = tape.add(x, proj)?;

            let h2 = tape.layer_norm(x, LN_EPS)?;
            let ff = tape.matmul(h2, w1)?;
            let ff = tape.gelu(ff);
            let ff = tape.matmul(ff, w2)?;
            x = tape.add(x, ff)?;
        }

        let xf = tape.layer_norm(x, LN_EPS)?;
        let xsel = tape.slice_rows(xf, sel)?;
        let logits = tape.matmul(xsel, vars.w_out())?;
        tape.log_softmax(logits)
    }

    fn layer_vars(&self, vars: &LmVars, l: usize) -> [Var; 6] {
        let s = vars.layer(l);
        [s[0], s[1], s[2], s[3], s[4], s[5]]
    }

    /// Per-token log-probability vector on the tape:
    /// `log p(ids[t] | ids[..t])` for each `t >= condition_len`.
    pub fn seq_logprob_items(
        &self,
        tape: &mut Tape,
        vars: &LmVars,
        ids: &[usize],
        condition_len: usize,
    ) -> Result<Var> {
        if condition_len < 1 || condition_len >= ids.len() {
            return Err(Error::contract(format!(
                "condition_len {condition_len} must be in [1, {})",
                ids.len()
            )));
        }
        let sel = condition_len - 1..ids.len() - 1;
        let logprobs = self.forward_rows(tape, vars, ids, sel)?;
        let items: Vec<(usize, usize)> = ids[condition_len..]
            .iter()
            .enumerate()
            .map(|(r, &tok)| (r, tok))
            .collect();
        tape.gather_items(logprobs, &items)
    }

    /// `log π(ids[t] | ids[..t])` for `t >= condition_len`, no gradients.
    pub fn sequence_logprobs(&self, ids: &[usize], condition_len: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape, false);
        let items = self.seq_logprob_items(&mut tape, &vars, ids, condition_len)?;
        Ok(tape.value(items).data().to_vec())
    }

    /// Unconditional snippet log-probability: `sum_t log π(z_t | BOS, z_<t)`,
    /// optionally counting the EOS terminal.
    pub fn snippet_logprob(&self, z: &[usize], include_eos: bool) -> Result<f64> {
        let ids = snippet_sequence(z, include_eos)?;
        Ok(self.sequence_logprobs(&ids, 1)?.iter().sum())
    }

    /// Graph version of [`LmParams::snippet_logprob`] for training.
    pub fn snippet_logprob_graph(
        &self,
        tape: &mut Tape,
        vars: &LmVars,
        z: &[usize],
        include_eos: bool,
    ) -> Result<Var> {
        let ids = snippet_sequence(z, include_eos)?;
        let items = self.seq_logprob_items(tape, vars, &ids, 1)?;
        Ok(tape.sum_all(items))
    }
}

/// `[BOS] + z (+ EOS)`; BOS is the scoring anchor, EOS inclusion is the
/// configurable convention for document scoring.
pub fn snippet_sequence(z: &[usize], include_eos: bool) -> Result<Vec<usize>> {
    if z.is_empty() {
        return Err(Error::EmptyInput("empty snippet".into()));
    }
    let mut ids = Vec::with_capacity(z.len() + 2);
    ids.push(super::Vocabulary::BOS);
    ids.extend_from_slice(z);
    if include_eos {
        ids.push(super::Vocabulary::EOS);
    }
    Ok(ids)
}

fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = MASK_NEG;
        }
    }
    Tensor::new(vec![t, t], data).expect("square mask")
}

/// Box-Muller standard normal; two uniform draws per sample keep the stream
/// deterministic and platform-independent.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
