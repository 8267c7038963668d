//! Reward terms, the clipped margin loss, and the baseline losses.
//!
//! The training objective is a Bradley-Terry preference with target margin:
//!
//! ```text
//! loss = -log sigmoid( r_z + min(r_c, eps1) - max(r_l, eps2) - gamma )
//! r_z  = sum_z beta_z/|z| * log pi(z)          knowledge reward
//! r_c  = beta/|y_w| * log pi(y_w | x, Z_x)     augmented generation reward
//! r_l  = beta/|y_l| * log pi(y_l | x)          naive generation reward
//! ```
//!
//! Clipping happens inside the graph via clamp primitives, so an active clip
//! kills the gradient through that term exactly. The weight schedule disables
//! the generation terms when the sampled pair is uninformative (`y_w == y_l`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::Snippet;
use crate::lm::{snippet_sequence, LmParams, LmVars, TokenSeq, Vocabulary};
use crate::sampler::{prompt_token_ids, McqInstance, SampleOutcome};
use crate::tensor::{Tape, Var};

/// Active generation/knowledge reward weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub beta: f64,
    pub beta_z: f64,
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.beta_z < 0.0 {
            return Err(Error::contract(format!(
                "reward weights must be non-negative: beta={} beta_z={}",
                self.beta, self.beta_z
            )));
        }
        Ok(())
    }
}

/// Sampling-driven weight schedule: an informative pair activates all three
/// rewards, an equal pair keeps only the knowledge reward.
pub fn dynamic_beta(outcome: &SampleOutcome) -> RewardWeights {
    if outcome.equal {
        RewardWeights {
            beta: 0.0,
            beta_z: 0.5,
        }
    } else {
        RewardWeights {
            beta: 0.5,
            beta_z: 0.2,
        }
    }
}

/// Cap on the augmented term and floor on the naive term, in reward units
/// (beta-scaled mean token log-probability), hence both negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipThresholds {
    pub eps1: f64,
    pub eps2: f64,
}

impl ClipThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.eps1 >= 0.0 || self.eps2 >= 0.0 || self.eps2 >= self.eps1 {
            return Err(Error::contract(format!(
                "clip thresholds need eps2 < eps1 < 0, got eps1={} eps2={}",
                self.eps1, self.eps2
            )));
        }
        Ok(())
    }
}

/// Loss configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Target reward margin inside the sigmoid.
    pub gamma: f64,
    pub clip: ClipThresholds,
    /// Use the sampling-driven schedule; `false` freezes `fixed` (ablations).
    pub dynamic_beta: bool,
    pub fixed: RewardWeights,
    /// Count the EOS terminal when scoring snippets/chunks.
    pub score_eos: bool,
    /// Build zero-weight generation subgraphs instead of constant zeros.
    /// The two are gradient-identical; constants are just cheaper.
    pub keep_zero_weight_terms: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.8,
            clip: ClipThresholds {
                eps1: -0.05,
                eps2: -2.5,
            },
            dynamic_beta: true,
            fixed: RewardWeights {
                beta: 0.5,
                beta_z: 0.2,
            },
            score_eos: false,
            keep_zero_weight_terms: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::contract(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        self.clip.validate()?;
        self.fixed.validate()
    }

    pub fn weights_for(&self, outcome: &SampleOutcome) -> RewardWeights {
        if self.dynamic_beta {
            dynamic_beta(outcome)
        } else {
            self.fixed
        }
    }
}

/// Every term of one instance's loss, for diagnostics and oracles.
#[derive(Debug, Clone, Copy)]
pub struct RewardBreakdown {
    pub r_z: f64,
    pub r_c_raw: f64,
    pub r_c_clipped: f64,
    pub r_l_raw: f64,
    pub r_l_clipped: f64,
    pub weights: RewardWeights,
    pub margin_arg: f64,
    pub loss: f64,
}

/// `sum_z (beta_z / |z|) log pi(z)`; `|z|` counts content tokens.
pub fn knowledge_reward(
    params: &LmParams,
    zx: &[&Snippet],
    beta_z: f64,
    include_eos: bool,
) -> Result<f64> {
    if zx.is_empty() {
        return Err(Error::contract(
            "knowledge reward requires retrieved snippets",
        ));
    }
    if beta_z == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for z in zx {
        let lp = params.snippet_logprob(&z.tokens.ids, include_eos)?;
        total += beta_z / z.tokens.len() as f64 * lp;
    }
    Ok(total)
}

/// `(beta / |y|) log pi(y | condition)`; the condition carries BOS and the
/// rendered prompt (with snippets for `r_c`, without for `r_l`).
pub fn generation_reward(
    params: &LmParams,
    condition_ids: &[usize],
    y: &TokenSeq,
    beta: f64,
) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyInput("empty generation".into()));
    }
    if beta == 0.0 {
        return Ok(0.0);
    }
    let mut ids = condition_ids.to_vec();
    ids.extend(&y.ids);
    let lps = params.sequence_logprobs(&ids, condition_ids.len())?;
    Ok(beta / y.len() as f64 * lps.iter().sum::<f64>())
}

/// Bradley-Terry preference probability with target margin:
/// `sigma(r_w - r_l - gamma)`.
pub fn preference_prob(r_w: f64, r_l: f64, gamma: f64) -> f64 {
    sigmoid(r_w - r_l - gamma)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shared snippet log-probability subgraphs within one tape. Instances in a
/// microbatch usually overlap in retrieved snippets; the graph node is built
/// once per snippet and fanned out.
pub type SnippetVarCache = BTreeMap<usize, Var>;

/// Builds one instance's loss on the tape and returns the scalar loss var
/// plus the term values.
#[allow(clippy::too_many_arguments)]
pub fn rlag_loss_graph(
    tape: &mut Tape,
    params: &LmParams,
    vars: &LmVars,
    x: &McqInstance,
    zx: &[&Snippet],
    outcome: &SampleOutcome,
    cfg: &LossConfig,
    vocab: &Vocabulary,
    cache: &mut SnippetVarCache,
) -> Result<(Var, RewardBreakdown)> {
    cfg.validate()?;
    if zx.is_empty() {
        return Err(Error::contract(
            "rlag loss requires retrieved snippets",
        ));
    }
    let weights = cfg.weights_for(outcome);

    // r_z = sum_z beta_z/|z| log pi(z)
    let mut r_z: Option<Var> = None;
    for z in zx {
        let raw = match cache.get(&z.id) {
            Some(v) => *v,
            None => {
                let v = params.snippet_logprob_graph(tape, vars, &z.tokens.ids, cfg.score_eos)?;
                cache.insert(z.id, v);
                v
            }
        };
        let scaled = tape.scalar_mul(raw, weights.beta_z / z.tokens.len() as f64);
        r_z = Some(match r_z {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let r_z = r_z.expect("zx non-empty");

    // generation terms; a zero beta makes them constants unless the caller
    // wants the full subgraphs for gradient-identity checks
    let build_generation = weights.beta != 0.0 || cfg.keep_zero_weight_terms;
    let gen_term = |tape: &mut Tape, with_snippets: bool, y: &(usize, TokenSeq)| -> Result<Var> {
        if !build_generation {
            return Ok(tape.constant(crate::tensor::Tensor::scalar(0.0)));
        }
        let cond = prompt_token_ids(x, with_snippets.then_some(zx), vocab)?;
        let mut ids = cond.clone();
        ids.extend(&y.1.ids);
        let items = params.seq_logprob_items(tape, vars, &ids, cond.len())?;
        let sum = tape.sum_all(items);
        Ok(tape.scalar_mul(sum, weights.beta / y.1.len() as f64))
    };
    let r_c_raw = gen_term(tape, true, &outcome.y_w)?;
    let r_l_raw = gen_term(tape, false, &outcome.y_l)?;

    let r_c_clipped = tape.clamp_max(r_c_raw, cfg.clip.eps1);
    let r_l_clipped = tape.clamp_min(r_l_raw, cfg.clip.eps2);

    let pos = tape.add(r_z, r_c_clipped)?;
    let neg = tape.scalar_mul(r_l_clipped, -1.0);
    let margin = tape.add(pos, neg)?;
    let margin = tape.add_scalar(margin, -cfg.gamma);
    let neg_margin = tape.scalar_mul(margin, -1.0);
    let loss = tape.softplus(neg_margin);

    let breakdown = RewardBreakdown {
        r_z: tape.scalar_value(r_z)?,
        r_c_raw: tape.scalar_value(r_c_raw)?,
        r_c_clipped: tape.scalar_value(r_c_clipped)?,
        r_l_raw: tape.scalar_value(r_l_raw)?,
        r_l_clipped: tape.scalar_value(r_l_clipped)?,
        weights,
        margin_arg: tape.scalar_value(margin)?,
        loss: tape.scalar_value(loss)?,
    };
    Ok((loss, breakdown))
}

/// Forward-only loss of one instance.
pub fn rlag_loss(
    params: &LmParams,
    x: &McqInstance,
    zx: &[&Snippet],
    outcome: &SampleOutcome,
    cfg: &LossConfig,
    vocab: &Vocabulary,
) -> Result<(f64, RewardBreakdown)> {
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape, false);
    let mut cache = SnippetVarCache::new();
    let (loss, breakdown) =
        rlag_loss_graph(&mut tape, params, &vars, x, zx, outcome, cfg, vocab, &mut cache)?;
    Ok((tape.scalar_value(loss)?, breakdown))
}

/// One supervised pair: conditioning ids (BOS + rendered prompt) and the
/// target answer tokens.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub prompt_ids: Vec<usize>,
    pub answer: TokenSeq,
}

/// Mean over the batch of per-example length-normalized NLL:
/// `(1/|y|) sum_j -log pi(y_j | x, y_<j)`.
pub fn sft_loss_graph(
    tape: &mut Tape,
    params: &LmParams,
    vars: &LmVars,
    batch: &[SftExample],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("sft loss over an empty batch"));
    }
    let mut acc: Option<Var> = None;
    for ex in batch {
        if ex.answer.is_empty() {
            return Err(Error::contract("sft example with empty answer"));
        }
        let mut ids = ex.prompt_ids.clone();
        ids.extend(&ex.answer.ids);
        let items = params.seq_logprob_items(tape, vars, &ids, ex.prompt_ids.len())?;
        let sum = tape.sum_all(items);
        let norm = tape.scalar_mul(sum, -1.0 / ex.answer.len() as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, norm)?,
            None => norm,
        });
    }
    Ok(tape.scalar_mul(acc.expect("non-empty batch"), 1.0 / batch.len() as f64))
}

pub fn sft_loss(params: &LmParams, batch: &[SftExample]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape, false);
    let loss = sft_loss_graph(&mut tape, params, &vars, batch)?;
    tape.scalar_value(loss)
}

/// Mean over chunks of length-normalized next-token NLL over the chunk
/// content (`[BOS] z (EOS)`); normalization counts exactly the scored
/// targets.
pub fn cpt_loss_graph(
    tape: &mut Tape,
    params: &LmParams,
    vars: &LmVars,
    chunks: &[&Snippet],
    score_eos: bool,
) -> Result<Var> {
    if chunks.is_empty() {
        return Err(Error::contract("cpt loss over an empty batch"));
    }
    let mut acc: Option<Var> = None;
    for chunk in chunks {
        if chunk.tokens.is_empty() {
            return Err(Error::contract(format!("empty chunk {}", chunk.id)));
        }
        let ids = snippet_sequence(&chunk.tokens.ids, score_eos)?;
        let items = params.seq_logprob_items(tape, vars, &ids, 1)?;
        let count = tape.value(items).len();
        let sum = tape.sum_all(items);
        let norm = tape.scalar_mul(sum, -1.0 / count as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, norm)?,
            None => norm,
        });
    }
    Ok(tape.scalar_mul(acc.expect("non-empty batch"), 1.0 / chunks.len() as f64))
}

pub fn cpt_loss(params: &LmParams, chunks: &[&Snippet], score_eos: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape, false);
    let loss = cpt_loss_graph(&mut tape, params, &vars, chunks, score_eos)?;
    tape.scalar_value(loss)
}

/// Aggregated per-step training diagnostics, one CSV row per optimizer step.
#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    pub step: usize,
    pub mean_r_z: f64,
    pub mean_r_c_raw: f64,
    pub mean_r_c_clipped: f64,
    pub mean_r_l_raw: f64,
    pub mean_r_l_clipped: f64,
    pub frac_clip_c: f64,
    pub frac_clip_l: f64,
    pub frac_equal: f64,
    pub loss: f64,
}

impl StepDiagnostics {
    pub const CSV_HEADER: &'static str = "step,mean_r_z,mean_r_c_raw,mean_r_c_clipped,mean_r_l_raw,mean_r_l_clipped,frac_clip_c,frac_clip_l,frac_equal,loss";

    /// Means over the instances that contributed to one optimizer step.
    pub fn from_breakdowns(step: usize, parts: &[RewardBreakdown]) -> Self {
        let n = parts.len().max(1) as f64;
        let mean = |f: fn(&RewardBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        StepDiagnostics {
            step,
            mean_r_z: mean(|b| b.r_z),
            mean_r_c_raw: mean(|b| b.r_c_raw),
            mean_r_c_clipped: mean(|b| b.r_c_clipped),
            mean_r_l_raw: mean(|b| b.r_l_raw),
            mean_r_l_clipped: mean(|b| b.r_l_clipped),
            frac_clip_c: mean(|b| f64::from(b.r_c_raw > b.r_c_clipped)),
            frac_clip_l: mean(|b| f64::from(b.r_l_raw < b.r_l_clipped)),
            frac_equal: mean(|b| f64::from(b.weights.beta == 0.0)),
            loss: mean(|b| b.loss),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_r_z,
            self.mean_r_c_raw,
            self.mean_r_c_clipped,
            self.mean_r_l_raw,
            self.mean_r_l_clipped,
            self.frac_clip_c,
            self.frac_clip_l,
            self.frac_equal,
            self.loss
        )
    }
}
