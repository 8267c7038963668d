//! Option scoring and paired augmented/naive sampling.
//!
//! Each multiple-choice option is scored by the summed log-probability of its
//! token segment given `prompt || option`; the sampled generation is the
//! argmax option. The augmented pass prepends the retrieved snippets to the
//! prompt, the naive pass does not, and the pair of selections (`y_w`, `y_l`)
//! plus their equality drives the reward schedule downstream.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::Snippet;
use crate::lm::{LmParams, TokenSeq, Vocabulary};
use crate::tensor::Tape;

/// One multiple-choice question with its cached retrieval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McqInstance {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold_index: usize,
    pub snippet_ids: Vec<usize>,
}

impl McqInstance {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::contract(format!(
                "instance {}: needs at least 2 options",
                self.id
            )));
        }
        if self.gold_index >= self.options.len() {
            return Err(Error::contract(format!(
                "instance {}: gold_index {} out of range",
                self.id, self.gold_index
            )));
        }
        for (i, a) in self.options.iter().enumerate() {
            for b in &self.options[i + 1..] {
                if a == b {
                    return Err(Error::contract(format!(
                        "instance {}: duplicate option {a:?}",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Log-probability mass of one option segment.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionScore {
    pub option_index: usize,
    pub logprob_sum: f64,
    pub length: usize,
}

/// How the argmax over options is taken. The option-segment sum is the
/// default; the per-token mean is available because the evaluation protocol
/// leaves normalization unstated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringRule {
    SumLogProb,
    MeanLogProb,
}

impl Default for ScoringRule {
    fn default() -> Self {
        ScoringRule::SumLogProb
    }
}

/// The sampled pair: augmented selection `y_w`, naive selection `y_l`.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub instance_id: String,
    pub y_w: (usize, TokenSeq),
    pub y_l: (usize, TokenSeq),
    pub equal: bool,
    pub scores_aug: Vec<OptionScore>,
    pub scores_naive: Vec<OptionScore>,
    /// Parameter version that produced this sample; the trainer asserts
    /// samples are consumed in the iteration that drew them.
    pub param_version: u64,
}

/// Renders the scoring prompt. With snippets:
/// `related literature: <texts joined by newline>\nquestion: <q>\nanswer: `;
/// without, the literature line is absent entirely.
pub fn render_prompt(x: &McqInstance, snippets: Option<&[&Snippet]>) -> String {
    match snippets {
        Some(snips) if !snips.is_empty() => {
            let ctx: Vec<&str> = snips.iter().map(|s| s.text.as_str()).collect();
            format!(
                "related literature: {}\nquestion: {}\nanswer: ",
                ctx.join("\n"),
                x.question
            )
        }
        _ => format!("question: {}\nanswer: ", x.question),
    }
}

/// `[BOS] + tokenize(prompt)`: the conditioning ids shared by sampling,
/// reward computation, and evaluation.
pub fn prompt_token_ids(
    x: &McqInstance,
    snippets: Option<&[&Snippet]>,
    vocab: &Vocabulary,
) -> Result<Vec<usize>> {
    let prompt = render_prompt(x, snippets);
    let seq = vocab.tokenize(&prompt)?;
    let mut ids = Vec::with_capacity(seq.len() + 1);
    ids.push(Vocabulary::BOS);
    ids.extend(seq.ids);
    Ok(ids)
}

/// Scores every option by its summed option-segment log-probability under
/// `prompt || option`.
///
/// When every option is a single token, one forward pass over the prompt
/// provides all scores; causal masking makes this bitwise-identical to
/// scoring each `prompt || option` separately.
pub fn score_options(
    params: &LmParams,
    x: &McqInstance,
    snippets: Option<&[&Snippet]>,
    vocab: &Vocabulary,
) -> Result<Vec<OptionScore>> {
    let prompt_ids = prompt_token_ids(x, snippets, vocab)?;
    let option_tokens: Vec<TokenSeq> = x
        .options
        .iter()
        .map(|o| vocab.tokenize(o))
        .collect::<Result<_>>()?;

    let overflow = |len: usize| Error::ContextOverflow {
        len,
        context_len: params.config().context_len,
        detail: format!(" (instance {})", x.id),
    };
    let longest = option_tokens.iter().map(|t| t.len()).max().unwrap_or(0);
    if prompt_ids.len() + longest > params.config().context_len {
        return Err(overflow(prompt_ids.len() + longest));
    }

    let mut scores = Vec::with_capacity(option_tokens.len());
    if option_tokens.iter().all(|t| t.len() == 1) {
        let mut tape = Tape::new();
        let vars = params.leaves(&mut tape, false);
        let sel = prompt_ids.len() - 1..prompt_ids.len();
        let logprobs = params.forward_rows(&mut tape, &vars, &prompt_ids, sel)?;
        let row = tape.value(logprobs);
        for (i, opt) in option_tokens.iter().enumerate() {
            scores.push(OptionScore {
                option_index: i,
                logprob_sum: row.at2(0, opt.ids[0]),
                length: 1,
            });
        }
    } else {
        for (i, opt) in option_tokens.iter().enumerate() {
            let mut ids = prompt_ids.clone();
            ids.extend(&opt.ids);
            let lps = params.sequence_logprobs(&ids, prompt_ids.len())?;
            scores.push(OptionScore {
                option_index: i,
                logprob_sum: lps.iter().sum(),
                length: opt.len(),
            });
        }
    }
    Ok(scores)
}

/// Argmax under the scoring rule, ties broken by lowest option index.
pub fn select_best(scores: &[OptionScore], rule: ScoringRule) -> usize {
    let key = |s: &OptionScore| match rule {
        ScoringRule::SumLogProb => s.logprob_sum,
        ScoringRule::MeanLogProb => s.logprob_sum / s.length as f64,
    };
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if key(s) > key(&scores[best]) {
            best = i;
        }
    }
    best
}

/// Draws the augmented/naive selection pair for one instance.
pub fn sample_pair(
    params: &LmParams,
    x: &McqInstance,
    zx: &[&Snippet],
    vocab: &Vocabulary,
    rule: ScoringRule,
) -> Result<SampleOutcome> {
    let scores_aug = score_options(params, x, Some(zx), vocab)?;
    let scores_naive = score_options(params, x, None, vocab)?;
    let w_idx = select_best(&scores_aug, rule);
    let l_idx = select_best(&scores_naive, rule);
    Ok(SampleOutcome {
        instance_id: x.id.clone(),
        y_w: (w_idx, vocab.tokenize(&x.options[w_idx])?),
        y_l: (l_idx, vocab.tokenize(&x.options[l_idx])?),
        equal: w_idx == l_idx,
        scores_aug,
        scores_naive,
        param_version: params.version(),
    })
}

/// Reads a dataset of JSONL instances, validating each record.
pub fn load_dataset(path: &Path) -> Result<Vec<McqInstance>> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: McqInstance = serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

pub fn save_dataset(instances: &[McqInstance], path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
