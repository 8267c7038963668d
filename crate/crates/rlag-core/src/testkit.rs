//! Test-only reference implementations, kept independent of the tape engine.
//!
//! `reference_token_logprobs` re-runs the transformer with plain nested loops
//! and direct softmax probabilities (`p = exp(l) / sum exp(l)`, then `ln p`),
//! sharing no code with the forward pass under test. Sampler and reward tests
//! hold the production path to this oracle.

use crate::lm::LmParams;

struct Mat<'a> {
    data: &'a [f64],
    cols: usize,
}

impl<'a> Mat<'a> {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

fn mat<'a>(params: &'a LmParams, idx: usize) -> Mat<'a> {
    let t = params.tensors()[idx].as_ref();
    Mat {
        data: t.data(),
        cols: t.shape()[1],
    }
}

fn layer_norm_row(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn gelu(x: f64) -> f64 {
    let k = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (k * (x + 0.044_715 * x * x * x)).tanh())
}

/// `log p(ids[t] | ids[..t])` for every `t >= condition_len`, computed by an
/// independent straight-line forward pass.
pub fn reference_token_logprobs(params: &LmParams, ids: &[usize], condition_len: usize) -> Vec<f64> {
    let cfg = params.config();
    let t_len = ids.len();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();

    let tok_emb = mat(params, 0);
    let pos_emb = mat(params, 1);

    // x[t] = tok_emb[ids[t]] + pos_emb[t]
    let mut x: Vec<Vec<f64>> = (0..t_len)
        .map(|t| (0..d).map(|j| tok_emb.at(ids[t], j) + pos_emb.at(t, j)).collect())
        .collect();

    for l in 0..cfg.n_layers {
        let base = 2 + l * 6;
        let wq = mat(params, base);
        let wk = mat(params, base + 1);
        let wv = mat(params, base + 2);
        let wo = mat(params, base + 3);
        let w1 = mat(params, base + 4);
        let w2 = mat(params, base + 5);

        let h: Vec<Vec<f64>> = x.iter().map(|row| layer_norm_row(row)).collect();
        let project = |w: &Mat, row: &[f64]| -> Vec<f64> {
            (0..w.cols)
                .map(|j| (0..d).map(|i| row[i] * w.at(i, j)).sum())
                .collect()
        };
        let q: Vec<Vec<f64>> = h.iter().map(|r| project(&wq, r)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| project(&wk, r)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| project(&wv, r)).collect();

        let mut attn_out = vec![vec![0.0; d]; t_len];
        for head in 0..heads {
            let off = head * hd;
            for t in 0..t_len {
                // causal attention weights via direct softmax over s <= t
                let logits: Vec<f64> = (0..=t)
                    .map(|s| {
                        (0..hd).map(|j| q[t][off + j] * k[s][off + j]).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|v| v.exp()).sum();
                for (s, lg) in logits.iter().enumerate() {
                    let w = lg.exp() / z;
                    for j in 0..hd {
                        attn_out[t][off + j] += w * v[s][off + j];
                    }
                }
            }
        }
        for t in 0..t_len {
            let proj = project(&wo, &attn_out[t]);
            for j in 0..d {
                x[t][j] += proj[j];
            }
        }
        for t in 0..t_len {
            let h2 = layer_norm_row(&x[t]);
            let mut ff: Vec<f64> = (0..cfg.d_ff)
                .map(|j| (0..d).map(|i| h2[i] * w1.at(i, j)).sum())
                .collect();
            for f in ff.iter_mut() {
                *f = gelu(*f);
            }
            for j in 0..d {
                x[t][j] += (0..cfg.d_ff).map(|i| ff[i] * w2.at(i, j)).sum::<f64>();
            }
        }
    }

    let w_out = mat(params, params.tensors().len() - 1);
    let mut out = Vec::new();
    for t in condition_len..t_len {
        let row = layer_norm_row(&x[t - 1]);
        let logits: Vec<f64> = (0..cfg.vocab_size)
            .map(|vch| (0..d).map(|i| row[i] * w_out.at(i, vch)).sum())
            .collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        out.push((logits[ids[t]].exp() / z).ln());
    }
    out
}
