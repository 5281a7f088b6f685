//! Causal language-modeling loss and perplexity.

use alloc::vec::Vec;

use crate::error::{input, Result};
use crate::forward::{batch_logits, Segments};
use crate::model::TransformerModel;
use crate::tensor::Tensor;

/// Sequences per forward pass during evaluation. Fixed so that evaluation
/// order, and therefore every rounding, is reproducible.
pub const EVAL_BATCH: usize = 8;

/// Summed next-token negative log-likelihood over a stacked batch, plus the
/// number of predicted positions. When `grad` is given it receives
/// `∂(sum / count_total)/∂logits` scaled by `grad_scale`.
pub(crate) fn nll_sum(
    logits: &[f32],
    vocab: usize,
    tokens: &[u32],
    segs: &Segments,
    mut grad: Option<(&mut [f32], f32)>,
) -> (f64, usize) {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for seg in segs.iter() {
        if seg.len() < 2 {
            continue;
        }
        for r in seg.start..seg.end - 1 {
            let row = &logits[r * vocab..(r + 1) * vocab];
            let target = tokens[r + 1] as usize;
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let z: f64 = row.iter().map(|&v| libm::exp(v as f64 - max)).sum();
            let lse = max + libm::log(z);
            total += lse - row[target] as f64;
            count += 1;
            if let Some((g, scale)) = grad.as_mut() {
                let grow = &mut g[r * vocab..(r + 1) * vocab];
                for (gv, &v) in grow.iter_mut().zip(row) {
                    *gv = (libm::exp(v as f64 - lse) as f32) * *scale;
                }
                grow[target] -= *scale;
            }
        }
    }
    (total, count)
}

/// Mean causal LM loss of `logits` (`seq_len × V`) against `tokens`:
/// position `t` predicts token `t + 1`.
pub fn clm_loss(logits: &Tensor, tokens: &[u32]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(input("clm_loss needs at least 2 tokens"));
    }
    if logits.shape().len() != 2 || logits.rows() != tokens.len() {
        return Err(input("logits must be seq_len × vocab"));
    }
    let v = logits.cols();
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= v) {
        return Err(input(alloc::format!("token id {t} out of range for vocab {v}")));
    }
    let segs = Segments::new([tokens.len()]);
    let (sum, n) = nll_sum(logits.data(), v, tokens, &segs, None);
    Ok(sum / n as f64)
}

/// Summed NLL and predicted-token count over `data`, evaluated in fixed
/// batches of [`EVAL_BATCH`] sequences.
pub fn eval_nll(model: &TransformerModel, data: &[Vec<u32>]) -> Result<(f64, usize)> {
    let v = model.config.vocab_size;
    let mut total = 0.0;
    let mut count = 0;
    for chunk in data.chunks(EVAL_BATCH) {
        let batch: Vec<&[u32]> = chunk.iter().map(|s| s.as_slice()).collect();
        let (logits, segs) = batch_logits(model, &batch)?;
        let tokens: Vec<u32> = chunk.iter().flatten().copied().collect();
        let (s, n) = nll_sum(&logits, v, &tokens, &segs, None);
        total += s;
        count += n;
    }
    Ok((total, count))
}

/// Token-weighted mean causal LM loss over `data`.
pub fn mean_loss(model: &TransformerModel, data: &[Vec<u32>]) -> Result<f64> {
    let (sum, n) = eval_nll(model, data)?;
    if n == 0 {
        return Err(input("evaluation data has no predictable tokens"));
    }
    Ok(sum / n as f64)
}

/// `exp` of the token-weighted mean causal LM loss over all sequences.
pub fn perplexity(model: &TransformerModel, data: &[Vec<u32>]) -> Result<f64> {
    if data.is_empty() {
        return Err(input("perplexity needs non-empty evaluation data"));
    }
    Ok(libm::exp(mean_loss(model, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_v() {
        for v in [2usize, 16, 258] {
            let logits = Tensor::full(&[5, v], 0.37);
            let l = clm_loss(&logits, &[0, 1, 0, 1, 1]).unwrap();
            assert!((l - libm::log(v as f64)).abs() < 1e-12, "{v}: {l}");
        }
        let l16 = clm_loss(&Tensor::zeros(&[3, 16]), &[1, 2, 3]).unwrap();
        assert!((l16 - 2.772_588_722_239_781).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut logits = Tensor::zeros(&[3, 4]);
        for (r, t) in [(0, 2usize), (1, 3)] {
            logits.row_mut(r)[t] = 60.0;
        }
        let l = clm_loss(&logits, &[0, 2, 3]).unwrap();
        assert!((0.0..1e-20).contains(&l));
    }

    #[test]
    fn hand_softmax_three_tokens() {
        // Rows 0 and 1 predict tokens 1 and 3.
        let rows = [[1.0f64, 2.0, 0.5, -1.0], [0.0, -0.5, 0.25, 2.0]];
        let logits = Tensor::from_vec(
            &[3, 4],
            rows.iter().flatten().map(|&v| v as f32).chain([0.0; 4]).collect(),
        )
        .unwrap();
        let by_hand = |r: &[f64; 4], t: usize| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            -(r[t].exp() / z).ln()
        };
        let expected = (by_hand(&rows[0], 1) + by_hand(&rows[1], 3)) / 2.0;
        let got = clm_loss(&logits, &[2, 1, 3]).unwrap();
        assert!((got - expected).abs() < 1e-7, "{got} vs {expected}");
    }

    #[test]
    fn short_sequence_rejected() {
        assert!(clm_loss(&Tensor::zeros(&[1, 4]), &[0]).is_err());
    }
}
