//! Forward pass over ragged batches of token sequences.
//!
//! Sequences of a batch are stacked row-wise (`N = Σ len` rows of width
//! `d`); projections run as one GEMM over the stack while attention runs
//! per sequence, so right-padding never needs to be materialized.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{input, Result};
use crate::model::{Adapters, LayerNorm, Linear, TransformerLayer, TransformerModel};
use crate::tensor::{add_row_bias, gemm, matmul, Tensor};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// `tanh` through one `exp`; within a few ulps of `tanhf` in absolute
/// terms and several times cheaper.
#[inline]
fn tanh(u: f32) -> f32 {
    if u.abs() > 9.0 {
        return u.signum();
    }
    1.0 - 2.0 / (libm::expf(2.0 * u) + 1.0)
}

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row boundaries of the sequences stacked in a batch.
#[derive(Clone, Debug)]
pub(crate) struct Segments {
    pub starts: Vec<usize>,
    pub total: usize,
}

impl Segments {
    pub fn new(lens: impl IntoIterator<Item = usize>) -> Self {
        let mut starts = Vec::new();
        let mut total = 0;
        for l in lens {
            starts.push(total);
            total += l;
        }
        Self { starts, total }
    }

    pub fn iter(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.starts.iter().enumerate().map(move |(i, &s)| {
            let e = self.starts.get(i + 1).copied().unwrap_or(self.total);
            s..e
        })
    }
}

pub(crate) struct NormCache {
    pub xhat: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub(crate) fn layernorm(x: &[f32], d: usize, ln: &LayerNorm, eps: f32, keep: bool) -> (Vec<f32>, Option<NormCache>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = if keep { vec![0.0; x.len()] } else { Vec::new() };
    let mut rstds = Vec::with_capacity(if keep { rows } else { 0 });
    let (g, b) = (ln.gamma.data(), ln.beta.data());
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rstd = 1.0 / libm::sqrtf(var + eps);
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            let h = (row[j] - mean) * rstd;
            o[j] = h * g[j] + b[j];
            if keep {
                xhat[r * d + j] = h;
            }
        }
        if keep {
            rstds.push(rstd);
        }
    }
    (out, keep.then_some(NormCache { xhat, rstd: rstds }))
}

pub(crate) fn linear(x: &[f32], rows: usize, lin: &Linear) -> Vec<f32> {
    let mut y = matmul(x, rows, &lin.weight);
    add_row_bias(&mut y, lin.bias.data());
    y
}

/// Everything one block's backward pass needs.
pub(crate) struct LayerCache {
    pub ln1: NormCache,
    pub a: Vec<f32>,
    pub q: Vec<f32>,
    /// Keys/values before any rescaling.
    pub k_raw: Vec<f32>,
    pub v_raw: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    /// `a·B` for the low-rank query/value updates.
    pub lora_q_u: Option<Vec<f32>>,
    pub lora_v_u: Option<Vec<f32>>,
    /// Softmax rows, one `T×T` block per (sequence, head).
    pub probs: Vec<Vec<f32>>,
    pub attn: Vec<f32>,
    pub ln2: NormCache,
    pub m: Vec<f32>,
    pub h: Vec<f32>,
    /// GELU output before FFN rescaling.
    pub g: Vec<f32>,
    pub g_scaled: Vec<f32>,
}

fn low_rank_add(y: &mut [f32], a: &[f32], rows: usize, lr: &crate::model::LowRank) -> Vec<f32> {
    let (d_in, r) = (lr.b.shape()[0], lr.rank());
    let d_out = lr.a.shape()[1];
    let mut u = vec![0.0; rows * r];
    gemm(rows, d_in, r, a, false, lr.b.data(), false, &mut u, 0.0);
    let mut delta = vec![0.0; rows * d_out];
    gemm(rows, r, d_out, &u, false, lr.a.data(), false, &mut delta, 0.0);
    for (yv, dv) in y.iter_mut().zip(&delta) {
        *yv += lr.scale * dv;
    }
    u
}

fn scale_cols(x: &[f32], s: &[f32]) -> Vec<f32> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(s.len()) {
        for (v, c) in row.iter_mut().zip(s) {
            *v *= *c;
        }
    }
    out
}

pub(crate) fn layer_forward(
    layer: &TransformerLayer,
    adapters: Option<&Adapters>,
    x: &[f32],
    segs: &Segments,
    heads: usize,
    eps: f32,
    keep: bool,
) -> (Vec<f32>, Option<LayerCache>) {
    let d = layer.hidden_dim();
    let n = segs.total;
    let f = layer.ffn_dim();
    let dh = d / heads;
    let scale = 1.0 / libm::sqrtf(dh as f32);

    let (a, ln1) = layernorm(x, d, &layer.ln1, eps, keep);
    let mut q = linear(&a, n, &layer.wq);
    let k_raw = linear(&a, n, &layer.wk);
    let mut v_raw = linear(&a, n, &layer.wv);
    let mut lora_q_u = None;
    let mut lora_v_u = None;
    let mut rescale = None;
    if let Some(ad) = adapters {
        if let Some(lr) = &ad.lora_q {
            lora_q_u = Some(low_rank_add(&mut q, &a, n, lr));
        }
        if let Some(lr) = &ad.lora_v {
            lora_v_u = Some(low_rank_add(&mut v_raw, &a, n, lr));
        }
        rescale = ad.rescale.as_ref();
    }
    let (k, v) = match rescale {
        Some(r) => (scale_cols(&k_raw, r.keys.data()), scale_cols(&v_raw, r.values.data())),
        None => (k_raw.clone(), v_raw.clone()),
    };

    let mut attn = vec![0.0; n * d];
    let mut probs = Vec::new();
    for seg in segs.iter() {
        let t_len = seg.len();
        for hd in 0..heads {
            let c0 = hd * dh;
            let mut p = vec![0.0f32; t_len * t_len];
            for t in 0..t_len {
                let qt = &q[(seg.start + t) * d + c0..(seg.start + t) * d + c0 + dh];
                let row = &mut p[t * t_len..t * t_len + t + 1];
                let mut max = f32::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                    *s = qt.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = libm::expf(*s - max);
                    z += *s;
                }
                let out = &mut attn[(seg.start + t) * d + c0..(seg.start + t) * d + c0 + dh];
                for (j, s) in row.iter_mut().enumerate() {
                    *s /= z;
                    let vj = &v[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += *s * vv;
                    }
                }
            }
            if keep {
                probs.push(p);
            }
        }
    }

    let mut x1 = linear(&attn, n, &layer.wo);
    for (o, xi) in x1.iter_mut().zip(x) {
        *o += *xi;
    }

    let (m, ln2) = layernorm(&x1, d, &layer.ln2, eps, keep);
    let h = linear(&m, n, &layer.ffn_in);
    let g: Vec<f32> = h.iter().map(|&v| gelu(v)).collect();
    let g_scaled = match rescale {
        Some(r) => scale_cols(&g, r.ffn.data()),
        None => g.clone(),
    };
    let mut y = vec![0.0; n * d];
    gemm(n, f, d, &g_scaled, false, layer.ffn_out.weight.data(), false, &mut y, 0.0);
    add_row_bias(&mut y, layer.ffn_out.bias.data());
    for (o, xi) in y.iter_mut().zip(&x1) {
        *o += *xi;
    }

    let cache = keep.then(|| LayerCache {
        ln1: ln1.unwrap(),
        a,
        q,
        k_raw,
        v_raw,
        k,
        v,
        lora_q_u,
        lora_v_u,
        probs,
        attn,
        ln2: ln2.unwrap(),
        m,
        h,
        g,
        g_scaled,
    });
    (y, cache)
}

/// Caches of one forward pass, in execution order.
pub(crate) struct Trace {
    pub segs: Segments,
    pub tokens: Vec<u32>,
    /// Input to the bridge-in map applied before layer `i`, if any.
    pub bridge_in: Vec<Option<Vec<f32>>>,
    /// Input to the bridge-out map applied after layer `i`, if any.
    pub bridge_out: Vec<Option<Vec<f32>>>,
    pub layers: Vec<LayerCache>,
    pub ln_f: NormCache,
    pub final_hidden: Vec<f32>,
    pub logits: Vec<f32>,
}

pub(crate) fn check_tokens(model: &TransformerModel, seq: &[u32]) -> Result<()> {
    let cfg = &model.config;
    if seq.len() > cfg.max_seq_len {
        return Err(input(format!(
            "sequence length {} exceeds max_seq_len {}",
            seq.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&t) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(input(format!("token id {t} out of range for vocab {}", cfg.vocab_size)));
    }
    Ok(())
}

pub(crate) fn embed_batch(model: &TransformerModel, batch: &[&[u32]]) -> Result<(Vec<f32>, Segments)> {
    let d = model.hidden_dim();
    for s in batch {
        check_tokens(model, s)?;
    }
    let segs = Segments::new(batch.iter().map(|s| s.len()));
    let mut x = vec![0.0; segs.total * d];
    for (seq, range) in batch.iter().zip(segs.iter()) {
        for (t, (&tok, r)) in seq.iter().zip(range).enumerate() {
            let e = model.embedding.tokens.row(tok as usize);
            let p = model.embedding.positions.row(t);
            for ((o, a), b) in x[r * d..(r + 1) * d].iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
    }
    Ok((x, segs))
}

/// Runs layers `range` (with any bridges/adapters attached there) over a
/// stacked hidden state.
pub(crate) fn run_layers(
    model: &TransformerModel,
    mut x: Vec<f32>,
    segs: &Segments,
    range: Range<usize>,
    mut trace: Option<&mut Trace>,
) -> Vec<f32> {
    let heads = model.config.num_heads;
    let eps = model.config.layernorm_eps;
    let n = segs.total;
    let keep = trace.is_some();
    for i in range {
        if let Some(slot) = model.bridges.iter().find(|s| s.start == i) {
            let y = linear(&x, n, &slot.bridge.input);
            if let Some(tr) = trace.as_deref_mut() {
                tr.bridge_in[i] = Some(core::mem::replace(&mut x, y));
            } else {
                x = y;
            }
        }
        let (y, cache) = layer_forward(&model.layers[i], model.adapters.get(&i), &x, segs, heads, eps, keep);
        x = y;
        if let (Some(tr), Some(c)) = (trace.as_deref_mut(), cache) {
            tr.layers.push(c);
        }
        if let Some(slot) = model.bridges.iter().find(|s| s.end == i + 1) {
            let y = linear(&x, n, &slot.bridge.output);
            if let Some(tr) = trace.as_deref_mut() {
                tr.bridge_out[i] = Some(core::mem::replace(&mut x, y));
            } else {
                x = y;
            }
        }
    }
    x
}

pub(crate) fn head_forward(model: &TransformerModel, x: &[f32], rows: usize, keep: bool) -> (Vec<f32>, Vec<f32>, Option<NormCache>) {
    let d = model.hidden_dim();
    let v = model.config.vocab_size;
    let (xf, cache) = layernorm(x, d, &model.head.ln_f, model.config.layernorm_eps, keep);
    let (w, transposed) = model.head_matrix();
    let mut logits = vec![0.0; rows * v];
    gemm(rows, d, v, &xf, false, w, transposed, &mut logits, 0.0);
    (logits, xf, cache)
}

/// Full forward pass over a batch, keeping every cache for backward.
pub(crate) fn trace_batch(model: &TransformerModel, batch: &[&[u32]]) -> Result<Trace> {
    let (x, segs) = embed_batch(model, batch)?;
    let l = model.num_layers();
    let mut trace = Trace {
        segs: segs.clone(),
        tokens: batch.iter().flat_map(|s| s.iter().copied()).collect(),
        bridge_in: vec![None; l],
        bridge_out: vec![None; l],
        layers: Vec::with_capacity(l),
        ln_f: NormCache { xhat: Vec::new(), rstd: Vec::new() },
        final_hidden: Vec::new(),
        logits: Vec::new(),
    };
    let x = run_layers(model, x, &segs, 0..l, Some(&mut trace));
    let (logits, xf, ln_f) = head_forward(model, &x, segs.total, true);
    trace.ln_f = ln_f.unwrap();
    trace.final_hidden = xf;
    trace.logits = logits;
    Ok(trace)
}

/// Logits (`N×V`, sequences stacked) for a batch, without caches.
pub(crate) fn batch_logits(model: &TransformerModel, batch: &[&[u32]]) -> Result<(Vec<f32>, Segments)> {
    let (x, segs) = embed_batch(model, batch)?;
    let x = run_layers(model, x, &segs, 0..model.num_layers(), None);
    let (logits, _, _) = head_forward(model, &x, segs.total, false);
    Ok((logits, segs))
}

/// Next-token logits for one sequence: a `seq_len × vocab` tensor whose
/// row `t` depends only on tokens `0..=t`.
pub fn forward(model: &TransformerModel, tokens: &[u32]) -> Result<Tensor> {
    let (logits, _) = batch_logits(model, &[tokens])?;
    Ok(Tensor::from_vec(&[tokens.len(), model.config.vocab_size], logits).unwrap())
}

/// Token plus position embeddings for one sequence (`seq_len × d`).
pub fn embed(model: &TransformerModel, tokens: &[u32]) -> Result<Tensor> {
    let (x, _) = embed_batch(model, &[tokens])?;
    Ok(Tensor::from_vec(&[tokens.len(), model.hidden_dim()], x).unwrap())
}

/// Runs only layers `range` over hidden states `hidden` (`seq_len × d`).
/// An empty range returns the input unchanged.
pub fn forward_layers(model: &TransformerModel, hidden: &Tensor, range: Range<usize>) -> Result<Tensor> {
    let d = model.hidden_dim();
    if range.start > range.end || range.end > model.num_layers() {
        return Err(input(format!(
            "layer range {}..{} outside 0..{}",
            range.start,
            range.end,
            model.num_layers()
        )));
    }
    if hidden.shape().len() != 2 || hidden.cols() != d {
        return Err(input(format!("hidden states must be seq_len×{d}")));
    }
    if hidden.rows() > model.config.max_seq_len {
        return Err(input("sequence length exceeds max_seq_len"));
    }
    let segs = Segments::new([hidden.rows()]);
    let x = run_layers(model, hidden.data().to_vec(), &segs, range, None);
    Ok(Tensor::from_vec(&[hidden.rows(), d], x).unwrap())
}
