//! Reverse-mode gradients for the decoder stack.
//!
//! Backpropagation stops at the lowest point of the network that still
//! holds trainable parameters, and weight gradients are only materialized
//! for trainable groups.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{input, Result};
use crate::forward::{gelu_grad, trace_batch, LayerCache, NormCache, Segments};
use crate::freeze::{FreezeMask, GroupMask};
use crate::loss::nll_sum;
use crate::model::{Adapters, Bridge, Embedding, Head, LayerNorm, Linear, LowRank, ParamGroup, ParamSet, TransformerLayer, TransformerModel};
use crate::tensor::{gemm, sum_rows_into};

/// Gradients for the trainable groups only. Frozen groups are absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub embedding: Option<Embedding>,
    pub layers: BTreeMap<usize, TransformerLayer>,
    pub adapters: BTreeMap<usize, Adapters>,
    pub bridges: BTreeMap<usize, Bridge>,
    pub head: Option<Head>,
}

impl Gradients {
    pub fn is_empty(&self) -> bool {
        self.groups().is_empty()
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = Vec::new();
        if self.embedding.is_some() {
            g.push(ParamGroup::Embedding);
        }
        g.extend(self.layers.keys().map(|&i| ParamGroup::Layer(i)));
        g.extend(self.adapters.keys().map(|&i| ParamGroup::Adapter(i)));
        g.extend(self.bridges.keys().map(|&i| ParamGroup::Bridge(i)));
        if self.head.is_some() {
            g.push(ParamGroup::Head);
        }
        g
    }

    pub fn group(&self, g: ParamGroup) -> Option<&dyn ParamSet> {
        match g {
            ParamGroup::Embedding => self.embedding.as_ref().map(|e| e as &dyn ParamSet),
            ParamGroup::Layer(i) => self.layers.get(&i).map(|l| l as &dyn ParamSet),
            ParamGroup::Adapter(i) => self.adapters.get(&i).map(|a| a as &dyn ParamSet),
            ParamGroup::Bridge(i) => self.bridges.get(&i).map(|b| b as &dyn ParamSet),
            ParamGroup::Head => self.head.as_ref().map(|h| h as &dyn ParamSet),
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> Option<&mut dyn ParamSet> {
        match g {
            ParamGroup::Embedding => self.embedding.as_mut().map(|e| e as &mut dyn ParamSet),
            ParamGroup::Layer(i) => self.layers.get_mut(&i).map(|l| l as &mut dyn ParamSet),
            ParamGroup::Adapter(i) => self.adapters.get_mut(&i).map(|a| a as &mut dyn ParamSet),
            ParamGroup::Bridge(i) => self.bridges.get_mut(&i).map(|b| b as &mut dyn ParamSet),
            ParamGroup::Head => self.head.as_mut().map(|h| h as &mut dyn ParamSet),
        }
    }

    /// Squared L2 norm over every stored gradient, in f64.
    pub fn norm_sq(&self) -> f64 {
        self.groups()
            .into_iter()
            .filter_map(|g| self.group(g))
            .flat_map(|p| p.tensors().into_iter().map(|(_, t)| t.norm() * t.norm()))
            .sum()
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.groups() {
            if let Some(p) = self.group_mut(g) {
                for t in p.tensors_mut() {
                    t.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
    }

    /// Zeroes the scalars a partial mask marks frozen.
    pub(crate) fn apply_partial(&mut self, mask: &FreezeMask) {
        for (g, m) in mask.iter() {
            if let (GroupMask::Partial(bits), Some(p)) = (m, self.group_mut(g)) {
                let mut idx = 0;
                for t in p.tensors_mut() {
                    for x in t.data_mut() {
                        if !bits[idx] {
                            *x = 0.0;
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn zeroed<T: ParamSet + Clone>(p: &T) -> T {
    let mut z = p.clone();
    z.zero();
    z
}

/// What the backward sweep must produce.
struct Needs {
    embedding: bool,
    head: bool,
    layer: Vec<bool>,
    adapter: Vec<bool>,
    /// `bridge[j]`: bridge slot `j` is trainable.
    bridge: Vec<bool>,
    /// `need_in[i]`: gradient w.r.t. the input of layer `i` is required.
    need_in: Vec<bool>,
    need_out: Vec<bool>,
}

impl Needs {
    fn new(model: &TransformerModel, mask: &FreezeMask) -> Self {
        let l = model.num_layers();
        let layer: Vec<bool> = (0..l).map(|i| mask.is_trainable(ParamGroup::Layer(i))).collect();
        let adapter: Vec<bool> = (0..l).map(|i| mask.is_trainable(ParamGroup::Adapter(i))).collect();
        let bridge: Vec<bool> = (0..model.bridges.len())
            .map(|j| mask.is_trainable(ParamGroup::Bridge(j)))
            .collect();
        let embedding = mask.is_trainable(ParamGroup::Embedding);
        let head = mask.is_trainable(ParamGroup::Head);
        let mut need_in = vec![false; l];
        let mut need_out = vec![false; l];
        for i in 0..l {
            let below = embedding
                || (0..i).any(|j| layer[j] || adapter[j])
                || model.bridges.iter().zip(&bridge).any(|(s, &t)| t && s.start <= i);
            need_in[i] = below;
            need_out[i] = below || layer[i] || adapter[i];
        }
        Self {
            embedding,
            head,
            layer,
            adapter,
            bridge,
            need_in,
            need_out,
        }
    }
}

fn norm_backward(
    dy: &[f32],
    cache: &NormCache,
    ln: &LayerNorm,
    grad: Option<&mut LayerNorm>,
    dx: Option<&mut [f32]>,
) {
    let d = ln.gamma.len();
    let gamma = ln.gamma.data();
    if let Some(LayerNorm { gamma: dg, beta: db }) = grad {
        let (dg, db) = (dg.data_mut(), db.data_mut());
        for (r, row) in dy.chunks_exact(d).enumerate() {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            for j in 0..d {
                dg[j] += row[j] * xh[j];
                db[j] += row[j];
            }
        }
    }
    if let Some(dx) = dx {
        for (r, row) in dy.chunks_exact(d).enumerate() {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let rstd = cache.rstd[r];
            let mut mean_g = 0.0f32;
            let mut mean_gx = 0.0f32;
            for j in 0..d {
                let g = row[j] * gamma[j];
                mean_g += g;
                mean_gx += g * xh[j];
            }
            mean_g /= d as f32;
            mean_gx /= d as f32;
            let out = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] += rstd * (row[j] * gamma[j] - mean_g - xh[j] * mean_gx);
            }
        }
    }
}

/// Gradient of `y = x·W + b`: accumulates `dW`, `db` when `grad` is given
/// and returns `dy·Wᵀ` when `want_dx`.
fn linear_backward(x: &[f32], dy: &[f32], rows: usize, lin: &Linear, grad: Option<&mut Linear>, want_dx: bool) -> Option<Vec<f32>> {
    let (d_in, d_out) = (lin.d_in(), lin.d_out());
    if let Some(g) = grad {
        gemm(d_in, rows, d_out, x, true, dy, false, g.weight.data_mut(), 1.0);
        sum_rows_into(dy, g.bias.data_mut());
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; rows * d_in];
        gemm(rows, d_out, d_in, dy, false, lin.weight.data(), true, &mut dx, 0.0);
        dx
    })
}

/// Low-rank branch `y += s·(a·B)·A` with cached `u = a·B`.
fn low_rank_backward(a: &[f32], u: &[f32], dy: &[f32], rows: usize, lr: &LowRank, grad: Option<&mut LowRank>, da: Option<&mut [f32]>) {
    let (d_in, r, d_out) = (lr.b.shape()[0], lr.rank(), lr.a.shape()[1]);
    let s = lr.scale;
    // du = s·dy·Aᵀ
    let mut du = vec![0.0; rows * r];
    gemm(rows, d_out, r, dy, false, lr.a.data(), true, &mut du, 0.0);
    du.iter_mut().for_each(|x| *x *= s);
    if let Some(g) = grad {
        let mut ga = vec![0.0; r * d_out];
        gemm(r, rows, d_out, u, true, dy, false, &mut ga, 0.0);
        for (o, v) in g.a.data_mut().iter_mut().zip(&ga) {
            *o += s * v;
        }
        gemm(d_in, rows, r, a, true, &du, false, g.b.data_mut(), 1.0);
    }
    if let Some(da) = da {
        gemm(rows, r, d_in, &du, false, lr.b.data(), true, da, 1.0);
    }
}

/// Column-rescale backward: `y = x ⊙ s`. Returns `dx`, accumulates `ds`.
fn rescale_backward(x: &[f32], dy: &[f32], s: &[f32], ds: Option<&mut [f32]>) -> Vec<f32> {
    let c = s.len();
    if let Some(ds) = ds {
        for (xr, dr) in x.chunks_exact(c).zip(dy.chunks_exact(c)) {
            for j in 0..c {
                ds[j] += xr[j] * dr[j];
            }
        }
    }
    let mut dx = dy.to_vec();
    for row in dx.chunks_exact_mut(c) {
        for (v, sc) in row.iter_mut().zip(s) {
            *v *= *sc;
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    layer: &TransformerLayer,
    adapters: Option<&Adapters>,
    cache: &LayerCache,
    dy: Vec<f32>,
    segs: &Segments,
    heads: usize,
    mut grad: Option<&mut TransformerLayer>,
    mut agrad: Option<&mut Adapters>,
    want_dx: bool,
) -> Option<Vec<f32>> {
    let d = layer.hidden_dim();
    let f = layer.ffn_dim();
    let n = segs.total;
    let dh = d / heads;
    let scale = 1.0 / libm::sqrtf(dh as f32);
    let rescale = adapters.and_then(|a| a.rescale.as_ref());

    // FFN: y = x1 + g_scaled·W2 + b2
    let mut dx1 = dy.clone();
    let dgs = linear_backward(&cache.g_scaled, &dy, n, &layer.ffn_out, grad.as_deref_mut().map(|g| &mut g.ffn_out), true).unwrap();
    let dg = match rescale {
        Some(r) => {
            let ds = agrad.as_deref_mut().and_then(|a| a.rescale.as_mut()).map(|r| r.ffn.data_mut());
            rescale_backward(&cache.g, &dgs, r.ffn.data(), ds)
        }
        None => dgs,
    };
    let dh_pre: Vec<f32> = dg.iter().zip(&cache.h).map(|(g, &h)| g * gelu_grad(h)).collect();
    debug_assert_eq!(dh_pre.len(), n * f);
    let dm = linear_backward(&cache.m, &dh_pre, n, &layer.ffn_in, grad.as_deref_mut().map(|g| &mut g.ffn_in), true).unwrap();
    norm_backward(&dm, &cache.ln2, &layer.ln2, grad.as_deref_mut().map(|g| &mut g.ln2), Some(&mut dx1));

    // Attention: x1 = x + attn·Wo + bo
    let dattn = linear_backward(&cache.attn, &dx1, n, &layer.wo, grad.as_deref_mut().map(|g| &mut g.wo), true).unwrap();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut probs = cache.probs.iter();
    let mut dp = Vec::new();
    for seg in segs.iter() {
        let t_len = seg.len();
        for hd in 0..heads {
            let p = probs.next().unwrap();
            let c0 = hd * dh;
            let cols = |r: usize| r * d + c0..r * d + c0 + dh;
            dp.clear();
            dp.resize(t_len, 0.0f32);
            for t in 0..t_len {
                let rt = seg.start + t;
                let prow = &p[t * t_len..t * t_len + t + 1];
                let dout = &dattn[cols(rt)];
                let mut dot = 0.0f32;
                for j in 0..=t {
                    let rj = seg.start + j;
                    let vj = &cache.v[cols(rj)];
                    dp[j] = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += dp[j] * prow[j];
                    let dvj = &mut dv[cols(rj)];
                    for (o, g) in dvj.iter_mut().zip(dout) {
                        *o += prow[j] * g;
                    }
                }
                for j in 0..=t {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let rj = seg.start + j;
                    for c in 0..dh {
                        dq[rt * d + c0 + c] += ds * cache.k[rj * d + c0 + c];
                        dk[rj * d + c0 + c] += ds * cache.q[rt * d + c0 + c];
                    }
                }
            }
        }
    }
    if let Some(r) = rescale {
        let (dsk, dsv) = match agrad.as_deref_mut().and_then(|a| a.rescale.as_mut()) {
            Some(crate::model::Rescale { keys, values, .. }) => (Some(keys.data_mut()), Some(values.data_mut())),
            None => (None, None),
        };
        dk = rescale_backward(&cache.k_raw, &dk, r.keys.data(), dsk);
        dv = rescale_backward(&cache.v_raw, &dv, r.values.data(), dsv);
    }

    // LN1 parameter gradients need ∂a even when ∂x is not requested.
    let need_da = want_dx || grad.is_some();
    let mut da = if need_da { vec![0.0; n * d] } else { Vec::new() };
    let mut add_da = |part: Option<Vec<f32>>| {
        if let Some(part) = part {
            for (o, v) in da.iter_mut().zip(&part) {
                *o += *v;
            }
        }
    };
    add_da(linear_backward(&cache.a, &dq, n, &layer.wq, grad.as_deref_mut().map(|g| &mut g.wq), need_da));
    add_da(linear_backward(&cache.a, &dk, n, &layer.wk, grad.as_deref_mut().map(|g| &mut g.wk), need_da));
    add_da(linear_backward(&cache.a, &dv, n, &layer.wv, grad.as_deref_mut().map(|g| &mut g.wv), need_da));
    if let Some(ad) = adapters {
        if let (Some(lr), Some(u)) = (&ad.lora_q, &cache.lora_q_u) {
            let g = agrad.as_deref_mut().and_then(|a| a.lora_q.as_mut());
            low_rank_backward(&cache.a, u, &dq, n, lr, g, need_da.then_some(&mut da[..]));
        }
        if let (Some(lr), Some(u)) = (&ad.lora_v, &cache.lora_v_u) {
            let g = agrad.and_then(|a| a.lora_v.as_mut());
            low_rank_backward(&cache.a, u, &dv, n, lr, g, need_da.then_some(&mut da[..]));
        }
    }
    if need_da {
        let dx = want_dx.then_some(&mut dx1[..]);
        norm_backward(&da, &cache.ln1, &layer.ln1, grad.map(|g| &mut g.ln1), dx);
    }
    want_dx.then_some(dx1)
}

/// Loss and gradients for a batch of sequences under `mask`.
///
/// The loss is the token-weighted mean next-token NLL over the whole batch;
/// gradients are returned only for groups the mask leaves trainable.
pub fn loss_and_gradients(model: &TransformerModel, batch: &[&[u32]], mask: &FreezeMask) -> Result<(f64, Gradients)> {
    mask.validate(model)?;
    let trace = trace_batch(model, batch)?;
    let v = model.config.vocab_size;
    let d = model.hidden_dim();
    let n = trace.segs.total;
    let count: usize = trace.segs.iter().map(|s| s.len().saturating_sub(1)).sum();
    if count == 0 {
        return Err(input("batch has no predictable tokens (every sequence shorter than 2)"));
    }
    let needs = Needs::new(model, mask);
    let mut grads = Gradients::default();
    let mut dlogits = vec![0.0f32; n * v];
    let (sum, _) = nll_sum(&trace.logits, v, &trace.tokens, &trace.segs, Some((&mut dlogits, 1.0 / count as f32)));
    let loss = sum / count as f64;

    if needs.embedding {
        grads.embedding = Some(zeroed(&model.embedding));
    }
    if needs.head {
        grads.head = Some(zeroed(&model.head));
    }
    let l = model.num_layers();
    let any_below = l > 0 && needs.need_out[l - 1] || (l == 0 && needs.embedding);

    // Output projection.
    let (w, tied) = model.head_matrix();
    if let Some(hw) = grads.head.as_mut().and_then(|h| h.lm_head.as_mut()) {
        gemm(d, n, v, &trace.final_hidden, true, &dlogits, false, hw.data_mut(), 1.0);
    }
    if tied {
        if let Some(e) = grads.embedding.as_mut() {
            gemm(v, n, d, &dlogits, true, &trace.final_hidden, false, e.tokens.data_mut(), 1.0);
        }
    }
    if !needs.head && !any_below {
        grads.apply_partial(mask);
        return Ok((loss, grads));
    }
    let mut dxf = vec![0.0; n * d];
    gemm(n, v, d, &dlogits, false, w, !tied, &mut dxf, 0.0);
    let mut dx = if any_below { Some(vec![0.0; n * d]) } else { None };
    norm_backward(&dxf, &trace.ln_f, &model.head.ln_f, grads.head.as_mut().map(|h| &mut h.ln_f), dx.as_deref_mut());

    let heads = model.config.num_heads;
    for i in (0..l).rev() {
        if !needs.need_out[i] {
            break;
        }
        let mut dy = dx.take().unwrap();
        if let Some(xin) = &trace.bridge_out[i] {
            let j = model.bridges.iter().position(|s| s.end == i + 1).unwrap();
            let g = if needs.bridge[j] {
                Some(&mut grads.bridges.entry(j).or_insert_with(|| zeroed(&model.bridges[j].bridge)).output)
            } else {
                None
            };
            dy = linear_backward(xin, &dy, n, &model.bridges[j].bridge.output, g, true).unwrap();
        }
        let lg = needs.layer[i].then(|| grads.layers.entry(i).or_insert_with(|| zeroed(&model.layers[i])));
        let ag = if needs.adapter[i] {
            Some(grads.adapters.entry(i).or_insert_with(|| zeroed(&model.adapters[&i])))
        } else {
            None
        };
        let want = needs.need_in[i];
        let mut out = layer_backward(&model.layers[i], model.adapters.get(&i), &trace.layers[i], dy, &trace.segs, heads, lg, ag, want);
        if let Some(xin) = &trace.bridge_in[i] {
            let j = model.bridges.iter().position(|s| s.start == i).unwrap();
            if let Some(dyb) = out.take() {
                let g = if needs.bridge[j] {
                    Some(&mut grads.bridges.entry(j).or_insert_with(|| zeroed(&model.bridges[j].bridge)).input)
                } else {
                    None
                };
                let below = needs.embedding || (i > 0 && needs.need_out[i - 1]);
                out = linear_backward(xin, &dyb, n, &model.bridges[j].bridge.input, g, below);
            }
        }
        dx = out;
    }

    if let (Some(e), Some(dx)) = (grads.embedding.as_mut(), dx.as_ref()) {
        let mut r = 0;
        for seg in trace.segs.iter() {
            for t in 0..seg.len() {
                let tok = trace.tokens[r] as usize;
                let row = &dx[r * d..(r + 1) * d];
                for (o, g) in e.tokens.row_mut(tok).iter_mut().zip(row) {
                    *o += *g;
                }
                for (o, g) in e.positions.row_mut(t).iter_mut().zip(row) {
                    *o += *g;
                }
                r += 1;
            }
        }
    }
    grads.apply_partial(mask);
    Ok((loss, grads))
}

/// Mean CLM loss and gradients for a single sequence.
pub fn backward(model: &TransformerModel, tokens: &[u32], mask: &FreezeMask) -> Result<(f64, Gradients)> {
    loss_and_gradients(model, &[tokens], mask)
}
