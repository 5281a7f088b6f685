//! Straightforward f64 re-implementation of the forward pass and loss,
//! written without reuse of the crate's kernels. Used as a finite-difference
//! oracle for the analytic gradients.
#![allow(dead_code)]

use std::collections::BTreeMap;

use transplant_core::{ParamGroup, TransformerModel};

/// Every parameter of a model, widened to f64 and keyed by group and
/// tensor name.
#[derive(Clone)]
pub struct RefModel {
    pub heads: usize,
    pub d: usize,
    pub vocab: usize,
    pub eps: f64,
    pub tied: bool,
    pub num_layers: usize,
    /// (start, end, bridge index)
    pub bridges: Vec<(usize, usize, usize)>,
    pub lora_scale: BTreeMap<usize, (f64, f64)>,
    pub params: BTreeMap<(ParamGroup, &'static str), Vec<f64>>,
}

impl RefModel {
    pub fn new(m: &TransformerModel) -> Self {
        let mut params = BTreeMap::new();
        for g in m.groups() {
            for (name, t) in m.group(g).unwrap().tensors() {
                params.insert((g, name), t.data().iter().map(|&v| v as f64).collect());
            }
        }
        let lora_scale = m
            .adapters
            .iter()
            .map(|(&i, a)| {
                (
                    i,
                    (
                        a.lora_q.as_ref().map_or(0.0, |l| l.scale as f64),
                        a.lora_v.as_ref().map_or(0.0, |l| l.scale as f64),
                    ),
                )
            })
            .collect();
        Self {
            heads: m.config.num_heads,
            d: m.config.hidden_dim,
            vocab: m.config.vocab_size,
            eps: m.config.layernorm_eps as f64,
            tied: m.head.lm_head.is_none(),
            num_layers: m.layers.len(),
            bridges: m.bridges.iter().enumerate().map(|(j, s)| (s.start, s.end, j)).collect(),
            lora_scale,
            params,
        }
    }

    fn p(&self, g: ParamGroup, name: &str) -> &[f64] {
        self.params
            .iter()
            .find(|((gg, n), _)| *gg == g && *n == name)
            .map(|(_, v)| v.as_slice())
            .unwrap_or_else(|| panic!("missing {g:?} {name}"))
    }

    fn maybe(&self, g: ParamGroup, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|((gg, n), _)| *gg == g && *n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Flattened view in the group's tensor order (matches `ParamSet`).
    pub fn flat_len(&self, g: ParamGroup) -> usize {
        self.params.iter().filter(|((gg, _), _)| *gg == g).map(|(_, v)| v.len()).sum()
    }

    /// Adds `delta` to the `index`-th scalar of group `g`, with tensors
    /// taken in `order` (the `ParamSet` order of names).
    pub fn perturb(&mut self, g: ParamGroup, order: &[&'static str], mut index: usize, delta: f64) {
        for name in order {
            let v = self.params.get_mut(&(g, *name)).unwrap();
            if index < v.len() {
                v[index] += delta;
                return;
            }
            index -= v.len();
        }
        panic!("index out of range");
    }

    fn layernorm(&self, x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + self.eps).sqrt();
            for j in 0..d {
                o[j] = (row[j] - mean) * r * gamma[j] + beta[j];
            }
        }
        out
    }

    fn affine(x: &[f64], w: &[f64], b: &[f64], d_in: usize) -> Vec<f64> {
        let d_out = b.len();
        let rows = x.len() / d_in;
        let mut out = vec![0.0; rows * d_out];
        for r in 0..rows {
            for o in 0..d_out {
                let mut s = b[o];
                for i in 0..d_in {
                    s += x[r * d_in + i] * w[i * d_out + o];
                }
                out[r * d_out + o] = s;
            }
        }
        out
    }

    fn matmul(x: &[f64], w: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
        Self::affine(x, w, &vec![0.0; d_out], d_in)
    }

    fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
    }

    fn block(&self, i: usize, x: &[f64], t_len: usize) -> Vec<f64> {
        let d = self.d;
        let g = ParamGroup::Layer(i);
        let ag = ParamGroup::Adapter(i);
        let a = self.layernorm(x, self.p(g, "ln1.gamma"), self.p(g, "ln1.beta"));
        let mut q = Self::affine(&a, self.p(g, "attn.wq.weight"), self.p(g, "attn.wq.bias"), d);
        let mut k = Self::affine(&a, self.p(g, "attn.wk.weight"), self.p(g, "attn.wk.bias"), d);
        let mut v = Self::affine(&a, self.p(g, "attn.wv.weight"), self.p(g, "attn.wv.bias"), d);
        let (sq, sv) = self.lora_scale.get(&i).copied().unwrap_or((0.0, 0.0));
        for (target, scale, bn, an) in [(&mut q, sq, "lora_q.b", "lora_q.a"), (&mut v, sv, "lora_v.b", "lora_v.a")] {
            if let (Some(b), Some(am)) = (self.maybe(ag, bn), self.maybe(ag, an)) {
                let r = b.len() / d;
                let u = Self::matmul(&a, b, d, r);
                let delta = Self::matmul(&u, am, r, d);
                for (t, dv) in target.iter_mut().zip(delta) {
                    *t += scale * dv;
                }
            }
        }
        if let Some(ks) = self.maybe(ag, "ia3.keys") {
            let vs = self.p(ag, "ia3.values");
            for r in 0..t_len {
                for j in 0..d {
                    k[r * d + j] *= ks[j];
                    v[r * d + j] *= vs[j];
                }
            }
        }
        let dh = d / self.heads;
        let mut attn = vec![0.0; t_len * d];
        for h in 0..self.heads {
            for t in 0..t_len {
                let scores: Vec<f64> = (0..=t)
                    .map(|j| (0..dh).map(|c| q[t * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let p = (s - max).exp() / z;
                    for c in 0..dh {
                        attn[t * d + h * dh + c] += p * v[j * d + h * dh + c];
                    }
                }
            }
        }
        let o = Self::affine(&attn, self.p(g, "attn.wo.weight"), self.p(g, "attn.wo.bias"), d);
        let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let m = self.layernorm(&x1, self.p(g, "ln2.gamma"), self.p(g, "ln2.beta"));
        let hid = Self::affine(&m, self.p(g, "ffn.in.weight"), self.p(g, "ffn.in.bias"), d);
        let f = hid.len() / t_len;
        let mut act: Vec<f64> = hid.iter().map(|&v| Self::gelu(v)).collect();
        if let Some(fs) = self.maybe(ag, "ia3.ffn") {
            for r in 0..t_len {
                for j in 0..f {
                    act[r * f + j] *= fs[j];
                }
            }
        }
        let y = Self::affine(&act, self.p(g, "ffn.out.weight"), self.p(g, "ffn.out.bias"), f);
        x1.iter().zip(&y).map(|(a, b)| a + b).collect()
    }

    /// Logits for one sequence, `T × V` row-major.
    pub fn logits(&self, tokens: &[u32]) -> Vec<f64> {
        let d = self.d;
        let t_len = tokens.len();
        let emb = self.p(ParamGroup::Embedding, "embed.tokens");
        let pos = self.p(ParamGroup::Embedding, "embed.positions");
        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            for j in 0..d {
                x[t * d + j] = emb[tok as usize * d + j] + pos[t * d + j];
            }
        }
        for i in 0..self.num_layers {
            if let Some(&(_, _, j)) = self.bridges.iter().find(|b| b.0 == i) {
                let g = ParamGroup::Bridge(j);
                x = Self::affine(&x, self.p(g, "bridge.in.weight"), self.p(g, "bridge.in.bias"), d);
            }
            x = self.block(i, &x, t_len);
            if let Some(&(_, _, j)) = self.bridges.iter().find(|b| b.1 == i + 1) {
                let g = ParamGroup::Bridge(j);
                x = Self::affine(&x, self.p(g, "bridge.out.weight"), self.p(g, "bridge.out.bias"), d);
            }
        }
        let h = self.layernorm(&x, self.p(ParamGroup::Head, "head.ln_f.gamma"), self.p(ParamGroup::Head, "head.ln_f.beta"));
        let v = self.vocab;
        let mut out = vec![0.0; t_len * v];
        for t in 0..t_len {
            for c in 0..v {
                out[t * v + c] = (0..d)
                    .map(|j| {
                        let w = if self.tied {
                            emb[c * d + j]
                        } else {
                            self.p(ParamGroup::Head, "head.lm_head")[j * v + c]
                        };
                        h[t * d + j] * w
                    })
                    .sum();
            }
        }
        out
    }

    /// Token-weighted mean next-token NLL over `batch`.
    pub fn loss(&self, batch: &[&[u32]]) -> f64 {
        let v = self.vocab;
        let mut total = 0.0;
        let mut count = 0;
        for seq in batch {
            let l = self.logits(seq);
            for t in 0..seq.len() - 1 {
                let row = &l[t * v..(t + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[seq[t + 1] as usize];
                count += 1;
            }
        }
        total / count as f64
    }
}
