//! Parameter containers for the decoder-only model and its attachments
//! (bridges, low-rank adapters, rescaling vectors).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{input, Result};
use crate::tensor::Tensor;

/// Layer normalization flavour used by every block (pre-LN residual blocks).
pub const LAYERNORM_KIND: &str = "pre_layernorm";
/// Feed-forward nonlinearity (tanh-approximated GELU).
pub const ACTIVATION_KIND: &str = "gelu_tanh";

/// Uniform access to the tensors of a parameter group, in a fixed order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

/// Deterministic Gaussian sampling on top of a seeded ChaCha stream.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            // Box-Muller; u1 in (0, 1].
            let u1 = 1.0 - self.rng.random::<f64>();
            let u2 = self.rng.random::<f64>();
            let z = libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2);
            *x = (z * std as f64) as f32;
        }
        t
    }

    pub(crate) fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = (self.rng.random::<f64>() * 2.0 - 1.0) as f32 * bound;
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }
}

/// Affine map `x·W + b` with `W` stored input-major (`in × out`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(init: &mut Init, d_in: usize, d_out: usize, std: f32) -> Self {
        Self {
            weight: init.normal(&[d_in, d_out], std),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Tensor::eye(d),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// One pre-LN transformer block: causal self-attention then a GELU MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl TransformerLayer {
    pub(crate) fn init(cfg: &ModelConfig, init: &mut Init) -> Self {
        let d = cfg.hidden_dim;
        let std = 0.02;
        let resid_std = std / libm::sqrtf(2.0 * cfg.num_layers as f32);
        Self {
            ln1: LayerNorm::new(d),
            wq: Linear::init(init, d, d, std),
            wk: Linear::init(init, d, d, std),
            wv: Linear::init(init, d, d, std),
            wo: Linear::init(init, d, d, resid_std),
            ln2: LayerNorm::new(d),
            ffn_in: Linear::init(init, d, cfg.ffn_dim, std),
            ffn_out: Linear::init(init, cfg.ffn_dim, d, resid_std),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.wq.d_in()
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_in.d_out()
    }

    /// Checks every tensor against hidden size `d` (the FFN width is
    /// read from the layer itself).
    pub fn check_shapes(&self, d: usize) -> Result<()> {
        let f = self.ffn_dim();
        let ok = [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .all(|l| l.weight.shape() == [d, d] && l.bias.shape() == [d])
            && self.ffn_in.weight.shape() == [d, f]
            && self.ffn_in.bias.shape() == [f]
            && self.ffn_out.weight.shape() == [f, d]
            && self.ffn_out.bias.shape() == [d]
            && [&self.ln1, &self.ln2]
                .iter()
                .all(|n| n.gamma.shape() == [d] && n.beta.shape() == [d]);
        if ok {
            Ok(())
        } else {
            Err(input(format!("layer tensors inconsistent with hidden_dim {d}")))
        }
    }
}

impl ParamSet for TransformerLayer {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("ln1.gamma", &self.ln1.gamma),
            ("ln1.beta", &self.ln1.beta),
            ("attn.wq.weight", &self.wq.weight),
            ("attn.wq.bias", &self.wq.bias),
            ("attn.wk.weight", &self.wk.weight),
            ("attn.wk.bias", &self.wk.bias),
            ("attn.wv.weight", &self.wv.weight),
            ("attn.wv.bias", &self.wv.bias),
            ("attn.wo.weight", &self.wo.weight),
            ("attn.wo.bias", &self.wo.bias),
            ("ln2.gamma", &self.ln2.gamma),
            ("ln2.beta", &self.ln2.beta),
            ("ffn.in.weight", &self.ffn_in.weight),
            ("ffn.in.bias", &self.ffn_in.bias),
            ("ffn.out.weight", &self.ffn_out.weight),
            ("ffn.out.bias", &self.ffn_out.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.ln1.gamma,
            &mut self.ln1.beta,
            &mut self.wq.weight,
            &mut self.wq.bias,
            &mut self.wk.weight,
            &mut self.wk.bias,
            &mut self.wv.weight,
            &mut self.wv.bias,
            &mut self.wo.weight,
            &mut self.wo.bias,
            &mut self.ln2.gamma,
            &mut self.ln2.beta,
            &mut self.ffn_in.weight,
            &mut self.ffn_in.bias,
            &mut self.ffn_out.weight,
            &mut self.ffn_out.bias,
        ]
    }
}

/// Token and learned absolute position embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// `vocab × d`
    pub tokens: Tensor,
    /// `max_seq_len × d`
    pub positions: Tensor,
}

impl ParamSet for Embedding {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("embed.tokens", &self.tokens), ("embed.positions", &self.positions)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.tokens, &mut self.positions]
    }
}

/// Final layer norm plus the output projection. `lm_head` is `None` when
/// the projection is tied to the token embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub ln_f: LayerNorm,
    /// `d × vocab`
    pub lm_head: Option<Tensor>,
}

impl ParamSet for Head {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![("head.ln_f.gamma", &self.ln_f.gamma), ("head.ln_f.beta", &self.ln_f.beta)];
        if let Some(w) = &self.lm_head {
            v.push(("head.lm_head", w));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.ln_f.gamma, &mut self.ln_f.beta];
        if let Some(w) = &mut self.lm_head {
            v.push(w);
        }
        v
    }
}

/// Pair of affine maps wrapped around a transplanted organ:
/// `ψ_out(organ(ψ_in(h)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bridge {
    pub input: Linear,
    pub output: Linear,
}

impl Bridge {
    /// Identity-initialized bridge (`W = I`, `b = 0`).
    pub fn identity(d: usize) -> Self {
        Self {
            input: Linear::identity(d),
            output: Linear::identity(d),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.input.d_in()
    }
}

impl ParamSet for Bridge {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("bridge.in.weight", &self.input.weight),
            ("bridge.in.bias", &self.input.bias),
            ("bridge.out.weight", &self.output.weight),
            ("bridge.out.bias", &self.output.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.input.weight,
            &mut self.input.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }
}

/// A bridge attached around layers `start..end` of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeSlot {
    pub start: usize,
    pub end: usize,
    pub bridge: Bridge,
}

/// Low-rank update `x·W + scale·(x·B)·A`, `B: d_in×r` (zero at init),
/// `A: r×d_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRank {
    pub b: Tensor,
    pub a: Tensor,
    pub scale: f32,
}

impl LowRank {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `scale · B·A`, the dense weight delta.
    pub fn delta(&self) -> Tensor {
        let (d_in, r, d_out) = (self.b.shape()[0], self.rank(), self.a.shape()[1]);
        let mut out = Tensor::zeros(&[d_in, d_out]);
        crate::tensor::gemm(d_in, r, d_out, self.b.data(), false, self.a.data(), false, out.data_mut(), 0.0);
        out.data_mut().iter_mut().for_each(|x| *x *= self.scale);
        out
    }
}

/// Per-channel rescaling of keys, values and FFN intermediate activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rescale {
    pub keys: Tensor,
    pub values: Tensor,
    pub ffn: Tensor,
}

impl Rescale {
    pub fn ones(d: usize, ffn: usize) -> Self {
        Self {
            keys: Tensor::full(&[d], 1.0),
            values: Tensor::full(&[d], 1.0),
            ffn: Tensor::full(&[ffn], 1.0),
        }
    }
}

/// Trainable attachments living next to one base layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Adapters {
    pub lora_q: Option<LowRank>,
    pub lora_v: Option<LowRank>,
    pub rescale: Option<Rescale>,
}

impl Adapters {
    pub fn is_empty(&self) -> bool {
        self.lora_q.is_none() && self.lora_v.is_none() && self.rescale.is_none()
    }
}

impl ParamSet for Adapters {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = Vec::new();
        if let Some(l) = &self.lora_q {
            v.push(("lora_q.b", &l.b));
            v.push(("lora_q.a", &l.a));
        }
        if let Some(l) = &self.lora_v {
            v.push(("lora_v.b", &l.b));
            v.push(("lora_v.a", &l.a));
        }
        if let Some(r) = &self.rescale {
            v.push(("ia3.keys", &r.keys));
            v.push(("ia3.values", &r.values));
            v.push(("ia3.ffn", &r.ffn));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        if let Some(l) = &mut self.lora_q {
            v.push(&mut l.b);
            v.push(&mut l.a);
        }
        if let Some(l) = &mut self.lora_v {
            v.push(&mut l.b);
            v.push(&mut l.a);
        }
        if let Some(r) = &mut self.rescale {
            v.push(&mut r.keys);
            v.push(&mut r.values);
            v.push(&mut r.ffn);
        }
        v
    }
}

/// Address of a parameter group. The derived ordering is the canonical
/// group order used for reporting and tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Layer(usize),
    Adapter(usize),
    Bridge(usize),
    Head,
}

/// A decoder-only language model: embeddings, `L` blocks, head, plus any
/// bridges or adapters grafted on by surgery or the baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub embedding: Embedding,
    pub layers: Vec<TransformerLayer>,
    pub head: Head,
    pub bridges: Vec<BridgeSlot>,
    /// Adapter slots keyed by layer index; empty for a plain model.
    pub adapters: BTreeMap<usize, Adapters>,
}

impl TransformerModel {
    /// Random GPT-2-style initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let d = config.hidden_dim;
        let embedding = Embedding {
            tokens: init.normal(&[config.vocab_size, d], 0.02),
            positions: init.normal(&[config.max_seq_len, d], 0.01),
        };
        let layers = (0..config.num_layers)
            .map(|_| TransformerLayer::init(&config, &mut init))
            .collect();
        let lm_head = (!config.tied_head).then(|| init.normal(&[d, config.vocab_size], 0.02));
        Ok(Self {
            config,
            embedding,
            layers,
            head: Head {
                ln_f: LayerNorm::new(d),
                lm_head,
            },
            bridges: Vec::new(),
            adapters: BTreeMap::new(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Every parameter group present, in canonical order.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Embedding];
        g.extend((0..self.layers.len()).map(ParamGroup::Layer));
        g.extend(self.adapters.keys().map(|&i| ParamGroup::Adapter(i)));
        g.extend((0..self.bridges.len()).map(ParamGroup::Bridge));
        g.push(ParamGroup::Head);
        g
    }

    pub fn group(&self, g: ParamGroup) -> Option<&dyn ParamSet> {
        match g {
            ParamGroup::Embedding => Some(&self.embedding),
            ParamGroup::Layer(i) => self.layers.get(i).map(|l| l as &dyn ParamSet),
            ParamGroup::Adapter(i) => self.adapters.get(&i).map(|a| a as &dyn ParamSet),
            ParamGroup::Bridge(j) => self.bridges.get(j).map(|b| &b.bridge as &dyn ParamSet),
            ParamGroup::Head => Some(&self.head),
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> Option<&mut dyn ParamSet> {
        match g {
            ParamGroup::Embedding => Some(&mut self.embedding),
            ParamGroup::Layer(i) => self.layers.get_mut(i).map(|l| l as &mut dyn ParamSet),
            ParamGroup::Adapter(i) => self.adapters.get_mut(&i).map(|a| a as &mut dyn ParamSet),
            ParamGroup::Bridge(j) => self.bridges.get_mut(j).map(|b| &mut b.bridge as &mut dyn ParamSet),
            ParamGroup::Head => Some(&mut self.head),
        }
    }

    /// Total scalar parameter count (a tied head is counted once).
    pub fn num_params(&self) -> usize {
        self.groups()
            .into_iter()
            .filter_map(|g| self.group(g))
            .map(|p| p.num_params())
            .sum()
    }

    /// Output projection as `d × vocab` data plus whether it is stored
    /// transposed (tied to the `vocab × d` embedding).
    pub(crate) fn head_matrix(&self) -> (&[f32], bool) {
        match &self.head.lm_head {
            Some(w) => (w.data(), false),
            None => (self.embedding.tokens.data(), true),
        }
    }

    /// Checks structural invariants: layer count, shapes, finiteness and
    /// the placement of bridges and adapters.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        if self.layers.len() != cfg.num_layers {
            return Err(input(format!(
                "model has {} layers but config says {}",
                self.layers.len(),
                cfg.num_layers
            )));
        }
        self.check_body()?;
        if self.embedding.tokens.shape() != [cfg.vocab_size, d]
            || self.embedding.positions.shape() != [cfg.max_seq_len, d]
        {
            return Err(input("embedding shape inconsistent with config"));
        }
        for g in self.groups() {
            if !self.group(g).is_some_and(|p| p.is_finite()) {
                return Err(input(format!("non-finite parameters in {g:?}")));
            }
        }
        Ok(())
    }

    /// Shape checks that do not depend on `num_layers` (shared with the
    /// donor wrapper, whose organ may be empty).
    pub(crate) fn check_body(&self) -> Result<()> {
        let d = self.hidden_dim();
        let v = self.config.vocab_size;
        for l in &self.layers {
            l.check_shapes(d)?;
        }
        if self.head.ln_f.gamma.shape() != [d] {
            return Err(input("final layernorm shape inconsistent with config"));
        }
        if let Some(w) = &self.head.lm_head {
            if w.shape() != [d, v] {
                return Err(input("lm_head shape inconsistent with config"));
            }
        }
        let mut covered: Vec<Range<usize>> = Vec::new();
        for s in &self.bridges {
            if s.start >= s.end || s.end > self.layers.len() || s.bridge.hidden_dim() != d {
                return Err(input(format!("bridge slot {}..{} is invalid", s.start, s.end)));
            }
            if covered.iter().any(|r| r.start < s.end && s.start < r.end) {
                return Err(input("bridge slots overlap"));
            }
            covered.push(s.start..s.end);
        }
        for (&i, a) in &self.adapters {
            if i >= self.layers.len() || a.is_empty() {
                return Err(input(format!("adapter slot {i} is invalid")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 11,
            max_seq_len: 6,
            layernorm_eps: 1e-5,
            tied_head: true,
        }
    }

    #[test]
    fn init_is_deterministic_and_valid() {
        let a = TransformerModel::new(tiny(), 7).unwrap();
        let b = TransformerModel::new(tiny(), 7).unwrap();
        let c = TransformerModel::new(tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = tiny();
        let (d, f, v, s) = (8, 16, 11, 6);
        let layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
        let m = TransformerModel::new(cfg, 0).unwrap();
        assert_eq!(m.layers[0].num_params(), layer);
        assert_eq!(m.num_params(), v * d + s * d + 3 * layer + 2 * d);
        let untied = TransformerModel::new(ModelConfig { tied_head: false, ..cfg }, 0).unwrap();
        assert_eq!(untied.num_params(), m.num_params() + d * v);
    }

    #[test]
    fn group_order_is_canonical() {
        let m = TransformerModel::new(tiny(), 0).unwrap();
        let g = m.groups();
        assert_eq!(g.first(), Some(&ParamGroup::Embedding));
        assert_eq!(g.last(), Some(&ParamGroup::Head));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn validate_catches_layer_count() {
        let mut m = TransformerModel::new(tiny(), 0).unwrap();
        m.layers.pop();
        assert!(m.validate().is_err());
    }
}
