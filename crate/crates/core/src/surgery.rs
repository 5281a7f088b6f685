//! Donor organ extraction and integration into recipient models.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::freeze::FreezeMask;
use crate::model::{Bridge, BridgeSlot, ParamGroup, ParamSet, TransformerLayer, TransformerModel, ACTIVATION_KIND, LAYERNORM_KIND};

/// Layers per organ when none is requested.
pub const DEFAULT_ORGAN_SIZE: usize = 3;

/// A contiguous run of layers lifted out of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DonorOrgan {
    pub layers: Vec<TransformerLayer>,
    pub source_config: ModelConfig,
    pub extraction_start: usize,
    pub extraction_indices: Vec<usize>,
}

impl DonorOrgan {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn hidden_dim(&self) -> usize {
        self.source_config.hidden_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.layers.len();
        let s = self.extraction_start;
        if k == 0 {
            return Err(Error::Input("organ has no layers".into()));
        }
        if s + k > self.source_config.num_layers {
            return Err(Error::ExtractionDepth {
                start: s,
                count: k,
                depth: self.source_config.num_layers,
            });
        }
        if !self.extraction_indices.iter().copied().eq(s..s + k) {
            return Err(Error::Input(format!(
                "extraction indices {:?} are not {s}..{}",
                self.extraction_indices,
                s + k
            )));
        }
        for l in &self.layers {
            l.check_shapes(self.hidden_dim())?;
            if !l.is_finite() {
                return Err(Error::Input("organ has non-finite parameters".into()));
            }
        }
        Ok(())
    }
}

/// The middle-third start `⌊L/3⌋`.
pub fn default_extraction_start(num_layers: usize) -> usize {
    num_layers / 3
}

/// Deep copies of layers `start..start + count`; `model` is untouched.
pub fn extract(model: &TransformerModel, start: usize, count: usize) -> Result<DonorOrgan> {
    let depth = model.num_layers();
    if count == 0 {
        return Err(Error::Input("organ size must be at least 1".into()));
    }
    if start + count > depth {
        return Err(Error::ExtractionDepth { start, count, depth });
    }
    Ok(DonorOrgan {
        layers: model.layers[start..start + count].to_vec(),
        source_config: model.config,
        extraction_start: start,
        extraction_indices: (start..start + count).collect(),
    })
}

/// [`extract`] at the middle-third start with [`DEFAULT_ORGAN_SIZE`] layers.
pub fn extract_default(model: &TransformerModel) -> Result<DonorOrgan> {
    extract(model, default_extraction_start(model.num_layers()), DEFAULT_ORGAN_SIZE)
}

/// Field-by-field architecture check of a donor against a recipient. An
/// empty list means compatible.
pub fn compatibility_report(
    hidden_dim: usize,
    num_heads: usize,
    layernorm_kind: &str,
    activation_kind: &str,
    recipient: &TransformerModel,
) -> Vec<String> {
    let cfg = &recipient.config;
    let mut out = Vec::new();
    if hidden_dim != cfg.hidden_dim {
        out.push(format!("hidden_dim: donor {hidden_dim} vs recipient {}", cfg.hidden_dim));
    }
    if num_heads != cfg.num_heads {
        out.push(format!("num_heads: donor {num_heads} vs recipient {}", cfg.num_heads));
    }
    if layernorm_kind != LAYERNORM_KIND {
        out.push(format!("layernorm_kind: donor {layernorm_kind} vs recipient {LAYERNORM_KIND}"));
    }
    if activation_kind != ACTIVATION_KIND {
        out.push(format!("activation_kind: donor {activation_kind} vs recipient {ACTIVATION_KIND}"));
    }
    out
}

fn check_organ(organ: &DonorOrgan, recipient: &TransformerModel) -> Result<()> {
    let c = &organ.source_config;
    let report = compatibility_report(c.hidden_dim, c.num_heads, LAYERNORM_KIND, ACTIVATION_KIND, recipient);
    if !report.is_empty() {
        return Err(Error::Compatibility(report));
    }
    for l in &organ.layers {
        if l.check_shapes(recipient.hidden_dim()).is_err() {
            return Err(Error::Compatibility(alloc::vec![format!(
                "organ layer shapes do not match hidden_dim {}",
                recipient.hidden_dim()
            )]));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Swap layers in place; the neighbours on each side train too.
    #[serde(rename = "direct")]
    DirectReplacement,
    /// Swap layers in place and wrap them in identity-initialized bridges.
    #[serde(rename = "bridge")]
    BridgeMediated,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::DirectReplacement => "direct",
            Strategy::BridgeMediated => "bridge",
        }
    }
}

impl core::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Strategy::DirectReplacement),
            "bridge" => Ok(Strategy::BridgeMediated),
            other => Err(Error::Input(format!("unknown strategy {other:?} (expected direct or bridge)"))),
        }
    }
}

/// Where organs go and how they are attached. Organ `i` replaces recipient
/// layers `positions[i]..positions[i] + k_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationPlan {
    pub strategy: Strategy,
    pub positions: Vec<usize>,
}

impl IntegrationPlan {
    pub fn single(strategy: Strategy, position: usize) -> Self {
        Self {
            strategy,
            positions: alloc::vec![position],
        }
    }

    pub fn organ_count(&self) -> usize {
        self.positions.len()
    }

    /// Layers the organ at `p` makes trainable: for direct replacement the
    /// organ plus one neighbour per side, clipped to the model.
    pub fn trainable_span(&self, p: usize, k: usize, depth: usize) -> Range<usize> {
        match self.strategy {
            Strategy::DirectReplacement => p.saturating_sub(1)..(p + k + 1).min(depth),
            Strategy::BridgeMediated => p..p + k,
        }
    }

    /// Checks bounds and that trainable spans are separated by at least one
    /// frozen layer.
    pub fn validate(&self, depth: usize, organ_sizes: &[usize]) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::Plan("plan has no organs".into()));
        }
        if organ_sizes.len() != self.positions.len() {
            return Err(Error::Plan(format!(
                "plan places {} organs but {} were given",
                self.positions.len(),
                organ_sizes.len()
            )));
        }
        let mut spans: Vec<Range<usize>> = Vec::new();
        for (&p, &k) in self.positions.iter().zip(organ_sizes) {
            if k == 0 || p + k > depth {
                return Err(Error::Plan(format!(
                    "position {p} with a {k}-layer organ does not fit a {depth}-layer recipient (valid positions 0..={})",
                    depth.saturating_sub(k)
                )));
            }
            spans.push(self.trainable_span(p, k, depth));
        }
        spans.sort_by_key(|r| r.start);
        for w in spans.windows(2) {
            if w[1].start <= w[0].end {
                return Err(Error::Plan(format!(
                    "trainable layer ranges {}..{} and {}..{} overlap or touch",
                    w[0].start, w[0].end, w[1].start, w[1].end
                )));
            }
        }
        Ok(())
    }
}

/// A recipient after surgery, with the mask recovery training starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct Transplant {
    pub model: TransformerModel,
    pub mask: FreezeMask,
    /// Recipient layer indices now holding donor weights.
    pub donor_layers: Vec<usize>,
    /// Bridge groups added by surgery (bridge mediation only).
    pub bridges: Vec<ParamGroup>,
}

impl Transplant {
    /// Mask training only the added bridges.
    pub fn bridges_only(&self) -> FreezeMask {
        FreezeMask::only(&self.model, &self.bridges)
    }
}

/// Applies `plan` to a copy of `recipient`, placing `organs[i]` at
/// `plan.positions[i]`.
pub fn integrate(recipient: &TransformerModel, organs: &[&DonorOrgan], plan: &IntegrationPlan) -> Result<Transplant> {
    for organ in organs {
        check_organ(organ, recipient)?;
    }
    let sizes: Vec<usize> = organs.iter().map(|o| o.len()).collect();
    let depth = recipient.num_layers();
    plan.validate(depth, &sizes)?;
    for slot in &recipient.bridges {
        for (&p, &k) in plan.positions.iter().zip(&sizes) {
            if slot.start < p + k && p < slot.end {
                return Err(Error::Plan(format!(
                    "position {p} overlaps an existing bridge over layers {}..{}",
                    slot.start, slot.end
                )));
            }
        }
    }

    let mut model = recipient.clone();
    let mut donor_layers = Vec::new();
    let mut trainable_layers = Vec::new();
    for (organ, &p) in organs.iter().zip(&plan.positions) {
        let k = organ.len();
        model.layers[p..p + k].clone_from_slice(&organ.layers);
        donor_layers.extend(p..p + k);
        trainable_layers.extend(plan.trainable_span(p, k, depth));
        if plan.strategy == Strategy::BridgeMediated {
            model.bridges.push(BridgeSlot {
                start: p,
                end: p + k,
                bridge: Bridge::identity(model.hidden_dim()),
            });
        }
    }
    model.bridges.sort_by_key(|s| s.start);
    donor_layers.sort_unstable();

    let new_bridges: Vec<ParamGroup> = model
        .bridges
        .iter()
        .enumerate()
        .filter(|(_, s)| plan.positions.contains(&s.start) && plan.strategy == Strategy::BridgeMediated)
        .map(|(j, _)| ParamGroup::Bridge(j))
        .collect();
    let mut groups: Vec<ParamGroup> = trainable_layers.into_iter().map(ParamGroup::Layer).collect();
    groups.extend(&new_bridges);
    let mask = FreezeMask::only(&model, &groups);
    Ok(Transplant {
        model,
        mask,
        donor_layers,
        bridges: new_bridges,
    })
}

/// Distance of a bridge from the identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeDeviation {
    pub input: f64,
    pub output: f64,
    pub mean: f64,
}

fn identity_distance(w: &crate::tensor::Tensor) -> f64 {
    let d = w.cols();
    let mut s = 0.0f64;
    for (i, &v) in w.data().iter().enumerate() {
        let e = if i / d == i % d { v as f64 - 1.0 } else { v as f64 };
        s += e * e;
    }
    libm::sqrt(s)
}

/// `‖W_in − I‖_F`, `‖W_out − I‖_F` and their mean.
pub fn bridge_deviation(bridge: &Bridge) -> BridgeDeviation {
    let input = identity_distance(&bridge.input.weight);
    let output = identity_distance(&bridge.output.weight);
    BridgeDeviation {
        input,
        output,
        mean: (input + output) / 2.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::forward;
    use crate::tensor::Tensor;

    fn cfg(l: usize) -> ModelConfig {
        ModelConfig {
            num_layers: l,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 16,
            max_seq_len: 16,
            layernorm_eps: 1e-5,
            tied_head: true,
        }
    }

    #[test]
    fn middle_third_defaults() {
        assert_eq!(default_extraction_start(12), 4);
        assert_eq!(default_extraction_start(24), 8);
        assert_eq!(default_extraction_start(1), 0);
        let m = TransformerModel::new(cfg(12), 0).unwrap();
        assert_eq!(extract_default(&m).unwrap().extraction_indices, [4, 5, 6]);
        assert_eq!(
            extract(&m, 10, 3),
            Err(Error::ExtractionDepth {
                start: 10,
                count: 3,
                depth: 12
            })
        );
    }

    #[test]
    fn extraction_leaves_source_alone() {
        let m = TransformerModel::new(cfg(6), 3).unwrap();
        let before = m.clone();
        let organ = extract(&m, 2, 2).unwrap();
        assert_eq!(m, before);
        assert_eq!(organ.layers[..], m.layers[2..4]);
        organ.validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let m = TransformerModel::new(cfg(6), 4).unwrap();
        let organ = extract(&m, 2, 3).unwrap();
        let t = integrate(&m, &[&organ], &IntegrationPlan::single(Strategy::DirectReplacement, 2)).unwrap();
        let toks = [1, 5, 2, 9, 9, 0];
        assert_eq!(forward(&t.model, &toks).unwrap(), forward(&m, &toks).unwrap());
    }

    #[test]
    fn freeze_cardinality() {
        let donor = TransformerModel::new(cfg(12), 1).unwrap();
        let recipient = TransformerModel::new(cfg(12), 2).unwrap();
        let organ = extract_default(&donor).unwrap();
        let direct = integrate(&recipient, &[&organ], &IntegrationPlan::single(Strategy::DirectReplacement, 4)).unwrap();
        assert_eq!(direct.mask.trainable_layers(), [3, 4, 5, 6, 7]);
        assert_eq!(direct.mask.trainable_groups().len(), 5);
        let edge = integrate(&recipient, &[&organ], &IntegrationPlan::single(Strategy::DirectReplacement, 0)).unwrap();
        assert_eq!(edge.mask.trainable_layers(), [0, 1, 2, 3]);
        let end = integrate(&recipient, &[&organ], &IntegrationPlan::single(Strategy::DirectReplacement, 9)).unwrap();
        assert_eq!(end.mask.trainable_layers(), [8, 9, 10, 11]);
        let bridged = integrate(&recipient, &[&organ], &IntegrationPlan::single(Strategy::BridgeMediated, 4)).unwrap();
        assert_eq!(bridged.mask.trainable_layers(), [4, 5, 6]);
        assert_eq!(bridged.bridges, [ParamGroup::Bridge(0)]);
        assert_eq!(
            bridged.mask.trainable_groups(),
            [ParamGroup::Layer(4), ParamGroup::Layer(5), ParamGroup::Layer(6), ParamGroup::Bridge(0)]
        );
    }

    #[test]
    fn overlapping_or_touching_plans_rejected() {
        let m = TransformerModel::new(cfg(12), 1).unwrap();
        let o = extract(&m, 0, 3).unwrap();
        let plan = |s, p: &[usize]| IntegrationPlan {
            strategy: s,
            positions: p.to_vec(),
        };
        // spans 0..4 and 4..8 touch
        assert!(matches!(
            integrate(&m, &[&o, &o], &plan(Strategy::DirectReplacement, &[0, 5])),
            Err(Error::Plan(_))
        ));
        integrate(&m, &[&o, &o], &plan(Strategy::DirectReplacement, &[0, 6])).unwrap();
        assert!(matches!(
            integrate(&m, &[&o, &o], &plan(Strategy::BridgeMediated, &[0, 3])),
            Err(Error::Plan(_))
        ));
        let two = integrate(&m, &[&o, &o], &plan(Strategy::BridgeMediated, &[4, 0])).unwrap();
        assert_eq!(two.model.bridges.iter().map(|b| b.start).collect::<Vec<_>>(), [0, 4]);
        assert!(matches!(
            integrate(&m, &[&o], &plan(Strategy::DirectReplacement, &[10])),
            Err(Error::Plan(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_compatibility_error() {
        let small = TransformerModel::new(cfg(4), 1).unwrap();
        let mut big_cfg = cfg(4);
        big_cfg.hidden_dim = 16;
        let big = TransformerModel::new(big_cfg, 1).unwrap();
        let organ = extract(&small, 0, 2).unwrap();
        let err = integrate(&big, &[&organ], &IntegrationPlan::single(Strategy::DirectReplacement, 1)).unwrap_err();
        assert!(matches!(err, Error::Compatibility(ref v) if v.len() == 1 && v[0].starts_with("hidden_dim")));
        assert_eq!(compatibility_report(16, 3, "post_layernorm", "relu", &small).len(), 4);
    }

    #[test]
    fn deviation_values() {
        assert_eq!(
            bridge_deviation(&Bridge::identity(4)),
            BridgeDeviation {
                input: 0.0,
                output: 0.0,
                mean: 0.0
            }
        );
        let mut b = Bridge::identity(4);
        b.input.weight.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        assert_eq!(bridge_deviation(&b).input, 2.0);
        assert_eq!(bridge_deviation(&b).mean, 1.0);
        let mut h = Bridge::identity(2);
        h.output.weight = Tensor::from_vec(&[2, 2], alloc::vec![1.5, -2.0, 0.5, 1.0]).unwrap();
        // (0.5² + 2² + 0.5² + 0²)^½
        assert!((bridge_deviation(&h).output - 4.5f64.sqrt()).abs() < 1e-12);
    }
}
