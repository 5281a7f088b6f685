//! Standalone donor training behind a frozen copy of the source embedding.

use alloc::vec::Vec;

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::freeze::FreezeMask;
use crate::model::{Head, ParamGroup, TransformerModel};
use crate::surgery::DonorOrgan;
use crate::tensor::Tensor;
use crate::train::{train, Clock, TrainReport};

/// Frozen embedding, the organ's layers, and the source head.
///
/// Stored as a `TransformerModel` whose layers are the organ and whose head
/// is an untied copy, so the embedding can stay frozen while the head
/// trains.
#[derive(Clone, Debug, PartialEq)]
pub struct WrapperModel {
    pub model: TransformerModel,
    pub source_config: ModelConfig,
    pub extraction_start: usize,
    pub head_trainable: bool,
}

/// The source's output projection as an explicit `d × V` matrix.
fn untied_head(source: &TransformerModel) -> Tensor {
    match &source.head.lm_head {
        Some(w) => w.clone(),
        None => {
            let (v, d) = (source.config.vocab_size, source.hidden_dim());
            let e = source.embedding.tokens.data();
            let mut out = Tensor::zeros(&[d, v]);
            let o = out.data_mut();
            for t in 0..v {
                for j in 0..d {
                    o[j * v + t] = e[t * d + j];
                }
            }
            out
        }
    }
}

/// Builds the wrapper around copies of `source`'s embedding and head.
pub fn build_wrapper(source: &TransformerModel, organ: &DonorOrgan, head_trainable: bool) -> Result<WrapperModel> {
    let d = source.hidden_dim();
    let mut mismatch = Vec::new();
    if organ.hidden_dim() != d {
        mismatch.push(alloc::format!("hidden_dim: organ {} vs source {d}", organ.hidden_dim()));
    }
    if organ.source_config.num_heads != source.config.num_heads {
        mismatch.push(alloc::format!(
            "num_heads: organ {} vs source {}",
            organ.source_config.num_heads,
            source.config.num_heads
        ));
    }
    if mismatch.is_empty() && organ.layers.iter().any(|l| l.check_shapes(d).is_err()) {
        mismatch.push(alloc::format!("organ layer shapes do not match hidden_dim {d}"));
    }
    if !mismatch.is_empty() {
        return Err(Error::Compatibility(mismatch));
    }
    let mut config = source.config;
    config.num_layers = organ.len();
    config.tied_head = false;
    let model = TransformerModel {
        config,
        embedding: source.embedding.clone(),
        layers: organ.layers.clone(),
        head: Head {
            ln_f: source.head.ln_f.clone(),
            lm_head: Some(untied_head(source)),
        },
        bridges: Vec::new(),
        adapters: Default::default(),
    };
    Ok(WrapperModel {
        model,
        source_config: organ.source_config,
        extraction_start: organ.extraction_start,
        head_trainable,
    })
}

impl WrapperModel {
    /// Embedding frozen, organ trainable, head per `head_trainable`.
    pub fn mask(&self) -> FreezeMask {
        let mut m = FreezeMask::all_trainable(&self.model);
        m.set(ParamGroup::Embedding, false);
        m.set(ParamGroup::Head, self.head_trainable);
        m
    }

    /// The wrapper's current layers as an organ with the original
    /// extraction metadata.
    pub fn organ(&self) -> DonorOrgan {
        let s = self.extraction_start;
        DonorOrgan {
            layers: self.model.layers.clone(),
            source_config: self.source_config,
            extraction_start: s,
            extraction_indices: (s..s + self.model.layers.len()).collect(),
        }
    }
}

/// Trains the organ inside `wrapper` and returns the trained organ.
pub fn train_donor(
    wrapper: &mut WrapperModel,
    data: &[Vec<u32>],
    config: &TrainConfig,
    clock: &dyn Clock,
) -> Result<(DonorOrgan, TrainReport)> {
    let mask = wrapper.mask();
    let report = train(&mut wrapper.model, data, config, &mask, clock)?;
    Ok((wrapper.organ(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::forward;
    use crate::loss::perplexity;
    use crate::model::ParamSet;
    use crate::surgery::extract;
    use crate::train::NoClock;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 16,
            max_seq_len: 32,
            layernorm_eps: 1e-5,
            tied_head: true,
        }
    }

    fn corpus() -> Vec<Vec<u32>> {
        (0..6).map(|i| (0..10).map(|j| ((i * 3 + j * 5) % 16) as u32).collect()).collect()
    }

    #[test]
    fn empty_organ_is_embedding_plus_head() {
        let src = TransformerModel::new(cfg(), 5).unwrap();
        let mut organ = extract(&src, 0, 1).unwrap();
        organ.layers.clear();
        organ.extraction_indices.clear();
        let w = build_wrapper(&src, &organ, true).unwrap();
        let mut bare = src.clone();
        bare.layers.clear();
        bare.config.num_layers = 0;
        let toks = [3, 1, 4, 1, 5];
        let a = forward(&w.model, &toks).unwrap();
        let b = forward(&bare, &toks).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn dimension_mismatch() {
        let src = TransformerModel::new(cfg(), 5).unwrap();
        let mut c = cfg();
        c.hidden_dim = 16;
        let other = TransformerModel::new(c, 5).unwrap();
        let organ = extract(&src, 1, 2).unwrap();
        assert!(matches!(build_wrapper(&other, &organ, true), Err(Error::Compatibility(_))));
    }

    #[test]
    fn training_respects_frozen_parts() {
        let src = TransformerModel::new(cfg(), 7).unwrap();
        let before = src.clone();
        let organ = extract(&src, 1, 2).unwrap();
        let data = corpus();
        let config = TrainConfig {
            learning_rate: 1e-2,
            epochs: 5,
            ..TrainConfig::default()
        };
        let mut w = build_wrapper(&src, &organ, false).unwrap();
        let head = w.model.head.clone();
        let first = perplexity(&w.model, &data).unwrap();
        let (trained, report) = train_donor(&mut w, &data, &config, &NoClock).unwrap();
        assert_eq!(src, before);
        assert_eq!(w.model.embedding, src.embedding);
        assert_eq!(w.model.head, head);
        assert_ne!(trained.layers, organ.layers);
        assert_eq!(trained.extraction_indices, [1, 2]);
        assert!(report.final_loss().unwrap() < report.epoch_losses[0]);
        assert!(perplexity(&w.model, &data).unwrap() < first);
        let organ_params: usize = w.model.layers.iter().map(|l| l.num_params()).sum();
        assert_eq!(report.trainable_params, organ_params);
        assert_eq!(report.trainable_params, w.mask().trainable_params(&w.model));
    }
}
