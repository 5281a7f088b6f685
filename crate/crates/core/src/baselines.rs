//! Fine-tuning baselines: zero-shot, full fine-tuning, LoRA, Top-K and IA³.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::backward::loss_and_gradients;
use crate::config::TrainConfig;
use crate::error::{input, Result};
use crate::freeze::FreezeMask;
use crate::loss::perplexity;
use crate::model::{Adapters, Init, LowRank, ParamGroup, Rescale, TransformerModel};
use crate::report::EvalReport;
use crate::train::{prepare, train, Clock};

pub const LORA_RANK: usize = 8;
pub const LORA_ALPHA: f32 = 16.0;
pub const TOPK_FRACTION: f64 = 0.10;
/// Batches used to rank scalars for Top-K.
pub const TOPK_CALIBRATION_BATCHES: usize = 8;

/// A trained baseline and its report.
#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub model: TransformerModel,
    pub report: EvalReport,
}

/// Evaluation of `model` as is.
pub fn run_zero_shot(model: &TransformerModel, eval: &[Vec<u32>]) -> Result<EvalReport> {
    let ppl = perplexity(model, eval)?;
    Ok(EvalReport::evaluation("zero_shot", ppl, model.config, model.num_params(), 0))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    method: &str,
    mut model: TransformerModel,
    train_data: &[Vec<u32>],
    eval: &[Vec<u32>],
    config: &TrainConfig,
    mask: &FreezeMask,
    clock: &dyn Clock,
    timed: bool,
) -> Result<BaselineRun> {
    let report = train(&mut model, train_data, config, mask, clock)?;
    let ppl = perplexity(&model, eval)?;
    let report = EvalReport::trained(method, ppl, model.config, config, &report, timed);
    Ok(BaselineRun { model, report })
}

/// Every parameter trainable.
pub fn run_full_finetune(
    model: &TransformerModel,
    train_data: &[Vec<u32>],
    eval: &[Vec<u32>],
    config: &TrainConfig,
    clock: &dyn Clock,
    timed: bool,
) -> Result<BaselineRun> {
    let mask = FreezeMask::all_trainable(model);
    finish("full_ft", model.clone(), train_data, eval, config, &mask, clock, timed)
}

/// Attaches zero-initialized low-rank updates to `W_Q` and `W_V` of every
/// layer. `alpha / rank` scales the update.
pub fn add_lora(model: &TransformerModel, rank: usize, alpha: f32, seed: u64) -> Result<TransformerModel> {
    let d = model.hidden_dim();
    if rank == 0 || rank > d {
        return Err(input(format!("LoRA rank must lie in 1..={d}, got {rank}")));
    }
    let mut out = model.clone();
    let mut init = Init::new(seed);
    let bound = 1.0 / libm::sqrtf(d as f32);
    for i in 0..out.num_layers() {
        let mut low_rank = || LowRank {
            b: crate::tensor::Tensor::zeros(&[d, rank]),
            a: init.uniform(&[rank, d], bound),
            scale: alpha / rank as f32,
        };
        let slot = out.adapters.entry(i).or_default();
        slot.lora_q = Some(low_rank());
        slot.lora_v = Some(low_rank());
    }
    Ok(out)
}

/// Folds every low-rank update into its base weight and drops it.
pub fn merge_lora(model: &TransformerModel) -> TransformerModel {
    let mut out = model.clone();
    for (&i, a) in model.adapters.iter() {
        let layer = &mut out.layers[i];
        if let Some(l) = &a.lora_q {
            layer.wq.weight.add_assign(&l.delta());
        }
        if let Some(l) = &a.lora_v {
            layer.wv.weight.add_assign(&l.delta());
        }
    }
    out.adapters = model
        .adapters
        .iter()
        .filter_map(|(&i, a)| {
            let rest = Adapters {
                lora_q: None,
                lora_v: None,
                rescale: a.rescale.clone(),
            };
            (!rest.is_empty()).then_some((i, rest))
        })
        .collect();
    out
}

fn adapter_mask(model: &TransformerModel) -> FreezeMask {
    let groups: Vec<ParamGroup> = model.adapters.keys().map(|&i| ParamGroup::Adapter(i)).collect();
    FreezeMask::only(model, &groups)
}

/// Trains LoRA adapters on a frozen base, then evaluates the merged model.
#[allow(clippy::too_many_arguments)]
pub fn run_lora(
    model: &TransformerModel,
    train_data: &[Vec<u32>],
    eval: &[Vec<u32>],
    config: &TrainConfig,
    rank: usize,
    alpha: f32,
    clock: &dyn Clock,
    timed: bool,
) -> Result<BaselineRun> {
    let mut adapted = add_lora(model, rank, alpha, config.seed)?;
    let mask = adapter_mask(&adapted);
    let report = train(&mut adapted, train_data, config, &mask, clock)?;
    let merged = merge_lora(&adapted);
    let ppl = perplexity(&merged, eval)?;
    let mut report = EvalReport::trained("lora", ppl, model.config, config, &report, timed);
    report.metrics.insert("rank".into(), rank as f64);
    report.metrics.insert("alpha".into(), alpha as f64);
    Ok(BaselineRun { model: adapted, report })
}

/// Attaches all-ones rescaling of keys, values and FFN activations to
/// every layer.
pub fn add_ia3(model: &TransformerModel) -> TransformerModel {
    let mut out = model.clone();
    for i in 0..out.num_layers() {
        let ffn = out.layers[i].ffn_dim();
        out.adapters.entry(i).or_default().rescale = Some(Rescale::ones(out.hidden_dim(), ffn));
    }
    out
}

/// Trains rescaling vectors on a frozen base.
pub fn run_ia3(
    model: &TransformerModel,
    train_data: &[Vec<u32>],
    eval: &[Vec<u32>],
    config: &TrainConfig,
    clock: &dyn Clock,
    timed: bool,
) -> Result<BaselineRun> {
    let adapted = add_ia3(model);
    let mask = adapter_mask(&adapted);
    finish("ia3", adapted, train_data, eval, config, &mask, clock, timed)
}

/// Ranks every scalar by `|grad|` and keeps the top `fraction` trainable.
/// Ties go to the earlier group, then the earlier scalar.
pub fn topk_mask(model: &TransformerModel, grads: &[(ParamGroup, Vec<f32>)], fraction: f64) -> Result<FreezeMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(input(format!("top-k fraction must lie in (0, 1], got {fraction}")));
    }
    let total: usize = grads.iter().map(|(_, g)| g.len()).sum();
    let keep = (libm::ceil(fraction * total as f64) as usize).min(total);
    // (group position, scalar index) for every scalar, best first
    let mut order: Vec<(u32, u32)> = grads
        .iter()
        .enumerate()
        .flat_map(|(gi, (_, g))| (0..g.len() as u32).map(move |j| (gi as u32, j)))
        .collect();
    let mag = |&(gi, j): &(u32, u32)| grads[gi as usize].1[j as usize].abs();
    order.sort_by(|a, b| match mag(b).total_cmp(&mag(a)) {
        Ordering::Equal => a.cmp(b),
        o => o,
    });
    let mut bits: Vec<Vec<bool>> = grads.iter().map(|(_, g)| vec![false; g.len()]).collect();
    for &(gi, j) in &order[..keep] {
        bits[gi as usize][j as usize] = true;
    }
    let mut mask = FreezeMask::all_frozen(model);
    for ((group, _), b) in grads.iter().zip(bits) {
        if b.iter().all(|&x| x) {
            mask.set(*group, true);
        } else if b.iter().any(|&x| x) {
            mask.set_partial(*group, b);
        }
    }
    Ok(mask)
}

/// Summed gradients of every parameter over the first
/// [`TOPK_CALIBRATION_BATCHES`] batches of `data`, flattened per group.
pub fn calibration_gradients(
    model: &TransformerModel,
    data: &[Vec<u32>],
    config: &TrainConfig,
) -> Result<Vec<(ParamGroup, Vec<f32>)>> {
    let seqs = prepare(model, data, config);
    if seqs.is_empty() {
        return Err(input("calibration data is empty"));
    }
    let mask = FreezeMask::all_trainable(model);
    let mut sums: Vec<(ParamGroup, Vec<f32>)> = model
        .groups()
        .into_iter()
        .map(|g| (g, vec![0.0; model.group(g).map_or(0, |p| p.num_params())]))
        .collect();
    for batch in seqs.chunks(config.batch_size).take(TOPK_CALIBRATION_BATCHES) {
        let (_, grads) = loss_and_gradients(model, batch, &mask)?;
        for (g, acc) in sums.iter_mut() {
            if let Some(p) = grads.group(*g) {
                let flat = p.tensors().into_iter().flat_map(|(_, t)| t.data().iter().copied());
                for (a, v) in acc.iter_mut().zip(flat) {
                    *a += v;
                }
            }
        }
    }
    Ok(sums)
}

/// Trains only the scalars with the largest calibration gradients.
pub fn run_topk(
    model: &TransformerModel,
    train_data: &[Vec<u32>],
    eval: &[Vec<u32>],
    config: &TrainConfig,
    fraction: f64,
    clock: &dyn Clock,
    timed: bool,
) -> Result<BaselineRun> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(input(format!("top-k fraction must lie in (0, 1], got {fraction}")));
    }
    let start = clock.now();
    let grads = calibration_gradients(model, train_data, config)?;
    let mask = topk_mask(model, &grads, fraction)?;
    let calibration = clock.now() - start;
    let mut run = finish("topk", model.clone(), train_data, eval, config, &mask, clock, timed)?;
    if let Some(s) = run.report.seconds.as_mut() {
        *s += calibration;
    }
    run.report.metrics.insert("fraction".into(), fraction);
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::forward::forward;
    use crate::freeze::GroupMask;
    use crate::model::ParamSet;

    fn model() -> TransformerModel {
        TransformerModel::new(
            ModelConfig {
                num_layers: 2,
                hidden_dim: 8,
                num_heads: 2,
                ffn_dim: 16,
                vocab_size: 16,
                max_seq_len: 16,
                layernorm_eps: 1e-5,
                tied_head: true,
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn adapters_are_no_ops_at_init() {
        let m = model();
        let toks = [1, 2, 3, 4, 5, 6];
        let base = forward(&m, &toks).unwrap();
        assert_eq!(forward(&add_lora(&m, 4, 16.0, 1).unwrap(), &toks).unwrap(), base);
        assert_eq!(forward(&add_ia3(&m), &toks).unwrap(), base);
    }

    #[test]
    fn lora_rank_bounds() {
        let m = model();
        assert!(add_lora(&m, 0, 16.0, 1).is_err());
        assert!(add_lora(&m, 9, 16.0, 1).is_err());
        assert!(add_lora(&m, 8, 16.0, 1).is_ok());
    }

    #[test]
    fn lora_param_count() {
        let m = model();
        let a = add_lora(&m, 4, 16.0, 1).unwrap();
        let mask = adapter_mask(&a);
        // two layers, two targets, (8·4 + 4·8) each
        assert_eq!(mask.trainable_params(&a), 2 * 2 * 64);
        assert_eq!(a.num_params(), m.num_params() + 256);
    }

    #[test]
    fn ia3_param_count() {
        let a = add_ia3(&model());
        assert_eq!(adapter_mask(&a).trainable_params(&a), 2 * (8 + 8 + 16));
    }

    #[test]
    fn topk_ties_pick_the_first_scalars() {
        let m = model();
        let grads: Vec<(ParamGroup, Vec<f32>)> = m
            .groups()
            .into_iter()
            .map(|g| (g, vec![1.0; m.group(g).unwrap().num_params()]))
            .collect();
        let n = m.num_params();
        let mask = topk_mask(&m, &grads, 0.1).unwrap();
        let keep = (0.1 * n as f64).ceil() as usize;
        assert_eq!(mask.trainable_params(&m), keep);
        let emb = m.embedding.num_params();
        assert!(keep < emb);
        match mask.get(ParamGroup::Embedding).unwrap() {
            GroupMask::Partial(b) => {
                assert!(b[..keep].iter().all(|&x| x));
                assert!(b[keep..].iter().all(|&x| !x));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(topk_mask(&m, &grads, 1.0).unwrap(), FreezeMask::all_trainable(&m));
        assert!(topk_mask(&m, &grads, 0.0).is_err());
        assert!(topk_mask(&m, &grads, 1.5).is_err());
    }
}
