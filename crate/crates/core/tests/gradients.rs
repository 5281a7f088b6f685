//! Analytic gradients against central finite differences of an independent
//! f64 reference forward pass.

mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reference::RefModel;
use transplant_core::baselines::{add_ia3, add_lora};
use transplant_core::{
    forward, loss_and_gradients, Bridge, BridgeSlot, FreezeMask, ModelConfig, ParamGroup, TransformerModel,
};

const EPS: f64 = 1e-3;
/// Denominator floor for the relative error. The analytic gradient is
/// accumulated in f32, so magnitudes below ~1e-6 are at its rounding noise
/// (a 5e-7 entry already shows 1e-3 relative disagreement).
const FLOOR: f64 = 1e-6;

fn config(layers: usize, tied: bool) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: 16,
        num_heads: 4,
        ffn_dim: 32,
        vocab_size: 11,
        max_seq_len: 12,
        layernorm_eps: 1e-5,
        tied_head: tied,
    }
}

/// Spreads every parameter away from its initial value so layernorm gains,
/// biases and adapters all carry signal.
fn jitter(model: &mut TransformerModel, rng: &mut ChaCha8Rng, scale: f32) {
    for g in model.groups() {
        for t in model.group_mut(g).unwrap().tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }
}

fn sequences(rng: &mut ChaCha8Rng, vocab: u32) -> Vec<Vec<u32>> {
    [7usize, 5, 9]
        .iter()
        .map(|&n| (0..n).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

/// Compares `samples` random scalars; returns the worst relative error.
fn check(model: &TransformerModel, samples: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = sequences(&mut rng, model.config.vocab_size as u32);
    let batch: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let mask = FreezeMask::all_trainable(model);
    let (loss, grads) = loss_and_gradients(model, &batch, &mask).unwrap();
    let base = RefModel::new(model);
    let ref_loss = base.loss(&batch);
    assert!((loss - ref_loss).abs() < 1e-5 * ref_loss.abs(), "{loss} vs {ref_loss}");

    let groups = model.groups();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let g: ParamGroup = groups[rng.random_range(0..groups.len())];
        let names: Vec<&'static str> = model.group(g).unwrap().tensors().iter().map(|(n, _)| *n).collect();
        let n = base.flat_len(g);
        let idx = rng.random_range(0..n);
        let analytic = grads
            .group(g)
            .unwrap()
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .nth(idx)
            .unwrap() as f64;
        let mut plus = base.clone();
        plus.perturb(g, &names, idx, EPS);
        let mut minus = base.clone();
        minus.perturb(g, &names, idx, -EPS);
        let fd = (plus.loss(&batch) - minus.loss(&batch)) / (2.0 * EPS);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FLOOR);
        assert!(rel <= 1e-3, "{g:?}[{idx}]: analytic {analytic:e} vs fd {fd:e} (rel {rel:e})");
        worst = worst.max(rel);
    }
    (worst, samples)
}

#[test]
fn reference_matches_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = TransformerModel::new(config(3, true), 1).unwrap();
    jitter(&mut m, &mut rng, 0.1);
    let toks = [1u32, 4, 9, 2, 2, 7];
    let fast = forward(&m, &toks).unwrap();
    let slow = RefModel::new(&m).logits(&toks);
    for (a, b) in fast.data().iter().zip(&slow) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn plain_model_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = TransformerModel::new(config(3, true), 2).unwrap();
    jitter(&mut m, &mut rng, 0.1);
    let (worst, n) = check(&m, 240, 3);
    println!("tied 3-layer model: {n} scalars, worst relative error {worst:.2e}");
}

#[test]
fn grafted_model_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = TransformerModel::new(config(3, false), 4).unwrap();
    let mut m = add_ia3(&add_lora(&base, 4, 8.0, 5).unwrap());
    m.bridges.push(BridgeSlot {
        start: 1,
        end: 3,
        bridge: Bridge::identity(16),
    });
    m.validate().unwrap();
    jitter(&mut m, &mut rng, 0.1);
    let (worst, n) = check(&m, 240, 5);
    println!("untied model with bridge, LoRA and IA3: {n} scalars, worst relative error {worst:.2e}");
}

#[test]
fn frozen_groups_get_no_gradient() {
    let m = TransformerModel::new(config(2, true), 6).unwrap();
    let seq = [1u32, 2, 3, 4];
    let (_, g) = loss_and_gradients(&m, &[&seq], &FreezeMask::all_frozen(&m)).unwrap();
    assert!(g.is_empty());
    let mut mask = FreezeMask::all_trainable(&m);
    mask.set(ParamGroup::Embedding, false);
    let (_, g) = loss_and_gradients(&m, &[&seq], &mask).unwrap();
    assert!(g.group(ParamGroup::Embedding).is_none());
    assert!(g.group(ParamGroup::Layer(0)).is_some());
    assert!(g.group(ParamGroup::Layer(1)).is_some());
    assert!(g.group(ParamGroup::Head).is_some());
}

#[test]
fn partial_freeze_matches_full_gradient_on_upper_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut m = TransformerModel::new(config(3, false), 7).unwrap();
    jitter(&mut m, &mut rng, 0.05);
    let seq = [3u32, 1, 4, 1, 5, 9, 2];
    let (la, full) = loss_and_gradients(&m, &[&seq], &FreezeMask::all_trainable(&m)).unwrap();
    let only = FreezeMask::only(&m, &[ParamGroup::Layer(2)]);
    let (lb, part) = loss_and_gradients(&m, &[&seq], &only).unwrap();
    assert_eq!(la, lb);
    assert_eq!(part.groups(), [ParamGroup::Layer(2)]);
    let a = full.group(ParamGroup::Layer(2)).unwrap().tensors();
    let b = part.group(ParamGroup::Layer(2)).unwrap().tensors();
    for ((_, x), (_, y)) in a.iter().zip(&b) {
        assert_eq!(x, y);
    }
}
