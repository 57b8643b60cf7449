//! Invariant checks shared by the property tests and the acceptance run.
#![allow(dead_code)]

use schemanet::asnn::{freeze_except_head, train_step, AsnnConfig, AsnnModel, MLP_HEAD};
use schemanet::attnset::{scramble, ScrambleStrategy};
use schemanet::coloring::{reward, ColoringState, RewardParams};
use schemanet::ndcore::{OptimState, Rng, Tape, Tensor};

pub type Check = Result<(), String>;

/// Small model shared by the model-level checks: 8 px images, 4 px patches.
pub fn tiny_config(has_schema: bool) -> AsnnConfig {
    AsnnConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        n_heads: 3,
        head_dim: 4,
        mlp_ratio: 2,
        ..AsnnConfig::desk(has_schema)
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.normal() * scale) as f32).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn random_image(cfg: &AsnnConfig, rng: &mut Rng) -> Tensor {
    let n = cfg.channels * cfg.image_size * cfg.image_size;
    let data = (0..n).map(|_| rng.uniform() as f32).collect();
    Tensor::new(&[cfg.channels, cfg.image_size, cfg.image_size], data).unwrap()
}

/// Every softmax slice along `axis` is nonnegative and sums to one.
pub fn softmax_normalized(x: &Tensor, axis: usize) -> Check {
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(x);
    let y = tape.softmax(v, axis).map_err(|e| e.to_string())?;
    let shape = x.shape();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let out = tape.value(y);
    for o in 0..outer {
        for i in 0..inner {
            let s: f32 = (0..n).map(|k| out[(o * n + k) * inner + i]).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(format!("slice ({o}, {i}) sums to {s}"));
            }
        }
    }
    if out.iter().any(|&p| !(p >= 0.0)) {
        return Err("negative or NaN probability".into());
    }
    Ok(())
}

/// Hard-mode schema masks are binary and the final attention equals
/// `mask ⊙ scores` exactly; the control's final attention is its scores.
pub fn mask_and_final_attention(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    for has_schema in [true, false] {
        let cfg = tiny_config(has_schema);
        let model = AsnnModel::<f32>::new(cfg.clone(), &mut rng).map_err(|e| e.to_string())?;
        let trace = model
            .forward(&random_image(&cfg, &mut rng), &mut rng)
            .map_err(|e| e.to_string())?;
        let scores = trace.attention_scores.data();
        let fin = trace.final_attention.data();
        match &trace.mask {
            Some(mask) => {
                if let Some(v) = mask.data().iter().find(|&&m| m != 0.0 && m != 1.0) {
                    return Err(format!("mask value {v} is not binary"));
                }
                for ((m, s), f) in mask.data().iter().zip(scores).zip(fin) {
                    if (m * s).to_bits() != f.to_bits() {
                        return Err(format!("final {f} != mask {m} * score {s}"));
                    }
                }
            }
            None if has_schema => return Err("schema model produced no mask".into()),
            None => {
                if !trace.final_attention.bit_eq(&trace.attention_scores) {
                    return Err("control final attention differs from its scores".into());
                }
            }
        }
    }
    Ok(())
}

fn sorted_head_values(t: &Tensor) -> Vec<Vec<u32>> {
    let h = t.shape()[2];
    let mut heads = vec![Vec::new(); h];
    for (i, v) in t.data().iter().enumerate() {
        heads[i % h].push(v.to_bits());
    }
    heads.iter_mut().for_each(|v| v.sort_unstable());
    heads
}

fn sorted_values(t: &Tensor) -> Vec<u32> {
    let mut v: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
    v.sort_unstable();
    v
}

/// Scrambling preserves the value multiset: per head for token permutation,
/// per `(i, j)` position for head permutation.
pub fn scramble_preserves_multiset(t: &Tensor, rng: &mut Rng) -> Check {
    let per_head =
        scramble(t, ScrambleStrategy::PerHeadTokenPermute, rng).map_err(|e| e.to_string())?;
    if per_head.shape() != t.shape() || sorted_head_values(&per_head) != sorted_head_values(t) {
        return Err("per-head token permutation changed a head's values".into());
    }
    let across = scramble(t, ScrambleStrategy::HeadAxisPermute, rng).map_err(|e| e.to_string())?;
    let h = t.shape()[2];
    for (a, b) in t.data().chunks(h).zip(across.data().chunks(h)) {
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        if a != b {
            return Err("head-axis permutation changed a position's values".into());
        }
    }
    if sorted_values(&across) != sorted_values(t) {
        return Err("head-axis permutation changed the multiset".into());
    }
    Ok(())
}

/// After freezing everything but the head, training steps leave every
/// frozen parameter bit-identical and move the head.
pub fn freeze_keeps_backbone(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let cfg = tiny_config(seed % 2 == 0);
    let mut model = AsnnModel::<f32>::new(cfg.clone(), &mut rng).map_err(|e| e.to_string())?;
    freeze_except_head(&mut model);
    let before = model.params().clone();
    let batch: Vec<(Tensor, usize)> = (0..4)
        .map(|i| (random_image(&cfg, &mut rng), i % 2))
        .collect();
    let refs: Vec<&(Tensor, usize)> = batch.iter().collect();
    let mut opt = OptimState::new(1e-2);
    for _ in 0..3 {
        train_step(&mut model, &mut opt, &refs, &mut rng).map_err(|e| e.to_string())?;
    }
    let mut head_moved = false;
    for (a, b) in before.iter().zip(model.params().iter()) {
        let same = a.tensor.bit_eq(&b.tensor);
        if a.group == MLP_HEAD {
            head_moved |= !same;
        } else if !same {
            return Err(format!("frozen parameter {} changed", a.name));
        }
    }
    if !head_moved {
        return Err("head did not train".into());
    }
    Ok(())
}

/// Random play: painted count never decreases, each turn's discovery equals
/// the painted increase, and the episode ends exactly when the canvas is
/// full or the turn cap is reached.
pub fn episode_monotone(seed: u64, height: usize, width: usize, density: f64) -> Check {
    let mut rng = Rng::new(seed);
    let image = Tensor::zeros(&[3, height, width]);
    let mut state = ColoringState::new(image).map_err(|e| e.to_string())?;
    let params = RewardParams::default();
    let n = height * width;
    while !state.done {
        let before = state.painted();
        let sel0: Vec<bool> = (0..n).map(|_| rng.uniform() < density).collect();
        let sel1: Vec<bool> = (0..n).map(|_| rng.uniform() < density).collect();
        let out = state
            .apply_masks(&sel0, &sel1, &params, &mut rng)
            .map_err(|e| e.to_string())?;
        let after = state.painted();
        if after < before || after - before != out.n_discovery {
            return Err(format!(
                "painted {before} -> {after} with discovery {}",
                out.n_discovery
            ));
        }
        if out.reward < 0.0 {
            return Err(format!("negative reward {}", out.reward));
        }
        let should_end = after == n || state.turn >= state.max_turns();
        if state.done != should_end {
            return Err(format!(
                "done = {} at turn {} with {after}/{n} painted",
                state.done, state.turn
            ));
        }
        if state.turn > state.max_turns() {
            return Err("episode exceeded its turn cap".into());
        }
    }
    Ok(())
}

/// Strictly increasing in discoveries, strictly decreasing in overlap when
/// discoveries are positive.
pub fn reward_monotone(nd: i64, no: i64) -> Check {
    let p = RewardParams::default();
    let r = |a, b| reward(a, b, &p).unwrap();
    if r(nd + 1, no) <= r(nd, no) {
        return Err(format!(
            "reward not increasing in discoveries at ({nd}, {no})"
        ));
    }
    if nd > 0 && r(nd, no + 1) >= r(nd, no) {
        return Err(format!("reward not decreasing in overlap at ({nd}, {no})"));
    }
    Ok(())
}
