use crate::asnn::{AsnnConfig, AsnnModel, ForwardOptions};
use crate::error::{Error, Result};
use crate::ndcore::{softplus, Bindings, OptimState, ParamId, Rng, Tape, Tensor, Var};

use super::env::Pixel;

pub const PIXEL_HEAD: &str = "pixel_head";

/// A sampled selection with its log-probability under the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub pixels: Vec<Pixel>,
    /// Row-major selection flags.
    pub mask: Vec<bool>,
    pub log_prob: f64,
}

/// Independent Bernoulli(sigmoid(logit)) draw per pixel of a `[H × W]` grid.
pub fn sample_action(policy_logits: &Tensor, rng: &mut Rng) -> Result<Action> {
    let &[_, w] = policy_logits.shape() else {
        return Err(Error::InvalidShape {
            shape: policy_logits.shape().to_vec(),
            reason: "policy logits must be [H × W]".into(),
        });
    };
    if policy_logits.data().iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("policy logits"));
    }
    let mut pixels = Vec::new();
    let mut mask = Vec::with_capacity(policy_logits.len());
    let mut log_prob = 0.0;
    for (i, &l) in policy_logits.data().iter().enumerate() {
        let l = l as f64;
        let p = crate::ndcore::sigmoid(l);
        let selected = rng.uniform() < p;
        mask.push(selected);
        if selected {
            pixels.push((i / w, i % w));
            log_prob -= softplus(-l);
        } else {
            log_prob -= softplus(l);
        }
    }
    Ok(Action {
        pixels,
        mask,
        log_prob,
    })
}

/// ASNN backbone whose patch-token outputs are projected to per-pixel
/// selection logits.
#[derive(Debug, Clone)]
pub struct ColoringPolicy {
    model: AsnnModel,
    head_w: ParamId,
    head_b: ParamId,
}

/// A recorded turn: the live tape holding its log-probability, ready for
/// [`reinforce_update`].
pub struct TurnRecord {
    pub tape: Tape,
    pub bindings: Bindings,
    pub log_prob: Var,
    /// Attention-prediction loss (schema policies only).
    pub attention_loss: Option<Var>,
    pub reward: f64,
}

impl ColoringPolicy {
    pub fn new(config: AsnnConfig, init_logit_bias: f64, rng: &mut Rng) -> Result<Self> {
        let mut model = AsnnModel::new(config, rng)?;
        let (d, p) = (model.config().embed_dim, model.config().patch_size);
        let params = model.params_mut();
        let head_w = params.add_normal(
            PIXEL_HEAD,
            "weight",
            &[d, p * p],
            (1.0 / d as f64).sqrt(),
            rng,
        );
        let head_b = params.add_const(PIXEL_HEAD, "bias", &[p * p], init_logit_bias);
        Ok(Self {
            model,
            head_w,
            head_b,
        })
    }

    pub fn model(&self) -> &AsnnModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut AsnnModel {
        &mut self.model
    }

    pub fn has_schema(&self) -> bool {
        self.model.has_schema()
    }

    /// Records a forward pass for one observation; returns pixel logits
    /// `[H × W]` and, for schema policies, the attention-prediction loss.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        observation: &Tensor,
        rng: &mut Rng,
    ) -> Result<(Var, Option<Var>)> {
        let c = self.model.config();
        let (t, d, p, side) = (
            c.token_count(),
            c.embed_dim,
            c.patch_size,
            c.patches_per_side(),
        );
        let vars =
            self.model
                .forward_vars(tape, b, &[observation], rng, ForwardOptions::default())?;
        let patches = tape.narrow(vars.tokens, 1, 1, t - 1)?;
        let patches = tape.reshape(patches, &[t - 1, d])?;
        let logits = tape.linear(patches, b[self.head_w], Some(b[self.head_b]))?;
        let grid = tape.reshape(logits, &[side, side, p, p])?;
        let grid = tape.permute(grid, &[0, 2, 1, 3])?;
        let grid = tape.reshape(grid, &[c.image_size, c.image_size])?;
        let att = match vars.predicted_attention {
            Some(pred) => Some(tape.mse(pred, vars.final_attention)?),
            None => None,
        };
        Ok((grid, att))
    }

    /// Pixel logits without recording gradients.
    pub fn logits(&self, observation: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.model.params().bind_frozen(&mut tape);
        let (grid, _) = self.forward(&mut tape, &b, observation, rng)?;
        Ok(tape.tensor(grid))
    }

    /// Samples an action and keeps the tape for a later policy-gradient step.
    pub fn act(&self, observation: &Tensor, rng: &mut Rng) -> Result<(Action, TurnRecord)> {
        let mut tape = Tape::new();
        let bindings = self.model.params().bind(&mut tape);
        let (grid, attention_loss) = self.forward(&mut tape, &bindings, observation, rng)?;
        let action = sample_action(&tape.tensor(grid), rng)?;
        let flags: Vec<f32> = action
            .mask
            .iter()
            .map(|&s| if s { 1.0 } else { 0.0 })
            .collect();
        let log_prob = tape.bernoulli_log_prob(grid, &flags)?;
        Ok((
            action,
            TurnRecord {
                tape,
                bindings,
                log_prob,
                attention_loss,
                reward: 0.0,
            },
        ))
    }
}

/// Exponential moving average of rewards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    pub value: Option<f64>,
    pub decay: f64,
}

impl Baseline {
    pub fn new(decay: f64) -> Self {
        Self { value: None, decay }
    }

    /// Current estimate; before any reward has been seen, `fallback`.
    pub fn get_or(&self, fallback: f64) -> f64 {
        self.value.unwrap_or(fallback)
    }

    pub fn update(&mut self, reward: f64) {
        self.value = Some(match self.value {
            None => reward,
            Some(b) => self.decay * b + (1.0 - self.decay) * reward,
        });
    }
}

/// One optimiser step on `−mean_t (R_t − b)·log π(a_t)` (plus the weighted
/// attention-prediction loss for schema policies). The baseline is read
/// before each turn's reward is folded into it.
pub fn reinforce_update(
    policy: &mut ColoringPolicy,
    trajectory: &mut [TurnRecord],
    baseline: &mut Baseline,
    optimizer: &mut OptimState,
) -> Result<()> {
    if trajectory.is_empty() {
        return Err(Error::invalid(
            "reinforce_update needs a nonempty trajectory",
        ));
    }
    let cfg = policy.model.config().clone();
    let scale = 1.0 / trajectory.len() as f32;
    let params = policy.model.params_mut();
    params.zero_grad();
    for rec in trajectory {
        let advantage = rec.reward - baseline.get_or(rec.reward);
        baseline.update(rec.reward);
        let tape = &mut rec.tape;
        let pg = tape.scale(rec.log_prob, (-advantage * cfg.task_weight) as f32 * scale);
        let loss = match rec.attention_loss {
            Some(att) if cfg.has_schema => {
                let a = tape.scale(att, cfg.schema_weight as f32 * scale);
                tape.add(pg, a)?
            }
            _ => pg,
        };
        let loss = tape.reshape(loss, &[1])?;
        let grads = tape.backward(loss)?;
        params.accumulate(&grads, &rec.bindings);
    }
    optimizer.step(params)?;
    params.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(has_schema: bool) -> AsnnConfig {
        AsnnConfig {
            image_size: 8,
            channels: 5,
            patch_size: 4,
            embed_dim: 8,
            n_heads: 2,
            head_dim: 4,
            ..AsnnConfig::desk(false)
        }
        .with_schema(has_schema)
    }

    fn obs(rng: &mut Rng) -> Tensor {
        Tensor::new(&[5, 8, 8], (0..320).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn saturated_logits_select_nothing() {
        let a = sample_action(&Tensor::full(&[3, 3], -40.0), &mut Rng::new(0)).unwrap();
        assert!(a.pixels.is_empty());
        assert!(a.log_prob.abs() < 1e-12);
    }

    #[test]
    fn log_prob_closed_form() {
        let a = sample_action(&Tensor::full(&[2, 2], 0.0), &mut Rng::new(1)).unwrap();
        assert!((a.log_prob - 4.0 * 0.5f64.ln()).abs() < 1e-12);
        let all = sample_action(&Tensor::full(&[2, 2], 40.0), &mut Rng::new(1)).unwrap();
        assert_eq!(all.pixels, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn fair_logit_selects_half_the_time() {
        let mut rng = Rng::new(2);
        let logits = Tensor::zeros(&[1, 1]);
        let hits = (0..10_000)
            .filter(|_| !sample_action(&logits, &mut rng).unwrap().pixels.is_empty())
            .count();
        assert!((hits as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn rejects_non_finite_logits() {
        let mut l = Tensor::zeros(&[2, 2]);
        l.data_mut()[3] = f32::NAN;
        assert!(matches!(
            sample_action(&l, &mut Rng::new(0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn policy_grid_matches_canvas() {
        let mut rng = Rng::new(3);
        for schema in [false, true] {
            let p = ColoringPolicy::new(config(schema), -2.0, &mut rng).unwrap();
            let l = p.logits(&obs(&mut rng), &mut rng).unwrap();
            assert_eq!(l.shape(), &[8, 8]);
        }
    }

    #[test]
    fn centred_advantage_leaves_parameters() {
        let mut rng = Rng::new(4);
        let mut p = ColoringPolicy::new(config(false), 0.0, &mut rng).unwrap();
        let before = p.model().params().clone();
        let (_, mut rec) = p.act(&obs(&mut rng), &mut rng).unwrap();
        rec.reward = 1.0;
        let mut baseline = Baseline {
            value: Some(1.0),
            decay: 0.99,
        };
        reinforce_update(
            &mut p,
            &mut [rec],
            &mut baseline,
            &mut OptimState::new(1e-2),
        )
        .unwrap();
        for (a, b) in before.iter().zip(p.model().params().iter()) {
            assert!(a.tensor.bit_eq(&b.tensor), "{}", a.name);
        }
    }

    #[test]
    fn positive_advantage_reinforces_selection() {
        let mut rng = Rng::new(5);
        let mut p = ColoringPolicy::new(config(false), 0.0, &mut rng).unwrap();
        let o = obs(&mut rng);
        let before = p.logits(&o, &mut Rng::new(9)).unwrap();
        let (action, mut rec) = p.act(&o, &mut rng).unwrap();
        rec.reward = 2.0;
        let mut baseline = Baseline {
            value: Some(0.0),
            decay: 0.99,
        };
        reinforce_update(
            &mut p,
            &mut [rec],
            &mut baseline,
            &mut OptimState::new(1e-3),
        )
        .unwrap();
        let after = p.logits(&o, &mut Rng::new(9)).unwrap();
        let delta: f64 = action
            .mask
            .iter()
            .zip(before.data().iter().zip(after.data()))
            .map(|(&s, (b, a))| if s { (a - b) as f64 } else { (b - a) as f64 })
            .sum();
        assert!(delta > 0.0, "{delta}");
        assert!((baseline.value.unwrap() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn empty_trajectory_rejected() {
        let mut rng = Rng::new(6);
        let mut p = ColoringPolicy::new(config(true), 0.0, &mut rng).unwrap();
        let mut b = Baseline::new(0.99);
        assert!(reinforce_update(&mut p, &mut [], &mut b, &mut OptimState::new(1e-3)).is_err());
    }
}
