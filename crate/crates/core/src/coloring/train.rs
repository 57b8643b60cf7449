use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::asnn::AsnnConfig;
use crate::attnset::{make_synthetic_images, Split, TaskId};
use crate::error::{Error, Result};
use crate::ndcore::{OptimState, Rng};

use super::env::{ColoringState, RewardParams};
use super::policy::{reinforce_update, Baseline, ColoringPolicy, TurnRecord};

/// Which team members carry an attention schema. In the mixed team agent 0
/// has the schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    SchemaSchema,
    Mixed,
    ControlControl,
}

impl Pairing {
    pub const ALL: [Pairing; 3] = [
        Pairing::SchemaSchema,
        Pairing::Mixed,
        Pairing::ControlControl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pairing::SchemaSchema => "schema-schema",
            Pairing::Mixed => "mixed",
            Pairing::ControlControl => "control-control",
        }
    }

    pub fn schemas(self) -> [bool; 2] {
        match self {
            Pairing::SchemaSchema => [true, true],
            Pairing::Mixed => [true, false],
            Pairing::ControlControl => [false, false],
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pairing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Pairing::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pairing `{s}`")))
    }
}

/// Per-image averages over the episodes of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Shared reward accrued per image.
    pub mean_reward: f64,
    /// Pixels selected by both agents on the same turn, per image.
    pub mean_overlap: f64,
    /// Pixels each agent selected, per image.
    pub pixels_agent0: f64,
    pub pixels_agent1: f64,
    pub episodes: usize,
}

/// Team-training knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamOptions {
    /// Policy architecture; `has_schema` is set per agent.
    pub policy: AsnnConfig,
    pub epochs: usize,
    pub turns_per_epoch: usize,
    pub learning_rate: f64,
    pub update_every: usize,
    pub baseline_decay: f64,
    pub init_logit_bias: f64,
    pub reward: RewardParams,
    /// Distinct canvases drawn per run.
    pub canvas_pool: usize,
}

struct Agent {
    policy: ColoringPolicy,
    optimizer: OptimState,
    baseline: Baseline,
    pending: Vec<TurnRecord>,
}

#[derive(Default)]
struct Tally {
    reward: f64,
    overlap: f64,
    pixels: [f64; 2],
    episodes: usize,
}

/// Trains both agents of `pairing` on the shared reward and returns one
/// metrics row per epoch. Each epoch plays `turns_per_epoch` turns; a new
/// canvas starts whenever an episode ends, and an episode still running at
/// the end of an epoch is closed there.
pub fn train_team(
    pairing: Pairing,
    opts: &TeamOptions,
    rng: &mut Rng,
) -> Result<Vec<EpochMetrics>> {
    if opts.channels_ok().is_err() || opts.update_every == 0 || opts.turns_per_epoch == 0 {
        return Err(Error::Config("invalid team options".into()));
    }
    opts.reward.validate()?;
    let size = opts.policy.image_size;
    let canvases = make_synthetic_images(
        TaskId::A,
        opts.canvas_pool.max(2),
        size,
        Split::Train,
        &mut rng.child(0),
    )?;
    let mut init = rng.child(1);
    let mut agents = Vec::with_capacity(2);
    for has_schema in pairing.schemas() {
        agents.push(Agent {
            policy: ColoringPolicy::new(
                opts.policy.clone().with_schema(has_schema),
                opts.init_logit_bias,
                &mut init,
            )?,
            optimizer: OptimState::new(opts.learning_rate),
            baseline: Baseline::new(opts.baseline_decay),
            pending: Vec::with_capacity(opts.update_every),
        });
    }
    let mut play = rng.child(2);
    let mut metrics = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut tally = Tally::default();
        let mut state: Option<ColoringState> = None;
        let mut episode = Tally::default();
        for _ in 0..opts.turns_per_epoch {
            let s = match &mut state {
                Some(s) => s,
                None => {
                    let img = canvases.items[play.below(canvases.len())].0.clone();
                    state.insert(ColoringState::new(img)?)
                }
            };
            let mut masks = Vec::with_capacity(2);
            for (id, agent) in agents.iter_mut().enumerate() {
                let (action, record) = agent.policy.act(&s.observation(id)?, &mut play)?;
                masks.push(action.mask);
                agent.pending.push(record);
            }
            let out = s.apply_masks(&masks[0], &masks[1], &opts.reward, &mut play)?;
            episode.reward += out.reward;
            episode.overlap += out.n_overlap as f64;
            episode.pixels[0] += out.selected[0] as f64;
            episode.pixels[1] += out.selected[1] as f64;
            for agent in agents.iter_mut() {
                agent.pending.last_mut().expect("pushed above").reward = out.reward;
                if agent.pending.len() == opts.update_every {
                    reinforce_update(
                        &mut agent.policy,
                        &mut agent.pending,
                        &mut agent.baseline,
                        &mut agent.optimizer,
                    )?;
                    agent.pending.clear();
                }
            }
            if s.done {
                close(&mut tally, &mut episode);
                state = None;
            }
        }
        if state.is_some() {
            close(&mut tally, &mut episode);
        }
        let n = tally.episodes as f64;
        metrics.push(EpochMetrics {
            epoch,
            mean_reward: tally.reward / n,
            mean_overlap: tally.overlap / n,
            pixels_agent0: tally.pixels[0] / n,
            pixels_agent1: tally.pixels[1] / n,
            episodes: tally.episodes,
        });
    }
    Ok(metrics)
}

fn close(tally: &mut Tally, episode: &mut Tally) {
    tally.reward += episode.reward;
    tally.overlap += episode.overlap;
    tally.pixels[0] += episode.pixels[0];
    tally.pixels[1] += episode.pixels[1];
    tally.episodes += 1;
    *episode = Tally::default();
}

impl TeamOptions {
    fn channels_ok(&self) -> Result<()> {
        if self.policy.channels != 5 {
            return Err(Error::Config(format!(
                "coloring policies observe 5 channels, config has {}",
                self.policy.channels
            )));
        }
        self.policy.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TeamOptions {
        TeamOptions {
            policy: AsnnConfig {
                image_size: 8,
                channels: 5,
                patch_size: 4,
                embed_dim: 8,
                n_heads: 2,
                head_dim: 4,
                ..AsnnConfig::desk(false)
            },
            epochs: 3,
            turns_per_epoch: 20,
            learning_rate: 1e-3,
            update_every: 4,
            baseline_decay: 0.99,
            init_logit_bias: -2.0,
            reward: RewardParams::default(),
            canvas_pool: 4,
        }
    }

    #[test]
    fn one_row_per_epoch_and_deterministic() {
        let a = train_team(Pairing::Mixed, &tiny(), &mut Rng::new(1)).unwrap();
        let b = train_team(Pairing::Mixed, &tiny(), &mut Rng::new(1)).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert!(a.iter().all(|m| m.episodes >= 1 && m.mean_reward >= 0.0));
    }

    #[test]
    fn pairing_names() {
        for p in Pairing::ALL {
            assert_eq!(p.name().parse::<Pairing>().unwrap(), p);
        }
        assert_eq!(Pairing::Mixed.schemas(), [true, false]);
    }
}
