use serde::{Deserialize, Serialize};

use crate::coloring::{train_team, EpochMetrics, Pairing, TeamOptions};
use crate::error::Result;
use crate::ndcore::Rng;
use crate::parallel;

use super::config::Settings;
use super::pool::{repetition_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp3Row {
    pub pairing: Pairing,
    pub repetition: usize,
    pub seed: u64,
    pub metrics: EpochMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exp3Result {
    pub rows: Vec<Exp3Row>,
}

/// Per-pairing summary over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingSummary {
    pub pairing: Pairing,
    /// Mean over all epochs and repetitions.
    pub mean_reward: f64,
    pub mean_overlap: f64,
    /// Mean over the last `final_epochs` epochs.
    pub final_reward: f64,
    pub final_overlap: f64,
    pub final_epochs: usize,
}

impl Exp3Result {
    pub fn rows_for(&self, pairing: Pairing) -> impl Iterator<Item = &Exp3Row> {
        self.rows.iter().filter(move |r| r.pairing == pairing)
    }

    pub fn summary(&self, pairing: Pairing, final_epochs: usize) -> PairingSummary {
        let rows: Vec<&Exp3Row> = self.rows_for(pairing).collect();
        let last_epoch = rows.iter().map(|r| r.metrics.epoch).max().unwrap_or(0);
        let cutoff = (last_epoch + 1).saturating_sub(final_epochs);
        let avg = |f: &dyn Fn(&EpochMetrics) -> f64, late: bool| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| !late || r.metrics.epoch >= cutoff)
                .map(|r| f(&r.metrics))
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        PairingSummary {
            pairing,
            mean_reward: avg(&|m| m.mean_reward, false),
            mean_overlap: avg(&|m| m.mean_overlap, false),
            final_reward: avg(&|m| m.mean_reward, true),
            final_overlap: avg(&|m| m.mean_overlap, true),
            final_epochs: final_epochs.min(last_epoch + 1),
        }
    }
}

pub fn team_options(settings: &Settings) -> TeamOptions {
    let e = &settings.exp3;
    TeamOptions {
        policy: settings.exp3_policy(false),
        epochs: e.epochs,
        turns_per_epoch: e.turns_per_epoch,
        learning_rate: e.learning_rate,
        update_every: e.update_every,
        baseline_decay: e.baseline_decay,
        init_logit_bias: e.init_logit_bias,
        reward: e.reward,
        canvas_pool: e.canvas_pool,
    }
}

/// Exp. 3: trains every pairing for every repetition. Within a repetition
/// all pairings see the same canvases and generator stream.
pub fn run_exp3(settings: &Settings, seed: u64) -> Result<Exp3Result> {
    settings.validate()?;
    let opts = team_options(settings);
    let jobs: Vec<(usize, Pairing)> = (0..settings.exp3.repetitions)
        .flat_map(|r| Pairing::ALL.map(|p| (r, p)))
        .collect();
    let per = parallel::map(jobs, |(r, pairing)| -> Result<Vec<Exp3Row>> {
        let rep_seed = repetition_seed(seed, r);
        let mut rng = Rng::new(rep_seed).child(stream::EXP3);
        let metrics = train_team(pairing, &opts, &mut rng)?;
        Ok(metrics
            .into_iter()
            .map(|metrics| Exp3Row {
                pairing,
                repetition: r,
                seed: rep_seed,
                metrics,
            })
            .collect())
    });
    let mut rows = Vec::new();
    for r in per {
        rows.extend(r?);
    }
    Ok(Exp3Result { rows })
}
