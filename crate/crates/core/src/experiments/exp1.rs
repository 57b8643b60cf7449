use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::asnn::{head_accuracy, train_head};
use crate::attnset::{
    build_judgement_dataset, record_attention, AttentionRecord, RecordSource, TaskId,
};
use crate::error::{Error, Result};
use crate::ndcore::{Rng, Tensor};
use crate::parallel;

use super::config::Settings;
use super::pool::{assignment, assignment_tasks, build_pool, stream, Pool, Pretrained};
use super::stats::{anova_2x2, t_test, Anova2x2, StatResult};

/// One transfer score: a receiver judging a sender's attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1Score {
    pub sender_schema: bool,
    pub receiver_schema: bool,
    pub repetition: usize,
    pub assignment: usize,
    pub sender_task: TaskId,
    pub receiver_task: TaskId,
    pub seed: u64,
    pub accuracy: f64,
}

/// Accuracies per `(sender_has_schema, receiver_has_schema)` cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Exp1Grid {
    pub cells: BTreeMap<(bool, bool), Vec<f64>>,
}

impl Exp1Grid {
    pub fn from_scores(scores: &[Exp1Score]) -> Self {
        let mut cells: BTreeMap<(bool, bool), Vec<f64>> = BTreeMap::new();
        for s in scores {
            cells
                .entry((s.sender_schema, s.receiver_schema))
                .or_default()
                .push(s.accuracy);
        }
        Self { cells }
    }

    pub fn cell(&self, sender_schema: bool, receiver_schema: bool) -> &[f64] {
        self.cells
            .get(&(sender_schema, receiver_schema))
            .map_or(&[], |v| v)
    }

    pub fn mean(&self, sender_schema: bool, receiver_schema: bool) -> f64 {
        let c = self.cell(sender_schema, receiver_schema);
        c.iter().sum::<f64>() / c.len() as f64
    }

    /// Factor A is the sender, factor B the receiver; level 0 means "has a schema".
    pub fn anova(&self) -> Result<Anova2x2> {
        anova_2x2([
            [self.cell(true, true), self.cell(true, false)],
            [self.cell(false, true), self.cell(false, false)],
        ])
    }
}

/// Pretraining test accuracy of one classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainScore {
    pub repetition: usize,
    pub task: TaskId,
    pub has_schema: bool,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exp1Result {
    pub scores: Vec<Exp1Score>,
    pub grid: Exp1Grid,
    pub anova: Anova2x2,
    pub pretrain: Vec<PretrainScore>,
    /// Schema vs control image-classification accuracy.
    pub categorization: Option<StatResult>,
}

pub fn cell_name(sender_schema: bool, receiver_schema: bool) -> String {
    let v = |s: bool| if s { "schema" } else { "control" };
    format!("{}->{}", v(sender_schema), v(receiver_schema))
}

/// Receiver input: a cropped `[T' × T' × 3]` record as a `[3 × T' × T']`
/// image, multiplied by `scale`.
pub fn record_to_image(record: &Tensor, scale: f32) -> Result<Tensor> {
    Ok(record.permute(&[2, 0, 1])?.map(|v| v * scale))
}

fn input_scale(settings: &Settings) -> f32 {
    if settings.exp1.input_scale > 0.0 {
        settings.exp1.input_scale as f32
    } else {
        settings.model.token_count() as f32
    }
}

/// Head-only transfer of a pretrained receiver onto judgement data; returns
/// the held-out accuracy.
pub fn judge(
    settings: &Settings,
    receiver: &Pretrained,
    train: &[AttentionRecord],
    test: &[AttentionRecord],
    rng: &mut Rng,
) -> Result<f64> {
    let scale = input_scale(settings);
    let mut model = receiver.model.clone();
    let to_inputs = |recs: &[AttentionRecord]| -> Result<(Vec<Tensor>, Vec<usize>)> {
        let imgs = recs
            .iter()
            .map(|r| record_to_image(&r.tensor, scale))
            .collect::<Result<Vec<_>>>()?;
        Ok((imgs, recs.iter().map(|r| r.label.class()).collect()))
    };
    let (train_x, train_y) = to_inputs(train)?;
    let (test_x, test_y) = to_inputs(test)?;
    let train_f = model.features(&train_x.iter().collect::<Vec<_>>(), rng)?;
    let test_f = model.features(&test_x.iter().collect::<Vec<_>>(), rng)?;
    train_head(&mut model, &train_f, &train_y, &settings.transfer, rng)?;
    head_accuracy(&model, &test_f, &test_y)
}

/// The four cells of one task assignment: records each sender's attention
/// on its task's test images, builds one judgement dataset per sender, and
/// has both receivers (pretrained on `receiver_task`) judge it.
pub fn exp1_assignment(
    settings: &Settings,
    pool: &Pool,
    k: usize,
    sender_task: TaskId,
    receiver_task: TaskId,
) -> Result<Vec<Exp1Score>> {
    if sender_task == receiver_task {
        return Err(Error::Config(format!(
            "receiver must be pretrained on a different task than the sender (both {sender_task})"
        )));
    }
    let root = Rng::new(pool.seed).child(stream::EXP1).child(k as u64);
    let test_images = &pool.data(sender_task)?.test;
    let mut scores = Vec::with_capacity(4);
    for sender_schema in [true, false] {
        let sender = pool.model(sender_task, sender_schema)?;
        let mut rng = root.child(sender_schema as u64);
        let raw = record_attention(&sender.model, test_images, &mut rng)?;
        let source = RecordSource {
            task: sender_task,
            has_schema: sender_schema,
        };
        let ds = build_judgement_dataset(&raw, source, settings.exp1.scramble, &mut rng)?;
        for receiver_schema in [true, false] {
            let receiver = pool.model(receiver_task, receiver_schema)?;
            let mut rng = root.child(2 + sender_schema as u64 * 2 + receiver_schema as u64);
            let accuracy = judge(settings, receiver, &ds.train, &ds.test, &mut rng)?;
            scores.push(Exp1Score {
                sender_schema,
                receiver_schema,
                repetition: pool.repetition,
                assignment: k,
                sender_task,
                receiver_task,
                seed: pool.seed,
                accuracy,
            });
        }
    }
    Ok(scores)
}

/// All assignments of one pool.
pub fn exp1_from_pool(settings: &Settings, pool: &Pool) -> Result<Vec<Exp1Score>> {
    let jobs: Vec<usize> = (0..settings.exp1.assignments).collect();
    let per = parallel::map(jobs, |k| {
        let (x, y) = assignment(k);
        exp1_assignment(settings, pool, k, x, y)
    });
    let mut out = Vec::new();
    for r in per {
        out.extend(r?);
    }
    Ok(out)
}

pub fn pretrain_scores(pool: &Pool) -> Vec<PretrainScore> {
    pool.models
        .iter()
        .map(|m| PretrainScore {
            repetition: pool.repetition,
            task: m.task,
            has_schema: m.has_schema,
            seed: pool.seed,
            accuracy: m.test_accuracy,
        })
        .collect()
}

pub fn check_exp1(settings: &Settings) -> Result<()> {
    settings.validate()?;
    let m = &settings.model;
    if m.image_size != m.n_patches() || m.channels != 3 {
        return Err(Error::Config(format!(
            "receivers read cropped attention as {0}×{0} 3-channel images, so image_size must equal the patch count {0} and channels must be 3",
            m.n_patches()
        )));
    }
    if m.n_heads < 3 {
        return Err(Error::Config(
            "exp1 records three heads; model.n_heads must be at least 3".into(),
        ));
    }
    Ok(())
}

/// Aggregates scores into the grid and statistics.
pub fn summarise_exp1(scores: Vec<Exp1Score>, pretrain: Vec<PretrainScore>) -> Result<Exp1Result> {
    let grid = Exp1Grid::from_scores(&scores);
    let anova = grid.anova()?;
    let acc = |s: bool| -> Vec<f64> {
        pretrain
            .iter()
            .filter(|p| p.has_schema == s)
            .map(|p| p.accuracy)
            .collect()
    };
    let categorization = t_test(&acc(true), &acc(false)).ok();
    Ok(Exp1Result {
        scores,
        grid,
        anova,
        pretrain,
        categorization,
    })
}

/// Full Exp. 1: one pool per repetition, every assignment, 2×2 ANOVA.
pub fn run_exp1(settings: &Settings, seed: u64) -> Result<Exp1Result> {
    check_exp1(settings)?;
    let tasks = assignment_tasks(settings.exp1.assignments);
    let reps: Vec<usize> = (0..settings.exp1.repetitions).collect();
    let per = parallel::map(reps, |r| -> Result<(Vec<Exp1Score>, Vec<PretrainScore>)> {
        let pool = build_pool(settings, seed, r, &tasks)?;
        Ok((exp1_from_pool(settings, &pool)?, pretrain_scores(&pool)))
    });
    let (mut scores, mut pretrain) = (Vec::new(), Vec::new());
    for r in per {
        let (s, p) = r?;
        scores.extend(s);
        pretrain.extend(p);
    }
    summarise_exp1(scores, pretrain)
}
