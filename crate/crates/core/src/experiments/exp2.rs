use serde::{Deserialize, Serialize};

use crate::asnn::{head_accuracy, train_head};
use crate::attnset::TaskId;
use crate::error::{Error, Result};
use crate::ndcore::Rng;
use crate::parallel;

use super::config::Settings;
use super::pool::{assignment, assignment_tasks, build_pool, stream, Pool};
use super::stats::{t_test, StatResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp2Score {
    pub has_schema: bool,
    pub repetition: usize,
    pub assignment: usize,
    pub pretrain_task: TaskId,
    pub transfer_task: TaskId,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exp2Result {
    pub scores: Vec<Exp2Score>,
    pub schema: Vec<f64>,
    pub control: Vec<f64>,
    /// Schema minus control over all scores.
    pub test: StatResult,
    /// The same test within each repetition (`None` where undefined).
    pub per_repetition: Vec<Option<StatResult>>,
}

/// Head-only transfer of the model pretrained on `x` to task `y`.
pub fn transfer_accuracy(
    settings: &Settings,
    pool: &Pool,
    x: TaskId,
    y: TaskId,
    has_schema: bool,
    rng: &mut Rng,
) -> Result<f64> {
    if x == y {
        return Err(Error::Config(format!(
            "transfer task must differ from the pretraining task (both {x})"
        )));
    }
    let mut model = pool.model(x, has_schema)?.model.clone();
    let data = pool.data(y)?;
    let train_f = model.features(&data.train.images(), rng)?;
    let test_f = model.features(&data.test.images(), rng)?;
    train_head(
        &mut model,
        &train_f,
        &data.train.labels(),
        &settings.transfer,
        rng,
    )?;
    head_accuracy(&model, &test_f, &data.test.labels())
}

pub fn exp2_from_pool(settings: &Settings, pool: &Pool) -> Result<Vec<Exp2Score>> {
    let root = Rng::new(pool.seed).child(stream::EXP2);
    let jobs: Vec<(usize, bool)> = (0..settings.exp2.assignments)
        .flat_map(|k| [(k, true), (k, false)])
        .collect();
    parallel::map(jobs, |(k, has_schema)| {
        let (x, y) = assignment(k);
        let mut rng = root.child(k as u64 * 2 + has_schema as u64);
        Ok(Exp2Score {
            has_schema,
            repetition: pool.repetition,
            assignment: k,
            pretrain_task: x,
            transfer_task: y,
            seed: pool.seed,
            accuracy: transfer_accuracy(settings, pool, x, y, has_schema, &mut rng)?,
        })
    })
    .into_iter()
    .collect()
}

pub fn summarise_exp2(scores: Vec<Exp2Score>) -> Result<Exp2Result> {
    let pick = |s: bool, rep: Option<usize>| -> Vec<f64> {
        scores
            .iter()
            .filter(|x| x.has_schema == s && rep.is_none_or(|r| x.repetition == r))
            .map(|x| x.accuracy)
            .collect()
    };
    let (schema, control) = (pick(true, None), pick(false, None));
    let test = t_test(&schema, &control)?;
    let mut reps: Vec<usize> = scores.iter().map(|s| s.repetition).collect();
    reps.sort();
    reps.dedup();
    let per_repetition = reps
        .iter()
        .map(|&r| t_test(&pick(true, Some(r)), &pick(false, Some(r))).ok())
        .collect();
    Ok(Exp2Result {
        scores,
        schema,
        control,
        test,
        per_repetition,
    })
}

/// Exp. 2: pretrain on X, freeze all but the head, transfer to Y ≠ X, and
/// compare schema and control transfer accuracy.
pub fn run_exp2(settings: &Settings, seed: u64) -> Result<Exp2Result> {
    settings.validate()?;
    let tasks = assignment_tasks(settings.exp2.assignments);
    let reps: Vec<usize> = (0..settings.exp2.repetitions).collect();
    let per = parallel::map(reps, |r| {
        let pool = build_pool(settings, seed, r, &tasks)?;
        exp2_from_pool(settings, &pool)
    });
    let mut scores = Vec::new();
    for r in per {
        scores.extend(r?);
    }
    summarise_exp2(scores)
}
