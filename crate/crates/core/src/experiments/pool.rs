use crate::asnn::{evaluate, train, AsnnModel, TrainLog};
use crate::attnset::{make_synthetic_images, ImageDataset, Split, TaskId};
use crate::error::{Error, Result};
use crate::ndcore::{mix_seed, Rng};
use crate::parallel;

use super::config::Settings;

/// Train and test images of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: ImageDataset,
    pub test: ImageDataset,
}

/// An image classifier trained on one task.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub task: TaskId,
    pub has_schema: bool,
    pub model: AsnnModel,
    pub log: TrainLog,
    pub test_accuracy: f64,
}

/// Everything one repetition pretrains: datasets per task and a schema and a
/// control classifier per task, all derived from the repetition seed.
#[derive(Debug, Clone)]
pub struct Pool {
    pub repetition: usize,
    pub seed: u64,
    pub data: Vec<TaskData>,
    pub models: Vec<Pretrained>,
}

/// Seed of repetition `r` of a run seeded with `seed`.
pub fn repetition_seed(seed: u64, repetition: usize) -> u64 {
    mix_seed(seed, repetition as u64)
}

/// Generator streams of a repetition, indexed by purpose.
pub(crate) mod stream {
    pub const DATA: u64 = 0;
    pub const MODELS: u64 = 1;
    pub const EXP1: u64 = 2;
    pub const EXP2: u64 = 3;
    pub const EXP3: u64 = 4;
}

pub fn task_data(settings: &Settings, task: TaskId, rng: &Rng) -> Result<TaskData> {
    let size = settings.model.image_size;
    let d = &settings.data;
    Ok(TaskData {
        train: make_synthetic_images(task, d.train_items, size, Split::Train, &mut rng.child(0))?,
        test: make_synthetic_images(task, d.test_items, size, Split::Test, &mut rng.child(1))?,
    })
}

pub fn pretrain(
    settings: &Settings,
    data: &TaskData,
    has_schema: bool,
    rng: &mut Rng,
) -> Result<Pretrained> {
    let mut model = AsnnModel::new(settings.classifier(has_schema), rng)?;
    let log = train(&mut model, &data.train.items, &settings.pretrain, rng)?;
    let test_accuracy = evaluate(&model, &data.test.items)?;
    Ok(Pretrained {
        task: data.train.task_id,
        has_schema,
        model,
        log,
        test_accuracy,
    })
}

/// Builds datasets and pretrains both variants for every task in `tasks`.
pub fn build_pool(
    settings: &Settings,
    seed: u64,
    repetition: usize,
    tasks: &[TaskId],
) -> Result<Pool> {
    let rep_seed = repetition_seed(seed, repetition);
    let root = Rng::new(rep_seed);
    let data_rng = root.child(stream::DATA);
    let data = tasks
        .iter()
        .map(|&t| task_data(settings, t, &data_rng.child(t.index() as u64)))
        .collect::<Result<Vec<_>>>()?;
    let model_rng = root.child(stream::MODELS);
    let jobs: Vec<(usize, bool)> = (0..tasks.len())
        .flat_map(|i| [(i, true), (i, false)])
        .collect();
    let models = parallel::map(jobs, |(i, schema)| {
        let index = tasks[i].index() as u64 * 2 + schema as u64;
        pretrain(settings, &data[i], schema, &mut model_rng.child(index))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Pool {
        repetition,
        seed: rep_seed,
        data,
        models,
    })
}

impl Pool {
    pub fn data(&self, task: TaskId) -> Result<&TaskData> {
        self.data
            .iter()
            .find(|d| d.train.task_id == task)
            .ok_or_else(|| Error::Config(format!("task {task} was not pretrained")))
    }

    pub fn model(&self, task: TaskId, has_schema: bool) -> Result<&Pretrained> {
        self.models
            .iter()
            .find(|m| m.task == task && m.has_schema == has_schema)
            .ok_or_else(|| Error::Config(format!("task {task} was not pretrained")))
    }
}

/// The `k`-th task assignment `(X, Y)` with `Y ≠ X`: A→B, B→C, C→A.
pub fn assignment(k: usize) -> (TaskId, TaskId) {
    let x = TaskId::ALL[k % 3];
    (x, x.next())
}

/// Tasks touched by the first `n` assignments.
pub fn assignment_tasks(n: usize) -> Vec<TaskId> {
    let mut tasks: Vec<TaskId> = (0..n)
        .flat_map(|k| {
            let (x, y) = assignment(k);
            [x, y]
        })
        .collect();
    tasks.sort();
    tasks.dedup();
    tasks
}
