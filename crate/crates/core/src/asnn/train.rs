use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{OptimState, Rng, Scalar, Tape, Tensor, Var};

use super::config::AsnnConfig;
use super::model::{AsnnModel, ForwardOptions, ForwardVars, MLP_HEAD};

/// Seed of the generator used by [`evaluate`]; evaluation is a pure function
/// of model and data.
pub const EVAL_SEED: u64 = 0x5EED_0E7A;

/// A labelled `[C × H × W]` image.
pub type Example<T = f32> = (Tensor<T>, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
        }
    }
}

/// Mean losses per epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub loss: Vec<f64>,
    pub task_loss: Vec<f64>,
    pub attention_loss: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub task: Var,
    pub attention: Option<Var>,
}

/// Weighted sum of task and attention-prediction losses.
pub fn combine_losses(config: &AsnnConfig, task: f64, attention: f64) -> f64 {
    if config.has_schema {
        config.task_weight * task + config.schema_weight * attention
    } else {
        task
    }
}

/// Cross-entropy on the logits, plus (schema variant) the mean squared error
/// between predicted attention and the final attention held constant.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    config: &AsnnConfig,
    vars: &ForwardVars,
    labels: &[usize],
) -> Result<LossVars> {
    let task = tape.cross_entropy(vars.logits, labels)?;
    match vars.predicted_attention {
        Some(pred) if config.has_schema => {
            let att = tape.mse(pred, vars.final_attention)?;
            let wt = tape.scale(task, T::of(config.task_weight));
            let wa = tape.scale(att, T::of(config.schema_weight));
            let total = tape.add(wt, wa)?;
            Ok(LossVars {
                total,
                task,
                attention: Some(att),
            })
        }
        _ => Ok(LossVars {
            total: task,
            task,
            attention: None,
        }),
    }
}

/// Loss of a single materialised trace, as a plain number.
pub fn trace_loss<T: Scalar>(
    config: &AsnnConfig,
    trace: &super::ForwardTrace<T>,
    label: usize,
) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let logits = tape.constant(&trace.logits);
    let task = tape.cross_entropy(logits, &[label])?;
    let task = tape.scalar_value(task).as_f64();
    let att = match &trace.predicted_attention {
        Some(p) => {
            let p = tape.constant(p);
            let f = tape.constant(&trace.final_attention);
            let l = tape.mse(p, f)?;
            tape.scalar_value(l).as_f64()
        }
        None => 0.0,
    };
    Ok(combine_losses(config, task, att))
}

/// Freezes every parameter group except the MLP head. Idempotent.
pub fn freeze_except_head<T: Scalar>(model: &mut AsnnModel<T>) {
    let groups = model.params().groups();
    for g in groups {
        if g != MLP_HEAD {
            model.params_mut().freeze(&g);
        }
    }
}

fn check_labels(data: &[Example<impl Scalar>], n_classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some((_, l)) = data.iter().find(|(_, l)| *l >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label: *l,
            n_classes,
        });
    }
    Ok(())
}

/// One gradient step on a minibatch; returns (total, task, attention) losses.
pub fn train_step<T: Scalar>(
    model: &mut AsnnModel<T>,
    opt: &mut OptimState<T>,
    batch: &[&Example<T>],
    rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape);
    let images: Vec<&Tensor<T>> = batch.iter().map(|(x, _)| x).collect();
    let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
    let vars = model.forward_vars(&mut tape, &b, &images, rng, ForwardOptions::default())?;
    let loss = combined_loss(&mut tape, model.config(), &vars, &labels)?;
    let grads = tape.backward(loss.total)?;
    let params = model.params_mut();
    params.zero_grad();
    params.accumulate(&grads, &b);
    opt.step(params)?;
    params.zero_grad();
    Ok((
        tape.scalar_value(loss.total).as_f64(),
        tape.scalar_value(loss.task).as_f64(),
        loss.attention
            .map_or(0.0, |a| tape.scalar_value(a).as_f64()),
    ))
}

/// Shuffled minibatch training on the combined loss.
pub fn train<T: Scalar>(
    model: &mut AsnnModel<T>,
    data: &[Example<T>],
    opts: &TrainOptions,
    rng: &mut Rng,
) -> Result<TrainLog> {
    check_labels(data, model.config().n_classes)?;
    let mut opt = OptimState::new(opts.learning_rate);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..opts.epochs {
        rng.shuffle(&mut order);
        let (mut tot, mut task, mut att, mut n) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let (l, lt, la) = train_step(model, &mut opt, &batch, rng)?;
            let w = batch.len() as f64;
            tot += l * w;
            task += lt * w;
            att += la * w;
            n += w;
        }
        log.loss.push(tot / n);
        log.task_loss.push(task / n);
        log.attention_loss.push(att / n);
    }
    Ok(log)
}

/// Predicted class per example.
pub fn predict<T: Scalar>(
    model: &AsnnModel<T>,
    images: &[&Tensor<T>],
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let mut tape = Tape::new();
        let b = model.params().bind_frozen(&mut tape);
        let vars = model.forward_vars(&mut tape, &b, chunk, rng, ForwardOptions::default())?;
        let c = model.config().n_classes;
        out.extend(tape.value(vars.logits).chunks(c).map(argmax));
    }
    Ok(out)
}

/// Fraction of correctly classified examples.
pub fn evaluate<T: Scalar>(model: &AsnnModel<T>, data: &[Example<T>]) -> Result<f64> {
    check_labels(data, model.config().n_classes)?;
    let mut rng = Rng::new(EVAL_SEED);
    let images: Vec<&Tensor<T>> = data.iter().map(|(x, _)| x).collect();
    let preds = predict(model, &images, &mut rng)?;
    let correct = preds.iter().zip(data).filter(|(p, (_, y))| *p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

fn features_rows<T: Scalar>(
    model: &AsnnModel<T>,
    features: &Tensor<T>,
    labels: &[usize],
) -> Result<usize> {
    let d = model.config().embed_dim;
    if features.rank() != 2 || features.shape()[1] != d || features.shape()[0] != labels.len() {
        return Err(Error::shape(
            "head features",
            features.shape(),
            &[labels.len(), d],
        ));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_classes = model.config().n_classes;
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label: l,
            n_classes,
        });
    }
    Ok(labels.len())
}

/// Trains the MLP head alone on precomputed class-token features `[N × D]`
/// (see [`AsnnModel::features`]); returns the mean cross-entropy per epoch.
/// Only head parameters change.
pub fn train_head<T: Scalar>(
    model: &mut AsnnModel<T>,
    features: &Tensor<T>,
    labels: &[usize],
    opts: &TrainOptions,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let n = features_rows(model, features, labels)?;
    let d = model.config().embed_dim;
    freeze_except_head(model);
    let mut opt = OptimState::new(opts.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let mut rows = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                rows.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
            }
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let b = model.params().bind(&mut tape);
            let x = tape.constant(&Tensor::new(&[chunk.len(), d], rows)?);
            let logits = model.head_vars(&mut tape, &b, x)?;
            let loss = tape.cross_entropy(logits, &batch_labels)?;
            let grads = tape.backward(loss)?;
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&grads, &b);
            opt.step(params)?;
            params.zero_grad();
            total += tape.scalar_value(loss).as_f64() * chunk.len() as f64;
        }
        log.push(total / n as f64);
    }
    Ok(log)
}

/// Accuracy of the MLP head on precomputed class-token features.
pub fn head_accuracy<T: Scalar>(
    model: &AsnnModel<T>,
    features: &Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    let n = features_rows(model, features, labels)?;
    let mut tape = Tape::new();
    let b = model.params().bind_frozen(&mut tape);
    let x = tape.constant(features);
    let logits = model.head_vars(&mut tape, &b, x)?;
    let c = model.config().n_classes;
    let correct = tape
        .value(logits)
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / n as f64)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}
