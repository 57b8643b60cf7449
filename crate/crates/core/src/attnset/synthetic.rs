use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::asnn::Example;
use crate::error::{Error, Result};
use crate::ndcore::{Rng, Tensor};

/// One of the three binary image classification tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    A,
    B,
    C,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::A, TaskId::B, TaskId::C];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The task after this one, cyclically (A→B→C→A).
    pub fn next(self) -> TaskId {
        Self::ALL[(self.index() + 1) % 3]
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for TaskId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(TaskId::A),
            "B" | "b" => Ok(TaskId::B),
            "C" | "c" => Ok(TaskId::C),
            _ => Err(Error::invalid(format!(
                "unknown task `{s}` (expected A, B or C)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labelled RGB images of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub items: Vec<Example>,
    pub task_id: TaskId,
    pub split: Split,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> Vec<&Tensor> {
        self.items.iter().map(|(x, _)| x).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|(_, y)| *y).collect()
    }
}

/// Default synthetic image side.
pub const SYNTHETIC_SIZE: usize = 64;

/// 64 px synthetic dataset, see [`make_synthetic_images`].
pub fn make_synthetic_dataset(task: TaskId, n_items: usize, rng: &mut Rng) -> Result<ImageDataset> {
    make_synthetic_images(task, n_items, SYNTHETIC_SIZE, Split::Train, rng)
}

/// Two procedurally drawn classes per task, each a shape with its own fill
/// texture, on a task-tinted background:
///
/// * A: solid disk vs checkered square
/// * B: disk with horizontal stripes vs disk with vertical stripes
/// * C: solid ring vs plus sign with diagonal stripes
///
/// Labels alternate before a final shuffle, so counts differ by at most one.
pub fn make_synthetic_images(
    task: TaskId,
    n_items: usize,
    image_size: usize,
    split: Split,
    rng: &mut Rng,
) -> Result<ImageDataset> {
    if n_items < 2 {
        return Err(Error::invalid(format!(
            "synthetic dataset needs at least 2 items, got {n_items}"
        )));
    }
    if image_size < 4 {
        return Err(Error::invalid(format!(
            "synthetic images need side ≥ 4, got {image_size}"
        )));
    }
    let mut items: Vec<Example> = (0..n_items)
        .map(|i| (draw_image(task, i % 2, image_size, rng), i % 2))
        .collect();
    rng.shuffle(&mut items);
    Ok(ImageDataset {
        items,
        task_id: task,
        split,
    })
}

const BACKGROUND: [[f64; 3]; 3] = [[0.15, 0.2, 0.35], [0.45, 0.4, 0.35], [0.7, 0.65, 0.55]];

fn draw_image(task: TaskId, class: usize, s: usize, rng: &mut Rng) -> Tensor {
    let sf = s as f64;
    let base = BACKGROUND[task.index()];
    let bg: Vec<f64> = base.iter().map(|b| b + rng.range(-0.08, 0.08)).collect();
    let fg: Vec<f64> = bg
        .iter()
        .map(|b| (1.0 - b + rng.range(-0.15, 0.15)).clamp(0.0, 1.0))
        .collect();
    let cx = rng.range(0.35, 0.65) * sf;
    let cy = rng.range(0.35, 0.65) * sf;
    let r = rng.range(0.18, 0.3) * sf;
    let period = (s / 16).max(2);

    let mut data = vec![0.0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let (band_x, band_y) = ((x / period) % 2 == 0, (y / period) % 2 == 0);
            let inside = match (task, class) {
                (TaskId::A, 0) => dist <= r,
                (TaskId::A, _) => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r && band_x == band_y,
                (TaskId::B, 0) => dist <= r && band_y,
                (TaskId::B, _) => dist <= r && band_x,
                (TaskId::C, 0) => dist <= r && dist >= 0.6 * r,
                (TaskId::C, _) => {
                    let arm = 0.3 * r;
                    let plus =
                        (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r);
                    plus && ((x + y) / period) % 2 == 0
                }
            };
            let colour = if inside { &fg } else { &bg };
            for (c, v) in colour.iter().enumerate() {
                let noisy = (v + 0.04 * rng.normal()).clamp(0.0, 1.0);
                data[(c * s + y) * s + x] = noisy as f32;
            }
        }
    }
    Tensor::new(&[3, s, s], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = make_synthetic_dataset(TaskId::A, 6, &mut Rng::new(7)).unwrap();
        let b = make_synthetic_dataset(TaskId::A, 6, &mut Rng::new(7)).unwrap();
        assert!(a
            .items
            .iter()
            .zip(&b.items)
            .all(|(x, y)| x.0.bit_eq(&y.0) && x.1 == y.1));
    }

    #[test]
    fn labels_balanced() {
        let d = make_synthetic_images(TaskId::C, 100, 16, Split::Test, &mut Rng::new(1)).unwrap();
        assert_eq!(d.labels().iter().filter(|&&l| l == 1).count(), 50);
        let d = make_synthetic_images(TaskId::C, 7, 16, Split::Test, &mut Rng::new(1)).unwrap();
        assert_eq!(d.labels().iter().filter(|&&l| l == 1).count(), 3);
    }

    #[test]
    fn tasks_differ_in_mean_pixel() {
        let mean = |t| {
            let d = make_synthetic_dataset(t, 20, &mut Rng::new(5)).unwrap();
            d.items.iter().map(|(x, _)| x.mean() as f64).sum::<f64>() / 20.0
        };
        let (a, b, c) = (mean(TaskId::A), mean(TaskId::B), mean(TaskId::C));
        assert!(
            (a - b).abs() > 0.02 && (b - c).abs() > 0.02 && (a - c).abs() > 0.02,
            "{a} {b} {c}"
        );
    }

    #[test]
    fn rejects_tiny_datasets() {
        assert!(make_synthetic_dataset(TaskId::B, 1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn values_in_unit_range() {
        let d = make_synthetic_images(TaskId::B, 4, 32, Split::Train, &mut Rng::new(2)).unwrap();
        for (x, _) in &d.items {
            assert_eq!(x.shape(), &[3, 32, 32]);
            assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn task_parsing() {
        assert_eq!("b".parse::<TaskId>().unwrap(), TaskId::B);
        assert!("D".parse::<TaskId>().is_err());
        assert_eq!(TaskId::C.next(), TaskId::A);
    }
}
