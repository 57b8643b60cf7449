use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::asnn::{AsnnModel, ForwardOptions};
use crate::error::{Error, Result};
use crate::ndcore::{Rng, Tape, Tensor};

use super::synthetic::{ImageDataset, TaskId};

/// Number of heads stacked into each attention record.
pub const RECORDED_HEADS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Judgement {
    Veridical,
    Scrambled,
}

impl Judgement {
    /// Class index used by the receiving classifier.
    pub fn class(self) -> usize {
        match self {
            Judgement::Veridical => 0,
            Judgement::Scrambled => 1,
        }
    }
}

/// A cropped `[T' × T' × 3]` attention tensor with its judgement label.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub tensor: Tensor,
    pub label: Judgement,
    pub source_task: TaskId,
    pub source_has_schema: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrambleStrategy {
    /// One random column permutation per head slice.
    #[default]
    PerHeadTokenPermute,
    /// An independent permutation of the three head values at every `(i, j)`.
    HeadAxisPermute,
}

impl ScrambleStrategy {
    pub fn name(self) -> &'static str {
        match self {
            ScrambleStrategy::PerHeadTokenPermute => "per_head_token_permute",
            ScrambleStrategy::HeadAxisPermute => "head_axis_permute",
        }
    }
}

impl fmt::Display for ScrambleStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScrambleStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_head_token_permute" => Ok(ScrambleStrategy::PerHeadTokenPermute),
            "head_axis_permute" => Ok(ScrambleStrategy::HeadAxisPermute),
            _ => Err(Error::invalid(format!(
                "unknown scramble strategy `{s}` (expected per_head_token_permute or head_axis_permute)"
            ))),
        }
    }
}

/// Records one `[T × T × 3]` tensor per dataset item.
///
/// Three distinct heads are drawn once from `rng` and used for every item.
/// Control models contribute their softmax scores, schema models their final
/// (masked) attention.
pub fn record_attention(
    model: &AsnnModel,
    dataset: &ImageDataset,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    let cfg = model.config();
    if cfg.n_heads < RECORDED_HEADS {
        return Err(Error::invalid(format!(
            "recording needs at least {RECORDED_HEADS} heads, model has {}",
            cfg.n_heads
        )));
    }
    let heads = rng.choose_distinct(cfg.n_heads, RECORDED_HEADS);
    let t = cfg.token_count();
    let images = dataset.images();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let mut tape = Tape::new();
        let b = model.params().bind_frozen(&mut tape);
        let vars = model.forward_vars(&mut tape, &b, chunk, rng, ForwardOptions::default())?;
        let att = tape.value(vars.final_attention);
        for item in 0..chunk.len() {
            let mut data = vec![0.0f32; t * t * RECORDED_HEADS];
            for (k, &h) in heads.iter().enumerate() {
                let slice = &att[(item * cfg.n_heads + h) * t * t..][..t * t];
                for (ij, &v) in slice.iter().enumerate() {
                    data[ij * RECORDED_HEADS + k] = v;
                }
            }
            out.push(Tensor::new(&[t, t, RECORDED_HEADS], data)?);
        }
    }
    Ok(out)
}

fn check_record(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, h] if a == b => Ok((a, b, h)),
        _ => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects a square [T × T × heads] tensor"),
        }),
    }
}

/// Destroys attention structure while keeping each head's values.
pub fn scramble(t: &Tensor, strategy: ScrambleStrategy, rng: &mut Rng) -> Result<Tensor> {
    let (rows, cols, heads) = check_record(t, "scramble")?;
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    match strategy {
        ScrambleStrategy::PerHeadTokenPermute => {
            for k in 0..heads {
                let perm = rng.permutation(cols);
                for i in 0..rows {
                    for (j, &pj) in perm.iter().enumerate() {
                        out[(i * cols + j) * heads + k] = src[(i * cols + pj) * heads + k];
                    }
                }
            }
        }
        ScrambleStrategy::HeadAxisPermute => {
            for (o, s) in out.chunks_mut(heads).zip(src.chunks(heads)) {
                let perm = rng.permutation(heads);
                for (k, &pk) in perm.iter().enumerate() {
                    o[k] = s[pk];
                }
            }
        }
    }
    Tensor::new(t.shape(), out)
}

/// Drops row 0 and column 0 (the class token) of every head slice.
pub fn crop_to_image_dims(t: &Tensor) -> Result<Tensor> {
    let (n, _, heads) = check_record(t, "crop_to_image_dims")?;
    if n < 2 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "crop needs at least 2 tokens".into(),
        });
    }
    let m = n - 1;
    let src = t.data();
    let mut out = Vec::with_capacity(m * m * heads);
    for i in 1..n {
        out.extend_from_slice(&src[(i * n + 1) * heads..(i * n + n) * heads]);
    }
    Tensor::new(&[m, m, heads], out)
}

/// Where a batch of raw records came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSource {
    pub task: TaskId,
    pub has_schema: bool,
}

/// Train/test attention-judgement data.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgementDataset {
    pub train: Vec<AttentionRecord>,
    pub test: Vec<AttentionRecord>,
}

/// Fraction of records held out for testing.
pub const TEST_FRACTION: f64 = 0.1;

/// Labels half of the raw records veridical and scrambles the other half
/// (disjoint), crops every record to image dimensions, and splits 90/10 with
/// each split balanced between the two labels (within one for odd counts).
pub fn build_judgement_dataset(
    records: &[Tensor],
    source: RecordSource,
    strategy: ScrambleStrategy,
    rng: &mut Rng,
) -> Result<JudgementDataset> {
    if records.len() < 4 {
        return Err(Error::invalid(format!(
            "judgement dataset needs at least 4 records, got {}",
            records.len()
        )));
    }
    let order = rng.permutation(records.len());
    let n = records.len() - records.len() % 2;
    let (veridical, scrambled) = order[..n].split_at(n / 2);

    let n_test = ((n as f64) * TEST_FRACTION).round().max(2.0) as usize;
    let test_v = n_test / 2;
    let test_s = n_test - test_v;

    let make = |idx: usize, label: Judgement, rng: &mut Rng| -> Result<AttentionRecord> {
        let raw = &records[idx];
        let t = match label {
            Judgement::Veridical => raw.clone(),
            Judgement::Scrambled => scramble(raw, strategy, rng)?,
        };
        Ok(AttentionRecord {
            tensor: crop_to_image_dims(&t)?,
            label,
            source_task: source.task,
            source_has_schema: source.has_schema,
        })
    };

    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (pos, &i) in veridical.iter().enumerate() {
        let r = make(i, Judgement::Veridical, rng)?;
        if pos < test_v {
            test.push(r)
        } else {
            train.push(r)
        }
    }
    for (pos, &i) in scrambled.iter().enumerate() {
        let r = make(i, Judgement::Scrambled, rng)?;
        if pos < test_s {
            test.push(r)
        } else {
            train.push(r)
        }
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut test);
    Ok(JudgementDataset { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asnn::AsnnConfig;
    use crate::attnset::{make_synthetic_images, Split};

    fn random_record(t: usize, rng: &mut Rng) -> Tensor {
        Tensor::new(
            &[t, t, 3],
            (0..t * t * 3).map(|_| rng.uniform() as f32).collect(),
        )
        .unwrap()
    }

    fn source() -> RecordSource {
        RecordSource {
            task: TaskId::A,
            has_schema: true,
        }
    }

    #[test]
    fn crop_shifts_indices() {
        let mut rng = Rng::new(0);
        let t = random_record(5, &mut rng);
        let c = crop_to_image_dims(&t).unwrap();
        assert_eq!(c.shape(), &[4, 4, 3]);
        for i in 0..4 {
            for j in 0..4 {
                for h in 0..3 {
                    assert_eq!(c.at(&[i, j, h]), t.at(&[i + 1, j + 1, h]));
                }
            }
        }
        let one = Tensor::zeros(&[1, 1, 3]);
        assert!(crop_to_image_dims(&one).is_err());
    }

    #[test]
    fn desk_and_paper_crop_sizes() {
        assert_eq!(
            crop_to_image_dims(&Tensor::zeros(&[65, 65, 3]))
                .unwrap()
                .shape(),
            &[64, 64, 3]
        );
        assert_eq!(
            crop_to_image_dims(&Tensor::zeros(&[257, 257, 3]))
                .unwrap()
                .shape(),
            &[256, 256, 3]
        );
    }

    #[test]
    fn head_axis_permutes_triple() {
        let t = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = scramble(&t, ScrambleStrategy::HeadAxisPermute, &mut Rng::new(4)).unwrap();
        let mut v = s.data().to_vec();
        v.sort_by(f32::total_cmp);
        assert_eq!(v, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn single_column_scramble_is_identity() {
        let t = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = scramble(&t, ScrambleStrategy::PerHeadTokenPermute, &mut Rng::new(4)).unwrap();
        assert!(s.bit_eq(&t));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            ScrambleStrategy::PerHeadTokenPermute,
            ScrambleStrategy::HeadAxisPermute,
        ] {
            assert_eq!(s.name().parse::<ScrambleStrategy>().unwrap(), s);
        }
        assert!("rows".parse::<ScrambleStrategy>().is_err());
    }

    #[test]
    fn judgement_split_sizes() {
        let mut rng = Rng::new(1);
        let recs: Vec<Tensor> = (0..100).map(|_| random_record(4, &mut rng)).collect();
        let ds = build_judgement_dataset(&recs, source(), ScrambleStrategy::default(), &mut rng)
            .unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (90, 10));
        let scrambled =
            |v: &[AttentionRecord]| v.iter().filter(|r| r.label == Judgement::Scrambled).count();
        assert_eq!(scrambled(&ds.train), 45);
        assert_eq!(scrambled(&ds.test), 5);
        assert!(ds
            .train
            .iter()
            .all(|r| r.tensor.shape() == [3, 3, 3] && r.source_has_schema));
    }

    #[test]
    fn paper_sized_split() {
        let recs = vec![Tensor::zeros(&[2, 2, 3]); 1460];
        let ds = build_judgement_dataset(
            &recs,
            source(),
            ScrambleStrategy::default(),
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (1314, 146));
        let scrambled = ds
            .test
            .iter()
            .filter(|r| r.label == Judgement::Scrambled)
            .count();
        assert_eq!(scrambled, 73);
    }

    #[test]
    fn scrambled_items_differ_from_every_source() {
        let mut rng = Rng::new(2);
        let recs: Vec<Tensor> = (0..20).map(|_| random_record(6, &mut rng)).collect();
        let cropped: Vec<Tensor> = recs
            .iter()
            .map(|r| crop_to_image_dims(r).unwrap())
            .collect();
        let ds = build_judgement_dataset(&recs, source(), ScrambleStrategy::default(), &mut rng)
            .unwrap();
        for r in ds.train.iter().chain(&ds.test) {
            let matches = cropped.iter().any(|c| c.bit_eq(&r.tensor));
            assert_eq!(matches, r.label == Judgement::Veridical);
        }
    }

    #[test]
    fn too_few_records() {
        let recs = vec![Tensor::zeros(&[2, 2, 3]); 3];
        assert!(build_judgement_dataset(
            &recs,
            source(),
            ScrambleStrategy::default(),
            &mut Rng::new(0)
        )
        .is_err());
    }

    #[test]
    fn records_from_models() {
        let cfg = AsnnConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            head_dim: 4,
            ..AsnnConfig::desk(false)
        };
        let mut rng = Rng::new(3);
        let data = make_synthetic_images(TaskId::A, 4, 16, Split::Test, &mut rng).unwrap();
        let m = AsnnModel::new(cfg.clone(), &mut rng).unwrap();
        let recs = record_attention(&m, &data, &mut rng).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[0].shape(), &[5, 5, 3]);
        for r in &recs {
            for k in 0..3 {
                for i in 0..5 {
                    let s: f32 = (0..5).map(|j| r.at(&[i, j, k])).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
        let few = AsnnModel::new(AsnnConfig { n_heads: 2, ..cfg }, &mut rng).unwrap();
        assert!(record_attention(&few, &data, &mut rng).is_err());
    }
}
