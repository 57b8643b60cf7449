//! On-disk formats: binary PPM (P6) images and attention-judgement datasets
//! stored as a `manifest.json` plus one `NDT1` tensor per record.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{io, Tensor};

use super::judgement::{AttentionRecord, Judgement, JudgementDataset, ScrambleStrategy};
use super::synthetic::{ImageDataset, Split, TaskId};

fn ppm_error(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "ppm",
        reason: reason.into(),
    }
}

/// Encodes a `[3 × H × W]` image with values in `[0, 1]` as 8-bit P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [3, h, w] = *image.shape() else {
        return Err(ppm_error(format!(
            "expected a [3 × H × W] image, got {:?}",
            image.shape()
        )));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

/// Decodes an 8-bit binary PPM into a `[3 × H × W]` tensor scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ppm_error("truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| ppm_error("non-ASCII header"))?,
        );
    }
    if fields[0] != "P6" {
        return Err(ppm_error(format!("unsupported magic `{}`", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| ppm_error(format!("bad header field `{s}`")))
    };
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(ppm_error(format!(
            "only 8-bit images are supported, maxval {max}"
        )));
    }
    pos += 1;
    let body = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| ppm_error("truncated pixel data"))?;
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in body.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes every image as `NNNNN_cL.ppm` (L = label).
pub fn save_ppm_dataset(dataset: &ImageDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, (img, label)) in dataset.items.iter().enumerate() {
        fs::write(dir.join(format!("{i:05}_c{label}.ppm")), encode_ppm(img)?)?;
    }
    Ok(())
}

/// Reads `*_c0.ppm` / `*_c1.ppm` files in name order.
pub fn load_ppm_dataset(dir: &Path, task: TaskId, split: Split) -> Result<ImageDataset> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    let mut items = Vec::with_capacity(names.len());
    for name in names {
        let stem = name.trim_end_matches(".ppm");
        let label = match stem.rsplit_once("_c") {
            Some((_, l)) => l
                .parse::<usize>()
                .map_err(|_| ppm_error(format!("no label in `{name}`")))?,
            None => return Err(ppm_error(format!("no label in `{name}`"))),
        };
        items.push((decode_ppm(&fs::read(dir.join(&name))?)?, label));
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ImageDataset {
        items,
        task_id: task,
        split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub file: String,
    pub split: Split,
    pub label: Judgement,
    pub source_task: TaskId,
    pub source_has_schema: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionManifest {
    pub format: String,
    pub seed: u64,
    pub strategy: ScrambleStrategy,
    pub n_train: usize,
    pub n_test: usize,
    pub n_scrambled: usize,
    pub source_tasks: Vec<TaskId>,
    pub source_schema_flags: Vec<bool>,
    pub records: Vec<RecordEntry>,
}

pub const ATTENTION_FORMAT: &str = "schemanet-attention-1";

pub fn save_judgement_dataset(
    dataset: &JudgementDataset,
    seed: u64,
    strategy: ScrambleStrategy,
    dir: &Path,
) -> Result<AttentionManifest> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    let mut tasks = Vec::new();
    let mut flags = Vec::new();
    for (split, list) in [(Split::Train, &dataset.train), (Split::Test, &dataset.test)] {
        for (i, r) in list.iter().enumerate() {
            let file = format!(
                "{}_{i:05}.ndt",
                if split == Split::Train {
                    "train"
                } else {
                    "test"
                }
            );
            io::save(&r.tensor, &dir.join(&file))?;
            if !tasks.contains(&r.source_task) {
                tasks.push(r.source_task);
            }
            if !flags.contains(&r.source_has_schema) {
                flags.push(r.source_has_schema);
            }
            records.push(RecordEntry {
                file,
                split,
                label: r.label,
                source_task: r.source_task,
                source_has_schema: r.source_has_schema,
            });
        }
    }
    let manifest = AttentionManifest {
        format: ATTENTION_FORMAT.into(),
        seed,
        strategy,
        n_train: dataset.train.len(),
        n_test: dataset.test.len(),
        n_scrambled: records
            .iter()
            .filter(|r| r.label == Judgement::Scrambled)
            .count(),
        source_tasks: tasks,
        source_schema_flags: flags,
        records,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_judgement_dataset(dir: &Path) -> Result<(JudgementDataset, AttentionManifest)> {
    let manifest: AttentionManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != ATTENTION_FORMAT {
        return Err(Error::Format {
            what: "attention dataset",
            reason: format!("unknown format `{}`", manifest.format),
        });
    }
    let mut ds = JudgementDataset {
        train: Vec::new(),
        test: Vec::new(),
    };
    for e in &manifest.records {
        let rec = AttentionRecord {
            tensor: io::load(&dir.join(&e.file))?,
            label: e.label,
            source_task: e.source_task,
            source_has_schema: e.source_has_schema,
        };
        match e.split {
            Split::Train => ds.train.push(rec),
            Split::Test => ds.test.push(rec),
        }
    }
    Ok((ds, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attnset::{build_judgement_dataset, make_synthetic_images, RecordSource};
    use crate::ndcore::Rng;

    #[test]
    fn ppm_round_trip_is_quantised() {
        let ds = make_synthetic_images(TaskId::A, 2, 8, Split::Train, &mut Rng::new(1)).unwrap();
        let img = &ds.items[0].0;
        let bytes = encode_ppm(img).unwrap();
        assert!(bytes.starts_with(b"P6\n8 8\n255\n"));
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let bytes = b"P6 # comment\n1 1\n255\n\x00\x80\xff";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0]);
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn ppm_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic_images(TaskId::B, 4, 8, Split::Test, &mut Rng::new(2)).unwrap();
        save_ppm_dataset(&ds, dir.path()).unwrap();
        let back = load_ppm_dataset(dir.path(), TaskId::B, Split::Test).unwrap();
        assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn judgement_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(3);
        let recs: Vec<Tensor> = (0..10)
            .map(|_| {
                Tensor::new(&[3, 3, 3], (0..27).map(|_| rng.uniform() as f32).collect()).unwrap()
            })
            .collect();
        let source = RecordSource {
            task: TaskId::C,
            has_schema: false,
        };
        let ds =
            build_judgement_dataset(&recs, source, ScrambleStrategy::default(), &mut rng).unwrap();
        let m = save_judgement_dataset(&ds, 3, ScrambleStrategy::default(), dir.path()).unwrap();
        assert_eq!(m.n_scrambled, 5);
        let (back, m2) = load_judgement_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(m2, m);
    }
}
