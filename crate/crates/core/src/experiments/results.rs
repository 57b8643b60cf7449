//! Results tables, the statistics summary and plot-ready CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coloring::Pairing;
use crate::error::{Error, Result};

use super::exp1::{cell_name, Exp1Grid, Exp1Result};
use super::exp2::Exp2Result;
use super::exp3::{Exp3Result, Exp3Row};
use super::stats::{mean_sem, t_test, StatResult};

pub const RESULTS_FILE: &str = "results.csv";
pub const EXP3_METRICS_FILE: &str = "exp3_metrics.csv";
pub const STATS_FILE: &str = "stats.txt";

const RESULTS_HEADER: &str = "experiment,cell,repetition,seed,metric,value";
const EXP3_HEADER: &str =
    "pairing,repetition,epoch,mean_reward,mean_overlap,pixels_agent0,pixels_agent1,seed";

/// One long-format result value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub cell: String,
    pub repetition: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl ResultRow {
    fn new(
        experiment: &str,
        cell: &str,
        repetition: usize,
        seed: u64,
        metric: &str,
        value: f64,
    ) -> Self {
        Self {
            experiment: experiment.into(),
            cell: cell.into(),
            repetition,
            seed,
            metric: metric.into(),
            value,
        }
    }
}

impl Exp1Result {
    /// Transfer scores (`repetition` = score index: repetition × assignments
    /// + assignment) and pretraining accuracies.
    pub fn rows(&self, assignments: usize) -> Vec<ResultRow> {
        let mut rows: Vec<ResultRow> = self
            .scores
            .iter()
            .map(|s| {
                let cell = cell_name(s.sender_schema, s.receiver_schema);
                ResultRow::new(
                    "exp1",
                    &cell,
                    s.repetition * assignments + s.assignment,
                    s.seed,
                    "accuracy",
                    s.accuracy,
                )
            })
            .collect();
        for p in &self.pretrain {
            let cell = if p.has_schema {
                "pretrain-schema"
            } else {
                "pretrain-control"
            };
            rows.push(ResultRow::new(
                "exp1",
                cell,
                p.repetition * 3 + p.task.index(),
                p.seed,
                "accuracy",
                p.accuracy,
            ));
        }
        rows
    }
}

impl Exp2Result {
    pub fn rows(&self, assignments: usize) -> Vec<ResultRow> {
        self.scores
            .iter()
            .map(|s| {
                let cell = if s.has_schema { "schema" } else { "control" };
                let idx = s.repetition * assignments + s.assignment;
                ResultRow::new("exp2", cell, idx, s.seed, "transfer_accuracy", s.accuracy)
            })
            .collect()
    }
}

impl Exp3Result {
    /// Per-repetition reward and overlap, over all epochs and over the last
    /// `final_epochs`.
    pub fn rows(&self, final_epochs: usize) -> Vec<ResultRow> {
        let mut out = Vec::new();
        for pairing in Pairing::ALL {
            let mut reps: Vec<usize> = self.rows_for(pairing).map(|r| r.repetition).collect();
            reps.dedup();
            for rep in reps {
                let rows: Vec<&Exp3Row> = self
                    .rows_for(pairing)
                    .filter(|r| r.repetition == rep)
                    .collect();
                let seed = rows[0].seed;
                let n = rows.len();
                let late = &rows[n.saturating_sub(final_epochs)..];
                let avg = |rs: &[&Exp3Row], f: fn(&Exp3Row) -> f64| {
                    rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64
                };
                let name = pairing.name();
                out.push(ResultRow::new(
                    "exp3",
                    name,
                    rep,
                    seed,
                    "mean_reward",
                    avg(&rows, |r| r.metrics.mean_reward),
                ));
                out.push(ResultRow::new(
                    "exp3",
                    name,
                    rep,
                    seed,
                    "mean_overlap",
                    avg(&rows, |r| r.metrics.mean_overlap),
                ));
                out.push(ResultRow::new(
                    "exp3",
                    name,
                    rep,
                    seed,
                    "final_mean_reward",
                    avg(late, |r| r.metrics.mean_reward),
                ));
                out.push(ResultRow::new(
                    "exp3",
                    name,
                    rep,
                    seed,
                    "final_mean_overlap",
                    avg(late, |r| r.metrics.mean_overlap),
                ));
            }
        }
        out
    }
}

/// One row of the Exp. 3 per-epoch metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp3MetricsRow {
    pub pairing: String,
    pub repetition: usize,
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_overlap: f64,
    pub pixels_agent0: f64,
    pub pixels_agent1: f64,
    pub seed: u64,
}

fn to_csv<R: Serialize>(rows: impl IntoIterator<Item = R>, header: &str) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut any = false;
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
        any = true;
    }
    let bytes = w.into_inner().expect("in-memory csv flush");
    if any {
        String::from_utf8(bytes).expect("csv output is utf-8")
    } else {
        format!("{header}\n")
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    to_csv(rows, RESULTS_HEADER)
}

pub fn exp3_metrics_rows(result: &Exp3Result) -> Vec<Exp3MetricsRow> {
    result
        .rows
        .iter()
        .map(|r| Exp3MetricsRow {
            pairing: r.pairing.name().to_string(),
            repetition: r.repetition,
            epoch: r.metrics.epoch,
            mean_reward: r.metrics.mean_reward,
            mean_overlap: r.metrics.mean_overlap,
            pixels_agent0: r.metrics.pixels_agent0,
            pixels_agent1: r.metrics.pixels_agent1,
            seed: r.seed,
        })
        .collect()
}

pub fn exp3_metrics_csv(result: &Exp3Result) -> String {
    to_csv(exp3_metrics_rows(result), EXP3_HEADER)
}

fn read_csv<R: serde::de::DeserializeOwned>(path: &Path, header: &str) -> Result<Vec<R>> {
    if !path.exists() {
        return Err(Error::MissingResults(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(String::from)
        .collect();
    if found.join(",") != header {
        return Err(Error::Format {
            what: "results csv",
            reason: format!("{}: expected header `{header}`", path.display()),
        });
    }
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<R>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        what: "results csv",
        reason: format!("{}: {e}", path.display()),
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    read_csv(path, RESULTS_HEADER)
}

pub fn read_exp3_metrics(path: &Path) -> Result<Vec<Exp3MetricsRow>> {
    read_csv(path, EXP3_HEADER)
}

fn write_stat(out: &mut String, section: &str, s: &StatResult, effect: &str) {
    let dof: Vec<String> = s.dof.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(out, "[{section}]");
    let _ = writeln!(out, "statistic = {}", s.statistic);
    let _ = writeln!(out, "dof = {}", dof.join(", "));
    let _ = writeln!(out, "p_value = {}", s.p_value);
    let _ = writeln!(out, "{effect} = {}", s.effect_size);
    let _ = writeln!(out, "power = not computed");
    out.push('\n');
}

fn write_group(out: &mut String, section: &str, values: &[f64]) {
    let (m, sem) = mean_sem(values);
    let _ = writeln!(out, "[{section}]");
    let _ = writeln!(out, "n = {}", values.len());
    let _ = writeln!(out, "mean = {m}");
    let _ = writeln!(out, "sem = {sem}");
    out.push('\n');
}

fn values<'a>(
    rows: &'a [ResultRow],
    experiment: &'a str,
    cell: &'a str,
    metric: &'a str,
) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.experiment == experiment && r.cell == cell && r.metric == metric)
        .map(|r| r.value)
        .collect()
}

/// Recomputes every statistic that the rows support, as `[section]` blocks
/// of `key = value` lines.
pub fn stats_summary(rows: &[ResultRow]) -> Result<String> {
    let mut out = String::new();
    let has = |e: &str| rows.iter().any(|r| r.experiment == e);
    if has("exp1") {
        let mut grid = Exp1Grid::default();
        for s in [true, false] {
            for r in [true, false] {
                let cell = cell_name(s, r);
                let v = values(rows, "exp1", &cell, "accuracy");
                write_group(&mut out, &format!("exp1.cell.{cell}"), &v);
                grid.cells.insert((s, r), v);
            }
        }
        match grid.anova() {
            Ok(a) => {
                write_stat(
                    &mut out,
                    "exp1.anova.sender",
                    &a.factor_a,
                    "partial_eta_squared",
                );
                write_stat(
                    &mut out,
                    "exp1.anova.receiver",
                    &a.factor_b,
                    "partial_eta_squared",
                );
                write_stat(
                    &mut out,
                    "exp1.anova.interaction",
                    &a.interaction,
                    "partial_eta_squared",
                );
            }
            Err(e) => {
                let _ = writeln!(out, "[exp1.anova]\nerror = {e}\n");
            }
        }
        let (ps, pc) = (
            values(rows, "exp1", "pretrain-schema", "accuracy"),
            values(rows, "exp1", "pretrain-control", "accuracy"),
        );
        if let Ok(t) = t_test(&ps, &pc) {
            write_stat(&mut out, "exp1.categorization.t_test", &t, "cohens_d");
        }
    }
    if has("exp2") {
        let s = values(rows, "exp2", "schema", "transfer_accuracy");
        let c = values(rows, "exp2", "control", "transfer_accuracy");
        write_group(&mut out, "exp2.schema", &s);
        write_group(&mut out, "exp2.control", &c);
        match t_test(&s, &c) {
            Ok(t) => write_stat(&mut out, "exp2.t_test", &t, "cohens_d"),
            Err(e) => {
                let _ = writeln!(out, "[exp2.t_test]\nerror = {e}\n");
            }
        }
    }
    if has("exp3") {
        for p in Pairing::ALL {
            for metric in [
                "mean_reward",
                "mean_overlap",
                "final_mean_reward",
                "final_mean_overlap",
            ] {
                write_group(
                    &mut out,
                    &format!("exp3.{}.{metric}", p.name()),
                    &values(rows, "exp3", p.name(), metric),
                );
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Format {
            what: "results",
            reason: "no exp1, exp2 or exp3 rows".into(),
        });
    }
    Ok(out)
}

/// 95% normal-approximation interval `mean ± 1.96·SEM`.
pub fn ci95(values: &[f64]) -> (f64, f64, f64) {
    let (m, sem) = mean_sem(values);
    (m, m - 1.96 * sem, m + 1.96 * sem)
}

/// Writes figure-ready CSVs for whatever results `results_dir` holds;
/// returns the files written.
pub fn emit_plot_data(results_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let results_path = results_dir.join(RESULTS_FILE);
    let exp3_path = results_dir.join(EXP3_METRICS_FILE);
    if !results_path.exists() && !exp3_path.exists() {
        return Err(Error::MissingResults(results_dir.to_path_buf()));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    if results_path.exists() {
        let rows = read_results(&results_path)?;
        if rows.iter().any(|r| r.experiment == "exp1") {
            let mut dist = String::from("cell,score,accuracy\n");
            let mut summary = String::from("cell,n,mean,sem,ci_low,ci_high\n");
            for s in [true, false] {
                for r in [true, false] {
                    let cell = cell_name(s, r);
                    let v = values(&rows, "exp1", &cell, "accuracy");
                    for (i, x) in v.iter().enumerate() {
                        let _ = writeln!(dist, "{cell},{i},{x}");
                    }
                    let (m, sem) = mean_sem(&v);
                    let (_, lo, hi) = ci95(&v);
                    let _ = writeln!(summary, "{cell},{},{m},{sem},{lo},{hi}", v.len());
                }
            }
            for (name, body) in [("exp1_cells.csv", dist), ("exp1_summary.csv", summary)] {
                fs::write(out_dir.join(name), body)?;
                written.push(out_dir.join(name));
            }
        }
        if rows.iter().any(|r| r.experiment == "exp2") {
            let mut body = String::from("variant,n,mean,sem,ci_low,ci_high\n");
            for cell in ["schema", "control"] {
                let v = values(&rows, "exp2", cell, "transfer_accuracy");
                let (m, sem) = mean_sem(&v);
                let (_, lo, hi) = ci95(&v);
                let _ = writeln!(body, "{cell},{},{m},{sem},{lo},{hi}", v.len());
            }
            fs::write(out_dir.join("exp2_summary.csv"), body)?;
            written.push(out_dir.join("exp2_summary.csv"));
        }
    }
    if exp3_path.exists() {
        let rows = read_exp3_metrics(&exp3_path)?;
        let mut body = String::from("pairing,epoch,n");
        for m in ["reward", "overlap", "pixels_agent0", "pixels_agent1"] {
            let _ = write!(body, ",{m}_mean,{m}_ci_low,{m}_ci_high");
        }
        body.push('\n');
        for p in Pairing::ALL {
            let mut epochs: Vec<usize> = rows
                .iter()
                .filter(|r| r.pairing == p.name())
                .map(|r| r.epoch)
                .collect();
            epochs.sort();
            epochs.dedup();
            for e in epochs {
                let sel: Vec<[f64; 4]> = rows
                    .iter()
                    .filter(|r| r.pairing == p.name() && r.epoch == e)
                    .map(|r| {
                        [
                            r.mean_reward,
                            r.mean_overlap,
                            r.pixels_agent0,
                            r.pixels_agent1,
                        ]
                    })
                    .collect();
                let _ = write!(body, "{},{e},{}", p.name(), sel.len());
                for k in 0..4 {
                    let v: Vec<f64> = sel.iter().map(|x| x[k]).collect();
                    let (m, lo, hi) = ci95(&v);
                    let _ = write!(body, ",{m},{lo},{hi}");
                }
                body.push('\n');
            }
        }
        fs::write(out_dir.join("exp3_curves.csv"), body)?;
        written.push(out_dir.join("exp3_curves.csv"));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            ResultRow::new("exp1", "schema->schema", 0, 7, "accuracy", 0.8125),
            ResultRow::new(
                "exp2",
                "odd,cell",
                3,
                u64::MAX,
                "transfer_accuracy",
                1.0 / 3.0,
            ),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RESULTS_FILE);
        fs::write(&path, results_csv(&rows)).unwrap();
        assert_eq!(read_results(&path).unwrap(), rows);
    }

    #[test]
    fn ci_matches_hand_computation() {
        // mean 4, sample SD √2, SEM √(2/5)
        let (m, lo, hi) = ci95(&[2.0, 4.0, 4.0, 4.0, 6.0]);
        let half = 1.96 * (2.0f64 / 5.0).sqrt();
        assert_eq!(m, 4.0);
        assert!((lo - (4.0 - half)).abs() < 1e-12 && (hi - (4.0 + half)).abs() < 1e-12);
    }

    #[test]
    fn missing_results_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_plot_data(&dir.path().join("nope"), dir.path());
        assert!(matches!(err, Err(Error::MissingResults(_))));
    }
}
