//! Command-line entry point.
//!
//! Every command resolves a [`RunConfig`] (scale preset, then config file,
//! then `--set` overrides), writes its artifacts into a fresh output
//! directory, and records a `manifest.json` that reproduces the run.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::asnn::save_checkpoint;
use crate::attnset::{
    build_judgement_dataset, load_ppm_dataset, record_attention, save_judgement_dataset,
    save_ppm_dataset, RecordSource, Split, TaskId,
};
use crate::error::{Error, Result};
use crate::experiments::{
    build_pool, emit_plot_data, exp3_metrics_csv, pretrain, read_results, repetition_seed,
    results_csv, run_exp1, run_exp2, run_exp3, stats_summary, task_data, ResultRow, Scale,
    Settings, EXP3_METRICS_FILE, RESULTS_FILE, STATS_FILE,
};
use crate::ndcore::Rng;
use crate::parallel;

pub const DEFAULT_SEED: u64 = 42;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Epochs averaged for the Exp. 3 "final" metrics.
pub const FINAL_EPOCHS: usize = 10;

const SEED_DERIVATION: &str = "repetition r runs from mix(seed, r); within a repetition, \
generator streams are mix(rep_seed, k) with k = 0 data, 1 models, 2 exp1, 3 exp2, 4 exp3; \
mix(p, i) is the splitmix64 finaliser applied to p ^ ((i + 1) * 0x9E3779B97F4A7C15)";

#[derive(Debug, Parser)]
#[command(
    name = "schemanet",
    version,
    about = "Attention-schema transformer experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Schema,
    Control,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Config file of `key = value` lines (`#` starts a comment).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    /// Output directory; must not exist yet or be empty.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Setting override, repeatable (e.g. `--set exp3.epochs=10`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain a schema and a control classifier on every synthetic task.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Also export each task's images as PPM files.
        #[arg(long)]
        export_images: bool,
    },
    /// Record and scramble one sender's attention into a judgement dataset.
    MakeAttnData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "A")]
        task: TaskId,
        #[arg(long, value_enum, default_value = "schema")]
        variant: Variant,
        /// Record on PPM images (`NNNNN_cL.ppm`) instead of synthetic test images.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Attention-judgement transfer, 2×2 sender × receiver design.
    Exp1 {
        #[command(flatten)]
        common: Common,
    },
    /// Image-classification transfer control.
    Exp2 {
        #[command(flatten)]
        common: Common,
    },
    /// Two-agent cooperative coloring game.
    Exp3 {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute the statistics summary of a previous run.
    Stats {
        #[command(flatten)]
        common: Common,
        results: PathBuf,
    },
    /// Write figure-ready CSVs from a previous run.
    PlotData {
        #[command(flatten)]
        common: Common,
        results: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::MakeAttnData { .. } => "make-attn-data",
            Command::Exp1 { .. } => "exp1",
            Command::Exp2 { .. } => "exp2",
            Command::Exp3 { .. } => "exp3",
            Command::Stats { .. } => "stats",
            Command::PlotData { .. } => "plot-data",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Pretrain { common, .. }
            | Command::MakeAttnData { common, .. }
            | Command::Exp1 { common }
            | Command::Exp2 { common }
            | Command::Exp3 { common }
            | Command::Stats { common, .. }
            | Command::PlotData { common, .. } => common,
        }
    }
}

/// Fully resolved parameters of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub scale: Scale,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Overrides in application order (config file first, then `--set`).
    pub overrides: Vec<(String, String)>,
    pub settings: Settings,
}

/// Parses a config file body into `(key, value)` pairs.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                n + 1
            ))
        })?;
        let (k, v) = (k.trim(), v.trim().trim_matches('"'));
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))
}

impl RunConfig {
    fn resolve(command: &str, common: &Common) -> Result<Self> {
        let file = match &common.config {
            Some(p) => parse_config(
                &fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            )?,
            None => Vec::new(),
        };
        let mut scale = Scale::Desk;
        let mut seed = DEFAULT_SEED;
        let mut overrides = Vec::new();
        for (k, v) in file {
            match k.as_str() {
                "scale" => scale = v.parse()?,
                "seed" => {
                    seed = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed `{v}`")))?
                }
                _ => overrides.push((k, v)),
            }
        }
        if let Some(s) = common.scale {
            scale = match s {
                ScaleArg::Desk => Scale::Desk,
                ScaleArg::Paper => Scale::Paper,
            };
        }
        seed = common.seed.unwrap_or(seed);
        for s in &common.set {
            let (k, v) = parse_override(s)?;
            if k == "scale" || k == "seed" {
                return Err(Error::Config(format!("set `{k}` with --{k}, not --set")));
            }
            overrides.push((k, v));
        }
        let mut settings = Settings::for_scale(scale);
        for (k, v) in &overrides {
            settings.set(k, v)?;
        }
        let output_dir = common
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("runs/{command}-{scale}-seed{seed}")));
        Ok(Self {
            command: command.to_string(),
            scale,
            seed,
            output_dir,
            overrides,
            settings,
        })
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: &'static str,
    run: &'a RunConfig,
    inputs: Vec<PathBuf>,
    seed_derivation: &'static str,
    parallel: bool,
    files: Vec<String>,
}

/// Output directory that refuses to reuse a previous run's directory.
struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn create(dir: &Path) -> Result<Self> {
        if dir.exists() && fs::read_dir(dir)?.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} already holds a run; choose another --out",
                dir.display()
            )));
        }
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, body: &str) -> Result<()> {
        fs::write(self.dir.join(name), body)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn subdir(&mut self, name: &str) -> PathBuf {
        self.files.push(format!("{name}/"));
        self.dir.join(name)
    }

    fn finish(mut self, run: &RunConfig, inputs: Vec<PathBuf>) -> Result<()> {
        self.files.push(MANIFEST_FILE.into());
        let manifest = Manifest {
            format: "schemanet-run-1",
            version: env!("CARGO_PKG_VERSION"),
            run,
            inputs,
            seed_derivation: SEED_DERIVATION,
            parallel: parallel::is_parallel(),
            files: self.files.clone(),
        };
        fs::write(
            self.dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }
}

fn cmd_pretrain(run: &RunConfig, out: &mut Output, export_images: bool) -> Result<()> {
    let s = &run.settings;
    let pool = build_pool(s, run.seed, 0, &TaskId::ALL)?;
    let mut rows = Vec::new();
    for m in &pool.models {
        let variant = if m.has_schema { "schema" } else { "control" };
        let cell = format!("{}-{variant}", m.task);
        save_checkpoint(&m.model, &out.subdir(&format!("checkpoints/{cell}")))?;
        let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
        for (metric, value) in [
            ("test_accuracy", m.test_accuracy),
            ("final_loss", last(&m.log.loss)),
            ("final_task_loss", last(&m.log.task_loss)),
        ] {
            rows.push(row("pretrain", &cell, pool.seed, metric, value));
        }
        eprintln!("pretrained {cell}: test accuracy {:.3}", m.test_accuracy);
    }
    if export_images {
        for d in &pool.data {
            save_ppm_dataset(
                &d.train,
                &out.subdir(&format!("images/{}/train", d.train.task_id)),
            )?;
            save_ppm_dataset(
                &d.test,
                &out.subdir(&format!("images/{}/test", d.test.task_id)),
            )?;
        }
    }
    out.write(RESULTS_FILE, &results_csv(&rows))
}

fn row(experiment: &str, cell: &str, seed: u64, metric: &str, value: f64) -> ResultRow {
    ResultRow {
        experiment: experiment.into(),
        cell: cell.into(),
        repetition: 0,
        seed,
        metric: metric.into(),
        value,
    }
}

fn cmd_make_attn_data(
    run: &RunConfig,
    out: &mut Output,
    task: TaskId,
    variant: Variant,
    images: Option<&Path>,
) -> Result<()> {
    let s = &run.settings;
    let rep_seed = repetition_seed(run.seed, 0);
    let root = Rng::new(rep_seed);
    let data = task_data(s, task, &root.child(0).child(task.index() as u64))?;
    let has_schema = variant == Variant::Schema;
    let mut model_rng = root
        .child(1)
        .child(task.index() as u64 * 2 + has_schema as u64);
    let sender = pretrain(s, &data, has_schema, &mut model_rng)?;
    eprintln!(
        "sender {task}-{variant:?}: test accuracy {:.3}",
        sender.test_accuracy
    );
    let source_images = match images {
        Some(dir) => load_ppm_dataset(dir, task, Split::Test)?,
        None => data.test,
    };
    let mut rng = root.child(2);
    let raw = record_attention(&sender.model, &source_images, &mut rng)?;
    let ds = build_judgement_dataset(
        &raw,
        RecordSource { task, has_schema },
        s.exp1.scramble,
        &mut rng,
    )?;
    save_checkpoint(&sender.model, &out.subdir("sender"))?;
    let manifest =
        save_judgement_dataset(&ds, rep_seed, s.exp1.scramble, &out.subdir("attention"))?;
    let mut csv = String::from("file,split,label,source_task,source_schema\n");
    for r in &manifest.records {
        let split = if r.split == Split::Train {
            "train"
        } else {
            "test"
        };
        let _ = writeln!(
            csv,
            "{},{split},{},{},{}",
            r.file,
            r.label.class(),
            r.source_task,
            r.source_has_schema
        );
    }
    out.write("records.csv", &csv)?;
    eprintln!(
        "wrote {} train and {} test records ({} scrambled)",
        manifest.n_train, manifest.n_test, manifest.n_scrambled
    );
    Ok(())
}

fn cmd_exp1(run: &RunConfig, out: &mut Output) -> Result<()> {
    let s = &run.settings;
    let result = run_exp1(s, run.seed)?;
    let rows = result.rows(s.exp1.assignments);
    out.write(RESULTS_FILE, &results_csv(&rows))?;
    let stats = stats_summary(&rows)?;
    out.write(STATS_FILE, &stats)?;
    print!("{stats}");
    Ok(())
}

fn cmd_exp2(run: &RunConfig, out: &mut Output) -> Result<()> {
    let s = &run.settings;
    let result = run_exp2(s, run.seed)?;
    let rows = result.rows(s.exp2.assignments);
    out.write(RESULTS_FILE, &results_csv(&rows))?;
    let mut stats = stats_summary(&rows)?;
    for (r, t) in result.per_repetition.iter().enumerate() {
        let _ = writeln!(stats, "[exp2.repetition.{r}]");
        match t {
            Some(t) => {
                let _ = writeln!(
                    stats,
                    "statistic = {}\np_value = {}\n",
                    t.statistic, t.p_value
                );
            }
            None => {
                let _ = writeln!(stats, "statistic = undefined\n");
            }
        }
    }
    out.write(STATS_FILE, &stats)?;
    print!("{stats}");
    Ok(())
}

fn cmd_exp3(run: &RunConfig, out: &mut Output) -> Result<()> {
    if run.scale == Scale::Paper {
        let e = &run.settings.exp3;
        eprintln!(
            "warning: paper-scale exp3 trains {} repetitions of 3 pairings for {} epochs of {} turns; expect many hours of compute",
            e.repetitions, e.epochs, e.turns_per_epoch
        );
    }
    let result = run_exp3(&run.settings, run.seed)?;
    out.write(EXP3_METRICS_FILE, &exp3_metrics_csv(&result))?;
    let rows = result.rows(FINAL_EPOCHS);
    out.write(RESULTS_FILE, &results_csv(&rows))?;
    let stats = stats_summary(&rows)?;
    out.write(STATS_FILE, &stats)?;
    print!("{stats}");
    Ok(())
}

fn cmd_stats(out: &mut Output, results: &Path) -> Result<()> {
    let path = results.join(RESULTS_FILE);
    if !path.exists() {
        return Err(Error::MissingResults(path));
    }
    let stats = stats_summary(&read_results(&path)?)?;
    out.write(STATS_FILE, &stats)?;
    print!("{stats}");
    Ok(())
}

fn cmd_plot_data(out: &mut Output, results: &Path) -> Result<()> {
    for p in emit_plot_data(results, &out.dir)? {
        let name = p
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        eprintln!("wrote {}", p.display());
        out.files.push(name);
    }
    Ok(())
}

fn execute(command: Command) -> Result<()> {
    let run = RunConfig::resolve(command.name(), command.common())?;
    // Catch missing inputs before creating the output directory.
    let inputs: Vec<PathBuf> = match &command {
        Command::Stats { results, .. } | Command::PlotData { results, .. } => vec![results.clone()],
        Command::MakeAttnData {
            images: Some(dir), ..
        } => vec![dir.clone()],
        _ => Vec::new(),
    };
    for p in &inputs {
        if !p.exists() {
            return Err(Error::MissingResults(p.clone()));
        }
    }
    let mut out = Output::create(&run.output_dir)?;
    match &command {
        Command::Pretrain { export_images, .. } => cmd_pretrain(&run, &mut out, *export_images)?,
        Command::MakeAttnData {
            task,
            variant,
            images,
            ..
        } => cmd_make_attn_data(&run, &mut out, *task, *variant, images.as_deref())?,
        Command::Exp1 { .. } => cmd_exp1(&run, &mut out)?,
        Command::Exp2 { .. } => cmd_exp2(&run, &mut out)?,
        Command::Exp3 { .. } => cmd_exp3(&run, &mut out)?,
        Command::Stats { results, .. } => cmd_stats(&mut out, results)?,
        Command::PlotData { results, .. } => cmd_plot_data(&mut out, results)?,
    }
    eprintln!("results in {}", run.output_dir.display());
    out.finish(&run, inputs)
}

/// Exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    parallel::init_from_env();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_lines() {
        let text = "# comment\nscale = paper\n\nexp3.epochs = 7 # trailing\nmodel.n_heads=\"4\"\n";
        let kv = parse_config(text).unwrap();
        assert_eq!(
            kv,
            vec![
                ("scale".to_string(), "paper".to_string()),
                ("exp3.epochs".into(), "7".into()),
                ("model.n_heads".into(), "4".into()),
            ]
        );
        assert!(matches!(parse_config("novalue\n"), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "seed = 5\nscale = paper\nexp3.epochs = 7\n").unwrap();
        let common = Common {
            config: Some(file),
            seed: Some(9),
            scale: Some(ScaleArg::Desk),
            out: None,
            set: vec!["exp3.epochs=3".into()],
        };
        let run = RunConfig::resolve("exp3", &common).unwrap();
        assert_eq!(run.seed, 9);
        assert_eq!(run.scale, Scale::Desk);
        assert_eq!(run.settings.exp3.epochs, 3);
        assert_eq!(run.output_dir, PathBuf::from("runs/exp3-desk-seed9"));
    }

    #[test]
    fn unknown_override_is_config_error() {
        let common = Common {
            config: None,
            seed: None,
            scale: None,
            out: None,
            set: vec!["exp3.nonsense=1".into()],
        };
        let err = RunConfig::resolve("exp3", &common).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["schemanet", "bogus"]), 2);
        assert_eq!(run(["schemanet", "exp1", "--no-such-flag"]), 2);
        assert_eq!(run(["schemanet", "--help"]), 0);
    }

    #[test]
    fn refuses_non_empty_output_dir() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("results.csv"), "x").unwrap();
        assert!(matches!(Output::create(dir.path()), Err(Error::Config(_))));
        assert!(Output::create(&dir.path().join("fresh")).is_ok());
    }
}
