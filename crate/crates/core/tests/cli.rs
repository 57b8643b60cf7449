use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_schemanet");

const TINY_EXP3: &[&str] = &[
    "--set",
    "exp3.repetitions=2",
    "--set",
    "exp3.epochs=3",
    "--set",
    "exp3.turns_per_epoch=16",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    let o = run(&["exp1", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["exp3", "--scale", "huge"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "exp3",
        "--set",
        "exp3.no_such_key=1",
        "--out",
        path(&tmp.path().join("a")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&[
        "exp3",
        "--set",
        "exp3.epochs=many",
        "--out",
        path(&tmp.path().join("b")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "exp3.epochs 3\n").unwrap();
    let o = run(&[
        "exp3",
        "--config",
        path(&cfg),
        "--out",
        path(&tmp.path().join("c")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("a").exists() && !tmp.path().join("c").exists());
}

#[test]
fn missing_results_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "stats",
        path(&tmp.path().join("nowhere")),
        "--out",
        path(&tmp.path().join("s")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = run(&[
        "plot-data",
        path(&empty),
        "--out",
        path(&tmp.path().join("p")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exp3_run_writes_manifest_and_refuses_reuse() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nseed = 11\nexp3.canvas_pool = 4\n").unwrap();
    let mut args = vec!["exp3", "--config", path(&cfg), "--out", path(&out)];
    args.extend_from_slice(TINY_EXP3);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["run"]["seed"], 11);
    assert_eq!(manifest["run"]["scale"], "desk");
    assert_eq!(manifest["run"]["settings"]["exp3"]["canvas_pool"], 4);
    assert_eq!(manifest["run"]["settings"]["exp3"]["epochs"], 3);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert!(manifest["seed_derivation"]
        .as_str()
        .unwrap()
        .contains("splitmix64"));

    let metrics = fs::read_to_string(out.join("exp3_metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("pairing,repetition,epoch,mean_reward,mean_overlap,pixels_agent0,pixels_agent1,seed")
    );
    assert_eq!(lines.count(), 3 * 2 * 3);

    let before = fs::read(out.join("results.csv")).unwrap();
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), before);

    let plots = tmp.path().join("plots");
    let o = run(&["plot-data", path(&out), "--out", path(&plots)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curves = fs::read_to_string(plots.join("exp3_curves.csv")).unwrap();
    let rows: Vec<&str> = curves.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 3);
    for pairing in ["schema-schema", "mixed", "control-control"] {
        assert_eq!(
            rows.iter()
                .filter(|r| r.starts_with(&format!("{pairing},")))
                .count(),
            3
        );
    }
    assert!(curves.lines().next().unwrap().contains("reward_ci_low"));
}

#[test]
fn paper_scale_exp3_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("paper");
    let o = run(&[
        "exp3",
        "--scale",
        "paper",
        "--out",
        path(&out),
        "--set",
        "exp3.repetitions=1",
        "--set",
        "exp3.epochs=1",
        "--set",
        "exp3.turns_per_epoch=2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["run"]["scale"], "paper");
}

#[test]
fn exp1_plot_data_has_four_cell_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let results = tmp.path().join("results");
    fs::create_dir(&results).unwrap();
    let mut csv = String::from("experiment,cell,repetition,seed,metric,value\n");
    for (k, cell) in [
        "schema->schema",
        "schema->control",
        "control->schema",
        "control->control",
    ]
    .iter()
    .enumerate()
    {
        for rep in 0..3 {
            csv.push_str(&format!(
                "exp1,{cell},{rep},1,accuracy,{}\n",
                0.5 + 0.1 * k as f64 + 0.01 * rep as f64
            ));
        }
    }
    fs::write(results.join("results.csv"), csv).unwrap();
    let out = tmp.path().join("plots");
    let o = run(&["plot-data", path(&results), "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("exp1_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    let cells = fs::read_to_string(out.join("exp1_cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 12);

    let stats_out = tmp.path().join("stats");
    let o = run(&["stats", path(&results), "--out", path(&stats_out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(stats_out.join("stats.txt")).unwrap();
    assert!(text.contains("[exp1.anova.sender]") && text.contains("power = not computed"));
}
