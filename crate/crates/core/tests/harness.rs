mod common;

use std::fs;
use std::path::Path;

use mtrep::cli;
use mtrep::harness::{self, Algo, ExperimentConfig, CSV_COLUMNS};
use mtrep::Error;

fn small_config(algos: &str, tasks: &str, replications: usize) -> ExperimentConfig {
    let base = fs::read_to_string(common::config_path("repbai.json")).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&base).unwrap();
    value["algos"] = serde_json::from_str(algos).unwrap();
    value["tasks"] = serde_json::from_str(tasks).unwrap();
    value["replications"] = replications.into();
    ExperimentConfig::from_json(&value.to_string()).unwrap()
}

fn csv_bytes(config: &ExperimentConfig, jobs: usize) -> Vec<u8> {
    let mut out = Vec::new();
    harness::run_sweep(config, jobs).unwrap().write_csv(&mut out).unwrap();
    out
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["mtrep"];
    argv.extend_from_slice(args);
    cli::run(argv)
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn one_replication_gives_one_row_and_one_summary() {
    let config = small_config(r#"["douexpdes"]"#, "[50]", 1);
    let text = String::from_utf8(csv_bytes(&config, 1)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], CSV_COLUMNS.join(","));
    assert!(lines[1].starts_with("1,douexpdes,5,2,50,5,,,0.005,"));
    assert!(lines[2].contains(",summary,"));
}

#[test]
fn sweep_rows_follow_cell_order() {
    let config = small_config(r#"["douexpdes", "indrage"]"#, "[50, 100]", 2);
    let result = harness::run_sweep(&config, 1).unwrap();
    assert_eq!(result.records.len(), 2 * 2 * 2);
    assert_eq!(result.summaries.len(), 4);
    let order: Vec<(Algo, usize, usize)> = result.records.iter().map(|r| (r.algo, r.tasks, r.run_id)).collect();
    let mut sorted = order.clone();
    sorted.sort_by_key(|(a, m, id)| (config.algos.iter().position(|x| x == a), *m, *id));
    assert_eq!(order, sorted);
    for r in &result.records {
        assert!(r.success && r.samples_total > 0);
        assert_eq!(r.seed, mtrep::rng::cell_seed(config.master_seed, r.algo.tag(), r.tasks, r.run_id));
    }
}

#[test]
fn repeated_sweeps_are_byte_identical() {
    let config = small_config(r#"["douexpdes", "indrage"]"#, "[50]", 3);
    let first = csv_bytes(&config, 1);
    assert_eq!(first, csv_bytes(&config, 1));
    assert_eq!(first, csv_bytes(&config, 3));
}

#[test]
fn config_errors_are_reported_per_field() {
    let err = ExperimentConfig::from_json(
        r#"{"instance": {"d": 5, "k": 2}, "run": {"delta": 2.0}, "algos": ["douexpdes"], "tasks": [7]}"#,
    )
    .unwrap_err();
    let Error::Config(msg) = err else { panic!("{err:?}") };
    assert!(msg.contains("run: delta"), "{msg}");
    assert!(msg.contains("tasks[0]"), "{msg}");
}

#[test]
fn cli_design_prints_the_optimal_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("design.csv");
    assert_eq!(run(&["design", "--criterion", "e", "--dim", "3", "--out", path_str(&out)]), 0);
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert!((fields[1].parse::<f64>().unwrap() - 1.0 / 3.0).abs() < 1e-6);
        assert!((fields[2].parse::<f64>().unwrap() - 3.0).abs() < 1e-3);
    }
}

#[test]
fn cli_round_prints_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("round.csv");
    let code = run(&["round", "--criterion", "g", "--dim", "2", "--n", "40", "--scale-round", "1e-3", "--out", path_str(&out)]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("0,0.5,20,1\n1,0.5,20,1"));
}

#[test]
fn cli_check_reports_diversity() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("check.csv");
    let config = common::config_path("repbai.json");
    assert_eq!(run(&["check", "--config", path_str(&config), "--out", path_str(&out)]), 0);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains("diversity,0.5\n"), "{text}");
    assert!(text.contains("min_gap,1\n"));
}

#[test]
fn cli_single_runs_write_rows_and_phase_logs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.csv");
    let log = dir.path().join("phases.csv");
    let config = common::config_path("repbai.json");
    let code = run(&[
        "repbai",
        "--config",
        path_str(&config),
        "--algo",
        "indrage",
        "--seed",
        "9",
        "--out",
        path_str(&out),
        "--phase-log",
        path_str(&log),
    ]);
    assert_eq!(code, 0);
    let row = fs::read_to_string(&out).unwrap();
    assert!(row.lines().nth(1).unwrap().starts_with("1,indrage,"));
    assert!(row.contains(",9,0,"));
    let phases = fs::read_to_string(&log).unwrap();
    assert!(phases.starts_with("phase,delta_t,rounds"));
    assert!(phases.lines().count() >= 2);

    let bpi = common::config_path("repbpi.json");
    assert_eq!(run(&["repbpi", "--config", path_str(&bpi), "--out", path_str(&out)]), 0);
    assert!(fs::read_to_string(&out).unwrap().contains("1,cdouexpdes,"));
}

#[test]
fn cli_exit_codes() {
    assert_eq!(run(&["bogus"]), 2);
    assert_eq!(run(&[]), 2);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(run(&["sweep", "--config", path_str(&missing)]), 2);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"instance": {"d": 5, "k": 2}, "algos": ["douexpdes"], "tasks": [3]}"#).unwrap();
    assert_eq!(run(&["check", "--config", path_str(&bad)]), 2);

    let config = common::config_path("repbai.json");
    assert_eq!(run(&["repbai", "--config", path_str(&config), "--algo", "cdouexpdes"]), 2);

    // the exploration batch is below the rounding minimum
    let failing = dir.path().join("failing.json");
    let text = fs::read_to_string(&config).unwrap().replace("\"scale_p\": 0.01", "\"scale_p\": 0.0001");
    fs::write(&failing, text).unwrap();
    let out = dir.path().join("out.csv");
    assert_eq!(run(&["repbai", "--config", path_str(&failing), "--out", path_str(&out)]), 3);
    assert!(fs::read_to_string(&out).unwrap().contains("error=N_TOO_SMALL"));
}

#[test]
fn cli_round_rejects_a_short_batch() {
    assert_eq!(run(&["round", "--criterion", "g", "--dim", "2", "--n", "30", "--scale-round", "1e-3"]), 3);
}
