//! End-to-end tests of the batchsim binary: workflows, file formats, exit
//! codes, and reproducibility of exported artifacts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn batchsim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_batchsim"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_small_workload(dir: &Path) {
    let out = batchsim(
        &[
            "gen-workload",
            "--count",
            "300",
            "--input",
            "4:64",
            "--output",
            "8:64",
            "--seed",
            "7",
            "--out",
            "w.json",
        ],
        dir,
    );
    assert_ok(&out);
}

#[test]
fn gen_workload_writes_specs_and_summary() {
    let dir = tempdir();
    gen_small_workload(dir.path());
    let text = fs::read_to_string(dir.path().join("w.json")).unwrap();
    let specs: serde_json::Value = serde_json::from_str(&text).unwrap();
    let arr = specs.as_array().unwrap();
    assert_eq!(arr.len(), 300);
    for key in [
        "id",
        "arrival_time",
        "input_len",
        "true_output_len",
        "max_new_tokens",
    ] {
        assert!(arr[0].get(key).is_some(), "missing field {key}");
    }
}

#[test]
fn gen_workload_requires_count() {
    let dir = tempdir();
    let out = batchsim(
        &[
            "gen-workload",
            "--input",
            "1:2",
            "--output",
            "1:2",
            "--out",
            "w.json",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
}

#[test]
fn gen_workload_preset_pins_full_scale_ranges() {
    let dir = tempdir();
    let out = batchsim(
        &[
            "gen-workload",
            "--preset",
            "distribution-1",
            "--count",
            "500",
            "--seed",
            "3",
            "--out",
            "d1.json",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let specs: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("d1.json")).unwrap()).unwrap();
    for spec in specs.as_array().unwrap() {
        let input = spec["input_len"].as_u64().unwrap();
        let output = spec["true_output_len"].as_u64().unwrap();
        assert!((32..=4096).contains(&input));
        assert!((2048..=4096).contains(&output));
        assert_eq!(spec["max_new_tokens"].as_u64().unwrap(), 4096);
    }
}

#[test]
fn simulate_oracle_has_zero_evictions_and_writes_artifacts() {
    let dir = tempdir();
    gen_small_workload(dir.path());
    let out = batchsim(
        &[
            "simulate",
            "--workload",
            "w.json",
            "--scheduler",
            "oracle",
            "--capacity",
            "2048",
            "--clients",
            "8",
            "--out",
            "sim",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sim/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["evicted_reqs_pct"].as_f64().unwrap(), 0.0);
    assert!(metrics["goodput"].as_f64().unwrap() > 0.0);
    let events = fs::read_to_string(dir.path().join("sim/events.jsonl")).unwrap();
    assert!(events.lines().count() > 300 * 3);
}

#[test]
fn simulate_past_future_smoke() {
    let dir = tempdir();
    gen_small_workload(dir.path());
    let out = batchsim(
        &[
            "simulate",
            "--workload",
            "w.json",
            "--scheduler",
            "past-future",
            "--reserved",
            "0.05",
            "--capacity",
            "2048",
            "--clients",
            "8",
            "--check-invariants",
            "--out",
            "sim",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sim/metrics.json")).unwrap())
            .unwrap();
    assert!(metrics["goodput"].as_f64().unwrap() > 0.0);
}

#[test]
fn simulate_unknown_scheduler_is_usage_error() {
    let dir = tempdir();
    gen_small_workload(dir.path());
    let out = batchsim(
        &[
            "simulate",
            "--workload",
            "w.json",
            "--scheduler",
            "greedy",
            "--out",
            "sim",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scheduler"));
}

#[test]
fn compare_emits_full_cross_product_and_is_reproducible() {
    let dir = tempdir();
    gen_small_workload(dir.path());
    let args = [
        "compare",
        "--workload",
        "w.json",
        "--schedulers",
        "oracle,past-future:0.05,aggressive:0.95,conservative:1.0",
        "--clients",
        "8",
        "--seeds",
        "1,2,3",
        "--capacity",
        "2048",
        "--jobs",
        "4",
        "--out",
        "cmp",
    ];
    assert_ok(&batchsim(&args, dir.path()));
    let summary = fs::read_to_string(dir.path().join("cmp/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 1 + 4 * 3, "header plus 4 schedulers x 3 seeds");
    assert!(rows[0].starts_with("scheduler,params,dataset"));
    // Conservative without overcommit never evicts.
    for row in rows.iter().filter(|r| r.starts_with("conservative")) {
        let evicted: f64 = row.split(',').nth(8).unwrap().parse().unwrap();
        assert_eq!(evicted, 0.0);
    }
    for tag in [
        "oracle",
        "past-future-0.05",
        "aggressive-0.95",
        "conservative-1.0",
    ] {
        assert!(dir
            .path()
            .join(format!("cmp/goodput_vs_clients_{tag}.csv"))
            .exists());
    }

    // Byte-identical on rerun.
    let mut rerun_args = args;
    rerun_args[rerun_args.len() - 1] = "cmp2";
    assert_ok(&batchsim(&rerun_args, dir.path()));
    let summary2 = fs::read_to_string(dir.path().join("cmp2/summary.csv")).unwrap();
    assert_eq!(summary, summary2);
}

#[test]
fn compare_cells_match_equivalent_simulate_runs() {
    let dir = tempdir();
    gen_small_workload(dir.path());
    assert_ok(&batchsim(
        &[
            "compare",
            "--workload",
            "w.json",
            "--schedulers",
            "aggressive:0.95",
            "--clients",
            "8",
            "--seeds",
            "5",
            "--capacity",
            "2048",
            "--out",
            "cmp",
        ],
        dir.path(),
    ));
    assert_ok(&batchsim(
        &[
            "simulate",
            "--workload",
            "w.json",
            "--scheduler",
            "aggressive",
            "--watermark",
            "0.95",
            "--clients",
            "8",
            "--seed",
            "5",
            "--capacity",
            "2048",
            "--out",
            "sim",
        ],
        dir.path(),
    ));
    let summary = fs::read_to_string(dir.path().join("cmp/summary.csv")).unwrap();
    let row = summary.lines().nth(1).unwrap();
    let cells: Vec<&str> = row.split(',').collect();
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sim/metrics.json")).unwrap())
            .unwrap();

    // The CSV cell is recomputable from the simulate export of the same
    // configuration: identical decoding steps and goodput.
    assert_eq!(
        cells[5].parse::<u64>().unwrap(),
        metrics["decoding_steps"].as_u64().unwrap()
    );
    let csv_goodput: f64 = cells[9].parse().unwrap();
    let json_goodput = metrics["goodput"].as_f64().unwrap();
    assert!((csv_goodput - json_goodput).abs() < 1e-6);

    // And the report itself is a pure function of the exported event log.
    let log = batchsim::EventLog::from_jsonl(
        &fs::read_to_string(dir.path().join("sim/events.jsonl")).unwrap(),
    )
    .unwrap();
    let outcomes =
        batchsim::metrics::compute_outcomes(&log, &batchsim::SlaThresholds::default()).unwrap();
    let recomputed =
        batchsim::metrics::compute_goodput(&outcomes, metrics["makespan"].as_f64().unwrap())
            .unwrap();
    assert!((recomputed.goodput - json_goodput).abs() < 1e-9);
}

#[test]
fn analyze_trace_window_counts_and_errors() {
    let dir = tempdir();
    let out = batchsim(
        &[
            "gen-workload",
            "--count",
            "2000",
            "--input",
            "4:16",
            "--output",
            "8:128",
            "--seed",
            "11",
            "--out",
            "w2.json",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let out = batchsim(
        &[
            "analyze-trace",
            "--workload",
            "w2.json",
            "--window",
            "1000",
            "--out",
            "an",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let matrix = fs::read_to_string(dir.path().join("an/similarity.csv")).unwrap();
    assert_eq!(
        matrix.lines().count(),
        2,
        "2000 lengths / window 1000 = 2x2"
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("an/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["num_windows"].as_u64().unwrap(), 2);
    assert!(summary["mean_adjacent"].as_f64().is_some());

    // Window larger than the stream is an input error.
    let out = batchsim(
        &[
            "analyze-trace",
            "--workload",
            "w2.json",
            "--window",
            "3000",
            "--out",
            "an2",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("create temp dir")
}
