use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adapter_cluster::partition::PartitionManifest;
use adapter_cluster::search::read_trace_jsonl;
use adapter_cluster_cli::commands::{self, ReportRecord};
use adapter_cluster_cli::config::RunConfig;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adapter-cluster"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fleet(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("fleet");
    let mut args = vec!["gen-synthetic", "--seed", "7", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_synthetic_defaults_write_forty_adapters() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let index = fs::read_to_string(f.join("index.txt")).unwrap();
    assert_eq!(index.lines().count(), 40);
    let adpt = fs::read_dir(&f)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "adpt"))
        .count();
    assert_eq!(adpt, 40);
    assert!(f.join("model").is_dir());
}

#[test]
fn gen_synthetic_is_byte_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert_eq!(dir_bytes(&fleet(a.path(), &[])), dir_bytes(&fleet(b.path(), &[])));
}

#[test]
fn gen_synthetic_zero_adapters_is_usage_error_without_output() {
    let t = TempDir::new().unwrap();
    let out = t.path().join("nothing");
    let r = run(&["gen-synthetic", "--num-adapters", "0", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn random_cluster_reports_storage() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let out = t.path().join("run");
    let stdout = ok(&[
        "cluster", "--adapters", s(&f), "--method", "random", "--k", "5", "--seed", "1", "--out", s(&out),
    ]);
    assert!(stdout.contains("12.5%"), "{stdout}");
    let text = fs::read_to_string(out.join("partition.txt")).unwrap();
    let data_lines = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(data_lines, 40);
    assert!(out.join("run_config.txt").exists());
}

#[test]
fn d2c_summary_matches_trace() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let out = t.path().join("run");
    let stdout = ok(&[
        "cluster", "--adapters", s(&f), "--method", "d2c", "--k", "5", "--iters", "60", "--seed", "2", "--oracle",
        "synthetic", "--merge", "linear", "--out", s(&out),
    ]);
    let trace = read_trace_jsonl(std::io::BufReader::new(fs::File::open(out.join("trace.jsonl")).unwrap())).unwrap();
    assert_eq!(trace.len(), 60);
    let accepted = trace.iter().filter(|r| r.accepted).count();
    assert!(stdout.contains(&format!("accepted moves: {accepted} of 60")), "{stdout}");
}

#[test]
fn d2c_without_oracle_is_usage_error() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let r = run(&["cluster", "--adapters", s(&f), "--method", "d2c", "--out", s(&t.path().join("r"))]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn dirichlet_tiny_alpha_is_pure() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let stdout = ok(&[
        "cluster", "--adapters", s(&f), "--method", "dirichlet", "--attribute", "group_label", "--alpha", "0.001",
        "--k", "5", "--seed", "4", "--out", s(&t.path().join("run")),
    ]);
    assert!(stdout.contains("attribute concentration: 1\n"), "{stdout}");
    // Labels never split, so clusters are pure exactly when no two labels share one.
    let pure = stdout.contains("attribute purity: 1\n");
    assert_eq!(pure, stdout.contains("non-empty clusters: 5\n"), "{stdout}");
}

#[test]
fn dirichlet_requires_attribute_and_alpha() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let r = run(&["cluster", "--adapters", s(&f), "--method", "dirichlet", "--out", s(&t.path().join("r"))]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn unknown_flag_and_bad_value_are_usage_errors() {
    assert_eq!(run(&["cluster", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["cluster", "--k", "five"]).status.code(), Some(2));
}

#[test]
fn kmeans_methods_run() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    for m in ["kmeans", "kmeans_svd"] {
        let stdout = ok(&[
            "cluster", "--adapters", s(&f), "--method", m, "--k", "5", "--out", s(&t.path().join(m)),
        ]);
        assert!(stdout.contains("K: 5"));
    }
}

#[test]
fn merge_identity_partition_copies_inputs() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let run_dir = t.path().join("run");
    ok(&["cluster", "--adapters", s(&f), "--method", "random", "--k", "40", "--out", s(&run_dir)]);
    let merged = t.path().join("merged");
    ok(&[
        "merge", "--adapters", s(&f), "--partition", s(&run_dir.join("partition.txt")), "--out", s(&merged),
    ]);
    let manifest = PartitionManifest::read(run_dir.join("partition.txt")).unwrap();
    let names = adapter_cluster::tensor_store::read_index(&f).unwrap();
    for (i, name) in names.iter().enumerate() {
        let c = manifest.partition.cluster_of(i);
        assert_eq!(
            fs::read(f.join(name)).unwrap(),
            fs::read(merged.join(format!("cluster_{c}.adpt"))).unwrap()
        );
    }
}

#[test]
fn merge_five_clusters_of_eight_is_deterministic() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let part = t.path().join("partition.txt");
    let mut text = String::from("# k = 5\n");
    for i in 0..40 {
        text.push_str(&format!("task_{i:02}\t{}\n", i % 5));
    }
    fs::write(&part, text).unwrap();
    let m1 = t.path().join("m1");
    let m2 = t.path().join("m2");
    for m in [&m1, &m2] {
        ok(&["merge", "--adapters", s(&f), "--partition", s(&part), "--out", s(m)]);
    }
    let a = dir_bytes(&m1);
    assert_eq!(a.iter().filter(|(n, _)| n.ends_with(".adpt")).count(), 5);
    let b = dir_bytes(&m2);
    assert_eq!(
        a.iter().filter(|(n, _)| n.ends_with(".adpt")).collect::<Vec<_>>(),
        b.iter().filter(|(n, _)| n.ends_with(".adpt")).collect::<Vec<_>>()
    );
}

#[test]
fn merge_rejects_mismatched_partition() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let part = t.path().join("partition.txt");
    fs::write(&part, "# k = 2\ntask_00\t0\nnot_a_task\t1\n").unwrap();
    let r = run(&["merge", "--adapters", s(&f), "--partition", s(&part), "--out", s(&t.path().join("m"))]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn eval_identity_on_noiseless_fleet_hits_floor() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &["--noise", "0"]);
    let run_dir = t.path().join("run");
    ok(&["cluster", "--adapters", s(&f), "--method", "random", "--k", "40", "--out", s(&run_dir)]);
    let part = run_dir.join("partition.txt");
    let e1 = t.path().join("e1");
    let e2 = t.path().join("e2");
    for e in [&e1, &e2] {
        ok(&[
            "eval", "--adapters", s(&f), "--partition", s(&part), "--oracle", "synthetic", "--out", s(e),
        ]);
    }
    assert_eq!(dir_bytes(&e1).iter().find(|(n, _)| n == "report.jsonl"), dir_bytes(&e2).iter().find(|(n, _)| n == "report.jsonl"));
    assert_eq!(fs::read(e1.join("report.txt")).unwrap(), fs::read(e2.join("report.txt")).unwrap());
    let records: Vec<ReportRecord> = fs::read_to_string(e1.join("report.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 40);
    // sigma = 0: loss is exactly the deterministic epsilon term, which is zero.
    for r in &records {
        assert_eq!(r.k, 40);
        assert_eq!(r.loss, Some(0.0));
    }
    let line = fs::read_to_string(e1.join("report.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["method", "K", "n", "seed", "task_id", "loss"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert!(fs::read_to_string(e1.join("report.txt")).unwrap().contains("storage: 100%"));
}

#[test]
fn eval_without_oracle_is_usage_error() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let run_dir = t.path().join("run");
    ok(&["cluster", "--adapters", s(&f), "--method", "random", "--out", s(&run_dir)]);
    let r = run(&[
        "eval", "--adapters", s(&f), "--partition", s(&run_dir.join("partition.txt")), "--out",
        s(&t.path().join("e")),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn eval_with_stub_command_oracle() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let run_dir = t.path().join("run");
    ok(&["cluster", "--adapters", s(&f), "--method", "random", "--out", s(&run_dir)]);
    let e = t.path().join("e");
    ok(&[
        "eval", "--adapters", s(&f), "--partition", s(&run_dir.join("partition.txt")), "--oracle", "command",
        "--oracle-cmd", "sh -c 'echo 0.5'", "--out", s(&e),
    ]);
    let text = fs::read_to_string(e.join("report.txt")).unwrap();
    assert!(text.contains("mean loss: 0.500000"), "{text}");
}

#[test]
fn eval_lists_failing_tasks() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let run_dir = t.path().join("run");
    ok(&["cluster", "--adapters", s(&f), "--method", "random", "--out", s(&run_dir)]);
    let e = t.path().join("e");
    let script = r#"sh -c 'case "$4" in task_03) exit 1;; *) echo 1.0;; esac' oracle"#;
    ok(&[
        "eval", "--adapters", s(&f), "--partition", s(&run_dir.join("partition.txt")), "--oracle", "command",
        "--oracle-cmd", script, "--out", s(&e),
    ]);
    let text = fs::read_to_string(e.join("report.txt")).unwrap();
    assert!(text.contains("failed tasks: 1"), "{text}");
    assert!(text.contains("oracle command failed (exit 1)"), "{text}");
}

#[test]
fn config_file_with_flag_override() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let cfg = t.path().join("run.cfg");
    fs::write(
        &cfg,
        format!("# baseline\nadapters = {}\nmethod = random\nk = 8\nseed = 3\n", f.display()),
    )
    .unwrap();
    let out = t.path().join("run");
    let stdout = ok(&["cluster", "--config", s(&cfg), "--k", "4", "--out", s(&out)]);
    assert!(stdout.contains("K: 4"), "{stdout}");
    let frozen = fs::read_to_string(out.join("run_config.txt")).unwrap();
    assert!(frozen.contains("k = 4"), "{frozen}");
    assert!(frozen.contains("seed = 3"), "{frozen}");
}

#[test]
fn sweep_repeats_populate_std() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let out = t.path().join("sweep");
    ok(&[
        "sweep", "--adapters", s(&f), "--method", "random", "--oracle", "synthetic", "--ks", "2,5", "--repeats",
        "3", "--out", s(&out),
    ]);
    let tsv = fs::read_to_string(out.join("sweep.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let cols: Vec<&str> = r.split('\t').collect();
        assert_eq!(cols.len(), 7);
        assert!(cols[6].parse::<f64>().is_ok(), "{r}");
    }
}

#[test]
fn sweep_continues_past_failed_cells() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let out = t.path().join("sweep");
    ok(&[
        "sweep", "--adapters", s(&f), "--method", "random", "--oracle", "synthetic", "--ks", "50,5", "--out",
        s(&out),
    ]);
    let tsv = fs::read_to_string(out.join("sweep.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = tsv.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0][4], "1");
    assert_eq!(rows[0][5], "-");
    assert!(rows[1][5].parse::<f64>().is_ok());
}

#[test]
fn sweep_cell_equals_composed_commands() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let common = [
        "--adapters", s(&f), "--method", "d2c", "--oracle", "synthetic", "--iters", "40", "--seed", "5",
        "--merge", "ties", "--density", "0.5",
    ];
    let sweep_dir = t.path().join("sweep");
    let mut args = vec!["sweep", "--ks", "5", "--ns", "10", "--out", s(&sweep_dir)];
    args.extend_from_slice(&common);
    ok(&args);

    let run_dir = t.path().join("run");
    let mut args = vec!["cluster", "--k", "5", "--examples-per-task", "10", "--out", s(&run_dir)];
    args.extend_from_slice(&common);
    ok(&args);
    let part = run_dir.join("partition.txt");
    let merged = t.path().join("m");
    let mut args = vec!["merge", "--partition", s(&part), "--out", s(&merged)];
    args.extend_from_slice(&common);
    ok(&args);
    let ev = t.path().join("ev");
    let mut args = vec!["eval", "--partition", s(&part), "--out", s(&ev)];
    args.extend_from_slice(&common);
    ok(&args);

    assert_eq!(
        fs::read_to_string(ev.join("report.jsonl")).unwrap(),
        fs::read_to_string(sweep_dir.join("sweep_report.jsonl")).unwrap()
    );
}

#[test]
fn library_sweep_matches_run_cell() {
    let t = TempDir::new().unwrap();
    let f = fleet(t.path(), &[]);
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("adapters", s(&f)),
        ("method", "random"),
        ("oracle", "synthetic"),
        ("ks", "3"),
        ("repeats", "2"),
        ("out", s(&t.path().join("sw"))),
    ] {
        cfg.set(k, v).unwrap();
    }
    let table = commands::sweep(&cfg).unwrap();
    let set = adapter_cluster::tensor_store::read_adapter_set(&f).unwrap();
    for (r, cell) in table.cells.iter().enumerate() {
        let rep = commands::run_cell(&commands::cell_config(&cfg, 3, cfg.examples_per_task, r), &set).unwrap();
        assert_eq!(rep.mean, cell.mean);
    }
}
