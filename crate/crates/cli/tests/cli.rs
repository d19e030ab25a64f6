use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn odir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odir"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn odir")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const DATA: [&str; 4] = ["--manifest", "data/manifest.tsv", "--work-dir", "work"];

fn synth(dir: &Path) {
    stdout(&odir(dir, &["synth", "--golden", "--out", "data"]));
}

#[test]
fn synth_then_all_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args = DATA.to_vec();
    args.extend(["--jobs", "2", "all", "--diffusion", "--plot-dir", "plots", "--heatmap-dir", "heat"]);
    stdout(&odir(dir.path(), &args));
    let work = dir.path().join("work");
    for f in [
        "graph/graph.grf",
        "graph/centrality.cen",
        "pool/regions.rgt",
        "pool/whitening.wht",
        "detect_os/regions.tsv",
        "aggregate/os.gdv",
        "search/os+diffusion.tsv",
        "eval/summary.tsv",
        "sal_precision/os.tsv",
    ] {
        assert!(work.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(work.join("run.log")).unwrap();
    assert_eq!(log.lines().count(), 11);
    assert!(dir.path().join("plots/sal_precision_os.ppm").is_file());
    assert!(fs::read_dir(dir.path().join("heat")).unwrap().count() > 0);
}

#[test]
fn eval_prints_per_query_ap_and_map() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args = DATA.to_vec();
    args.push("all");
    stdout(&odir(dir.path(), &args));
    let mut args = DATA.to_vec();
    args.push("eval");
    let out = stdout(&odir(dir.path(), &args));
    assert!(out.contains("query\tAP"));
    let os = fs::read_to_string(dir.path().join("work/eval/os.tsv")).unwrap();
    let rows: Vec<&str> = os.lines().collect();
    assert_eq!(rows[0], "query\tAP");
    assert_eq!(rows.len(), 4, "two queries plus header and mAP");
    let map: f64 = rows[3].strip_prefix("mAP\t").unwrap().parse().unwrap();
    let aps: Vec<f64> = rows[1..3].iter().map(|r| r.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert!((map - aps.iter().sum::<f64>() / 2.0).abs() < 1e-12);
}

#[test]
fn missing_stage_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args = DATA.to_vec();
    args.extend(["detect", "--input", "fs"]);
    let o = odir(dir.path(), &args);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing stage fs"), "{err}");
}

#[test]
fn dump_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = stdout(&odir(dir.path(), &["--dump-config", "graph", "--k", "7", "--alpha", "0.9"]));
    assert!(first.contains("graph.k = 7"));
    fs::write(dir.path().join("odir.conf"), &first).unwrap();
    let second = stdout(&odir(dir.path(), &["--config", "odir.conf", "--dump-config"]));
    assert_eq!(first, second);
}

#[test]
fn bad_flag_value_fails() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args = DATA.to_vec();
    args.extend(["graph", "--alpha", "1.5"]);
    assert!(!odir(dir.path(), &args).status.success());
}
