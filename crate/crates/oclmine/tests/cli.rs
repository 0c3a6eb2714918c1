mod common;

use std::fs;
use std::process::{Command, Output};

use common::stub_path;

/// Runs the binary with a whitespace-separated argument line.
fn oclmine(line: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oclmine"))
        .args(line.split_whitespace())
        .env_remove("OPENCL_LIB_PATH")
        .output()
        .expect("run oclmine")
}

fn ok(out: &Output) -> &Output {
    assert!(out.status.success(), "stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn gen_then_cluster_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    ok(&oclmine(&format!(
        "gen --features 2 --clusters 3 --size 40 --seed 9 --out {}",
        data.display()
    )));
    let text = fs::read_to_string(&data).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x0,x1,gen_label"));
    assert_eq!(lines.count(), 120);

    let mut outputs = Vec::new();
    for backend in ["single", "multi"] {
        for algo in ["dbscan", "kmeans"] {
            let labels = dir.path().join(format!("{backend}-{algo}.csv"));
            ok(&oclmine(&format!(
                "cluster --input {} --algo {algo} --backend {backend} --k 3 --workers 3 --out {}",
                data.display(),
                labels.display()
            )));
            let text = fs::read_to_string(&labels).unwrap();
            assert!(text.starts_with("point_index,label\n"));
            assert_eq!(text.lines().count(), 121);
            outputs.push((algo, text));
        }
    }
    assert_eq!(outputs[0].1, outputs[2].1, "dbscan labels differ between backends");
    assert_eq!(outputs[1].1, outputs[3].1, "kmeans labels differ between backends");
}

#[test]
fn gen_to_stdout_is_deterministic() {
    let a = ok(&oclmine("gen --features 1 --clusters 2 --size 8")).stdout.clone();
    let b = ok(&oclmine("gen --features 1 --clusters 2 --size 8")).stdout.clone();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 17);
}

#[test]
fn bench_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&oclmine(&format!(
        "bench --features 1,2 --clusters 2 --sizes 16..32 --passes 2 \
         --backends single,multi,gpu --workers 2 --seed 4 --opencl-lib {} --out {}",
        stub_path().display(),
        out.display()
    )));
    let raw = fs::read_to_string(out.join("raw.csv")).unwrap();
    let mut lines = raw.lines();
    assert_eq!(lines.next(), Some("tuple,pass,backend,algo,wall_ns,setup_ns,status,verify"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4 * 2 * 3 * 2);
    assert!(rows.iter().all(|r| r.ends_with(",completed,true")), "{raw}");
    assert!(fs::read_to_string(out.join("summary.csv"))
        .unwrap()
        .starts_with("tuple,features,clusters,size,"));
    assert!(out.join("boxplot.csv").exists());
}

#[test]
fn bench_with_an_unloadable_library_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = oclmine(&format!(
        "bench --features 1 --clusters 2 --sizes 16 --passes 1 \
         --opencl-lib /nonexistent/libOpenCL.so --out {}",
        dir.path().display()
    ));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/libOpenCL.so"));
}

#[test]
fn bench_cancel_after_records_aborted_runs() {
    let dir = tempfile::tempdir().unwrap();
    ok(&oclmine(&format!(
        "bench --features 4 --clusters 8 --sizes 256 --passes 1 \
         --backends single,multi --cancel-after 0 --out {}",
        dir.path().display()
    )));
    let raw = fs::read_to_string(dir.path().join("raw.csv")).unwrap();
    assert!(raw.contains(",aborted,na"), "{raw}");
}

#[test]
fn bad_arguments_are_reported() {
    let out = oclmine("bench --sizes 64..32");
    assert!(!out.status.success());
    let out = oclmine("bench --backends tpu");
    assert!(!out.status.success());
    let out = oclmine("bench --workers 0 --backends single");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--workers"));
}

#[test]
fn cluster_rejects_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "x0,x1\n1.0,2.0\n3.0,oops\n").unwrap();
    let out = oclmine(&format!("cluster --input {} --algo dbscan", data.display()));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("oops"));
}
