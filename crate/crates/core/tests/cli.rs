use std::path::Path;
use std::process::{Command, Output};

fn routehead(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_routehead"))
        .args(args)
        .output()
        .expect("spawn routehead")
}

fn ok(args: &[&str]) -> String {
    let out = routehead(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// The last stderr line of a failed invocation, which must be `error: <category>: ...`.
fn error_category(args: &[&str]) -> String {
    let out = routehead(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap_or_default();
    let rest = line
        .strip_prefix("error: ")
        .unwrap_or_else(|| panic!("bad error line {line:?}"));
    rest.split(':').next().unwrap().to_string()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |rel: &str| s(&tmp.path().join(rel));
    ok(&[
        "synth",
        "-o",
        &p("fx"),
        "--queries",
        "30",
        "--test-queries",
        "10",
        "--layers",
        "2",
        "--heads-per-layer",
        "4",
        "--clusters",
        "2",
        "--signal-heads",
        "1",
        "--unscored",
        "1",
        "--packed",
    ]);
    ok(&["ingest", &p("fx/dump"), "-o", &p("ds"), "--packed"]);
    ok(&["ingest", &p("fx/test/dump"), "-o", &p("dst"), "--packed"]);
    ok(&[
        "pool",
        "--dataset",
        &p("ds"),
        "--qrels",
        &p("fx/qrels.txt"),
        "--pool-size",
        "4",
        "-o",
        &p("pool.json"),
    ]);
    ok(&[
        "label-search",
        "--dataset",
        &p("ds"),
        "--qrels",
        &p("fx/qrels.txt"),
        "--pool",
        &p("pool.json"),
        "--budget",
        "2",
        "--verbose",
        "-o",
        &p("labels.json"),
    ]);
    ok(&[
        "train",
        "--dataset",
        &p("ds"),
        "--labels",
        &p("labels.json"),
        "--epochs",
        "5",
        "--head-dim",
        "4",
        "-o",
        &p("router.bin"),
    ]);
    let out = ok(&[
        "rerank",
        "--dataset",
        &p("dst"),
        "--candidates",
        &p("fx/test/candidates.run"),
        "--strategy",
        "router",
        "--weights",
        &p("router.bin"),
        "--pool",
        &p("pool.json"),
        "-o",
        &p("r.run"),
    ]);
    assert!(out.contains("10 appended docs"), "{out}");
    let text = ok(&[
        "eval",
        &p("r.run"),
        "--qrels",
        &p("fx/test/qrels.txt"),
        "--json",
        &p("eval.json"),
    ]);
    assert_eq!(text.lines().count(), 11);
    assert!(text
        .lines()
        .last()
        .unwrap()
        .starts_with("ndcg_cut_10\tall\t"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p("eval.json")).unwrap()).unwrap();
    assert_eq!(report["k"], 10);
    ok(&[
        "oracle-check",
        "--dataset",
        &p("ds"),
        "--qrels",
        &p("fx/qrels.txt"),
        "--pool",
        &p("pool.json"),
        "--pool-subset-size",
        "4",
        "--max-size",
        "2",
    ]);

    assert_eq!(
        error_category(&[
            "pool",
            "--dataset",
            &p("ds"),
            "--qrels",
            &p("fx/qrels.txt"),
            "--pool-size",
            "100",
            "-o",
            &p("x.json")
        ]),
        "config"
    );
    assert_eq!(
        error_category(&[
            "label-search",
            "--dataset",
            &p("dst"),
            "--qrels",
            &p("fx/qrels.txt"),
            "--pool",
            &p("pool.json"),
            "-o",
            &p("x.json")
        ]),
        "lineage"
    );
}

#[test]
fn malformed_inputs_fail_with_one_line_category() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |rel: &str| s(&tmp.path().join(rel));
    std::fs::write(p("bad.run"), "q1 Q0 d1 1 0.5\n").unwrap();
    std::fs::write(p("qrels.txt"), "q1 0 d1 1\n").unwrap();
    assert_eq!(
        error_category(&["eval", &p("bad.run"), "--qrels", &p("qrels.txt")]),
        "parse"
    );
    assert_eq!(
        error_category(&["ingest", &p("missing"), "-o", &p("ds")]),
        "io"
    );
}
