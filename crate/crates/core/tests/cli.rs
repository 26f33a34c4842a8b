use std::path::Path;
use std::process::{Command, Output};

use mpcp::io::{read_factors, read_tensor, read_trace, write_factors};
use mpcp::optimizer::Stage;
use mpcp::tensor::{relative_error, FactorSet, Matrix};

fn mpcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpcp")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, name: &str, dims: &str, rank: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let o = mpcp(&["generate", "--dims", dims, "--rank", rank, "--seed", seed, "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn generated_rank_one_reparses_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate(dir.path(), "a.dten", "2,2", "1", "9");
    let a = read_tensor(&t).unwrap();
    let f = read_factors(dir.path().join("a.dten.factors")).unwrap();
    assert_eq!(a.dims(), &[2, 2]);
    assert_eq!(relative_error(&a, &f).unwrap(), 0.0);
}

#[test]
fn generation_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.dten", "4,3,5", "2", "5");
    let b = generate(dir.path(), "b.dten", "4,3,5", "2", "5");
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn file_size_follows_format() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate(dir.path(), "big.dten", "60,60,60", "20", "1");
    assert_eq!(std::fs::metadata(t).unwrap().len(), 16 + 3 * 8 + 216_000 * 8);
}

#[test]
fn memory_cap_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.dten");
    let o = mpcp(&["generate", "--dims", "100,100,100", "--rank", "2", "--max-entries", "1000", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn exact_toy_converges() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate(dir.path(), "toy.dten", "6,5,4", "1", "3");
    let trace = dir.path().join("toy.csv");
    let factors = dir.path().join("fit.factors");
    let o = mpcp(&[
        "decompose",
        path_str(&t),
        "--rank",
        "1",
        "--eps1",
        "0.5",
        "--eps2",
        "1e-6",
        "--q1-format",
        "fp64",
        "--q2-format",
        "fp64",
        "--sample-frac",
        "1",
        "--alpha-sgd",
        "2",
        "--seed",
        "3",
        "--trace-out",
        path_str(&trace),
        "--factors-out",
        path_str(&factors),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let a = read_tensor(&t).unwrap();
    let fit = read_factors(&factors).unwrap();
    assert!(relative_error(&a, &fit).unwrap() <= 1e-6);

    let tr = read_trace(&trace).unwrap();
    assert!(tr.final_error().unwrap() <= 1e-6);
    let switch = tr.switch_iter.unwrap();
    assert!(stdout(&o).contains(&format!("switch_iter={switch} ")), "{}", stdout(&o));
    // Iterations strictly increase and the stage switches exactly once.
    assert!(tr.records.windows(2).all(|w| w[0].iter < w[1].iter));
    let switches = tr.records.windows(2).filter(|w| w[0].stage != w[1].stage).count();
    assert_eq!(switches, 1);
    assert_eq!(tr.records[0].stage, Stage::Sign);
}

#[test]
fn repeated_runs_write_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate(dir.path(), "g.dten", "8,7,6", "3", "4");
    let run = |name: &str| {
        let p = dir.path().join(name);
        let o = mpcp(&["decompose", path_str(&t), "--rank", "3", "--max-iters", "3000", "--seed", "8", "--trace-out", path_str(&p)]);
        assert!(matches!(o.status.code(), Some(0 | 2)));
        std::fs::read(p).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}

#[test]
fn divergence_exits_three_and_keeps_trace() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate(dir.path(), "g.dten", "20,20,20", "5", "1");
    let trace = dir.path().join("div.csv");
    let o = mpcp(&["decompose", path_str(&t), "--rank", "5", "--skip-sign", "--alpha-sgd", "100", "--trace-out", path_str(&trace)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("status=diverged"));
    let tr = read_trace(&trace).unwrap();
    assert!(tr.final_error().unwrap() > 1e3);
}

#[test]
fn malformed_input_names_offset() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate(dir.path(), "g.dten", "3,3,3", "1", "1");
    let mut bytes = std::fs::read(&t).unwrap();
    bytes[8] = 9;
    std::fs::write(&t, bytes).unwrap();
    let o = mpcp(&["decompose", path_str(&t), "--rank", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("dtype") && err.contains("byte offset 8"), "{err}");
}

#[test]
fn analysis_queries() {
    assert_eq!(stdout(&mpcp(&["cost", "3", "8"])), "normalized_cost=0.21875\n");
    assert_eq!(stdout(&mpcp(&["rankbound", "4", "3", "3"])), "r3=4 rm=4\n");
    assert_eq!(mpcp(&["rankbound", "4", "3", "2"]).status.code(), Some(1));
    assert_eq!(mpcp(&["cost", "3", "16"]).status.code(), Some(1));
}

#[test]
fn convexity_query() {
    let dir = tempfile::tempdir().unwrap();
    let dup = |k: usize| {
        Matrix::from_fn(6 - k, 2, |i, _| if k > 0 && i == 0 { 1.0 } else { 0.3 + 0.1 * i as f64 * (k + 1) as f64 })
    };
    let f = FactorSet::new((0..3).map(dup).collect()).unwrap();
    let p = dir.path().join("dup.factors");
    write_factors(&p, &f).unwrap();
    let out = stdout(&mpcp(&["convexity", path_str(&p)]));
    assert!(out.trim_end().ends_with("verdict=deficient"), "{out}");

    let t = generate(dir.path(), "g.dten", "6,5,4", "3", "2");
    let out = stdout(&mpcp(&["convexity", path_str(&dir.path().join("g.dten.factors"))]));
    assert!(out.contains("verdict=full-rank"), "{out}");
    assert!(t.exists());
}
