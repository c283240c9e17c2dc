//! End-to-end runs of the `matchreg` binary on a tiny 16³ configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

const CONFIG: &str = r#"
[train]
epochs = [1, 1, 1]
seed = 3

[data]
dims = 16
train_pairs = 2
seed = 5

[data.deform]
max_mag = 2.0
smooth_sigma = 3.0
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_matchreg"));
    c.env_remove("MATCHREG_OUT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

/// Synthesised data and a fully trained checkpoint, shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    train: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.toml");
        std::fs::write(&config, CONFIG).unwrap();
        let data = root.join("data");
        let o = run(&["--config", s(&config), "synth", "--domain", "A", "--out", s(&data)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let train = root.join("train");
        let o = run(&["--config", s(&config), "train", "--data", s(&data), "--stage", "all", "--out", s(&train)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Fixture { _dir: dir, root, config, data, train }
    })
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (headers, rows)
}

fn column(headers: &[String], name: &str) -> usize {
    headers.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["synth", "--domain", "C", "--out", "/tmp/never"])), 2);
    // No --out and no MATCHREG_OUT.
    assert_eq!(code(&run(&["synth", "--domain", "A"])), 2);
    assert_eq!(code(&run(&["evaluate", "--reports", "/nonexistent/report.csv", "--out", "/tmp/never"])), 2);
}

#[test]
fn runtime_errors_exit_with_1() {
    let f = fixture();
    // Stage 2 cannot run on a fresh model.
    let out = f.root.join("bad_stage");
    let o = run(&["--config", s(&f.config), "train", "--data", s(&f.data), "--stage", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage 2"));
    // Refuses to overwrite a populated dataset directory.
    let o = run(&["--config", s(&f.config), "synth", "--domain", "A", "--out", s(&f.data)]);
    assert_eq!(code(&o), 1);
    let bad_cfg = f.root.join("bad.toml");
    std::fs::write(&bad_cfg, "[model.sem]\nn = 4\n").unwrap();
    assert_eq!(code(&run(&["--config", s(&bad_cfg), "synth", "--domain", "A", "--out", s(&f.root.join("x"))])), 1);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let f = fixture();
    let (a, b, c) = (f.root.join("s1"), f.root.join("s2"), f.root.join("s3"));
    for (dir, seed) in [(&a, "11"), (&b, "11"), (&c, "12")] {
        let o = run(&["--config", s(&f.config), "--seed", seed, "synth", "--domain", "B", "--count", "2", "--out", s(dir)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let moving = "B000_moving.vol";
    assert!(a.join(moving).is_file(), "expected {moving} in {:?}", std::fs::read_dir(&a).unwrap().collect::<Vec<_>>());
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n:?} differs");
    }
    assert_ne!(sha(&a.join(moving)), sha(&c.join(moving)));
    // --force allows rewriting into a populated directory.
    let o = run(&["--config", s(&f.config), "--seed", "11", "synth", "--domain", "B", "--count", "2", "--out", s(&a), "--force"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn train_writes_checkpoints_and_loss_logs() {
    let f = fixture();
    for stage in 1..=3 {
        assert!(f.train.join(format!("stage{stage}.ckpt")).is_file());
        let (headers, rows) = read_csv(&f.train.join(format!("loss_stage{stage}.csv")));
        // One epoch over two pairs.
        assert_eq!(rows.len(), 2);
        let loss = column(&headers, "loss");
        assert!(rows.iter().all(|r| r[loss].parse::<f64>().unwrap().is_finite()));
    }
    // Continuing from stage 1 reproduces the stage-2 checkpoint exactly.
    let out = f.root.join("resume");
    let o = run(&[
        "--config",
        s(&f.config),
        "train",
        "--data",
        s(&f.data),
        "--stage",
        "2",
        "--init",
        s(&f.train.join("stage1.ckpt")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(sha(&out.join("stage2.ckpt")), sha(&f.train.join("stage2.ckpt")));
}

#[test]
fn adapt_with_zero_iterations_matches_register_and_keeps_base() {
    let f = fixture();
    let ckpt = f.train.join("stage3.ckpt");
    let before = sha(&ckpt);
    let reg = f.root.join("register");
    let o = run(&["register", "--ckpt", s(&ckpt), "--data", s(&f.data), "--out", s(&reg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(reg.join("A000_field.vol").is_file());
    let ad = f.root.join("adapt");
    let o = run(&["--config", s(&f.config), "adapt", "--ckpt", s(&ckpt), "--data", s(&f.data), "--iters", "0,5", "--out", s(&ad)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(sha(&ckpt), before);

    let (rh, rr) = read_csv(&reg.join("register.csv"));
    let (ah, ar) = read_csv(&ad.join("adapt.csv"));
    assert_eq!(ar.len(), 2 * rr.len());
    let (ri, ai) = (column(&rh, "iters"), column(&ah, "iters"));
    for metric in ["mean_dsc", "mean_assd", "neg_jac_frac"] {
        let (rc, ac) = (column(&rh, metric), column(&ah, metric));
        for r in &rr {
            let a = ar.iter().find(|a| a[0] == r[0] && a[ai] == "0").expect("iters 0 row");
            assert_eq!(r[ri], "0");
            assert_eq!(a[ac], r[rc], "{metric} for {}", r[0]);
        }
    }
    assert_eq!(ar.iter().filter(|a| a[ai] == "5").count(), rr.len());
}

#[test]
fn evaluate_aggregates_mean_and_sample_std() {
    let f = fixture();
    let report = f.root.join("manual.csv");
    std::fs::write(
        &report,
        "pair,iters,mean_dsc,mean_assd,neg_jac_frac,seconds\n\
         A000,0,0.5,1.0,0.0,2.0\n\
         A001,0,0.7,,0.1,4.0\n\
         A002,0,0.9,3.0,0.2,6.0\n\
         A000,5,0.8,1.5,0.0,1.0\n",
    )
    .unwrap();
    let out = f.root.join("evaluate");
    let o = run(&["evaluate", "--reports", s(&report), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&out.join("summary.csv"));
    assert_eq!(rows.len(), 2);
    let get = |row: &[String], name: &str| -> f64 { row[column(&h, name)].parse().unwrap() };
    let r0 = rows.iter().find(|r| r[column(&h, "iters")] == "0").unwrap();
    assert_eq!(r0[column(&h, "setting")], "manual");
    assert_eq!(r0[column(&h, "n")], "3");
    // mean 0.7; deviations ±0.2 give sample variance 0.04.
    assert!((get(r0, "mean_dsc_mean") - 0.7).abs() < 1e-12);
    assert!((get(r0, "mean_dsc_std") - 0.2).abs() < 1e-12);
    // The empty ASSD cell is skipped: values 1 and 3.
    assert!((get(r0, "mean_assd_mean") - 2.0).abs() < 1e-12);
    assert!((get(r0, "mean_assd_std") - 2f64.sqrt()).abs() < 1e-12);
    assert!((get(r0, "seconds_std") - 2.0).abs() < 1e-12);
    let r5 = rows.iter().find(|r| r[column(&h, "iters")] == "5").unwrap();
    assert_eq!(get(r5, "mean_dsc_std"), 0.0);
}

#[test]
fn output_root_comes_from_the_environment() {
    let f = fixture();
    let root = f.root.join("envroot");
    let o = bin()
        .env("MATCHREG_OUT", &root)
        .args(["register", "--ckpt", s(&f.train.join("stage3.ckpt")), "--data", s(&f.data)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("register").join("register.csv").is_file());
}
