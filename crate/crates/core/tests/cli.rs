use std::path::Path;
use std::process::{Command, Output};

fn laco(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laco-kit"))
        .args(args)
        .current_dir(dir)
        .env_remove("LACO_KIT_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn shapes_csv_for_clip_sized_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = laco(
        dir.path(),
        &[
            "shapes", "--L", "24", "--N", "576", "--patch", "14", "--k", "6", "--format", "csv",
            "--out", "s.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,tokens"));
    let rows: Vec<(usize, usize)> = lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 24);
    for (layer, tokens) in rows {
        assert_eq!(tokens, if layer <= 6 { 576 } else { 144 });
    }
}

#[test]
fn gradcheck_on_tiny_config_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = laco(
        dir.path(),
        &[
            "gradcheck",
            "--L",
            "2",
            "--d",
            "8",
            "--heads",
            "2",
            "--patch",
            "2",
            "--image-edge",
            "8",
            "--k",
            "1",
            "--out",
            "g.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    let checks = v["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 3);
    for c in checks {
        assert!(c["coordinates"].as_u64().unwrap() >= 100);
        assert!(c["max_rel_error"].as_f64().unwrap() <= 1e-4);
        assert_eq!(c["passed"], true);
    }
}

#[test]
fn sweep_rows_increase_and_plot_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let o = laco(
        dir.path(),
        &[
            "sweep",
            "--fractions",
            "1/12,1/6,1/4,1/2,1",
            "--format",
            "csv",
            "--out",
            "sw.csv",
            "--plot",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sw.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "flops_total").unwrap();
    let totals: Vec<u64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 5);
    assert!(totals.windows(2).all(|w| w[0] < w[1]), "{totals:?}");
    let dat = std::fs::read_to_string(dir.path().join("sw.plot.dat")).unwrap();
    assert_eq!(dat.lines().filter(|l| !l.starts_with('#')).count(), 5);
    assert!(dir.path().join("sw.plot.gp").exists());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"L": 12, "d": 64, "r": 2, "fraction": 0.25, "mode": "flops"}"#,
    )
    .unwrap();
    let o = laco(dir.path(), &["--config", "c.json", "--out", "a.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(a["mode"], "flops");
    assert_eq!(a["metadata"]["k"], 3);

    let o = laco(
        dir.path(),
        &["--config", "c.json", "--k", "5", "--out", "b.json"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(b["metadata"]["k"], 5);
    assert!(b["total_flops"].as_u64() > a["total_flops"].as_u64());
}

#[test]
fn validation_errors_exit_one_with_message() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"mode": "shapes", "depth": 4}"#,
    )
    .unwrap();
    let o = laco(dir.path(), &["--config", "bad.json"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("depth"));

    std::fs::write(
        dir.path().join("both.json"),
        r#"{"mode": "shapes", "k": 2, "fraction": 0.5}"#,
    )
    .unwrap();
    assert_eq!(code(&laco(dir.path(), &["--config", "both.json"])), 1);
    assert_eq!(
        code(&laco(
            dir.path(),
            &["shapes", "--k", "2", "--fraction", "0.5"]
        )),
        1
    );
    assert_eq!(code(&laco(dir.path(), &["shapes", "--r", "3"])), 1);
    assert_eq!(code(&laco(dir.path(), &["shapes", "--heads", "5"])), 1);
    assert_eq!(code(&laco(dir.path(), &["nonsense"])), 1);
    assert_eq!(code(&laco(dir.path(), &[])), 1);
}

#[test]
fn io_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&laco(dir.path(), &["--config", "missing.json"])), 3);
    assert_eq!(
        code(&laco(
            dir.path(),
            &["shapes", "--out", "no/such/dir/x.json"]
        )),
        3
    );
}

#[test]
fn thread_cap_env_var() {
    let dir = tempfile::tempdir().unwrap();
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_laco-kit"))
            .args(["sweep", "--out", "t.json"])
            .current_dir(dir.path())
            .env("LACO_KIT_THREADS", v)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("2")), 0);
    let capped = std::fs::read(dir.path().join("t.json")).unwrap();
    assert_eq!(code(&run("1")), 0);
    assert_eq!(std::fs::read(dir.path().join("t.json")).unwrap(), capped);
    assert_eq!(code(&run("zero")), 1);
}

#[test]
fn train_writes_log_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let o = laco(
        dir.path(),
        &[
            "train",
            "--L",
            "2",
            "--d",
            "8",
            "--heads",
            "2",
            "--patch",
            "2",
            "--image-edge",
            "8",
            "--k",
            "1",
            "--steps",
            "20",
            "--format",
            "csv",
            "--out",
            "t.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss,pml_grad_norm"));
    assert_eq!(csv.lines().count(), 21);
    let params = laco_kit::PmlParams::load(&dir.path().join("t.params.json")).unwrap();
    assert_eq!(params.channels(), 8);
}

#[test]
fn help_documents_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = laco(dir.path(), &["--help"]);
    assert_eq!(code(&o), 0);
    let help = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--config",
        "--seed",
        "--out",
        "--format",
        "--trials",
        "--warmup",
        "--fractions",
        "LACO_KIT_THREADS",
    ] {
        assert!(help.contains(flag), "{flag}");
    }
    assert!(help.contains("[default: 12]"));
}
