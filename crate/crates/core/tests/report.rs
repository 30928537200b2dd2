use laco_kit::cost::{bench, estimate_flops, sweep, BenchOptions, SweepOptions};
use laco_kit::encoder::{EncoderConfig, EncoderParams, InsertionPoint};
use laco_kit::report::{emit_plot, emit_report, Format, Report, SweepReport};
use laco_kit::train::{train_stage1, Projector, TrainConfig};
use laco_kit::{CompressionRatio, MergerVariant};

fn r2() -> CompressionRatio {
    CompressionRatio::new(2).unwrap()
}

fn reports() -> Vec<Report> {
    let cfg = EncoderConfig::tiny();
    let ip = InsertionPoint::new(1, 2).unwrap();
    let flops = estimate_flops(&cfg, ip, r2(), MergerVariant::PmlWithResidual).unwrap();
    let timed = bench(
        &cfg,
        ip,
        r2(),
        MergerVariant::PmlWithResidual,
        BenchOptions::default(),
    )
    .unwrap();
    let mut params = EncoderParams::init(&cfg, r2(), 7).unwrap();
    let log = train_stage1(
        &mut params,
        &mut Projector::identity(cfg.width),
        &TrainConfig {
            steps: 3,
            ..Default::default()
        },
        &cfg,
        ip,
        r2(),
        MergerVariant::PmlWithResidual,
    )
    .unwrap();
    let points = sweep(
        &cfg,
        &[0.5, 1.0, 2.0],
        r2(),
        &MergerVariant::ALL,
        SweepOptions::default(),
    );
    vec![
        Report::Flops(flops),
        Report::Bench(timed),
        Report::Train(log),
        Report::Sweep(SweepReport { points }),
    ]
}

#[test]
fn json_round_trip_for_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    for (i, report) in reports().into_iter().enumerate() {
        let path = dir.path().join(format!("{i}.json"));
        emit_report(&report, Format::Json, &path).unwrap();
        let back = Report::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, report);
    }
}

#[test]
fn latency_lives_under_nondeterministic() {
    let timed = &reports()[1];
    let v: serde_json::Value = serde_json::from_str(&timed.to_json().unwrap()).unwrap();
    assert!(
        v["nondeterministic"]["latency"]["median_s"]
            .as_f64()
            .unwrap()
            > 0.0
    );
    let obj = v.as_object().unwrap();
    assert!(obj
        .keys()
        .all(|k| k == "nondeterministic" || !k.contains("latency")));
}

#[test]
fn key_order_is_stable() {
    let text = reports()[0].to_json().unwrap();
    let keys: Vec<usize> = [
        "\"mode\"",
        "\"metadata\"",
        "\"layers\"",
        "\"total_flops\"",
        "\"tokens_out\"",
        "\"nondeterministic\"",
    ]
    .iter()
    .map(|k| text.find(k).unwrap())
    .collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn sweep_failures_are_rows_with_errors() {
    let sweep_report = &reports()[3];
    let csv = sweep_report.to_csv().unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * MergerVariant::ALL.len());
    assert!(rows
        .iter()
        .rev()
        .take(MergerVariant::ALL.len())
        .all(|r| r.contains("insertion fraction")));
}

#[test]
fn plot_bytes_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = EncoderConfig::new(12, 32, 4, 4, 64);
    let pts = sweep(
        &cfg,
        &[1.0 / 12.0, 1.0 / 6.0, 0.25, 0.5, 1.0],
        r2(),
        &[MergerVariant::PmlWithResidual],
        SweepOptions::default(),
    );
    let (a_dat, a_gp) = emit_plot(&pts, &dir.path().join("a.json")).unwrap();
    let (b_dat, b_gp) = emit_plot(&pts, &dir.path().join("b.json")).unwrap();
    assert_eq!(std::fs::read(a_dat).unwrap(), std::fs::read(b_dat).unwrap());
    let ga = std::fs::read_to_string(a_gp).unwrap().replace("a.", "");
    let gb = std::fs::read_to_string(b_gp).unwrap().replace("b.", "");
    assert_eq!(ga, gb);
}
