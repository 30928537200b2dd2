use laco_kit::cost::{measure_latency, BenchOptions};
use laco_kit::encoder::{EncoderConfig, InsertionPoint};
use laco_kit::{CompressionRatio, MergerVariant};

// One test function so the two measurements never share the machine with
// a sibling test.
#[test]
fn latency_is_stable_and_follows_flops() {
    let r = CompressionRatio::new(2).unwrap();
    let quarter = InsertionPoint::new(3, 12).unwrap();
    let full = InsertionPoint::new(12, 12).unwrap();

    let small = EncoderConfig::new(12, 64, 4, 4, 64);
    let opts = BenchOptions {
        trials: 11,
        warmup: 2,
        seed: 0,
    };
    let a = measure_latency(&small, quarter, r, MergerVariant::PmlWithResidual, opts).unwrap();
    let b = measure_latency(&small, quarter, r, MergerVariant::PmlWithResidual, opts).unwrap();
    let spread = (a.median_s - b.median_s).abs() / a.median_s.min(b.median_s);
    assert!(spread <= 0.2, "medians {} vs {}", a.median_s, b.median_s);

    let cfg = EncoderConfig::new(12, 192, 3, 4, 64);
    let opts = BenchOptions {
        trials: 5,
        warmup: 1,
        seed: 0,
    };
    let early = measure_latency(&cfg, quarter, r, MergerVariant::PmlWithResidual, opts).unwrap();
    let late = measure_latency(&cfg, full, r, MergerVariant::PmlWithResidual, opts).unwrap();
    assert!(early.median_s < late.median_s, "k=3 {} vs k=12 {}", early.median_s, late.median_s);
}
