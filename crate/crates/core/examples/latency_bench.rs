//! Wall-clock forward latency with the merge after block 3 versus after
//! the whole stack. Run with `--release` for meaningful numbers.

use laco_kit::cost::{bench, BenchOptions};
use laco_kit::encoder::{EncoderConfig, InsertionPoint};
use laco_kit::{CompressionRatio, MergerVariant};

fn main() -> laco_kit::Result<()> {
    let cfg = EncoderConfig::new(12, 192, 3, 4, 64);
    let r = CompressionRatio::new(2)?;
    let opts = BenchOptions::default();
    let ip = InsertionPoint::new(3, cfg.layers)?;

    let inner = bench(&cfg, ip, r, MergerVariant::PmlWithResidual, opts)?;
    let outer = bench(&cfg, ip, r, MergerVariant::External, opts)?;
    for (label, rep) in [("k = 3", &inner), ("external", &outer)] {
        let lat = rep.latency().unwrap();
        println!(
            "{label:<9} {:>7.2} GFLOPs  median {:>8.2} ms  (min {:.2}, max {:.2}, {} trials)",
            rep.total_flops as f64 / 1e9,
            lat.median_s * 1e3,
            lat.min_s * 1e3,
            lat.max_s * 1e3,
            lat.trials
        );
        if let Some(w) = &lat.warning {
            println!("  warning: {w}");
        }
    }
    let (a, b) = (
        inner.latency().unwrap().median_s,
        outer.latency().unwrap().median_s,
    );
    println!(
        "latency reduction {:.1}%, FLOP reduction {:.1}%",
        100.0 * (1.0 - a / b),
        100.0 * (1.0 - inner.total_flops as f64 / outer.total_flops as f64)
    );
    Ok(())
}
