//! Analytic FLOPs across insertion depths at a ViT-L/14-336 sized encoder,
//! plus a gnuplot-ready data file and script.

use laco_kit::cost::{sweep, SweepOptions};
use laco_kit::encoder::EncoderConfig;
use laco_kit::report::emit_plot;
use laco_kit::{CompressionRatio, MergerVariant};

fn main() -> laco_kit::Result<()> {
    let cfg = EncoderConfig::new(24, 1024, 16, 14, 336);
    let r = CompressionRatio::new(2)?;
    let fractions = [1.0 / 12.0, 1.0 / 6.0, 0.25, 0.5, 1.0];
    let variants = [MergerVariant::PmlWithResidual, MergerVariant::External];
    let points = sweep(&cfg, &fractions, r, &variants, SweepOptions::default());

    let external = points
        .iter()
        .find_map(|p| {
            (p.variant == MergerVariant::External).then(|| p.report.as_ref().unwrap().total_flops)
        })
        .unwrap();
    println!("fraction   k  variant             GFLOPs   vs external");
    for p in &points {
        let total = p.report.as_ref().unwrap().total_flops;
        println!(
            "{:>8.4} {:>3}  {:<18} {:>8.1}   {:>6.1}%",
            p.fraction,
            p.k.unwrap(),
            p.variant.as_str(),
            total as f64 / 1e9,
            100.0 * total as f64 / external as f64
        );
    }

    let inner: Vec<_> = points
        .into_iter()
        .filter(|p| p.variant == MergerVariant::PmlWithResidual)
        .collect();
    let out = std::env::temp_dir().join("laco-kit-cost-sweep.json");
    let (data, script) = emit_plot(&inner, &out)?;
    println!(
        "\nplot data {} and script {}",
        data.display(),
        script.display()
    );
    Ok(())
}
