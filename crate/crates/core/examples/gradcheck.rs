//! Finite-difference verification of tape gradients for the merge layer
//! and the full encoder on the tiny configuration.

use laco_kit::encoder::{EncoderConfig, InsertionPoint};
use laco_kit::gradcheck::{check_encode, check_merger};
use laco_kit::{CompressionRatio, MergerVariant};

fn main() -> laco_kit::Result<()> {
    let cfg = EncoderConfig::tiny();
    let r = CompressionRatio::new(2)?;
    let ip = InsertionPoint::new(1, cfg.layers)?;
    let (coords, step) = (200, 1e-5);

    for variant in [MergerVariant::PmlOnly, MergerVariant::PmlWithResidual] {
        let rep = check_merger(&cfg, r, variant, 0, coords, step)?;
        println!(
            "merger {:<18} {} coords  max rel error {:.2e}",
            variant.as_str(),
            rep.checked,
            rep.max_rel_error
        );
    }
    for variant in [
        MergerVariant::PmlWithResidual,
        MergerVariant::PmlOnly,
        MergerVariant::External,
    ] {
        let rep = check_encode(&cfg, ip, r, variant, 0, coords, step)?;
        println!(
            "encode {:<18} {} coords  max rel error {:.2e}  worst {:?}",
            variant.as_str(),
            rep.checked,
            rep.max_rel_error,
            rep.worst
        );
    }
    Ok(())
}
