//! Compressing inside the encoder: the same image encoded with the merge
//! after different blocks, showing how many tokens each block sees.

use laco_kit::encoder::{
    encode_traced, random_image, EncoderConfig, EncoderParams, InsertionPoint,
};
use laco_kit::{CompressionRatio, MergerVariant};

fn main() -> laco_kit::Result<()> {
    let cfg = EncoderConfig::new(6, 32, 4, 4, 32);
    let r = CompressionRatio::new(2)?;
    let params = EncoderParams::init(&cfg, r, 0)?;
    let image = random_image(&cfg, 1);
    println!(
        "{} blocks, {} input tokens, r = {r}",
        cfg.layers,
        cfg.tokens()
    );

    for k in [1, 3, cfg.layers] {
        let ip = InsertionPoint::new(k, cfg.layers)?;
        let out = encode_traced(&image, &params, &cfg, ip, r, MergerVariant::PmlWithResidual)?;
        println!(
            "k = {k}: tokens per block {:?} -> output {} tokens",
            out.trace,
            out.grid.token_count()
        );
    }
    let ip = InsertionPoint::from_fraction(0.5, cfg.layers)?;
    let out = encode_traced(&image, &params, &cfg, ip, r, MergerVariant::External)?;
    println!(
        "external: tokens per block {:?} -> output {} tokens",
        out.trace,
        out.grid.token_count()
    );
    Ok(())
}
