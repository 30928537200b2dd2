//! The patch merge layer: zero-initialised it reduces to average pooling,
//! and each variant trades the learned branch against the shortcut.

use laco_kit::{
    avg_pool_oracle, init_params, merge_forward, CompressionRatio, MergerVariant, PmlParams,
    TokenGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> laco_kit::Result<()> {
    let (h, w, c) = (8, 8, 6);
    let r = CompressionRatio::new(2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = TokenGrid::new(
        h,
        w,
        c,
        (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let pooled = avg_pool_oracle(&g, r)?;

    let zero = init_params(c, r, r.area() * c, 1)?;
    let merged = merge_forward(&g, &zero, r, MergerVariant::PmlWithResidual)?;
    println!(
        "zero-init merge vs 2x2 average pooling: max |diff| = {:e}",
        merged.max_abs_diff(&pooled)
    );

    let trained_like = PmlParams::random(c, r, r.area() * c, 2);
    println!("\nvariant             tokens  max |out - avg_pool|");
    for variant in MergerVariant::ALL {
        let out = merge_forward(&g, &trained_like, r, variant)?;
        let gap = if out.token_count() == pooled.token_count() {
            format!("{:.4}", out.max_abs_diff(&pooled))
        } else {
            "-".to_string()
        };
        println!("{:<19} {:>6}  {gap}", variant.as_str(), out.token_count());
    }
    println!("\n(external leaves the grid untouched here; it compresses after the last block)");
    Ok(())
}
