//! Space-to-channel folding on a 4x4 grid and its exact inverse.

use laco_kit::{CompressionRatio, TokenGrid};

fn show(label: &str, g: &TokenGrid) {
    println!(
        "{label}: {}x{} tokens, {} channels",
        g.height(),
        g.width(),
        g.channels()
    );
    for i in 0..g.height() {
        let row: Vec<String> = (0..g.width())
            .map(|j| format!("{:?}", g.token(i, j)))
            .collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> laco_kit::Result<()> {
    let r = CompressionRatio::new(2)?;
    let g = TokenGrid::new(4, 4, 1, (0..16).map(f64::from).collect())?;
    show("input", &g);

    let folded = g.pixel_shuffle(r)?;
    show("pixel_shuffle r=2", &folded);

    let back = folded.pixel_unshuffle(r)?;
    assert_eq!(back, g);
    println!("pixel_unshuffle restores the input exactly");

    show(
        "channel_average (2x2 mean pooling)",
        &folded.channel_average(r)?,
    );
    Ok(())
}
