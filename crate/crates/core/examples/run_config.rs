//! Driving a run from a flat JSON config, as the command-line tool does.

use laco_kit::cli::run;
use laco_kit::config::{resolve, RawConfig};
use laco_kit::report::Report;

fn main() -> laco_kit::Result<()> {
    let dir = std::env::temp_dir();
    let out = dir.join("laco-kit-shapes.csv");
    let text = format!(
        r#"{{"mode": "shapes", "L": 24, "N": 576, "patch": 14, "fraction": 0.25, "r": 2,
            "format": "csv", "out": {:?}}}"#,
        out.display().to_string()
    );
    let cfg = resolve(RawConfig::from_json(&text)?)?;
    println!("k = {} for fraction {:?}", cfg.k(), cfg.fraction());

    let outcome = run(&cfg)?;
    if let Report::Shapes(s) = &outcome.report {
        println!(
            "{} -> {} tokens after block {}",
            s.tokens_in, s.tokens_out, s.k
        );
    }
    print!(
        "{}",
        std::fs::read_to_string(&out).map_err(|e| laco_kit::Error::io(&out, e))?
    );
    Ok(())
}
