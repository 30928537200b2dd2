//! JSON/CSV report emission and gnuplot-ready sweep plots.
//!
//! CSV schemas:
//! - shapes: `layer,tokens`
//! - flops / bench: `layer,tokens,attn_flops,mlp_flops,merger_flops`, with
//!   totals in a sibling `<stem>.totals.json`
//! - train: `step,loss,pml_grad_norm`
//! - gradcheck: `check,coordinates,max_rel_error,tolerance,passed`
//! - sweep: `fraction,k,variant,flops_total,tokens_out,latency_median_s,error`
//!
//! Wall-clock data only ever appears under a `nondeterministic` key (JSON)
//! or in the `latency_median_s` column (CSV).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{CostReport, Nondeterministic, SweepPoint};
use crate::error::{Error, Result};
use crate::train::TrainLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!(
                "unknown format `{other}` (json|csv)"
            ))),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTokens {
    pub layer: usize,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeReport {
    pub tokens_in: usize,
    pub k: usize,
    pub r: usize,
    pub layers: Vec<LayerTokens>,
    pub tokens_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub check: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub step: f64,
    pub seed: u64,
    pub checks: Vec<GradCheckEntry>,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
}

/// Everything a run can emit, tagged by mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Report {
    Shapes(ShapeReport),
    Flops(CostReport),
    Bench(CostReport),
    Gradcheck(GradCheckSummary),
    Train(TrainLog),
    Sweep(SweepReport),
}

#[derive(Serialize)]
struct Totals<'a> {
    total_flops: u64,
    tokens_out: usize,
    nondeterministic: &'a Nondeterministic,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Evaluation(format!("csv encoding: {e}"));
        match self {
            Report::Shapes(r) => {
                w.write_record(["layer", "tokens"]).map_err(csv_err)?;
                for l in &r.layers {
                    w.write_record([l.layer.to_string(), l.tokens.to_string()])
                        .map_err(csv_err)?;
                }
            }
            Report::Flops(r) | Report::Bench(r) => {
                w.write_record(["layer", "tokens", "attn_flops", "mlp_flops", "merger_flops"])
                    .map_err(csv_err)?;
                for l in &r.layers {
                    w.write_record([
                        l.layer.to_string(),
                        l.tokens.to_string(),
                        l.attn_flops.to_string(),
                        l.mlp_flops.to_string(),
                        l.merger_flops.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
            Report::Gradcheck(g) => {
                w.write_record([
                    "check",
                    "coordinates",
                    "max_rel_error",
                    "tolerance",
                    "passed",
                ])
                .map_err(csv_err)?;
                for c in &g.checks {
                    w.write_record([
                        c.check.clone(),
                        c.coordinates.to_string(),
                        c.max_rel_error.to_string(),
                        c.tolerance.to_string(),
                        c.passed.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
            Report::Train(t) => {
                w.write_record(["step", "loss", "pml_grad_norm"])
                    .map_err(csv_err)?;
                for s in &t.steps {
                    w.write_record([
                        s.step.to_string(),
                        s.loss.to_string(),
                        s.pml_grad_norm.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
            Report::Sweep(s) => {
                w.write_record([
                    "fraction",
                    "k",
                    "variant",
                    "flops_total",
                    "tokens_out",
                    "latency_median_s",
                    "error",
                ])
                .map_err(csv_err)?;
                for p in &s.points {
                    let rep = p.report.as_ref();
                    w.write_record([
                        p.fraction.to_string(),
                        p.k.map(|k| k.to_string()).unwrap_or_default(),
                        p.variant.to_string(),
                        rep.map(|r| r.total_flops.to_string()).unwrap_or_default(),
                        rep.map(|r| r.tokens_out.to_string()).unwrap_or_default(),
                        rep.and_then(|r| r.latency())
                            .map(|l| l.median_s.to_string())
                            .unwrap_or_default(),
                        p.error.clone().unwrap_or_default(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Evaluation(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// `out` with its extension replaced by `suffix` (e.g. `totals.json`).
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

/// Writes `report` to `out`; returns every file written.
pub fn emit_report(report: &Report, format: Format, out: &Path) -> Result<Vec<PathBuf>> {
    match format {
        Format::Json => {
            write(out, &report.to_json()?)?;
            Ok(vec![out.to_path_buf()])
        }
        Format::Csv => {
            write(out, &report.to_csv()?)?;
            let mut files = vec![out.to_path_buf()];
            if let Report::Flops(r) | Report::Bench(r) = report {
                let totals = Totals {
                    total_flops: r.total_flops,
                    tokens_out: r.tokens_out,
                    nondeterministic: &r.nondeterministic,
                };
                let path = sibling(out, "totals.json");
                write(&path, &(serde_json::to_string_pretty(&totals)? + "\n"))?;
                files.push(path);
            }
            Ok(files)
        }
    }
}

/// Plot-ready data plus a gnuplot script: total FLOPs (bars, left axis) and
/// median latency (line, right axis) against insertion fraction. Returns
/// the (data, script) paths.
pub fn emit_plot(points: &[SweepPoint], out: &Path) -> Result<(PathBuf, PathBuf)> {
    let rows: Vec<&SweepPoint> = points.iter().filter(|p| p.report.is_some()).collect();
    if rows.is_empty() {
        return Err(Error::Config(
            "plot needs at least one successful sweep point".into(),
        ));
    }
    let data_path = sibling(out, "plot.dat");
    let script_path = sibling(out, "plot.gp");

    let mut data = String::from("# fraction k variant flops_total latency_median_s\n");
    for p in &rows {
        let rep = p.report.as_ref().unwrap();
        let latency = rep
            .latency()
            .map(|l| l.median_s.to_string())
            .unwrap_or_else(|| "?".to_string());
        let _ = writeln!(
            data,
            "{} {} {} {} {}",
            p.fraction,
            p.k.unwrap_or(0),
            p.variant,
            rep.total_flops,
            latency
        );
    }
    let has_latency = rows
        .iter()
        .any(|p| p.report.as_ref().unwrap().latency().is_some());
    let data_name = data_path.file_name().unwrap().to_string_lossy();
    let png_name = sibling(out, "png")
        .file_name()
        .unwrap()
        .to_string_lossy()
        .into_owned();
    let mut script = String::new();
    let _ = writeln!(script, "set terminal pngcairo size 900,540");
    let _ = writeln!(script, "set output '{png_name}'");
    let _ = writeln!(script, "set datafile missing '?'");
    let _ = writeln!(script, "set title 'Encoder cost vs compression depth'");
    let _ = writeln!(script, "set xlabel 'insertion fraction of encoder depth'");
    let _ = writeln!(script, "set ylabel 'total FLOPs'");
    let _ = writeln!(script, "set style fill solid 0.6");
    let _ = writeln!(script, "set boxwidth 0.6 relative");
    let _ = writeln!(script, "set xtics rotate by -30");
    if has_latency {
        let _ = writeln!(script, "set y2label 'median latency (s)'");
        let _ = writeln!(script, "set y2tics");
        let _ = writeln!(
            script,
            "plot '{data_name}' using 0:4:xtic(1) with boxes title 'FLOPs', \\\n     '' using 0:5 axes x1y2 with linespoints lw 2 title 'latency'"
        );
    } else {
        let _ = writeln!(
            script,
            "plot '{data_name}' using 0:4:xtic(1) with boxes title 'FLOPs'"
        );
    }
    write(&data_path, &data)?;
    write(&script_path, &script)?;
    Ok((data_path, script_path))
}
