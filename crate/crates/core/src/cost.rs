//! Analytic FLOP accounting and a wall-clock latency harness for encoder
//! runs.
//!
//! Per block with `n` tokens, width `d` and MLP width `m`:
//! attention `4·n·d² + 2·n²·d`, MLP `2·n·d·m·2`. The merger is billed once:
//! the fold is free, the MLP branch costs `2·(N/r²)·(r²C·Hm + Hm·C)` and
//! the averaging shortcut `(N/r²)·r²·C` adds.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode, random_image, shape_trace, EncoderConfig, EncoderParams, InsertionPoint,
};
use crate::error::{Error, Result};
use crate::grid::CompressionRatio;
use crate::pml::MergerVariant;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub tokens: usize,
    pub attn_flops: u64,
    pub mlp_flops: u64,
    pub merger_flops: u64,
}

impl LayerCost {
    pub fn total(&self) -> u64 {
        self.attn_flops + self.mlp_flops + self.merger_flops
    }
}

pub fn attention_flops(tokens: usize, width: usize) -> u64 {
    let (n, d) = (tokens as u64, width as u64);
    4 * n * d * d + 2 * n * n * d
}

pub fn mlp_flops(tokens: usize, width: usize, mlp_width: usize) -> u64 {
    2 * tokens as u64 * width as u64 * mlp_width as u64 * 2
}

/// Cost of one merge applied to `tokens_in` tokens of width `channels`.
pub fn merger_flops(
    tokens_in: usize,
    channels: usize,
    hidden: usize,
    r: CompressionRatio,
    variant: MergerVariant,
) -> u64 {
    if r.is_identity() {
        return 0;
    }
    let out = (tokens_in / r.area()) as u64;
    let (c, hm, rr) = (channels as u64, hidden as u64, r.area() as u64);
    let mut flops = 0;
    if variant.uses_mlp() {
        flops += 2 * out * (rr * c * hm + hm * c);
    }
    if variant.uses_shortcut() {
        flops += out * rr * c;
    }
    flops
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: EncoderConfig,
    pub seed: u64,
    pub variant: MergerVariant,
    /// Requested insertion point.
    pub k: usize,
    /// Block after which the merge actually runs.
    pub effective_k: usize,
    pub r: usize,
    pub fraction: Option<f64>,
    pub timing: String,
}

pub const TIMING_METHOD: &str =
    "single-threaded f64 forward of one image, stem through last block including the merge; \
     parameters and input built before timing";

/// Wall-clock statistics. Never byte-stable across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub trials: usize,
    pub warmup: usize,
    pub timer_resolution_s: f64,
    pub warning: Option<String>,
}

/// Fields excluded from determinism comparisons.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Nondeterministic {
    pub latency: Option<LatencyStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub metadata: RunMetadata,
    pub layers: Vec<LayerCost>,
    pub total_flops: u64,
    pub tokens_out: usize,
    pub nondeterministic: Nondeterministic,
}

impl CostReport {
    pub fn latency(&self) -> Option<&LatencyStats> {
        self.nondeterministic.latency.as_ref()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let sum: u64 = self.layers.iter().map(LayerCost::total).sum();
        if sum != self.total_flops {
            return Err(Error::Assertion(format!(
                "total {} != per-layer sum {sum}",
                self.total_flops
            )));
        }
        if let Some(lat) = self.latency() {
            if !(lat.median_s > 0.0) {
                return Err(Error::Assertion(format!(
                    "non-positive latency {}",
                    lat.median_s
                )));
            }
        }
        Ok(())
    }
}

/// Analytic cost of one encode. The merger is billed on the row of block
/// `k` (block 1 when the merge precedes the first block).
pub fn estimate_flops(
    cfg: &EncoderConfig,
    ip: InsertionPoint,
    r: CompressionRatio,
    variant: MergerVariant,
) -> Result<CostReport> {
    cfg.validate()?;
    cfg.check_ratio(r)?;
    if ip.get() > cfg.layers {
        return Err(Error::Config(format!(
            "insertion point {} exceeds layer count {}",
            ip.get(),
            cfg.layers
        )));
    }
    let k = ip.effective(variant, cfg.layers);
    let effective = InsertionPoint::new(k, cfg.layers)?;
    let trace = shape_trace(cfg, effective, r);
    let merge = merger_flops(cfg.tokens(), cfg.width, cfg.merger_hidden(r), r, variant);
    let merge_row = k.max(1);
    let layers: Vec<LayerCost> = trace
        .iter()
        .enumerate()
        .map(|(i, &n)| LayerCost {
            layer: i + 1,
            tokens: n,
            attn_flops: attention_flops(n, cfg.width),
            mlp_flops: mlp_flops(n, cfg.width, cfg.mlp_width),
            merger_flops: if i + 1 == merge_row { merge } else { 0 },
        })
        .collect();
    Ok(CostReport {
        metadata: RunMetadata {
            config: cfg.clone(),
            seed: 0,
            variant,
            k: ip.get(),
            effective_k: k,
            r: r.get(),
            fraction: None,
            timing: TIMING_METHOD.to_string(),
        },
        total_flops: layers.iter().map(LayerCost::total).sum(),
        layers,
        tokens_out: cfg.tokens() / r.area(),
        nondeterministic: Nondeterministic::default(),
    })
}

/// Smallest observable non-zero step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            trials: 5,
            warmup: 1,
            seed: 0,
        }
    }
}

/// Median wall-clock of `encode` over `trials` runs after `warmup` runs.
pub fn measure_latency(
    cfg: &EncoderConfig,
    ip: InsertionPoint,
    r: CompressionRatio,
    variant: MergerVariant,
    opts: BenchOptions,
) -> Result<LatencyStats> {
    if opts.trials < 5 || opts.warmup < 1 {
        return Err(Error::Config(format!(
            "latency needs trials >= 5 and warmup >= 1, got {} / {}",
            opts.trials, opts.warmup
        )));
    }
    let params = EncoderParams::init(cfg, r, opts.seed)?;
    let image = random_image(cfg, opts.seed.wrapping_add(0x1ace));
    for _ in 0..opts.warmup {
        encode(&image, &params, cfg, ip, r, variant)?;
    }
    let mut times = Vec::with_capacity(opts.trials);
    for _ in 0..opts.trials {
        let start = Instant::now();
        let out = encode(&image, &params, cfg, ip, r, variant)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median_s = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    let resolution = timer_resolution().as_secs_f64();
    let warning = (resolution > 0.01 * median_s).then(|| {
        format!("timer resolution {resolution:.3e}s exceeds 1% of median {median_s:.3e}s")
    });
    Ok(LatencyStats {
        median_s,
        min_s: times[0],
        max_s: times[n - 1],
        trials: opts.trials,
        warmup: opts.warmup,
        timer_resolution_s: resolution,
        warning,
    })
}

/// [`estimate_flops`] plus a measured latency.
pub fn bench(
    cfg: &EncoderConfig,
    ip: InsertionPoint,
    r: CompressionRatio,
    variant: MergerVariant,
    opts: BenchOptions,
) -> Result<CostReport> {
    let mut report = estimate_flops(cfg, ip, r, variant)?;
    report.metadata.seed = opts.seed;
    report.nondeterministic.latency = Some(measure_latency(cfg, ip, r, variant, opts)?);
    Ok(report)
}

/// One sweep entry; failures are recorded rather than aborting the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub variant: MergerVariant,
    pub k: Option<usize>,
    pub report: Option<CostReport>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SweepOptions {
    /// Measure latency at every point (always sequential).
    pub bench: Option<BenchOptions>,
    /// Worker cap for analytic-only sweeps; `None` uses the rayon default.
    pub threads: Option<usize>,
}

fn sweep_point(
    cfg: &EncoderConfig,
    fraction: f64,
    r: CompressionRatio,
    variant: MergerVariant,
    bench_opts: Option<BenchOptions>,
) -> SweepPoint {
    let ip = InsertionPoint::from_fraction(fraction, cfg.layers);
    let k = ip.as_ref().ok().map(|ip| ip.get());
    let result = ip.and_then(|ip| match bench_opts {
        Some(opts) => bench(cfg, ip, r, variant, opts),
        None => estimate_flops(cfg, ip, r, variant),
    });
    match result {
        Ok(mut report) => {
            report.metadata.fraction = Some(fraction);
            SweepPoint {
                fraction,
                variant,
                k,
                report: Some(report),
                error: None,
            }
        }
        Err(e) => SweepPoint {
            fraction,
            variant,
            k,
            report: None,
            error: Some(e.to_string()),
        },
    }
}

/// One point per (fraction, variant), fraction-major.
pub fn sweep(
    cfg: &EncoderConfig,
    fractions: &[f64],
    r: CompressionRatio,
    variants: &[MergerVariant],
    opts: SweepOptions,
) -> Vec<SweepPoint> {
    let grid: Vec<(f64, MergerVariant)> = fractions
        .iter()
        .flat_map(|&f| variants.iter().map(move |&v| (f, v)))
        .collect();
    if opts.bench.is_some() {
        return grid
            .into_iter()
            .map(|(f, v)| sweep_point(cfg, f, r, v, opts.bench))
            .collect();
    }
    let run = || {
        grid.par_iter()
            .map(|&(f, v)| sweep_point(cfg, f, r, v, None))
            .collect()
    };
    match opts
        .threads
        .and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok())
    {
        Some(pool) => pool.install(run),
        None => run(),
    }
}
