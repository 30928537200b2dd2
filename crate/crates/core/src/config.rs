//! Run configuration: a flat JSON file and command-line flags that mirror
//! its keys one-to-one. Flags override file values.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize};

use crate::encoder::{EncoderConfig, InsertionPoint};
use crate::error::{Error, Result};
use crate::grid::CompressionRatio;
use crate::pml::MergerVariant;
use crate::report::Format;
use crate::train::{Objective, TrainConfig};

pub const DEFAULT_LAYERS: usize = 12;
pub const DEFAULT_WIDTH: usize = 64;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_PATCH: usize = 4;
pub const DEFAULT_IMAGE_EDGE: usize = 64;
pub const DEFAULT_RATIO: usize = 2;
pub const DEFAULT_FRACTION: f64 = 0.25;
pub const DEFAULT_FRACTIONS: [f64; 5] = [1.0 / 12.0, 1.0 / 6.0, 0.25, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Shapes,
    Flops,
    Bench,
    Gradcheck,
    Train,
    Sweep,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Shapes => "shapes",
            Mode::Flops => "flops",
            Mode::Bench => "bench",
            Mode::Gradcheck => "gradcheck",
            Mode::Train => "train",
            Mode::Sweep => "sweep",
        }
    }
}

/// Parses `0.25`, `1/4` or `1`.
pub fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let value = match s.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num
                .trim()
                .parse()
                .map_err(|_| format!("bad numerator in `{s}`"))?;
            let den: f64 = den
                .trim()
                .parse()
                .map_err(|_| format!("bad denominator in `{s}`"))?;
            num / den
        }
        None => s.parse().map_err(|_| format!("`{s}` is not a fraction"))?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(format!("`{s}` is not a finite fraction"))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FractionValue {
    Number(f64),
    Text(String),
}

impl FractionValue {
    fn resolve<E: serde::de::Error>(self) -> std::result::Result<f64, E> {
        match self {
            FractionValue::Number(v) => Ok(v),
            FractionValue::Text(s) => parse_fraction(&s).map_err(E::custom),
        }
    }
}

fn de_fraction<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    Option::<FractionValue>::deserialize(d)?
        .map(FractionValue::resolve)
        .transpose()
}

fn de_fractions<'de, D: Deserializer<'de>>(
    d: D,
) -> std::result::Result<Option<Vec<f64>>, D::Error> {
    Option::<Vec<FractionValue>>::deserialize(d)?
        .map(|v| v.into_iter().map(FractionValue::resolve).collect())
        .transpose()
}

fn parse_variant(s: &str) -> std::result::Result<MergerVariant, String> {
    MergerVariant::from_str(s).map_err(|e| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<Format, String> {
    Format::from_str(s).map_err(|e| e.to_string())
}

/// Every setting as optional, shared by the JSON file and the flags.
/// Unset values fall back to the defaults listed in each help line.
#[derive(Clone, Debug, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    /// Encoder depth [default: 12]
    #[serde(rename = "L")]
    #[arg(long = "L", alias = "layers")]
    pub layers: Option<usize>,
    /// Model width [default: 64]
    #[serde(rename = "d")]
    #[arg(long = "d", alias = "width")]
    pub width: Option<usize>,
    /// Attention heads, must divide d [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward width [default: 4·d]
    #[arg(long = "mlp-width", alias = "mlp_width")]
    pub mlp_width: Option<usize>,
    /// Patch edge in pixels [default: 4]
    #[arg(long)]
    pub patch: Option<usize>,
    /// Image edge in pixels, a multiple of patch [default: 64]
    #[arg(long = "image-edge", alias = "image_edge")]
    pub image_edge: Option<usize>,
    /// Token count, a perfect square; sets image_edge = patch·√N [default: from image_edge]
    #[serde(rename = "N")]
    #[arg(long = "N", alias = "tokens")]
    pub tokens: Option<usize>,
    /// Merger hidden width [default: r²·d]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Compress after this block (0..=L); excludes fraction
    #[arg(long)]
    pub k: Option<usize>,
    /// Compress after round(L·fraction) blocks, e.g. 0.25 or 1/4; excludes k [default: 0.25]
    #[serde(default, deserialize_with = "de_fraction")]
    #[arg(long, value_parser = parse_fraction)]
    pub fraction: Option<f64>,
    /// Compression ratio per spatial axis [default: 2]
    #[arg(long)]
    pub r: Option<usize>,
    /// Merger variant: pml_with_residual, pml_only, residual_only, avg_pool, external [default: pml_with_residual]
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<MergerVariant>,
    /// Variants compared by sweep [default: the single variant]
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Option<Vec<MergerVariant>>,
    /// Mode when not given on the command line
    #[arg(skip)]
    pub mode: Option<Mode>,
    /// Seed for weights, images and sampling [default: 0, or 7 for train]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file [default: laco-kit-<mode>.<format>]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report format: json or csv [default: json]
    #[arg(long, value_parser = parse_format)]
    pub format: Option<Format>,
    /// Timed trials for bench, at least 5 [default: 5]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Untimed warmup runs for bench, at least 1 [default: 1]
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Comma-separated sweep fractions [default: 1/12,1/6,1/4,1/2,1]
    #[serde(default, deserialize_with = "de_fractions")]
    #[arg(long, value_delimiter = ',', value_parser = parse_fraction)]
    pub fractions: Option<Vec<f64>>,
    /// Measure latency at every sweep point (sequential) [default: false]
    #[arg(long = "measure-latency", alias = "measure_latency", num_args = 0..=1, default_missing_value = "true")]
    pub measure_latency: Option<bool>,
    /// Write a gnuplot data file and script next to the sweep report [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub plot: Option<bool>,
    /// Training steps [default: 200]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate [default: 0.05]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training batch size [default: 4]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Finite-difference coordinates per gradient check, at least 100 [default: 128]
    #[arg(long)]
    pub coords: Option<usize>,
}

const KEYS: &[&str] = &[
    "L",
    "d",
    "heads",
    "mlp_width",
    "patch",
    "image_edge",
    "N",
    "hidden",
    "k",
    "fraction",
    "r",
    "variant",
    "variants",
    "mode",
    "seed",
    "out",
    "format",
    "trials",
    "warmup",
    "fractions",
    "measure_latency",
    "plot",
    "steps",
    "lr",
    "batch",
    "coords",
];

impl RawConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        if let Some(key) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::UnknownKey(key.clone()));
        }
        serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// `over` wins wherever it is set. Setting either of `k` / `fraction`
    /// in `over` replaces both from `self`.
    pub fn overlay(self, over: RawConfig) -> RawConfig {
        let placement_overridden = over.k.is_some() || over.fraction.is_some();
        let (k, fraction) = if placement_overridden {
            (over.k, over.fraction)
        } else {
            (self.k, self.fraction)
        };
        RawConfig {
            layers: over.layers.or(self.layers),
            width: over.width.or(self.width),
            heads: over.heads.or(self.heads),
            mlp_width: over.mlp_width.or(self.mlp_width),
            patch: over.patch.or(self.patch),
            image_edge: over.image_edge.or(self.image_edge),
            tokens: over.tokens.or(self.tokens),
            hidden: over.hidden.or(self.hidden),
            k,
            fraction,
            r: over.r.or(self.r),
            variant: over.variant.or(self.variant),
            variants: over.variants.or(self.variants),
            mode: over.mode.or(self.mode),
            seed: over.seed.or(self.seed),
            out: over.out.or(self.out),
            format: over.format.or(self.format),
            trials: over.trials.or(self.trials),
            warmup: over.warmup.or(self.warmup),
            fractions: over.fractions.or(self.fractions),
            measure_latency: over.measure_latency.or(self.measure_latency),
            plot: over.plot.or(self.plot),
            steps: over.steps.or(self.steps),
            lr: over.lr.or(self.lr),
            batch: over.batch.or(self.batch),
            coords: over.coords.or(self.coords),
        }
    }
}

/// Where the merge goes, as given by the user.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Layer(usize),
    Fraction(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub encoder: EncoderConfig,
    pub placement: Placement,
    pub insertion: InsertionPoint,
    pub r: CompressionRatio,
    pub variant: MergerVariant,
    pub variants: Vec<MergerVariant>,
    pub seed: u64,
    pub out: PathBuf,
    pub format: Format,
    pub trials: usize,
    pub warmup: usize,
    pub fractions: Vec<f64>,
    pub measure_latency: bool,
    pub plot: bool,
    pub train: TrainConfig,
    pub coords: usize,
    /// Worker cap for sweeps; bench ignores it.
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn k(&self) -> usize {
        self.insertion.get()
    }

    pub fn fraction(&self) -> Option<f64> {
        match self.placement {
            Placement::Fraction(f) => Some(f),
            Placement::Layer(_) => None,
        }
    }
}

fn integer_sqrt(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// Merges an optional config file with flag values and validates the
/// result.
pub fn parse_config(path: Option<&Path>, flags: RawConfig) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::default(),
    };
    resolve(base.overlay(flags))
}

/// Applies defaults to `raw` and validates it.
pub fn resolve(raw: RawConfig) -> Result<RunConfig> {
    let mode = raw.mode.ok_or_else(|| {
        Error::Config("no mode given (shapes|flops|bench|gradcheck|train|sweep)".into())
    })?;
    let width = raw.width.unwrap_or(DEFAULT_WIDTH);
    let patch = raw.patch.unwrap_or(DEFAULT_PATCH);
    let image_edge = match (raw.tokens, raw.image_edge) {
        (None, edge) => edge.unwrap_or(DEFAULT_IMAGE_EDGE),
        (Some(n), edge) => {
            let side = integer_sqrt(n).filter(|&s| s > 0).ok_or_else(|| {
                Error::Config(format!("N = {n} is not a positive perfect square"))
            })?;
            let implied = side * patch;
            if let Some(e) = edge.filter(|&e| e != implied) {
                return Err(Error::Conflict(format!(
                    "N = {n} with patch {patch} implies image_edge {implied}, but image_edge is {e}"
                )));
            }
            implied
        }
    };
    let encoder = EncoderConfig {
        layers: raw.layers.unwrap_or(DEFAULT_LAYERS),
        width,
        heads: raw.heads.unwrap_or(DEFAULT_HEADS),
        mlp_width: raw.mlp_width.unwrap_or(4 * width),
        patch,
        image_edge,
        merger_hidden: raw.hidden,
    };
    encoder.validate()?;
    let r = CompressionRatio::new(raw.r.unwrap_or(DEFAULT_RATIO))?;
    encoder.check_ratio(r)?;

    let placement = match (raw.k, raw.fraction) {
        (Some(k), Some(f)) => {
            return Err(Error::Conflict(format!(
                "both k = {k} and fraction = {f} are set"
            )));
        }
        (Some(k), None) => Placement::Layer(k),
        (None, Some(f)) => Placement::Fraction(f),
        (None, None) => Placement::Fraction(DEFAULT_FRACTION),
    };
    let insertion = match placement {
        Placement::Layer(k) => InsertionPoint::new(k, encoder.layers)?,
        Placement::Fraction(f) => InsertionPoint::from_fraction(f, encoder.layers)?,
    };

    let variant = raw.variant.unwrap_or(MergerVariant::PmlWithResidual);
    let variants = raw.variants.unwrap_or_else(|| vec![variant]);
    if variants.is_empty() {
        return Err(Error::Config("variants must not be empty".into()));
    }
    let fractions = raw.fractions.unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
    for &f in &fractions {
        InsertionPoint::from_fraction(f, encoder.layers)?;
    }

    let trials = raw.trials.unwrap_or(5);
    let warmup = raw.warmup.unwrap_or(1);
    if trials < 5 {
        return Err(Error::Config(format!("trials must be >= 5, got {trials}")));
    }
    if warmup < 1 {
        return Err(Error::Config("warmup must be >= 1".into()));
    }
    let coords = raw.coords.unwrap_or(128);
    if coords < 100 {
        return Err(Error::Config(format!(
            "coords must be >= 100, got {coords}"
        )));
    }

    let seed = raw.seed.unwrap_or(0);
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        steps: raw.steps.unwrap_or(defaults.steps),
        learning_rate: raw.lr.unwrap_or(defaults.learning_rate),
        seed: raw.seed.unwrap_or(defaults.seed),
        batch: raw.batch.unwrap_or(defaults.batch),
        objective: Objective::ReconstructPooled,
    };
    train.validate()?;

    let format = raw.format.unwrap_or(Format::Json);
    let out = raw.out.unwrap_or_else(|| {
        PathBuf::from(format!("laco-kit-{}.{}", mode.as_str(), format.extension()))
    });

    Ok(RunConfig {
        mode,
        encoder,
        placement,
        insertion,
        r,
        variant,
        variants,
        seed,
        out,
        format,
        trials,
        warmup,
        fractions,
        measure_latency: raw.measure_latency.unwrap_or(false),
        plot: raw.plot.unwrap_or(false),
        train,
        coords,
        threads: None,
    })
}
