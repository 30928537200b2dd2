//! Patch merge layer: space-to-channel fold followed by a two-layer MLP back
//! to the original width, optionally summed with the parameter-free
//! fold-and-average shortcut.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{pixel_shuffle_index, CompressionRatio, TokenGrid};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const PARAMS_FORMAT: &str = "laco-kit/pml-params";
pub const PARAMS_VERSION: u32 = 1;

/// How the compression stage merges tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergerVariant {
    /// MLP branch plus the averaging shortcut.
    PmlWithResidual,
    PmlOnly,
    ResidualOnly,
    AvgPool,
    /// No compression inside the encoder; the full merger runs after the last block.
    External,
}

impl MergerVariant {
    pub const ALL: [MergerVariant; 5] = [
        MergerVariant::PmlWithResidual,
        MergerVariant::PmlOnly,
        MergerVariant::ResidualOnly,
        MergerVariant::AvgPool,
        MergerVariant::External,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergerVariant::PmlWithResidual => "pml_with_residual",
            MergerVariant::PmlOnly => "pml_only",
            MergerVariant::ResidualOnly => "residual_only",
            MergerVariant::AvgPool => "avg_pool",
            MergerVariant::External => "external",
        }
    }

    pub fn uses_mlp(self) -> bool {
        matches!(
            self,
            MergerVariant::PmlWithResidual | MergerVariant::PmlOnly | MergerVariant::External
        )
    }

    pub fn uses_shortcut(self) -> bool {
        !matches!(self, MergerVariant::PmlOnly)
    }
}

impl fmt::Display for MergerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergerVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MergerVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s || v.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown merger variant `{s}`")))
    }
}

/// Weights of the merger MLP: `[r²C x Hm]`, `[Hm]`, `[Hm x C]`, `[C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PmlParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    ratio: CompressionRatio,
    channels: usize,
    hidden: usize,
}

impl PmlParams {
    pub fn from_tensors(
        ratio: CompressionRatio,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    ) -> Result<Self> {
        let (folded, hidden) = match w1.shape() {
            [a, b] => (*a, *b),
            s => return Err(Error::Config(format!("w1 must be a matrix, got {s:?}"))),
        };
        if folded % ratio.area() != 0 {
            return Err(Error::ChannelDivisibility {
                channels: folded,
                ratio: ratio.get(),
            });
        }
        let channels = folded / ratio.area();
        if b1.shape() != [hidden] || w2.shape() != [hidden, channels] || b2.shape() != [channels] {
            return Err(Error::Config(format!(
                "inconsistent merger shapes: w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            )));
        }
        let params = Self {
            w1,
            b1,
            w2,
            b2,
            ratio,
            channels,
            hidden,
        };
        if !params.tensors().iter().all(|t| t.all_finite()) {
            return Err(Error::Config("merger parameters must be finite".into()));
        }
        Ok(params)
    }

    pub fn ratio(&self) -> CompressionRatio {
        self.ratio
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers the weights on `tape`.
    pub fn register(&self, tape: &mut GradTape, trainable: bool) -> PmlVars {
        let mut reg = |t: &Tensor| tape.leaf(t.clone().with_grad(trainable));
        PmlVars {
            w1: reg(&self.w1),
            b1: reg(&self.b1),
            w2: reg(&self.w2),
            b2: reg(&self.b2),
        }
    }

    /// Fully random weights (non-zero second layer), for tests and
    /// gradient checks.
    pub fn random(channels: usize, ratio: CompressionRatio, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let folded = ratio.area() * channels;
        Self {
            w1: Tensor::uniform(&[folded, hidden], glorot(folded, hidden), &mut rng),
            b1: Tensor::uniform(&[hidden], 0.5, &mut rng),
            w2: Tensor::uniform(&[hidden, channels], glorot(hidden, channels), &mut rng),
            b2: Tensor::uniform(&[channels], 0.5, &mut rng),
            ratio,
            channels,
            hidden,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ParamsFile {
            format: PARAMS_FORMAT.to_string(),
            version: PARAMS_VERSION,
            ratio: self.ratio.get(),
            channels: self.channels,
            hidden: self.hidden,
            tensors: ["w1", "b1", "w2", "b2"]
                .iter()
                .zip(self.tensors())
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParamsFile = serde_json::from_str(text)?;
        if file.format != PARAMS_FORMAT || file.version != PARAMS_VERSION {
            return Err(Error::Config(format!(
                "unsupported parameter file {} v{}",
                file.format, file.version
            )));
        }
        let mut named = file.tensors.into_iter();
        let mut next = |expect: &str| -> Result<Tensor> {
            let t = named
                .next()
                .ok_or_else(|| Error::Config(format!("missing tensor `{expect}`")))?;
            if t.name != expect {
                return Err(Error::Config(format!(
                    "expected tensor `{expect}`, found `{}`",
                    t.name
                )));
            }
            Tensor::new(t.shape, t.data)
        };
        let (w1, b1, w2, b2) = (next("w1")?, next("b1")?, next("w2")?, next("b2")?);
        let params = Self::from_tensors(CompressionRatio::new(file.ratio)?, w1, b1, w2, b2)?;
        if params.channels != file.channels || params.hidden != file.hidden {
            return Err(Error::Config("header does not match tensor shapes".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    format: String,
    version: u32,
    ratio: usize,
    channels: usize,
    hidden: usize,
    tensors: Vec<NamedTensor>,
}

pub(crate) fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform first layer, zero second layer: at initialization the
/// combined merger reduces to the averaging shortcut.
pub fn init_params(
    channels: usize,
    ratio: CompressionRatio,
    hidden: usize,
    seed: u64,
) -> Result<PmlParams> {
    if hidden == 0 || channels == 0 {
        return Err(Error::Config("merger widths must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let folded = ratio.area() * channels;
    Ok(PmlParams {
        w1: Tensor::uniform(&[folded, hidden], glorot(folded, hidden), &mut rng),
        b1: Tensor::zeros(&[hidden]),
        w2: Tensor::zeros(&[hidden, channels]),
        b2: Tensor::zeros(&[channels]),
        ratio,
        channels,
        hidden,
    })
}

/// Default hidden width: the folded width `r²·C`.
pub fn default_hidden(channels: usize, ratio: CompressionRatio) -> usize {
    ratio.area() * channels
}

/// Merger weights recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PmlVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl PmlVars {
    pub fn from_slice(vars: &[Var]) -> Self {
        Self {
            w1: vars[0],
            b1: vars[1],
            w2: vars[2],
            b2: vars[3],
        }
    }

    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// A token matrix on a tape together with its grid extents.
#[derive(Clone, Copy, Debug)]
pub struct GridVar {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridVar {
    pub fn token_count(&self) -> usize {
        self.height * self.width
    }
}

/// Space-to-channel fold on the tape; the result is `[N/r² x r²C]`.
pub fn fold_tokens(tape: &mut GradTape, g: GridVar, r: CompressionRatio) -> Result<GridVar> {
    let index: Arc<[usize]> = pixel_shuffle_index(g.height, g.width, g.channels, r)?.into();
    let (h, w) = (g.height / r.get(), g.width / r.get());
    let c = g.channels * r.area();
    let tokens = tape.gather(g.tokens, index, &[h * w, c])?;
    Ok(GridVar {
        tokens,
        height: h,
        width: w,
        channels: c,
    })
}

fn check_params(
    tape: &GradTape,
    vars: &PmlVars,
    channels: usize,
    r: CompressionRatio,
) -> Result<()> {
    let w1 = tape.shape(vars.w1);
    let w2 = tape.shape(vars.w2);
    if w1.first() != Some(&(r.area() * channels)) || w2.last() != Some(&channels) {
        return Err(Error::Config(format!(
            "merger weights {w1:?}/{w2:?} do not fit {channels} channels at ratio {r}"
        )));
    }
    Ok(())
}

/// MLP branch on an already folded grid.
fn mlp_branch(
    tape: &mut GradTape,
    folded: GridVar,
    vars: &PmlVars,
    channels: usize,
) -> Result<GridVar> {
    let h = tape.affine(folded.tokens, vars.w1, vars.b1)?;
    let h = tape.gelu(h);
    let tokens = tape.affine(h, vars.w2, vars.b2)?;
    Ok(GridVar {
        tokens,
        channels,
        ..folded
    })
}

fn shortcut_branch(tape: &mut GradTape, folded: GridVar, r: CompressionRatio) -> Result<GridVar> {
    let tokens = tape.channel_average(folded.tokens, r)?;
    Ok(GridVar {
        tokens,
        channels: folded.channels / r.area(),
        ..folded
    })
}

pub fn pml_forward_tape(
    tape: &mut GradTape,
    g: GridVar,
    vars: &PmlVars,
    r: CompressionRatio,
) -> Result<GridVar> {
    check_params(tape, vars, g.channels, r)?;
    let folded = fold_tokens(tape, g, r)?;
    mlp_branch(tape, folded, vars, g.channels)
}

/// Applies `variant` on the tape. `vars` may be `None` for the
/// parameter-free variants.
pub fn merge_forward_tape(
    tape: &mut GradTape,
    g: GridVar,
    vars: Option<&PmlVars>,
    r: CompressionRatio,
    variant: MergerVariant,
) -> Result<GridVar> {
    let need_params =
        || vars.ok_or_else(|| Error::Config(format!("variant {variant} needs merger parameters")));
    match variant {
        MergerVariant::External => Ok(g),
        MergerVariant::ResidualOnly | MergerVariant::AvgPool => {
            let folded = fold_tokens(tape, g, r)?;
            shortcut_branch(tape, folded, r)
        }
        MergerVariant::PmlOnly => pml_forward_tape(tape, g, need_params()?, r),
        MergerVariant::PmlWithResidual => {
            let vars = need_params()?;
            check_params(tape, vars, g.channels, r)?;
            let folded = fold_tokens(tape, g, r)?;
            let mlp = mlp_branch(tape, folded, vars, g.channels)?;
            let short = shortcut_branch(tape, folded, r)?;
            let tokens = tape.add(mlp.tokens, short.tokens)?;
            Ok(GridVar { tokens, ..mlp })
        }
    }
}

fn run_on_tape(
    g: &TokenGrid,
    params: Option<&PmlParams>,
    f: impl FnOnce(&mut GradTape, GridVar, Option<&PmlVars>) -> Result<GridVar>,
) -> Result<TokenGrid> {
    let mut tape = GradTape::new();
    let tokens = tape.constant(g.to_tokens());
    let vars = params.map(|p| p.register(&mut tape, false));
    let input = GridVar {
        tokens,
        height: g.height(),
        width: g.width(),
        channels: g.channels(),
    };
    let out = f(&mut tape, input, vars.as_ref())?;
    TokenGrid::from_tokens(out.height, out.width, tape.value(out.tokens))
}

/// `MLP(fold(g, r))`, reshaped to `(H/r) x (W/r) x C`.
pub fn pml_forward(g: &TokenGrid, params: &PmlParams, r: CompressionRatio) -> Result<TokenGrid> {
    run_on_tape(g, Some(params), |tape, input, vars| {
        pml_forward_tape(tape, input, vars.unwrap(), r)
    })
}

pub fn merge_forward(
    g: &TokenGrid,
    params: &PmlParams,
    r: CompressionRatio,
    variant: MergerVariant,
) -> Result<TokenGrid> {
    if variant == MergerVariant::External {
        return Ok(g.clone());
    }
    run_on_tape(g, Some(params), |tape, input, vars| {
        merge_forward_tape(tape, input, vars, r, variant)
    })
}
