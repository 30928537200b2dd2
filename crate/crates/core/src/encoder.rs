//! Toy pre-norm vision transformer with a compression stage that can sit
//! after any block.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CompressionRatio, TokenGrid};
use crate::pml::{self, glorot, merge_forward_tape, GridVar, MergerVariant, PmlParams, PmlVars};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub patch: usize,
    pub image_edge: usize,
    /// Merger hidden width; `None` means `r²·width`.
    #[serde(default)]
    pub merger_hidden: Option<usize>,
}

impl EncoderConfig {
    /// `mlp_width = 4·width`, no explicit merger width.
    pub fn new(layers: usize, width: usize, heads: usize, patch: usize, image_edge: usize) -> Self {
        Self {
            layers,
            width,
            heads,
            mlp_width: 4 * width,
            patch,
            image_edge,
            merger_hidden: None,
        }
    }

    /// The configuration used by gradient checks and the training loop:
    /// two blocks, width 8, a 4x4 token grid.
    pub fn tiny() -> Self {
        Self::new(2, 8, 2, 2, 8)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_width", self.mlp_width),
            ("patch", self.patch),
            ("image_edge", self.image_edge),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !self.image_edge.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image edge {} is not a multiple of patch {}",
                self.image_edge, self.patch
            )));
        }
        if self.merger_hidden == Some(0) {
            return Err(Error::Config("merger_hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn grid_edge(&self) -> usize {
        self.image_edge / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid_edge() * self.grid_edge()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * IMAGE_CHANNELS
    }

    pub fn merger_hidden(&self, r: CompressionRatio) -> usize {
        self.merger_hidden
            .unwrap_or_else(|| pml::default_hidden(self.width, r))
    }

    /// Checks that `r` divides the token grid edge.
    pub fn check_ratio(&self, r: CompressionRatio) -> Result<()> {
        r.check_divides(self.grid_edge(), self.grid_edge())
    }
}

/// Index of the block after which compression happens; `0` compresses the
/// stem output, `layers` compresses after the whole stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InsertionPoint(usize);

impl InsertionPoint {
    pub fn new(k: usize, layers: usize) -> Result<Self> {
        if k > layers {
            return Err(Error::Config(format!(
                "insertion point {k} exceeds layer count {layers}"
            )));
        }
        Ok(Self(k))
    }

    /// `k = round(layers·fraction)`, at least 1.
    pub fn from_fraction(fraction: f64, layers: usize) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "insertion fraction must be in (0, 1], got {fraction}"
            )));
        }
        let k = ((layers as f64 * fraction).round() as usize).clamp(1, layers);
        Self::new(k, layers)
    }

    pub fn after_stack(layers: usize) -> Self {
        Self(layers)
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Where compression actually happens for `variant` (`External`
    /// always compresses after the last block).
    pub fn effective(self, variant: MergerVariant, layers: usize) -> usize {
        if variant == MergerVariant::External {
            layers
        } else {
            self.0
        }
    }
}

/// Token count seen by each block `1..=L`.
pub fn shape_trace(cfg: &EncoderConfig, ip: InsertionPoint, r: CompressionRatio) -> Vec<usize> {
    let n = cfg.tokens();
    (1..=cfg.layers)
        .map(|layer| if layer <= ip.get() { n } else { n / r.area() })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

const BLOCK_TENSORS: usize = 16;
const STEM_TENSORS: usize = 3;

impl BlockParams {
    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng, random_affine: bool) -> Self {
        let (d, m) = (cfg.width, cfg.mlp_width);
        let sq = glorot(d, d);
        let vec_init = |rng: &mut ChaCha8Rng, n: usize, base: f64| {
            if random_affine {
                Tensor::uniform(&[n], 0.3, rng).map(|v| v + base)
            } else {
                Tensor::filled(&[n], base)
            }
        };
        Self {
            ln1_gain: vec_init(rng, d, 1.0),
            ln1_bias: vec_init(rng, d, 0.0),
            wq: Tensor::uniform(&[d, d], sq, rng),
            bq: vec_init(rng, d, 0.0),
            wk: Tensor::uniform(&[d, d], sq, rng),
            bk: vec_init(rng, d, 0.0),
            wv: Tensor::uniform(&[d, d], sq, rng),
            bv: vec_init(rng, d, 0.0),
            wo: Tensor::uniform(&[d, d], sq, rng),
            bo: vec_init(rng, d, 0.0),
            ln2_gain: vec_init(rng, d, 1.0),
            ln2_bias: vec_init(rng, d, 0.0),
            fc1_w: Tensor::uniform(&[d, m], glorot(d, m), rng),
            fc1_b: vec_init(rng, m, 0.0),
            fc2_w: Tensor::uniform(&[m, d], glorot(m, d), rng),
            fc2_b: vec_init(rng, d, 0.0),
        }
    }

    pub fn tensors(&self) -> [&Tensor; BLOCK_TENSORS] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    fn from_tensors(mut it: impl Iterator<Item = Tensor>) -> Self {
        let mut next = || it.next().expect("block tensor list too short");
        Self {
            ln1_gain: next(),
            ln1_bias: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            fc1_w: next(),
            fc1_b: next(),
            fc2_w: next(),
            fc2_b: next(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    /// Learned positional embedding, added once after the patch projection.
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub merger: PmlParams,
}

impl EncoderParams {
    /// Glorot-uniform matrices, unit norm gains, zero biases and a merger
    /// from [`pml::init_params`].
    pub fn init(cfg: &EncoderConfig, r: CompressionRatio, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pd, d) = (cfg.patch_dim(), cfg.width);
        let patch_w = Tensor::uniform(&[pd, d], glorot(pd, d), &mut rng);
        let pos = Tensor::uniform(&[cfg.tokens(), d], 0.1, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams::init(cfg, &mut rng, false))
            .collect();
        let merger = pml::init_params(d, r, cfg.merger_hidden(r), seed.wrapping_add(1))?;
        Ok(Self {
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            pos,
            blocks,
            merger,
        })
    }

    /// Every tensor random, including biases, gains and the merger's second
    /// layer. Used where an all-zero parameter would hide a gradient path.
    pub fn random(cfg: &EncoderConfig, r: CompressionRatio, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pd, d) = (cfg.patch_dim(), cfg.width);
        let patch_w = Tensor::uniform(&[pd, d], glorot(pd, d), &mut rng);
        let patch_b = Tensor::uniform(&[d], 0.3, &mut rng);
        let pos = Tensor::uniform(&[cfg.tokens(), d], 0.3, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams::init(cfg, &mut rng, true))
            .collect();
        let merger = PmlParams::random(d, r, cfg.merger_hidden(r), seed.wrapping_add(1));
        Ok(Self {
            patch_w,
            patch_b,
            pos,
            blocks,
            merger,
        })
    }

    /// Stem, blocks, then the four merger tensors.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = vec![self.patch_w.clone(), self.patch_b.clone(), self.pos.clone()];
        for b in &self.blocks {
            out.extend(b.tensors().into_iter().cloned());
        }
        out.extend(self.merger.tensors().into_iter().cloned());
        out
    }

    pub fn from_tensors(tensors: Vec<Tensor>, layers: usize, r: CompressionRatio) -> Result<Self> {
        if tensors.len() != STEM_TENSORS + layers * BLOCK_TENSORS + 4 {
            return Err(Error::Config(format!(
                "expected {} tensors for {layers} layers, got {}",
                STEM_TENSORS + layers * BLOCK_TENSORS + 4,
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let patch_w = it.next().unwrap();
        let patch_b = it.next().unwrap();
        let pos = it.next().unwrap();
        let blocks = (0..layers)
            .map(|_| BlockParams::from_tensors(it.by_ref().take(BLOCK_TENSORS)))
            .collect();
        let rest: Vec<Tensor> = it.collect();
        let [w1, b1, w2, b2]: [Tensor; 4] = rest.try_into().unwrap();
        Ok(Self {
            patch_w,
            patch_b,
            pos,
            blocks,
            merger: PmlParams::from_tensors(r, w1, b1, w2, b2)?,
        })
    }

    /// Registers all weights. `encoder_grad` covers the stem and blocks,
    /// `merger_grad` the merger.
    pub fn register(
        &self,
        tape: &mut GradTape,
        encoder_grad: bool,
        merger_grad: bool,
    ) -> EncoderVars {
        let mut vars = Vec::new();
        for (i, t) in self.to_tensors().into_iter().enumerate() {
            let is_merger = i >= STEM_TENSORS + self.blocks.len() * BLOCK_TENSORS;
            let grad = if is_merger { merger_grad } else { encoder_grad };
            vars.push(tape.leaf(t.with_grad(grad)));
        }
        EncoderVars::from_slice(&vars, self.blocks.len())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    ln1_gain: Var,
    ln1_bias: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
}

impl BlockVars {
    fn from_slice(v: &[Var]) -> Self {
        Self {
            ln1_gain: v[0],
            ln1_bias: v[1],
            wq: v[2],
            bq: v[3],
            wk: v[4],
            bk: v[5],
            wv: v[6],
            bv: v[7],
            wo: v[8],
            bo: v[9],
            ln2_gain: v[10],
            ln2_bias: v[11],
            fc1_w: v[12],
            fc1_b: v[13],
            fc2_w: v[14],
            fc2_b: v[15],
        }
    }

    pub fn register(block: &BlockParams, tape: &mut GradTape, grad: bool) -> Self {
        let vars: Vec<Var> = block
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone().with_grad(grad)))
            .collect();
        Self::from_slice(&vars)
    }
}

/// Encoder weights recorded on a tape.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub merger: PmlVars,
}

impl EncoderVars {
    /// Rebuilds the handles from the [`EncoderParams::to_tensors`] order.
    pub fn from_slice(vars: &[Var], layers: usize) -> Self {
        let blocks = (0..layers)
            .map(|l| {
                let start = STEM_TENSORS + l * BLOCK_TENSORS;
                BlockVars::from_slice(&vars[start..start + BLOCK_TENSORS])
            })
            .collect();
        let m = STEM_TENSORS + layers * BLOCK_TENSORS;
        Self {
            patch_w: vars[0],
            patch_b: vars[1],
            pos: vars[2],
            blocks,
            merger: PmlVars::from_slice(&vars[m..m + 4]),
        }
    }
}

/// Gather index turning an `[E x E x 3]` image into `[N x p²·3]` patch rows,
/// patches in row-major grid order, each flattened as (row, col, channel).
pub fn patch_index(cfg: &EncoderConfig) -> Vec<usize> {
    let (p, e, g) = (cfg.patch, cfg.image_edge, cfg.grid_edge());
    let mut index = Vec::with_capacity(e * e * IMAGE_CHANNELS);
    for gi in 0..g {
        for gj in 0..g {
            for py in 0..p {
                for px in 0..p {
                    let pixel = (gi * p + py) * e + gj * p + px;
                    index.extend((0..IMAGE_CHANNELS).map(|c| pixel * IMAGE_CHANNELS + c));
                }
            }
        }
    }
    index
}

fn check_image(cfg: &EncoderConfig, shape: &[usize]) -> Result<()> {
    if shape != [cfg.image_edge, cfg.image_edge, IMAGE_CHANNELS] {
        return Err(Error::Config(format!(
            "image shape {shape:?} does not match configured edge {} with {IMAGE_CHANNELS} channels",
            cfg.image_edge
        )));
    }
    Ok(())
}

/// Patch projection without the positional embedding.
pub fn patch_embed_tape(
    tape: &mut GradTape,
    image: Var,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<GridVar> {
    check_image(cfg, tape.shape(image))?;
    let index: Arc<[usize]> = patch_index(cfg).into();
    let patches = tape.gather(image, index, &[cfg.tokens(), cfg.patch_dim()])?;
    let tokens = tape.affine(patches, vars.patch_w, vars.patch_b)?;
    Ok(GridVar {
        tokens,
        height: cfg.grid_edge(),
        width: cfg.grid_edge(),
        channels: cfg.width,
    })
}

/// One pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
pub fn encoder_block_tape(
    tape: &mut GradTape,
    g: GridVar,
    b: &BlockVars,
    cfg: &EncoderConfig,
) -> Result<GridVar> {
    if g.channels != cfg.width {
        return Err(Error::dim(
            "encoder_block",
            &[g.token_count(), g.channels],
            &[cfg.width],
        ));
    }
    let x = g.tokens;
    let h = tape.layer_norm(x, b.ln1_gain, b.ln1_bias, LN_EPS)?;
    let q = tape.affine(h, b.wq, b.bq)?;
    let k = tape.affine(h, b.wk, b.bk)?;
    let v = tape.affine(h, b.wv, b.bv)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_last_axis(scores);
        heads.push(tape.matmul(attn, vh)?);
    }
    let o = tape.concat_cols(&heads)?;
    let o = tape.affine(o, b.wo, b.bo)?;
    let x = tape.add(x, o)?;

    let h = tape.layer_norm(x, b.ln2_gain, b.ln2_bias, LN_EPS)?;
    let h = tape.affine(h, b.fc1_w, b.fc1_b)?;
    let h = tape.gelu(h);
    let h = tape.affine(h, b.fc2_w, b.fc2_b)?;
    let tokens = tape.add(x, h)?;
    Ok(GridVar { tokens, ..g })
}

fn compress(
    tape: &mut GradTape,
    g: GridVar,
    vars: &EncoderVars,
    r: CompressionRatio,
    variant: MergerVariant,
) -> Result<GridVar> {
    r.check_divides(g.height, g.width)?;
    let variant = if variant == MergerVariant::External {
        MergerVariant::PmlWithResidual
    } else {
        variant
    };
    merge_forward_tape(tape, g, Some(&vars.merger), r, variant)
}

/// Runs blocks `range` (zero-based) on `g`.
pub fn run_blocks_tape(
    tape: &mut GradTape,
    mut g: GridVar,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    range: std::ops::Range<usize>,
    trace: &mut Vec<usize>,
) -> Result<GridVar> {
    for l in range {
        trace.push(g.token_count());
        g = encoder_block_tape(tape, g, &vars.blocks[l], cfg)?;
    }
    Ok(g)
}

/// Stem output: patch projection plus positional embedding.
pub fn stem_tape(
    tape: &mut GradTape,
    image: Var,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<GridVar> {
    let g = patch_embed_tape(tape, image, vars, cfg)?;
    let tokens = tape.add(g.tokens, vars.pos)?;
    Ok(GridVar { tokens, ..g })
}

/// Full encoder on the tape: blocks `1..=k` at full resolution, one merge,
/// blocks `k+1..=L` on the compressed grid. `trace` receives the token
/// count seen by each block. A ratio of 1 skips the merge entirely.
#[allow(clippy::too_many_arguments)]
pub fn encode_tape(
    tape: &mut GradTape,
    image: Var,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    ip: InsertionPoint,
    r: CompressionRatio,
    variant: MergerVariant,
    trace: &mut Vec<usize>,
) -> Result<GridVar> {
    if ip.get() > cfg.layers {
        return Err(Error::Config(format!(
            "insertion point {} exceeds layer count {}",
            ip.get(),
            cfg.layers
        )));
    }
    let g = stem_tape(tape, image, vars, cfg)?;
    if r.is_identity() {
        return run_blocks_tape(tape, g, vars, cfg, 0..cfg.layers, trace);
    }
    let k = ip.effective(variant, cfg.layers);
    let g = run_blocks_tape(tape, g, vars, cfg, 0..k, trace)?;
    let g = compress(tape, g, vars, r, variant)?;
    run_blocks_tape(tape, g, vars, cfg, k..cfg.layers, trace)
}

pub fn patch_embed(
    image: &Tensor,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<TokenGrid> {
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape, false, false);
    let img = tape.constant(image.clone());
    let g = patch_embed_tape(&mut tape, img, &vars, cfg)?;
    TokenGrid::from_tokens(g.height, g.width, tape.value(g.tokens))
}

pub fn encoder_block(g: &TokenGrid, block: &BlockParams, cfg: &EncoderConfig) -> Result<TokenGrid> {
    let mut tape = GradTape::new();
    let vars = BlockVars::register(block, &mut tape, false);
    let tokens = tape.constant(g.to_tokens());
    let gv = GridVar {
        tokens,
        height: g.height(),
        width: g.width(),
        channels: g.channels(),
    };
    let out = encoder_block_tape(&mut tape, gv, &vars, cfg)?;
    TokenGrid::from_tokens(out.height, out.width, tape.value(out.tokens))
}

/// Output grid plus the per-block token counts actually observed.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeOutput {
    pub grid: TokenGrid,
    pub trace: Vec<usize>,
}

pub fn encode_traced(
    image: &Tensor,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    ip: InsertionPoint,
    r: CompressionRatio,
    variant: MergerVariant,
) -> Result<EncodeOutput> {
    cfg.validate()?;
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape, false, false);
    let img = tape.constant(image.clone());
    let mut trace = Vec::with_capacity(cfg.layers);
    let out = encode_tape(&mut tape, img, &vars, cfg, ip, r, variant, &mut trace)?;
    Ok(EncodeOutput {
        grid: TokenGrid::from_tokens(out.height, out.width, tape.value(out.tokens))?,
        trace,
    })
}

pub fn encode(
    image: &Tensor,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    ip: InsertionPoint,
    r: CompressionRatio,
    variant: MergerVariant,
) -> Result<TokenGrid> {
    encode_traced(image, params, cfg, ip, r, variant).map(|o| o.grid)
}

/// Deterministic random image with values in `[-1, 1]`.
pub fn random_image(cfg: &EncoderConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(
        &[cfg.image_edge, cfg.image_edge, IMAGE_CHANNELS],
        1.0,
        &mut rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gelu_scalar;

    fn ratio(r: usize) -> CompressionRatio {
        CompressionRatio::new(r).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::tiny().validate().is_ok());
        assert!(EncoderConfig::new(2, 8, 3, 2, 8).validate().is_err());
        assert!(EncoderConfig::new(2, 8, 2, 3, 8).validate().is_err());
        assert!(EncoderConfig::new(0, 8, 2, 2, 8).validate().is_err());
        assert_eq!(EncoderConfig::tiny().tokens(), 16);
    }

    #[test]
    fn insertion_points() {
        assert_eq!(InsertionPoint::from_fraction(0.25, 12).unwrap().get(), 3);
        assert_eq!(InsertionPoint::from_fraction(1.0, 12).unwrap().get(), 12);
        assert_eq!(
            InsertionPoint::from_fraction(1.0 / 12.0, 4).unwrap().get(),
            1
        );
        assert_eq!(
            InsertionPoint::from_fraction(1.0 / 12.0, 24).unwrap().get(),
            2
        );
        assert!(InsertionPoint::from_fraction(0.0, 12).is_err());
        assert!(InsertionPoint::from_fraction(1.5, 12).is_err());
        assert!(InsertionPoint::new(5, 4).is_err());
    }

    #[test]
    fn shape_trace_examples() {
        let cfg = EncoderConfig::new(24, 64, 4, 14, 336);
        assert_eq!(cfg.tokens(), 576);
        let t = shape_trace(&cfg, InsertionPoint::new(6, 24).unwrap(), ratio(2));
        assert_eq!(t, [vec![576; 6], vec![144; 18]].concat());
        assert_eq!(
            shape_trace(&cfg, InsertionPoint::after_stack(24), ratio(2)),
            vec![576; 24]
        );
        assert_eq!(
            shape_trace(&cfg, InsertionPoint::new(3, 24).unwrap(), ratio(1)),
            vec![576; 24]
        );
        assert_eq!(
            shape_trace(&cfg, InsertionPoint::new(0, 24).unwrap(), ratio(2)),
            vec![144; 24]
        );
    }

    #[test]
    fn patch_embed_shapes_and_zero_image() {
        let cfg = EncoderConfig::new(1, 8, 2, 4, 8);
        let params = EncoderParams::init(&cfg, ratio(2), 1).unwrap();
        let g = patch_embed(&Tensor::zeros(&[8, 8, 3]), &params, &cfg).unwrap();
        assert_eq!((g.height(), g.width(), g.channels()), (2, 2, 8));
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(patch_embed(&Tensor::zeros(&[4, 4, 3]), &params, &cfg).is_err());
    }

    #[test]
    fn patch_embed_matches_slicing_oracle() {
        let cfg = EncoderConfig::new(1, 6, 2, 2, 6);
        let params = EncoderParams::random(&cfg, ratio(1), 3).unwrap();
        let image = random_image(&cfg, 4);
        let g = patch_embed(&image, &params, &cfg).unwrap();
        let (p, e, d) = (2, 6, 6);
        for gi in 0..3 {
            for gj in 0..3 {
                let mut patch = Vec::new();
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..3 {
                            patch.push(image.data()[((gi * p + py) * e + gj * p + px) * 3 + c]);
                        }
                    }
                }
                for o in 0..d {
                    let mut acc = params.patch_b.data()[o];
                    for (q, x) in patch.iter().enumerate() {
                        acc += x * params.patch_w.data()[q * d + o];
                    }
                    assert!((g.get(gi, gj, o) - acc).abs() <= 1e-12);
                }
            }
        }
    }

    fn zero_outputs(block: &mut BlockParams) {
        for t in [
            &mut block.wo,
            &mut block.bo,
            &mut block.fc2_w,
            &mut block.fc2_b,
        ] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_output_weights_make_block_identity() {
        let cfg = EncoderConfig::tiny();
        let mut params = EncoderParams::random(&cfg, ratio(2), 5).unwrap();
        zero_outputs(&mut params.blocks[0]);
        let g = patch_embed(&random_image(&cfg, 1), &params, &cfg).unwrap();
        assert_eq!(encoder_block(&g, &params.blocks[0], &cfg).unwrap(), g);
    }

    fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .zip(g.iter().zip(b))
            .map(|(v, (g, b))| (v - mean) / (var + LN_EPS).sqrt() * g + b)
            .collect()
    }

    fn row_affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let out = b.len();
        (0..out)
            .map(|o| {
                b.data()[o]
                    + x.iter()
                        .enumerate()
                        .map(|(i, v)| v * w.data()[i * out + o])
                        .sum::<f64>()
            })
            .collect()
    }

    fn block_oracle(tokens: &[Vec<f64>], b: &BlockParams, heads: usize) -> Vec<Vec<f64>> {
        let d = tokens[0].len();
        let dh = d / heads;
        let h: Vec<Vec<f64>> = tokens
            .iter()
            .map(|t| layer_norm_row(t, b.ln1_gain.data(), b.ln1_bias.data()))
            .collect();
        let q: Vec<_> = h.iter().map(|t| row_affine(t, &b.wq, &b.bq)).collect();
        let k: Vec<_> = h.iter().map(|t| row_affine(t, &b.wk, &b.bk)).collect();
        let v: Vec<_> = h.iter().map(|t| row_affine(t, &b.wv, &b.bv)).collect();
        let n = tokens.len();
        let mut attn_out = vec![vec![0.0; d]; n];
        for head in 0..heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for j in 0..n {
                    let w = (scores[j] - max).exp() / z;
                    for c in cols.clone() {
                        attn_out[i][c] += w * v[j][c];
                    }
                }
            }
        }
        tokens
            .iter()
            .zip(&attn_out)
            .map(|(x, a)| {
                let o = row_affine(a, &b.wo, &b.bo);
                let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
                let h2 = layer_norm_row(&x1, b.ln2_gain.data(), b.ln2_bias.data());
                let m: Vec<f64> = row_affine(&h2, &b.fc1_w, &b.fc1_b)
                    .into_iter()
                    .map(gelu_scalar)
                    .collect();
                let m = row_affine(&m, &b.fc2_w, &b.fc2_b);
                x1.iter().zip(&m).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    #[test]
    fn block_matches_per_head_oracle() {
        let cfg = EncoderConfig::new(1, 8, 2, 2, 4);
        let params = EncoderParams::random(&cfg, ratio(2), 9).unwrap();
        let g = patch_embed(&random_image(&cfg, 2), &params, &cfg).unwrap();
        assert_eq!(g.token_count(), 4);
        let out = encoder_block(&g, &params.blocks[0], &cfg).unwrap();
        let rows: Vec<Vec<f64>> = g.data().chunks(8).map(<[f64]>::to_vec).collect();
        let expected = block_oracle(&rows, &params.blocks[0], 2);
        for (a, b) in out.data().chunks(8).zip(&expected) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let cfg = EncoderConfig::new(1, 4, 2, 2, 2);
        let params = EncoderParams::random(&cfg, ratio(1), 13).unwrap();
        let g = patch_embed(&random_image(&cfg, 3), &params, &cfg).unwrap();
        assert_eq!(g.token_count(), 1);
        let b = &params.blocks[0];
        let x = g.data();
        let h = layer_norm_row(x, b.ln1_gain.data(), b.ln1_bias.data());
        let v = row_affine(&h, &b.wv, &b.bv);
        let o = row_affine(&v, &b.wo, &b.bo);
        let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let h2 = layer_norm_row(&x1, b.ln2_gain.data(), b.ln2_bias.data());
        let m: Vec<f64> = row_affine(&h2, &b.fc1_w, &b.fc1_b)
            .into_iter()
            .map(gelu_scalar)
            .collect();
        let m = row_affine(&m, &b.fc2_w, &b.fc2_b);
        let out = encoder_block(&g, b, &cfg).unwrap();
        for ((a, x1), m) in out.data().iter().zip(&x1).zip(&m) {
            assert!((a - (x1 + m)).abs() <= 1e-12);
        }
    }

    #[test]
    fn encode_trace_and_token_counts() {
        let cfg = EncoderConfig::new(4, 8, 2, 2, 8);
        let params = EncoderParams::init(&cfg, ratio(2), 1).unwrap();
        let image = random_image(&cfg, 1);
        let out = encode_traced(
            &image,
            &params,
            &cfg,
            InsertionPoint::new(2, 4).unwrap(),
            ratio(2),
            MergerVariant::PmlWithResidual,
        )
        .unwrap();
        assert_eq!(out.trace, vec![16, 16, 4, 4]);
        assert_eq!(out.grid.token_count(), 4);
        for k in 0..=4 {
            let ip = InsertionPoint::new(k, 4).unwrap();
            let out =
                encode_traced(&image, &params, &cfg, ip, ratio(2), MergerVariant::PmlOnly).unwrap();
            assert_eq!(out.trace, shape_trace(&cfg, ip, ratio(2)));
            assert_eq!(out.grid.token_count(), 4);
        }
    }

    #[test]
    fn ratio_one_skips_the_merge() {
        let cfg = EncoderConfig::tiny();
        let params = EncoderParams::random(&cfg, ratio(1), 3).unwrap();
        let image = random_image(&cfg, 5);
        let a = encode(
            &image,
            &params,
            &cfg,
            InsertionPoint::new(1, 2).unwrap(),
            ratio(1),
            MergerVariant::ResidualOnly,
        )
        .unwrap();
        let b = encode(
            &image,
            &params,
            &cfg,
            InsertionPoint::after_stack(2),
            ratio(1),
            MergerVariant::PmlWithResidual,
        )
        .unwrap();
        assert_eq!(a.token_count(), 16);
        assert_eq!(a, b);
    }

    #[test]
    fn external_ignores_insertion_point() {
        let cfg = EncoderConfig::tiny();
        let params = EncoderParams::random(&cfg, ratio(2), 3).unwrap();
        let image = random_image(&cfg, 5);
        let at_end = encode(
            &image,
            &params,
            &cfg,
            InsertionPoint::after_stack(2),
            ratio(2),
            MergerVariant::PmlWithResidual,
        )
        .unwrap();
        for k in 0..=2 {
            let ext = encode(
                &image,
                &params,
                &cfg,
                InsertionPoint::new(k, 2).unwrap(),
                ratio(2),
                MergerVariant::External,
            )
            .unwrap();
            assert_eq!(ext, at_end);
        }
    }

    #[test]
    fn encode_errors() {
        let cfg = EncoderConfig::tiny();
        let params = EncoderParams::init(&cfg, ratio(3), 1).unwrap();
        let image = random_image(&cfg, 1);
        let err = encode(
            &image,
            &params,
            &cfg,
            InsertionPoint::new(1, 2).unwrap(),
            ratio(3),
            MergerVariant::ResidualOnly,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divisibility { .. }));
        let err = encode(
            &image,
            &params,
            &cfg,
            InsertionPoint(3),
            ratio(2),
            MergerVariant::ResidualOnly,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = EncoderConfig::tiny();
        let run = || {
            let params = EncoderParams::init(&cfg, ratio(2), 77).unwrap();
            encode(
                &random_image(&cfg, 78),
                &params,
                &cfg,
                InsertionPoint::new(1, 2).unwrap(),
                ratio(2),
                MergerVariant::PmlWithResidual,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn tensor_list_round_trip() {
        let cfg = EncoderConfig::tiny();
        let params = EncoderParams::random(&cfg, ratio(2), 3).unwrap();
        let back = EncoderParams::from_tensors(params.to_tensors(), 2, ratio(2)).unwrap();
        assert_eq!(back, params);
        assert!(EncoderParams::from_tensors(params.to_tensors(), 3, ratio(2)).is_err());
    }
}
