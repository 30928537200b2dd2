//! Frozen-encoder training of the merger and a linear projector on a
//! synthetic reconstruction task.
//!
//! The target for each image is its patch-embedding grid average-pooled by
//! `r`, so the objective measures how much of the stem's information the
//! compressed encoder output still carries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode_tape, patch_embed, EncoderConfig, EncoderParams, InsertionPoint, IMAGE_CHANNELS,
};
use crate::error::{Error, Result};
use crate::grid::{avg_pool_oracle, CompressionRatio, TokenGrid};
use crate::pml::MergerVariant;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    ReconstructPooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub batch: usize,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.05,
            seed: 7,
            batch: 4,
            objective: Objective::ReconstructPooled,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be >= 1".into()));
        }
        // zero is allowed: it freezes everything and gives a constant trace
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Linear map from encoder width to target width, identity at init.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub w: Tensor,
    pub b: Tensor,
}

impl Projector {
    pub fn identity(width: usize) -> Self {
        Self {
            w: Tensor::identity(width),
            b: Tensor::zeros(&[width]),
        }
    }

    pub fn apply(&self, tokens: &Tensor) -> Result<Tensor> {
        tokens.matmul(&self.w)?.add_row_bias(&self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Vec<Tensor>,
    pub targets: Vec<TokenGrid>,
}

/// `n` deterministic images in `[-1, 1]` with their pooled stem targets.
pub fn synth_batch(
    seed: u64,
    n: usize,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    r: CompressionRatio,
) -> Result<Batch> {
    if n == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [cfg.image_edge, cfg.image_edge, IMAGE_CHANNELS];
    let mut images = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let data = (0..shape.iter().product())
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        let image = Tensor::new(shape.to_vec(), data)?;
        targets.push(avg_pool_oracle(&patch_embed(&image, params, cfg)?, r)?);
        images.push(image);
    }
    Ok(Batch { images, targets })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub loss: f64,
    pub pml_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss and merger gradient norm, measured before each update.
    pub steps: Vec<TrainStep>,
    /// Loss after the last update.
    pub final_loss: f64,
    pub frozen_unchanged: bool,
    /// Path of the saved merger weights, when the caller stored them.
    pub params_snapshot: Option<String>,
}

impl TrainLog {
    pub fn initial_loss(&self) -> f64 {
        self.steps[0].loss
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

struct Pass {
    loss: f64,
    merger_grads: Vec<Tensor>,
    projector_grads: Vec<Tensor>,
}

/// Mean over the batch of the per-image MSE, with gradients for merger and
/// projector only.
#[allow(clippy::too_many_arguments)]
fn forward_backward(
    params: &EncoderParams,
    projector: &Projector,
    batch: &Batch,
    cfg: &EncoderConfig,
    ip: InsertionPoint,
    r: CompressionRatio,
    variant: MergerVariant,
    with_grad: bool,
) -> Result<Pass> {
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape, false, with_grad);
    let pw = tape.leaf(projector.w.clone().with_grad(with_grad));
    let pb = tape.leaf(projector.b.clone().with_grad(with_grad));
    let mut losses: Vec<Var> = Vec::with_capacity(batch.images.len());
    for (image, target) in batch.images.iter().zip(&batch.targets) {
        let img = tape.constant(image.clone());
        let mut trace = Vec::new();
        let out = encode_tape(&mut tape, img, &vars, cfg, ip, r, variant, &mut trace)?;
        let pred = tape.affine(out.tokens, pw, pb)?;
        let tgt = tape.constant(target.to_tokens());
        losses.push(tape.mse(pred, tgt)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss_var = tape.scale(total, 1.0 / losses.len() as f64);
    let loss = tape.value(loss_var).data()[0];
    if !with_grad {
        return Ok(Pass {
            loss,
            merger_grads: Vec::new(),
            projector_grads: Vec::new(),
        });
    }
    let grads = tape.backward(loss_var)?;
    let take = |v: Var| {
        grads
            .get(v)
            .cloned()
            .expect("trainable leaf has a gradient")
    };
    Ok(Pass {
        loss,
        merger_grads: vars.merger.all().into_iter().map(take).collect(),
        projector_grads: vec![take(pw), take(pb)],
    })
}

/// Batch loss without touching gradients.
pub fn evaluate_loss(
    params: &EncoderParams,
    projector: &Projector,
    batch: &Batch,
    cfg: &EncoderConfig,
    ip: InsertionPoint,
    r: CompressionRatio,
    variant: MergerVariant,
) -> Result<f64> {
    forward_backward(params, projector, batch, cfg, ip, r, variant, false).map(|p| p.loss)
}

fn sgd(t: &mut Tensor, g: &Tensor, lr: f64) {
    t.data_mut()
        .iter_mut()
        .zip(g.data())
        .for_each(|(p, g)| *p -= lr * g);
}

/// Plain gradient descent on merger and projector for `tcfg.steps` steps
/// over one fixed batch drawn from `tcfg.seed`. Stem and block weights are
/// registered without gradients and never written.
#[allow(clippy::too_many_arguments)]
pub fn train_stage1(
    params: &mut EncoderParams,
    projector: &mut Projector,
    tcfg: &TrainConfig,
    ecfg: &EncoderConfig,
    ip: InsertionPoint,
    r: CompressionRatio,
    variant: MergerVariant,
) -> Result<TrainLog> {
    tcfg.validate()?;
    ecfg.validate()?;
    let frozen_before = frozen_tensors(params);
    let batch = synth_batch(tcfg.seed, tcfg.batch, ecfg, params, r)?;
    let mut steps = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let pass = forward_backward(params, projector, &batch, ecfg, ip, r, variant, true)?;
        if !pass.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: pass.loss,
            });
        }
        let norm = pass
            .merger_grads
            .iter()
            .map(Tensor::norm_sq)
            .sum::<f64>()
            .sqrt();
        steps.push(TrainStep {
            step,
            loss: pass.loss,
            pml_grad_norm: norm,
        });
        for (t, g) in params
            .merger
            .tensors_mut()
            .into_iter()
            .zip(&pass.merger_grads)
        {
            sgd(t, g, tcfg.learning_rate);
        }
        sgd(
            &mut projector.w,
            &pass.projector_grads[0],
            tcfg.learning_rate,
        );
        sgd(
            &mut projector.b,
            &pass.projector_grads[1],
            tcfg.learning_rate,
        );
    }
    let final_loss = evaluate_loss(params, projector, &batch, ecfg, ip, r, variant)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: tcfg.steps,
            loss: final_loss,
        });
    }
    let frozen_unchanged = bitwise_equal(&frozen_before, &frozen_tensors(params));
    Ok(TrainLog {
        steps,
        final_loss,
        frozen_unchanged,
        params_snapshot: None,
    })
}

/// Stem and block tensors, i.e. everything except the merger.
pub fn frozen_tensors(params: &EncoderParams) -> Vec<Tensor> {
    let mut all = params.to_tensors();
    all.truncate(all.len() - 4);
    all
}

pub fn bitwise_equal(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape()
                && x.data()
                    .iter()
                    .zip(y.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        })
}
