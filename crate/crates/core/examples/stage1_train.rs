//! Frozen encoder, trainable merger and projector: the reconstruction loss
//! for each merger variant over 200 plain gradient-descent steps. Without
//! the shortcut, a zero-initialised merger hands the next block constant
//! tokens and layer norm amplifies their gradients.

use laco_kit::encoder::{EncoderConfig, EncoderParams, InsertionPoint};
use laco_kit::train::{train_stage1, Projector, TrainConfig};
use laco_kit::{CompressionRatio, Error, MergerVariant};

fn main() -> laco_kit::Result<()> {
    let cfg = EncoderConfig::tiny();
    let r = CompressionRatio::new(2)?;
    let ip = InsertionPoint::new(1, cfg.layers)?;
    let tcfg = TrainConfig::default();

    for variant in [
        MergerVariant::PmlWithResidual,
        MergerVariant::PmlOnly,
        MergerVariant::ResidualOnly,
    ] {
        let mut params = EncoderParams::init(&cfg, r, tcfg.seed)?;
        let mut projector = Projector::identity(cfg.width);
        let log = match train_stage1(&mut params, &mut projector, &tcfg, &cfg, ip, r, variant) {
            Ok(log) => log,
            Err(Error::NonFiniteLoss { step, loss }) => {
                println!(
                    "{:<18} diverged: loss {loss} at step {step}",
                    variant.as_str()
                );
                continue;
            }
            Err(e) => return Err(e),
        };
        let losses = log.losses();
        let marks: Vec<String> = [0, 10, 50, 100, 199]
            .iter()
            .map(|&s| format!("{:.4}", losses[s]))
            .collect();
        println!(
            "{:<18} loss at steps 0/10/50/100/199: {}  final {:.6}  frozen unchanged: {}",
            variant.as_str(),
            marks.join(" "),
            log.final_loss,
            log.frozen_unchanged
        );
    }
    Ok(())
}
