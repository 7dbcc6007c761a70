use crate::losses::LossFamily;
use crate::trainer::TrainConfig;

/// Learning rate for optimizer step `step` (0-based).
///
/// During the first `warmup_epochs` the rate ramps linearly per step from
/// `lr / W` to `lr`, `W` being the number of warmup steps. Afterwards it is
/// piecewise constant, multiplied by `decay_factor` once the epoch index
/// (0-based) reaches each entry of `decay_epochs`. Focal loss additionally
/// scales everything by `focal_lr_multiplier`.
pub fn lr_at(step: usize, steps_per_epoch: usize, config: &TrainConfig) -> f64 {
    let steps_per_epoch = steps_per_epoch.max(1);
    let mut lr = config.lr;
    if config.loss.family == LossFamily::Focal {
        lr *= config.focal_lr_multiplier;
    }
    let epoch = step / steps_per_epoch;
    for &d in &config.decay_epochs {
        if epoch >= d {
            lr *= config.decay_factor;
        }
    }
    let warmup_steps = config.warmup_epochs * steps_per_epoch;
    if step < warmup_steps {
        lr *= (step + 1) as f64 / warmup_steps as f64;
    }
    lr
}
