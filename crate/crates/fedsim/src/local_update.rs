//! Client-side training.
//!
//! `local_alt` performs one alternating epoch: tau SGD steps on the
//! personalized block with the global block frozen, then tau steps on the
//! global block with the freshly updated personalized block frozen. Both
//! passes replay the same batch sequence in the same order.
//!
//! `grad_select` wraps several such epochs and then grows the client's mask:
//! the global positions whose values moved the most across the whole call
//! are the ones promoted to personalized. Selection looks at parameter
//! displacement rather than a single gradient, so it integrates signal over
//! every batch of the round.

use rand_chacha::ChaCha8Rng;

use crate::data::{self, Dataset};
use crate::error::{FedError, Result};
use crate::mask::{self, BinaryMask, SelectionRule};
use crate::model::{self, Batch, ParamVector};

/// Mask growth schedule. `p` is the fraction of currently global positions
/// promoted per round, `alpha` the personalized fraction at which growth
/// stops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthConfig {
    pub p: f64,
    pub alpha: f64,
    pub rule: SelectionRule,
}

/// Per-round local training settings shared by all clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    /// Local epochs per round.
    pub epochs: usize,
    pub batch_size: usize,
    /// Steps per block pass; always `ceil(n / batch_size)` so one pass is
    /// one sweep over the client's training data.
    pub tau: usize,
    /// Learning rate for the personalized block.
    pub gamma_v: f64,
    /// Learning rate for the global block.
    pub gamma_u: f64,
    /// 0 disables momentum and reproduces plain SGD exactly.
    pub momentum: f64,
    /// `None` freezes the mask (fixed-partition training).
    pub growth: Option<GrowthConfig>,
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.tau == 0 || self.batch_size == 0 {
            return Err(FedError::Config(
                "epochs, tau, and batch size must be positive".into(),
            ));
        }
        if self.gamma_v < 0.0 || self.gamma_u < 0.0 {
            return Err(FedError::Config(
                "learning rates must be nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FedError::Config("momentum must lie in [0, 1)".into()));
        }
        if let Some(g) = &self.growth {
            if !(g.p > 0.0 && g.p <= 1.0) {
                return Err(FedError::Config(
                    "growth fraction p must lie in (0, 1]".into(),
                ));
            }
            if !(0.0..=1.0).contains(&g.alpha) {
                return Err(FedError::Config(
                    "target fraction alpha must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Run tau masked SGD steps over `batches` on one block.
fn block_pass(
    theta: &mut ParamVector,
    active: &BinaryMask,
    batches: &[Batch],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if momentum == 0.0 {
        for batch in batches {
            let grad = model::gradient(theta, batch)?;
            model::masked_step_in_place(theta.values_mut(), grad.values(), active, lr);
        }
        return Ok(());
    }
    let mut velocity = vec![0.0; theta.dim()];
    for batch in batches {
        let grad = model::gradient(theta, batch)?;
        for (v, g) in velocity.iter_mut().zip(grad.values()) {
            *v = momentum * *v + g;
        }
        for (i, bit) in active.bits().iter().enumerate() {
            if *bit {
                theta.values_mut()[i] -= lr * velocity[i];
            }
        }
    }
    Ok(())
}

/// One alternating epoch: personalized pass first, then the global pass over
/// the same batches. Either pass is skipped outright when its block is
/// empty, which leaves those parameters bit-identical.
pub fn local_alt(
    theta: &ParamVector,
    mask: &BinaryMask,
    batches: &[Batch],
    cfg: &LocalConfig,
) -> Result<ParamVector> {
    if batches.is_empty() {
        return Err(FedError::Input("local_alt needs at least one batch".into()));
    }
    assert_eq!(
        batches.len(),
        cfg.tau,
        "batch sequence length must equal tau"
    );
    assert_eq!(
        mask.len(),
        theta.dim(),
        "mask length must match parameter count"
    );

    let mut out = theta.clone();
    if mask.popcount() > 0 {
        block_pass(&mut out, mask, batches, cfg.gamma_v, cfg.momentum)?;
    }
    let u_mask = mask.invert();
    if u_mask.popcount() > 0 {
        block_pass(&mut out, &u_mask, batches, cfg.gamma_u, cfg.momentum)?;
    }
    Ok(out)
}

/// Train for `cfg.epochs` alternating epochs, re-batching from the client's
/// RNG each epoch, then grow the mask by promoting the global positions with
/// the largest total displacement. Growth is skipped once the personalized
/// fraction has reached `alpha`; the promoted positions take effect next
/// round (the returned parameters were trained under the old mask).
pub fn grad_select(
    theta: &ParamVector,
    mask: &BinaryMask,
    train: &Dataset,
    rng: &mut ChaCha8Rng,
    cfg: &LocalConfig,
) -> Result<(ParamVector, BinaryMask)> {
    cfg.validate()?;
    let u_mask = mask.invert();
    let u_before: Vec<f64> = theta.values().to_vec();

    let mut current = theta.clone();
    for _ in 0..cfg.epochs {
        let epoch_batches = data::batches(train, cfg.batch_size, rng)?;
        current = local_alt(&current, mask, &epoch_batches, cfg)?;
    }

    let mut new_mask = mask.clone();
    if let Some(growth) = &cfg.growth {
        if mask.personalized_fraction() < growth.alpha {
            let delta: Vec<f64> = current
                .values()
                .iter()
                .zip(&u_before)
                .enumerate()
                .map(|(i, (after, before))| {
                    if u_mask.get(i) {
                        (after - before).abs()
                    } else {
                        0.0
                    }
                })
                .collect();
            let grown = mask::select_p(&delta, &u_mask, growth.p, growth.rule);
            new_mask = mask.or(&grown);
        }
    }
    Ok((current, new_mask))
}
