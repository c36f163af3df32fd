//! Next-token training: schedule, optimizer, corpus, and learning-rate sweeps.

mod adam;
mod config;
mod corpus;
mod record;
mod sweep;

pub use adam::{adam_step, global_grad_norm, AdamState};
pub use config::{lr_at, TrainConfig};
pub use corpus::{Batches, Corpus, HOLDOUT_FRACTION};
pub use record::{count_spikes, RunRecord, RunSummary, StepRecord, FINAL_LOSS_WINDOW, SPIKE_FACTOR, SPIKE_WINDOW};
pub use sweep::{lr_sweep, SweepCell, SweepTable};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::scalar::Scalar;

/// Loss at this step index is the divergence reference.
pub const DIVERGENCE_REFERENCE_STEP: usize = 10;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Called with the current weights before the update at each step and once
/// more after the last step.
pub trait TrainHook<T: Scalar> {
    fn on_step(&mut self, step: usize, model: &ModelState<T>) -> Result<()>;
}

impl<T: Scalar, F: FnMut(usize, &ModelState<T>) -> Result<()>> TrainHook<T> for F {
    fn on_step(&mut self, step: usize, model: &ModelState<T>) -> Result<()> {
        self(step, model)
    }
}

/// Hook that does nothing.
pub fn no_hook<T: Scalar>(_: usize, _: &ModelState<T>) -> Result<()> {
    Ok(())
}

/// Trains `model` in place for `config.total_steps` steps.
///
/// A non-finite loss or gradient, or a loss above ten times the step-10
/// loss, marks the run diverged and stops it.
pub fn train<T: Scalar>(
    model: &mut ModelState<T>,
    corpus: &Corpus,
    config: &TrainConfig,
    hook: &mut dyn TrainHook<T>,
) -> Result<RunRecord> {
    config.validate()?;
    model.config.validate()?;
    if config.seq_len > model.config.seq_len {
        return Err(Error::Config(format!(
            "train seq_len {} exceeds model context {}",
            config.seq_len, model.config.seq_len
        )));
    }
    let mut batches = corpus.batches(config.seed, config.batch_size, config.seq_len)?;
    let mut adam = AdamState::new(model);
    let mut record = RunRecord {
        strategy: model.strategy,
        model: model.config,
        train: *config,
        precision: T::NAME.to_string(),
        steps: Vec::with_capacity(config.total_steps),
        diverged: false,
        diverged_at: None,
    };
    let mut reference = None;
    for step in 0..config.total_steps {
        hook.on_step(step, model)?;
        let batch = batches.next_batch();
        let loss = model.forward_backward(&batch)?;
        let grad_norm = global_grad_norm(model)?;
        let lr = lr_at(step, config)?;
        record.steps.push(StepRecord {
            step,
            lr,
            train_loss: loss,
            grad_norm,
        });
        if step == DIVERGENCE_REFERENCE_STEP {
            reference = Some(loss);
        }
        let blown = reference.is_some_and(|r| loss > DIVERGENCE_FACTOR * r);
        if !loss.is_finite() || !grad_norm.is_finite() || blown {
            record.diverged = true;
            record.diverged_at = Some(step);
            break;
        }
        let scale = match config.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        adam_step(&mut adam, model, lr, config, scale)?;
    }
    model.clear_grads();
    if !record.diverged {
        hook.on_step(config.total_steps, model)?;
    }
    Ok(record)
}
