//! Training loop: epoch-shuffled mini-batches, per-tensor Adam, loss curve.

use super::{batch_loss_and_grads, ModelError, Result, TinyVlm};
use crate::conflictgen::EncodedPrompt;
use crate::numerics::{adam_step, AdamState, Rng};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn new(epochs: usize, batch_size: usize, lr: f32, seed: u64) -> Self {
        TrainSchedule {
            epochs,
            batch_size,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Batch-mean loss per optimizer step.
    pub loss_curve: Vec<f32>,
    pub final_train_accuracy: f64,
}

/// Train in place. Deterministic given the schedule seed; zero epochs
/// leaves the model untouched.
pub fn train(
    model: &mut TinyVlm,
    dataset: &[(EncodedPrompt, u32)],
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(ModelError::Config("training dataset is empty".into()));
    }
    let rng = Rng::new(schedule.seed);
    let mut states: Vec<AdamState> = model
        .params
        .tensors()
        .iter()
        .map(|(_, m)| {
            let mut st = AdamState::new(m.data().len(), schedule.lr);
            st.beta1 = schedule.beta1;
            st.beta2 = schedule.beta2;
            st.eps = schedule.eps;
            st
        })
        .collect();

    let mut loss_curve = Vec::new();
    let mut step = 0usize;
    for epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        rng.substream_indexed("train_epoch", epoch as u64)
            .shuffle(&mut order);
        for chunk in order.chunks(schedule.batch_size.max(1)) {
            let batch: Vec<(&EncodedPrompt, u32)> =
                chunk.iter().map(|&i| (&dataset[i].0, dataset[i].1)).collect();
            let (loss, grads) = batch_loss_and_grads(model, &batch)?;
            if !loss.is_finite() {
                return Err(ModelError::Diverged { step });
            }
            loss_curve.push(loss as f32);
            for (((_, p), (_, g)), st) in model
                .params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(states.iter_mut())
            {
                adam_step(p, g, st)?;
            }
            step += 1;
        }
    }

    let mut correct = 0usize;
    for (prompt, label) in dataset {
        let pred = model.predict_answer(prompt, &[])?;
        if model.cfg.answer_token(pred.class_id) == *label {
            correct += 1;
        }
    }
    Ok(TrainReport {
        loss_curve,
        final_train_accuracy: correct as f64 / dataset.len() as f64,
    })
}
