use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{AdamW, AdamWConfig, Graph};
use crate::error::{NritError, Result};
use crate::mask::UpdateMask;
use crate::model::{ChoiceScope, MicroTransformer, TokenId, EOT};
use crate::params::Gradients;

use super::examples::TrainExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Unmasked language modelling plus binary-task fitting before attribution.
    Warmup,
    Denoise,
    NoiseFilter,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Denoise => "denoise",
            Stage::NoiseFilter => "noise-filter",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = NritError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Stage::Warmup),
            "denoise" => Ok(Stage::Denoise),
            "noise-filter" => Ok(Stage::NoiseFilter),
            other => Err(NritError::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl TrainConfig {
    /// Published settings for the two tuning stages (1e-5 for one epoch,
    /// 2e-5 for two epochs, batch 4). Warm-up has no published setting; its
    /// default here is a plain small-model recipe.
    pub fn defaults(stage: Stage) -> Self {
        let (lr, epochs, batch_size) = match stage {
            Stage::Warmup => (1e-3, 10, 8),
            Stage::Denoise => (1e-5, 1, 4),
            Stage::NoiseFilter => (2e-5, 2, 4),
        };
        TrainConfig {
            stage,
            lr,
            epochs,
            batch_size,
            seed: 0,
            weight_decay: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stage;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(NritError::Config(format!("{s}: learning rate must be positive")));
        }
        if self.epochs == 0 {
            return Err(NritError::Config(format!("{s}: epochs must be at least 1")));
        }
        if self.batch_size == 0 {
            return Err(NritError::Config(format!("{s}: batch size must be at least 1")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(NritError::Config(format!("{s}: weight decay must be non-negative")));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean example loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

fn example_grads(
    model: &MicroTransformer,
    ex: &TrainExample,
    trainable: Option<&[bool]>,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let loss = match trainable {
        Some(t) => model.sequence_loss_selected(&mut g, &ex.tokens, ex.loss_from, t)?,
        None => model.sequence_loss(&mut g, &ex.tokens, ex.loss_from)?,
    };
    let value = g.value(loss).item();
    let back = g.backward(loss)?;
    Ok((value, back.param_grads(&g)))
}

/// Mini-batch AdamW over `examples` in a seeded order reshuffled every
/// epoch. The batch gradient is the mean of per-example gradients, which
/// are computed in parallel and summed in batch order. Entries outside
/// `mask` never change.
pub fn train(
    model: &mut MicroTransformer,
    examples: &[TrainExample],
    mask: Option<&UpdateMask>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(NritError::Config(format!("{}: no training examples", cfg.stage)));
    }
    let trainable = mask.map(UpdateMask::trainable_flags);
    let mut opt = AdamW::new(cfg.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let model_ref = &*model;
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&i| example_grads(model_ref, &examples[i], trainable.as_deref()))
                .collect::<Result<_>>()?;
            let store = model.store_mut();
            let inv = 1.0 / batch.len() as f64;
            for (loss, grads) in &results {
                if !loss.is_finite() {
                    return Err(NritError::numeric(
                        format!("{} epoch {} batch {}", cfg.stage, epoch + 1, b + 1),
                        format!("loss is {loss}"),
                    ));
                }
                total += loss;
                store.accumulate(grads);
            }
            for p in store.params_mut() {
                p.gradient.data_mut().iter_mut().for_each(|g| *g *= inv);
            }
            opt.step(store, mask)?;
            log.steps += 1;
        }
        log.epoch_loss.push(total / examples.len() as f64);
    }
    Ok(log)
}

/// Mean probability of EOT as the next token after each prompt.
pub fn mean_eot_probability(model: &MicroTransformer, prompts: &[Vec<TokenId>]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(NritError::Config("no prompts to score".into()));
    }
    let probs: Vec<f64> = prompts
        .par_iter()
        .map(|p| {
            let last = p
                .len()
                .checked_sub(1)
                .ok_or_else(|| NritError::Contract("empty prompt".into()))?;
            model.choice_probability(p, last, EOT, &ChoiceScope::Vocabulary)
        })
        .collect::<Result<_>>()?;
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}
