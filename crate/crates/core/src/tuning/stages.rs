use std::collections::BTreeSet;

use crate::error::{NritError, Result};
use crate::mask::{GradientMask, UpdateMask};
use crate::model::{MicroTransformer, ParamCount, TokenId};
use crate::neuron::{NeuronId, NeuronSets};

use super::examples::TrainExample;
use super::masks::{mask_from_head, mask_from_layers, mask_from_neurons};
use super::train::{mean_eot_probability, train, Stage, TrainConfig, TrainLog};

/// Learning-rate multipliers per stage-2 mask group. Where groups overlap
/// the earlier field in declaration order wins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupScales {
    pub rel: f64,
    pub irrel: f64,
    pub shared: f64,
    pub layers: f64,
}

impl Default for GroupScales {
    fn default() -> Self {
        GroupScales {
            rel: 1.0,
            irrel: 1.0,
            shared: 1.0,
            layers: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub mask: GradientMask,
    pub count: ParamCount,
    pub log: TrainLog,
    /// Mean P(EOT) on held-out prompts before and after training (stage 1).
    pub eot_before: Option<f64>,
    pub eot_after: Option<f64>,
}

fn check_stage(cfg: &TrainConfig, expected: Stage) -> Result<()> {
    if cfg.stage != expected {
        return Err(NritError::Config(format!("{expected} stage given a {} config", cfg.stage)));
    }
    cfg.validate()
}

/// Trains only the footprints of `irrel` to emit EOT right after each
/// denoising prompt.
pub fn stage1_denoise(
    model: &mut MicroTransformer,
    irrel: &BTreeSet<NeuronId>,
    examples: &[TrainExample],
    heldout: &[Vec<TokenId>],
    cfg: &TrainConfig,
) -> Result<StageOutcome> {
    check_stage(cfg, Stage::Denoise)?;
    if irrel.is_empty() {
        return Err(NritError::Config("stage 1 needs a nonempty irrelevant neuron set".into()));
    }
    if examples.is_empty() {
        return Err(NritError::Config("stage 1 needs a nonempty denoising set".into()));
    }
    if let Some(ex) = examples.iter().find(|e| e.tokens.len() != e.loss_from + 1) {
        return Err(NritError::Contract(format!(
            "denoising targets are a single token, got {}",
            ex.tokens.len() - ex.loss_from
        )));
    }
    let mask = mask_from_neurons(model, irrel)?;
    let compiled = mask.compile(model.store(), 1.0)?;
    let before = mean_eot_probability(model, heldout)?;
    let log = train(model, examples, Some(&compiled), cfg)?;
    let after = mean_eot_probability(model, heldout)?;
    Ok(StageOutcome {
        stage: Stage::Denoise,
        count: model.count_parameters(Some(&mask))?,
        mask,
        log,
        eot_before: Some(before),
        eot_after: Some(after),
    })
}

/// Trains the union of all neuron footprints in `sets` and the full blocks
/// in `layers` on relevant-summary targets. `head` adds the final norm and
/// output head, at the layer learning rate.
pub fn stage2_noise_filter(
    model: &mut MicroTransformer,
    sets: &NeuronSets,
    layers: &[usize],
    head: bool,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    scales: GroupScales,
) -> Result<StageOutcome> {
    check_stage(cfg, Stage::NoiseFilter)?;
    if !sets.is_disjoint() {
        return Err(NritError::Contract("stage 2 neuron groups overlap".into()));
    }
    let groups = [
        (mask_from_neurons(model, &sets.rel)?, scales.rel),
        (mask_from_neurons(model, &sets.irrel)?, scales.irrel),
        (mask_from_neurons(model, &sets.shared)?, scales.shared),
        (mask_from_layers(model, layers)?, scales.layers),
        (if head { mask_from_head(model)? } else { GradientMask::empty() }, scales.layers),
    ];
    let mask = groups.iter().fold(GradientMask::empty(), |acc, (m, _)| acc.union(m));
    if mask.is_empty() {
        return Err(NritError::Config("stage 2 mask is empty".into()));
    }
    let refs: Vec<(&GradientMask, f64)> = groups.iter().filter(|(m, _)| !m.is_empty()).map(|(m, s)| (m, *s)).collect();
    let compiled = UpdateMask::from_groups(model.store(), &refs)?;
    let log = train(model, examples, Some(&compiled), cfg)?;
    Ok(StageOutcome {
        stage: Stage::NoiseFilter,
        count: model.count_parameters(Some(&mask))?,
        mask,
        log,
        eot_before: None,
        eot_after: None,
    })
}
