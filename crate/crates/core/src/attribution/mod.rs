//! Integrated-Gradients neuron attribution and context-aware neuron mining.

mod density;
mod ig;
mod matrix;
mod mining;

pub use density::{density_csv, layer_density, top_k_layers, LayerDensity};
pub use ig::{
    attribute_all, attribute_instance, integrated_gradients_layer, integrated_gradients_layer_full, prepare,
    integrate_path, target_value, IgConfig, IgInput, IgPrepared, IgTarget,
};
pub use matrix::AttributionMatrix;
pub use mining::{decouple, mine_candidates, nearest_rank, select_instance, Aggregation, Candidates, MiningConfig};

use crate::data::AttributionInstance;
use crate::error::Result;
use crate::model::{Tokenizer, BOS};

/// `BOS` followed by the encoded text.
pub fn encode_prompt(tokenizer: &Tokenizer, text: &str) -> Result<Vec<usize>> {
    let mut ids = vec![BOS];
    ids.extend(tokenizer.encode(text)?);
    Ok(ids)
}

impl IgInput {
    pub fn from_instance(tokenizer: &Tokenizer, inst: &AttributionInstance) -> Result<Self> {
        inst.validate()?;
        Ok(IgInput {
            id: inst.id.clone(),
            target_prompt: encode_prompt(tokenizer, &inst.prompt()?)?,
            baseline_prompt: encode_prompt(tokenizer, &inst.query_only_prompt()?)?,
            gold: inst.gold_token(),
        })
    }
}
