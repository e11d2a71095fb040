//! Gradient masks from neuron sets and layers, and the two masked tuning stages.

mod examples;
mod masks;
mod report;
mod stages;
mod train;

pub use examples::{
    attribution_example, denoise_example, document_example, document_prompt, packed_documents, rs_example, Stage2Prompt,
    TrainExample,
};
pub use masks::{mask_file, mask_from_head, mask_from_layers, mask_from_neurons};
pub use report::TrainingReport;
pub use stages::{stage1_denoise, stage2_noise_filter, GroupScales, StageOutcome};
pub use train::{mean_eot_probability, train, Stage, TrainConfig, TrainLog};
