use std::collections::BTreeSet;

use crate::error::{NritError, Result};
use crate::mask::{GradientMask, MaskOrigin, Selection};
use crate::model::MicroTransformer;
use crate::neuron::{render_neuron_file, NeuronId, NeuronSets};

/// Selects each neuron's footprint: column `j` of W1, entry `j` of b1 and
/// row `j` of W2 in its layer.
pub fn mask_from_neurons<'n>(
    model: &MicroTransformer,
    neurons: impl IntoIterator<Item = &'n NeuronId>,
) -> Result<GradientMask> {
    let c = model.config();
    let mut mask = GradientMask::empty();
    let mut listed = Vec::new();
    for &n in neurons {
        if n.layer >= c.n_layers || n.index >= c.d_ff {
            return Err(NritError::Index(format!(
                "neuron {n} outside {} layers x {} neurons",
                c.n_layers, c.d_ff
            )));
        }
        let names = model.ffn_names(n.layer)?;
        let j = BTreeSet::from([n.index]);
        mask.select(&names.w1, &[c.d_model, c.d_ff], Selection::Cols(j.clone()))?;
        mask.select(&names.b1, &[c.d_ff], Selection::Scalars(j.clone()))?;
        mask.select(&names.w2, &[c.d_ff, c.d_model], Selection::Rows(j))?;
        listed.push(n);
    }
    listed.sort();
    listed.dedup();
    Ok(mask.with_origin(MaskOrigin::Neurons(listed)))
}

/// Selects every parameter of the listed transformer blocks in full.
/// Embeddings, the final norm and the output head are never included.
pub fn mask_from_layers(model: &MicroTransformer, layers: &[usize]) -> Result<GradientMask> {
    let mut mask = GradientMask::empty();
    for &l in layers {
        for name in model.block_param_names(l)? {
            let shape = model.store().by_name(&name).expect("block parameter").value.shape().to_vec();
            mask.select(&name, &shape, Selection::Full)?;
        }
    }
    let mut listed = layers.to_vec();
    listed.sort_unstable();
    listed.dedup();
    Ok(mask.with_origin(MaskOrigin::Layers(listed)))
}

/// Selects the final norm and the output head in full.
pub fn mask_from_head(model: &MicroTransformer) -> Result<GradientMask> {
    let mut mask = GradientMask::empty();
    for (_, p) in model.store().iter() {
        if p.name.starts_with("ln_f.") || p.name == "lm_head" {
            mask.select(&p.name, p.value.shape(), Selection::Full)?;
        }
    }
    Ok(mask)
}

/// `mask.txt` contents: the neuron-file lines of `sets` followed by one
/// `layer,<idx>,full` line per fully tuned layer.
pub fn mask_file(sets: &NeuronSets, layers: &[usize]) -> String {
    render_neuron_file(&sets.records(), layers)
}
