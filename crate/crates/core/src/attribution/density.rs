use std::fmt::Write as _;

use crate::error::{NritError, Result};
use crate::neuron::NeuronSets;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerDensity {
    pub layer: usize,
    pub rel: usize,
    pub irrel: usize,
    pub shared: usize,
}

impl LayerDensity {
    pub fn irrel_plus_shared(&self) -> usize {
        self.irrel + self.shared
    }
}

/// Per-layer member counts of each group.
pub fn layer_density(sets: &NeuronSets, n_layers: usize) -> Result<Vec<LayerDensity>> {
    let mut rows: Vec<LayerDensity> = (0..n_layers).map(|layer| LayerDensity { layer, ..Default::default() }).collect();
    for (set, field) in [(&sets.rel, 0), (&sets.irrel, 1), (&sets.shared, 2)] {
        for n in set {
            let row = rows
                .get_mut(n.layer)
                .ok_or_else(|| NritError::Index(format!("neuron {n} beyond {n_layers} layers")))?;
            match field {
                0 => row.rel += 1,
                1 => row.irrel += 1,
                _ => row.shared += 1,
            }
        }
    }
    Ok(rows)
}

/// The `k` layers with the most irrel-plus-shared neurons, ties toward the
/// higher layer index, in rank order.
pub fn top_k_layers(density: &[LayerDensity], k: usize) -> Result<Vec<usize>> {
    if k > density.len() {
        return Err(NritError::Config(format!("top-{k} layers requested from {} layers", density.len())));
    }
    let mut ranked: Vec<&LayerDensity> = density.iter().collect();
    ranked.sort_by(|a, b| b.irrel_plus_shared().cmp(&a.irrel_plus_shared()).then(b.layer.cmp(&a.layer)));
    Ok(ranked.into_iter().take(k).map(|d| d.layer).collect())
}

/// CSV with header `layer,rel,irrel,shared,irrel_plus_shared`.
pub fn density_csv(density: &[LayerDensity]) -> String {
    let mut out = String::from("layer,rel,irrel,shared,irrel_plus_shared\n");
    for d in density {
        let _ = writeln!(out, "{},{},{},{},{}", d.layer, d.rel, d.irrel, d.shared, d.irrel_plus_shared());
    }
    out
}
