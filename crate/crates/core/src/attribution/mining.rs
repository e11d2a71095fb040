//! Per-instance neuron selection, frequency aggregation and decoupling.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{NritError, Result};
use crate::neuron::{NeuronId, NeuronSets};

use super::matrix::AttributionMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Neurons selected in at least this many instances.
    Threshold(usize),
    /// The `t` most frequently selected neurons.
    TopT(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    pub percentile: f64,
    pub top_k: usize,
    pub aggregation: Aggregation,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            percentile: 0.9,
            top_k: 20,
            aggregation: Aggregation::Threshold(130),
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile < 1.0) {
            return Err(NritError::Config("mining.percentile must lie strictly between 0 and 1".into()));
        }
        if self.top_k == 0 {
            return Err(NritError::Config("mining.top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Candidate neurons of one context type with the selection count of every
/// neuron selected at least once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Candidates {
    pub neurons: BTreeSet<NeuronId>,
    pub frequency: BTreeMap<NeuronId, usize>,
    pub instances: usize,
}

impl Candidates {
    pub fn candidate_frequency(&self) -> BTreeMap<NeuronId, usize> {
        self.neurons.iter().map(|n| (*n, self.frequency[n])).collect()
    }
}

/// Nearest-rank percentile: the smallest value with at least
/// `ceil(p * n)` values at or below it.
pub fn nearest_rank(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Neurons kept for one instance: those scoring at or above the percentile
/// cutoff, best `top_k` by (score desc, layer asc, index asc).
pub fn select_instance(matrix: &AttributionMatrix, i: usize, cfg: &MiningConfig) -> Vec<NeuronId> {
    let scores = matrix.instance(i);
    let cutoff = nearest_rank(scores, cfg.percentile);
    let mut kept: Vec<(f64, NeuronId)> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= cutoff)
        .map(|(flat, &s)| (s, matrix.neuron(flat)))
        .collect();
    kept.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    kept.truncate(cfg.top_k);
    kept.into_iter().map(|(_, n)| n).collect()
}

fn by_count_then_id(a: &(NeuronId, usize), b: &(NeuronId, usize)) -> Ordering {
    b.1.cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Selection frequencies over `instances` (indices into `matrix`) and the
/// neurons satisfying the aggregation rule.
pub fn mine_candidates(matrix: &AttributionMatrix, instances: &[usize], cfg: &MiningConfig) -> Result<Candidates> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(NritError::Config("mining needs at least one instance".into()));
    }
    let mut frequency: BTreeMap<NeuronId, usize> = BTreeMap::new();
    for &i in instances {
        if i >= matrix.len() {
            return Err(NritError::Index(format!("instance {i} of {}", matrix.len())));
        }
        for n in select_instance(matrix, i, cfg) {
            *frequency.entry(n).or_insert(0) += 1;
        }
    }
    let neurons = match cfg.aggregation {
        Aggregation::Threshold(k) => frequency.iter().filter(|(_, &c)| c >= k).map(|(n, _)| *n).collect(),
        Aggregation::TopT(t) => {
            let mut ranked: Vec<(NeuronId, usize)> = frequency.iter().map(|(n, c)| (*n, *c)).collect();
            ranked.sort_by(by_count_then_id);
            ranked.into_iter().take(t).map(|(n, _)| n).collect()
        }
    };
    Ok(Candidates {
        neurons,
        frequency,
        instances: instances.len(),
    })
}

/// Splits two candidate sets into exclusive and shared parts.
pub fn decouple(rel: &Candidates, irrel: &Candidates) -> NeuronSets {
    let shared: BTreeSet<NeuronId> = rel.neurons.intersection(&irrel.neurons).copied().collect();
    NeuronSets {
        rel: rel.neurons.difference(&shared).copied().collect(),
        irrel: irrel.neurons.difference(&shared).copied().collect(),
        shared,
        rel_freq: rel.candidate_frequency(),
        irrel_freq: irrel.candidate_frequency(),
    }
}
