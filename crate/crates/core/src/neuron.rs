//! FFN neuron identities, the three mined neuron groups, and their text file format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{NritError, Result};

pub const NEURON_FILE_HEADER: &str = "nrit-neurons v1";

/// Hidden unit `index` of layer `layer`'s feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> Self {
        NeuronId { layer, index }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.index)
    }
}

/// Neuron group. Ordering follows the group names lexicographically, which
/// is the order groups appear in neuron-set files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Irrel,
    Rel,
    Shared,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Irrel, Group::Rel, Group::Shared];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Irrel => "irrel",
            Group::Rel => "rel",
            Group::Shared => "shared",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = NritError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irrel" => Ok(Group::Irrel),
            "rel" => Ok(Group::Rel),
            "shared" => Ok(Group::Shared),
            other => Err(NritError::format("neuron group", other.to_string())),
        }
    }
}

/// Context-specific neuron groups after decoupling.
///
/// `rel_freq` and `irrel_freq` hold the selection frequencies of the
/// original candidate sets, so `rel ∪ shared` and `irrel ∪ shared` recover
/// the candidates exactly.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NeuronSets {
    pub rel: BTreeSet<NeuronId>,
    pub irrel: BTreeSet<NeuronId>,
    pub shared: BTreeSet<NeuronId>,
    pub rel_freq: BTreeMap<NeuronId, usize>,
    pub irrel_freq: BTreeMap<NeuronId, usize>,
}

impl NeuronSets {
    pub fn group(&self, group: Group) -> &BTreeSet<NeuronId> {
        match group {
            Group::Irrel => &self.irrel,
            Group::Rel => &self.rel,
            Group::Shared => &self.shared,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        self.rel.is_disjoint(&self.irrel)
            && self.rel.is_disjoint(&self.shared)
            && self.irrel.is_disjoint(&self.shared)
    }

    pub fn rel_candidates(&self) -> BTreeSet<NeuronId> {
        &self.rel | &self.shared
    }

    pub fn irrel_candidates(&self) -> BTreeSet<NeuronId> {
        &self.irrel | &self.shared
    }

    pub fn all(&self) -> BTreeSet<NeuronId> {
        let mut out = &self.rel | &self.irrel;
        out.extend(self.shared.iter().copied());
        out
    }

    /// Frequency written for a neuron of `group`; shared neurons carry the
    /// sum of both candidate frequencies.
    pub fn frequency(&self, group: Group, n: NeuronId) -> usize {
        let rel = self.rel_freq.get(&n).copied().unwrap_or(0);
        let irrel = self.irrel_freq.get(&n).copied().unwrap_or(0);
        match group {
            Group::Rel => rel,
            Group::Irrel => irrel,
            Group::Shared => rel + irrel,
        }
    }

    pub fn records(&self) -> Vec<NeuronRecord> {
        let mut out = Vec::new();
        for g in Group::ALL {
            for &n in self.group(g) {
                out.push(NeuronRecord {
                    group: g,
                    neuron: n,
                    frequency: self.frequency(g, n),
                });
            }
        }
        out
    }

    pub fn to_file_string(&self) -> String {
        render_neuron_file(&self.records(), &[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NeuronRecord {
    pub group: Group,
    pub neuron: NeuronId,
    pub frequency: usize,
}

/// Renders neuron lines sorted by (group, layer, index), followed by one
/// `layer,<idx>,full` line per listed layer.
pub fn render_neuron_file(records: &[NeuronRecord], full_layers: &[usize]) -> String {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.group, r.neuron));
    let mut out = String::from(NEURON_FILE_HEADER);
    out.push('\n');
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.group, r.neuron.layer, r.neuron.index, r.frequency
        ));
    }
    let layers: BTreeSet<usize> = full_layers.iter().copied().collect();
    for l in layers {
        out.push_str(&format!("layer,{l},full\n"));
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NeuronFile {
    pub records: Vec<NeuronRecord>,
    pub full_layers: Vec<usize>,
}

impl NeuronFile {
    /// Rebuilds group sets. Candidate frequencies are not recoverable for
    /// shared neurons and are left empty for them.
    pub fn to_sets(&self) -> NeuronSets {
        let mut s = NeuronSets::default();
        for r in &self.records {
            match r.group {
                Group::Rel => {
                    s.rel.insert(r.neuron);
                    s.rel_freq.insert(r.neuron, r.frequency);
                }
                Group::Irrel => {
                    s.irrel.insert(r.neuron);
                    s.irrel_freq.insert(r.neuron, r.frequency);
                }
                Group::Shared => {
                    s.shared.insert(r.neuron);
                }
            }
        }
        s
    }
}

pub fn parse_neuron_file(text: &str) -> Result<NeuronFile> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == NEURON_FILE_HEADER => {}
        other => {
            return Err(NritError::format(
                "neuron file",
                format!("expected header {NEURON_FILE_HEADER:?}, got {other:?}"),
            ))
        }
    }
    let mut file = NeuronFile::default();
    for (no, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || NritError::format("neuron file", format!("line {}: {line:?}", no + 2));
        if fields.len() == 3 && fields[0] == "layer" && fields[2] == "full" {
            file.full_layers.push(fields[1].parse().map_err(|_| bad())?);
            continue;
        }
        if fields.len() != 4 {
            return Err(bad());
        }
        file.records.push(NeuronRecord {
            group: fields[0].parse()?,
            neuron: NeuronId::new(
                fields[1].parse().map_err(|_| bad())?,
                fields[2].parse().map_err(|_| bad())?,
            ),
            frequency: fields[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(file)
}
