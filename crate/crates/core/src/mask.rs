//! Parameter-granular gradient masks.
//!
//! A [`GradientMask`] names the parameter entries an optimizer step may
//! touch. Everything it does not select stays bit-identical through
//! training, weight decay included.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{NritError, Result};
use crate::params::ParamStore;

/// Which entries of one parameter tensor are selected.
#[derive(Debug, Clone)]
pub enum Selection {
    Full,
    /// Whole rows of a matrix.
    Rows(BTreeSet<usize>),
    /// Whole columns of a matrix.
    Cols(BTreeSet<usize>),
    /// Individual flat (row-major) indices.
    Scalars(BTreeSet<usize>),
}

#[derive(Debug, Clone)]
pub struct MaskEntry {
    shape: Vec<usize>,
    selection: Selection,
}

impl MaskEntry {
    pub fn new(shape: &[usize], selection: Selection) -> Result<Self> {
        let entry = MaskEntry {
            shape: shape.to_vec(),
            selection,
        };
        entry.check_bounds()?;
        Ok(entry)
    }

    fn total(&self) -> usize {
        self.shape.iter().product()
    }

    fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.total() / cols, cols)
    }

    fn check_bounds(&self) -> Result<()> {
        let (rows, cols) = self.rows_cols();
        let (set, limit, what) = match &self.selection {
            Selection::Full => return Ok(()),
            Selection::Rows(s) => (s, rows, "row"),
            Selection::Cols(s) => (s, cols, "column"),
            Selection::Scalars(s) => (s, self.total(), "entry"),
        };
        match set.iter().next_back() {
            Some(&max) if max >= limit => Err(NritError::Index(format!(
                "mask {what} {max} out of range for shape {:?}",
                self.shape
            ))),
            _ => Ok(()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn selection(&self) -> &Selection {
        &self.selection
    }

    pub fn count(&self) -> usize {
        let (rows, cols) = self.rows_cols();
        match &self.selection {
            Selection::Full => self.total(),
            Selection::Rows(s) => s.len() * cols,
            Selection::Cols(s) => s.len() * rows,
            Selection::Scalars(s) => s.len(),
        }
    }

    pub fn contains(&self, flat: usize) -> bool {
        let (_, cols) = self.rows_cols();
        match &self.selection {
            Selection::Full => flat < self.total(),
            Selection::Rows(s) => s.contains(&(flat / cols)),
            Selection::Cols(s) => s.contains(&(flat % cols)),
            Selection::Scalars(s) => s.contains(&flat),
        }
    }

    fn flat_indices(&self) -> BTreeSet<usize> {
        (0..self.total()).filter(|&i| self.contains(i)).collect()
    }

    fn normalized(self) -> MaskEntry {
        if self.count() == self.total() {
            MaskEntry {
                shape: self.shape,
                selection: Selection::Full,
            }
        } else {
            self
        }
    }

    fn union(&self, other: &MaskEntry) -> MaskEntry {
        let selection = match (&self.selection, &other.selection) {
            (Selection::Full, _) | (_, Selection::Full) => Selection::Full,
            (Selection::Rows(a), Selection::Rows(b)) => Selection::Rows(a | b),
            (Selection::Cols(a), Selection::Cols(b)) => Selection::Cols(a | b),
            _ => Selection::Scalars(&self.flat_indices() | &other.flat_indices()),
        };
        MaskEntry {
            shape: self.shape.clone(),
            selection,
        }
        .normalized()
    }

    fn intersection(&self, other: &MaskEntry) -> Option<MaskEntry> {
        let selection = match (&self.selection, &other.selection) {
            (Selection::Full, s) | (s, Selection::Full) => s.clone(),
            (Selection::Rows(a), Selection::Rows(b)) => Selection::Rows(a & b),
            (Selection::Cols(a), Selection::Cols(b)) => Selection::Cols(a & b),
            _ => Selection::Scalars(&self.flat_indices() & &other.flat_indices()),
        };
        let e = MaskEntry {
            shape: self.shape.clone(),
            selection,
        };
        (e.count() > 0).then(|| e.normalized())
    }
}

impl PartialEq for MaskEntry {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.flat_indices() == other.flat_indices()
    }
}

/// Where a mask came from, kept for reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskOrigin {
    Empty,
    Neurons(Vec<crate::neuron::NeuronId>),
    Layers(Vec<usize>),
    Union(Vec<MaskOrigin>),
}

#[derive(Debug, Clone)]
pub struct GradientMask {
    entries: BTreeMap<String, MaskEntry>,
    origin: MaskOrigin,
}

impl PartialEq for GradientMask {
    /// Masks are equal when they select the same entries; origin is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Default for GradientMask {
    fn default() -> Self {
        Self::empty()
    }
}

impl GradientMask {
    pub fn empty() -> Self {
        GradientMask {
            entries: BTreeMap::new(),
            origin: MaskOrigin::Empty,
        }
    }

    pub fn with_origin(mut self, origin: MaskOrigin) -> Self {
        self.origin = origin;
        self
    }

    pub fn origin(&self) -> &MaskOrigin {
        &self.origin
    }

    /// Adds a selection, merging with any existing selection on the same parameter.
    pub fn select(&mut self, name: &str, shape: &[usize], selection: Selection) -> Result<()> {
        let entry = MaskEntry::new(shape, selection)?;
        if entry.count() == 0 {
            return Ok(());
        }
        let merged = match self.entries.get(name) {
            Some(existing) => {
                if existing.shape != entry.shape {
                    return Err(NritError::Shape(format!("mask entry {name} shape changed")));
                }
                existing.union(&entry)
            }
            None => entry.normalized(),
        };
        self.entries.insert(name.to_string(), merged);
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &MaskEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&MaskEntry> {
        self.entries.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of selected scalars.
    pub fn count(&self) -> usize {
        self.entries.values().map(MaskEntry::count).sum()
    }

    pub fn union(&self, other: &GradientMask) -> GradientMask {
        let mut entries = self.entries.clone();
        for (name, e) in &other.entries {
            let merged = match entries.get(name) {
                Some(existing) => existing.union(e),
                None => e.clone(),
            };
            entries.insert(name.clone(), merged);
        }
        let origin = if self.origin == other.origin {
            self.origin.clone()
        } else {
            MaskOrigin::Union(vec![self.origin.clone(), other.origin.clone()])
        };
        GradientMask { entries, origin }
    }

    pub fn intersection(&self, other: &GradientMask) -> GradientMask {
        let entries = self
            .entries
            .iter()
            .filter_map(|(name, e)| {
                let o = other.entries.get(name)?;
                e.intersection(o).map(|i| (name.clone(), i))
            })
            .collect();
        GradientMask {
            entries,
            origin: MaskOrigin::Empty,
        }
    }

    /// Checks every entry names an existing parameter of matching shape.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        for (name, e) in &self.entries {
            let p = store
                .by_name(name)
                .ok_or_else(|| NritError::Config(format!("mask references unknown parameter {name}")))?;
            if p.value.shape() != e.shape.as_slice() {
                return Err(NritError::Config(format!(
                    "mask entry {name} has shape {:?}, parameter has {:?}",
                    e.shape,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Resolves names against `store`, giving every selected entry the
    /// learning-rate multiplier `scale`.
    pub fn compile(&self, store: &ParamStore, scale: f64) -> Result<UpdateMask> {
        UpdateMask::from_groups(store, &[(self, scale)])
    }
}

impl fmt::Display for GradientMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mask({} entries, {} scalars)", self.entries.len(), self.count())
    }
}

/// Per-parameter update selection in store order, as consumed by the optimizer.
#[derive(Debug, Clone)]
pub enum ParamUpdate {
    Frozen,
    All(f64),
    /// Learning-rate multiplier per entry; `0.0` means frozen.
    Entries(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct UpdateMask {
    params: Vec<ParamUpdate>,
}

impl UpdateMask {
    /// Combines masks with per-group multipliers. When groups overlap, the
    /// first listed group that selects an entry sets its multiplier.
    pub fn from_groups(store: &ParamStore, groups: &[(&GradientMask, f64)]) -> Result<UpdateMask> {
        let mut params = vec![ParamUpdate::Frozen; store.len()];
        for (mask, scale) in groups {
            mask.validate(store)?;
            if !(*scale > 0.0) {
                return Err(NritError::Config(format!("group multiplier {scale} must be positive")));
            }
            for (name, entry) in &mask.entries {
                let id = store.id(name).expect("validated");
                let n = store.value(id).len();
                let slot = &mut params[id.0];
                match slot {
                    ParamUpdate::All(_) => {}
                    ParamUpdate::Frozen if matches!(entry.selection, Selection::Full) => {
                        *slot = ParamUpdate::All(*scale);
                    }
                    ParamUpdate::Frozen => {
                        let v = (0..n).map(|i| if entry.contains(i) { *scale } else { 0.0 }).collect();
                        *slot = ParamUpdate::Entries(v);
                    }
                    ParamUpdate::Entries(v) => {
                        for (i, s) in v.iter_mut().enumerate() {
                            if *s == 0.0 && entry.contains(i) {
                                *s = *scale;
                            }
                        }
                    }
                }
            }
        }
        Ok(UpdateMask { params })
    }

    pub fn param(&self, index: usize) -> &ParamUpdate {
        &self.params[index]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    /// Whether each parameter has any entry the optimizer may change.
    pub fn trainable_flags(&self) -> Vec<bool> {
        self.params.iter().map(|p| !matches!(p, ParamUpdate::Frozen)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.params.iter().all(|p| matches!(p, ParamUpdate::Frozen))
    }
}
