use std::path::Path;

use crate::error::{NritError, Result};
use crate::neuron::NeuronId;
use crate::params::{decode_tensors, encode_tensors};
use crate::tensor::Tensor;

/// Per-instance attribution scores over all `n_layers * d_ff` neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    n_layers: usize,
    d_ff: usize,
    ids: Vec<String>,
    scores: Vec<Vec<f64>>,
}

impl AttributionMatrix {
    pub fn new(n_layers: usize, d_ff: usize) -> Self {
        AttributionMatrix {
            n_layers,
            d_ff,
            ids: Vec::new(),
            scores: Vec::new(),
        }
    }

    /// Adds one instance; `scores` is laid out `layer * d_ff + index`.
    pub fn push(&mut self, id: impl Into<String>, scores: Vec<f64>) -> Result<()> {
        let id = id.into();
        if scores.len() != self.n_layers * self.d_ff {
            return Err(NritError::Shape(format!(
                "instance {id} has {} scores, expected {} x {}",
                scores.len(),
                self.n_layers,
                self.d_ff
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(NritError::numeric(format!("instance {id}"), format!("score {i} is {}", scores[i])));
        }
        if id.contains('/') || self.ids.contains(&id) {
            return Err(NritError::Contract(format!("instance id {id:?} is duplicated or contains '/'")));
        }
        self.ids.push(id);
        self.scores.push(scores);
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn instance(&self, i: usize) -> &[f64] {
        &self.scores[i]
    }

    pub fn layer(&self, i: usize, layer: usize) -> &[f64] {
        &self.scores[i][layer * self.d_ff..(layer + 1) * self.d_ff]
    }

    pub fn score(&self, i: usize, n: NeuronId) -> f64 {
        self.scores[i][n.layer * self.d_ff + n.index]
    }

    pub fn neuron(&self, flat: usize) -> NeuronId {
        NeuronId::new(flat / self.d_ff, flat % self.d_ff)
    }

    /// Checkpoint-format bytes, one `attr/<id>/<layer>` tensor per layer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (i, id) in self.ids.iter().enumerate() {
            for l in 0..self.n_layers {
                names.push(format!("attr/{id}/{l}"));
                tensors.push(Tensor::vector(self.layer(i, l).to_vec()));
            }
        }
        let entries: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(&tensors).collect();
        encode_tensors(&entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| NritError::format("attribution matrix", d);
        let mut m: Option<AttributionMatrix> = None;
        let mut current: Option<(String, Vec<Vec<f64>>)> = None;
        let flush = |m: &mut Option<AttributionMatrix>, cur: Option<(String, Vec<Vec<f64>>)>| -> Result<()> {
            if let Some((id, layers)) = cur {
                let d_ff = layers[0].len();
                let matrix = m.get_or_insert_with(|| AttributionMatrix::new(layers.len(), d_ff));
                if layers.len() != matrix.n_layers || layers.iter().any(|l| l.len() != matrix.d_ff) {
                    return Err(bad(format!("instance {id} has inconsistent shape")));
                }
                matrix.push(id, layers.concat())?;
            }
            Ok(())
        };
        for (name, t) in decode_tensors(bytes)? {
            let parts: Vec<&str> = name.split('/').collect();
            if parts.len() != 3 || parts[0] != "attr" {
                return Err(bad(format!("unexpected tensor name {name:?}")));
            }
            let layer: usize = parts[2].parse().map_err(|_| bad(format!("bad layer in {name:?}")))?;
            let same = current.as_ref().is_some_and(|(id, _)| id == parts[1]);
            if !same {
                flush(&mut m, current.take())?;
                current = Some((parts[1].to_string(), Vec::new()));
            }
            let (_, layers) = current.as_mut().expect("set above");
            if layer != layers.len() {
                return Err(bad(format!("layers out of order at {name:?}")));
            }
            layers.push(t.into_data());
        }
        flush(&mut m, current.take())?;
        m.ok_or_else(|| bad("no instances".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
