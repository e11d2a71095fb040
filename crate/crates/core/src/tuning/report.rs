use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{NritError, Result};

use super::stages::StageOutcome;
use super::train::{Stage, TrainConfig};

/// Metrics of one training stage, stored as `report.txt` key=value lines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub stage: Stage,
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub epoch_loss: Vec<f64>,
    pub eot_before: Option<f64>,
    pub eot_after: Option<f64>,
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
    pub wall_time_secs: f64,
}

impl TrainingReport {
    pub fn new(cfg: &TrainConfig, outcome: &StageOutcome, wall_time_secs: f64) -> Self {
        TrainingReport {
            stage: outcome.stage,
            seed: cfg.seed,
            lr: cfg.lr,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            steps: outcome.log.steps,
            epoch_loss: outcome.log.epoch_loss.clone(),
            eot_before: outcome.eot_before,
            eot_after: outcome.eot_after,
            trainable: outcome.count.selected,
            total: outcome.count.total,
            fraction: outcome.count.fraction,
            wall_time_secs,
        }
    }

    pub fn eot_delta(&self) -> Option<f64> {
        Some(self.eot_after? - self.eot_before?)
    }

    /// Floats use the shortest representation that parses back exactly.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("stage", self.stage.to_string());
        put("seed", self.seed.to_string());
        put("lr", format!("{:?}", self.lr));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("steps", self.steps.to_string());
        for (i, l) in self.epoch_loss.iter().enumerate() {
            put(&format!("epoch.{}.loss", i + 1), format!("{l:?}"));
        }
        if let Some(b) = self.eot_before {
            put("eot_before", format!("{b:?}"));
        }
        if let Some(a) = self.eot_after {
            put("eot_after", format!("{a:?}"));
        }
        if let Some(d) = self.eot_delta() {
            put("eot_delta", format!("{d:?}"));
        }
        put("trainable", self.trainable.to_string());
        put("total", self.total.to_string());
        put("fraction", format!("{:?}", self.fraction));
        put("wall_time_secs", format!("{:?}", self.wall_time_secs));
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let bad = |d: String| NritError::format("training report", d);
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {line:?} has no '='")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = map
                .get(key)
                .ok_or_else(|| NritError::format("training report", format!("missing {key}")))?;
            raw.parse()
                .map_err(|_| NritError::format("training report", format!("bad value for {key}: {raw:?}")))
        }
        let opt = |key: &str| -> Result<Option<f64>> {
            map.contains_key(key).then(|| get::<f64>(&map, key)).transpose()
        };
        let stage: String = get(&map, "stage")?;
        let epochs: usize = get(&map, "epochs")?;
        let mut epoch_loss = Vec::new();
        for i in 1.. {
            let key = format!("epoch.{i}.loss");
            if !map.contains_key(&key) {
                break;
            }
            epoch_loss.push(get(&map, &key)?);
        }
        Ok(TrainingReport {
            stage: stage.parse()?,
            seed: get(&map, "seed")?,
            lr: get(&map, "lr")?,
            epochs,
            batch_size: get(&map, "batch_size")?,
            steps: get(&map, "steps")?,
            epoch_loss,
            eot_before: opt("eot_before")?,
            eot_after: opt("eot_after")?,
            trainable: get(&map, "trainable")?,
            total: get(&map, "total")?,
            fraction: get(&map, "fraction")?,
            wall_time_secs: get(&map, "wall_time_secs")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }
}
