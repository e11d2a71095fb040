//! Pipeline configuration as `key=value` lines with dotted keys.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attribution::{Aggregation, IgConfig, IgTarget, MiningConfig};
use crate::data::{DataConfig, DenoisePrompt, WorldSpec};
use crate::error::{NritError, Result};
use crate::model::ModelConfig;
use crate::tuning::{GroupScales, Stage, Stage2Prompt, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    /// Generation budget per QA instance.
    pub max_new: usize,
    /// Held-out denoising prompts used to measure stage-1 P(EOT).
    pub heldout_denoise: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_new: 48,
            heldout_denoise: 100,
        }
    }
}

/// Every setting that influences a pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub world: WorldSpec,
    /// `vocab_size` is ignored; the tokenizer built from the world decides it.
    pub model: ModelConfig,
    pub data: DataConfig,
    pub warmup: TrainConfig,
    /// Shuffled passes of the corpus packed into full-length warm-up
    /// sequences; 0 trains on each document alone.
    pub warmup_packings: usize,
    pub ig: IgConfig,
    pub mining: MiningConfig,
    /// Number of densest layers tuned in full during stage 2.
    pub top_layers: usize,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub stage2_prompt: Stage2Prompt,
    /// Adds the final norm and output head to the stage-2 mask.
    pub stage2_head: bool,
    pub scales: GroupScales,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    /// Desk-sized world and model with the published attribution, mining and
    /// tuning settings.
    fn default() -> Self {
        PipelineConfig {
            world: WorldSpec::default(),
            model: ModelConfig::desk(0),
            data: DataConfig::default(),
            warmup: TrainConfig::defaults(Stage::Warmup),
            warmup_packings: 4,
            ig: IgConfig::default(),
            mining: MiningConfig::default(),
            top_layers: 3,
            stage1: TrainConfig::defaults(Stage::Denoise),
            stage2: TrainConfig::defaults(Stage::NoiseFilter),
            stage2_prompt: Stage2Prompt::Qa,
            stage2_head: false,
            scales: GroupScales::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| NritError::Config(format!("{key}: cannot parse {raw:?}")))
}

impl PipelineConfig {
    /// Seeds every component from one value. Later explicit `*.seed` keys
    /// override the derived seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.model.init_seed = seed.wrapping_add(1);
        self.data.seed = seed.wrapping_add(2);
        self.warmup.seed = seed.wrapping_add(3);
        self.stage1.seed = seed.wrapping_add(4);
        self.stage2.seed = seed.wrapping_add(5);
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let v = raw.trim();
        match key {
            "seed" => self.set_seed(parse(key, v)?),
            "world.n_entities" => self.world.n_entities = parse(key, v)?,
            "world.n_relations" => self.world.n_relations = parse(key, v)?,
            "world.facts_per_entity" => self.world.facts_per_entity = parse(key, v)?,
            "world.distractor_pool_size" => self.world.distractor_pool_size = parse(key, v)?,
            "world.multi_hop_fraction" => self.world.multi_hop_fraction = parse(key, v)?,
            "world.n_eval_queries" => self.world.n_eval_queries = parse(key, v)?,
            "world.seed" => self.world.seed = parse(key, v)?,
            "world.sentence" => self.world.sentence = v.to_string(),
            "model.n_layers" => self.model.n_layers = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.d_ff" => self.model.d_ff = parse(key, v)?,
            "model.max_seq_len" => self.model.max_seq_len = parse(key, v)?,
            "model.init_seed" => self.model.init_seed = parse(key, v)?,
            "retrieve.top_n" => self.data.top_n = parse(key, v)?,
            "retrieve.top_k" => self.data.top_k = parse(key, v)?,
            "data.attribution_per_type" => self.data.attribution_per_type = parse(key, v)?,
            "data.summary_cap" => self.data.summary_cap = parse(key, v)?,
            "data.denoise_prompt" => self.data.denoise_prompt = DenoisePrompt::from_str(v)?,
            "data.rs_absent_fraction" => self.data.rs_absent_fraction = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "warmup.lr" => self.warmup.lr = parse(key, v)?,
            "warmup.epochs" => self.warmup.epochs = parse(key, v)?,
            "warmup.batch" => self.warmup.batch_size = parse(key, v)?,
            "warmup.seed" => self.warmup.seed = parse(key, v)?,
            "warmup.weight_decay" => self.warmup.weight_decay = parse(key, v)?,
            "warmup.packings" => self.warmup_packings = parse(key, v)?,
            "ig.steps" => self.ig.steps = parse(key, v)?,
            "ig.target" => self.ig.target = IgTarget::from_str(v)?,
            "mining.percentile" => self.mining.percentile = parse(key, v)?,
            "mining.top_k" => self.mining.top_k = parse(key, v)?,
            "mining.threshold" => self.mining.aggregation = Aggregation::Threshold(parse(key, v)?),
            "mining.top_t" => self.mining.aggregation = Aggregation::TopT(parse(key, v)?),
            "layers.top_k" => self.top_layers = parse(key, v)?,
            "train.batch" => {
                let b = parse(key, v)?;
                self.stage1.batch_size = b;
                self.stage2.batch_size = b;
            }
            "train.weight_decay" => {
                let w = parse(key, v)?;
                self.stage1.weight_decay = w;
                self.stage2.weight_decay = w;
            }
            "train.stage1.lr" => self.stage1.lr = parse(key, v)?,
            "train.stage1.epochs" => self.stage1.epochs = parse(key, v)?,
            "train.stage1.batch" => self.stage1.batch_size = parse(key, v)?,
            "train.stage1.seed" => self.stage1.seed = parse(key, v)?,
            "train.stage2.lr" => self.stage2.lr = parse(key, v)?,
            "train.stage2.epochs" => self.stage2.epochs = parse(key, v)?,
            "train.stage2.batch" => self.stage2.batch_size = parse(key, v)?,
            "train.stage2.seed" => self.stage2.seed = parse(key, v)?,
            "train.stage2.prompt" => self.stage2_prompt = Stage2Prompt::from_str(v)?,
            "train.stage2.head" => self.stage2_head = parse(key, v)?,
            "train.stage2.scale.rel" => self.scales.rel = parse(key, v)?,
            "train.stage2.scale.irrel" => self.scales.irrel = parse(key, v)?,
            "train.stage2.scale.shared" => self.scales.shared = parse(key, v)?,
            "train.stage2.scale.layers" => self.scales.layers = parse(key, v)?,
            "eval.max_new" => self.eval.max_new = parse(key, v)?,
            "eval.heldout_denoise" => self.eval.heldout_denoise = parse(key, v)?,
            other => return Err(NritError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment;
    /// a key may appear only once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                // a sentence pattern may not contain '#'; comments win
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NritError::Config(format!("line {}: expected key=value", no + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(NritError::Config(format!("line {}: duplicate key {k}", no + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                NritError::Config(m) => NritError::Config(format!("line {}: {m}", no + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NritError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.world
            .validate()
            .map_err(|e| NritError::Config(format!("world: {e}")))?;
        ModelConfig {
            vocab_size: 1,
            ..self.model
        }
        .validate()?;
        self.data.validate()?;
        self.warmup.validate()?;
        self.ig.validate()?;
        self.mining.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.top_layers > self.model.n_layers {
            return Err(NritError::Config(format!(
                "layers.top_k = {} exceeds {} layers",
                self.top_layers, self.model.n_layers
            )));
        }
        for s in [self.scales.rel, self.scales.irrel, self.scales.shared, self.scales.layers] {
            if !(s > 0.0) {
                return Err(NritError::Config("group scales must be positive".into()));
            }
        }
        if self.eval.max_new == 0 {
            return Err(NritError::Config("eval.max_new must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            ..self.model
        }
    }

    /// Every key with its effective value; parses back to an equal config.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        let w = &self.world;
        put("world.n_entities", w.n_entities.to_string());
        put("world.n_relations", w.n_relations.to_string());
        put("world.facts_per_entity", w.facts_per_entity.to_string());
        put("world.distractor_pool_size", w.distractor_pool_size.to_string());
        put("world.multi_hop_fraction", format!("{:?}", w.multi_hop_fraction));
        put("world.n_eval_queries", w.n_eval_queries.to_string());
        put("world.seed", w.seed.to_string());
        put("world.sentence", w.sentence.clone());
        let m = &self.model;
        put("model.n_layers", m.n_layers.to_string());
        put("model.d_model", m.d_model.to_string());
        put("model.n_heads", m.n_heads.to_string());
        put("model.d_ff", m.d_ff.to_string());
        put("model.max_seq_len", m.max_seq_len.to_string());
        put("model.init_seed", m.init_seed.to_string());
        let d = &self.data;
        put("retrieve.top_n", d.top_n.to_string());
        put("retrieve.top_k", d.top_k.to_string());
        put("data.attribution_per_type", d.attribution_per_type.to_string());
        put("data.summary_cap", d.summary_cap.to_string());
        let dp = match d.denoise_prompt {
            DenoisePrompt::Irrelevant => "irrelevant",
            DenoisePrompt::Relevant => "relevant",
        };
        put("data.denoise_prompt", dp.to_string());
        put("data.rs_absent_fraction", format!("{:?}", d.rs_absent_fraction));
        put("data.seed", d.seed.to_string());
        let wu = &self.warmup;
        put("warmup.lr", format!("{:?}", wu.lr));
        put("warmup.epochs", wu.epochs.to_string());
        put("warmup.batch", wu.batch_size.to_string());
        put("warmup.seed", wu.seed.to_string());
        put("warmup.weight_decay", format!("{:?}", wu.weight_decay));
        put("warmup.packings", self.warmup_packings.to_string());
        put("ig.steps", self.ig.steps.to_string());
        let target = match self.ig.target {
            IgTarget::Probability => "probability",
            IgTarget::Loss => "loss",
        };
        put("ig.target", target.to_string());
        put("mining.percentile", format!("{:?}", self.mining.percentile));
        put("mining.top_k", self.mining.top_k.to_string());
        match self.mining.aggregation {
            Aggregation::Threshold(t) => put("mining.threshold", t.to_string()),
            Aggregation::TopT(t) => put("mining.top_t", t.to_string()),
        }
        put("layers.top_k", self.top_layers.to_string());
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            put(&format!("train.{name}.lr"), format!("{:?}", s.lr));
            put(&format!("train.{name}.epochs"), s.epochs.to_string());
            put(&format!("train.{name}.batch"), s.batch_size.to_string());
            put(&format!("train.{name}.seed"), s.seed.to_string());
        }
        // a single decay value covers both stages
        put("train.weight_decay", format!("{:?}", self.stage1.weight_decay));
        let prompt = match self.stage2_prompt {
            Stage2Prompt::Qa => "qa",
            Stage2Prompt::Summary => "summary",
        };
        put("train.stage2.prompt", prompt.to_string());
        put("train.stage2.head", self.stage2_head.to_string());
        put("train.stage2.scale.rel", format!("{:?}", self.scales.rel));
        put("train.stage2.scale.irrel", format!("{:?}", self.scales.irrel));
        put("train.stage2.scale.shared", format!("{:?}", self.scales.shared));
        put("train.stage2.scale.layers", format!("{:?}", self.scales.layers));
        put("eval.max_new", self.eval.max_new.to_string());
        put("eval.heldout_denoise", self.eval.heldout_denoise.to_string());
        out
    }
}
