//! The end-to-end pipeline as resumable stages over one run directory.
//!
//! Every stage reads its inputs from files written by earlier stages, so
//! each can be invoked on its own. Errors carry the stage name and whatever
//! the stage already wrote stays on disk.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::attribution::{
    attribute_all, decouple, density_csv, layer_density, mine_candidates, top_k_layers, AttributionMatrix,
    IgInput, LayerDensity,
};
use crate::data::{
    build_attribution_sets, build_denoise_set, instruction_texts, build_qa_set, build_rs_set, generate_world, read_jsonl,
    template_words, write_jsonl, AttributionInstance, Corpus, DenoiseInstance, QaInstance, RsInstance,
};
use crate::error::{NritError, Result};
use crate::model::{ChoiceScope, MicroTransformer, Tokenizer, NO, YES};
use crate::neuron::{parse_neuron_file, render_neuron_file, Group, NeuronSets};
use crate::tuning::{
    attribution_example, denoise_example, document_example, mask_file, packed_documents, rs_example, stage1_denoise,
    stage2_noise_filter, train, Stage, TrainExample, TrainingReport,
};

use super::config::PipelineConfig;
use super::eval::{evaluate, EvalReport, Split};

/// Which part of the method a run leaves out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Ablation {
    #[default]
    None,
    /// Stage 2 starts from the warm-up model.
    NoDenoise,
    /// Stage 2 trains only the top layers.
    NoNeurons,
    /// Stage 2 trains only the mined neurons.
    NoLayers,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoDenoise => "no-denoise",
            Ablation::NoNeurons => "no-neurons",
            Ablation::NoLayers => "no-layers",
        }
    }
}

impl FromStr for Ablation {
    type Err = NritError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-denoise" => Ok(Ablation::NoDenoise),
            "no-neurons" => Ok(Ablation::NoNeurons),
            "no-layers" => Ok(Ablation::NoLayers),
            other => Err(NritError::Config(format!(
                "ablation must be none, no-denoise, no-neurons or no-layers, got {other:?}"
            ))),
        }
    }
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config(&self) -> PathBuf {
        self.path("config.txt")
    }
    pub fn corpus(&self) -> PathBuf {
        self.path("world/corpus.tsv")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.path("world/tokenizer.txt")
    }
    pub fn warmup_model(&self) -> PathBuf {
        self.path("warmup/model.nrit")
    }
    pub fn neurons(&self) -> PathBuf {
        self.path("mining/neurons.txt")
    }
    pub fn stage1_model(&self) -> PathBuf {
        self.path("stage1/model.nrit")
    }
    pub fn stage2_model(&self) -> PathBuf {
        self.path("stage2/model.nrit")
    }
    pub fn eval_report(&self, label: &str) -> PathBuf {
        self.path(&format!("eval/{label}.txt"))
    }

    fn ensure(&self, sub: &str) -> Result<PathBuf> {
        let p = self.path(sub);
        std::fs::create_dir_all(&p)?;
        Ok(p)
    }
}

/// A configured pipeline bound to a run directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub dir: RunDir,
    pub ablation: Ablation,
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| NritError::Contract(format!("cannot read {}: {e}; run the earlier stage first", path.display())))
}

impl Pipeline {
    pub fn new(config: PipelineConfig, root: impl Into<PathBuf>, ablation: Ablation) -> Self {
        Pipeline {
            config,
            dir: RunDir::new(root),
            ablation,
        }
    }

    fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::from_file_string(&read(&self.dir.tokenizer())?)
    }

    fn corpus(&self) -> Result<Corpus> {
        Corpus::from_tsv(&read(&self.dir.corpus())?)
    }

    fn load_model(&self, tok: &Tokenizer, path: &Path) -> Result<MicroTransformer> {
        if !path.exists() {
            return Err(NritError::Contract(format!("missing {}; run the earlier stage first", path.display())));
        }
        MicroTransformer::load(self.config.model_config(tok.vocab_size()), path)
    }

    fn jsonl<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>> {
        let p = self.dir.path(rel);
        if !p.exists() {
            return Err(NritError::Contract(format!("missing {}; run gen-world first", p.display())));
        }
        read_jsonl(&p)
    }

    /// Synthetic world, tokenizer and every dataset the later stages need.
    pub fn gen_world(&self) -> Result<()> {
        self.gen_world_inner().map_err(|e| e.in_stage("gen-world"))
    }

    fn gen_world_inner(&self) -> Result<()> {
        let cfg = &self.config;
        std::fs::create_dir_all(self.dir.root())?;
        write(&self.dir.config(), cfg.to_kv())?;
        let out = self.dir.ensure("world")?;
        let world = generate_world(&cfg.world)?;
        let mut texts = world.texts();
        texts.extend(template_words());
        let tok = Tokenizer::from_texts(texts.iter().map(String::as_str));
        world.corpus.save(&self.dir.corpus())?;
        write(&self.dir.tokenizer(), tok.to_file_string())?;

        let d = &cfg.data;
        let mut warnings = Vec::new();
        let attr = build_attribution_sets(&world.corpus, &world.train, d.attribution_per_type, d.top_n, d.seed);
        warnings.extend(attr.warnings);
        write_jsonl(&out.join("attribution_rel.jsonl"), &attr.items.rel)?;
        write_jsonl(&out.join("attribution_irrel.jsonl"), &attr.items.irrel)?;
        let held = build_attribution_sets(&world.corpus, &world.eval, d.attribution_per_type, d.top_n, d.seed ^ 1);
        warnings.extend(held.warnings);
        let held: Vec<AttributionInstance> = held.items.all().cloned().collect();
        write_jsonl(&out.join("attribution_heldout.jsonl"), &held)?;

        let dn = build_denoise_set(&world.corpus, &world.train, d.top_k, d.denoise_prompt, d.top_n, d.seed);
        warnings.extend(dn.warnings);
        write_jsonl(&out.join("denoise.jsonl"), &dn.items)?;
        let dn_held = build_denoise_set(&world.corpus, &world.eval, d.top_k, d.denoise_prompt, d.top_n, d.seed ^ 1);
        warnings.extend(dn_held.warnings);
        let dn_held: Vec<DenoiseInstance> = dn_held.items.into_iter().take(cfg.eval.heldout_denoise).collect();
        write_jsonl(&out.join("denoise_heldout.jsonl"), &dn_held)?;

        let rs = build_rs_set(&world, &world.train, d)?;
        warnings.extend(rs.warnings);
        write_jsonl(&out.join("rs.jsonl"), &rs.items)?;
        write_jsonl(&out.join("qa.jsonl"), &build_qa_set(&world.corpus, &world.eval, d))?;

        let mut w = warnings.join("\n");
        if !w.is_empty() {
            w.push('\n');
        }
        write(&out.join("warnings.txt"), w)
    }

    /// Plain language modelling on the corpus and the template instructions
    /// plus YES/NO supervision on the attribution task, from a fresh seeded
    /// initialisation.
    pub fn warmup(&self) -> Result<()> {
        self.warmup_inner().map_err(|e| e.in_stage("warmup"))
    }

    fn warmup_inner(&self) -> Result<()> {
        let cfg = &self.config;
        let tok = self.tokenizer()?;
        let corpus = self.corpus()?;
        let out = self.dir.ensure("warmup")?;
        let mut texts: Vec<String> = corpus.docs.iter().map(|d| d.text()).collect();
        texts.extend(instruction_texts());
        let mut examples = if cfg.warmup_packings == 0 {
            texts.iter().map(|t| document_example(&tok, t)).collect::<Result<Vec<_>>>()?
        } else {
            packed_documents(&tok, &texts, cfg.model.max_seq_len, cfg.warmup_packings, cfg.warmup.seed)?
        };
        for rel in ["world/attribution_rel.jsonl", "world/attribution_irrel.jsonl"] {
            for inst in self.jsonl::<AttributionInstance>(rel)? {
                examples.push(attribution_example(&tok, &inst)?);
            }
        }
        let mut model = MicroTransformer::new(cfg.model_config(tok.vocab_size()))?;
        let t = Instant::now();
        let log = train(&mut model, &examples, None, &cfg.warmup)?;
        let count = model.count_parameters(None)?;
        let report = TrainingReport {
            stage: Stage::Warmup,
            seed: cfg.warmup.seed,
            lr: cfg.warmup.lr,
            epochs: cfg.warmup.epochs,
            batch_size: cfg.warmup.batch_size,
            steps: log.steps,
            epoch_loss: log.epoch_loss,
            eot_before: None,
            eot_after: None,
            trainable: count.selected,
            total: count.total,
            fraction: count.fraction,
            wall_time_secs: t.elapsed().as_secs_f64(),
        };
        model.save(&self.dir.warmup_model())?;
        report.save(&out.join("report.txt"))?;

        let held: Vec<AttributionInstance> = self.jsonl("world/attribution_heldout.jsonl")?;
        write(&out.join("binary.txt"), binary_accuracy(&model, &tok, &held)?)
    }

    /// Integrated Gradients for every attribution instance over all layers.
    pub fn attribute(&self) -> Result<()> {
        self.attribute_inner().map_err(|e| e.in_stage("attribute"))
    }

    fn attribute_inner(&self) -> Result<()> {
        let tok = self.tokenizer()?;
        let model = self.load_model(&tok, &self.dir.warmup_model())?;
        let out = self.dir.ensure("attribution")?;
        let (n_layers, d_ff) = (model.config().n_layers, model.config().d_ff);
        for name in ["rel", "irrel"] {
            let insts: Vec<AttributionInstance> = self.jsonl(&format!("world/attribution_{name}.jsonl"))?;
            let inputs: Vec<IgInput> = insts
                .iter()
                .map(|i| IgInput::from_instance(&tok, i))
                .collect::<Result<_>>()?;
            let scores = attribute_all(&model, &inputs, &self.config.ig)?;
            let mut m = AttributionMatrix::new(n_layers, d_ff);
            for (input, s) in inputs.iter().zip(scores) {
                m.push(input.id.clone(), s)?;
            }
            m.save(&out.join(format!("{name}.attr")))?;
        }
        Ok(())
    }

    /// Candidate mining, decoupling, layer density and the top layers.
    pub fn mine(&self) -> Result<()> {
        self.mine_inner().map_err(|e| e.in_stage("mine"))
    }

    fn mine_inner(&self) -> Result<()> {
        let out = self.dir.ensure("mining")?;
        let load = |name: &str| {
            let p = self.dir.path(&format!("attribution/{name}.attr"));
            if !p.exists() {
                return Err(NritError::Contract(format!("missing {}; run attribute first", p.display())));
            }
            AttributionMatrix::load(&p)
        };
        let (rel_m, irrel_m) = (load("rel")?, load("irrel")?);
        let all = |m: &AttributionMatrix| (0..m.len()).collect::<Vec<_>>();
        let rel = mine_candidates(&rel_m, &all(&rel_m), &self.config.mining)?;
        let irrel = mine_candidates(&irrel_m, &all(&irrel_m), &self.config.mining)?;
        let sets = decouple(&rel, &irrel);
        if !sets.is_disjoint() || sets.rel_candidates() != rel.neurons || sets.irrel_candidates() != irrel.neurons {
            return Err(NritError::Contract("decoupled sets do not partition the candidates".into()));
        }
        let density = layer_density(&sets, rel_m.n_layers())?;
        let layers = top_k_layers(&density, self.config.top_layers)?;
        write(&self.dir.neurons(), mask_file(&sets, &layers))?;
        write(&out.join("density.csv"), density_csv(&density))?;
        let ranked: Vec<String> = layers.iter().map(usize::to_string).collect();
        write(&out.join("layers.txt"), format!("{}\n", ranked.join(",")))?;
        let mut summary = String::new();
        let _ = writeln!(summary, "rel_candidates={}", rel.neurons.len());
        let _ = writeln!(summary, "irrel_candidates={}", irrel.neurons.len());
        let _ = writeln!(summary, "rel={}", sets.rel.len());
        let _ = writeln!(summary, "irrel={}", sets.irrel.len());
        let _ = writeln!(summary, "shared={}", sets.shared.len());
        write(&out.join("summary.txt"), summary)
    }

    fn mined(&self) -> Result<(NeuronSets, Vec<usize>)> {
        let file = parse_neuron_file(&read(&self.dir.neurons())?)?;
        Ok((file.to_sets(), file.full_layers))
    }

    /// Stage 1: the irrelevant-context neurons learn to emit EOT.
    pub fn denoise(&self) -> Result<()> {
        self.denoise_inner().map_err(|e| e.in_stage("denoise"))
    }

    fn denoise_inner(&self) -> Result<()> {
        let tok = self.tokenizer()?;
        let corpus = self.corpus()?;
        let mut model = self.load_model(&tok, &self.dir.warmup_model())?;
        let (sets, _) = self.mined()?;
        let out = self.dir.ensure("stage1")?;
        let examples: Vec<TrainExample> = self
            .jsonl::<DenoiseInstance>("world/denoise.jsonl")?
            .iter()
            .map(|i| denoise_example(&tok, &corpus, i))
            .collect::<Result<_>>()?;
        let heldout: Vec<Vec<usize>> = self
            .jsonl::<DenoiseInstance>("world/denoise_heldout.jsonl")?
            .iter()
            .map(|i| denoise_example(&tok, &corpus, i).map(|e| e.prompt().to_vec()))
            .collect::<Result<_>>()?;
        let cfg = &self.config.stage1;
        write(&out.join("config.txt"), self.config.to_kv())?;
        let irrel_only = NeuronSets {
            irrel: sets.irrel.clone(),
            irrel_freq: sets.irrel_freq.clone(),
            ..NeuronSets::default()
        };
        write(&out.join("mask.txt"), render_neuron_file(&irrel_only.records(), &[]))?;
        let t = Instant::now();
        let outcome = stage1_denoise(&mut model, &sets.irrel, &examples, &heldout, cfg)?;
        model.save(&self.dir.stage1_model())?;
        TrainingReport::new(cfg, &outcome, t.elapsed().as_secs_f64()).save(&out.join("report.txt"))
    }

    /// Stage 2: all mined neurons plus the densest layers learn relevant
    /// summaries, restricted by the ablation.
    pub fn tune(&self) -> Result<()> {
        self.tune_inner().map_err(|e| e.in_stage("tune"))
    }

    fn tune_inner(&self) -> Result<()> {
        let tok = self.tokenizer()?;
        let corpus = self.corpus()?;
        let start = match self.ablation {
            Ablation::NoDenoise => self.dir.warmup_model(),
            _ => self.dir.stage1_model(),
        };
        let mut model = self.load_model(&tok, &start)?;
        let (mut sets, mut layers) = self.mined()?;
        match self.ablation {
            Ablation::NoNeurons => sets = NeuronSets::default(),
            Ablation::NoLayers => layers.clear(),
            Ablation::None | Ablation::NoDenoise => {}
        }
        let out = self.dir.ensure("stage2")?;
        let examples: Vec<TrainExample> = self
            .jsonl::<RsInstance>("world/rs.jsonl")?
            .iter()
            .map(|i| rs_example(&tok, &corpus, i, self.config.stage2_prompt))
            .collect::<Result<_>>()?;
        let cfg = &self.config.stage2;
        let mut run = self.config.to_kv();
        let _ = writeln!(run, "ablation={}", self.ablation.as_str());
        write(&out.join("config.txt"), run)?;
        write(&out.join("mask.txt"), mask_file(&sets, &layers))?;
        let t = Instant::now();
        let outcome = stage2_noise_filter(&mut model, &sets, &layers, self.config.stage2_head, &examples, cfg, self.config.scales)?;
        model.save(&self.dir.stage2_model())?;
        TrainingReport::new(cfg, &outcome, t.elapsed().as_secs_f64()).save(&out.join("report.txt"))
    }

    /// Scores the warm-up model (baseline) and the stage-2 model (tuned) on
    /// the same QA instances in the same order.
    pub fn eval(&self) -> Result<(EvalReport, EvalReport)> {
        self.eval_inner().map_err(|e| e.in_stage("eval"))
    }

    fn eval_inner(&self) -> Result<(EvalReport, EvalReport)> {
        let tok = self.tokenizer()?;
        let corpus = self.corpus()?;
        let qa: Vec<QaInstance> = self.jsonl("world/qa.jsonl")?;
        let density = self.density()?;
        let tuned_report = TrainingReport::load(&self.dir.path("stage2/report.txt"))?;
        self.dir.ensure("eval")?;
        let mut reports = Vec::new();
        for (label, path, fraction) in [
            ("baseline", self.dir.warmup_model(), None),
            ("tuned", self.dir.stage2_model(), Some(tuned_report.fraction)),
        ] {
            let model = self.load_model(&tok, &path)?;
            let (mut report, gens) = evaluate(&model, &tok, &corpus, &qa, Split::All, self.config.eval.max_new)?;
            report.label = label.to_string();
            report.seed = self.config.world.seed;
            report.trainable_fraction = fraction;
            report.density = density.clone();
            report.save(&self.dir.eval_report(label))?;
            write_jsonl(&self.dir.path(&format!("eval/{label}.jsonl")), &gens)?;
            reports.push(report);
        }
        let tuned = reports.pop().expect("two reports");
        let baseline = reports.pop().expect("two reports");
        Ok((baseline, tuned))
    }

    fn density(&self) -> Result<Vec<LayerDensity>> {
        let (sets, _) = self.mined()?;
        layer_density(&sets, self.config.model.n_layers)
    }

    /// Side-by-side summary of the run, also written to `summary.txt`.
    pub fn report(&self) -> Result<String> {
        self.report_inner().map_err(|e| e.in_stage("report"))
    }

    fn report_inner(&self) -> Result<String> {
        let baseline = EvalReport::load(&self.dir.eval_report("baseline"))?;
        let tuned = EvalReport::load(&self.dir.eval_report("tuned"))?;
        let (sets, layers) = self.mined()?;
        let mut out = String::new();
        let _ = writeln!(out, "ablation={}", self.ablation.as_str());
        for g in Group::ALL {
            let _ = writeln!(out, "neurons.{g}={}", sets.group(g).len());
        }
        let ranked: Vec<String> = layers.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "layers={}", ranked.join(","));
        for (name, path) in [("stage1", "stage1/report.txt"), ("stage2", "stage2/report.txt")] {
            let p = self.dir.path(path);
            if !p.exists() {
                continue;
            }
            let r = TrainingReport::load(&p)?;
            let _ = writeln!(out, "{name}.trainable={}", r.trainable);
            let _ = writeln!(out, "{name}.fraction={:?}", r.fraction);
            if let (Some(b), Some(a)) = (r.eot_before, r.eot_after) {
                let _ = writeln!(out, "{name}.eot_before={b:?}");
                let _ = writeln!(out, "{name}.eot_after={a:?}");
            }
        }
        let show = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |x| format!("{x:.4}"));
        for r in [&baseline, &tuned] {
            let l = &r.label;
            let _ = writeln!(out, "{l}.all.accuracy={}", show(r.all.accuracy()));
            let _ = writeln!(out, "{l}.present.accuracy={}", show(r.present.accuracy()));
            let _ = writeln!(out, "{l}.absent.accuracy={}", show(r.absent.accuracy()));
            let _ = writeln!(out, "{l}.absent.no_evidence_rate={}", show(r.absent.no_evidence_rate()));
        }
        write(&self.dir.path("summary.txt"), &out)?;
        Ok(out)
    }

    /// Every stage in order; `progress` hears each stage name before it runs.
    pub fn run_all(&self, progress: &mut dyn FnMut(&str)) -> Result<String> {
        progress("gen-world");
        self.gen_world()?;
        progress("warmup");
        self.warmup()?;
        progress("attribute");
        self.attribute()?;
        progress("mine");
        self.mine()?;
        if self.ablation != Ablation::NoDenoise {
            progress("denoise");
            self.denoise()?;
        }
        progress("tune");
        self.tune()?;
        progress("eval");
        self.eval()?;
        progress("report");
        self.report()
    }
}

/// Held-out YES/NO accuracy and mean gold probability of a model.
fn binary_accuracy(model: &MicroTransformer, tok: &Tokenizer, held: &[AttributionInstance]) -> Result<String> {
    let mut correct = 0;
    let mut mass = 0.0;
    let scope = ChoiceScope::Restricted(vec![YES, NO]);
    for inst in held {
        let input = IgInput::from_instance(tok, inst)?;
        let last = input.target_prompt.len() - 1;
        let p = model.choice_probability(&input.target_prompt, last, input.gold, &scope)?;
        mass += p;
        correct += usize::from(p > 0.5);
    }
    let n = held.len().max(1) as f64;
    Ok(format!(
        "n={}\naccuracy={:?}\nmean_gold_probability={:?}\n",
        held.len(),
        correct as f64 / n,
        mass / n
    ))
}
