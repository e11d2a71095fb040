use std::path::{Path, PathBuf};

use nrit_core::data::{read_jsonl, Corpus, QaInstance, NO_EVIDENCE};
use nrit_core::harness::{
    evaluate, match_metric, tally, Ablation, EvalReport, Generation, Generator, Pipeline, PipelineConfig, Split,
    Tally,
};
use nrit_core::model::{TokenId, Tokenizer, EOT};
use nrit_core::neuron::parse_neuron_file;
use nrit_core::tuning::TrainingReport;
use nrit_core::NritError;
use proptest::prelude::*;

fn smoke_config() -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf");
    PipelineConfig::load(&path).unwrap()
}

fn smoke_run(dir: &Path, ablation: Ablation) -> Pipeline {
    let p = Pipeline::new(smoke_config(), dir, ablation);
    p.run_all(&mut |_| {}).unwrap();
    p
}

#[test]
fn config_round_trips_through_kv() {
    let cfg = smoke_config();
    assert_eq!(PipelineConfig::parse(&cfg.to_kv()).unwrap(), cfg);
    let d = PipelineConfig::default();
    assert_eq!(PipelineConfig::parse(&d.to_kv()).unwrap(), d);
    assert_eq!(PipelineConfig::parse("").unwrap(), d);
}

#[test]
fn config_keys_follow_file_order_and_comments() {
    let cfg = PipelineConfig::parse(
        "# comment\nseed=11\nwarmup.seed=99   # trailing comment\n\nmodel.d_ff = 32\ntrain.batch=2\ntrain.stage2.batch=8\n",
    )
    .unwrap();
    assert_eq!(cfg.world.seed, 11);
    assert_eq!(cfg.warmup.seed, 99);
    assert_ne!(cfg.stage1.seed, 99);
    assert_eq!(cfg.model.d_ff, 32);
    assert_eq!(cfg.stage1.batch_size, 2);
    assert_eq!(cfg.stage2.batch_size, 8);
    let t = PipelineConfig::parse("mining.top_t=25\n").unwrap();
    assert_eq!(t.mining.aggregation, nrit_core::attribution::Aggregation::TopT(25));
}

#[test]
fn config_errors_are_config_errors() {
    for bad in [
        "model.d_fff=3",
        "seed=1\nseed=2",
        "ig.steps=many",
        "no equals sign",
        "model.d_model=30\nmodel.n_heads=4",
        "layers.top_k=9",
        "train.stage2.prompt=chat",
        "world.facts_per_entity=50",
        "mining.percentile=1.5",
        "eval.max_new=0",
    ] {
        let e = PipelineConfig::parse(bad).unwrap_err();
        assert!(matches!(e, NritError::Config(_)), "{bad:?} gave {e}");
        assert_eq!(e.exit_code(), 2);
    }
}

fn qa(id: &str, present: bool, gold: &str) -> QaInstance {
    QaInstance {
        id: id.into(),
        question: format!("what is the color of {id}?"),
        gold_answers: vec![gold.into()],
        doc_ids: vec!["d0".into()],
        answer_present: present,
    }
}

fn tiny_world() -> (Tokenizer, Corpus, Vec<QaInstance>) {
    let corpus = Corpus::from_tsv("d0\tthe color of alpha is red.\n").unwrap();
    let mut texts: Vec<String> = vec!["the color of alpha is red blue green".into(), NO_EVIDENCE.into()];
    texts.extend(nrit_core::data::template_words());
    for i in 0..6 {
        texts.push(format!("what is the color of q{i}"));
    }
    let tok = Tokenizer::from_texts(texts.iter().map(String::as_str));
    let set = vec![
        qa("q0", true, "red"),
        qa("q1", false, "blue"),
        qa("q2", true, "green"),
        qa("q3", false, "red"),
        qa("q4", true, "blue"),
    ];
    (tok, corpus, set)
}

/// Answers every prompt with a fixed token sequence.
struct Fixed(Vec<TokenId>);

impl Generator for Fixed {
    fn generate(&self, _prompt: &[TokenId], max_new: usize) -> nrit_core::Result<Vec<TokenId>> {
        Ok(self.0.iter().copied().take(max_new).collect())
    }
    fn max_seq_len(&self) -> usize {
        10_000
    }
}

/// Looks up the gold answer from the question's subject token.
struct Oracle {
    tok: Tokenizer,
    answers: Vec<(TokenId, TokenId)>,
}

impl Generator for Oracle {
    fn generate(&self, prompt: &[TokenId], _max_new: usize) -> nrit_core::Result<Vec<TokenId>> {
        let (_, a) = self
            .answers
            .iter()
            .find(|(s, _)| prompt.contains(s))
            .expect("subject in prompt");
        Ok(vec![self.tok.id("the").unwrap(), *a])
    }
    fn max_seq_len(&self) -> usize {
        10_000
    }
}

#[test]
fn oracle_stub_scores_one_and_eot_stub_scores_zero() {
    let (tok, corpus, set) = tiny_world();
    let oracle = Oracle {
        answers: set
            .iter()
            .map(|q| (tok.id(&q.id).unwrap(), tok.id(&q.gold_answers[0]).unwrap()))
            .collect(),
        tok: tok.clone(),
    };
    let (r, gens) = evaluate(&oracle, &tok, &corpus, &set, Split::All, 4).unwrap();
    assert_eq!(r.all.accuracy(), Some(1.0));
    assert_eq!(r.present.accuracy(), Some(1.0));
    assert_eq!(r.absent.accuracy(), Some(1.0));
    assert_eq!(gens.iter().map(|g| g.id.as_str()).collect::<Vec<_>>(), ["q0", "q1", "q2", "q3", "q4"]);

    // greedy decoding stops before EOT, so an EOT-first model says nothing
    let (r, gens) = evaluate(&Fixed(vec![]), &tok, &corpus, &set, Split::All, 4).unwrap();
    assert_eq!(r.all.accuracy(), Some(0.0));
    assert_eq!(r.all.no_evidence_rate(), Some(1.0));
    assert!(gens.iter().all(|g| g.output.is_empty()));
}

#[test]
fn split_sizes_partition_and_empty_split_is_absent() {
    let (tok, corpus, set) = tiny_world();
    let stub = Fixed(tok.encode("the color of alpha is red").unwrap());
    let (all, _) = evaluate(&stub, &tok, &corpus, &set, Split::All, 8).unwrap();
    assert_eq!(all.present.n + all.absent.n, all.all.n);
    assert_eq!((all.present.n, all.absent.n), (3, 2));
    assert_eq!(all.present.accuracy(), Some(1.0 / 3.0));
    assert_eq!(all.absent.accuracy(), Some(0.5));

    let (p, _) = evaluate(&stub, &tok, &corpus, &set, Split::AnswerPresent, 8).unwrap();
    assert_eq!((p.all.n, p.absent.n), (3, 0));
    assert_eq!(p.absent.accuracy(), None);
    assert!(p.to_kv().contains("absent.accuracy=absent\n"));
    let (a, _) = evaluate(&stub, &tok, &corpus, &set, Split::AnswerAbsent, 8).unwrap();
    assert_eq!(a.present.accuracy(), None);
    assert_eq!(a.all.n, 2);
}

#[test]
fn generation_is_clipped_to_the_context_window() {
    struct Counting;
    impl Generator for Counting {
        fn generate(&self, prompt: &[TokenId], max_new: usize) -> nrit_core::Result<Vec<TokenId>> {
            assert!(prompt.len() + max_new <= self.max_seq_len());
            Ok(vec![EOT; 0])
        }
        fn max_seq_len(&self) -> usize {
            60
        }
    }
    let (tok, corpus, set) = tiny_world();
    evaluate(&Counting, &tok, &corpus, &set, Split::All, 1000).unwrap();
}

#[test]
fn missing_gold_answers_is_a_contract_error() {
    let (tok, corpus, mut set) = tiny_world();
    set[1].gold_answers.clear();
    let e = evaluate(&Fixed(vec![]), &tok, &corpus, &set, Split::All, 4).unwrap_err();
    assert!(matches!(e, NritError::Contract(_)));
}

#[test]
fn eval_report_round_trips_and_rejects_bad_counts() {
    let r = EvalReport {
        label: "tuned".into(),
        seed: 4,
        all: Tally { n: 5, matched: 2, no_evidence: 1 },
        present: Tally { n: 3, matched: 2, no_evidence: 0 },
        absent: Tally { n: 2, matched: 0, no_evidence: 1 },
        trainable_fraction: Some(0.125),
        density: nrit_core::attribution::layer_density(&Default::default(), 2).unwrap(),
    };
    assert_eq!(EvalReport::from_kv(&r.to_kv()).unwrap(), r);
    let broken = r.to_kv().replace("absent.n=2", "absent.n=3");
    assert!(EvalReport::from_kv(&broken).is_err());
    let broken = r.to_kv().replace("all.matched=2", "all.matched=9");
    assert!(EvalReport::from_kv(&broken).is_err());
}

proptest! {
    #[test]
    fn tallies_partition(flags in prop::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 0..40)) {
        let gens: Vec<Generation> = flags
            .iter()
            .enumerate()
            .map(|(i, &(p, m, e))| Generation {
                id: i.to_string(),
                answer_present: p,
                output: String::new(),
                matched: m,
                no_evidence: e,
            })
            .collect();
        let (all, present, absent) = tally(&gens);
        prop_assert_eq!(present.n + absent.n, all.n);
        prop_assert_eq!(present.matched + absent.matched, all.matched);
        prop_assert_eq!(all.matched, flags.iter().filter(|f| f.1).count());
        for t in [all, present, absent] {
            if let Some(a) = t.accuracy() {
                prop_assert!((0.0..=1.0).contains(&a));
            } else {
                prop_assert_eq!(t.n, 0);
            }
        }
    }

    #[test]
    fn match_agrees_with_token_window_search(
        words in prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..8),
        gold in prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 1..3),
    ) {
        let generated = words.join(" ");
        let g = gold.join(" ");
        let expected = words.windows(gold.len()).any(|w| w == gold.as_slice());
        prop_assert_eq!(match_metric(&generated.to_uppercase(), &[g]), u8::from(expected));
    }
}

fn tree(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_writes_every_artifact_and_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    smoke_run(a.path(), Ablation::None);
    smoke_run(b.path(), Ablation::None);
    let files = tree(a.path());
    for f in [
        "config.txt",
        "world/corpus.tsv",
        "world/qa.jsonl",
        "warmup/model.nrit",
        "attribution/rel.attr",
        "mining/neurons.txt",
        "mining/density.csv",
        "stage1/model.nrit",
        "stage1/mask.txt",
        "stage2/model.nrit",
        "stage2/mask.txt",
        "eval/baseline.txt",
        "eval/tuned.jsonl",
        "summary.txt",
    ] {
        assert!(files.contains(&PathBuf::from(f)), "missing {f}");
    }
    assert_eq!(files, tree(b.path()));
    for f in &files {
        // wall-clock time is the only run-to-run difference
        if f.ends_with("report.txt") {
            let strip = |p: &Path| {
                let r = TrainingReport::load(p).unwrap();
                TrainingReport { wall_time_secs: 0.0, ..r }
            };
            assert_eq!(strip(&a.path().join(f)), strip(&b.path().join(f)));
            continue;
        }
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{} differs", f.display());
    }
    let qa: Vec<QaInstance> = read_jsonl(&a.path().join("world/qa.jsonl")).unwrap();
    let tuned = EvalReport::load(&a.path().join("eval/tuned.txt")).unwrap();
    assert_eq!(tuned.all.n, qa.len());
    assert_eq!(tuned.present.n, qa.iter().filter(|q| q.answer_present).count());
}

#[test]
fn ablations_restrict_the_stage2_mask() {
    let dir = tempfile::tempdir().unwrap();
    let full = smoke_run(dir.path(), Ablation::None);
    let neurons_file = |p: &Pipeline| parse_neuron_file(&std::fs::read_to_string(p.dir.path("stage2/mask.txt")).unwrap()).unwrap();
    let mined = neurons_file(&full);
    assert!(!mined.records.is_empty() && !mined.full_layers.is_empty());
    let trainable = |p: &Pipeline| TrainingReport::load(&p.dir.path("stage2/report.txt")).unwrap().trainable;
    let t_full = trainable(&full);

    let no_layers = Pipeline::new(smoke_config(), dir.path(), Ablation::NoLayers);
    no_layers.tune().unwrap();
    let m = neurons_file(&no_layers);
    assert_eq!(m.records, mined.records);
    assert!(m.full_layers.is_empty());
    assert!(trainable(&no_layers) < t_full);

    let no_neurons = Pipeline::new(smoke_config(), dir.path(), Ablation::NoNeurons);
    no_neurons.tune().unwrap();
    let m = neurons_file(&no_neurons);
    assert!(m.records.is_empty());
    assert_eq!(m.full_layers, mined.full_layers);

    // without denoising, stage 2 starts from the warm-up checkpoint
    let other = tempfile::tempdir().unwrap();
    let nd = Pipeline::new(smoke_config(), other.path(), Ablation::NoDenoise);
    nd.run_all(&mut |_| {}).unwrap();
    assert!(!nd.dir.stage1_model().exists());
    assert!(nd.dir.stage2_model().exists());
}

#[test]
fn stage_failures_name_the_stage_and_keep_earlier_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(smoke_config(), dir.path(), Ablation::None);
    let e = p.warmup().unwrap_err();
    assert!(e.to_string().contains("warmup"), "{e}");
    assert_eq!(e.exit_code(), 3);

    p.gen_world().unwrap();
    std::fs::write(p.dir.tokenizer(), "not a tokenizer\n").unwrap();
    let e = p.warmup().unwrap_err();
    assert!(matches!(&e, NritError::Stage { stage: "warmup", .. }), "{e}");
    assert!(p.dir.corpus().exists());
}
