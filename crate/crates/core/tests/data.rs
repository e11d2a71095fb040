use std::collections::BTreeSet;

use nrit_core::data::*;
use nrit_core::text;
use nrit_core::NritError;
use proptest::prelude::*;

fn small_spec() -> WorldSpec {
    WorldSpec {
        n_entities: 30,
        n_relations: 8,
        facts_per_entity: 3,
        distractor_pool_size: 12,
        multi_hop_fraction: 0.2,
        n_eval_queries: 20,
        seed: 3,
        ..WorldSpec::default()
    }
}

/// Independent scorer: sort by (score desc, id asc) over a fresh token scan.
fn brute_force(query: &str, corpus: &Corpus, top_n: usize, top_k: usize) -> Vec<(String, usize)> {
    let stop: BTreeSet<&str> = STOPWORDS.iter().copied().collect();
    let q: BTreeSet<String> = text::tokens(query).into_iter().filter(|t| !stop.contains(t.as_str())).collect();
    let mut all: Vec<(String, usize)> = corpus
        .docs
        .iter()
        .map(|d| {
            let dt: BTreeSet<String> = text::tokens(&d.text()).into_iter().collect();
            (d.id.clone(), q.iter().filter(|t| dt.contains(*t)).count())
        })
        .collect();
    all.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.into_iter().take(top_n.min(top_k)).collect()
}

fn pairs(r: Vec<Retrieved>) -> Vec<(String, usize)> {
    r.into_iter().map(|r| (r.doc_id, r.score)).collect()
}

#[test]
fn world_is_deterministic() {
    let a = generate_world(&small_spec()).unwrap();
    let b = generate_world(&small_spec()).unwrap();
    assert_eq!(a.corpus.to_tsv(), b.corpus.to_tsv());
    assert_eq!(a, b);
    let mut other = small_spec();
    other.seed = 4;
    assert_ne!(generate_world(&other).unwrap().corpus.to_tsv(), a.corpus.to_tsv());
}

#[test]
fn fact_and_query_counts() {
    let spec = WorldSpec {
        n_entities: 10,
        n_relations: 5,
        facts_per_entity: 3,
        distractor_pool_size: 0,
        multi_hop_fraction: 0.0,
        n_eval_queries: 5,
        ..WorldSpec::default()
    };
    let w = generate_world(&spec).unwrap();
    assert_eq!(w.facts.len(), 30);
    assert_eq!(w.train.len() + w.eval.len(), 30);
    assert_eq!(w.eval.len(), 5);
    assert_eq!(w.corpus.len(), 10);
}

#[test]
fn every_gold_answer_occurs_in_a_document() {
    let w = generate_world(&small_spec()).unwrap();
    assert!(w.queries().any(|q| q.chain.len() == 2));
    for q in w.queries() {
        let gold = text::tokens(&q.gold_answers[0]);
        assert!(
            w.corpus.docs.iter().any(|d| contains_tokens(&text::tokens(&d.text()), &gold)),
            "{}",
            q.id
        );
        // the chain's last object is the answer
        assert_eq!(w.facts[*q.chain.last().unwrap()].object, q.gold_answers[0]);
    }
    let train: BTreeSet<_> = w.train.iter().map(|q| &q.text).collect();
    assert!(w.eval.iter().all(|q| !train.contains(&q.text)));
}

#[test]
fn invalid_specs_are_generation_errors() {
    let bad = [
        WorldSpec { facts_per_entity: 9, ..small_spec() },
        WorldSpec { n_relations: 21, ..small_spec() },
        WorldSpec { n_eval_queries: 10_000, ..small_spec() },
        WorldSpec { sentence: "{subject} {object}".into(), ..small_spec() },
        WorldSpec { n_entities: 1, ..small_spec() },
    ];
    for spec in bad {
        assert!(matches!(generate_world(&spec), Err(NritError::Generation(_))), "{spec:?}");
    }
}

#[test]
fn corpus_tsv_round_trip() {
    let w = generate_world(&small_spec()).unwrap();
    let back = Corpus::from_tsv(&w.corpus.to_tsv()).unwrap();
    assert_eq!(back.to_tsv(), w.corpus.to_tsv());
    for (a, b) in back.docs.iter().zip(&w.corpus.docs) {
        assert_eq!(a.sentences, b.sentences);
    }
    assert!(Corpus::from_tsv("no tab here\n").is_err());
    assert!(Corpus::from_tsv("a\tx.\na\ty.\n").is_err());
}

#[test]
fn retrieval_matches_brute_force_on_every_query() {
    let w = generate_world(&WorldSpec::default()).unwrap();
    let r = Retriever::new(&w.corpus);
    for q in w.queries() {
        assert_eq!(pairs(r.retrieve(&q.text, 50, 5)), brute_force(&q.text, &w.corpus, 50, 5));
        assert_eq!(pairs(r.rank_all(&q.text)), brute_force(&q.text, &w.corpus, usize::MAX, usize::MAX));
    }
}

#[test]
fn retrieval_contracts() {
    let w = generate_world(&small_spec()).unwrap();
    let r = Retriever::new(&w.corpus);
    let ranked = r.rank_all("zzqx unrelated words");
    assert!(ranked.iter().all(|d| d.score == 0));
    let ids: Vec<_> = ranked.iter().map(|d| d.doc_id.clone()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    // a document's own text ranks it first
    let doc = &w.corpus.docs[7];
    assert_eq!(r.retrieve(&doc.text(), 50, 1)[0].doc_id, doc.id);
    // asking for more than exists returns everything
    assert_eq!(r.retrieve("capital", 1000, 1000).len(), w.corpus.len());
    assert_eq!(retrieve("capital", &w.corpus, 3, 5).len(), 3);
}

#[test]
fn attribution_sets_follow_construction_rules() {
    let w = generate_world(&small_spec()).unwrap();
    let built = build_attribution_sets(&w.corpus, &w.train, 1000, 50, 1);
    let sets = built.items;
    assert_eq!(sets.rel.len(), sets.irrel.len());
    assert!(!sets.rel.is_empty());
    for (r, i) in sets.rel.iter().zip(&sets.irrel) {
        r.validate().unwrap();
        i.validate().unwrap();
        let gold = text::tokens(&r.proposed_answer);
        assert!(contains_tokens(&text::tokens(&r.context), &gold));
        assert_eq!((r.gold, i.gold), (0, 1));
        assert_eq!(r.context_type, ContextType::Rel);
        let q = content_tokens(&i.question);
        assert!(content_tokens(&i.context).is_disjoint(&q), "{}", i.id);
        assert!(!contains_tokens(&text::tokens(&i.context), &gold));
        assert!(r.prompt().unwrap().ends_with("The correct answer is"));
    }
    let capped = build_attribution_sets(&w.corpus, &w.train, 4, 50, 1).items;
    assert_eq!((capped.rel.len(), capped.irrel.len()), (4, 4));
    // skipped queries are reported
    let total = w.train.len();
    assert_eq!(sets.rel.len() + built.warnings.len(), total);
}

#[test]
fn denoise_documents_never_hold_the_answer() {
    let w = generate_world(&small_spec()).unwrap();
    let set = build_denoise_set(&w.corpus, &w.train, 5, DenoisePrompt::Irrelevant, 50, 0).items;
    assert_eq!(set.len(), w.train.len());
    for (inst, q) in set.iter().zip(&w.train) {
        assert_eq!(inst.doc_ids.len(), 5);
        let gold = text::tokens(&q.gold_answers[0]);
        for t in doc_texts(&w.corpus, &inst.doc_ids).unwrap() {
            assert!(!contains_tokens(&text::tokens(&t), &gold));
            assert!(content_tokens(&t).is_disjoint(&content_tokens(&q.text)));
        }
    }
    let rel = build_denoise_set(&w.corpus, &w.train, 5, DenoisePrompt::Relevant, 50, 0).items;
    assert_eq!(rel[0].doc_ids, pairs(retrieve(&w.train[0].text, &w.corpus, 50, 5)).into_iter().map(|p| p.0).collect::<Vec<_>>());
    let none = build_denoise_set(&w.corpus, &w.train, 10_000, DenoisePrompt::Irrelevant, 50, 0);
    assert!(none.items.is_empty());
    assert_eq!(none.warnings.len(), w.train.len());
}

#[test]
fn summaries_are_extractive_and_capped() {
    let w = generate_world(&small_spec()).unwrap();
    let cfg = DataConfig {
        rs_absent_fraction: 0.5,
        ..DataConfig::default()
    };
    let set = build_rs_set(&w, &w.train, &cfg).unwrap().items;
    let absent = set.iter().filter(|s| s.id.starts_with("rs-absent-")).count();
    assert_eq!(absent, (w.train.len() as f64 * 0.5).round() as usize);
    for inst in &set {
        if inst.summary == NO_EVIDENCE {
            continue;
        }
        let docs: Vec<_> = inst.doc_ids.iter().map(|id| w.corpus.get(id).unwrap()).collect();
        for s in inst.summary.trim_end_matches('.').split(". ") {
            assert!(docs.iter().any(|d| d.sentences.iter().any(|x| x == s)), "{s}");
        }
        assert!(text::tokens(&inst.summary).len() <= 142);
    }
    assert!(set.iter().filter(|s| !s.id.starts_with("rs-absent-")).all(|s| s.summary != NO_EVIDENCE || s.doc_ids.len() == 5));
    let tight = DataConfig { summary_cap: 7, ..DataConfig::default() };
    for inst in build_rs_set(&w, &w.train, &tight).unwrap().items {
        assert!(inst.summary == NO_EVIDENCE || text::tokens(&inst.summary).len() <= 7);
    }
}

fn doc(id: &str, sentences: &[&str]) -> Document {
    Document {
        id: id.into(),
        sentences: sentences.iter().map(|s| s.to_string()).collect(),
        subjects: BTreeSet::new(),
    }
}

#[test]
fn hand_built_summary() {
    let facts = vec![Fact {
        subject: "bavo".into(),
        relation: "capital".into(),
        object: "kelim".into(),
    }];
    let corpus = Corpus {
        docs: vec![
            doc("d1", &["the river of zuna is pell", "the capital of zuna is mot"]),
            doc("d2", &["the capital of bavo is kelim", "the river of bavo is sorn"]),
            doc("d3", &["the mascot of tiro is fen"]),
            doc("d4", &["the color of gara is blu"]),
            doc("d5", &["the dish of hemo is kash"]),
        ],
    };
    let q = Query {
        id: "q".into(),
        text: "what is the capital of bavo?".into(),
        gold_answers: vec!["kelim".into()],
        chain: vec![0],
    };
    let world = World {
        spec: WorldSpec::default(),
        facts,
        corpus: corpus.clone(),
        train: vec![q.clone()],
        eval: vec![],
    };
    let ids: Vec<String> = (1..=5).map(|i| format!("d{i}")).collect();
    assert_eq!(oracle_summary(&world, &q, &corpus, &ids, 142).unwrap(), "the capital of bavo is kelim.");
    let distractors: Vec<String> = ["d1", "d3", "d4", "d5"].iter().map(|s| s.to_string()).collect();
    assert_eq!(oracle_summary(&world, &q, &corpus, &distractors, 142).unwrap(), NO_EVIDENCE);
}

#[test]
fn qa_presence_labels_match_a_scan() {
    let w = generate_world(&small_spec()).unwrap();
    let qa = build_qa_set(&w.corpus, &w.eval, &DataConfig::default());
    assert_eq!(qa.len(), 2 * w.eval.len());
    let present = qa.iter().filter(|q| q.answer_present).count();
    let absent = qa.iter().filter(|q| !q.answer_present).count();
    assert_eq!(present + absent, qa.len());
    for inst in &qa {
        let gold = text::tokens(&inst.gold_answers[0]);
        let scan = doc_texts(&w.corpus, &inst.doc_ids)
            .unwrap()
            .iter()
            .any(|t| contains_tokens(&text::tokens(t), &gold));
        assert_eq!(scan, inst.answer_present, "{}", inst.id);
        assert_eq!(inst.doc_ids.len(), 5);
        if inst.id.ends_with("-absent") {
            assert!(!inst.answer_present);
        }
    }
}

#[test]
fn jsonl_records_have_exact_fields() {
    let w = generate_world(&small_spec()).unwrap();
    let attr = build_attribution_sets(&w.corpus, &w.train, 2, 50, 0).items;
    let dn = build_denoise_set(&w.corpus, &w.train[..2], 5, DenoisePrompt::Irrelevant, 50, 0).items;
    let rs = build_rs_set(&w, &w.train[..2], &DataConfig::default()).unwrap().items;
    let qa = build_qa_set(&w.corpus, &w.eval[..2], &DataConfig::default());
    let keys = |line: &str| -> Vec<String> {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    let first = |s: String| s.lines().next().unwrap().to_string();
    assert_eq!(
        keys(&first(to_jsonl(&attr.rel))),
        ["choices", "context", "gold", "id", "proposed_answer", "question", "type"]
    );
    assert!(first(to_jsonl(&attr.irrel)).contains("\"type\":\"irrel\""));
    assert_eq!(keys(&first(to_jsonl(&dn))), ["doc_ids", "id", "question"]);
    assert_eq!(keys(&first(to_jsonl(&rs))), ["doc_ids", "id", "question", "summary"]);
    assert_eq!(keys(&first(to_jsonl(&qa))), ["answer_present", "doc_ids", "gold_answers", "id", "question"]);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("qa.jsonl");
    write_jsonl(&p, &qa).unwrap();
    assert_eq!(read_jsonl::<QaInstance>(&p).unwrap(), qa);
    assert_eq!(from_jsonl::<AttributionInstance>(&to_jsonl(&attr.rel)).unwrap(), attr.rel);
    assert!(from_jsonl::<RsInstance>("{\"id\":1}\n").is_err());
}

#[test]
fn tokenizer_covers_world_and_templates() {
    let w = generate_world(&small_spec()).unwrap();
    let mut texts = w.texts();
    texts.extend(template_words());
    let tok = nrit_core::model::Tokenizer::from_texts(texts.iter().map(String::as_str));
    let attr = build_attribution_sets(&w.corpus, &w.train, 3, 50, 0).items;
    for a in attr.all() {
        tok.encode(&a.prompt().unwrap()).unwrap();
    }
    for q in w.queries() {
        let ids = tok.encode(&q.text).unwrap();
        assert_eq!(tok.decode(&ids), text::normalize(&q.text));
    }
}

fn arb_corpus() -> impl Strategy<Value = Corpus> {
    let word = prop::sample::select(vec!["alpha", "beta", "gamma", "delta", "the", "of", "is", "eps", "zeta", "eta"]);
    let sentence = prop::collection::vec(word, 1..6).prop_map(|w| w.join(" "));
    prop::collection::vec(prop::collection::vec(sentence, 1..4), 1..60).prop_map(|docs| {
        let mut docs: Vec<Document> = docs
            .into_iter()
            .enumerate()
            .map(|(i, s)| Document {
                // ids deliberately not in numeric order
                id: format!("d{}", (i * 37) % 101),
                sentences: s,
                subjects: BTreeSet::new(),
            })
            .collect();
        docs.sort_by(|a, b| a.id.cmp(&b.id));
        Corpus { docs }
    })
}

proptest! {
    #[test]
    fn retrieval_equals_brute_force(corpus in arb_corpus(), query in "(alpha|beta|gamma|zeta|the|of)( (alpha|beta|gamma|zeta|the|of)){0,4}", n in 1usize..70, k in 1usize..10) {
        let got = pairs(Retriever::new(&corpus).retrieve(&query, n, k));
        prop_assert_eq!(got, brute_force(&query, &corpus, n, k));
    }

    #[test]
    fn match_rule_is_contiguous(hay in prop::collection::vec("[ab]", 0..8), needle in prop::collection::vec("[ab]", 0..3)) {
        let expected = !needle.is_empty() && (0..hay.len()).any(|i| hay[i..].starts_with(&needle));
        prop_assert_eq!(contains_tokens(&hay, &needle), expected);
    }
}
