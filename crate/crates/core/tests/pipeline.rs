use std::collections::BTreeSet;

use peerkt::eval::{run_cold_start, run_experiment, EvalConfig};
use peerkt::graph::{build_from_interactions, build_knowledge_base, BuildConfig, KnowledgeBase, Matcher};
use peerkt::ingest::{segment_all, split_student_disjoint, DatasetManifest};
use peerkt::predictor::HeuristicPredictor;
use peerkt::retrieval::{build_context, PredictionTarget, RetrievalConfig};
use peerkt::simulator::{generate, write_simulation, SimConfig, Simulation};
use peerkt::Error;

fn small_sim(seed: u64) -> Simulation {
    let mut cfg = SimConfig::new(seed);
    cfg.n_students = 40;
    cfg.n_questions = 24;
    cfg.n_concepts = 4;
    cfg.responses_per_student = 30;
    generate(&cfg).unwrap()
}

fn kb_from(sim: &Simulation) -> KnowledgeBase {
    build_from_interactions(
        sim.all_interactions(),
        sim.kc_graph.clone(),
        &BuildConfig::default(),
        &Matcher::default(),
    )
    .unwrap()
}

#[test]
fn files_on_disk_build_the_same_base_as_memory() {
    let sim = small_sim(3);
    let dir = tempfile::tempdir().unwrap();
    let manifests: Vec<DatasetManifest> = write_simulation(&sim, dir.path())
        .unwrap()
        .iter()
        .map(|p| DatasetManifest::from_file(p).unwrap())
        .collect();
    let from_disk = build_knowledge_base(&manifests, &BuildConfig::default(), &Matcher::default()).unwrap();
    let in_memory = kb_from(&sim);
    assert_eq!(from_disk.graph, in_memory.graph);
    assert_eq!(from_disk.irt, in_memory.irt);
    assert_eq!(from_disk.questions, in_memory.questions);
    assert_eq!(from_disk.repo, in_memory.repo);
}

#[test]
fn sources_with_different_spellings_share_question_groups() {
    let kb = kb_from(&small_sim(4));
    let groups_of = |src: &str| -> BTreeSet<&str> {
        kb.questions
            .values()
            .filter(|q| q.source_id == src)
            .map(|q| q.group.as_str())
            .collect()
    };
    let shared: Vec<_> = groups_of("src0").intersection(&groups_of("src1")).copied().collect();
    assert!(!shared.is_empty());
    assert_eq!(kb.concepts().len(), 4);
    for g in shared {
        let sources: BTreeSet<&str> = kb
            .students_of_group(g)
            .iter()
            .map(|s| kb.student_sources[*s].as_str())
            .collect();
        assert_eq!(sources.len(), 2, "{g} drawn from {sources:?}");
    }
}

#[test]
fn retrieval_never_returns_the_target_and_respects_top_k() {
    let sim = small_sim(5);
    let kb = kb_from(&sim);
    let matcher = Matcher::default();
    for top_k in 1..=4 {
        let cfg = RetrievalConfig {
            top_k,
            ..RetrievalConfig::default()
        };
        for student in ["src0-u0001", "src1-u0007"] {
            let history = kb.repo.history(student).to_vec();
            let ctx = build_context(&kb, &PredictionTarget::from_window(&history).unwrap(), Some(&matcher), &cfg)
                .unwrap();
            assert!(ctx.peers.len() <= top_k);
            assert!(ctx.peers.iter().all(|p| p.similarity.candidate != student));
        }
    }
}

#[test]
fn evaluating_students_in_the_base_is_refused() {
    let sim = small_sim(6);
    let kb = kb_from(&sim);
    let seqs = segment_all(&sim.all_interactions(), 25).unwrap();
    let err = run_experiment(&kb, &seqs[..3], &HeuristicPredictor::default(), None, &EvalConfig::default()).unwrap_err();
    assert!(matches!(err, Error::LeakageDetected { .. }));
}

#[test]
fn held_out_evaluation_is_repeatable() {
    let sim = small_sim(7);
    let all = sim.all_interactions();
    let split = split_student_disjoint(segment_all(&all, 25).unwrap(), 20, 2).unwrap();
    let held: BTreeSet<&str> = split.test_students();
    let train = all.iter().filter(|i| !held.contains(i.student_id.as_str())).cloned().collect();
    let kb = build_from_interactions(train, sim.kc_graph.clone(), &BuildConfig::default(), &Matcher::default())
        .unwrap();
    let run = || {
        run_experiment(
            &kb,
            &split.test,
            &HeuristicPredictor::default(),
            Some(&Matcher::default()),
            &EvalConfig::default(),
        )
        .unwrap()
    };
    let a = run();
    assert!(a.n_sequences >= 20);
    assert_eq!(a.n_sequences, split.test.len());
    assert_eq!(a.n_failed, 0);
    assert_eq!(a.to_json().unwrap(), run().to_json().unwrap());
}

#[test]
fn cold_start_requires_disjoint_sources() {
    let sim = small_sim(8);
    let a = &sim.source("src0").unwrap().interactions;
    let b = &sim.source("src1").unwrap().interactions;
    let kb = build_from_interactions(a.clone(), sim.kc_graph.clone(), &BuildConfig::default(), &Matcher::default())
        .unwrap();
    let predictor = HeuristicPredictor::default();
    let own = segment_all(a, 25).unwrap();
    let err = run_cold_start(&kb, &own, &predictor, Some(&Matcher::default()), &EvalConfig::default()).unwrap_err();
    assert!(matches!(err, Error::SourceOverlap(_)));

    let other = segment_all(b, 25).unwrap();
    let report = run_cold_start(&kb, &other, &predictor, Some(&Matcher::default()), &EvalConfig::default()).unwrap();
    assert_eq!(report.n_failed, 0);
    assert_eq!(report.n_sequences, other.len());
}
