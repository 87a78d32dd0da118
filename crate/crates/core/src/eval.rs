//! Metrics, the experiment runner over held-out sequences, the multi-seed
//! split protocol, and cold-start evaluation against a foreign knowledge base.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_string;
use crate::domain::Interaction;
use crate::error::{Error, Result};
use crate::graph::{build_from_interactions, BuildConfig, KcGraph, KnowledgeBase, MatchMethod, Matcher};
use crate::ingest::{segment_all, split_student_disjoint, EvalSequence, SPLIT_PRNG};
use crate::predictor::Predictor;
use crate::prompt::Label;
use crate::retrieval::{build_context, PoolLevel, PredictionTarget, RetrievalConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub retrieval: RetrievalConfig,
    pub threshold: f64,
    /// Window length when segmenting histories.
    pub seq_len: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            threshold: 0.5,
            seq_len: 25,
            n_test: 1000,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sequence_id: String,
    pub student_id: String,
    pub question_id: String,
    pub source_id: String,
    pub truth: bool,
    pub probability: Option<f64>,
    pub predicted: Option<Label>,
    pub imputed: bool,
    pub clamped: bool,
    pub failed: bool,
    pub error: Option<String>,
    pub pool: Option<PoolLevel>,
    pub concept_method: Option<MatchMethod>,
    /// Whether the target's (concept, difficulty) resolved to an existing group.
    pub group_resolved: bool,
    /// Target's accuracy over its own visible history.
    pub history_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub acc: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub f1: f64,
}

/// Probability that a random positive scores above a random negative,
/// ties counted one half, via average ranks.
pub fn auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 || labels.len() != scores.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

pub fn compute_metrics(labels: &[bool], probs: &[f64], threshold: f64) -> Result<Metrics> {
    if labels.is_empty() || labels.len() != probs.len() {
        return Err(Error::NoUsableRecords);
    }
    let (mut tp, mut fp, mut fneg, mut hits) = (0usize, 0usize, 0usize, 0usize);
    for (&truth, &p) in labels.iter().zip(probs) {
        let predicted = p >= threshold;
        if predicted == truth {
            hits += 1;
        }
        match (predicted, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(Metrics {
        n: labels.len(),
        acc: hits as f64 / labels.len() as f64,
        auc: auc(labels, probs),
        f1: if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 },
    })
}

/// Metrics over the non-failed records.
pub fn metrics(records: &[EvalRecord], threshold: f64) -> Result<Metrics> {
    let (labels, probs): (Vec<bool>, Vec<f64>) = records
        .iter()
        .filter(|r| !r.failed)
        .filter_map(|r| r.probability.map(|p| (r.truth, p)))
        .unzip();
    compute_metrics(&labels, &probs, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// Predicts 0.5 for every target.
    pub always_half: Metrics,
    /// Predicts the knowledge base's overall accuracy for every target.
    pub global_accuracy: Metrics,
    /// Predicts each target student's accuracy over its visible history.
    pub history_accuracy: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool_version: String,
    pub predictor: String,
    pub config: EvalConfig,
    pub split_prng: String,
    pub seed: Option<u64>,
    pub kb_sources: Vec<String>,
    pub kb_students: usize,
    pub n_sequences: usize,
    pub n_failed: usize,
    pub n_imputed: usize,
    pub n_clamped: usize,
    pub failures: BTreeMap<String, usize>,
    pub pool_counts: BTreeMap<PoolLevel, usize>,
    pub method_counts: BTreeMap<MatchMethod, usize>,
    pub group_resolved: usize,
    pub metrics: Option<Metrics>,
    pub baselines: Option<Baselines>,
    #[serde(skip)]
    pub records: Vec<EvalRecord>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        to_canonical_string(self)
    }

    pub fn fraction(&self, count: usize) -> f64 {
        if self.n_sequences == 0 {
            0.0
        } else {
            count as f64 / self.n_sequences as f64
        }
    }
}

/// Flat per-record table, tab separated, for external plotting.
pub fn records_tsv(records: &[EvalRecord]) -> String {
    let mut out = String::from(
        "sequence_id\tstudent_id\tquestion_id\tsource_id\ttruth\tprobability\tpredicted\timputed\tclamped\tfailed\tpool\tconcept_method\tgroup_resolved\terror\n",
    );
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in records {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.sequence_id,
            r.student_id,
            r.question_id,
            r.source_id,
            u8::from(r.truth),
            opt(r.probability.map(|p| format!("{p:.9}"))),
            opt(r.predicted.map(|l| l.as_str().to_string())),
            u8::from(r.imputed),
            u8::from(r.clamped),
            u8::from(r.failed),
            opt(r.pool.map(|p| format!("{p:?}"))),
            opt(r.concept_method.map(|m| format!("{m:?}"))),
            u8::from(r.group_resolved),
            opt(r.error.as_ref().map(|e| e.replace(['\t', '\n'], " "))),
        );
    }
    out
}

fn evaluate_one(
    kb: &KnowledgeBase,
    seq: &EvalSequence,
    predictor: &dyn Predictor,
    matcher: Option<&Matcher>,
    cfg: &EvalConfig,
) -> EvalRecord {
    let t = seq.target();
    let history = seq.context();
    let history_accuracy = (!history.is_empty())
        .then(|| history.iter().filter(|i| i.correct).count() as f64 / history.len() as f64);
    let mut record = EvalRecord {
        sequence_id: seq.id(),
        student_id: t.student_id.clone(),
        question_id: t.question_id.clone(),
        source_id: t.source_id.clone(),
        truth: t.correct,
        probability: None,
        predicted: None,
        imputed: false,
        clamped: false,
        failed: false,
        error: None,
        pool: None,
        concept_method: None,
        group_resolved: false,
        history_accuracy,
    };
    let outcome = PredictionTarget::from_window(&seq.window)
        .and_then(|target| build_context(kb, &target, matcher, &cfg.retrieval))
        .and_then(|ctx| {
            record.pool = Some(ctx.pool);
            record.concept_method = Some(ctx.target.concept_method);
            record.group_resolved = kb
                .qg_index
                .contains_key(&(ctx.target.concept.clone(), ctx.target.difficulty));
            predictor.predict(&ctx, kb)
        });
    match outcome {
        Ok(r) => {
            record.probability = Some(r.probability);
            record.predicted = Some(Label::from_probability(r.probability, cfg.threshold));
            record.imputed = r.imputed;
            record.clamped = r.clamped;
        }
        Err(e) => {
            log::warn!("{}: prediction failed: {e}", record.sequence_id);
            record.failed = true;
            record.error = Some(e.kind().to_string());
        }
    }
    record
}

fn baselines(kb: &KnowledgeBase, records: &[EvalRecord], threshold: f64) -> Result<Baselines> {
    let usable: Vec<&EvalRecord> = records.iter().filter(|r| !r.failed).collect();
    let labels: Vec<bool> = usable.iter().map(|r| r.truth).collect();
    let total = kb.repo.interaction_count();
    let correct = kb.repo.all_interactions().filter(|i| i.correct).count();
    let global = if total == 0 { 0.5 } else { correct as f64 / total as f64 };
    let constant = |p: f64| compute_metrics(&labels, &vec![p; labels.len()], threshold);
    let history: Vec<f64> = usable.iter().map(|r| r.history_accuracy.unwrap_or(0.5)).collect();
    Ok(Baselines {
        always_half: constant(0.5)?,
        global_accuracy: constant(global)?,
        history_accuracy: compute_metrics(&labels, &history, threshold)?,
    })
}

/// Predicts the last interaction of every test sequence. The knowledge base
/// must not contain any test student.
pub fn run_experiment(
    kb: &KnowledgeBase,
    test: &[EvalSequence],
    predictor: &dyn Predictor,
    matcher: Option<&Matcher>,
    cfg: &EvalConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let leaked: BTreeSet<&str> = test
        .iter()
        .map(|s| s.student_id.as_str())
        .filter(|s| kb.repo.contains_student(s))
        .collect();
    if let Some(first) = leaked.iter().next() {
        return Err(Error::LeakageDetected {
            count: leaked.len(),
            example: first.to_string(),
        });
    }
    let mut records: Vec<EvalRecord> = test
        .par_iter()
        .map(|seq| evaluate_one(kb, seq, predictor, matcher, cfg))
        .collect();
    records.sort_by(|a, b| a.sequence_id.cmp(&b.sequence_id));

    let mut failures = BTreeMap::new();
    let mut pool_counts = BTreeMap::new();
    let mut method_counts = BTreeMap::new();
    for r in &records {
        if let Some(e) = &r.error {
            *failures.entry(e.clone()).or_insert(0) += 1;
        }
        if let Some(p) = r.pool {
            *pool_counts.entry(p).or_insert(0) += 1;
        }
        if let Some(m) = r.concept_method {
            *method_counts.entry(m).or_insert(0) += 1;
        }
    }
    let metrics = metrics(&records, cfg.threshold).ok();
    let baselines = match metrics {
        Some(_) => Some(baselines(kb, &records, cfg.threshold)?),
        None => None,
    };
    Ok(ExperimentReport {
        tool_version: TOOL_VERSION.to_string(),
        predictor: predictor.name().to_string(),
        config: cfg.clone(),
        split_prng: SPLIT_PRNG.to_string(),
        seed: None,
        kb_sources: kb.source_ids().into_iter().map(str::to_string).collect(),
        kb_students: kb.repo.student_count(),
        n_sequences: records.len(),
        n_failed: records.iter().filter(|r| r.failed).count(),
        n_imputed: records.iter().filter(|r| r.imputed).count(),
        n_clamped: records.iter().filter(|r| r.clamped).count(),
        failures,
        pool_counts,
        method_counts,
        group_resolved: records.iter().filter(|r| r.group_resolved).count(),
        metrics,
        baselines,
        records,
    })
}

/// Evaluates a knowledge base built without the test source. Fails if any
/// test student, question or source id is present in the knowledge base.
pub fn run_cold_start(
    kb: &KnowledgeBase,
    test: &[EvalSequence],
    predictor: &dyn Predictor,
    matcher: Option<&Matcher>,
    cfg: &EvalConfig,
) -> Result<ExperimentReport> {
    let sources: BTreeSet<&str> = kb.source_ids().into_iter().collect();
    for seq in test {
        for i in &seq.window {
            if kb.student_sources.contains_key(&i.student_id) {
                return Err(Error::SourceOverlap(format!("student {} is in the knowledge base", i.student_id)));
            }
            if kb.questions.contains_key(&i.question_id) {
                return Err(Error::SourceOverlap(format!("question {} is in the knowledge base", i.question_id)));
            }
            if sources.contains(i.source_id.as_str()) {
                return Err(Error::SourceOverlap(format!("source {} is in the knowledge base", i.source_id)));
            }
        }
    }
    run_experiment(kb, test, predictor, matcher, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub train_students: usize,
    pub test_students: usize,
    pub report: ExperimentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub acc: f64,
    pub auc: Option<f64>,
    pub f1: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub tool_version: String,
    pub build: BuildConfig,
    pub runs: Vec<SeedRun>,
    pub mean: Option<MeanMetrics>,
}

impl ProtocolReport {
    pub fn to_json(&self) -> Result<String> {
        to_canonical_string(self)
    }
}

pub fn mean_metrics(runs: &[&Metrics]) -> Option<MeanMetrics> {
    if runs.is_empty() {
        return None;
    }
    let n = runs.len() as f64;
    let aucs: Vec<f64> = runs.iter().filter_map(|m| m.auc).collect();
    Some(MeanMetrics {
        acc: runs.iter().map(|m| m.acc).sum::<f64>() / n,
        auc: (aucs.len() == runs.len()).then(|| aucs.iter().sum::<f64>() / n),
        f1: runs.iter().map(|m| m.f1).sum::<f64>() / n,
        seeds: runs.len(),
    })
}

/// For each seed: segment, split student-disjointly, build the knowledge
/// base from training students only, and evaluate the held-out sequences.
pub fn run_protocol(
    interactions: &[Interaction],
    kc: &KcGraph,
    build: &BuildConfig,
    predictor: &dyn Predictor,
    matcher: &Matcher,
    cfg: &EvalConfig,
) -> Result<ProtocolReport> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let sequences = segment_all(interactions, cfg.seq_len)?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let split = split_student_disjoint(sequences.clone(), cfg.n_test, seed)?;
        let test_students = split.test_students();
        let train: Vec<Interaction> = interactions
            .iter()
            .filter(|i| !test_students.contains(i.student_id.as_str()))
            .cloned()
            .collect();
        let mut build_cfg = *build;
        build_cfg.seed = seed;
        let kb = build_from_interactions(train, kc.clone(), &build_cfg, matcher)?;
        let mut report = run_experiment(&kb, &split.test, predictor, Some(matcher), cfg)?;
        report.seed = Some(seed);
        runs.push(SeedRun {
            seed,
            train_students: kb.repo.student_count(),
            test_students: test_students.len(),
            report,
        });
    }
    let per_seed: Vec<&Metrics> = runs.iter().filter_map(|r| r.report.metrics.as_ref()).collect();
    Ok(ProtocolReport {
        tool_version: TOOL_VERSION.to_string(),
        build: *build,
        mean: mean_metrics(&per_seed),
        runs,
    })
}
