//! Knowledge-base construction: load sources, fit IRT jointly, align concept
//! labels to the canonical concept set, form question groups, and wire up
//! the heterogeneous graph and the interaction repository.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::kc::{kc_match, load_kc_graph, KcGraph, MatchMethod, Matcher};
use super::{EdgeKind, Graph, NodeId, NodeKind};
use crate::domain::{ConfConfig, Dimension, Interaction, Level};
use crate::error::{Error, Result};
use crate::ingest::{load_interactions, DatasetManifest};
use crate::irt::{fit_2pl, IrtFitConfig, IrtParams};
use crate::repository::InteractionRepository;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub irt: IrtFitConfig,
    pub conf: ConfConfig,
    /// Recorded in the build manifest; the build itself draws no randomness.
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            irt: IrtFitConfig::default(),
            conf: ConfConfig::default(),
            seed: 0,
        }
    }
}

/// Summary of one source as it entered the build.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub source_id: String,
    /// File name of the interaction log, without directories.
    pub file: Option<String>,
    pub rows_read: usize,
    pub rows_skipped: usize,
    pub interactions: usize,
    pub students: usize,
    pub questions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub sources: Vec<SourceRecord>,
    pub seed: u64,
    pub config: BuildConfig,
    /// Similarity backend, judge presence and threshold used for alignment.
    pub matcher: String,
    pub match_counts: BTreeMap<MatchMethod, usize>,
    /// Questions seen with more than one concept label.
    pub multi_label_questions: usize,
    pub irt_converged: bool,
    pub irt_iterations: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionInfo {
    pub source_id: String,
    pub label: String,
    pub concept: String,
    pub method: MatchMethod,
    pub level: Level,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub graph: Graph,
    /// Restriction of `graph` to concept nodes and concept-to-concept edges.
    pub kc_graph: Graph,
    pub repo: InteractionRepository,
    pub irt: IrtParams,
    pub qg_index: BTreeMap<(String, Level), String>,
    pub questions: BTreeMap<String, QuestionInfo>,
    pub student_sources: BTreeMap<String, String>,
    pub manifest: BuildManifest,
}

pub fn qg_key(concept: &str, level: Level) -> String {
    format!("{concept}@{level}")
}

fn difficulty_node(level: Level) -> NodeId {
    NodeId::new(NodeKind::D, level.as_str())
}

fn ability_node(level: Level) -> NodeId {
    NodeId::new(NodeKind::A, level.as_str())
}

/// Places question `question` in the group for (concept, level), creating the
/// group with its concept and difficulty edges on first use.
pub fn assign_question_group(
    question: &str,
    concept: &str,
    level: Level,
    kb: &mut KnowledgeBase,
) -> Result<String> {
    let k = NodeId::concept(concept);
    if !kb.graph.contains(&k) {
        return Err(Error::UnknownConcept(concept.to_string()));
    }
    let index_key = (concept.to_string(), level);
    let group = match kb.qg_index.get(&index_key) {
        Some(g) => g.clone(),
        None => {
            let g = qg_key(concept, level);
            let node = NodeId::new(NodeKind::QG, g.clone());
            kb.graph.add_node(node.clone());
            let d = difficulty_node(level);
            kb.graph.add_node(d.clone());
            kb.graph.add_edge(node.clone(), k, EdgeKind::QGK, 1)?;
            kb.graph.add_edge(node, d, EdgeKind::QGD, 1)?;
            kb.qg_index.insert(index_key, g.clone());
            g
        }
    };
    let q = NodeId::new(NodeKind::Q, question);
    if kb.graph.add_node(q.clone()) {
        kb.graph
            .add_edge(q, NodeId::new(NodeKind::QG, group.clone()), EdgeKind::QQG, 1)?;
    }
    Ok(group)
}

/// Loads every manifest and builds the knowledge base from their logs and
/// concept graphs.
pub fn build_knowledge_base(
    manifests: &[DatasetManifest],
    cfg: &BuildConfig,
    matcher: &Matcher,
) -> Result<KnowledgeBase> {
    if manifests.is_empty() {
        return Err(Error::Config("at least one dataset manifest is required".into()));
    }
    let mut kc = KcGraph::default();
    let mut interactions = Vec::new();
    let mut records = Vec::new();
    let mut seen_sources = BTreeSet::new();
    for m in manifests {
        if !seen_sources.insert(m.source_id.clone()) {
            return Err(Error::Config(format!("duplicate source_id {:?}", m.source_id)));
        }
        let loaded = load_interactions(m)?;
        if !loaded.skipped.is_empty() {
            log::warn!(
                "{}: skipped {} of {} rows",
                m.source_id,
                loaded.skipped.len(),
                loaded.rows_read
            );
        }
        let mut record = summarize(&m.source_id, &loaded.interactions);
        record.file = m
            .interactions_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned());
        record.rows_read = loaded.rows_read;
        record.rows_skipped = loaded.skipped.len();
        records.push(record);
        interactions.extend(loaded.interactions);
        if let Some(path) = &m.kc_graph_path {
            kc.merge(load_kc_graph(path)?);
        }
    }
    build_with_records(interactions, kc, records, cfg, matcher)
}

/// Builds a knowledge base from interactions already in memory, grouping
/// sources by each interaction's `source_id`.
pub fn build_from_interactions(
    interactions: Vec<Interaction>,
    kc: KcGraph,
    cfg: &BuildConfig,
    matcher: &Matcher,
) -> Result<KnowledgeBase> {
    let mut by_source: BTreeMap<&str, Vec<Interaction>> = BTreeMap::new();
    for i in &interactions {
        by_source.entry(&i.source_id).or_default().push(i.clone());
    }
    let records = by_source
        .iter()
        .map(|(s, list)| {
            let mut r = summarize(s, list);
            r.rows_read = list.len();
            r
        })
        .collect();
    build_with_records(interactions, kc, records, cfg, matcher)
}

fn summarize(source: &str, list: &[Interaction]) -> SourceRecord {
    SourceRecord {
        source_id: source.to_string(),
        file: None,
        rows_read: 0,
        rows_skipped: 0,
        interactions: list.len(),
        students: list.iter().map(|i| &i.student_id).collect::<BTreeSet<_>>().len(),
        questions: list.iter().map(|i| &i.question_id).collect::<BTreeSet<_>>().len(),
    }
}

fn check_collisions<'a>(
    kind: &str,
    pairs: impl Iterator<Item = (&'a str, &'a str)>,
) -> Result<BTreeMap<String, String>> {
    let mut owner: BTreeMap<String, String> = BTreeMap::new();
    for (id, source) in pairs {
        match owner.get(id) {
            Some(first) if first != source => {
                return Err(Error::IdCollision {
                    id: format!("{kind} {id}"),
                    first: first.clone(),
                    second: source.to_string(),
                })
            }
            Some(_) => {}
            None => {
                owner.insert(id.to_string(), source.to_string());
            }
        }
    }
    Ok(owner)
}

/// Most frequent label per question, ties to the lexicographically smallest.
fn question_labels(interactions: &[Interaction]) -> (BTreeMap<String, String>, usize) {
    let mut counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for i in interactions {
        *counts
            .entry(&i.question_id)
            .or_default()
            .entry(&i.concept_label)
            .or_default() += 1;
    }
    let mut multi = 0;
    let labels = counts
        .into_iter()
        .map(|(q, by_label)| {
            if by_label.len() > 1 {
                multi += 1;
            }
            let best = by_label
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(l, _)| l.to_string())
                .unwrap_or_default();
            (q.to_string(), best)
        })
        .collect();
    (labels, multi)
}

fn build_with_records(
    mut interactions: Vec<Interaction>,
    kc: KcGraph,
    sources: Vec<SourceRecord>,
    cfg: &BuildConfig,
    matcher: &Matcher,
) -> Result<KnowledgeBase> {
    if interactions.is_empty() {
        return Err(Error::NoData);
    }
    interactions.sort_by(|a, b| {
        a.student_id
            .cmp(&b.student_id)
            .then(a.order_index.cmp(&b.order_index))
    });
    let student_sources = check_collisions(
        "student",
        interactions.iter().map(|i| (i.student_id.as_str(), i.source_id.as_str())),
    )?;
    let question_sources = check_collisions(
        "question",
        interactions.iter().map(|i| (i.question_id.as_str(), i.source_id.as_str())),
    )?;
    let mut warnings = kc.warnings.clone();

    // IRT over a dimension-free repository first; levels feed the dimensions.
    let mut plain = InteractionRepository::new();
    for i in &interactions {
        plain.record_interaction(i.clone(), &[])?;
    }
    let irt = fit_2pl(&plain, &cfg.irt)?;
    drop(plain);

    let (labels, multi_label_questions) = question_labels(&interactions);
    if multi_label_questions > 0 {
        let msg = format!(
            "{multi_label_questions} question(s) carry more than one concept label; the most frequent label was used"
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut canon: BTreeSet<String> = kc.concepts.clone();
    let mut matched: BTreeMap<(String, String), (String, MatchMethod)> = BTreeMap::new();
    let mut match_counts: BTreeMap<MatchMethod, usize> = BTreeMap::new();
    // label resolution order: by source, then label, so growth of the
    // canonical set is deterministic
    let mut pending: BTreeSet<(&str, &str)> = BTreeSet::new();
    for (q, label) in &labels {
        pending.insert((question_sources[q].as_str(), label.as_str()));
    }
    for (source, label) in pending {
        let m = kc_match(label, &canon, matcher);
        if m.method == MatchMethod::Unmatched {
            canon.insert(m.canonical_key.clone());
        }
        *match_counts.entry(m.method).or_default() += 1;
        matched.insert(
            (source.to_string(), label.to_string()),
            (m.canonical_key, m.method),
        );
    }

    let mut graph = Graph::new();
    for c in &canon {
        graph.add_node(NodeId::concept(c.clone()));
    }
    for (a, b) in &kc.prereq {
        graph.add_edge(NodeId::concept(a.clone()), NodeId::concept(b.clone()), EdgeKind::KKPrereq, 1)?;
    }
    for (a, b) in &kc.assoc {
        graph.add_edge(NodeId::concept(a.clone()), NodeId::concept(b.clone()), EdgeKind::KKAssoc, 1)?;
    }
    for level in Level::ALL {
        graph.add_node(difficulty_node(level));
        graph.add_node(ability_node(level));
    }

    let manifest = BuildManifest {
        sources,
        seed: cfg.seed,
        config: *cfg,
        matcher: format!(
            "similarity={}; judge={}; threshold={}",
            matcher.similarity.as_ref().map(|s| s.name()).unwrap_or("none"),
            matcher.judge.is_some(),
            matcher.threshold
        ),
        match_counts,
        multi_label_questions,
        irt_converged: irt.converged,
        irt_iterations: irt.iterations,
        warnings,
    };
    let mut kb = KnowledgeBase {
        graph,
        kc_graph: Graph::new(),
        repo: InteractionRepository::new(),
        irt,
        qg_index: BTreeMap::new(),
        questions: BTreeMap::new(),
        student_sources,
        manifest,
    };

    for (q, label) in &labels {
        let source = &question_sources[q];
        let (concept, method) = matched[&(source.clone(), label.clone())].clone();
        let level = kb.irt.difficulty_level(q);
        let group = assign_question_group(q, &concept, level, &mut kb)?;
        kb.questions.insert(
            q.clone(),
            QuestionInfo {
                source_id: source.clone(),
                label: label.clone(),
                concept,
                method,
                level,
                group,
            },
        );
    }

    for (student, _) in kb.student_sources.clone() {
        let s = NodeId::new(NodeKind::S, student.clone());
        kb.graph.add_node(s.clone());
        let level = kb.irt.students[&student].level;
        kb.graph.add_edge(s, ability_node(level), EdgeKind::SA, 1)?;
    }

    for info in kb.questions.values() {
        kb.repo.register_dimension(Dimension::concept(info.concept.clone()));
        kb.repo.register_dimension(Dimension::difficulty(info.level));
        kb.repo.register_dimension(Dimension::question_group(info.group.clone()));
    }
    for i in interactions {
        let info = &kb.questions[&i.question_id];
        let dims = [
            Dimension::concept(info.concept.clone()),
            Dimension::difficulty(info.level),
            Dimension::question_group(info.group.clone()),
        ];
        kb.graph.add_edge(
            NodeId::new(NodeKind::S, i.student_id.clone()),
            NodeId::new(NodeKind::QG, info.group.clone()),
            EdgeKind::SQG,
            1,
        )?;
        kb.repo.record_interaction(i, &dims)?;
    }

    kb.kc_graph = kb.graph.concept_subgraph();
    let violations = kb.graph.schema_violations();
    if !violations.is_empty() {
        return Err(Error::InsufficientData(format!(
            "graph schema violations: {}",
            violations.join("; ")
        )));
    }
    Ok(kb)
}

impl KnowledgeBase {
    pub fn concepts(&self) -> BTreeSet<String> {
        self.graph.nodes_of(NodeKind::K).map(|n| n.key.clone()).collect()
    }

    /// Question groups attached to a concept, in level order.
    pub fn groups_of_concept(&self, concept: &str) -> Vec<(Level, &str)> {
        Level::ALL
            .iter()
            .filter_map(|&l| {
                self.qg_index
                    .get(&(concept.to_string(), l))
                    .map(|g| (l, g.as_str()))
            })
            .collect()
    }

    /// Students that attempted at least one question in `group`.
    pub fn students_of_group(&self, group: &str) -> Vec<&str> {
        let node = NodeId::new(NodeKind::QG, group);
        self.graph
            .neighbors(&node)
            .filter(|(n, k)| *k == EdgeKind::SQG && n.kind == NodeKind::S)
            .map(|(n, _)| n.key.as_str())
            .collect()
    }

    pub fn source_ids(&self) -> Vec<&str> {
        self.manifest.sources.iter().map(|s| s.source_id.as_str()).collect()
    }
}
