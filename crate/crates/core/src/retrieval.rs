//! Multi-view peer retrieval: behavior, structural and ability similarity
//! over the target concept's interest subgraph, fused linearly, plus
//! assembly of the structured context handed to a predictor.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ConfConfig, Dimension, DimensionKind, Interaction, Level, PerfTuple};
use crate::error::{Error, Result};
use crate::graph::{kc_match, qg_key, KnowledgeBase, MatchMethod, Matcher, NodeId, NodeKind};
use crate::repository::perf_from_outcomes;

/// Fusion weights for behavior, structural and ability similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub behavior: f64,
    pub structure: f64,
    pub ability: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            behavior: 0.4,
            structure: 0.3,
            ability: 0.3,
        }
    }
}

impl FusionWeights {
    /// Weights from a ratio such as `4:3:3`, normalized to sum to one.
    pub fn from_ratio(text: &str) -> Result<Self> {
        let parts: Vec<f64> = text
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("weights {text:?} must look like 4:3:3")))?;
        if parts.len() != 3 {
            return Err(Error::Config(format!("weights {text:?} need exactly three parts")));
        }
        Self {
            behavior: parts[0],
            structure: parts[1],
            ability: parts[2],
        }
        .normalized()
    }

    pub fn normalized(self) -> Result<Self> {
        let parts = [self.behavior, self.structure, self.ability];
        if parts.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("fusion weights must be non-negative".into()));
        }
        let total: f64 = parts.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("fusion weights must not all be zero".into()));
        }
        Ok(Self {
            behavior: self.behavior / total,
            structure: self.structure / total,
            ability: self.ability / total,
        })
    }

    pub fn fuse(&self, behavior: f64, structure: f64, ability: f64) -> f64 {
        self.behavior * behavior + self.structure * structure + self.ability * ability
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub hops: usize,
    pub cap: usize,
    pub top_k: usize,
    /// Accuracy weight in the behavior score; DWA gets `1 - alpha`.
    pub alpha: f64,
    pub weights: FusionWeights,
    pub conf: ConfConfig,
    pub trajectory_len: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            hops: 2,
            cap: 10,
            top_k: 2,
            alpha: 0.5,
            weights: FusionWeights::default(),
            conf: ConfConfig::default(),
            trajectory_len: 10,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hops == 0 || self.cap == 0 || self.top_k == 0 {
            return Err(Error::Config("hops, cap and top_k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        self.weights.normalized()?;
        if !(self.conf.beta > 0.0 && self.conf.beta < 1.0) {
            return Err(Error::Config(format!("beta {} outside (0, 1)", self.conf.beta)));
        }
        Ok(())
    }
}

/// A question to predict for a student, with the history preceding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTarget {
    pub student_id: String,
    pub question_id: String,
    pub source_id: String,
    /// Concept label as given by the target's source.
    pub concept_label: String,
    pub history: Vec<Interaction>,
    pub as_of: u64,
}

impl PredictionTarget {
    /// Target for the last interaction of a window, with the rest as history.
    pub fn from_window(window: &[Interaction]) -> Result<Self> {
        let (last, history) = window.split_last().ok_or(Error::EmptyHistory)?;
        Ok(Self {
            student_id: last.student_id.clone(),
            question_id: last.question_id.clone(),
            source_id: last.source_id.clone(),
            concept_label: last.concept_label.clone(),
            history: history.to_vec(),
            as_of: last.order_index,
        })
    }

    fn visible_history(&self) -> impl Iterator<Item = &Interaction> {
        self.history.iter().filter(move |i| i.order_index < self.as_of)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorVector {
    pub node_order: Vec<NodeId>,
    pub scores: Vec<f64>,
    pub present: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBreakdown {
    pub candidate: String,
    pub sim_bhv: f64,
    pub sim_struc: f64,
    pub sim_abil: f64,
    pub sim_final: f64,
}

/// Which candidate population a retrieval drew from.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum PoolLevel {
    Subgraph,
    SharedGroup,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub peers: Vec<SimilarityBreakdown>,
    pub pool: PoolLevel,
    pub pool_size: usize,
}

/// Dimension a graph node stands for, if it is a concept, group or
/// difficulty node.
pub fn dimension_of(node: &NodeId) -> Option<Dimension> {
    match node.kind {
        NodeKind::K => Some(Dimension::concept(node.key.clone())),
        NodeKind::QG => Some(Dimension::question_group(node.key.clone())),
        NodeKind::D => node.key.parse::<Level>().ok().map(Dimension::difficulty),
        _ => None,
    }
}

/// `[alpha * Acc + (1 - alpha) * DWA] * Conf`, absent without attempts.
pub fn score_from_perf(perf: Option<&PerfTuple>, alpha: f64) -> Option<f64> {
    perf.map(|p| ((alpha * p.acc + (1.0 - alpha) * p.dwa) * p.conf).clamp(0.0, 1.0))
}

/// Behavior score of a knowledge-base student on a node, counting outcomes
/// before `as_of` when given.
pub fn behavior_score(
    kb: &KnowledgeBase,
    student: &str,
    node: &NodeId,
    alpha: f64,
    conf: &ConfConfig,
    as_of: Option<u64>,
) -> Option<f64> {
    let dim = dimension_of(node)?;
    score_from_perf(kb.repo.perf(student, &dim, conf, as_of).as_ref(), alpha)
}

/// Cosine similarity with absent entries zeroed; 0 when either norm is 0.
pub fn behavior_similarity(target: &BehaviorVector, other: &BehaviorVector) -> Result<f64> {
    if target.node_order.len() != other.node_order.len() {
        return Err(Error::DimensionMismatch(
            target.node_order.len(),
            other.node_order.len(),
        ));
    }
    if target.node_order != other.node_order {
        return Err(Error::Config("behavior vectors use different node orders".into()));
    }
    let masked = |v: &BehaviorVector| -> Vec<f64> {
        v.scores
            .iter()
            .zip(&v.present)
            .map(|(s, p)| if *p { *s } else { 0.0 })
            .collect()
    };
    Ok(cosine(&masked(target), &masked(other)))
}

pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    (dot / (nx * ny)).clamp(0.0, 1.0)
}

/// Mean inverse path length from the target concept to each concept in
/// `concepts`: distance 0 counts 1, unreachable counts `1 / (cap + 1)`.
pub fn structural_score_from(
    distances: &BTreeMap<String, usize>,
    concepts: &BTreeSet<String>,
    cap: usize,
) -> f64 {
    if concepts.is_empty() {
        return 0.0;
    }
    let total: f64 = concepts
        .iter()
        .map(|k| match distances.get(k) {
            Some(0) => 1.0,
            Some(&d) => 1.0 / d as f64,
            None => 1.0 / (cap as f64 + 1.0),
        })
        .sum();
    total / concepts.len() as f64
}

fn target_distances(kb: &KnowledgeBase, concept: &str, cap: usize) -> BTreeMap<String, usize> {
    kb.graph
        .concept_distances(concept, cap)
        .unwrap_or_else(|_| BTreeMap::from([(concept.to_string(), 0)]))
}

/// Structural score of a knowledge-base student relative to `concept`,
/// over concepts attempted before `as_of` when given.
pub fn structural_score(
    kb: &KnowledgeBase,
    student: &str,
    concept: &str,
    as_of: Option<u64>,
    cap: usize,
) -> f64 {
    let distances = target_distances(kb, concept, cap);
    structural_score_from(&distances, &attempted_concepts(kb, student, as_of), cap)
}

fn attempted_concepts(kb: &KnowledgeBase, student: &str, as_of: Option<u64>) -> BTreeSet<String> {
    kb.repo
        .student_dimensions(student)
        .filter(|(d, o)| {
            d.kind == DimensionKind::Concept
                && o.iter().any(|x| as_of.is_none_or(|t| x.order_index < t))
        })
        .map(|(d, _)| d.key.clone())
        .collect()
}

/// `1 - |a - b| / (max - min)`, or 1 for a degenerate pool.
pub fn structural_similarity(score_tgt: f64, score_s: f64, pool_min: f64, pool_max: f64) -> f64 {
    let range = pool_max - pool_min;
    if range <= 0.0 {
        return 1.0;
    }
    (1.0 - (score_tgt - score_s).abs() / range).clamp(0.0, 1.0)
}

pub fn ability_similarity(theta_tgt_norm: f64, theta_s_norm: f64) -> f64 {
    (1.0 - (theta_tgt_norm - theta_s_norm).abs()).clamp(0.0, 1.0)
}

/// How the target's concept and each of its history items resolve into the
/// knowledge base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTarget {
    pub concept: String,
    pub concept_method: MatchMethod,
    /// False when the concept has no node in the graph.
    pub concept_known: bool,
    pub difficulty: Level,
    pub group: String,
    pub group_known: bool,
    /// Ability re-estimated from the visible history with item parameters fixed.
    pub theta: f64,
    pub theta_norm: f64,
    pub ability_level: Level,
    /// Pre-target outcomes per dimension, in order.
    pub outcomes: BTreeMap<Dimension, Vec<bool>>,
    /// Source ids contributing to each dimension.
    pub sources: BTreeMap<Dimension, BTreeSet<String>>,
    pub concepts: BTreeSet<String>,
    pub groups: BTreeSet<String>,
    pub trajectory: Vec<bool>,
}

impl ResolvedTarget {
    pub fn perf(&self, dim: &Dimension, conf: &ConfConfig) -> Option<PerfTuple> {
        self.outcomes.get(dim).and_then(|o| perf_from_outcomes(o, conf))
    }
}

/// Resolves the target concept and history against the knowledge base.
/// Without a matcher, labels that do not match a known concept exactly
/// (after normalization) are an error.
pub fn resolve_target(
    kb: &KnowledgeBase,
    target: &PredictionTarget,
    matcher: Option<&Matcher>,
    cfg: &RetrievalConfig,
) -> Result<ResolvedTarget> {
    let canon = kb.concepts();
    let exact = Matcher::exact_only();
    let mut cache: BTreeMap<String, (String, MatchMethod)> = BTreeMap::new();
    let mut resolve = |question: &str, label: &str| -> Result<(String, MatchMethod, Level)> {
        if let Some(info) = kb.questions.get(question) {
            return Ok((info.concept.clone(), MatchMethod::Exact, info.level));
        }
        let (concept, method) = match cache.get(label) {
            Some(hit) => hit.clone(),
            None => {
                let m = kc_match(label, &canon, matcher.unwrap_or(&exact));
                if m.method == MatchMethod::Unmatched && matcher.is_none() {
                    return Err(Error::ConceptUnresolved {
                        question: question.to_string(),
                        label: label.to_string(),
                    });
                }
                cache.insert(label.to_string(), (m.canonical_key.clone(), m.method));
                (m.canonical_key, m.method)
            }
        };
        Ok((concept, method, kb.irt.difficulty_level(question)))
    };

    let (concept, concept_method, difficulty) =
        resolve(&target.question_id, &target.concept_label)?;
    let group = kb
        .qg_index
        .get(&(concept.clone(), difficulty))
        .cloned()
        .unwrap_or_else(|| qg_key(&concept, difficulty));

    let mut outcomes: BTreeMap<Dimension, Vec<bool>> = BTreeMap::new();
    let mut sources: BTreeMap<Dimension, BTreeSet<String>> = BTreeMap::new();
    let mut concepts = BTreeSet::new();
    let mut groups = BTreeSet::new();
    let mut responses = Vec::new();
    let mut trajectory = Vec::new();
    for i in target.visible_history() {
        let (k, _, level) = resolve(&i.question_id, &i.concept_label)?;
        let qg = kb
            .qg_index
            .get(&(k.clone(), level))
            .cloned()
            .unwrap_or_else(|| qg_key(&k, level));
        if kb.qg_index.contains_key(&(k.clone(), level)) {
            groups.insert(qg.clone());
        }
        for dim in [
            Dimension::concept(k.clone()),
            Dimension::difficulty(level),
            Dimension::question_group(qg),
        ] {
            sources.entry(dim.clone()).or_default().insert(i.source_id.clone());
            outcomes.entry(dim).or_default().push(i.correct);
        }
        concepts.insert(k);
        let (a, b) = kb.irt.item_or_fallback(&i.question_id);
        responses.push((a, b, i.correct));
        trajectory.push(i.correct);
    }
    let keep = trajectory.len().saturating_sub(cfg.trajectory_len);
    trajectory.drain(..keep);

    let theta = kb.irt.estimate_ability(&responses, &kb.manifest.config.irt);
    let theta_norm = kb.irt.theta_scale.normalize(theta);
    Ok(ResolvedTarget {
        concept_known: kb.graph.contains(&NodeId::concept(concept.clone())),
        group_known: kb.qg_index.contains_key(&(concept.clone(), difficulty)),
        concept,
        concept_method,
        difficulty,
        group,
        theta,
        theta_norm,
        ability_level: kb.irt.theta_scale.level(theta_norm),
        outcomes,
        sources,
        concepts,
        groups,
        trajectory,
    })
}

/// Subgraph nodes that carry behavior scores, in canonical order.
fn behavior_nodes(kb: &KnowledgeBase, resolved: &ResolvedTarget, hops: usize) -> Vec<NodeId> {
    let center = NodeId::concept(resolved.concept.clone());
    match kb.graph.k_hop_subgraph(&center, hops) {
        Ok(nodes) => nodes
            .into_iter()
            .filter(|n| matches!(n.kind, NodeKind::K | NodeKind::QG | NodeKind::D))
            .collect(),
        Err(_) => vec![center],
    }
}

fn candidate_pool(
    kb: &KnowledgeBase,
    target: &PredictionTarget,
    resolved: &ResolvedTarget,
    hops: usize,
) -> Result<(Vec<String>, PoolLevel)> {
    let others: Vec<&str> = kb
        .repo
        .students()
        .filter(|s| *s != target.student_id)
        .collect();
    if others.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    let members = |groups: &mut dyn Iterator<Item = String>| -> Vec<String> {
        let set: BTreeSet<&str> = groups
            .flat_map(|g| kb.students_of_group(&g))
            .filter(|s| *s != target.student_id)
            .collect();
        set.into_iter().map(str::to_string).collect()
    };
    let center = NodeId::concept(resolved.concept.clone());
    if let Ok(nodes) = kb.graph.k_hop_subgraph(&center, hops) {
        let pool = members(
            &mut nodes
                .into_iter()
                .filter(|n| n.kind == NodeKind::QG)
                .map(|n| n.key),
        );
        if !pool.is_empty() {
            return Ok((pool, PoolLevel::Subgraph));
        }
    }
    let pool = members(&mut resolved.groups.iter().cloned());
    if !pool.is_empty() {
        return Ok((pool, PoolLevel::SharedGroup));
    }
    Ok((others.into_iter().map(str::to_string).collect(), PoolLevel::Global))
}

/// The per-student quantities that similarities compare.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub student_id: String,
    pub behavior: BehaviorVector,
    pub structural: f64,
    pub theta_norm: f64,
}

/// Profile of a knowledge-base student from all of their recorded
/// interactions.
pub fn candidate_profile(
    kb: &KnowledgeBase,
    student: &str,
    nodes: &[NodeId],
    distances: &BTreeMap<String, usize>,
    cfg: &RetrievalConfig,
) -> Profile {
    let mut scores = Vec::with_capacity(nodes.len());
    let mut present = Vec::with_capacity(nodes.len());
    for n in nodes {
        let s = behavior_score(kb, student, n, cfg.alpha, &cfg.conf, None);
        present.push(s.is_some());
        scores.push(s.unwrap_or(0.0));
    }
    Profile {
        student_id: student.to_string(),
        behavior: BehaviorVector {
            node_order: nodes.to_vec(),
            scores,
            present,
        },
        structural: structural_score_from(distances, &attempted_concepts(kb, student, None), cfg.cap),
        theta_norm: kb.irt.students.get(student).map(|e| e.theta_norm).unwrap_or(0.5),
    }
}

fn target_profile(
    target: &PredictionTarget,
    resolved: &ResolvedTarget,
    nodes: &[NodeId],
    distances: &BTreeMap<String, usize>,
    cfg: &RetrievalConfig,
) -> Profile {
    let mut scores = Vec::with_capacity(nodes.len());
    let mut present = Vec::with_capacity(nodes.len());
    for n in nodes {
        let perf = dimension_of(n).and_then(|d| resolved.perf(&d, &cfg.conf));
        let s = score_from_perf(perf.as_ref(), cfg.alpha);
        present.push(s.is_some());
        scores.push(s.unwrap_or(0.0));
    }
    Profile {
        student_id: target.student_id.clone(),
        behavior: BehaviorVector {
            node_order: nodes.to_vec(),
            scores,
            present,
        },
        structural: structural_score_from(distances, &resolved.concepts, cfg.cap),
        theta_norm: resolved.theta_norm,
    }
}

/// Similarity of `other` to `target`, with the structural pool range given.
pub fn compare(
    target: &Profile,
    other: &Profile,
    pool_min: f64,
    pool_max: f64,
    weights: &FusionWeights,
) -> Result<SimilarityBreakdown> {
    let sim_bhv = behavior_similarity(&target.behavior, &other.behavior)?;
    let sim_struc = structural_similarity(target.structural, other.structural, pool_min, pool_max);
    let sim_abil = ability_similarity(target.theta_norm, other.theta_norm);
    Ok(SimilarityBreakdown {
        candidate: other.student_id.clone(),
        sim_bhv,
        sim_struc,
        sim_abil,
        sim_final: weights.fuse(sim_bhv, sim_struc, sim_abil),
    })
}

/// Sorts by fused similarity, highest first, ties to the smaller student id.
pub fn rank(similarities: &mut [SimilarityBreakdown]) {
    similarities.sort_by(|a, b| {
        b.sim_final
            .total_cmp(&a.sim_final)
            .then_with(|| a.candidate.cmp(&b.candidate))
    });
}

/// Scores the whole candidate pool for a resolved target, ranked.
pub fn score_pool(
    kb: &KnowledgeBase,
    target: &PredictionTarget,
    resolved: &ResolvedTarget,
    cfg: &RetrievalConfig,
) -> Result<Retrieval> {
    let weights = cfg.weights.normalized()?;
    let nodes = behavior_nodes(kb, resolved, cfg.hops);
    let distances = target_distances(kb, &resolved.concept, cfg.cap);
    let (pool, level) = candidate_pool(kb, target, resolved, cfg.hops)?;
    let tgt = target_profile(target, resolved, &nodes, &distances, cfg);
    let profiles: Vec<Profile> = pool
        .par_iter()
        .map(|s| candidate_profile(kb, s, &nodes, &distances, cfg))
        .collect();
    let (pool_min, pool_max) = profiles
        .iter()
        .map(|p| p.structural)
        .fold((tgt.structural, tgt.structural), |(lo, hi), s| (lo.min(s), hi.max(s)));
    let mut sims = profiles
        .par_iter()
        .map(|p| compare(&tgt, p, pool_min, pool_max, &weights))
        .collect::<Result<Vec<_>>>()?;
    rank(&mut sims);
    Ok(Retrieval {
        peers: sims,
        pool: level,
        pool_size: pool.len(),
    })
}

/// Top-k most similar peers for the target.
pub fn retrieve_peers(
    kb: &KnowledgeBase,
    target: &PredictionTarget,
    resolved: &ResolvedTarget,
    cfg: &RetrievalConfig,
) -> Result<Retrieval> {
    let mut r = score_pool(kb, target, resolved, cfg)?;
    r.peers.truncate(cfg.top_k);
    Ok(r)
}

/// Performance on one dimension, with the sources it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionPerf {
    pub dimension: Dimension,
    pub perf: Option<PerfTuple>,
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMeta {
    pub student_id: String,
    pub question_id: String,
    pub source_id: String,
    pub theta: f64,
    pub theta_norm: f64,
    pub ability_level: Level,
    pub concept: String,
    pub concept_method: MatchMethod,
    pub difficulty: Level,
    pub group: String,
    pub history_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerContext {
    pub similarity: SimilarityBreakdown,
    pub source_id: String,
    pub theta_norm: f64,
    pub ability_level: Level,
    pub perf: Vec<DimensionPerf>,
    pub trajectory: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub target: TargetMeta,
    pub target_perf: Vec<DimensionPerf>,
    pub peers: Vec<PeerContext>,
    pub trajectory: Vec<bool>,
    pub pool: PoolLevel,
    pub pool_size: usize,
}

impl RetrievedContext {
    pub fn target_dimensions(&self) -> [Dimension; 3] {
        [
            Dimension::concept(self.target.concept.clone()),
            Dimension::difficulty(self.target.difficulty),
            Dimension::question_group(self.target.group.clone()),
        ]
    }

    /// Every source id that contributed to any aggregate.
    pub fn provenance(&self) -> BTreeSet<&str> {
        self.target_perf
            .iter()
            .chain(self.peers.iter().flat_map(|p| p.perf.iter()))
            .flat_map(|d| d.sources.iter().map(String::as_str))
            .collect()
    }
}

pub fn assemble_context(
    kb: &KnowledgeBase,
    target: &PredictionTarget,
    resolved: &ResolvedTarget,
    retrieval: &Retrieval,
    cfg: &RetrievalConfig,
) -> RetrievedContext {
    let dims = [
        Dimension::concept(resolved.concept.clone()),
        Dimension::difficulty(resolved.difficulty),
        Dimension::question_group(resolved.group.clone()),
    ];
    let target_perf = dims
        .iter()
        .map(|d| {
            let perf = resolved.perf(d, &cfg.conf);
            DimensionPerf {
                dimension: d.clone(),
                sources: match perf {
                    Some(_) => resolved
                        .sources
                        .get(d)
                        .map(|s| s.iter().cloned().collect())
                        .unwrap_or_default(),
                    None => Vec::new(),
                },
                perf,
            }
        })
        .collect();
    let peers = retrieval
        .peers
        .iter()
        .map(|sim| {
            let id = &sim.candidate;
            let source = kb.student_sources.get(id).cloned().unwrap_or_default();
            let perf = dims
                .iter()
                .map(|d| {
                    let perf = kb.repo.perf(id, d, &cfg.conf, None);
                    DimensionPerf {
                        dimension: d.clone(),
                        sources: if perf.is_some() { vec![source.clone()] } else { Vec::new() },
                        perf,
                    }
                })
                .collect();
            let history = kb.repo.history(id);
            let tail = history.len().saturating_sub(cfg.trajectory_len);
            let est = kb.irt.students.get(id);
            PeerContext {
                similarity: sim.clone(),
                source_id: source,
                theta_norm: est.map(|e| e.theta_norm).unwrap_or(0.5),
                ability_level: est.map(|e| e.level).unwrap_or(Level::Medium),
                perf,
                trajectory: history[tail..].iter().map(|i| i.correct).collect(),
            }
        })
        .collect();
    RetrievedContext {
        target: TargetMeta {
            student_id: target.student_id.clone(),
            question_id: target.question_id.clone(),
            source_id: target.source_id.clone(),
            theta: resolved.theta,
            theta_norm: resolved.theta_norm,
            ability_level: resolved.ability_level,
            concept: resolved.concept.clone(),
            concept_method: resolved.concept_method,
            difficulty: resolved.difficulty,
            group: resolved.group.clone(),
            history_len: target.visible_history().count(),
        },
        target_perf,
        peers,
        trajectory: resolved.trajectory.clone(),
        pool: retrieval.pool,
        pool_size: retrieval.pool_size,
    }
}

/// Resolve, retrieve and assemble in one call.
pub fn build_context(
    kb: &KnowledgeBase,
    target: &PredictionTarget,
    matcher: Option<&Matcher>,
    cfg: &RetrievalConfig,
) -> Result<RetrievedContext> {
    let resolved = resolve_target(kb, target, matcher, cfg)?;
    let retrieval = retrieve_peers(kb, target, &resolved, cfg)?;
    Ok(assemble_context(kb, target, &resolved, &retrieval, cfg))
}
