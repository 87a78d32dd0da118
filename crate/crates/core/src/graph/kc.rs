//! Basic concept graph loading and the concept-label matching pipeline:
//! normalized exact match, then a similarity backend against a threshold,
//! then an optional judge backend, otherwise the label becomes a new concept.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KcGraph {
    pub concepts: BTreeSet<String>,
    /// Directed (predecessor, successor) pairs.
    pub prereq: BTreeSet<(String, String)>,
    /// Undirected pairs, stored with the smaller key first.
    pub assoc: BTreeSet<(String, String)>,
    /// Non-fatal findings such as prerequisite cycles.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl KcGraph {
    pub fn merge(&mut self, other: KcGraph) {
        self.concepts.extend(other.concepts);
        self.prereq.extend(other.prereq);
        self.assoc.extend(other.assoc);
        self.warnings.extend(other.warnings);
    }

    fn prereq_cycle(&self) -> Option<Vec<String>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (a, b) in &self.prereq {
            out.entry(a).or_default().push(b);
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state: BTreeMap<&str, u8> = BTreeMap::new();
        for start in self.concepts.iter().map(String::as_str) {
            if state.get(start).copied().unwrap_or(0) != 0 {
                continue;
            }
            let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
            state.insert(start, 1);
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                let children = out.get(node).map(Vec::as_slice).unwrap_or_default();
                if *next < children.len() {
                    let child = children[*next];
                    *next += 1;
                    match state.get(child).copied().unwrap_or(0) {
                        0 => {
                            state.insert(child, 1);
                            stack.push((child, 0));
                        }
                        1 => {
                            let pos = stack.iter().position(|(n, _)| *n == child).unwrap_or(0);
                            let mut cycle: Vec<String> =
                                stack[pos..].iter().map(|(n, _)| n.to_string()).collect();
                            cycle.push(child.to_string());
                            return Some(cycle);
                        }
                        _ => {}
                    }
                } else {
                    state.insert(node, 2);
                    stack.pop();
                }
            }
        }
        None
    }
}

/// Reads `(concept_a, relation, concept_b)` rows; relation is `prereq` or
/// `assoc`. A first row whose relation column reads `relation` is a header.
pub fn load_kc_graph(path: &Path) -> Result<KcGraph> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let mut g = KcGraph::default();
    for (idx, record) in reader.records().enumerate() {
        let line = idx as u64 + 1;
        let record = record.map_err(|e| Error::malformed(path, e))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 3 {
            return Err(Error::malformed(
                path,
                format!("line {line}: expected 3 fields, found {}", record.len()),
            ));
        }
        let (a, rel, b) = (&record[0], &record[1], &record[2]);
        if idx == 0 && rel.eq_ignore_ascii_case("relation") {
            continue;
        }
        match rel {
            "prereq" => {
                g.prereq.insert((a.to_string(), b.to_string()));
            }
            "assoc" => {
                let pair = if a <= b { (a, b) } else { (b, a) };
                g.assoc.insert((pair.0.to_string(), pair.1.to_string()));
            }
            other => {
                return Err(Error::BadRelation {
                    path: path.to_path_buf(),
                    line,
                    relation: other.to_string(),
                })
            }
        }
        g.concepts.insert(a.to_string());
        g.concepts.insert(b.to_string());
    }
    if let Some(cycle) = g.prereq_cycle() {
        let msg = format!(
            "{}: prerequisite cycle {}",
            path.display(),
            cycle.join(" -> ")
        );
        log::warn!("{msg}");
        g.warnings.push(msg);
    }
    Ok(g)
}

/// Lowercase, punctuation mapped to spaces, whitespace collapsed.
pub fn normalize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum MatchMethod {
    Exact,
    Similarity,
    LlmJudge,
    Unmatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcMatch {
    pub source_label: String,
    pub canonical_key: String,
    pub method: MatchMethod,
    pub score: f64,
}

/// Label similarity in [0, 1]. `Err` means the backend is unavailable and
/// the pipeline moves to the next stage.
pub trait SimilarityBackend: Send + Sync {
    fn name(&self) -> &str;
    fn similarity(&self, a: &str, b: &str) -> Result<f64>;
}

/// Decides whether a dataset label and a canonical concept are equivalent.
pub trait ConceptJudge: Send + Sync {
    fn equivalent(&self, label: &str, candidate: &str) -> Result<bool>;
}

/// Jaccard overlap of normalized whitespace tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenJaccard;

impl SimilarityBackend for TokenJaccard {
    fn name(&self) -> &str {
        "token-jaccard"
    }

    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        let (na, nb) = (normalize_label(a), normalize_label(b));
        let ta: BTreeSet<&str> = na.split(' ').filter(|t| !t.is_empty()).collect();
        let tb: BTreeSet<&str> = nb.split(' ').filter(|t| !t.is_empty()).collect();
        let union = ta.union(&tb).count();
        if union == 0 {
            return Ok(0.0);
        }
        Ok(ta.intersection(&tb).count() as f64 / union as f64)
    }
}

pub struct Matcher {
    pub similarity: Option<Box<dyn SimilarityBackend>>,
    pub judge: Option<Box<dyn ConceptJudge>>,
    pub threshold: f64,
    /// How many of the most similar canonical concepts the judge reviews.
    pub judge_candidates: usize,
}

impl Default for Matcher {
    fn default() -> Self {
        Self {
            similarity: Some(Box::new(TokenJaccard)),
            judge: None,
            threshold: DEFAULT_MATCH_THRESHOLD,
            judge_candidates: 3,
        }
    }
}

impl Matcher {
    /// Normalized-exact matching only.
    pub fn exact_only() -> Self {
        Self {
            similarity: None,
            judge: None,
            ..Self::default()
        }
    }

    pub fn with_judge(mut self, judge: Box<dyn ConceptJudge>) -> Self {
        self.judge = Some(judge);
        self
    }
}

impl std::fmt::Debug for Matcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Matcher")
            .field("similarity", &self.similarity.as_ref().map(|s| s.name().to_string()))
            .field("judge", &self.judge.is_some())
            .field("threshold", &self.threshold)
            .finish()
    }
}

/// Prompt asking a judge model whether two concept labels are equivalent.
pub fn judge_prompt(label: &str, candidate: &str) -> String {
    format!(
        "You are aligning knowledge concepts between an educational dataset and a \
canonical concept graph.\n\
Dataset concept: \"{label}\"\n\
Canonical concept: \"{candidate}\"\n\n\
Judge equivalence against all four criteria:\n\
1. Pedagogical Equivalence: are the concepts pedagogically equivalent, or is their content overlap very high?\n\
2. Syllabus Coherence: are they usually classified under the same specific module of a syllabus?\n\
3. Core Skill Identity: do they teach the same fundamental mathematical essence or target the same core skills?\n\
4. Exclusion of Weak Relations: the relationship must be equivalence, not topical relevance or partial overlap.\n\n\
Answer with a single JSON object: {{\"equivalent\": true or false, \"reason\": \"...\"}}"
    )
}

/// Resolves a dataset concept label against the canonical concept set.
pub fn kc_match(label: &str, canon: &BTreeSet<String>, matcher: &Matcher) -> KcMatch {
    let unmatched = |score: f64| KcMatch {
        source_label: label.to_string(),
        canonical_key: label.trim().to_string(),
        method: MatchMethod::Unmatched,
        score,
    };
    if canon.is_empty() {
        return unmatched(0.0);
    }
    let normalized = normalize_label(label);
    if let Some(key) = canon.iter().find(|c| normalize_label(c) == normalized) {
        return KcMatch {
            source_label: label.to_string(),
            canonical_key: key.clone(),
            method: MatchMethod::Exact,
            score: 1.0,
        };
    }

    let mut ranked: Vec<(f64, &String)> = Vec::new();
    if let Some(sim) = &matcher.similarity {
        let scored: Result<Vec<(f64, &String)>> = canon
            .iter()
            .map(|c| sim.similarity(label, c).map(|s| (s.clamp(0.0, 1.0), c)))
            .collect();
        match scored {
            Ok(v) => ranked = v,
            Err(e) => log::warn!("similarity backend {} unavailable: {e}", sim.name()),
        }
        // best score first, ties to the smaller key
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        if let Some(&(score, key)) = ranked.first() {
            if score >= matcher.threshold {
                return KcMatch {
                    source_label: label.to_string(),
                    canonical_key: key.clone(),
                    method: MatchMethod::Similarity,
                    score,
                };
            }
        }
    }

    let best = ranked.first().map(|r| r.0).unwrap_or(0.0);
    if let Some(judge) = &matcher.judge {
        let candidates: Vec<(f64, &String)> = if ranked.is_empty() {
            canon.iter().map(|c| (0.0, c)).collect()
        } else {
            ranked.clone()
        };
        for (score, key) in candidates.into_iter().take(matcher.judge_candidates) {
            match judge.equivalent(label, key) {
                Ok(true) => {
                    return KcMatch {
                        source_label: label.to_string(),
                        canonical_key: key.clone(),
                        method: MatchMethod::LlmJudge,
                        score,
                    }
                }
                Ok(false) => {}
                Err(e) => {
                    log::warn!("concept judge unavailable: {e}");
                    break;
                }
            }
        }
    }
    unmatched(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn kc_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn canon(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn loads_prereq_and_assoc_rows() {
        let f = kc_file("A,prereq,B\nB,assoc,C\n");
        let g = load_kc_graph(f.path()).unwrap();
        assert_eq!(g.concepts.len(), 3);
        assert_eq!(g.prereq.len(), 1);
        assert_eq!(g.assoc.len(), 1);
        assert!(g.warnings.is_empty());
    }

    #[test]
    fn duplicate_rows_collapse_and_header_is_skipped() {
        let f = kc_file("concept_a,relation,concept_b\nA,prereq,B\nA,prereq,B\nC,assoc,B\nB,assoc,C\n");
        let g = load_kc_graph(f.path()).unwrap();
        assert_eq!(g.prereq.len(), 1);
        assert_eq!(g.assoc.len(), 1);
    }

    #[test]
    fn unknown_relation_is_rejected() {
        let f = kc_file("A,requires,B\n");
        match load_kc_graph(f.path()).unwrap_err() {
            Error::BadRelation { relation, line, .. } => {
                assert_eq!(relation, "requires");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn prerequisite_cycles_are_warned_not_fatal() {
        let f = kc_file("A,prereq,B\nB,prereq,C\nC,prereq,A\n");
        let g = load_kc_graph(f.path()).unwrap();
        assert_eq!(g.warnings.len(), 1);
        assert!(g.warnings[0].contains("cycle"));
    }

    #[test]
    fn exact_match_after_normalization() {
        let m = kc_match("Fractions", &canon(&["fractions", "decimals"]), &Matcher::default());
        assert_eq!(m.method, MatchMethod::Exact);
        assert_eq!(m.canonical_key, "fractions");
        assert_eq!(m.score, 1.0);
        let m = kc_match("Concept_007", &canon(&["concept-007"]), &Matcher::exact_only());
        assert_eq!(m.method, MatchMethod::Exact);
    }

    #[test]
    fn jaccard_example_falls_through_to_unmatched() {
        let sim = TokenJaccard.similarity("adding fractions", "fraction addition").unwrap();
        assert_eq!(sim, 0.0);
        let m = kc_match("adding fractions", &canon(&["fraction addition"]), &Matcher::default());
        assert_eq!(m.method, MatchMethod::Unmatched);
        assert_eq!(m.canonical_key, "adding fractions");
    }

    #[test]
    fn similarity_above_threshold_matches() {
        let mut m = Matcher::default();
        m.threshold = 0.6;
        let got = kc_match(
            "area of a circle",
            &canon(&["circle area of", "volume of a cube"]),
            &m,
        );
        // {area, of, a, circle} vs {circle, area, of} = 3/4
        assert_eq!(got.method, MatchMethod::Similarity);
        assert_eq!(got.canonical_key, "circle area of");
        assert_eq!(got.score, 0.75);
        m.threshold = DEFAULT_MATCH_THRESHOLD;
        assert_eq!(
            kc_match("area of a circle", &canon(&["circle area of"]), &m).method,
            MatchMethod::Unmatched
        );
    }

    #[test]
    fn empty_canon_is_unmatched() {
        let m = kc_match("anything", &BTreeSet::new(), &Matcher::default());
        assert_eq!(m.method, MatchMethod::Unmatched);
        assert_eq!(m.canonical_key, "anything");
    }

    struct AcceptsPythagoras;
    impl ConceptJudge for AcceptsPythagoras {
        fn equivalent(&self, label: &str, candidate: &str) -> Result<bool> {
            Ok(label == "Gougu theorem" && candidate == "pythagorean theorem")
        }
    }

    struct Down;
    impl SimilarityBackend for Down {
        fn name(&self) -> &str {
            "down"
        }
        fn similarity(&self, _: &str, _: &str) -> Result<f64> {
            Err(Error::Backend("offline".into()))
        }
    }
    impl ConceptJudge for Down {
        fn equivalent(&self, _: &str, _: &str) -> Result<bool> {
            Err(Error::Backend("offline".into()))
        }
    }

    #[test]
    fn judge_resolves_lexically_distant_labels() {
        let m = Matcher::default().with_judge(Box::new(AcceptsPythagoras));
        let got = kc_match("Gougu theorem", &canon(&["pythagorean theorem", "ratios"]), &m);
        assert_eq!(got.method, MatchMethod::LlmJudge);
        assert_eq!(got.canonical_key, "pythagorean theorem");
    }

    #[test]
    fn unavailable_backends_degrade_to_unmatched() {
        let m = Matcher {
            similarity: Some(Box::new(Down)),
            judge: Some(Box::new(Down)),
            ..Matcher::default()
        };
        let got = kc_match("Gougu theorem", &canon(&["pythagorean theorem"]), &m);
        assert_eq!(got.method, MatchMethod::Unmatched);
    }

    #[test]
    fn judge_prompt_lists_all_criteria() {
        let p = judge_prompt("x", "y");
        for c in [
            "Pedagogical Equivalence",
            "Syllabus Coherence",
            "Core Skill Identity",
            "Exclusion of Weak Relations",
        ] {
            assert!(p.contains(c));
        }
    }
}
