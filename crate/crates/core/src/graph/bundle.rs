//! Knowledge-base bundle: a directory of canonical JSON documents plus a
//! SHA-256 checksum file covering each of them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::build::{BuildManifest, KnowledgeBase, QuestionInfo};
use super::{Edge, Graph, NodeId};
use crate::canonical::to_canonical_string;
use crate::domain::{Dimension, Interaction, Level};
use crate::error::{Error, Result};
use crate::irt::IrtParams;
use crate::repository::{InteractionRepository, Outcome};

pub const BUNDLE_FILES: [&str; 5] = [
    "graph.json",
    "kc_graph.json",
    "irt.json",
    "repository.json",
    "manifest.json",
];
const CHECKSUM_FILE: &str = "checksums.sha256";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    nodes: Vec<NodeId>,
    edges: Vec<Edge>,
}

impl GraphDoc {
    fn of(g: &Graph) -> Self {
        Self {
            nodes: g.nodes().cloned().collect(),
            edges: g.edges().collect(),
        }
    }

    fn into_graph(self) -> Result<Graph> {
        Graph::from_parts(self.nodes, self.edges)
    }
}

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    concept: String,
    level: Level,
    group: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    format_version: u32,
    build: BuildManifest,
    qg_index: Vec<GroupEntry>,
    questions: BTreeMap<String, QuestionInfo>,
    student_sources: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct OutcomeEntry {
    student: String,
    dimension: Dimension,
    outcomes: Vec<Outcome>,
}

#[derive(Serialize, Deserialize)]
struct RepositoryDoc {
    dimensions: Vec<Dimension>,
    interactions: Vec<Interaction>,
    outcomes: Vec<OutcomeEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `kb` into `dir` (created if missing), overwriting bundle files.
pub fn persist_bundle(kb: &KnowledgeBase, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (by_student, by_dimension, known) = kb.repo.raw_parts();
    let repo = RepositoryDoc {
        dimensions: known.iter().cloned().collect(),
        interactions: by_student.values().flatten().cloned().collect(),
        outcomes: by_dimension
            .iter()
            .flat_map(|(student, dims)| {
                dims.iter().map(move |(d, o)| OutcomeEntry {
                    student: student.clone(),
                    dimension: d.clone(),
                    outcomes: o.clone(),
                })
            })
            .collect(),
    };
    let manifest = ManifestDoc {
        format_version: FORMAT_VERSION,
        build: kb.manifest.clone(),
        qg_index: kb
            .qg_index
            .iter()
            .map(|((concept, level), group)| GroupEntry {
                concept: concept.clone(),
                level: *level,
                group: group.clone(),
            })
            .collect(),
        questions: kb.questions.clone(),
        student_sources: kb.student_sources.clone(),
    };
    let docs = [
        to_canonical_string(&GraphDoc::of(&kb.graph))?,
        to_canonical_string(&GraphDoc::of(&kb.kc_graph))?,
        to_canonical_string(&kb.irt)?,
        to_canonical_string(&repo)?,
        to_canonical_string(&manifest)?,
    ];
    let mut sums = String::new();
    for (name, text) in BUNDLE_FILES.iter().zip(&docs) {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        sums.push_str(&format!("{}  {name}\n", sha256_hex(text.as_bytes())));
    }
    let path = dir.join(CHECKSUM_FILE);
    fs::write(&path, sums).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn read_checked<T: DeserializeOwned>(dir: &Path, name: &str, sums: &BTreeMap<String, String>) -> Result<T> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    match sums.get(name) {
        Some(expected) if *expected == sha256_hex(&bytes) => {}
        _ => return Err(Error::ChecksumMismatch(name.to_string())),
    }
    serde_json::from_slice(&bytes).map_err(|e| Error::malformed(&path, e))
}

/// Reads a bundle written by [`persist_bundle`], verifying every checksum.
pub fn load_bundle(dir: &Path) -> Result<KnowledgeBase> {
    let sums_path = dir.join(CHECKSUM_FILE);
    let text = fs::read_to_string(&sums_path).map_err(|e| Error::io(&sums_path, e))?;
    let mut sums = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (hash, name) = line
            .split_once("  ")
            .ok_or_else(|| Error::malformed(&sums_path, format!("bad line {line:?}")))?;
        sums.insert(name.to_string(), hash.to_string());
    }

    let graph: GraphDoc = read_checked(dir, BUNDLE_FILES[0], &sums)?;
    let kc_graph: GraphDoc = read_checked(dir, BUNDLE_FILES[1], &sums)?;
    let irt: IrtParams = read_checked(dir, BUNDLE_FILES[2], &sums)?;
    let repo: RepositoryDoc = read_checked(dir, BUNDLE_FILES[3], &sums)?;
    let manifest: ManifestDoc = read_checked(dir, BUNDLE_FILES[4], &sums)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::malformed(
            dir.join(BUNDLE_FILES[4]),
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }

    let mut by_student: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for i in repo.interactions {
        by_student.entry(i.student_id.clone()).or_default().push(i);
    }
    let mut by_dimension: BTreeMap<String, BTreeMap<Dimension, Vec<Outcome>>> = BTreeMap::new();
    for e in repo.outcomes {
        by_dimension.entry(e.student).or_default().insert(e.dimension, e.outcomes);
    }
    let known: BTreeSet<Dimension> = repo.dimensions.into_iter().collect();

    Ok(KnowledgeBase {
        graph: graph.into_graph()?,
        kc_graph: kc_graph.into_graph()?,
        repo: InteractionRepository::from_raw_parts(by_student, by_dimension, known),
        irt,
        qg_index: manifest
            .qg_index
            .into_iter()
            .map(|e| ((e.concept, e.level), e.group))
            .collect(),
        questions: manifest.questions,
        student_sources: manifest.student_sources,
        manifest: manifest.build,
    })
}
