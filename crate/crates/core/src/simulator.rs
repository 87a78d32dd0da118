//! Synthetic multi-source populations drawn from known 2PL parameters.
//! Output uses the same manifest and CSV layout the loader reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_string;
use crate::domain::Interaction;
use crate::error::{Error, Result};
use crate::graph::KcGraph;
use crate::ingest::DatasetManifest;
use crate::irt::predict_prob;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalSpec {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Topology {
    /// concept i is a prerequisite of concept i+1
    Chain,
    BalancedTree { branching: usize },
    /// each ordered pair i<j gets a prerequisite edge with this probability
    Random { density: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    #[serde(default = "defaults::n_sources")]
    pub n_sources: usize,
    /// Per source.
    #[serde(default = "defaults::n_students")]
    pub n_students: usize,
    /// Per source.
    #[serde(default = "defaults::n_questions")]
    pub n_questions: usize,
    /// Size of the concept vocabulary shared by all sources.
    #[serde(default = "defaults::n_concepts")]
    pub n_concepts: usize,
    #[serde(default = "defaults::responses")]
    pub responses_per_student: usize,
    #[serde(default = "defaults::standard")]
    pub ability: NormalSpec,
    #[serde(default = "defaults::standard")]
    pub difficulty: NormalSpec,
    /// Parameters of log(a).
    #[serde(default = "defaults::log_discrimination")]
    pub log_discrimination: NormalSpec,
    #[serde(default = "defaults::topology")]
    pub topology: Topology,
}

mod defaults {
    use super::{NormalSpec, Topology};
    pub fn n_sources() -> usize {
        2
    }
    pub fn n_students() -> usize {
        200
    }
    pub fn n_questions() -> usize {
        100
    }
    pub fn n_concepts() -> usize {
        10
    }
    pub fn responses() -> usize {
        50
    }
    pub fn standard() -> NormalSpec {
        NormalSpec { mean: 0.0, sd: 1.0 }
    }
    pub fn log_discrimination() -> NormalSpec {
        NormalSpec { mean: 0.0, sd: 0.25 }
    }
    pub fn topology() -> Topology {
        Topology::Chain
    }
}

impl SimConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            n_sources: defaults::n_sources(),
            n_students: defaults::n_students(),
            n_questions: defaults::n_questions(),
            n_concepts: defaults::n_concepts(),
            responses_per_student: defaults::responses(),
            ability: defaults::standard(),
            difficulty: defaults::standard(),
            log_discrimination: defaults::log_discrimination(),
            topology: defaults::topology(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("simulator config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_sources", self.n_sources),
            ("n_students", self.n_students),
            ("n_questions", self.n_questions),
            ("n_concepts", self.n_concepts),
            ("responses_per_student", self.responses_per_student),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, d) in [
            ("ability", self.ability),
            ("difficulty", self.difficulty),
            ("log_discrimination", self.log_discrimination),
        ] {
            if !d.mean.is_finite() || !d.sd.is_finite() || d.sd < 0.0 {
                return Err(Error::Config(format!("{name}: mean must be finite and sd non-negative")));
            }
        }
        match self.topology {
            Topology::BalancedTree { branching: 0 } => {
                Err(Error::Config("balanced-tree branching must be positive".into()))
            }
            Topology::Random { density } if !(0.0..=1.0).contains(&density) => {
                Err(Error::Config(format!("random topology density {density} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueItem {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub theta: BTreeMap<String, f64>,
    pub items: BTreeMap<String, TrueItem>,
    /// question id -> canonical concept key
    pub question_concept: BTreeMap<String, String>,
    pub concepts: Vec<String>,
    pub prereq: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSource {
    pub source_id: String,
    pub interactions: Vec<Interaction>,
    /// Raw column names used in this source's file.
    pub columns: [&'static str; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub config: SimConfig,
    pub sources: Vec<SimSource>,
    pub kc_graph: KcGraph,
    pub truth: GroundTruth,
}

impl Simulation {
    pub fn all_interactions(&self) -> Vec<Interaction> {
        self.sources.iter().flat_map(|s| s.interactions.iter().cloned()).collect()
    }

    pub fn source(&self, id: &str) -> Option<&SimSource> {
        self.sources.iter().find(|s| s.source_id == id)
    }
}

pub fn concept_key(i: usize) -> String {
    format!("concept-{i:03}")
}

/// Even sources write the canonical spelling, odd sources a variant that
/// only matches after label normalization.
fn source_label(source: usize, concept: usize) -> String {
    if source % 2 == 0 {
        concept_key(concept)
    } else {
        format!("Concept_{concept:03}")
    }
}

pub fn source_id(i: usize) -> String {
    format!("src{i}")
}

const COLUMN_STYLES: [[&str; 5]; 2] = [
    ["user_id", "item_id", "skill", "correct", "timestamp"],
    ["student", "question", "concept", "is_correct", "seq"],
];

fn normal(spec: NormalSpec) -> Normal<f64> {
    Normal::new(spec.mean, spec.sd).expect("validated")
}

fn topology_edges(topology: Topology, n: usize, rng: &mut ChaCha20Rng) -> Vec<(usize, usize)> {
    match topology {
        Topology::Chain => (1..n).map(|i| (i - 1, i)).collect(),
        Topology::BalancedTree { branching } => (1..n).map(|i| ((i - 1) / branching, i)).collect(),
        Topology::Random { density } => {
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < density {
                        edges.push((i, j));
                    }
                }
            }
            edges
        }
    }
}

/// Samples every parameter and response from one seeded stream.
pub fn generate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let concepts: Vec<String> = (0..cfg.n_concepts).map(concept_key).collect();
    let edges = topology_edges(cfg.topology, cfg.n_concepts, &mut rng);

    let mut kc_graph = KcGraph {
        concepts: concepts.iter().cloned().collect(),
        ..KcGraph::default()
    };
    let prereq: Vec<(String, String)> = edges
        .iter()
        .map(|&(a, b)| (concepts[a].clone(), concepts[b].clone()))
        .collect();
    kc_graph.prereq = prereq.iter().cloned().collect::<BTreeSet<_>>();

    let ability = normal(cfg.ability);
    let difficulty = normal(cfg.difficulty);
    let discrimination =
        LogNormal::new(cfg.log_discrimination.mean, cfg.log_discrimination.sd).expect("validated");

    let mut truth = GroundTruth {
        seed: cfg.seed,
        theta: BTreeMap::new(),
        items: BTreeMap::new(),
        question_concept: BTreeMap::new(),
        concepts: concepts.clone(),
        prereq,
    };
    let mut sources = Vec::with_capacity(cfg.n_sources);
    for s in 0..cfg.n_sources {
        let sid = source_id(s);
        let mut questions = Vec::with_capacity(cfg.n_questions);
        for q in 0..cfg.n_questions {
            let qid = format!("{sid}-q{q:04}");
            let item = TrueItem {
                a: discrimination.sample(&mut rng),
                b: difficulty.sample(&mut rng),
            };
            let concept = q % cfg.n_concepts;
            truth.items.insert(qid.clone(), item);
            truth.question_concept.insert(qid.clone(), concepts[concept].clone());
            questions.push((qid, item, source_label(s, concept)));
        }
        let mut interactions = Vec::with_capacity(cfg.n_students * cfg.responses_per_student);
        for u in 0..cfg.n_students {
            let student = format!("{sid}-u{u:04}");
            let theta = ability.sample(&mut rng);
            truth.theta.insert(student.clone(), theta);
            for order in 0..cfg.responses_per_student {
                let (qid, item, label) = &questions[rng.random_range(0..questions.len())];
                let p = predict_prob(theta, item.a, item.b)?;
                interactions.push(Interaction {
                    student_id: student.clone(),
                    question_id: qid.clone(),
                    source_id: sid.clone(),
                    concept_label: label.clone(),
                    correct: rng.random::<f64>() < p,
                    order_index: order as u64,
                });
            }
        }
        sources.push(SimSource {
            source_id: sid,
            interactions,
            columns: COLUMN_STYLES[s % COLUMN_STYLES.len()],
        });
    }
    Ok(Simulation {
        config: cfg.clone(),
        sources,
        kc_graph,
        truth,
    })
}

pub const KC_GRAPH_FILE: &str = "kc_graph.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `<source>.csv` and `<source>.toml` per source, the shared concept
/// graph and the ground truth. Returns the manifest paths.
pub fn write_simulation(sim: &Simulation, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut kc = String::from("concept_a,relation,concept_b\n");
    for (a, b) in &sim.kc_graph.prereq {
        kc.push_str(&format!("{a},prereq,{b}\n"));
    }
    for (a, b) in &sim.kc_graph.assoc {
        kc.push_str(&format!("{a},assoc,{b}\n"));
    }
    write_file(&dir.join(KC_GRAPH_FILE), &kc)?;

    let mut manifests = Vec::with_capacity(sim.sources.len());
    for src in &sim.sources {
        let csv_name = format!("{}.csv", src.source_id);
        let csv_path = dir.join(&csv_name);
        let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| Error::malformed(&csv_path, e))?;
        let io = |e: csv::Error| Error::malformed(&csv_path, e);
        writer.write_record(src.columns).map_err(io)?;
        for i in &src.interactions {
            writer
                .write_record([
                    i.student_id.as_str(),
                    i.question_id.as_str(),
                    i.concept_label.as_str(),
                    if i.correct { "1" } else { "0" },
                    &i.order_index.to_string(),
                ])
                .map_err(io)?;
        }
        writer.flush().map_err(|e| Error::io(&csv_path, e))?;

        let [student, question, concept, correct, order] = src.columns;
        let manifest = DatasetManifest {
            source_id: src.source_id.clone(),
            interactions_path: PathBuf::from(&csv_name),
            column_map: BTreeMap::from([
                ("student".to_string(), student.to_string()),
                ("question".to_string(), question.to_string()),
                ("concept".to_string(), concept.to_string()),
                ("correct".to_string(), correct.to_string()),
                ("order".to_string(), order.to_string()),
            ]),
            kc_graph_path: Some(PathBuf::from(KC_GRAPH_FILE)),
            delimiter: ",".into(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join(format!("{}.toml", src.source_id));
        write_file(&path, &text)?;
        manifests.push(path);
    }
    write_file(&dir.join(GROUND_TRUTH_FILE), &to_canonical_string(&sim.truth)?)?;
    Ok(manifests)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{load_kc_graph, normalize_label};
    use crate::ingest::load_interactions;

    fn small(seed: u64) -> SimConfig {
        SimConfig {
            n_students: 20,
            n_questions: 12,
            n_concepts: 4,
            responses_per_student: 15,
            ..SimConfig::new(seed)
        }
    }

    #[test]
    fn centered_population_answers_half_correct() {
        let cfg = SimConfig {
            n_sources: 1,
            n_students: 100,
            n_questions: 10,
            responses_per_student: 100,
            ability: NormalSpec { mean: 0.0, sd: 0.0 },
            difficulty: NormalSpec { mean: 0.0, sd: 0.0 },
            ..SimConfig::new(3)
        };
        let sim = generate(&cfg).unwrap();
        let xs = &sim.sources[0].interactions;
        assert_eq!(xs.len(), 10_000);
        let rate = xs.iter().filter(|i| i.correct).count() as f64 / xs.len() as f64;
        assert!((rate - 0.5).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn empirical_rate_tracks_model_probability() {
        let cfg = SimConfig {
            n_sources: 1,
            n_students: 40,
            n_questions: 1,
            n_concepts: 1,
            responses_per_student: 50,
            ability: NormalSpec { mean: 0.7, sd: 0.0 },
            difficulty: NormalSpec { mean: -0.3, sd: 0.0 },
            log_discrimination: NormalSpec { mean: 0.2, sd: 0.0 },
            ..SimConfig::new(11)
        };
        let sim = generate(&cfg).unwrap();
        let p = predict_prob(0.7, 0.2f64.exp(), -0.3).unwrap();
        let xs = &sim.sources[0].interactions;
        let n = xs.len() as f64;
        let rate = xs.iter().filter(|i| i.correct).count() as f64 / n;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((rate - p).abs() <= 3.0 * se, "rate {rate} vs {p}");
    }

    #[test]
    fn same_seed_same_files() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_simulation(&generate(&small(5)).unwrap(), d1.path()).unwrap();
        write_simulation(&generate(&small(5)).unwrap(), d2.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(d1.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert_eq!(names.len(), 6);
        for n in names {
            assert_eq!(fs::read(d1.path().join(&n)).unwrap(), fs::read(d2.path().join(&n)).unwrap());
        }
        assert_ne!(generate(&small(5)).unwrap(), generate(&small(6)).unwrap());
    }

    #[test]
    fn files_round_trip_through_the_loader() {
        let dir = tempfile::tempdir().unwrap();
        let sim = generate(&small(8)).unwrap();
        let manifests = write_simulation(&sim, dir.path()).unwrap();
        for (path, src) in manifests.iter().zip(&sim.sources) {
            let m = DatasetManifest::from_file(path).unwrap();
            let loaded = load_interactions(&m).unwrap();
            assert!(loaded.skipped.is_empty());
            assert_eq!(loaded.interactions, src.interactions);
        }
        assert_eq!(load_kc_graph(&dir.path().join(KC_GRAPH_FILE)).unwrap(), sim.kc_graph);
    }

    #[test]
    fn sources_share_normalized_vocabulary() {
        let sim = generate(&small(2)).unwrap();
        let labels = |s: &SimSource| -> BTreeSet<String> {
            s.interactions.iter().map(|i| normalize_label(&i.concept_label)).collect()
        };
        assert_eq!(labels(&sim.sources[0]), labels(&sim.sources[1]));
        assert_ne!(sim.sources[0].interactions[0].concept_label, sim.sources[1].interactions[0].concept_label);
    }

    #[test]
    fn topologies_have_expected_edges() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert_eq!(topology_edges(Topology::Chain, 4, &mut rng), vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(
            topology_edges(Topology::BalancedTree { branching: 2 }, 5, &mut rng),
            vec![(0, 1), (0, 2), (1, 3), (1, 4)]
        );
        assert!(topology_edges(Topology::Random { density: 0.0 }, 6, &mut rng).is_empty());
        assert_eq!(topology_edges(Topology::Random { density: 1.0 }, 4, &mut rng).len(), 6);
    }

    #[test]
    fn config_parses_and_validates() {
        let cfg = SimConfig::from_toml("seed = 4\nn_students = 3\n[topology]\nkind = \"random\"\ndensity = 0.2\n").unwrap();
        assert_eq!(cfg.n_students, 3);
        assert_eq!(cfg.topology, Topology::Random { density: 0.2 });
        assert!(SimConfig::from_toml("n_students = 3\n").is_err());
        assert!(SimConfig::from_toml("seed = 1\nn_concepts = 0\n").is_err());
    }
}
