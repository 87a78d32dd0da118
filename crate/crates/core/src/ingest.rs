//! Loading interaction logs, segmenting histories into evaluation windows,
//! and student-disjoint train/test splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Interaction;
use crate::error::{Error, Result};

/// Canonical field names a manifest must map onto source columns.
pub const REQUIRED_FIELDS: [&str; 4] = ["student", "question", "concept", "correct"];
pub const ORDER_FIELD: &str = "order";

/// Human-readable description of the split sampler, embedded in run reports.
pub const SPLIT_PRNG: &str =
    "ChaCha20 keyed by the u64 seed (little-endian, zero-padded to 32 bytes); \
     partial Fisher-Yates, swap index = i + next_u64() mod (n - i)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_id: String,
    pub interactions_path: PathBuf,
    /// canonical field -> column name in the interactions file
    pub column_map: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kc_graph_path: Option<PathBuf>,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
}

fn default_delimiter() -> String {
    ",".into()
}

impl DatasetManifest {
    /// Reads a TOML manifest; relative paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::malformed(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if manifest.interactions_path.is_relative() {
            manifest.interactions_path = base.join(&manifest.interactions_path);
        }
        if let Some(kc) = manifest.kc_graph_path.as_mut() {
            if kc.is_relative() {
                *kc = base.join(&*kc);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        for field in REQUIRED_FIELDS {
            if !self.column_map.contains_key(field) {
                return Err(Error::Config(format!(
                    "manifest for source {:?} has no column_map entry for {field:?}",
                    self.source_id
                )));
            }
        }
        if self.delimiter.len() != 1 {
            return Err(Error::Config(format!(
                "delimiter must be a single byte, got {:?}",
                self.delimiter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRow {
    /// 1-based line number in the file, header being line 1.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedInteractions {
    /// Sorted by (student_id, order_index).
    pub interactions: Vec<Interaction>,
    pub rows_read: usize,
    pub skipped: Vec<SkippedRow>,
}

/// Correctness coercion: 1/true → correct, 0/false → incorrect, else unparseable.
pub fn coerce_correct(raw: &str) -> Option<bool> {
    match raw.trim() {
        "1" | "true" | "TRUE" | "True" => Some(true),
        "0" | "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

pub fn load_interactions(manifest: &DatasetManifest) -> Result<LoadedInteractions> {
    manifest.validate()?;
    let path = &manifest.interactions_path;
    let unreadable = |reason: String| Error::UnreadableFile {
        path: path.clone(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(manifest.delimiter.as_bytes()[0])
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| unreadable(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| unreadable(e.to_string()))?
        .clone();
    let column = |field: &str| -> Result<Option<usize>> {
        match manifest.column_map.get(field) {
            None => Ok(None),
            Some(name) => headers
                .iter()
                .position(|h| h.trim() == name)
                .map(Some)
                .ok_or_else(|| Error::MissingColumn {
                    path: path.clone(),
                    column: name.clone(),
                }),
        }
    };
    let required = |field: &str| -> Result<usize> { Ok(column(field)?.expect("validated")) };
    let student_col = required("student")?;
    let question_col = required("question")?;
    let concept_col = required("concept")?;
    let correct_col = required("correct")?;
    let order_col = column(ORDER_FIELD)?;

    struct Row {
        student: String,
        question: String,
        concept: String,
        correct: bool,
        order: f64,
        row: usize,
    }

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut rows_read = 0;
    for (row_no, record) in reader.records().enumerate() {
        rows_read += 1;
        let line = row_no as u64 + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                skipped.push(SkippedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let field = |i: usize| record.get(i).map(str::trim).unwrap_or("");
        let (student, question) = (field(student_col), field(question_col));
        if student.is_empty() || question.is_empty() {
            skipped.push(SkippedRow {
                line,
                reason: "empty student or question id".into(),
            });
            continue;
        }
        let Some(correct) = coerce_correct(field(correct_col)) else {
            skipped.push(SkippedRow {
                line,
                reason: format!("unparseable correctness {:?}", field(correct_col)),
            });
            continue;
        };
        let order = match order_col {
            None => row_no as f64,
            Some(c) => match field(c).parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => {
                    skipped.push(SkippedRow {
                        line,
                        reason: format!("unparseable order value {:?}", field(c)),
                    });
                    continue;
                }
            },
        };
        rows.push(Row {
            student: student.to_string(),
            question: question.to_string(),
            concept: field(concept_col).to_string(),
            correct,
            order,
            row: row_no,
        });
    }

    rows.sort_by(|a, b| {
        a.student
            .cmp(&b.student)
            .then(a.order.total_cmp(&b.order))
            .then(a.row.cmp(&b.row))
    });
    let mut interactions = Vec::with_capacity(rows.len());
    let mut next_index = 0u64;
    let mut current: Option<String> = None;
    for row in rows {
        if current.as_deref() != Some(row.student.as_str()) {
            current = Some(row.student.clone());
            next_index = 0;
        }
        interactions.push(Interaction {
            student_id: row.student,
            question_id: row.question,
            source_id: manifest.source_id.clone(),
            concept_label: row.concept,
            correct: row.correct,
            order_index: next_index,
        });
        next_index += 1;
    }
    Ok(LoadedInteractions {
        interactions,
        rows_read,
        skipped,
    })
}

/// Groups interactions into per-student histories ordered by order_index.
pub fn histories(interactions: &[Interaction]) -> BTreeMap<String, Vec<Interaction>> {
    let mut out: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for i in interactions {
        out.entry(i.student_id.clone()).or_default().push(i.clone());
    }
    for h in out.values_mut() {
        h.sort_by_key(|i| i.order_index);
    }
    out
}

/// A contiguous window of one student's history; the last element is the
/// prediction target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSequence {
    pub student_id: String,
    pub window: Vec<Interaction>,
}

impl EvalSequence {
    pub fn target(&self) -> &Interaction {
        self.window.last().expect("windows are never empty")
    }

    /// Everything before the target.
    pub fn context(&self) -> &[Interaction] {
        &self.window[..self.window.len() - 1]
    }

    /// Stable identifier: student plus target order index.
    pub fn id(&self) -> String {
        format!("{}#{}", self.student_id, self.target().order_index)
    }
}

/// Cuts a history into consecutive windows of length `len`. A trailing
/// remainder of at least two events is kept; a singleton remainder is dropped.
pub fn segment(history: &[Interaction], len: usize) -> Result<Vec<EvalSequence>> {
    if len < 2 {
        return Err(Error::Config(format!(
            "sequence length must be at least 2, got {len}"
        )));
    }
    Ok(history
        .chunks(len)
        .filter(|c| c.len() >= 2)
        .map(|c| EvalSequence {
            student_id: c[0].student_id.clone(),
            window: c.to_vec(),
        })
        .collect())
}

/// Segments every student's history, in student-id order.
pub fn segment_all(interactions: &[Interaction], len: usize) -> Result<Vec<EvalSequence>> {
    let mut out = Vec::new();
    for history in histories(interactions).values() {
        out.extend(segment(history, len)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<EvalSequence>,
    pub test: Vec<EvalSequence>,
}

impl Split {
    pub fn test_students(&self) -> BTreeSet<&str> {
        self.test.iter().map(|s| s.student_id.as_str()).collect()
    }

    pub fn train_students(&self) -> BTreeSet<&str> {
        self.train.iter().map(|s| s.student_id.as_str()).collect()
    }
}

pub fn split_rng(seed: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

/// Samples `n` of `total` indices without replacement (partial Fisher-Yates).
pub fn sample_indices(rng: &mut impl RngCore, total: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..n.min(total) {
        let j = i + (rng.next_u64() % (total - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(n.min(total));
    idx
}

/// Samples `n_test` sequences, then moves every sequence of each sampled
/// student to the test side. Input order is preserved on both sides.
pub fn split_student_disjoint(
    sequences: Vec<EvalSequence>,
    n_test: usize,
    seed: u64,
) -> Result<Split> {
    if n_test > sequences.len() {
        return Err(Error::InsufficientData(format!(
            "requested {n_test} test sequences, only {} available",
            sequences.len()
        )));
    }
    let mut rng = split_rng(seed);
    let test_students: BTreeSet<String> = sample_indices(&mut rng, sequences.len(), n_test)
        .into_iter()
        .map(|i| sequences[i].student_id.clone())
        .collect();
    let (test, train) = sequences
        .into_iter()
        .partition(|s| test_students.contains(&s.student_id));
    Ok(Split { train, test })
}
