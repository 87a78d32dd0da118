//! Core domain types shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One student response event.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub student_id: String,
    pub question_id: String,
    pub source_id: String,
    /// Concept label exactly as it appears in the source file.
    pub concept_label: String,
    pub correct: bool,
    /// Per-student monotone event order.
    pub order_index: u64,
}

/// Three-way bucket for abilities and difficulties.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Level {
    Low,
    Medium,
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Medium, Level::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Low => "Low",
            Level::Medium => "Medium",
            Level::High => "High",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Low" => Ok(Level::Low),
            "Medium" => Ok(Level::Medium),
            "High" => Ok(Level::High),
            other => Err(format!("unknown level {other:?}")),
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum DimensionKind {
    Concept,
    Difficulty,
    QuestionGroup,
    AbilityLevel,
}

impl DimensionKind {
    pub fn tag(self) -> &'static str {
        match self {
            DimensionKind::Concept => "K",
            DimensionKind::Difficulty => "D",
            DimensionKind::QuestionGroup => "QG",
            DimensionKind::AbilityLevel => "A",
        }
    }
}

/// An aggregation axis of the interaction repository.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Dimension {
    pub kind: DimensionKind,
    pub key: String,
}

impl Dimension {
    pub fn new(kind: DimensionKind, key: impl Into<String>) -> Self {
        Self {
            kind,
            key: key.into(),
        }
    }

    pub fn concept(key: impl Into<String>) -> Self {
        Self::new(DimensionKind::Concept, key)
    }

    pub fn difficulty(level: Level) -> Self {
        Self::new(DimensionKind::Difficulty, level.as_str())
    }

    pub fn question_group(key: impl Into<String>) -> Self {
        Self::new(DimensionKind::QuestionGroup, key)
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.tag(), self.key)
    }
}

/// Aggregate performance on one dimension.
///
/// Only ever constructed from at least one attempt; "no data" is carried as
/// `Option::None` by every producer so that absence never reads as 0%.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfTuple {
    pub acc: f64,
    pub dwa: f64,
    pub attempts: usize,
    pub conf: f64,
}

impl PerfTuple {
    pub fn correct_count(&self) -> usize {
        (self.acc * self.attempts as f64).round() as usize
    }
}

/// Parameters of the evidence-confidence multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfConfig {
    /// Attempts needed for full sample sufficiency.
    pub n0: usize,
    /// Number of most recent outcomes used for the stability term.
    pub window: usize,
    /// Recency decay used for DWA.
    pub beta: f64,
}

impl Default for ConfConfig {
    fn default() -> Self {
        Self {
            n0: 5,
            window: 10,
            beta: 0.8,
        }
    }
}
