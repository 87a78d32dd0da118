//! Prompt rendering from a retrieved context, and parsing of predictor
//! responses back into a structured result.

use std::fmt::Write;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{DimensionKind, PerfTuple};
use crate::error::{Error, Result};
use crate::retrieval::{DimensionPerf, RetrievedContext};

pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/default_prompt.txt");

/// Slots every template must contain.
pub const REQUIRED_SLOTS: [&str; 4] = ["metadata", "individual_metrics", "peer_aggregates", "trajectory"];
/// Optional slot for the output schema; appended to the user text if absent.
pub const SCHEMA_SLOT: &str = "output_schema";

pub const NO_EVIDENCE: &str = "no evidence (0 attempts)";

pub const SCHEMA_HINT: &str = r#"{
  "probability": number in [0, 1], the chance the answer is correct,
  "judgment": "correct" or "incorrect",
  "ability_summary": string, the student's overall ability,
  "mastery_summary": string, mastery of the target concept and difficulty,
  "positive_factors": [string], evidence raising the chance of success,
  "negative_factors": [string], evidence lowering it, including risks,
  "rationale": string, how the evidence and its reliability led to the prediction
}"#;

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{\{\s*([A-Za-z_]+)\s*\}\}").unwrap());
static NUMERIC_LITERAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\d+\.\d+|\d+\s*%").unwrap());
static PROSE_JUDGMENT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?i)\b(?:judgment|judgement|prediction|label)\b\s*["']?\s*[:=]\s*["']?\s*(correct|incorrect)\b"#)
        .unwrap()
});

/// A template split into system and user sections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub system: String,
    pub user: String,
}

impl Template {
    /// Parses `@@system` / `@@user` sections. Text before any marker belongs
    /// to the user section.
    pub fn parse(text: &str) -> Result<Self> {
        let mut system = String::new();
        let mut user = String::new();
        let mut current = &mut user;
        for line in text.lines() {
            match line.trim() {
                "@@system" => current = &mut system,
                "@@user" => current = &mut user,
                _ => {
                    current.push_str(line);
                    current.push('\n');
                }
            }
        }
        let t = Template {
            system: system.trim().to_string(),
            user: user.trim().to_string(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn default_template() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("shipped template is valid")
    }

    fn slots(&self) -> Vec<String> {
        SLOT.captures_iter(&self.system)
            .chain(SLOT.captures_iter(&self.user))
            .map(|c| c[1].to_string())
            .collect()
    }

    /// Checks slots and rejects numeric literals in the static text, so
    /// every number in a rendered prompt comes from the context.
    pub fn validate(&self) -> Result<()> {
        let slots = self.slots();
        for required in REQUIRED_SLOTS {
            if !slots.iter().any(|s| s == required) {
                return Err(Error::TemplateSlotMissing(required.to_string()));
            }
        }
        if let Some(unknown) = slots
            .iter()
            .find(|s| !REQUIRED_SLOTS.contains(&s.as_str()) && s.as_str() != SCHEMA_SLOT)
        {
            return Err(Error::TemplateLint(format!("unknown slot {{{{{unknown}}}}}")));
        }
        for text in [&self.system, &self.user] {
            let stripped = SLOT.replace_all(text, "");
            if let Some(m) = NUMERIC_LITERAL.find(&stripped) {
                return Err(Error::TemplateLint(format!(
                    "numeric literal {:?} in static text",
                    m.as_str()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDocument {
    pub system_text: String,
    pub user_text: String,
    pub schema_hint: String,
}

impl PromptDocument {
    /// Bytes identifying the prompt, for hashing and caching.
    pub fn cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.system_text.len() + self.user_text.len() + 1);
        out.extend_from_slice(self.system_text.as_bytes());
        out.push(0);
        out.extend_from_slice(self.user_text.as_bytes());
        out
    }
}

fn num(x: f64) -> String {
    format!("{x:.4}")
}

fn dimension_name(kind: DimensionKind) -> &'static str {
    match kind {
        DimensionKind::Concept => "Concept",
        DimensionKind::Difficulty => "Difficulty",
        DimensionKind::QuestionGroup => "Question group",
        DimensionKind::AbilityLevel => "Ability level",
    }
}

fn perf_line(d: &DimensionPerf) -> String {
    let name = format!("{} {}", dimension_name(d.dimension.kind), d.dimension.key);
    match &d.perf {
        None => format!("- {name}: {NO_EVIDENCE}"),
        Some(p) => format!(
            "- {name}: accuracy {}, dynamic weighted accuracy {}, attempts {}, confidence {} [sources: {}]",
            num(p.acc),
            num(p.dwa),
            p.attempts,
            num(p.conf),
            d.sources.join(", ")
        ),
    }
}

fn reliability_line(perf: &[DimensionPerf]) -> String {
    let parts: Vec<String> = perf
        .iter()
        .map(|d| {
            format!(
                "{} {} attempts",
                dimension_name(d.dimension.kind).to_lowercase(),
                d.perf.as_ref().map_or(0, |p: &PerfTuple| p.attempts)
            )
        })
        .collect();
    format!("Reliability: {}", parts.join(", "))
}

fn outcomes(seq: &[bool]) -> String {
    seq.iter()
        .map(|&c| if c { "correct" } else { "incorrect" })
        .collect::<Vec<_>>()
        .join(", ")
}

fn metadata_block(ctx: &RetrievedContext) -> String {
    let t = &ctx.target;
    let mut s = String::new();
    let _ = writeln!(s, "Student: {} (source {})", t.student_id, t.source_id);
    let _ = writeln!(s, "Ability (normalized): {} [{}]", num(t.theta_norm), t.ability_level);
    let _ = writeln!(s, "Question: {}", t.question_id);
    let _ = writeln!(s, "Concept: {} (aligned by {:?})", t.concept, t.concept_method);
    let _ = writeln!(s, "Difficulty: {}", t.difficulty);
    let _ = writeln!(s, "Question group: {}", t.group);
    let _ = write!(s, "Prior interactions: {}", t.history_len);
    s
}

fn individual_block(ctx: &RetrievedContext) -> String {
    let mut lines: Vec<String> = ctx.target_perf.iter().map(perf_line).collect();
    lines.push(reliability_line(&ctx.target_perf));
    lines.join("\n")
}

fn peer_block(ctx: &RetrievedContext) -> String {
    if ctx.peers.is_empty() {
        return "No peers retrieved.".to_string();
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Candidate pool: {:?}, {} students considered",
        ctx.pool, ctx.pool_size
    );
    for (i, p) in ctx.peers.iter().enumerate() {
        let sim = &p.similarity;
        let _ = writeln!(
            s,
            "Peer {}: {} (source {}), similarity {} (behavior {}, structure {}, ability {}), ability {} [{}]",
            i + 1,
            sim.candidate,
            p.source_id,
            num(sim.sim_final),
            num(sim.sim_bhv),
            num(sim.sim_struc),
            num(sim.sim_abil),
            num(p.theta_norm),
            p.ability_level
        );
        for d in &p.perf {
            let _ = writeln!(s, "  {}", perf_line(d));
        }
        let _ = writeln!(s, "  {}", reliability_line(&p.perf));
        let recent = if p.trajectory.is_empty() {
            "none".to_string()
        } else {
            outcomes(&p.trajectory)
        };
        let _ = writeln!(s, "  Recent outcomes (oldest first): {recent}");
    }
    s.trim_end().to_string()
}

fn trajectory_block(ctx: &RetrievedContext) -> String {
    if ctx.trajectory.is_empty() {
        return format!("Recent outcomes: {NO_EVIDENCE}");
    }
    format!(
        "Last {} outcomes (oldest first): {}",
        ctx.trajectory.len(),
        outcomes(&ctx.trajectory)
    )
}

fn fill(text: &str, values: &[(&str, &str)]) -> String {
    SLOT.replace_all(text, |c: &regex::Captures<'_>| {
        values
            .iter()
            .find(|(k, _)| *k == &c[1])
            .map(|(_, v)| v.to_string())
            .unwrap_or_default()
    })
    .into_owned()
}

pub fn render_prompt(ctx: &RetrievedContext, template: &Template) -> Result<PromptDocument> {
    template.validate()?;
    let blocks = [
        ("metadata", metadata_block(ctx)),
        ("individual_metrics", individual_block(ctx)),
        ("peer_aggregates", peer_block(ctx)),
        ("trajectory", trajectory_block(ctx)),
        (SCHEMA_SLOT, SCHEMA_HINT.to_string()),
    ];
    let values: Vec<(&str, &str)> = blocks.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let mut user_text = fill(&template.user, &values);
    if !template.slots().iter().any(|s| s == SCHEMA_SLOT) {
        user_text.push_str("\n\nReply with a single JSON object with these fields:\n");
        user_text.push_str(SCHEMA_HINT);
    }
    Ok(PromptDocument {
        system_text: fill(&template.system, &values),
        user_text,
        schema_hint: SCHEMA_HINT.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Correct,
    Incorrect,
}

impl Label {
    pub fn from_probability(p: f64, threshold: f64) -> Self {
        if p >= threshold {
            Label::Correct
        } else {
            Label::Incorrect
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Correct => "correct",
            Label::Incorrect => "incorrect",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub ability_summary: String,
    pub mastery_summary: String,
    pub positive_factors: Vec<String>,
    pub negative_factors: Vec<String>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub probability: f64,
    pub label: Label,
    pub report: Report,
    pub raw: String,
    /// Probability derived from the qualitative judgment alone.
    pub imputed: bool,
    /// Probability was outside [0, 1] and was clamped.
    pub clamped: bool,
}

impl PredictionResult {
    /// The JSON object a well-behaved predictor would return for this result.
    pub fn to_response_json(&self) -> String {
        serde_json::json!({
            "probability": self.probability,
            "judgment": self.label.as_str(),
            "ability_summary": self.report.ability_summary,
            "mastery_summary": self.report.mastery_summary,
            "positive_factors": self.report.positive_factors,
            "negative_factors": self.report.negative_factors,
            "rationale": self.report.rationale,
        })
        .to_string()
    }
}

/// First complete JSON object embedded in `text`.
pub(crate) fn first_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    text.char_indices()
        .filter(|(_, c)| *c == '{')
        .find_map(|(i, _)| {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(Value::Object(map))) => Some(map),
                _ => None,
            }
        })
}

fn judgment_of(value: &Value) -> Option<Label> {
    let s = value.as_str()?.trim().to_ascii_lowercase();
    match s.as_str() {
        "correct" | "right" | "true" | "yes" => Some(Label::Correct),
        "incorrect" | "wrong" | "false" | "no" => Some(Label::Incorrect),
        _ => None,
    }
}

fn probability_of(value: &Value) -> Option<f64> {
    let p = match value {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }?;
    p.is_finite().then_some(p)
}

fn string_field(map: &serde_json::Map<String, Value>, key: &str) -> String {
    match map.get(key) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    }
}

fn list_field(map: &serde_json::Map<String, Value>, key: &str) -> Vec<String> {
    match map.get(key) {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string()))
            .collect(),
        Some(Value::String(s)) if !s.is_empty() => vec![s.clone()],
        _ => Vec::new(),
    }
}

fn imputed_probability(label: Label) -> f64 {
    match label {
        Label::Correct => 0.75,
        Label::Incorrect => 0.25,
    }
}

pub fn parse_response(text: &str, threshold: f64) -> Result<PredictionResult> {
    let object = first_object(text);
    let (probability, judgment, report) = match &object {
        Some(map) => {
            let judgment = ["judgment", "judgement", "label", "prediction"]
                .iter()
                .find_map(|k| map.get(*k).and_then(judgment_of));
            let report = Report {
                ability_summary: string_field(map, "ability_summary"),
                mastery_summary: string_field(map, "mastery_summary"),
                positive_factors: list_field(map, "positive_factors"),
                negative_factors: list_field(map, "negative_factors"),
                rationale: string_field(map, "rationale"),
            };
            (map.get("probability").and_then(probability_of), judgment, report)
        }
        None => (None, None, Report::default()),
    };
    let judgment = judgment.or_else(|| {
        PROSE_JUDGMENT.captures(text).map(|c| {
            if c[1].eq_ignore_ascii_case("correct") {
                Label::Correct
            } else {
                Label::Incorrect
            }
        })
    });
    let (raw_p, imputed) = match (probability, judgment) {
        (Some(p), _) => (p, false),
        (None, Some(j)) => (imputed_probability(j), true),
        (None, None) => return Err(Error::Unparseable),
    };
    let probability = raw_p.clamp(0.0, 1.0);
    Ok(PredictionResult {
        probability,
        label: Label::from_probability(probability, threshold),
        report,
        raw: text.to_string(),
        imputed,
        clamped: probability != raw_p,
    })
}
