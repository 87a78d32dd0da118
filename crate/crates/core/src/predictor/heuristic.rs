use serde::{Deserialize, Serialize};

use super::Predictor;
use crate::domain::DimensionKind;
use crate::error::{Error, Result};
use crate::graph::KnowledgeBase;
use crate::irt::{predict_prob, IrtParams};
use crate::prompt::{Label, PredictionResult, Report};
use crate::retrieval::RetrievedContext;

const FLOOR: f64 = 0.01;
const CEILING: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicWeights {
    pub irt: f64,
    pub self_dwa: f64,
    pub peer_acc: f64,
}

impl Default for HeuristicWeights {
    fn default() -> Self {
        Self {
            irt: 0.5,
            self_dwa: 0.3,
            peer_acc: 0.2,
        }
    }
}

impl HeuristicWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.irt, self.self_dwa, self.peer_acc];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("heuristic weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.4}")
}

/// Weighted blend of IRT probability, the target's DWA on the concept and
/// the peers' mean accuracy on it. Absent terms drop out and the remaining
/// weights are renormalized; with nothing present the result is 0.5.
pub fn predict_heuristic(
    ctx: &RetrievedContext,
    irt: &IrtParams,
    weights: &HeuristicWeights,
    threshold: f64,
) -> PredictionResult {
    let concept_perf = |perf: &[crate::retrieval::DimensionPerf]| {
        perf.iter()
            .find(|d| d.dimension.kind == DimensionKind::Concept)
            .and_then(|d| d.perf)
    };
    let p_irt = irt
        .fitted_item(&ctx.target.question_id)
        .and_then(|(a, b)| predict_prob(ctx.target.theta, a, b).ok());
    let self_dwa = concept_perf(&ctx.target_perf).map(|p| p.dwa);
    let peer_accs: Vec<f64> = ctx
        .peers
        .iter()
        .filter_map(|p| concept_perf(&p.perf).map(|t| t.acc))
        .collect();
    let peer_acc =
        (!peer_accs.is_empty()).then(|| peer_accs.iter().sum::<f64>() / peer_accs.len() as f64);

    let terms = [
        ("IRT probability", weights.irt, p_irt),
        ("own dynamic weighted accuracy on the concept", weights.self_dwa, self_dwa),
        ("peer mean accuracy on the concept", weights.peer_acc, peer_acc),
    ];
    let total: f64 = terms.iter().filter(|t| t.2.is_some()).map(|t| t.1).sum();
    let probability = if total > 0.0 {
        let blended: f64 = terms
            .iter()
            .filter_map(|(_, w, v)| v.map(|v| w * v))
            .sum::<f64>()
            / total;
        blended.clamp(FLOOR, CEILING)
    } else {
        0.5
    };

    let mut positive = Vec::new();
    let mut negative = Vec::new();
    let mut used = Vec::new();
    for (name, w, v) in terms {
        match v {
            Some(v) => {
                let line = format!("{name} {}", fmt(v));
                if v >= 0.5 {
                    positive.push(line.clone());
                } else {
                    negative.push(line.clone());
                }
                if total > 0.0 {
                    used.push(format!("{line} (weight {})", fmt(w / total)));
                }
            }
            None => negative.push(format!("{name}: no evidence")),
        }
    }
    let label = Label::from_probability(probability, threshold);
    let rationale = if used.is_empty() {
        "No evidence available; defaulting to 0.5.".to_string()
    } else {
        format!("Blend of {}.", used.join("; "))
    };
    let report = Report {
        ability_summary: format!(
            "Normalized ability {} ({})",
            fmt(ctx.target.theta_norm),
            ctx.target.ability_level
        ),
        mastery_summary: match self_dwa {
            Some(d) => format!(
                "Dynamic weighted accuracy {} on {} at {} difficulty",
                fmt(d),
                ctx.target.concept,
                ctx.target.difficulty
            ),
            None => format!("No prior attempts on {}", ctx.target.concept),
        },
        positive_factors: positive,
        negative_factors: negative,
        rationale,
    };
    let mut result = PredictionResult {
        probability,
        label,
        report,
        raw: String::new(),
        imputed: false,
        clamped: false,
    };
    result.raw = result.to_response_json();
    result
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicPredictor {
    pub weights: HeuristicWeights,
    pub threshold: f64,
}

impl HeuristicPredictor {
    pub fn new(weights: HeuristicWeights, threshold: f64) -> Self {
        Self { weights, threshold }
    }
}

impl Predictor for HeuristicPredictor {
    fn name(&self) -> &str {
        "heuristic"
    }

    fn predict(&self, ctx: &RetrievedContext, kb: &KnowledgeBase) -> Result<PredictionResult> {
        Ok(predict_heuristic(ctx, &kb.irt, &self.weights, self.threshold))
    }
}
