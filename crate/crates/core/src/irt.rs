//! Two-parameter logistic IRT: response probability, penalized joint
//! maximum-likelihood fitting, normalization and level bucketing.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Level;
use crate::error::{Error, Result};
use crate::repository::InteractionRepository;

pub const LOGIT_BOUND: f64 = 4.0;
pub const MIN_DISCRIMINATION: f64 = 0.25;
pub const MAX_DISCRIMINATION: f64 = 3.0;

/// Values given to entities with too few attempts to fit.
pub const FALLBACK_THETA: f64 = 0.0;
pub const FALLBACK_A: f64 = 1.0;
pub const FALLBACK_B: f64 = 0.0;

const MAX_STEP: f64 = 1.0;

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// P(correct) = 1 / (1 + exp(-a (theta - b))).
pub fn predict_prob(theta: f64, a: f64, b: f64) -> Result<f64> {
    if a.is_nan() || a <= 0.0 {
        return Err(Error::NonPositiveDiscrimination(a));
    }
    Ok(sigmoid(a * (theta - b)))
}

/// Bernoulli log-likelihood of one response.
pub fn log_likelihood(theta: f64, a: f64, b: f64, correct: bool) -> f64 {
    let z = a * (theta - b);
    if correct {
        log_sigmoid(z)
    } else {
        log_sigmoid(-z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gradient {
    pub theta: f64,
    pub a: f64,
    pub b: f64,
}

/// Analytic gradient of [`log_likelihood`] with respect to (theta, a, b).
pub fn log_likelihood_gradient(theta: f64, a: f64, b: f64, correct: bool) -> Gradient {
    let residual = f64::from(u8::from(correct)) - sigmoid(a * (theta - b));
    Gradient {
        theta: a * residual,
        a: (theta - b) * residual,
        b: -a * residual,
    }
}

/// Three-way threshold at one standard deviation around the mean.
pub fn bucket_level(x: f64, mu: f64, sigma: f64) -> Level {
    if x <= mu - sigma && !(sigma == 0.0 && x == mu) {
        Level::Low
    } else if x >= mu + sigma && !(sigma == 0.0 && x == mu) {
        Level::High
    } else {
        Level::Medium
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrtFitConfig {
    pub min_attempts: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub theta_prior_sd: f64,
    pub b_prior_sd: f64,
    /// Prior sd of log(a); the prior mean of log(a) is 0.
    pub log_a_prior_sd: f64,
}

impl Default for IrtFitConfig {
    fn default() -> Self {
        Self {
            min_attempts: 3,
            tol: 1e-4,
            max_iters: 200,
            theta_prior_sd: 1.0,
            b_prior_sd: 1.0,
            log_a_prior_sd: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityFlags {
    /// Fewer than `min_attempts` interactions: fallback values used.
    pub fallback: bool,
    /// All responses identical, so the estimate sits on its prior.
    pub non_identifiable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentEstimate {
    pub theta: f64,
    pub theta_norm: f64,
    pub level: Level,
    pub flags: EntityFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuestionEstimate {
    pub a: f64,
    pub b: f64,
    pub b_norm: f64,
    pub level: Level,
    pub flags: EntityFlags,
}

/// Min-max normalization plus the level thresholds of the normalized population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub sd: f64,
}

impl Scale {
    fn fit(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut scale = Scale {
            min: quantize(min),
            max: quantize(max),
            mean: 0.5,
            sd: 0.0,
        };
        let normed: Vec<f64> = values.iter().map(|&v| scale.normalize(v)).collect();
        let n = normed.len() as f64;
        let mean = normed.iter().sum::<f64>() / n;
        let var = normed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        scale.mean = quantize(mean);
        scale.sd = quantize(var.sqrt());
        scale
    }

    pub fn normalize(&self, x: f64) -> f64 {
        if self.max > self.min {
            ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        } else {
            0.5
        }
    }

    pub fn level(&self, normalized: f64) -> Level {
        bucket_level(normalized, self.mean, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrtParams {
    pub students: BTreeMap<String, StudentEstimate>,
    pub questions: BTreeMap<String, QuestionEstimate>,
    pub theta_scale: Scale,
    pub b_scale: Scale,
    pub converged: bool,
    pub iterations: usize,
}

impl IrtParams {
    /// Fitted (a, b) of a question, or `None` if unseen or fallback-valued.
    pub fn fitted_item(&self, question: &str) -> Option<(f64, f64)> {
        self.questions
            .get(question)
            .filter(|q| !q.flags.fallback)
            .map(|q| (q.a, q.b))
    }

    /// (a, b) of a question, falling back to the defaults for unseen ones.
    pub fn item_or_fallback(&self, question: &str) -> (f64, f64) {
        self.questions
            .get(question)
            .map(|q| (q.a, q.b))
            .unwrap_or((FALLBACK_A, FALLBACK_B))
    }

    /// Difficulty level of a question; unseen questions are placed by the
    /// fallback difficulty on the fitted scale.
    pub fn difficulty_level(&self, question: &str) -> Level {
        match self.questions.get(question) {
            Some(q) => q.level,
            None => self.b_scale.level(self.b_scale.normalize(FALLBACK_B)),
        }
    }

    /// Maximum a posteriori ability from responses to items with known
    /// (a, b), holding the item parameters fixed.
    pub fn estimate_ability(&self, responses: &[(f64, f64, bool)], cfg: &IrtFitConfig) -> f64 {
        let mut theta = 0.0;
        for _ in 0..50 {
            let step = theta_newton_step(theta, responses.iter().copied(), cfg.theta_prior_sd);
            theta = (theta + step).clamp(-LOGIT_BOUND, LOGIT_BOUND);
            if step.abs() < 1e-10 {
                break;
            }
        }
        quantize(theta)
    }
}

/// Rounds to 9 fractional digits so the value survives the bundle's fixed
/// decimal text format bit-exactly.
pub fn quantize(x: f64) -> f64 {
    format!("{x:.9}").parse().expect("finite float formats")
}

fn theta_newton_step(
    theta: f64,
    responses: impl Iterator<Item = (f64, f64, bool)>,
    prior_sd: f64,
) -> f64 {
    let prior_prec = 1.0 / (prior_sd * prior_sd);
    let mut grad = -theta * prior_prec;
    let mut info = prior_prec;
    for (a, b, r) in responses {
        let p = sigmoid(a * (theta - b));
        grad += a * (f64::from(u8::from(r)) - p);
        info += a * a * p * (1.0 - p);
    }
    (grad / info).clamp(-MAX_STEP, MAX_STEP)
}

/// Fisher-scoring step on (b, log a) for one item with abilities fixed.
fn item_step(
    a: f64,
    b: f64,
    responses: impl Iterator<Item = (f64, bool)>,
    cfg: &IrtFitConfig,
) -> (f64, f64) {
    let log_a = a.ln();
    let b_prec = 1.0 / (cfg.b_prior_sd * cfg.b_prior_sd);
    let la_prec = 1.0 / (cfg.log_a_prior_sd * cfg.log_a_prior_sd);
    let (mut g_b, mut g_la) = (-b * b_prec, -log_a * la_prec);
    let (mut i_bb, mut i_ll, mut i_bl) = (b_prec, la_prec, 0.0);
    for (theta, r) in responses {
        let p = sigmoid(a * (theta - b));
        let w = p * (1.0 - p);
        let resid = f64::from(u8::from(r)) - p;
        let dz_db = -a;
        let dz_dla = a * (theta - b);
        g_b += dz_db * resid;
        g_la += dz_dla * resid;
        i_bb += w * dz_db * dz_db;
        i_ll += w * dz_dla * dz_dla;
        i_bl += w * dz_db * dz_dla;
    }
    let det = i_bb * i_ll - i_bl * i_bl;
    if det <= 1e-12 {
        return (
            (g_b / i_bb).clamp(-MAX_STEP, MAX_STEP),
            (g_la / i_ll).clamp(-MAX_STEP, MAX_STEP),
        );
    }
    let d_b = (i_ll * g_b - i_bl * g_la) / det;
    let d_la = (i_bb * g_la - i_bl * g_b) / det;
    (d_b.clamp(-MAX_STEP, MAX_STEP), d_la.clamp(-MAX_STEP, MAX_STEP))
}

/// Fits the 2PL model jointly over every interaction in the repository by
/// alternating ability and item updates.
pub fn fit_2pl(repo: &InteractionRepository, cfg: &IrtFitConfig) -> Result<IrtParams> {
    let mut student_ids: BTreeMap<&str, usize> = BTreeMap::new();
    let mut question_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for i in repo.all_interactions() {
        let n = student_ids.len();
        student_ids.entry(&i.student_id).or_insert(n);
        let n = question_ids.len();
        question_ids.entry(&i.question_id).or_insert(n);
    }
    if student_ids.is_empty() {
        return Err(Error::NoData);
    }
    let (ns, nq) = (student_ids.len(), question_ids.len());
    let mut s_count = vec![0usize; ns];
    let mut q_count = vec![0usize; nq];
    let mut s_correct = vec![0usize; ns];
    let mut q_correct = vec![0usize; nq];
    let mut raw = Vec::with_capacity(repo.interaction_count());
    for i in repo.all_interactions() {
        let (s, q) = (student_ids[i.student_id.as_str()], question_ids[i.question_id.as_str()]);
        s_count[s] += 1;
        q_count[q] += 1;
        if i.correct {
            s_correct[s] += 1;
            q_correct[q] += 1;
        }
        raw.push((s, q, i.correct));
    }
    let s_ok: Vec<bool> = s_count.iter().map(|&c| c >= cfg.min_attempts).collect();
    let q_ok: Vec<bool> = q_count.iter().map(|&c| c >= cfg.min_attempts).collect();
    let mut by_student: Vec<Vec<(usize, bool)>> = vec![Vec::new(); ns];
    let mut by_question: Vec<Vec<(usize, bool)>> = vec![Vec::new(); nq];
    for &(s, q, r) in &raw {
        if s_ok[s] && q_ok[q] {
            by_student[s].push((q, r));
            by_question[q].push((s, r));
        }
    }

    let mut theta = vec![FALLBACK_THETA; ns];
    let mut a = vec![FALLBACK_A; nq];
    let mut b = vec![FALLBACK_B; nq];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let theta_steps: Vec<f64> = (0..ns)
            .into_par_iter()
            .map(|s| {
                if by_student[s].is_empty() {
                    return 0.0;
                }
                let items = by_student[s].iter().map(|&(q, r)| (a[q], b[q], r));
                theta_newton_step(theta[s], items, cfg.theta_prior_sd)
            })
            .collect();
        let mut max_change = 0.0f64;
        for (t, step) in theta.iter_mut().zip(&theta_steps) {
            let new = (*t + step).clamp(-LOGIT_BOUND, LOGIT_BOUND);
            max_change = max_change.max((new - *t).abs());
            *t = new;
        }
        let item_steps: Vec<(f64, f64)> = (0..nq)
            .into_par_iter()
            .map(|q| {
                if by_question[q].is_empty() {
                    return (0.0, 0.0);
                }
                let resp = by_question[q].iter().map(|&(s, r)| (theta[s], r));
                item_step(a[q], b[q], resp, cfg)
            })
            .collect();
        for q in 0..nq {
            let (d_b, d_la) = item_steps[q];
            let new_b = (b[q] + d_b).clamp(-LOGIT_BOUND, LOGIT_BOUND);
            let new_a = (a[q].ln() + d_la)
                .exp()
                .clamp(MIN_DISCRIMINATION, MAX_DISCRIMINATION);
            max_change = max_change.max((new_b - b[q]).abs()).max((new_a - a[q]).abs());
            b[q] = new_b;
            a[q] = new_a;
        }
        if max_change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("2PL fit did not converge within {} iterations", cfg.max_iters);
    }

    let theta: Vec<f64> = theta.into_iter().map(quantize).collect();
    let a: Vec<f64> = a.into_iter().map(quantize).collect();
    let b: Vec<f64> = b.into_iter().map(quantize).collect();
    let theta_scale = Scale::fit(&theta);
    let b_scale = Scale::fit(&b);
    let extreme = |correct: usize, total: usize| correct == 0 || correct == total;

    let students = student_ids
        .iter()
        .map(|(&id, &s)| {
            let theta_norm = quantize(theta_scale.normalize(theta[s]));
            let est = StudentEstimate {
                theta: theta[s],
                theta_norm,
                level: theta_scale.level(theta_norm),
                flags: EntityFlags {
                    fallback: by_student[s].is_empty(),
                    non_identifiable: extreme(s_correct[s], s_count[s]),
                },
            };
            (id.to_string(), est)
        })
        .collect();
    let questions = question_ids
        .iter()
        .map(|(&id, &q)| {
            let b_norm = quantize(b_scale.normalize(b[q]));
            let est = QuestionEstimate {
                a: a[q],
                b: b[q],
                b_norm,
                level: b_scale.level(b_norm),
                flags: EntityFlags {
                    fallback: by_question[q].is_empty(),
                    non_identifiable: extreme(q_correct[q], q_count[q]),
                },
            };
            (id.to_string(), est)
        })
        .collect();
    Ok(IrtParams {
        students,
        questions,
        theta_scale,
        b_scale,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Interaction;

    fn repo_from(events: &[(&str, &str, bool)]) -> InteractionRepository {
        let mut repo = InteractionRepository::new();
        let mut next: BTreeMap<String, u64> = BTreeMap::new();
        for (s, q, r) in events {
            let order = next.entry(s.to_string()).or_default();
            repo.record_interaction(
                Interaction {
                    student_id: s.to_string(),
                    question_id: q.to_string(),
                    source_id: "A".into(),
                    concept_label: "k".into(),
                    correct: *r,
                    order_index: *order,
                },
                &[],
            )
            .unwrap();
            *order += 1;
        }
        repo
    }

    #[test]
    fn predict_prob_examples() {
        assert_eq!(predict_prob(0.7, 1.3, 0.7).unwrap(), 0.5);
        assert!((predict_prob(1.0, 1.0, 0.0).unwrap() - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((predict_prob(1.0, 1.0, 0.0).unwrap() - 0.73106).abs() < 1e-5);
        assert!((predict_prob(0.0, 2.0, 1.0).unwrap() - 0.11920).abs() < 1e-5);
        assert!(matches!(predict_prob(0.0, 0.0, 0.0), Err(Error::NonPositiveDiscrimination(_))));
        assert!(matches!(predict_prob(0.0, -1.0, 0.0), Err(Error::NonPositiveDiscrimination(_))));
    }

    #[test]
    fn predict_prob_is_monotone_on_a_grid() {
        let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.2).collect();
        for &a in &[0.3, 1.0, 2.5] {
            for w in grid.windows(2) {
                for &x in &grid {
                    assert!(predict_prob(w[1], a, x).unwrap() > predict_prob(w[0], a, x).unwrap());
                    assert!(predict_prob(x, a, w[1]).unwrap() < predict_prob(x, a, w[0]).unwrap());
                }
            }
        }
    }

    #[test]
    fn bucket_level_examples() {
        assert_eq!(bucket_level(0.5, 0.5, 0.1), Level::Medium);
        assert_eq!(bucket_level(0.4, 0.5, 0.1), Level::Low);
        assert_eq!(bucket_level(0.7, 0.5, 0.1), Level::High);
        assert_eq!(bucket_level(0.6, 0.5, 0.1), Level::High);
        assert_eq!(bucket_level(0.3, 0.3, 0.0), Level::Medium);
        assert_eq!(bucket_level(0.2, 0.3, 0.0), Level::Low);
        assert_eq!(bucket_level(0.4, 0.3, 0.0), Level::High);
    }

    #[test]
    fn stronger_student_gets_higher_theta() {
        let mut events = Vec::new();
        for _ in 0..10 {
            events.push(("good", "q1", true));
            events.push(("poor", "q1", false));
        }
        let params = fit_2pl(&repo_from(&events), &IrtFitConfig::default()).unwrap();
        assert!(params.students["good"].theta > params.students["poor"].theta);
    }

    #[test]
    fn all_correct_stays_finite() {
        let mut events = Vec::new();
        for s in ["a", "b", "c"] {
            for q in ["q1", "q2", "q3", "q4"] {
                events.push((s, q, true));
            }
        }
        let params = fit_2pl(&repo_from(&events), &IrtFitConfig::default()).unwrap();
        for s in params.students.values() {
            assert!(s.theta.is_finite() && s.theta.abs() <= LOGIT_BOUND);
            assert!(s.flags.non_identifiable);
        }
        for q in params.questions.values() {
            assert!(q.a.is_finite() && q.b.is_finite());
            assert!((MIN_DISCRIMINATION..=MAX_DISCRIMINATION).contains(&q.a));
        }
    }

    #[test]
    fn sparse_entities_get_fallback_values() {
        let events = [("s", "q1", true), ("s", "q2", false)];
        let params = fit_2pl(&repo_from(&events), &IrtFitConfig::default()).unwrap();
        let s = params.students["s"];
        assert!(s.flags.fallback);
        assert_eq!(s.theta, FALLBACK_THETA);
        assert!(params.questions["q1"].flags.fallback);
        assert_eq!(params.fitted_item("q1"), None);
        assert_eq!(params.item_or_fallback("unseen"), (FALLBACK_A, FALLBACK_B));
    }

    #[test]
    fn empty_repository_is_no_data() {
        assert!(matches!(
            fit_2pl(&InteractionRepository::new(), &IrtFitConfig::default()),
            Err(Error::NoData)
        ));
    }

    #[test]
    fn fit_is_deterministic_and_levels_partition() {
        let mut events = Vec::new();
        let students: Vec<String> = (0..30).map(|i| format!("s{i}")).collect();
        let questions: Vec<String> = (0..12).map(|i| format!("q{i}")).collect();
        for (i, s) in students.iter().enumerate() {
            for (j, q) in questions.iter().enumerate() {
                events.push((s.as_str(), q.as_str(), (i * 7 + j * 3) % 5 < (i % 5)));
            }
        }
        let repo = repo_from(&events);
        let a = fit_2pl(&repo, &IrtFitConfig::default()).unwrap();
        let b = fit_2pl(&repo, &IrtFitConfig::default()).unwrap();
        assert_eq!(a, b);
        let counted: usize = Level::ALL
            .iter()
            .map(|l| a.students.values().filter(|s| s.level == *l).count())
            .sum();
        assert_eq!(counted, a.students.len());
        let norms: Vec<f64> = a.students.values().map(|s| s.theta_norm).collect();
        assert!(norms.iter().all(|v| (0.0..=1.0).contains(v)));
        // min-max keeps the order of raw abilities
        let mut pairs: Vec<(f64, f64)> = a.students.values().map(|s| (s.theta, s.theta_norm)).collect();
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        assert!(pairs.windows(2).all(|w| w[0].0 == w[1].0 || w[0].1 < w[1].1));
    }

    #[test]
    fn ability_estimate_tracks_accuracy() {
        let params = fit_2pl(
            &repo_from(&[("s", "q", true), ("s", "q", true), ("s", "q", false)]),
            &IrtFitConfig::default(),
        )
        .unwrap();
        let cfg = IrtFitConfig::default();
        let high = params.estimate_ability(&[(1.0, 0.0, true); 8], &cfg);
        let low = params.estimate_ability(&[(1.0, 0.0, false); 8], &cfg);
        let none = params.estimate_ability(&[], &cfg);
        assert!(high > 0.0 && low < 0.0);
        assert_eq!(none, 0.0);
    }

    #[test]
    fn quantize_is_a_fixed_point_of_nine_digit_text() {
        for x in [0.1, -3.999999999, 1.0 / 3.0, 2.718281828459045] {
            let q = quantize(x);
            assert_eq!(format!("{q:.9}").parse::<f64>().unwrap().to_bits(), q.to_bits());
        }
    }
}
