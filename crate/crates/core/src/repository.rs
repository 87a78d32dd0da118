//! Multi-dimensional interaction repository and the per-dimension
//! aggregation formulas (accuracy, DWA, confidence).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{ConfConfig, Dimension, DimensionKind, Interaction, PerfTuple};
use crate::error::{Error, Result};

/// One correctness observation stored under a dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub order_index: u64,
    pub correct: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionRepository {
    by_student: BTreeMap<String, Vec<Interaction>>,
    by_dimension: BTreeMap<String, BTreeMap<Dimension, Vec<Outcome>>>,
    known: BTreeSet<Dimension>,
}

impl InteractionRepository {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes `dim` a valid target for [`record_interaction`](Self::record_interaction).
    pub fn register_dimension(&mut self, dim: Dimension) {
        self.known.insert(dim);
    }

    pub fn is_known(&self, dim: &Dimension) -> bool {
        self.known.contains(dim)
    }

    pub fn dimensions(&self) -> impl Iterator<Item = &Dimension> {
        self.known.iter()
    }

    pub fn record_interaction(&mut self, interaction: Interaction, dims: &[Dimension]) -> Result<()> {
        if let Some(unknown) = dims.iter().find(|d| !self.known.contains(d)) {
            return Err(Error::UnknownDimension(unknown.to_string()));
        }
        let history = self
            .by_student
            .entry(interaction.student_id.clone())
            .or_default();
        if let Some(last) = history.last() {
            if interaction.order_index <= last.order_index {
                return Err(Error::OutOfOrder {
                    student: interaction.student_id,
                    got: interaction.order_index,
                    last: last.order_index,
                });
            }
        }
        let outcome = Outcome {
            order_index: interaction.order_index,
            correct: interaction.correct,
        };
        let per_dim = self
            .by_dimension
            .entry(interaction.student_id.clone())
            .or_default();
        for dim in dims {
            per_dim.entry(dim.clone()).or_default().push(outcome);
        }
        history.push(interaction);
        Ok(())
    }

    pub fn students(&self) -> impl Iterator<Item = &str> {
        self.by_student.keys().map(String::as_str)
    }

    pub fn student_count(&self) -> usize {
        self.by_student.len()
    }

    pub fn contains_student(&self, student: &str) -> bool {
        self.by_student.contains_key(student)
    }

    pub fn history(&self, student: &str) -> &[Interaction] {
        self.by_student
            .get(student)
            .map(Vec::as_slice)
            .unwrap_or_default()
    }

    pub fn interaction_count(&self) -> usize {
        self.by_student.values().map(Vec::len).sum()
    }

    pub fn all_interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.by_student.values().flatten()
    }

    /// Ordered outcomes of `student` on `dim`.
    pub fn outcomes(&self, student: &str, dim: &Dimension) -> &[Outcome] {
        self.by_dimension
            .get(student)
            .and_then(|m| m.get(dim))
            .map(Vec::as_slice)
            .unwrap_or_default()
    }

    /// All dimensions the student has at least one outcome on.
    pub fn student_dimensions(&self, student: &str) -> impl Iterator<Item = (&Dimension, &[Outcome])> {
        self.by_dimension
            .get(student)
            .into_iter()
            .flat_map(|m| m.iter().map(|(d, o)| (d, o.as_slice())))
    }

    /// Aggregate performance of `student` on `dim`, counting only outcomes
    /// strictly before `as_of` when given. `None` when there are no attempts.
    pub fn perf(
        &self,
        student: &str,
        dim: &Dimension,
        cfg: &ConfConfig,
        as_of: Option<u64>,
    ) -> Option<PerfTuple> {
        let outcomes: Vec<bool> = self
            .outcomes(student, dim)
            .iter()
            .take_while(|o| as_of.is_none_or(|t| o.order_index < t))
            .map(|o| o.correct)
            .collect();
        perf_from_outcomes(&outcomes, cfg)
    }

    /// Total attempts recorded under dimensions of `kind`, over all students.
    pub fn attempts_for_kind(&self, kind: DimensionKind) -> usize {
        self.by_dimension
            .values()
            .flat_map(|m| m.iter())
            .filter(|(d, _)| d.kind == kind)
            .map(|(_, o)| o.len())
            .sum()
    }

    pub(crate) fn raw_parts(
        &self,
    ) -> (
        &BTreeMap<String, Vec<Interaction>>,
        &BTreeMap<String, BTreeMap<Dimension, Vec<Outcome>>>,
        &BTreeSet<Dimension>,
    ) {
        (&self.by_student, &self.by_dimension, &self.known)
    }

    pub(crate) fn from_raw_parts(
        by_student: BTreeMap<String, Vec<Interaction>>,
        by_dimension: BTreeMap<String, BTreeMap<Dimension, Vec<Outcome>>>,
        known: BTreeSet<Dimension>,
    ) -> Self {
        Self {
            by_student,
            by_dimension,
            known,
        }
    }
}

/// Dynamic weighted accuracy: recency-weighted mean with geometric decay,
/// the most recent outcome weighted 1.
pub fn dwa(outcomes: &[bool], beta: f64) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::EmptyHistory);
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Config(format!("beta must lie in (0,1), got {beta}")));
    }
    let mut weight = 1.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for &r in outcomes.iter().rev() {
        if r {
            num += weight;
        }
        den += weight;
        weight *= beta;
    }
    Ok(num / den)
}

/// Sample sufficiency times recent stability, clamped to [0, 1].
pub fn confidence(outcomes: &[bool], cfg: &ConfConfig) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let n = outcomes.len();
    let sufficiency = if cfg.n0 == 0 {
        1.0
    } else {
        (n as f64 / cfg.n0 as f64).min(1.0)
    };
    let window = &outcomes[n - n.min(cfg.window.max(1))..];
    let p = window.iter().filter(|&&r| r).count() as f64 / window.len() as f64;
    let std = (p * (1.0 - p)).sqrt();
    let stability = 1.0 - 2.0 * std;
    Ok((sufficiency * stability).clamp(0.0, 1.0))
}

/// Aggregates an ordered outcome list; `None` for an empty list.
pub fn perf_from_outcomes(outcomes: &[bool], cfg: &ConfConfig) -> Option<PerfTuple> {
    if outcomes.is_empty() {
        return None;
    }
    let correct = outcomes.iter().filter(|&&r| r).count();
    Some(PerfTuple {
        acc: correct as f64 / outcomes.len() as f64,
        dwa: dwa(outcomes, cfg.beta).ok()?,
        attempts: outcomes.len(),
        conf: confidence(outcomes, cfg).ok()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interaction(student: &str, order: u64, correct: bool) -> Interaction {
        Interaction {
            student_id: student.into(),
            question_id: format!("q{order}"),
            source_id: "src".into(),
            concept_label: "fractions".into(),
            correct,
            order_index: order,
        }
    }

    fn repo_with(dim: &Dimension) -> InteractionRepository {
        let mut repo = InteractionRepository::new();
        repo.register_dimension(dim.clone());
        repo
    }

    #[test]
    fn single_interaction_lands_under_its_dimension() {
        let dim = Dimension::concept("fractions");
        let mut repo = repo_with(&dim);
        repo.record_interaction(interaction("s", 0, true), &[dim.clone()])
            .unwrap();
        let got: Vec<bool> = repo.outcomes("s", &dim).iter().map(|o| o.correct).collect();
        assert_eq!(got, vec![true]);
    }

    #[test]
    fn order_is_preserved() {
        let dim = Dimension::concept("fractions");
        let mut repo = repo_with(&dim);
        repo.record_interaction(interaction("s", 0, true), &[dim.clone()])
            .unwrap();
        repo.record_interaction(interaction("s", 1, false), &[dim.clone()])
            .unwrap();
        let got: Vec<bool> = repo.outcomes("s", &dim).iter().map(|o| o.correct).collect();
        assert_eq!(got, vec![true, false]);
    }

    #[test]
    fn equal_order_index_is_rejected() {
        let dim = Dimension::concept("fractions");
        let mut repo = repo_with(&dim);
        repo.record_interaction(interaction("s", 3, true), &[dim.clone()])
            .unwrap();
        let err = repo
            .record_interaction(interaction("s", 3, false), &[dim.clone()])
            .unwrap_err();
        assert!(matches!(err, Error::OutOfOrder { got: 3, last: 3, .. }));
        assert_eq!(repo.history("s").len(), 1);
    }

    #[test]
    fn unregistered_dimension_is_rejected() {
        let mut repo = InteractionRepository::new();
        let err = repo
            .record_interaction(interaction("s", 0, true), &[Dimension::concept("x")])
            .unwrap_err();
        assert!(matches!(err, Error::UnknownDimension(_)));
    }

    #[test]
    fn dwa_examples() {
        assert_eq!(dwa(&[true, true, true], 0.8).unwrap(), 1.0);
        let v = dwa(&[true, false, true], 0.8).unwrap();
        assert!((v - 1.64 / 2.44).abs() < 1e-12);
        assert!((v - 0.67213).abs() < 1e-5);
        assert_eq!(dwa(&[false], 0.8).unwrap(), 0.0);
        assert!(matches!(dwa(&[], 0.8), Err(Error::EmptyHistory)));
        assert!(matches!(dwa(&[true], 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn perf_examples() {
        let cfg = ConfConfig::default();
        assert_eq!(perf_from_outcomes(&[], &cfg), None);

        let p = perf_from_outcomes(&[true, true, false, true], &cfg).unwrap();
        assert_eq!(p.acc, 0.75);
        assert_eq!(p.attempts, 4);
        assert!((p.dwa - 2.152 / 2.952).abs() < 1e-12);
        assert!((p.dwa - 0.72900).abs() < 1e-5);

        let p = perf_from_outcomes(&[true], &cfg).unwrap();
        assert_eq!((p.acc, p.dwa, p.attempts), (1.0, 1.0, 1));
    }

    #[test]
    fn confidence_examples() {
        let cfg = ConfConfig::default();
        assert_eq!(confidence(&[true; 5], &cfg).unwrap(), 1.0);
        assert_eq!(confidence(&[true, false], &cfg).unwrap(), 0.0);
        assert!((confidence(&[true], &cfg).unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(confidence(&[], &cfg), Err(Error::EmptyHistory)));
    }

    #[test]
    fn perf_respects_as_of() {
        let dim = Dimension::concept("fractions");
        let mut repo = repo_with(&dim);
        for (i, c) in [true, false, true, true].into_iter().enumerate() {
            repo.record_interaction(interaction("s", i as u64 * 10, c), &[dim.clone()])
                .unwrap();
        }
        let cfg = ConfConfig::default();
        assert_eq!(repo.perf("s", &dim, &cfg, Some(0)), None);
        assert_eq!(repo.perf("s", &dim, &cfg, Some(11)).unwrap().attempts, 2);
        assert_eq!(repo.perf("s", &dim, &cfg, None).unwrap().attempts, 4);
        assert_eq!(repo.perf("nobody", &dim, &cfg, None), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dwa_of_constant_sequence_is_that_constant(
                n in 1usize..60, c in any::<bool>(), beta in 0.001f64..0.999,
            ) {
                let v = dwa(&vec![c; n], beta).unwrap();
                prop_assert_eq!(v, if c { 1.0 } else { 0.0 });
            }

            #[test]
            fn dwa_tends_to_last_outcome_as_beta_vanishes(
                seq in proptest::collection::vec(any::<bool>(), 1..40),
            ) {
                let v = dwa(&seq, 0.001).unwrap();
                let last = if *seq.last().unwrap() { 1.0 } else { 0.0 };
                prop_assert!((v - last).abs() < 0.01);
            }

            #[test]
            fn dwa_tends_to_mean_as_beta_approaches_one(
                seq in proptest::collection::vec(any::<bool>(), 1..200),
            ) {
                let v = dwa(&seq, 1.0 - 1e-9).unwrap();
                let mean = seq.iter().filter(|&&r| r).count() as f64 / seq.len() as f64;
                prop_assert!((v - mean).abs() < 1e-6);
            }

            #[test]
            fn acc_times_attempts_counts_correct(
                seq in proptest::collection::vec(any::<bool>(), 1..100),
            ) {
                let p = perf_from_outcomes(&seq, &ConfConfig::default()).unwrap();
                let product = p.acc * p.attempts as f64;
                prop_assert!((product - product.round()).abs() < 1e-9);
                prop_assert_eq!(p.correct_count(), seq.iter().filter(|&&r| r).count());
                prop_assert!((0.0..=1.0).contains(&p.conf));
            }

            #[test]
            fn confidence_is_monotone_in_n_for_constant_outcomes(
                c in any::<bool>(), n in 1usize..40,
            ) {
                let cfg = ConfConfig::default();
                let a = confidence(&vec![c; n], &cfg).unwrap();
                let b = confidence(&vec![c; n + 1], &cfg).unwrap();
                prop_assert!(b >= a);
            }

            #[test]
            fn recording_conserves_attempts_per_kind(
                events in proptest::collection::vec((0usize..4, 0usize..3, any::<bool>()), 1..80),
            ) {
                let mut repo = InteractionRepository::new();
                let concepts: Vec<Dimension> =
                    (0..3).map(|k| Dimension::concept(format!("k{k}"))).collect();
                let levels: Vec<Dimension> = crate::domain::Level::ALL
                    .iter()
                    .map(|&l| Dimension::difficulty(l))
                    .collect();
                for d in concepts.iter().chain(&levels) {
                    repo.register_dimension(d.clone());
                }
                let mut next = [0u64; 4];
                for (s, k, c) in &events {
                    let i = interaction(&format!("s{s}"), next[*s], *c);
                    next[*s] += 1;
                    repo.record_interaction(i, &[concepts[*k].clone(), levels[*k].clone()]).unwrap();
                }
                prop_assert_eq!(repo.attempts_for_kind(DimensionKind::Concept), events.len());
                prop_assert_eq!(repo.attempts_for_kind(DimensionKind::Difficulty), events.len());
                let cfg = ConfConfig::default();
                let repo = &repo;
                let cfg = &cfg;
                let total: usize = repo
                    .students()
                    .flat_map(|s| concepts.iter().filter_map(move |d| repo.perf(s, d, cfg, None)))
                    .map(|p| p.attempts)
                    .sum();
                prop_assert_eq!(total, events.len());
            }
        }
    }
}
