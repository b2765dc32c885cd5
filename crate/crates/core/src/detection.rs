//! Adversarial-example detection from the transition-matrix diagonal,
//! rank-based AUROC, evaluation tables, and checks for gradient masking.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, pgd, AttackConfig, Norm, Objective};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::models::{Defense, TargetClassifier, TransitionMatrix, TransitionNetwork};
use crate::seed::{self, Stream};
use crate::tensor::{argmax, Tensor};
use crate::training::{evaluate, Accuracy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    Natural,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub id: usize,
    /// Arg-max class of the target model.
    pub predicted: usize,
    /// Diagonal entry `T̂(x)[k][k]` at the predicted class `k`.
    pub p: f64,
    /// `1 − p`; higher means more likely adversarial.
    pub score: f64,
    pub truth: GroundTruth,
}

/// Scores every row of `x`, numbering instances from `first_id`.
pub fn detect_scores(
    x: &Tensor,
    target: &TargetClassifier,
    trans: &TransitionNetwork,
    truth: GroundTruth,
    first_id: usize,
) -> Result<Vec<DetectionScore>> {
    Defense::new(target, Some(trans))?;
    let logits = target.logits(x)?;
    let t = trans.matrices(x)?;
    let c = target.classes();
    Ok((0..x.rows())
        .map(|s| {
            let k = argmax(logits.row(s));
            let p = t.row(s)[k * c + k];
            DetectionScore {
                id: first_id + s,
                predicted: k,
                p,
                score: 1.0 - p,
                truth,
            }
        })
        .collect())
}

/// Score of a single matrix at predicted class `k`.
pub fn detect_score_matrix(t: &TransitionMatrix, k: usize) -> f64 {
    1.0 - t.at(k, k)
}

/// Comparative rule: flags the input as adversarial unless `T[k][k]`
/// strictly exceeds every other diagonal entry.
pub fn hard_rule_flags(t: &TransitionMatrix, k: usize) -> bool {
    let d = t.diagonal();
    d.iter().enumerate().any(|(j, &v)| j != k && v >= d[k])
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half, from the rank-sum statistic with mid-ranks.
pub fn auroc_values(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Input("AUROC needs both positive and negative scores".into()));
    }
    if positives.iter().chain(negatives).any(|v| v.is_nan()) {
        return Err(Error::Input("AUROC scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&v| (v, true))
        .chain(negatives.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// AUROC with adversarial instances as the positive class.
pub fn auroc(scores: &[DetectionScore]) -> Result<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .filter(|s| s.truth == GroundTruth::Adversarial)
        .map(|s| s.score)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .filter(|s| s.truth == GroundTruth::Natural)
        .map(|s| s.score)
        .collect();
    auroc_values(&pos, &neg)
}

/// An attack with a display name; `None` evaluates natural inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedAttack {
    pub name: String,
    pub attack: Option<AttackConfig>,
}

impl NamedAttack {
    pub fn none() -> Self {
        NamedAttack {
            name: "None".into(),
            attack: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub attack: String,
    pub defended: f64,
    pub target_only: f64,
}

/// One row per attack, in order. Each row draws from a fresh generator
/// for `(seed, Evaluation)`, so rows do not depend on each other.
pub fn evaluate_suite(
    target: &TargetClassifier,
    trans: Option<&TransitionNetwork>,
    data: &Dataset,
    attacks: &[NamedAttack],
    seed_value: u64,
) -> Result<Vec<AccuracyRow>> {
    attacks
        .iter()
        .map(|a| {
            let mut rng = seed::rng(seed_value, Stream::Evaluation);
            let Accuracy { defended, target_only } = evaluate(target, trans, data, a.attack.as_ref(), &mut rng)?;
            Ok(AccuracyRow {
                attack: a.name.clone(),
                defended,
                target_only,
            })
        })
        .collect()
}

/// Evaluates `trans` composed with an independently trained target.
pub fn transfer_evaluate(
    trans: &TransitionNetwork,
    target_b: &TargetClassifier,
    data: &Dataset,
    attacks: &[NamedAttack],
    seed_value: u64,
) -> Result<Vec<AccuracyRow>> {
    if trans.classes() != target_b.classes() {
        return Err(Error::Config(format!(
            "transition network has {} classes, target has {}",
            trans.classes(),
            target_b.classes()
        )));
    }
    evaluate_suite(target_b, Some(trans), data, attacks, seed_value)
}

/// Settings of [`masking_battery`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub norm: Norm,
    pub base_epsilon: f64,
    /// Attack objective; defaults to the combined objective when a
    /// transition network is present and `target_only` otherwise.
    pub objective: Option<Objective>,
    pub unbounded_epsilon: f64,
    pub unbounded_max_accuracy: f64,
    pub random_samples: usize,
    pub sample_points: usize,
    pub sampling_max_fraction: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            norm: Norm::Linf,
            base_epsilon: 0.1,
            objective: None,
            unbounded_epsilon: 1.0,
            unbounded_max_accuracy: 0.05,
            random_samples: 100_000,
            sample_points: 20,
            sampling_max_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingCheck {
    pub name: String,
    pub passed: bool,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    pub checks: Vec<MaskingCheck>,
}

impl MaskingReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&MaskingCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Names of the five checks, in report order.
pub const MASKING_CHECKS: [&str; 5] = [
    "one_step_vs_iterative",
    "black_box_vs_white_box",
    "unbounded_attack",
    "random_sampling",
    "increasing_budget",
];

fn check(name: &str, passed: bool, values: &[(&str, f64)]) -> MaskingCheck {
    MaskingCheck {
        name: name.to_string(),
        passed,
        values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

fn accuracy_on(defense: &Defense<'_>, x: &Tensor, y: &[usize]) -> Result<f64> {
    let pred = defense.predict(x)?;
    Ok(pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len().max(1) as f64)
}

/// Uniform draw from the budget ball around `center`, clipped to `[0, 1]`.
fn sample_ball(center: &[f64], norm: Norm, epsilon: f64, rng: &mut impl Rng, out: &mut [f64]) {
    match norm {
        Norm::Linf => {
            for (o, &c) in out.iter_mut().zip(center) {
                *o = c + rng.random_range(-epsilon..=epsilon);
            }
        }
        Norm::L2 => {
            let d = center.len();
            let mut len = 0.0;
            for o in out.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *o = z;
                len += z * z;
            }
            let len = len.sqrt();
            // Radius ε·U^(1/d) makes the draw uniform in volume.
            let r = epsilon * rng.random::<f64>().powf(1.0 / d as f64);
            for (o, &c) in out.iter_mut().zip(center) {
                *o = if len > 0.0 { c + r * *o / len } else { c };
            }
        }
    }
    for o in out.iter_mut() {
        *o = o.clamp(0.0, 1.0);
    }
}

/// Number of `samples` uniform draws around `x` that the defense
/// misclassifies.
pub fn random_sampling_errors(
    defense: &Defense<'_>,
    x: &[f64],
    y: usize,
    norm: Norm,
    epsilon: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    const CHUNK: usize = 4096;
    let d = x.len();
    let mut found = 0;
    let mut left = samples;
    let mut buf = vec![0.0; CHUNK * d];
    while left > 0 {
        let n = left.min(CHUNK);
        for row in buf[..n * d].chunks_mut(d) {
            sample_ball(x, norm, epsilon, rng, row);
        }
        let batch = Tensor::new(vec![n, d], buf[..n * d].to_vec())?;
        found += defense.predict(&batch)?.iter().filter(|&&p| p != y).count();
        left -= n;
    }
    Ok(found)
}

/// Runs the five masking checks on `data` (usually the test split).
///
/// `surrogate` crafts the black-box instances; it should share the
/// target's architecture but come from a different seed.
pub fn masking_battery(
    target: &TargetClassifier,
    trans: Option<&TransitionNetwork>,
    surrogate: &TargetClassifier,
    data: &Dataset,
    cfg: &MaskingConfig,
    seed_value: u64,
) -> Result<MaskingReport> {
    let defense = Defense::new(target, trans)?;
    if data.is_empty() {
        return Err(Error::Input("masking checks need data".into()));
    }
    let objective = cfg.objective.unwrap_or(if trans.is_some() {
        Objective::Combined
    } else {
        Objective::TargetOnly
    });
    let eps = cfg.base_epsilon;
    let pgd40 = AttackConfig::pgd40(cfg.norm, eps, objective);
    let x = data.features();
    let y = data.labels();
    let attack_rng = || seed::rng(seed_value, Stream::Evaluation);
    let mut checks = Vec::with_capacity(5);

    let x_pgd = pgd(x, y, &pgd40, target, trans, &mut attack_rng())?;
    let acc_pgd = accuracy_on(&defense, &x_pgd, y)?;
    let x_fgsm = fgsm(x, y, cfg.norm, eps, objective, target, trans)?;
    let acc_fgsm = accuracy_on(&defense, &x_fgsm, y)?;
    checks.push(check(
        MASKING_CHECKS[0],
        acc_fgsm >= acc_pgd,
        &[("fgsm_accuracy", acc_fgsm), ("pgd40_accuracy", acc_pgd)],
    ));

    let surrogate_attack = pgd40.with_objective(Objective::TargetOnly);
    let x_bb = pgd(x, y, &surrogate_attack, surrogate, None, &mut attack_rng())?;
    let acc_bb = accuracy_on(&defense, &x_bb, y)?;
    checks.push(check(
        MASKING_CHECKS[1],
        acc_bb >= acc_pgd,
        &[("black_box_accuracy", acc_bb), ("white_box_accuracy", acc_pgd)],
    ));

    let unbounded = AttackConfig::pgd40(cfg.norm, cfg.unbounded_epsilon, objective);
    let x_unb = pgd(x, y, &unbounded, target, trans, &mut attack_rng())?;
    let acc_unb = accuracy_on(&defense, &x_unb, y)?;
    checks.push(check(
        MASKING_CHECKS[2],
        acc_unb <= cfg.unbounded_max_accuracy,
        &[("epsilon", cfg.unbounded_epsilon), ("accuracy", acc_unb)],
    ));

    let pred = defense.predict(&x_pgd)?;
    let mut robust: Vec<usize> = (0..y.len()).filter(|&i| pred[i] == y[i]).collect();
    let mut sampling_rng = seed::rng(seed_value, Stream::Sampling);
    robust.shuffle(&mut sampling_rng);
    robust.truncate(cfg.sample_points);
    let mut points_with_errors = 0usize;
    let mut total_errors = 0usize;
    for &i in &robust {
        let e = random_sampling_errors(&defense, x.row(i), y[i], cfg.norm, eps, cfg.random_samples, &mut sampling_rng)?;
        total_errors += e;
        points_with_errors += (e > 0) as usize;
    }
    let fraction = if robust.is_empty() {
        0.0
    } else {
        points_with_errors as f64 / robust.len() as f64
    };
    checks.push(check(
        MASKING_CHECKS[3],
        fraction < cfg.sampling_max_fraction,
        &[
            ("points_checked", robust.len() as f64),
            ("samples_per_point", cfg.random_samples as f64),
            ("points_with_errors", points_with_errors as f64),
            ("misclassified_samples", total_errors as f64),
            ("fraction", fraction),
        ],
    ));

    let mut accs = Vec::with_capacity(4);
    for mult in [1.0, 2.0, 4.0, 8.0] {
        let a = pgd40.with_epsilon(eps * mult);
        let xa = pgd(x, y, &a, target, trans, &mut attack_rng())?;
        accs.push((mult, accuracy_on(&defense, &xa, y)?));
    }
    let monotone = accs.windows(2).all(|w| w[1].1 <= w[0].1);
    let named: Vec<(String, f64)> = accs
        .iter()
        .map(|(m, a)| (format!("accuracy_at_{}x", *m as u32), *a))
        .collect();
    let refs: Vec<(&str, f64)> = named.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    checks.push(check(MASKING_CHECKS[4], monotone, &refs));

    Ok(MaskingReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for &p in pos {
            for &n in neg {
                s += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auroc_small_cases() {
        assert_eq!(auroc_values(&[0.9, 0.9], &[0.1, 0.1, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc_values(&[0.3; 4], &[0.3; 3]).unwrap(), 0.5);
        assert_eq!(auroc_values(&[0.4, 0.8], &[0.2, 0.6]).unwrap(), 0.75);
        assert_eq!(brute_force(&[0.4, 0.8], &[0.2, 0.6]), 0.75);
    }

    #[test]
    fn auroc_needs_two_classes() {
        assert!(matches!(auroc_values(&[], &[0.1]), Err(Error::Input(_))));
        let s = DetectionScore {
            id: 0,
            predicted: 0,
            p: 0.5,
            score: 0.5,
            truth: GroundTruth::Natural,
        };
        assert!(auroc(&[s]).is_err());
    }

    #[test]
    fn identity_and_anti_diagonal_scores() {
        let id = TransitionMatrix::identity(4);
        assert_eq!(detect_score_matrix(&id, 2), 0.0);
        let anti = TransitionMatrix::anti_diagonal(4);
        assert_eq!(detect_score_matrix(&anti, 1), 1.0);
        // All-equal diagonal: no strict winner, so the rule flags it.
        assert!(hard_rule_flags(&id, 3));
        assert!(hard_rule_flags(&anti, 0));
        let peaked = TransitionMatrix::from_rows(&[[0.9, 0.1], [0.6, 0.4]]).unwrap();
        assert!(!hard_rule_flags(&peaked, 0));
        assert!(hard_rule_flags(&peaked, 1));
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = seed::rng(0, Stream::Sampling);
        let c = [0.02, 0.5, 0.99];
        let mut out = [0.0; 3];
        for norm in [Norm::Linf, Norm::L2] {
            for _ in 0..1000 {
                sample_ball(&c, norm, 0.1, &mut rng, &mut out);
                let dist = match norm {
                    Norm::Linf => out.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
                    Norm::L2 => out.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
                };
                assert!(dist <= 0.1 + 1e-12);
                assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
