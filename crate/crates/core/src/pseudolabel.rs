//! Pseudo labels from embedding similarity: threshold assignment, solving
//! the negative threshold for a target positive ratio, hill-climbing the
//! positive threshold, and merging with manual labels.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::blocking::{Candidate, CandidateSet};
use crate::corpus::LabeledPair;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_MULTIPLIER: usize = 8;
pub const DEFAULT_STEP: f64 = 0.05;
pub const DEFAULT_TRIALS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdPair {
    pub pos: f64,
    pub neg: f64,
    pub ratio: f64,
    pub multiplier: usize,
}

impl ThresholdPair {
    pub fn new(pos: f64, neg: f64, ratio: f64, multiplier: usize) -> Result<Self> {
        let t = Self {
            pos,
            neg,
            ratio,
            multiplier,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.pos) || !(-1.0..=1.0).contains(&self.neg) {
            return Err(Error::invalid(format!(
                "thresholds must lie in [-1, 1], got ({}, {})",
                self.pos, self.neg
            )));
        }
        if self.neg > self.pos {
            return Err(Error::invalid(format!(
                "negative threshold {} exceeds positive threshold {}",
                self.neg, self.pos
            )));
        }
        validate_ratio(self.ratio)?;
        if self.multiplier == 0 {
            return Err(Error::invalid("multiplier must be at least 1"));
        }
        Ok(())
    }
}

fn validate_ratio(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("positive ratio must lie in (0, 1), got {rho}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Manual,
    Pseudo,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Manual => "manual",
            Provenance::Pseudo => "pseudo",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" => Ok(Provenance::Manual),
            "pseudo" => Ok(Provenance::Pseudo),
            other => Err(Error::invalid(format!("unknown provenance `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub id_a: String,
    pub id_b: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub thresholds: ThresholdPair,
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| l.label == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    /// `|C+| / (|C+| + |C-|)`, 0 for an empty set.
    pub fn achieved_ratio(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.positives() as f64 / self.labels.len() as f64
        }
    }
}

/// Label 1 when `score > pos`, 0 when `score < neg`, skip otherwise.
pub fn assign_pseudo(cands: &CandidateSet, thresholds: ThresholdPair) -> Result<PseudoLabelSet> {
    if thresholds.neg > thresholds.pos {
        return Err(Error::invalid(format!(
            "negative threshold {} exceeds positive threshold {}",
            thresholds.neg, thresholds.pos
        )));
    }
    let labels = cands
        .pairs
        .iter()
        .filter_map(|c| {
            let label = if c.score > thresholds.pos {
                1
            } else if c.score < thresholds.neg {
                0
            } else {
                return None;
            };
            Some(PseudoLabel {
                id_a: c.id_a.clone(),
                id_b: c.id_b.clone(),
                label,
                score: c.score,
            })
        })
        .collect();
    Ok(PseudoLabelSet { thresholds, labels })
}

/// Negative threshold such that `round(P (1 - rho) / rho)` candidates score
/// strictly below it, where `P` counts candidates above `pos`. The value is
/// taken from the sorted similarity list.
pub fn solve_threshold_for_ratio(cands: &CandidateSet, rho: f64, pos: f64) -> Result<f64> {
    validate_ratio(rho)?;
    let positives = cands.pairs.iter().filter(|c| c.score > pos).count();
    if positives == 0 {
        return Err(Error::Infeasible {
            needed: 1,
            available: 0,
        });
    }
    let mut below: Vec<f64> = cands.pairs.iter().map(|c| c.score).filter(|s| *s < pos).collect();
    below.sort_by(f64::total_cmp);
    let needed = (positives as f64 * (1.0 - rho) / rho).round() as usize;
    if needed > below.len() {
        return Err(Error::Infeasible {
            needed,
            available: below.len(),
        });
    }
    Ok(if needed < below.len() { below[needed] } else { pos })
}

/// Starting positive threshold: the midpoint between the `P`-th and
/// `(P+1)`-th highest similarity with `P = max(1, floor(rho n))`.
pub fn initial_theta(cands: &CandidateSet, rho: f64) -> Result<f64> {
    validate_ratio(rho)?;
    let n = cands.len();
    if n < 2 {
        return Err(Error::Empty("candidate similarities (need at least 2)"));
    }
    let mut desc: Vec<f64> = cands.pairs.iter().map(|c| c.score).collect();
    desc.sort_by(|a, b| b.total_cmp(a));
    let p = ((rho * n as f64).floor() as usize).clamp(1, n - 1);
    Ok(0.5 * (desc[p - 1] + desc[p]))
}

/// Thresholds for a given positive threshold with the negative threshold
/// solved from the ratio.
pub fn thresholds_for(cands: &CandidateSet, rho: f64, pos: f64, multiplier: usize) -> Result<ThresholdPair> {
    let neg = solve_threshold_for_ratio(cands, rho, pos)?;
    ThresholdPair::new(pos, neg, rho, multiplier)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HillClimb {
    pub theta: f64,
    pub score: f64,
    /// Every evaluated `(theta, score)` in call order.
    pub trace: Vec<(f64, f64)>,
}

/// Local search for the positive threshold: try `theta ± step`, move to an
/// improving neighbor, halve the step when neither improves. `eval` is called
/// at most `trials` times (points already evaluated are not re-evaluated) and
/// the best threshold seen is returned.
pub fn tune_theta_hillclimb<F>(theta0: f64, step: f64, trials: usize, mut eval: F) -> Result<HillClimb>
where
    F: FnMut(f64) -> Result<f64>,
{
    if trials == 0 {
        return Err(Error::invalid("hill climbing needs at least one trial"));
    }
    if !(step > 0.0) {
        return Err(Error::invalid("hill-climbing step must be positive"));
    }
    let key = |t: f64| (t * 1e9).round() as i64;
    let mut seen: HashMap<i64, f64> = HashMap::new();
    let mut trace = Vec::new();
    let mut call = |t: f64, seen: &mut HashMap<i64, f64>, trace: &mut Vec<(f64, f64)>| -> Result<Option<f64>> {
        if let Some(s) = seen.get(&key(t)) {
            return Ok(Some(*s));
        }
        if trace.len() >= trials {
            return Ok(None);
        }
        let s = eval(t).map_err(|e| Error::Eval {
            theta: t,
            source: Box::new(e),
        })?;
        seen.insert(key(t), s);
        trace.push((t, s));
        Ok(Some(s))
    };

    let theta0 = theta0.clamp(-1.0, 1.0);
    let mut cur = theta0;
    let mut cur_score = call(cur, &mut seen, &mut trace)?.expect("first trial");
    let mut step = step;
    let mut direction = 1.0;
    'search: while trace.len() < trials && step > 1e-9 {
        let mut moved = false;
        for dir in [direction, -direction] {
            let t = cur + dir * step;
            if !(-1.0..=1.0).contains(&t) {
                continue;
            }
            match call(t, &mut seen, &mut trace)? {
                None => break 'search,
                Some(s) if s > cur_score => {
                    cur = t;
                    cur_score = s;
                    direction = dir;
                    moved = true;
                    break;
                }
                Some(_) => {}
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    let (theta, score) =
        trace.iter().copied().fold(
            (theta0, f64::NEG_INFINITY),
            |best, (t, s)| if s > best.1 { (t, s) } else { best },
        );
    Ok(HillClimb { theta, score, trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub pair: LabeledPair,
    pub provenance: Provenance,
    /// Similarity for pseudo labels.
    pub score: Option<f64>,
}

/// Manual labels plus `(multiplier - 1) * |manual|` pseudo labels drawn with
/// `round(rho * quota)` positives. Manual labels win on id collisions. With
/// no manual labels every pseudo label is used.
pub fn build_training_set(
    manual: &[LabeledPair],
    pseudo: &PseudoLabelSet,
    multiplier: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if multiplier == 0 {
        return Err(Error::invalid("multiplier must be at least 1"));
    }
    let mut out: Vec<TrainingPair> = manual
        .iter()
        .map(|p| TrainingPair {
            pair: p.clone(),
            provenance: Provenance::Manual,
            score: None,
        })
        .collect();
    let taken: HashSet<(String, String)> = manual.iter().map(LabeledPair::key).collect();
    let to_pair = |l: &PseudoLabel| TrainingPair {
        pair: LabeledPair::new(l.id_a.clone(), l.id_b.clone(), l.label),
        provenance: Provenance::Pseudo,
        score: Some(l.score),
    };
    let available: Vec<&PseudoLabel> = pseudo
        .labels
        .iter()
        .filter(|l| !taken.contains(&(l.id_a.clone(), l.id_b.clone())))
        .collect();
    if manual.is_empty() {
        out.extend(available.into_iter().map(to_pair));
        return Ok(out);
    }
    let quota = (multiplier - 1) * manual.len();
    if quota == 0 {
        return Ok(out);
    }
    let mut rng = rng::stream(seed, rng::STREAM_SHUFFLE);
    let (mut pos, mut neg): (Vec<&PseudoLabel>, Vec<&PseudoLabel>) = available.into_iter().partition(|l| l.label == 1);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let want_pos = (pseudo.thresholds.ratio * quota as f64).round() as usize;
    let want_neg = quota - want_pos;
    let take_pos = want_pos.min(pos.len());
    let take_neg = want_neg.min(neg.len());
    if take_pos + take_neg < quota {
        log::warn!(
            "only {} of {quota} pseudo labels available ({take_pos} positive, {take_neg} negative)",
            take_pos + take_neg
        );
    }
    out.extend(pos[..take_pos].iter().map(|l| to_pair(l)));
    out.extend(neg[..take_neg].iter().map(|l| to_pair(l)));
    Ok(out)
}

/// Share of pseudo positives that are true matches and of pseudo negatives
/// that are true non-matches. `None` when the class is empty.
pub fn pseudo_quality(pseudo: &PseudoLabelSet, truth: &HashSet<(String, String)>) -> (Option<f64>, Option<f64>) {
    let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
    for l in &pseudo.labels {
        let is_match = truth.contains(&(l.id_a.clone(), l.id_b.clone()));
        if l.label == 1 {
            p += 1;
            tp += is_match as usize;
        } else {
            n += 1;
            tn += !is_match as usize;
        }
    }
    let frac = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    (frac(tp, p), frac(tn, n))
}

/// `id_a,id_b,label,score,provenance` with a header.
pub fn write_training_pairs(w: impl Write, pairs: &[TrainingPair]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id_a", "id_b", "label", "score", "provenance"])?;
    for p in pairs {
        out.write_record([
            p.pair.left.as_str(),
            p.pair.right.as_str(),
            &p.pair.label.to_string(),
            &p.score.map(|s| s.to_string()).unwrap_or_default(),
            p.provenance.name(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_training_pairs(r: impl std::io::Read) -> Result<Vec<TrainingPair>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |msg: String| Error::Parse {
            path: "pseudo labels".into(),
            line: i + 2,
            msg,
        };
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", rec.len())));
        }
        let label: u8 = match rec[2].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label must be 0 or 1, got `{other}`"))),
        };
        let score = match rec[3].trim() {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad(format!("bad score `{s}`")))?),
        };
        out.push(TrainingPair {
            pair: LabeledPair::new(&rec[0], &rec[1], label),
            provenance: rec[4].trim().parse().map_err(|e: Error| bad(e.to_string()))?,
            score,
        });
    }
    Ok(out)
}

/// Pseudo labels as training pairs, for writing the labeled set alone.
pub fn pseudo_as_training(pseudo: &PseudoLabelSet) -> Vec<TrainingPair> {
    pseudo
        .labels
        .iter()
        .map(|l| TrainingPair {
            pair: LabeledPair::new(l.id_a.clone(), l.id_b.clone(), l.label),
            provenance: Provenance::Pseudo,
            score: Some(l.score),
        })
        .collect()
}

/// Candidates with scores, as used by the threshold routines.
pub fn candidates_from_scores(scores: &[f64]) -> CandidateSet {
    CandidateSet {
        k: 1,
        pairs: scores
            .iter()
            .enumerate()
            .map(|(i, s)| Candidate {
                id_a: format!("a{i}"),
                id_b: format!("b{i}"),
                score: *s,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tp(pos: f64, neg: f64) -> ThresholdPair {
        ThresholdPair::new(pos, neg, 0.5, 8).unwrap()
    }

    #[test]
    fn threshold_rule() {
        let c = candidates_from_scores(&[0.99, 0.5, 0.1, 0.9]);
        let s = assign_pseudo(&c, tp(0.9, 0.2)).unwrap();
        let labels: Vec<(String, u8)> = s.labels.iter().map(|l| (l.id_a.clone(), l.label)).collect();
        assert_eq!(labels, vec![("a0".to_string(), 1), ("a2".to_string(), 0)]);
    }

    #[test]
    fn collapsed_thresholds_label_all_but_ties() {
        let c = candidates_from_scores(&[0.3, 0.5, 0.7, 0.5]);
        let s = assign_pseudo(&c, tp(0.5, 0.5)).unwrap();
        assert_eq!(s.labels.len(), 2);
        let bad = ThresholdPair {
            pos: 0.1,
            neg: 0.2,
            ratio: 0.5,
            multiplier: 8,
        };
        assert!(assign_pseudo(&c, bad).is_err());
    }

    #[test]
    fn equal_split_ratio() {
        let scores: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let c = candidates_from_scores(&scores);
        // 10 scores above 0.74: 0.75 .. 0.975
        let neg = solve_threshold_for_ratio(&c, 0.5, 0.74).unwrap();
        let below = scores.iter().filter(|s| **s < neg).count();
        assert_eq!(below, 10);
        let set = assign_pseudo(&c, tp(0.74, neg)).unwrap();
        assert_eq!(set.positives(), 10);
        assert_eq!(set.negatives(), 10);
    }

    #[test]
    fn infeasible_ratio_reports_shortfall() {
        let c = candidates_from_scores(&[0.9, 0.95, 0.1]);
        let err = solve_threshold_for_ratio(&c, 0.1, 0.5).unwrap_err();
        match err {
            Error::Infeasible { needed, available } => {
                assert_eq!((needed, available), (18, 1));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn hillclimb_budget_of_one_returns_start() {
        let r = tune_theta_hillclimb(0.7, 0.05, 1, |t| Ok(-t)).unwrap();
        assert_eq!(r.theta, 0.7);
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn hillclimb_constant_objective_stays() {
        let r = tune_theta_hillclimb(0.6, 0.05, 5, |_| Ok(1.0)).unwrap();
        assert_eq!(r.theta, 0.6);
        assert!(r.trace.len() <= 5);
    }

    #[test]
    fn hillclimb_propagates_failure_with_theta() {
        let err = tune_theta_hillclimb(0.6, 0.05, 5, |t| {
            if t > 0.62 {
                Err(Error::invalid("boom"))
            } else {
                Ok(0.0)
            }
        })
        .unwrap_err();
        match err {
            Error::Eval { theta, .. } => assert!((theta - 0.65).abs() < 1e-12),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn training_set_precedence_and_sizes() {
        let manual = vec![LabeledPair::new("a0", "b0", 0), LabeledPair::new("a9", "b9", 1)];
        let c = candidates_from_scores(&[0.95, 0.9, 0.85, 0.1, 0.05, 0.02, 0.01, 0.0, -0.1, -0.2]);
        let pseudo = assign_pseudo(&c, ThresholdPair::new(0.5, 0.2, 0.3, 3).unwrap()).unwrap();
        let same = build_training_set(&manual, &pseudo, 1, 0).unwrap();
        assert_eq!(same.len(), 2);
        let out = build_training_set(&manual, &pseudo, 3, 0).unwrap();
        assert_eq!(out.len(), 6);
        let a0: Vec<_> = out.iter().filter(|p| p.pair.left == "a0").collect();
        assert_eq!(a0.len(), 1);
        assert_eq!(a0[0].provenance, Provenance::Manual);
        assert_eq!(a0[0].pair.label, 0);
        // quota 4, round(0.3 * 4) = 1 positive
        let pseudo_pos = out
            .iter()
            .filter(|p| p.provenance == Provenance::Pseudo && p.pair.label == 1)
            .count();
        assert_eq!(pseudo_pos, 1);
    }

    #[test]
    fn quality_counts() {
        let c = candidates_from_scores(&[0.9, 0.8, 0.1, 0.0]);
        let set = assign_pseudo(&c, tp(0.5, 0.5)).unwrap();
        let truth: HashSet<_> = [
            ("a0".to_string(), "b0".to_string()),
            ("a3".to_string(), "b3".to_string()),
        ]
        .into_iter()
        .collect();
        let (tpr, tnr) = pseudo_quality(&set, &truth);
        assert_eq!(tpr, Some(0.5));
        assert_eq!(tnr, Some(0.5));
    }

    #[test]
    fn pair_file_roundtrip() {
        let manual = vec![LabeledPair::new("x", "y", 1)];
        let c = candidates_from_scores(&[0.9, 0.1]);
        let pseudo = assign_pseudo(&c, tp(0.5, 0.5)).unwrap();
        let set = build_training_set(&manual, &pseudo, 3, 1).unwrap();
        let mut buf = Vec::new();
        write_training_pairs(&mut buf, &set).unwrap();
        assert_eq!(read_training_pairs(buf.as_slice()).unwrap(), set);
    }
}
