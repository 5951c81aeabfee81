//! End-to-end entity matching: pre-train, block, pseudo-label, fine-tune,
//! predict.

use std::collections::{HashMap, HashSet};

use crate::blocking::{
    build_index, knn_candidates, knn_candidates_symmetric, recall_cssr, BlockingQuality, CandidateSet,
};
use crate::corpus::{
    resample_corpus, resample_indices, serialize_entity, Corpus, DataItem, EmDataset, LabeledPair, TokenSequence,
};
use crate::encoder::{EmbeddingModel, EncoderConfig, Projector, DEFAULT_PROJECTOR_DIM};
use crate::error::{Error, Result, StageExt};
use crate::matcher::{
    decide, evaluate, f1_from_counts, finetune, FinetuneConfig, FinetuneOutcome, MatcherModel, PairExample, Prediction,
    F1,
};
use crate::pretrain::{pretrain_with_projector, PretrainConfig, StepLog};
use crate::pseudolabel::{
    assign_pseudo, build_training_set, initial_theta, pseudo_quality, thresholds_for, tune_theta_hillclimb,
    PseudoLabelSet, TrainingPair, DEFAULT_MULTIPLIER, DEFAULT_STEP, DEFAULT_TRIALS,
};
use crate::rng;

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub encoder: EncoderConfig,
    pub projector_dim: usize,
    pub pretrain: PretrainConfig,
    /// Size of the resampled pre-training corpus.
    pub corpus_size: usize,
    pub k: usize,
    pub symmetric: bool,
    pub index_projector: bool,
    /// Positive ratio prior; enables pseudo labeling.
    pub rho: Option<f64>,
    pub multiplier: usize,
    pub hill_trials: usize,
    pub hill_step: f64,
    pub finetune: FinetuneConfig,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            projector_dim: DEFAULT_PROJECTOR_DIM,
            pretrain: PretrainConfig::default(),
            corpus_size: 10_000,
            k: 10,
            symmetric: false,
            index_projector: false,
            rho: None,
            multiplier: DEFAULT_MULTIPLIER,
            hill_trials: DEFAULT_TRIALS,
            hill_step: DEFAULT_STEP,
            finetune: FinetuneConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoReport {
    pub theta_pos: f64,
    pub theta_neg: f64,
    pub positives: usize,
    pub negatives: usize,
    pub achieved_ratio: f64,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub trials: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct EmReport {
    pub pretrain_steps: usize,
    pub blocking: Option<BlockingQuality>,
    pub candidates: usize,
    pub pseudo: Option<PseudoReport>,
    pub training_pairs: usize,
    pub valid_f1: Option<f64>,
    /// Matcher quality on the labeled test split.
    pub test: Option<F1>,
    /// Predicted matches over the candidate set against every known match,
    /// so blocking misses count as false negatives.
    pub end_to_end: Option<F1>,
}

#[derive(Debug, Clone)]
pub struct EmArtifacts {
    pub encoder: EmbeddingModel,
    pub projector: Projector,
    pub pretrain_log: Vec<StepLog>,
    pub candidates: CandidateSet,
    pub pseudo: Option<PseudoLabelSet>,
    pub training_set: Vec<TrainingPair>,
    pub matcher: MatcherModel,
    pub predictions: Vec<Prediction>,
    pub report: EmReport,
}

/// Serialized items of both tables keyed by id.
pub struct ItemLookup {
    a: HashMap<String, TokenSequence>,
    b: HashMap<String, TokenSequence>,
}

impl ItemLookup {
    pub fn new(table_a: &[DataItem], table_b: &[DataItem]) -> Self {
        let ser = |t: &[DataItem]| t.iter().map(|i| (i.id.clone(), serialize_entity(i))).collect();
        Self {
            a: ser(table_a),
            b: ser(table_b),
        }
    }

    pub fn example(&self, left: &str, right: &str, label: u8) -> Result<PairExample> {
        let x = self
            .a
            .get(left)
            .ok_or_else(|| Error::Schema(format!("unknown table A id `{left}`")))?;
        let y = self
            .b
            .get(right)
            .ok_or_else(|| Error::Schema(format!("unknown table B id `{right}`")))?;
        Ok(PairExample::new(x.clone(), y.clone(), label))
    }

    pub fn examples(&self, pairs: &[LabeledPair]) -> Result<Vec<PairExample>> {
        pairs.iter().map(|p| self.example(&p.left, &p.right, p.label)).collect()
    }
}

/// Fresh encoder and projector from the init stream of `seed`.
pub fn init_models(encoder: EncoderConfig, projector_dim: usize, seed: u64) -> Result<(EmbeddingModel, Projector)> {
    let mut r = rng::stream(seed, rng::STREAM_INIT);
    let model = EmbeddingModel::new(encoder, &mut r)?;
    let projector = Projector::new(encoder.output_dim, projector_dim, &mut r);
    Ok((model, projector))
}

/// Pre-train on the resampled union of both tables.
pub fn pretrain_on_tables(
    table_a: &[DataItem],
    table_b: &[DataItem],
    config: &EmConfig,
) -> Result<(EmbeddingModel, Projector, Vec<StepLog>)> {
    let corpus = Corpus::from_tables(table_a.to_vec(), table_b.to_vec())?;
    let entries = resample_corpus(&corpus, config.corpus_size, rng::derive_seed(config.seed, "corpus"))?;
    let seqs: Vec<TokenSequence> = entries.iter().map(|e| serialize_entity(&e.item)).collect();
    let (model, projector) = init_models(config.encoder, config.projector_dim, config.seed)?;
    let mut pcfg = config.pretrain.clone();
    pcfg.seed = config.seed;
    let (outcome, projector) = pretrain_with_projector(&seqs, model, projector, &pcfg)?;
    Ok((outcome.model, projector, outcome.history))
}

/// Pre-train on arbitrary serialized items, resampled to the configured
/// corpus size.
pub fn pretrain_on_sequences(
    seqs: &[TokenSequence],
    config: &EmConfig,
) -> Result<(EmbeddingModel, Projector, Vec<StepLog>)> {
    let idx = resample_indices(seqs.len(), config.corpus_size, rng::derive_seed(config.seed, "corpus"))?;
    let corpus: Vec<TokenSequence> = idx.into_iter().map(|i| seqs[i].clone()).collect();
    let (model, projector) = init_models(config.encoder, config.projector_dim, config.seed)?;
    let mut pcfg = config.pretrain.clone();
    pcfg.seed = config.seed;
    let (outcome, projector) = pretrain_with_projector(&corpus, model, projector, &pcfg)?;
    Ok((outcome.model, projector, outcome.history))
}

pub fn block(
    table_a: &[DataItem],
    table_b: &[DataItem],
    model: &EmbeddingModel,
    projector: Option<&Projector>,
    k: usize,
    symmetric: bool,
) -> Result<CandidateSet> {
    let ia = build_index(table_a, model, projector)?;
    let ib = build_index(table_b, model, projector)?;
    let k_eff = k.min(ib.len()).min(if symmetric { ia.len() } else { usize::MAX });
    if k_eff < k {
        log::warn!("k = {k} exceeds a table size; using {k_eff}");
    }
    if symmetric {
        knn_candidates_symmetric(&ia, &ib, k_eff)
    } else {
        knn_candidates(&ia, &ib, k_eff)
    }
}

/// Predict every candidate pair.
pub fn predict_candidates(
    matcher: &MatcherModel,
    lookup: &ItemLookup,
    cands: &CandidateSet,
) -> Result<Vec<Prediction>> {
    let examples: Vec<PairExample> = cands
        .pairs
        .iter()
        .map(|c| lookup.example(&c.id_a, &c.id_b, 0))
        .collect::<Result<_>>()?;
    let refs: Vec<(&TokenSequence, &TokenSequence)> = examples.iter().map(|e| (&e.left, &e.right)).collect();
    let probs = matcher.predict_batch(&refs);
    Ok(cands
        .pairs
        .iter()
        .zip(probs)
        .map(|(c, p)| Prediction {
            id_a: c.id_a.clone(),
            id_b: c.id_b.clone(),
            prob_match: p[1],
            decision: decide(p),
        })
        .collect())
}

/// F1 of predicted matches against the full set of true matches.
pub fn end_to_end_f1(preds: &[Prediction], truth: &HashSet<(String, String)>) -> F1 {
    let predicted: HashSet<(String, String)> = preds
        .iter()
        .filter(|p| p.decision == 1)
        .map(|p| (p.id_a.clone(), p.id_b.clone()))
        .collect();
    let tp = predicted.iter().filter(|p| truth.contains(*p)).count();
    f1_from_counts(tp, predicted.len() - tp, truth.len() - tp)
}

/// Split pseudo labels into a training part and a held-out part used in
/// place of validation labels when there are none.
fn pseudo_holdout(pairs: Vec<TrainingPair>) -> (Vec<TrainingPair>, Vec<TrainingPair>) {
    pairs
        .into_iter()
        .partition(|p| !rng::fnv1a64(format!("{}\u{1f}{}", p.pair.left, p.pair.right).as_bytes()).is_multiple_of(5))
}

fn to_examples(lookup: &ItemLookup, pairs: &[TrainingPair]) -> Result<Vec<PairExample>> {
    pairs
        .iter()
        .map(|p| lookup.example(&p.pair.left, &p.pair.right, p.pair.label))
        .collect()
}

struct Trial {
    outcome: FinetuneOutcome,
    pseudo: PseudoLabelSet,
    training: Vec<TrainingPair>,
    score: f64,
}

pub fn run_em(data: &EmDataset, config: &EmConfig) -> Result<EmArtifacts> {
    if data.table_a.is_empty() || data.table_b.is_empty() {
        return Err(Error::Empty("matching tables"));
    }
    let (model, projector, pretrain_log) =
        pretrain_on_tables(&data.table_a, &data.table_b, config).stage("pretrain")?;

    let index_proj = config.index_projector.then_some(&projector);
    let cands = block(
        &data.table_a,
        &data.table_b,
        &model,
        index_proj,
        config.k,
        config.symmetric,
    )
    .stage("block")?;
    let truth = data.known_matches();
    let blocking = if truth.is_empty() {
        None
    } else {
        Some(recall_cssr(&cands, &truth, data.table_a.len(), data.table_b.len()).stage("block")?)
    };

    let lookup = ItemLookup::new(&data.table_a, &data.table_b);
    let manual = lookup.examples(&data.train).stage("finetune")?;
    let valid = lookup.examples(&data.valid).stage("finetune")?;
    let mut ft = config.finetune.clone();
    ft.seed = rng::derive_seed(config.seed, "finetune");

    let (outcome, pseudo_set, training, pseudo_report) = match config.rho {
        None => {
            if manual.is_empty() {
                return Err(
                    Error::invalid("no manual labels and no positive ratio: nothing to train on").in_stage("finetune"),
                );
            }
            let valid_opt = (!valid.is_empty()).then_some(valid.as_slice());
            let out = finetune(&manual, valid_opt, model.clone(), &ft).stage("finetune")?;
            let training = data
                .train
                .iter()
                .map(|p| TrainingPair {
                    pair: p.clone(),
                    provenance: crate::pseudolabel::Provenance::Manual,
                    score: None,
                })
                .collect();
            (out, None, training, None)
        }
        Some(rho) => {
            let theta0 = initial_theta(&cands, rho).stage("pseudolabel")?;
            let unsupervised = data.train.is_empty();
            let mut trials: Vec<(u64, Trial)> = Vec::new();
            let climb = tune_theta_hillclimb(theta0, config.hill_step, config.hill_trials, |theta| {
                let thresholds = match thresholds_for(&cands, rho, theta, config.multiplier) {
                    Ok(t) => t,
                    Err(Error::Infeasible { needed, available }) => {
                        log::info!("theta+ {theta}: infeasible ({needed} negatives needed, {available} available)");
                        return Ok(f64::NEG_INFINITY);
                    }
                    Err(e) => return Err(e),
                };
                let pseudo = assign_pseudo(&cands, thresholds)?;
                let training = build_training_set(&data.train, &pseudo, config.multiplier, config.seed)?;
                let (train_pairs, held_out) = if unsupervised && valid.is_empty() {
                    pseudo_holdout(training.clone())
                } else {
                    (training.clone(), Vec::new())
                };
                let train_ex = to_examples(&lookup, &train_pairs)?;
                let held_ex = to_examples(&lookup, &held_out)?;
                let check: Option<&[PairExample]> = if !valid.is_empty() {
                    Some(&valid)
                } else if !held_ex.is_empty() {
                    Some(&held_ex)
                } else {
                    None
                };
                let outcome = match finetune(&train_ex, check, model.clone(), &ft) {
                    Ok(o) => o,
                    Err(Error::InvalidArgument(msg)) => {
                        log::info!("theta+ {theta}: {msg}");
                        return Ok(f64::NEG_INFINITY);
                    }
                    Err(e) => return Err(e),
                };
                let score = match check {
                    Some(v) => outcome
                        .best_valid_f1
                        .map_or_else(|| evaluate(&outcome.matcher, v).map(|f| f.f1), Ok)?,
                    None => -outcome.history.last().map_or(0.0, |h| h.train_loss),
                };
                trials.push((
                    theta.to_bits(),
                    Trial {
                        outcome,
                        pseudo,
                        training,
                        score,
                    },
                ));
                Ok(score)
            })
            .stage("pseudolabel")?;
            let best = trials
                .into_iter()
                .find(|(bits, _)| *bits == climb.theta.to_bits())
                .map(|(_, t)| t)
                .ok_or_else(|| {
                    Error::Infeasible {
                        needed: 1,
                        available: 0,
                    }
                    .in_stage("pseudolabel")
                })?;
            let (tpr, tnr) = if truth.is_empty() {
                (None, None)
            } else {
                pseudo_quality(&best.pseudo, &truth)
            };
            let report = PseudoReport {
                theta_pos: best.pseudo.thresholds.pos,
                theta_neg: best.pseudo.thresholds.neg,
                positives: best.pseudo.positives(),
                negatives: best.pseudo.negatives(),
                achieved_ratio: best.pseudo.achieved_ratio(),
                tpr,
                tnr,
                trials: climb.trace.clone(),
            };
            log::debug!("best trial score {}", best.score);
            (best.outcome, Some(best.pseudo), best.training, Some(report))
        }
    };

    let matcher = outcome.matcher;
    let predictions = predict_candidates(&matcher, &lookup, &cands).stage("predict")?;
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&matcher, &lookup.examples(&data.test)?).stage("predict")?)
    };
    let end_to_end = (!truth.is_empty()).then(|| end_to_end_f1(&predictions, &truth));
    let report = EmReport {
        pretrain_steps: pretrain_log.len(),
        blocking,
        candidates: cands.len(),
        pseudo: pseudo_report,
        training_pairs: training.len(),
        valid_f1: outcome.best_valid_f1,
        test,
        end_to_end,
    };
    Ok(EmArtifacts {
        encoder: model,
        projector,
        pretrain_log,
        candidates: cands,
        pseudo: pseudo_set,
        training_set: training,
        matcher,
        predictions,
        report,
    })
}
