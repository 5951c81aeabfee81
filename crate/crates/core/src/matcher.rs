//! Pairwise matcher: a softmax head over `Z_xy ⊕ |Z_x - Z_y|`, trained with
//! cross-entropy together with the encoder.

use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::{put_encoder, take_encoder, Checkpoint, Tensor};
use crate::corpus::{serialize_pair, TokenSequence};
use crate::encoder::{uniform, EmbeddingModel, EncoderGrads, ForwardTape};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{self, Rng};

pub const KIND_MATCHER: &str = "matcher";

/// One labeled pair of serialized items.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub left: TokenSequence,
    pub right: TokenSequence,
    pub label: u8,
}

impl PairExample {
    pub fn new(left: TokenSequence, right: TokenSequence, label: u8) -> Self {
        Self { left, right, label }
    }
}

/// Token ids of the three encoder inputs of a pair.
#[derive(Debug, Clone)]
struct EncodedPair {
    x: Vec<u32>,
    y: Vec<u32>,
    xy: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherModel {
    pub encoder: EmbeddingModel,
    /// `2 x 2d`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherGrads {
    pub encoder: EncoderGrads,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl MatcherModel {
    /// Head initialized uniformly in `±1/sqrt(2d)`.
    pub fn new(encoder: EmbeddingModel, rng: &mut Rng) -> Self {
        let f = 2 * encoder.output_dim();
        let bound = 1.0 / (f as f64).sqrt();
        let w = uniform(rng, (2, f), bound);
        let b = uniform(rng, (1, 2), bound).into_shape_with_order(2).unwrap();
        Self { encoder, w, b }
    }

    pub fn with_zero_head(encoder: EmbeddingModel) -> Self {
        let f = 2 * encoder.output_dim();
        Self {
            encoder,
            w: Array2::zeros((2, f)),
            b: Array1::zeros(2),
        }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.encoder.output_dim()
    }

    fn encode_pairs(&self, pairs: &[(&TokenSequence, &TokenSequence)]) -> Vec<EncodedPair> {
        pairs
            .iter()
            .map(|(x, y)| EncodedPair {
                x: self.encoder.tokenize(x),
                y: self.encoder.tokenize(y),
                xy: self.encoder.tokenize(&serialize_pair(x, y)),
            })
            .collect()
    }

    fn features(&self, batch: &[EncodedPair]) -> (Array2<f64>, [ForwardTape; 3]) {
        let xs: Vec<Vec<u32>> = batch.iter().map(|p| p.x.clone()).collect();
        let ys: Vec<Vec<u32>> = batch.iter().map(|p| p.y.clone()).collect();
        let xys: Vec<Vec<u32>> = batch.iter().map(|p| p.xy.clone()).collect();
        let (zx, tx) = self.encoder.forward(&xs, None);
        let (zy, ty) = self.encoder.forward(&ys, None);
        let (zxy, txy) = self.encoder.forward(&xys, None);
        let diff = (&zx - &zy).mapv(f64::abs);
        let f = concatenate![Axis(1), zxy, diff];
        (f, [tx, ty, txy])
    }

    fn probabilities(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut logits = features.dot(&self.w.t());
        logits += &self.b;
        for mut row in logits.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row /= z;
        }
        logits
    }

    /// `[p(non-match), p(match)]` for one pair.
    pub fn predict(&self, x: &TokenSequence, y: &TokenSequence) -> [f64; 2] {
        self.predict_batch(&[(x, y)])[0]
    }

    /// Probabilities for many pairs, computed in parallel chunks.
    pub fn predict_batch(&self, pairs: &[(&TokenSequence, &TokenSequence)]) -> Vec<[f64; 2]> {
        pairs
            .par_chunks(256)
            .flat_map_iter(|chunk| {
                let enc = self.encode_pairs(chunk);
                let (f, _) = self.features(&enc);
                let p = self.probabilities(&f);
                p.rows().into_iter().map(|r| [r[0], r[1]]).collect::<Vec<_>>()
            })
            .collect()
    }

    /// Mean cross-entropy of a batch and its exact gradients.
    pub fn loss_and_grads(&self, batch: &[PairExample]) -> Result<(f64, MatcherGrads)> {
        if batch.is_empty() {
            return Err(Error::Empty("matcher batch"));
        }
        let refs: Vec<(&TokenSequence, &TokenSequence)> = batch.iter().map(|p| (&p.left, &p.right)).collect();
        let labels: Vec<u8> = batch.iter().map(|p| p.label).collect();
        let enc = self.encode_pairs(&refs);
        self.loss_and_grads_encoded(&enc, &labels, true)
    }

    fn loss_and_grads_encoded(
        &self,
        batch: &[EncodedPair],
        labels: &[u8],
        encoder_grads: bool,
    ) -> Result<(f64, MatcherGrads)> {
        let n = batch.len() as f64;
        let d = self.encoder.output_dim();
        let (f, tapes) = self.features(batch);
        let p = self.probabilities(&f);
        let mut loss = 0.0;
        let mut dlogits = p.clone();
        for (i, &y) in labels.iter().enumerate() {
            let y = y as usize;
            loss -= p[[i, y]].max(f64::MIN_POSITIVE).ln();
            dlogits[[i, y]] -= 1.0;
        }
        loss /= n;
        dlogits /= n;
        let gw = dlogits.t().dot(&f);
        let gb = dlogits.sum_axis(Axis(0));
        let mut genc = EncoderGrads::zeros(&self.encoder.config);
        if encoder_grads {
            let df = dlogits.dot(&self.w);
            let dzxy = df.slice(s![.., ..d]).to_owned();
            let mut dzx = df.slice(s![.., d..]).to_owned();
            let zx = tapes[0].output();
            let zy = tapes[1].output();
            ndarray::Zip::from(&mut dzx)
                .and(zx)
                .and(zy)
                .for_each(|g, a, b| *g *= sign(a - b));
            let dzy = -&dzx;
            self.encoder.backward_into(&tapes[0], &dzx, &mut genc)?;
            self.encoder.backward_into(&tapes[1], &dzy, &mut genc)?;
            self.encoder.backward_into(&tapes[2], &dzxy, &mut genc)?;
        }
        Ok((
            loss,
            MatcherGrads {
                encoder: genc,
                w: gw,
                b: gb,
            },
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(KIND_MATCHER);
        put_encoder(&mut ck, &self.encoder);
        ck.push("head.w", Tensor::from_array2(&self.w));
        ck.push("head.b", Tensor::from_array1(&self.b));
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != KIND_MATCHER {
            return Err(Error::Checkpoint(format!(
                "expected a matcher checkpoint, found `{}`",
                ck.kind
            )));
        }
        let encoder = take_encoder(&ck)?;
        let w = ck.get("head.w")?.to_array2()?;
        let b = ck.get("head.b")?.to_array1()?;
        if w.dim() != (2, 2 * encoder.output_dim()) || b.len() != 2 {
            return Err(Error::Checkpoint("head shape does not match encoder".into()));
        }
        Ok(Self { encoder, w, b })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Z_xy ⊕ |Z_x - Z_y|` for one pair.
pub fn pair_features(x: &TokenSequence, y: &TokenSequence, model: &EmbeddingModel) -> Array1<f64> {
    let zx = model.encode_sequence(x);
    let zy = model.encode_sequence(y);
    let zxy = model.encode_sequence(&serialize_pair(x, y));
    let diff = (&zx - &zy).mapv(f64::abs);
    concatenate![Axis(0), zxy, diff]
}

/// Hard decision: match only when its probability is strictly larger.
pub fn decide(p: [f64; 2]) -> u8 {
    (p[1] > p[0]) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct F1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> F1 {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1 { precision, recall, f1 }
}

pub fn f1_score(predictions: &[u8], truth: &[u8]) -> Result<F1> {
    if predictions.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &t) in predictions.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

pub const DEFAULT_HEAD_LR: f64 = 5e-2;

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate of the linear head; `None` uses `learning_rate`.
    pub head_learning_rate: Option<f64>,
    pub freeze_encoder: bool,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 5e-5,
            head_learning_rate: Some(DEFAULT_HEAD_LR),
            freeze_encoder: false,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub matcher: MatcherModel,
    /// Epoch whose checkpoint was returned (`None` for the untouched
    /// initialization).
    pub best_epoch: Option<usize>,
    pub best_valid_f1: Option<f64>,
    pub history: Vec<EpochLog>,
}

/// Evaluate a matcher on labeled pairs.
pub fn evaluate(matcher: &MatcherModel, pairs: &[PairExample]) -> Result<F1> {
    let refs: Vec<(&TokenSequence, &TokenSequence)> = pairs.iter().map(|p| (&p.left, &p.right)).collect();
    let preds: Vec<u8> = matcher.predict_batch(&refs).into_iter().map(decide).collect();
    let truth: Vec<u8> = pairs.iter().map(|p| p.label).collect();
    f1_score(&preds, &truth)
}

/// Fine-tune `encoder` plus a fresh head on `train`. With a validation set,
/// the checkpoint of the epoch with the highest validation F1 (earliest on
/// ties) is returned; otherwise the final one.
pub fn finetune(
    train: &[PairExample],
    valid: Option<&[PairExample]>,
    encoder: EmbeddingModel,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let mut init = rng::stream(config.seed, rng::STREAM_INIT);
    let matcher = MatcherModel::new(encoder, &mut init);
    finetune_from(train, valid, matcher, config)
}

/// Like [`finetune`] but starting from an existing matcher.
pub fn finetune_from(
    train: &[PairExample],
    valid: Option<&[PairExample]>,
    mut matcher: MatcherModel,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("fine-tuning pairs"));
    }
    if let Some(bad) = train.iter().find(|p| p.label > 1) {
        return Err(Error::invalid(format!("label must be 0 or 1, got {}", bad.label)));
    }
    let positives = train.iter().filter(|p| p.label == 1).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::invalid(
            "fine-tuning pairs must contain both matches and non-matches",
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let refs: Vec<(&TokenSequence, &TokenSequence)> = train.iter().map(|p| (&p.left, &p.right)).collect();
    let encoded = matcher.encode_pairs(&refs);
    let head_lr = config.head_learning_rate.unwrap_or(config.learning_rate);
    let mut enc_opt = AdamW::new(config.optimizer);
    let mut head_opt = AdamW::new(config.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(config.seed, rng::STREAM_SHUFFLE);

    let mut best: Option<(usize, f64, MatcherModel)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<EncodedPair> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| train[i].label).collect();
            let (loss, grads) = matcher.loss_and_grads_encoded(&batch, &labels, !config.freeze_encoder)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "fine-tuning loss",
                    detail: format!("epoch {epoch}, pairs {chunk:?}"),
                });
            }
            total += loss * chunk.len() as f64;
            head_opt.step(
                vec![
                    matcher.w.as_slice_mut().expect("standard layout"),
                    matcher.b.as_slice_mut().expect("standard layout"),
                ],
                vec![
                    grads.w.as_slice().expect("standard layout"),
                    grads.b.as_slice().expect("standard layout"),
                ],
                head_lr,
            )?;
            if !config.freeze_encoder {
                enc_opt.step(
                    matcher.encoder.buffers_mut(),
                    grads.encoder.buffers(),
                    config.learning_rate,
                )?;
            }
        }
        let train_loss = total / train.len() as f64;
        let valid_f1 = match valid {
            Some(v) if !v.is_empty() => Some(evaluate(&matcher, v)?.f1),
            _ => None,
        };
        log::debug!("finetune epoch {epoch}: loss {train_loss:.6} valid f1 {valid_f1:?}");
        history.push(EpochLog {
            epoch,
            train_loss,
            valid_f1,
        });
        if let Some(f1) = valid_f1 {
            if best.as_ref().is_none_or(|(_, b, _)| f1 > *b) {
                best = Some((epoch, f1, matcher.clone()));
            }
        }
    }
    let (matcher, best_epoch, best_valid_f1) = match best {
        Some((e, f1, m)) => (m, Some(e), Some(f1)),
        None => {
            let last = config.epochs.checked_sub(1);
            (matcher, last, None)
        }
    };
    Ok(FinetuneOutcome {
        matcher,
        best_epoch,
        best_valid_f1,
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id_a: String,
    pub id_b: String,
    pub prob_match: f64,
    pub decision: u8,
}

/// `id_a,id_b,prob_match,decision` with a header.
pub fn write_predictions(w: impl Write, preds: &[Prediction]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id_a", "id_b", "prob_match", "decision"])?;
    for p in preds {
        out.write_record([
            p.id_a.as_str(),
            p.id_b.as_str(),
            &p.prob_match.to_string(),
            &p.decision.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions(r: impl std::io::Read) -> Result<Vec<Prediction>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let bad = |msg: &str| Error::Parse {
            path: "<predictions>".into(),
            line: i + 2,
            msg: msg.into(),
        };
        let prob_match: f64 = record
            .get(2)
            .unwrap_or_default()
            .parse()
            .map_err(|_| bad("bad probability"))?;
        let decision = match record.get(3).unwrap_or_default() {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad("decision must be 0 or 1")),
        };
        out.push(Prediction {
            id_a: record.get(0).unwrap_or_default().to_owned(),
            id_b: record.get(1).unwrap_or_default().to_owned(),
            prob_match,
            decision,
        });
    }
    Ok(out)
}

/// `epoch,train_loss,valid_f1` with an empty field when there was no
/// validation set.
pub fn write_finetune_log(w: impl Write, history: &[EpochLog]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "train_loss", "valid_f1"])?;
    for h in history {
        out.write_record([
            h.epoch.to_string(),
            h.train_loss.to_string(),
            h.valid_f1.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny(seed: u64) -> EmbeddingModel {
        let cfg = EncoderConfig {
            vocab_size: 128,
            embed_dim: 6,
            hidden_dim: 7,
            output_dim: 5,
        };
        EmbeddingModel::new(cfg, &mut rng::from_seed(seed)).unwrap()
    }

    fn seq(s: &str) -> TokenSequence {
        TokenSequence::parse(s)
    }

    #[test]
    fn features_shape_and_symmetry() {
        let m = tiny(1);
        let x = seq("[COL] t [VAL] red apple");
        let y = seq("[COL] t [VAL] green pear");
        let f = pair_features(&x, &y, &m);
        assert_eq!(f.len(), 10);
        let g = pair_features(&y, &x, &m);
        assert_eq!(f.slice(s![5..]), g.slice(s![5..]));
        let same = pair_features(&x, &x, &m);
        assert!(same.slice(s![5..]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_head_is_uniform() {
        let m = MatcherModel::with_zero_head(tiny(2));
        let p = m.predict(&seq("a b"), &seq("c"));
        assert_eq!(p, [0.5, 0.5]);
        assert_eq!(decide(p), 0);
    }

    #[test]
    fn hand_set_head_matches_manual_softmax() {
        let mut m = MatcherModel::with_zero_head(tiny(3));
        let x = seq("[COL] t [VAL] one");
        let y = seq("[COL] t [VAL] two");
        let f = pair_features(&x, &y, &m.encoder);
        m.w.row_mut(1).fill(0.5);
        m.b[0] = 0.25;
        let l0: f64 = 0.25;
        let l1: f64 = 0.5 * f.sum();
        let p1 = l1.exp() / (l0.exp() + l1.exp());
        let got = m.predict(&x, &y);
        assert!((got[1] - p1).abs() < 1e-12);
        assert!((got[0] + got[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f1_arithmetic() {
        let preds = [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0];
        let truth = [1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 1, 1];
        let f = f1_score(&preds, &truth).unwrap();
        assert!((f.precision - 0.8).abs() < 1e-12);
        assert!((f.recall - 0.8).abs() < 1e-12);
        assert!((f.f1 - 0.8).abs() < 1e-12);
        assert_eq!(f1_score(&[0, 0], &[1, 0]).unwrap(), F1::default());
        assert_eq!(f1_score(&[1, 0], &[1, 0]).unwrap().f1, 1.0);
        assert!(f1_score(&[1], &[1, 0]).is_err());
    }

    fn toy_pairs() -> Vec<PairExample> {
        let mut v = Vec::new();
        for i in 0..12 {
            let x = seq(&format!("[COL] t [VAL] item{i} alpha"));
            v.push(PairExample::new(
                x.clone(),
                seq(&format!("[COL] t [VAL] item{i} alpha")),
                1,
            ));
            v.push(PairExample::new(
                x,
                seq(&format!("[COL] t [VAL] thing{} beta gamma", i + 100)),
                0,
            ));
        }
        v
    }

    #[test]
    fn zero_epochs_keeps_initial_head() {
        let enc = tiny(4);
        let cfg = FinetuneConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = finetune(&toy_pairs(), None, enc.clone(), &cfg).unwrap();
        let init = MatcherModel::new(enc, &mut rng::stream(cfg.seed, rng::STREAM_INIT));
        assert_eq!(out.matcher, init);
    }

    #[test]
    fn single_class_is_rejected() {
        let pairs: Vec<_> = toy_pairs().into_iter().filter(|p| p.label == 1).collect();
        assert!(finetune(&pairs, None, tiny(5), &FinetuneConfig::default()).is_err());
    }

    #[test]
    fn deterministic_and_checkpoint_roundtrip() {
        let cfg = FinetuneConfig {
            epochs: 3,
            batch_size: 5,
            learning_rate: 1e-2,
            seed: 9,
            ..Default::default()
        };
        let pairs = toy_pairs();
        let a = finetune(&pairs, Some(&pairs), tiny(6), &cfg).unwrap();
        let b = finetune(&pairs, Some(&pairs), tiny(6), &cfg).unwrap();
        assert_eq!(a.matcher, b.matcher);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        a.matcher.save(&path).unwrap();
        assert_eq!(MatcherModel::load(&path).unwrap(), a.matcher);
    }

    #[test]
    fn prediction_file_format() {
        let mut buf = Vec::new();
        write_predictions(
            &mut buf,
            &[Prediction {
                id_a: "a".into(),
                id_b: "b".into(),
                prob_match: 0.75,
                decision: 1,
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "id_a,id_b,prob_match,decision\na,b,0.75,1\n"
        );
    }
}
