//! The contrastive pre-training loop.

use std::io::Write;

use ndarray::Array2;

use super::cluster::{uniform_batches, ClusterBatcher};
use super::loss::{combined_loss, BatchViews, CombinedOutput};
use crate::augment::{augment_batch, CutoffKind, CutoffMask, CutoffSpec, DaKind, DaOperator};
use crate::corpus::TokenSequence;
use crate::encoder::{EmbeddingModel, EncoderGrads, Projector, ProjectorGrads};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub n_epoch: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub num_clusters: usize,
    pub da: DaOperator,
    pub cutoff: Option<CutoffSpec>,
    pub learning_rate: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_epoch: 3,
            batch_size: 64,
            temperature: 0.07,
            lambda: 3.9e-3,
            alpha: 1e-3,
            num_clusters: 90,
            da: DaOperator::new(DaKind::TokenDel),
            cutoff: Some(CutoffSpec {
                kind: CutoffKind::Span,
                ratio: CutoffSpec::DEFAULT_RATIO,
            }),
            learning_rate: 5e-5,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::invalid(format!(
                "temperature must lie in (0, 1], got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.num_clusters == 0 {
            return Err(Error::invalid("number of clusters must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if let Some(spec) = &self.cutoff {
            CutoffSpec::new(spec.kind, spec.ratio)?;
        }
        Ok(())
    }
}

/// Loss values of one optimizer step. Components that were not evaluated
/// (zero weight) are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss_contrast: Option<f64>,
    pub loss_bt: Option<f64>,
    pub loss_total: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: EmbeddingModel,
    pub history: Vec<StepLog>,
}

impl PretrainOutcome {
    pub fn steps(&self) -> usize {
        self.history.len()
    }
}

/// Run contrastive pre-training and return the encoder; the projector is
/// consumed and dropped.
pub fn pretrain(
    corpus: &[TokenSequence],
    model: EmbeddingModel,
    projector: Projector,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    pretrain_with_projector(corpus, model, projector, config).map(|(outcome, _)| outcome)
}

/// Same as [`pretrain`] but also returns the trained projector.
pub fn pretrain_with_projector(
    corpus: &[TokenSequence],
    mut model: EmbeddingModel,
    mut projector: Projector,
    config: &PretrainConfig,
) -> Result<(PretrainOutcome, Projector)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("pre-training corpus"));
    }
    if projector.input_dim() != model.output_dim() {
        return Err(Error::shape(format!(
            "projector takes {} inputs but the encoder emits {}",
            projector.input_dim(),
            model.output_dim()
        )));
    }
    let mut history = Vec::new();
    if config.n_epoch == 0 {
        return Ok((PretrainOutcome { model, history }, projector));
    }

    let batcher = if config.num_clusters > 1 {
        Some(ClusterBatcher::fit(corpus, config.num_clusters, config.seed)?)
    } else {
        None
    };
    let shuffle_seed = rng::derive_seed(config.seed, rng::STREAM_SHUFFLE);
    let da_seed = rng::derive_seed(config.seed, rng::STREAM_DA);
    let mut optimizer = AdamW::new(config.optimizer);
    let ids: Vec<Vec<u32>> = corpus.iter().map(|s| model.tokenize(s)).collect();
    let mut global_step = 0usize;

    for epoch in 0..config.n_epoch {
        let epoch_seed = rng::derive_indexed(shuffle_seed, "epoch", epoch as u64);
        let batches = match &batcher {
            Some(b) => b.batches(config.batch_size, epoch_seed)?,
            None => uniform_batches(corpus.len(), config.batch_size, &mut rng::from_seed(epoch_seed))?,
        };
        for (step, batch) in batches.iter().enumerate() {
            if batch.len() < 2 {
                log::debug!("epoch {epoch} step {step}: skipping batch of size {}", batch.len());
                continue;
            }
            let step_seed = rng::derive_indexed(da_seed, "step", global_step as u64);
            global_step += 1;

            let originals: Vec<TokenSequence> = batch.iter().map(|&i| corpus[i].clone()).collect();
            let (_, augmented) = augment_batch(&originals, &config.da, step_seed)?;
            let ori_ids: Vec<Vec<u32>> = batch.iter().map(|&i| ids[i].clone()).collect();
            let aug_ids: Vec<Vec<u32>> = augmented.iter().map(|s| model.tokenize(s)).collect();
            let mask = config.cutoff.as_ref().map(|spec| {
                let max_len = aug_ids.iter().map(Vec::len).max().unwrap_or(0);
                let mut r = rng::from_seed(rng::derive_seed(step_seed, "cutoff"));
                CutoffMask::sample(spec, max_len, model.config.embed_dim, &mut r)
            });

            let (out, eg, pg) = pretrain_loss_and_grads(
                &model,
                &projector,
                &ori_ids,
                &aug_ids,
                mask.as_ref(),
                config.temperature,
                config.lambda,
                config.alpha,
            )?;
            if !out.total.value.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    detail: format!(
                        "epoch {epoch} step {step}: loss {} on items {:?}",
                        out.total.value, batch
                    ),
                });
            }

            let mut params = model.buffers_mut();
            params.extend(projector.buffers_mut());
            let mut grads = eg.buffers();
            grads.extend(pg.buffers());
            optimizer
                .step(params, grads, config.learning_rate)
                .map_err(|e| match e {
                    Error::NonFinite { what, detail } => Error::NonFinite {
                        what,
                        detail: format!("epoch {epoch} step {step} on items {batch:?}: {detail}"),
                    },
                    other => other,
                })?;

            history.push(StepLog {
                epoch,
                step,
                loss_contrast: out.contrast,
                loss_bt: out.barlow,
                loss_total: out.total.value,
            });
        }
        if let Some(last) = history.last().filter(|l| l.epoch == epoch) {
            log::info!("pretrain epoch {epoch}: last loss {:.6}", last.loss_total);
        }
    }
    Ok((PretrainOutcome { model, history }, projector))
}

/// Combined loss of one batch of (original, augmented) token ids and its
/// exact gradients with respect to the encoder and projector parameters.
/// `mask` is applied to the augmented view only.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss_and_grads(
    model: &EmbeddingModel,
    projector: &Projector,
    ori_ids: &[Vec<u32>],
    aug_ids: &[Vec<u32>],
    mask: Option<&CutoffMask>,
    temperature: f64,
    lambda: f64,
    alpha: f64,
) -> Result<(CombinedOutput, EncoderGrads, ProjectorGrads)> {
    let (z_ori, tape_ori) = model.forward(ori_ids, None);
    let (z_aug, tape_aug) = model.forward(aug_ids, mask);
    let p_ori = projector.forward(&z_ori)?;
    let p_aug = projector.forward(&z_aug)?;
    let views = BatchViews::new(p_ori, p_aug)?;
    let out = combined_loss(&views, temperature, lambda, alpha)?;
    let (mut pg, dz_ori) = projector.backward(&z_ori, &out.total.grad_ori)?;
    let (pg_aug, dz_aug) = projector.backward(&z_aug, &out.total.grad_aug)?;
    pg.w += &pg_aug.w;
    pg.b += &pg_aug.b;
    let mut eg = EncoderGrads::zeros(&model.config);
    model.backward_into(&tape_ori, &dz_ori, &mut eg)?;
    model.backward_into(&tape_aug, &dz_aug, &mut eg)?;
    Ok((out, eg, pg))
}

/// Write `epoch,step,loss_contrast,loss_bt,loss_total` lines with a header.
/// Components that were not evaluated are left empty.
pub fn write_training_log(w: &mut impl Write, history: &[StepLog]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(w, "epoch,step,loss_contrast,loss_bt,loss_total")?;
    for s in history {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.epoch,
            s.step,
            opt(s.loss_contrast),
            opt(s.loss_bt),
            s.loss_total
        )?;
    }
    Ok(())
}

/// Mean cosine similarity over all unordered pairs inside each group.
pub fn mean_within_group_cosine(embeddings: &Array2<f64>, groups: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for g in groups {
        for (a, &i) in g.iter().enumerate() {
            for &j in &g[a + 1..] {
                total += crate::encoder::cosine(embeddings.row(i), embeddings.row(j));
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
