//! Training objectives: image-text contrastive (ITC), image-text matching
//! (ITM), language modeling (LM), their weighted sum, and distillation.
//!
//! Losses are built on a caller-owned [`Tape`] so gradients flow back to
//! whatever produced the inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::forward::{self, Bound};
use crate::model::{Image, MedConfig, ModelError, Role, TokenBatch, TokenSequence, EOS, PAD};
use crate::tensor::{NodeId, Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("need at least {need} items, got {got}")]
    TooFewItems { need: usize, got: usize },
    #[error("language-model sequences need at least 2 tokens")]
    SequenceTooShort,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Target id meaning "not supervised".
pub const IGNORE: usize = usize::MAX;

/// Paired, L2-normalized projections and the (positive) temperature node.
#[derive(Clone, Copy, Debug)]
pub struct BatchEmbeddings {
    pub image_proj: NodeId,
    pub text_proj: NodeId,
    pub temperature: NodeId,
}

/// Symmetric InfoNCE over `S / τ` with `S = image_proj · text_projᵀ`; row
/// `i` of each side is the positive for the other. Returns the loss and `S`.
pub fn itc_loss<T: Scalar>(tape: &mut Tape<T>, batch: BatchEmbeddings) -> Result<(NodeId, Tensor<T>)> {
    let n = tape.value(batch.image_proj).rows();
    if n == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let t = tape.transpose(batch.text_proj)?;
    let sim = tape.matmul(batch.image_proj, t)?;
    let logits = tape.div_scalar(sim, batch.temperature)?;
    let targets: Vec<usize> = (0..n).collect();
    let i2t = tape.cross_entropy_logits(logits, &targets, IGNORE)?;
    let lt = tape.transpose(logits)?;
    let t2i = tape.cross_entropy_logits(lt, &targets, IGNORE)?;
    let both = tape.add(i2t, t2i)?;
    let loss = tape.scale(both, 0.5)?;
    Ok((loss, tape.value(sim).clone()))
}

/// One (image, text) pairing for ITM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItmPair {
    pub image: usize,
    pub text: usize,
    pub matched: bool,
}

fn argmax_excluding<T: Scalar>(values: impl Iterator<Item = T>, skip: usize) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (j, v) in values.enumerate() {
        if j == skip {
            continue;
        }
        // strict comparison keeps the lowest index on ties
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j).expect("at least two items")
}

/// For each item `i`: the positive `(i, i)`, its hardest text `(i, j*)` and
/// its hardest image `(j*, i)`, by similarity with ties to the lowest index.
pub fn select_hard_negatives<T: Scalar>(sim: &Tensor<T>) -> Result<Vec<ItmPair>> {
    let n = sim.rows();
    if sim.rank() != 2 || sim.cols() != n {
        return Err(TensorError::Invalid(format!("similarity matrix must be square, got {:?}", sim.shape())).into());
    }
    if n < 2 {
        return Err(ObjectiveError::TooFewItems { need: 2, got: n });
    }
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        out.push(ItmPair {
            image: i,
            text: i,
            matched: true,
        });
        let j = argmax_excluding(sim.row(i).iter().copied(), i);
        out.push(ItmPair {
            image: i,
            text: j,
            matched: false,
        });
        let j = argmax_excluding((0..n).map(|r| sim.row(r)[i]), i);
        out.push(ItmPair {
            image: j,
            text: i,
            matched: false,
        });
    }
    Ok(out)
}

/// Mean binary cross-entropy of a binary head (`itm_head` or
/// `statement_head`) applied to one fused row per example.
pub fn binary_head_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    head: &str,
    fused_rows: NodeId,
    labels: &[bool],
) -> Result<NodeId> {
    if labels.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let logits = forward::linear(tape, bound, head, fused_rows)?;
    Ok(tape.bce_with_logits(logits, labels)?)
}

pub fn itm_loss<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, fused_rows: NodeId, labels: &[bool]) -> Result<NodeId> {
    binary_head_loss(tape, bound, "itm_head", fused_rows, labels)
}

/// Supervised targets for one sequence: position `t` predicts token `t + 1`
/// when that token is not [PAD] and lies at or after the supervision
/// boundary ([SEP] + 1 if present, else 1).
pub fn lm_targets(ids: &[usize]) -> Vec<usize> {
    let boundary = ids.iter().position(|&t| t == crate::model::SEP).map_or(1, |s| s + 1);
    (0..ids.len())
        .map(|t| match ids.get(t + 1) {
            Some(&next) if next != PAD && t + 1 >= boundary => next,
            _ => IGNORE,
        })
        .collect()
}

/// Shifted cross-entropy of `logits` (`batch·len × vocab`) against `batch`.
pub fn lm_loss<T: Scalar>(tape: &mut Tape<T>, logits: NodeId, batch: &TokenBatch) -> Result<NodeId> {
    if batch.lens.iter().any(|&n| n < 2) {
        return Err(ObjectiveError::SequenceTooShort);
    }
    let targets: Vec<usize> = (0..batch.batch()).flat_map(|b| lm_targets(batch.row(b))).collect();
    Ok(tape.cross_entropy_logits(logits, &targets, IGNORE)?)
}

/// `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`, mean over rows.
pub fn kd_loss<T: Scalar>(tape: &mut Tape<T>, student: NodeId, teacher: NodeId, temperature: f64) -> Result<NodeId> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(ObjectiveError::InvalidTemperature(temperature));
    }
    let (s, t) = (tape.value(student), tape.value(teacher));
    if s.shape() != t.shape() || s.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "kd_loss",
            left: s.shape().to_vec(),
            right: t.shape().to_vec(),
        }
        .into());
    }
    let rows = s.rows();
    let ss = tape.scale(student, 1.0 / temperature)?;
    let ts = tape.scale(teacher, 1.0 / temperature)?;
    let log_s = tape.log_softmax(ss, 1)?;
    let log_t = tape.log_softmax(ts, 1)?;
    let p_t = tape.softmax(ts, 1)?;
    let diff = tape.sub(log_t, log_s)?;
    let kl = tape.mul(p_t, diff)?;
    let total = tape.sum(kl)?;
    Ok(tape.scale(total, temperature * temperature / rows as f64)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub itc: f64,
    pub itm: f64,
    pub lm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            itc: 1.0,
            itm: 1.0,
            lm: 1.0,
        }
    }
}

pub fn joint_loss<T: Scalar>(
    tape: &mut Tape<T>,
    itc: NodeId,
    itm: NodeId,
    lm: NodeId,
    weights: LossWeights,
) -> Result<NodeId> {
    let a = tape.scale(itc, weights.itc)?;
    let b = tape.scale(itm, weights.itm)?;
    let c = tape.scale(lm, weights.lm)?;
    let ab = tape.add(a, b)?;
    Ok(tape.add(ab, c)?)
}

/// Nodes of one pretraining forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PretrainLosses {
    pub itc: NodeId,
    pub itm: NodeId,
    pub lm: NodeId,
    pub total: NodeId,
}

/// `[DEC] text [EOS]`.
pub fn caption_target(words: &[usize]) -> TokenSequence {
    let mut seq = TokenSequence::with_role(Role::Decode, words);
    seq.ids.push(EOS);
    seq
}

/// ITC + ITM + LM over matched (image, caption) pairs; `captions` holds
/// word ids without role or [EOS] tokens.
///
/// ITM pairs come from in-batch hard-negative mining on the ITC
/// similarities. A mined "negative" is labeled as a match when its caption
/// is identical to the positive's or when `describes(image, text)` says
/// the caption is nonetheless true of that image.
pub fn pretrain_losses<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &MedConfig,
    images: &[&Image],
    captions: &[Vec<usize>],
    weights: LossWeights,
    describes: &dyn Fn(usize, usize) -> bool,
) -> Result<PretrainLosses> {
    let n = images.len();
    if n != captions.len() {
        return Err(ModelError::Config(format!("{n} images but {} captions", captions.len())).into());
    }
    if n < 2 {
        return Err(ObjectiveError::TooFewItems { need: 2, got: n });
    }
    let img_states = forward::image_states(tape, bound, cfg, images)?;

    let cls_seqs: Vec<TokenSequence> = captions.iter().map(|c| TokenSequence::with_role(Role::Cls, c)).collect();
    let cls_batch = TokenBatch::from_sequences(&cls_seqs.iter().collect::<Vec<_>>());
    let txt_states = forward::text_states(tape, bound, cfg, &cls_batch)?;
    let emb = BatchEmbeddings {
        image_proj: forward::image_embeddings(tape, bound, cfg, img_states, n)?,
        text_proj: forward::text_embeddings(tape, bound, txt_states, &cls_batch)?,
        temperature: bound.get("itc.temperature"),
    };
    let (itc, sim) = itc_loss(tape, emb)?;

    let pairs = select_hard_negatives(&sim)?;
    let enc_seqs: Vec<TokenSequence> = captions.iter().map(|c| TokenSequence::with_role(Role::Encode, c)).collect();
    let enc_refs: Vec<&TokenSequence> = pairs.iter().map(|p| &enc_seqs[p.text]).collect();
    let enc_batch = TokenBatch::from_sequences(&enc_refs);
    let image_index: Vec<usize> = pairs.iter().map(|p| p.image).collect();
    let labels: Vec<bool> = pairs
        .iter()
        .map(|p| p.matched || captions[p.text] == captions[p.image] || describes(p.image, p.text))
        .collect();
    let fused = forward::grounded_states(tape, bound, cfg, &enc_batch, img_states, &image_index)?;
    let rows = forward::first_rows(tape, fused, enc_batch.batch(), enc_batch.len)?;
    let itm = itm_loss(tape, bound, rows, &labels)?;

    let dec_seqs: Vec<TokenSequence> = captions.iter().map(|c| caption_target(c)).collect();
    let dec_batch = TokenBatch::from_sequences(&dec_seqs.iter().collect::<Vec<_>>());
    let all: Vec<usize> = (0..n).collect();
    let logits = forward::decoder_logits(tape, bound, cfg, &dec_batch, img_states, &all)?;
    let lm = lm_loss(tape, logits, &dec_batch)?;

    let total = joint_loss(tape, itc, itm, lm, weights)?;
    Ok(PretrainLosses { itc, itm, lm, total })
}
