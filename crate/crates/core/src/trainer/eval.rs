use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Checkpoint;
use crate::inference::{self, DecodeOptions, InferenceError};
use crate::model::Image;
use crate::scenegen::{evaluate_statement, CorpusExample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("the statement metric needs a checkpoint with a fine-tuned statement head")]
    MissingHead,
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CaptionExactMatch,
    CaptionUnigramPrecision,
    VqaAnswerExactMatch,
    NlvrStatementAccuracy,
    ItmAccuracy,
    RetrievalRecallAt1,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::CaptionExactMatch,
        Metric::CaptionUnigramPrecision,
        Metric::VqaAnswerExactMatch,
        Metric::NlvrStatementAccuracy,
        Metric::ItmAccuracy,
        Metric::RetrievalRecallAt1,
    ];
}

/// Requested metrics, each in `[0, 1]`; unrequested ones are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption_exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption_unigram_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vqa_answer_exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlvr_statement_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub itm_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval_recall_at_1: Option<f64>,
}

/// The model behaviour `evaluate` scores.
pub trait Predictor {
    fn caption(&self, image: &Image) -> Result<String, EvalError>;
    fn answer(&self, image: &Image, question: &str) -> Result<String, EvalError>;
    /// `None` when no statement head is available.
    fn verify(&self, image: &Image, statement: &str) -> Result<Option<bool>, EvalError>;
    fn matches(&self, image: &Image, text: &str) -> Result<bool, EvalError>;
    /// Index of the image in `images` that best matches `text`.
    fn retrieve(&self, text: &str, images: &[&Image]) -> Result<usize, EvalError>;
    fn has_statement_head(&self) -> bool;
}

pub struct CheckpointPredictor<'a> {
    pub ckpt: &'a Checkpoint,
    pub opts: DecodeOptions,
}

impl Predictor for CheckpointPredictor<'_> {
    fn caption(&self, image: &Image) -> Result<String, EvalError> {
        Ok(inference::caption_image(image, self.ckpt, &self.opts)?)
    }

    fn answer(&self, image: &Image, question: &str) -> Result<String, EvalError> {
        Ok(inference::answer_question(image, question, self.ckpt, &self.opts)?)
    }

    fn verify(&self, image: &Image, statement: &str) -> Result<Option<bool>, EvalError> {
        match inference::verify_statement(image, statement, self.ckpt) {
            Ok((truth, _)) => Ok(Some(truth)),
            Err(InferenceError::MissingHead) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn matches(&self, image: &Image, text: &str) -> Result<bool, EvalError> {
        Ok(inference::match_probability(image, text, self.ckpt)? >= 0.5)
    }

    fn retrieve(&self, text: &str, images: &[&Image]) -> Result<usize, EvalError> {
        let q = inference::text_embedding(text, self.ckpt)?;
        let embs = images
            .iter()
            .map(|img| inference::image_embedding(img, self.ckpt))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(inference::best_match(&q, &embs)?)
    }

    fn has_statement_head(&self) -> bool {
        self.ckpt.statement_head_trained
    }
}

fn ratio(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Clipped unigram matches of `pred` against `gold`, and `pred`'s length.
pub fn unigram_overlap(pred: &str, gold: &str) -> (usize, usize) {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in gold.split_whitespace() {
        *counts.entry(w).or_default() += 1;
    }
    let mut hits = 0;
    let mut total = 0;
    for w in pred.split_whitespace() {
        total += 1;
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    (hits, total)
}

/// Scores `predictor` on `split`.
///
/// * Caption metrics compare against each scene's gold caption; unigram
///   precision is micro-averaged with clipped counts.
/// * ITM pairs each image with its own caption (match) and with the next
///   scene's caption (non-match) unless that caption is identical or also
///   true of the image.
/// * Retrieval queries each caption against every image of the split and
///   counts a hit when the retrieved image's caption equals the query.
pub fn evaluate(predictor: &dyn Predictor, split: &[CorpusExample], requested: &[Metric]) -> Result<Metrics, EvalError> {
    if split.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let wants = |m: Metric| requested.contains(&m);
    if wants(Metric::NlvrStatementAccuracy) && !predictor.has_statement_head() {
        return Err(EvalError::MissingHead);
    }
    let mut out = Metrics::default();

    if wants(Metric::CaptionExactMatch) || wants(Metric::CaptionUnigramPrecision) {
        let (mut exact, mut hits, mut total) = (0, 0, 0);
        for ex in split {
            let pred = predictor.caption(&ex.image)?;
            exact += usize::from(pred == ex.record.caption);
            let (h, t) = unigram_overlap(&pred, &ex.record.caption);
            hits += h;
            total += t;
        }
        if wants(Metric::CaptionExactMatch) {
            out.caption_exact_match = Some(ratio(exact, split.len()));
        }
        if wants(Metric::CaptionUnigramPrecision) {
            out.caption_unigram_precision = Some(ratio(hits, total));
        }
    }

    if wants(Metric::VqaAnswerExactMatch) {
        let (mut hits, mut total) = (0, 0);
        for ex in split {
            for qa in &ex.record.qa {
                hits += usize::from(predictor.answer(&ex.image, &qa.q)? == qa.a);
                total += 1;
            }
        }
        out.vqa_answer_exact_match = Some(ratio(hits, total));
    }

    if wants(Metric::NlvrStatementAccuracy) {
        let (mut hits, mut total) = (0, 0);
        for ex in split {
            for st in &ex.record.statements {
                let truth = predictor.verify(&ex.image, &st.text)?.ok_or(EvalError::MissingHead)?;
                hits += usize::from(truth == st.truth);
                total += 1;
            }
        }
        out.nlvr_statement_accuracy = Some(ratio(hits, total));
    }

    if wants(Metric::ItmAccuracy) {
        let (mut hits, mut total) = (0, 0);
        for (i, ex) in split.iter().enumerate() {
            hits += usize::from(predictor.matches(&ex.image, &ex.record.caption)?);
            total += 1;
            let other = &split[(i + 1) % split.len()].record.caption;
            if *other != ex.record.caption && evaluate_statement(&ex.record.spec(), other) != Some(true) {
                hits += usize::from(!predictor.matches(&ex.image, other)?);
                total += 1;
            }
        }
        out.itm_accuracy = Some(ratio(hits, total));
    }

    if wants(Metric::RetrievalRecallAt1) {
        let images: Vec<&Image> = split.iter().map(|e| &e.image).collect();
        let mut hits = 0;
        for ex in split {
            let j = predictor.retrieve(&ex.record.caption, &images)?;
            hits += usize::from(split[j].record.caption == ex.record.caption);
        }
        out.retrieval_recall_at_1 = Some(ratio(hits, split.len()));
    }
    Ok(out)
}

/// Evaluates a checkpoint with the given decoding options.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    split: &[CorpusExample],
    requested: &[Metric],
    opts: DecodeOptions,
) -> Result<Metrics, EvalError> {
    evaluate(&CheckpointPredictor { ckpt, opts }, split, requested)
}
