//! Captioning, question answering, statement verification and retrieval
//! from a trained checkpoint.
//!
//! Decoding recomputes the full prefix at every step; sequences are short
//! enough that caching keys and values is not worth the complexity.

use std::cmp::Ordering;

use thiserror::Error;

use crate::model::{Image, Med, ModelError, Role, TokenSequence, EOS, SEP, SPECIAL_TOKENS};
use crate::scenegen::SceneError;
use crate::trainer::Checkpoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("checkpoint has no fine-tuned statement head")]
    MissingHead,
    #[error("no candidate images")]
    EmptyCandidates,
    #[error("invalid decode options: {0}")]
    InvalidOptions(String),
    #[error("text does not fit the model: {0}")]
    Text(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<SceneError> for InferenceError {
    fn from(e: SceneError) -> Self {
        InferenceError::Text(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub strategy: Strategy,
    pub beam_width: usize,
    /// Upper bound on generated tokens, [EOS] included; the model's
    /// `max_len` caps the whole sequence regardless.
    pub max_new_tokens: usize,
    /// [EOS] is suppressed until this many words have been generated.
    pub min_words: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam_width: 3,
            max_new_tokens: 23,
            min_words: 0,
        }
    }
}

impl DecodeOptions {
    pub fn beam(width: usize) -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_width: width,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(InferenceError::InvalidOptions("beam_width must be at least 1".into()));
        }
        Ok(())
    }
}

/// A generated continuation with its summed log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, including the final [EOS] when one was produced.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Length-normalized score used for ranking.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Higher score first, then lexicographically smaller ids.
    fn rank(&self, other: &Self) -> Ordering {
        other
            .score()
            .partial_cmp(&self.score())
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.tokens.cmp(&other.tokens))
    }

    /// Generated words, without the trailing [EOS].
    pub fn words(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Tokens the decoder may emit: vocabulary words and [EOS]. Padding, role
/// markers, [UNK] and [SEP] are never generated.
pub fn generatable(id: usize) -> bool {
    id == EOS || id >= SPECIAL_TOKENS.len()
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Autoregressive decoder over a fixed image.
pub struct Decoder<'a> {
    model: &'a Med,
    image_states: crate::tensor::Tensor,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a Med, image: &Image) -> Result<Self> {
        Ok(Self {
            image_states: model.encode_image(image)?,
            model,
        })
    }

    /// Log-probabilities of the token following `prefix` (which must start
    /// with [DEC]).
    pub fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = self
            .model
            .decode_step(&TokenSequence::new(prefix.to_vec()), Some(&self.image_states))?;
        Ok(log_softmax(logits.row(logits.rows() - 1)))
    }

    fn budget(&self, prompt_len: usize, opts: &DecodeOptions) -> usize {
        opts.max_new_tokens.min(self.model.config.max_len.saturating_sub(prompt_len))
    }

    pub fn greedy(&self, prompt: &[usize], opts: &DecodeOptions) -> Result<Hypothesis> {
        let budget = self.budget(prompt.len(), opts);
        let mut seq = prompt.to_vec();
        let mut hyp = Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
        };
        while hyp.tokens.len() < budget && !hyp.finished() {
            let lp = self.next_log_probs(&seq)?;
            let (id, p) = best_tokens(&lp, 1, hyp.tokens.len() >= opts.min_words)[0];
            hyp.tokens.push(id);
            hyp.log_prob += p;
            seq.push(id);
        }
        Ok(hyp)
    }

    /// Beam search ranked by mean log-probability. The greedy hypothesis
    /// competes in the final ranking, so the result never scores below it.
    pub fn beam(&self, prompt: &[usize], opts: &DecodeOptions) -> Result<Hypothesis> {
        opts.validate()?;
        let budget = self.budget(prompt.len(), opts);
        let width = opts.beam_width;
        let mut beams = vec![Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
        }];
        for _ in 0..budget {
            if beams.iter().all(Hypothesis::finished) {
                break;
            }
            let mut candidates = Vec::new();
            for h in &beams {
                if h.finished() {
                    candidates.push(h.clone());
                    continue;
                }
                let mut seq = prompt.to_vec();
                seq.extend(&h.tokens);
                let lp = self.next_log_probs(&seq)?;
                for (id, p) in best_tokens(&lp, width, h.tokens.len() >= opts.min_words) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(id);
                    candidates.push(Hypothesis {
                        tokens,
                        log_prob: h.log_prob + p,
                    });
                }
            }
            candidates.sort_by(Hypothesis::rank);
            candidates.truncate(width);
            beams = candidates;
        }
        beams.push(self.greedy(prompt, opts)?);
        beams.sort_by(Hypothesis::rank);
        Ok(beams.swap_remove(0))
    }

    pub fn decode(&self, prompt: &[usize], opts: &DecodeOptions) -> Result<Hypothesis> {
        opts.validate()?;
        match opts.strategy {
            Strategy::Greedy => self.greedy(prompt, opts),
            Strategy::Beam => self.beam(prompt, opts),
        }
    }
}

/// The `k` most probable generatable tokens, ties to the lower id.
fn best_tokens(lp: &[f64], k: usize, allow_eos: bool) -> Vec<(usize, f64)> {
    let mut ids: Vec<(usize, f64)> = lp
        .iter()
        .copied()
        .enumerate()
        .filter(|&(i, _)| generatable(i) && (allow_eos || i != EOS))
        .collect();
    ids.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    ids.truncate(k);
    ids
}

/// Caption token ids (without role or [EOS]) for an image.
pub fn caption_ids(image: &Image, ckpt: &Checkpoint, opts: &DecodeOptions) -> Result<Hypothesis> {
    let decoder = Decoder::new(&ckpt.model, image)?;
    decoder.decode(&[Role::Decode.token()], opts)
}

pub fn caption_image(image: &Image, ckpt: &Checkpoint, opts: &DecodeOptions) -> Result<String> {
    let hyp = caption_ids(image, ckpt, opts)?;
    Ok(ckpt.vocab.detokenize(hyp.words()))
}

/// `[DEC] question [SEP]`, checked against the model's limits.
pub fn question_prompt(question: &str, ckpt: &Checkpoint) -> Result<Vec<usize>> {
    let max = ckpt.config().max_len.saturating_sub(2);
    let q = ckpt.vocab.tokenize(question, max)?;
    if q.is_empty() {
        return Err(InferenceError::EmptyQuestion);
    }
    let mut prompt = TokenSequence::with_role(Role::Decode, &q.ids).ids;
    prompt.push(SEP);
    Ok(prompt)
}

/// Answers are at least one word long whatever `opts.min_words` says.
pub fn answer_question(image: &Image, question: &str, ckpt: &Checkpoint, opts: &DecodeOptions) -> Result<String> {
    let prompt = question_prompt(question, ckpt)?;
    let decoder = Decoder::new(&ckpt.model, image)?;
    let opts = DecodeOptions {
        min_words: opts.min_words.max(1),
        ..*opts
    };
    let hyp = decoder.decode(&prompt, &opts)?;
    Ok(ckpt.vocab.detokenize(hyp.words()))
}

/// Probability from a binary-head logit; `≥ 0.5` reads as true.
pub fn confidence_from_logit(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

/// Logit of a binary head on the fused [ENC] row of `(image, text)`.
pub fn binary_head_logit(image: &Image, text: &str, ckpt: &Checkpoint, head: &str) -> Result<f32> {
    let max = ckpt.config().max_len.saturating_sub(1);
    let ids = ckpt.vocab.tokenize(text, max)?;
    let seq = TokenSequence::with_role(Role::Encode, &ids.ids);
    let states = ckpt.model.encode_image(image)?;
    let fused = ckpt.model.encode_multimodal(&seq, Some(&states))?;
    let params = &ckpt.model.params;
    let w = params
        .get(&format!("{head}.weight"))
        .ok_or_else(|| ModelError::MissingParam(format!("{head}.weight")))?;
    let b = params
        .get(&format!("{head}.bias"))
        .ok_or_else(|| ModelError::MissingParam(format!("{head}.bias")))?;
    let dot: f32 = fused.row(0).iter().zip(w.data()).map(|(a, b)| a * b).sum();
    Ok(dot + b.data()[0])
}

/// Statement truth and confidence from the fine-tuned statement head.
pub fn verify_statement(image: &Image, statement: &str, ckpt: &Checkpoint) -> Result<(bool, f64)> {
    if !ckpt.statement_head_trained {
        return Err(InferenceError::MissingHead);
    }
    let conf = confidence_from_logit(binary_head_logit(image, statement, ckpt, "statement_head")? as f64);
    Ok((conf >= 0.5, conf))
}

/// Probability that `text` describes `image`, from the ITM head.
pub fn match_probability(image: &Image, text: &str, ckpt: &Checkpoint) -> Result<f64> {
    Ok(confidence_from_logit(binary_head_logit(image, text, ckpt, "itm_head")? as f64))
}

fn project(row: &[f32], ckpt: &Checkpoint, head: &str) -> Vec<f32> {
    let w = ckpt.model.params.get(&format!("{head}.weight")).expect("layout has ITC heads");
    let b = ckpt.model.params.get(&format!("{head}.bias")).expect("layout has ITC heads");
    let out = w.cols();
    let mut p = b.data().to_vec();
    for (i, &x) in row.iter().enumerate() {
        for (o, &wv) in p.iter_mut().zip(&w.data()[i * out..(i + 1) * out]) {
            *o += x * wv;
        }
    }
    let norm = p.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
    p.iter().map(|v| v / norm).collect()
}

/// Unit-norm ITC embedding of an image.
pub fn image_embedding(image: &Image, ckpt: &Checkpoint) -> Result<Vec<f32>> {
    let states = ckpt.model.encode_image(image)?;
    Ok(project(states.row(0), ckpt, "itc.image_proj"))
}

/// Unit-norm ITC embedding of a text.
pub fn text_embedding(text: &str, ckpt: &Checkpoint) -> Result<Vec<f32>> {
    let max = ckpt.config().max_len.saturating_sub(1);
    let ids = ckpt.vocab.tokenize(text, max)?;
    let states = ckpt.model.encode_text(&TokenSequence::with_role(Role::Cls, &ids.ids))?;
    Ok(project(states.row(0), ckpt, "itc.text_proj"))
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f32>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f32>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Index of the candidate most cosine-similar to `query`, ties to the
/// lowest index.
pub fn best_match(query: &[f32], candidates: &[Vec<f32>]) -> Result<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = cosine(query, c);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or(InferenceError::EmptyCandidates)
}

pub fn retrieve_best_match(text: &str, images: &[Image], ckpt: &Checkpoint) -> Result<usize> {
    if images.is_empty() {
        return Err(InferenceError::EmptyCandidates);
    }
    let q = text_embedding(text, ckpt)?;
    let embs = images
        .iter()
        .map(|img| image_embedding(img, ckpt))
        .collect::<Result<Vec<_>>>()?;
    best_match(&q, &embs)
}
