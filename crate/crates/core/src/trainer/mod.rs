//! Staged training: pretraining on ITC + ITM + LM, per-task fine-tuning,
//! and distillation into a smaller student, plus checkpoints and evaluation.

mod checkpoint;
mod eval;
mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::forward::{self, Bound};
use crate::model::{Image, Med, MedConfig, ModelError, Role, TokenBatch, TokenSequence, EOS, SEP};
use crate::objectives::{self, LossWeights, ObjectiveError};
use crate::scenegen::{evaluate_statement, Corpus, SceneError, Vocabulary};
use crate::tensor::{Tape, Tensor, TensorError};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION,
    MAGIC,
};
pub use eval::{evaluate, evaluate_checkpoint, CheckpointPredictor, EvalError, Metric, Metrics, Predictor};
pub use optim::{adamw_step, adamw_step_scaled, decays, AdamState, AdamWConfig};

/// Temperature bounds enforced after every update.
pub const TEMPERATURE_RANGE: (f32, f32) = (0.01, 1.0);

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("corpus not found or unreadable: {0}")]
    MissingCorpus(String),
    #[error("stage {0} needs an input checkpoint")]
    MissingCheckpoint(Stage),
    #[error("distillation needs a teacher checkpoint: {0}")]
    MissingTeacher(String),
    #[error("training aborted: {0}")]
    NonFinite(String),
    #[error("gradient for unknown parameter {0}")]
    UnknownParam(String),
    #[error("no training examples for stage {0}")]
    NoExamples(Stage),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        ObjectiveError::from(e).into()
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(op) => TrainError::NonFinite(format!("{op} produced a non-finite value")),
            other => ObjectiveError::from(other).into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    FinetuneCaption,
    FinetuneVqa,
    FinetuneNlvr,
    Distill,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Pretrain,
        Stage::FinetuneCaption,
        Stage::FinetuneVqa,
        Stage::FinetuneNlvr,
        Stage::Distill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::FinetuneCaption => "finetune-caption",
            Stage::FinetuneVqa => "finetune-vqa",
            Stage::FinetuneNlvr => "finetune-nlvr",
            Stage::Distill => "distill",
        }
    }

    /// Whether a stage updates `param`. Fine-tuning stages touch only the
    /// stack they need, so fine-tunes can be chained without undoing each
    /// other.
    pub fn trains(self, param: &str) -> bool {
        match self {
            Stage::Pretrain => !param.starts_with("statement_head"),
            Stage::FinetuneCaption | Stage::FinetuneVqa => param.starts_with("decoder."),
            Stage::FinetuneNlvr => param.starts_with("grounded_encoder.") || param.starts_with("statement_head"),
            Stage::Distill => {
                param.starts_with("image")
                    || param.starts_with("text.")
                    || param.starts_with("decoder.")
            }
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown stage {s:?}")))
    }
}

fn default_batch_size() -> usize {
    16
}
fn default_lr() -> f64 {
    3e-4
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_kd_temperature() -> f64 {
    2.0
}

/// Learning-rate schedule after warm-up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` towards 0 over the remaining steps.
    Cosine,
}

/// A training run. Deserializes from TOML; omitted fields take the defaults
/// below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Learning-rate multipliers keyed by parameter-name prefix; the
    /// longest matching prefix wins, unmatched parameters use 1.
    #[serde(default)]
    pub lr_scale: BTreeMap<String, f64>,
    /// Rescales the gradient so its global L2 norm is at most this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub schedule: Schedule,
    /// Linear warm-up length in steps, counted from the start of the run.
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    /// Corpus directory written by `build_corpus`.
    pub corpus: PathBuf,
    /// Starting checkpoint; required for fine-tuning. For pretraining and
    /// distillation a fresh model is built from `model` when absent.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// Teacher for distillation.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    pub output_checkpoint: PathBuf,
    /// JSON-lines metric log; skipped when absent.
    #[serde(default)]
    pub metrics_log: Option<PathBuf>,
    /// Architecture of a freshly initialized model (student, for
    /// distillation). `vocab_size` is taken from the corpus.
    #[serde(default)]
    pub model: Option<MedConfig>,
    #[serde(default = "default_kd_temperature")]
    pub kd_temperature: f64,
}

impl TrainConfig {
    pub fn new(stage: Stage, steps: usize, corpus: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            stage,
            steps,
            batch_size: default_batch_size(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            betas: default_betas(),
            eps: default_eps(),
            lr_scale: BTreeMap::new(),
            grad_clip: None,
            schedule: Schedule::Constant,
            warmup_steps: 0,
            loss_weights: LossWeights::default(),
            seed: 0,
            corpus: corpus.into(),
            init_checkpoint: None,
            teacher: None,
            output_checkpoint: output.into(),
            metrics_log: None,
            model: None,
            kd_temperature: default_kd_temperature(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.stage == Stage::Pretrain && self.batch_size < 2 {
            return fail("pretraining needs batch_size >= 2 for in-batch ITM negatives".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if let Some((p, f)) = self.lr_scale.iter().find(|(_, f)| !(**f >= 0.0 && f.is_finite())) {
            return fail(format!("lr_scale for {p:?} must be finite and non-negative, got {f}"));
        }
        if let Some(c) = self.grad_clip.filter(|c| !(*c > 0.0 && c.is_finite())) {
            return fail(format!("grad_clip must be positive, got {c}"));
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return fail(format!("kd_temperature must be positive, got {}", self.kd_temperature));
        }
        Ok(())
    }

    /// Learning-rate multiplier for the `i`-th step (0-based) of this run.
    pub fn lr_factor(&self, i: usize) -> f64 {
        if i < self.warmup_steps {
            return (i + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = (i - self.warmup_steps) as f64 / span;
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// Multiplier applied to the learning rate of `param`.
    pub fn lr_scale_for(&self, param: &str) -> f64 {
        self.lr_scale
            .iter()
            .filter(|(prefix, _)| param.starts_with(prefix.as_str()))
            .max_by_key(|(prefix, _)| prefix.len())
            .map_or(1.0, |(_, f)| *f)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
        }
    }
}

/// One line of the metric log. Losses a stage does not optimize are 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub itc: f64,
    pub itm: f64,
    pub lm: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nlvr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
}

impl StepMetrics {
    fn total_only(step: u64, total: f64) -> Self {
        Self {
            step,
            itc: 0.0,
            itm: 0.0,
            lm: 0.0,
            total,
            nlvr: None,
            kd: None,
            temperature: None,
        }
    }
}

/// Seeded epoch-wise shuffling of example indices.
struct Batcher {
    rng: ChaCha8Rng,
    n: usize,
    batch: usize,
    drop_last: bool,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize, drop_last: bool, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            batch: batch.min(n),
            drop_last,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch) {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

fn encode_words(vocab: &Vocabulary, text: &str, max_len: usize) -> Result<Vec<usize>> {
    vocab
        .tokenize(text, max_len)
        .map(|t| t.ids)
        .map_err(|e: SceneError| TrainError::Config(format!("corpus text {text:?}: {e}")))
}

/// `[DEC] question [SEP] answer [EOS]`.
pub fn vqa_sequence(question: &[usize], answer: &[usize]) -> TokenSequence {
    let mut seq = TokenSequence::with_role(Role::Decode, question);
    seq.ids.push(SEP);
    seq.ids.extend_from_slice(answer);
    seq.ids.push(EOS);
    seq
}

/// Gradients of `loss` for every trainable parameter, keyed by name.
fn named_grads(tape: &Tape, bound: &Bound, loss: crate::tensor::NodeId) -> Result<BTreeMap<String, Tensor>> {
    let grads = tape.backward(loss)?;
    Ok(bound
        .iter()
        .filter_map(|(name, id)| grads.get(id).map(|g| (name.clone(), g.clone())))
        .collect())
}

/// Scales every gradient by `max_norm / ‖g‖` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

fn clamp_temperature(model: &mut Med) {
    if let Some(t) = model.params.get_mut("itc.temperature") {
        for v in t.data_mut() {
            *v = v.clamp(TEMPERATURE_RANGE.0, TEMPERATURE_RANGE.1);
        }
    }
}

fn scalar(tape: &Tape, id: crate::tensor::NodeId) -> f64 {
    tape.value(id).data()[0] as f64
}

fn check_finite(step: u64, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite(format!("loss is {value} at step {step}")))
    }
}

/// Trains in memory. `init` is the starting checkpoint (required for
/// fine-tuning); `teacher` is required for distillation. Returns the final
/// checkpoint and one metric record per step.
pub fn train_with(
    config: &TrainConfig,
    corpus: &Corpus,
    init: Option<Checkpoint>,
    teacher: Option<&Checkpoint>,
) -> Result<(Checkpoint, Vec<StepMetrics>)> {
    config.validate()?;
    let stage = config.stage;
    let vocab = corpus.vocab.clone();
    let mut ckpt = match (stage, init) {
        (_, Some(c)) => c,
        (Stage::Pretrain | Stage::Distill, None) => {
            let mut mc = config.model.clone().unwrap_or_default();
            mc.vocab_size = vocab.len();
            Checkpoint::new(Med::new(mc)?, vocab.clone())
        }
        (s, None) => return Err(TrainError::MissingCheckpoint(s)),
    };
    if ckpt.model.config.vocab_size != vocab.len() {
        return Err(TrainError::Config(format!(
            "model vocabulary ({}) does not match the corpus ({})",
            ckpt.model.config.vocab_size,
            vocab.len()
        )));
    }
    let teacher = match (stage, teacher) {
        (Stage::Distill, None) => return Err(TrainError::MissingTeacher("no teacher checkpoint given".into())),
        (Stage::Distill, Some(t)) if t.model.config.vocab_size != vocab.len() => {
            return Err(TrainError::MissingTeacher("teacher vocabulary does not match the corpus".into()))
        }
        (_, t) => t,
    };
    // Moments belong to one stage's parameter set; each stage starts fresh.
    ckpt.optimizer = AdamState::default();
    ckpt.corpus_fingerprint = corpus.fingerprint.clone();

    let max_len = ckpt.model.config.max_len;
    let opt = config.optimizer();
    let train = &corpus.train;
    if train.is_empty() {
        return Err(TrainError::NoExamples(stage));
    }
    let captions: Vec<Vec<usize>> = train
        .iter()
        .map(|e| encode_words(&vocab, &e.record.caption, max_len.saturating_sub(2)))
        .collect::<Result<_>>()?;
    let images: Vec<&Image> = train.iter().map(|e| &e.image).collect();

    // (scene, sequence or statement, label)
    let mut items: Vec<(usize, TokenSequence, bool)> = Vec::new();
    match stage {
        Stage::Pretrain | Stage::FinetuneCaption | Stage::Distill => {
            for (i, c) in captions.iter().enumerate() {
                items.push((i, objectives::caption_target(c), true));
            }
        }
        Stage::FinetuneVqa => {
            for (i, e) in train.iter().enumerate() {
                for qa in &e.record.qa {
                    let q = encode_words(&vocab, &qa.q, max_len)?;
                    let a = encode_words(&vocab, &qa.a, max_len)?;
                    let seq = vqa_sequence(&q, &a);
                    if seq.len() > max_len {
                        return Err(TrainError::Config(format!("VQA sequence for {:?} exceeds max_len", qa.q)));
                    }
                    items.push((i, seq, true));
                }
            }
        }
        Stage::FinetuneNlvr => {
            for (i, e) in train.iter().enumerate() {
                for st in &e.record.statements {
                    let words = encode_words(&vocab, &st.text, max_len.saturating_sub(1))?;
                    items.push((i, TokenSequence::with_role(Role::Encode, &words), st.truth));
                }
            }
        }
    }
    if items.is_empty() {
        return Err(TrainError::NoExamples(stage));
    }
    let drop_last = stage == Stage::Pretrain;
    let mut batcher = Batcher::new(items.len(), config.batch_size, drop_last, config.seed);
    let mut log = Vec::with_capacity(config.steps);

    for i in 0..config.steps {
        let step = ckpt.step + 1;
        let opt = AdamWConfig {
            lr: config.lr * config.lr_factor(i),
            ..opt
        };
        let idx = batcher.next_batch();
        let mut tape = Tape::<f32>::new();
        let bound = Bound::bind(&mut tape, &ckpt.model.params, |n| stage.trains(n));
        let cfg = &ckpt.model.config;

        // Distinct scenes in the batch, in first-seen order.
        let mut scene_of = Vec::with_capacity(idx.len());
        let mut scenes: Vec<usize> = Vec::new();
        for &k in &idx {
            let s = items[k].0;
            let pos = scenes.iter().position(|&x| x == s).unwrap_or_else(|| {
                scenes.push(s);
                scenes.len() - 1
            });
            scene_of.push(pos);
        }
        let batch_images: Vec<&Image> = scenes.iter().map(|&s| images[s]).collect();

        let (loss, mut metrics) = match stage {
            Stage::Pretrain => {
                let caps: Vec<Vec<usize>> = idx.iter().map(|&k| captions[items[k].0].clone()).collect();
                let imgs: Vec<&Image> = idx.iter().map(|&k| images[items[k].0]).collect();
                let describes = |i: usize, j: usize| {
                    let (img, txt) = (&train[items[idx[i]].0].record, &train[items[idx[j]].0].record);
                    evaluate_statement(&img.spec(), &txt.caption) == Some(true)
                };
                let l = objectives::pretrain_losses(&mut tape, &bound, cfg, &imgs, &caps, config.loss_weights, &describes)?;
                let m = StepMetrics {
                    step,
                    itc: scalar(&tape, l.itc),
                    itm: scalar(&tape, l.itm),
                    lm: scalar(&tape, l.lm),
                    total: scalar(&tape, l.total),
                    nlvr: None,
                    kd: None,
                    temperature: None,
                };
                (l.total, m)
            }
            Stage::FinetuneCaption | Stage::FinetuneVqa => {
                let seqs: Vec<&TokenSequence> = idx.iter().map(|&k| &items[k].1).collect();
                let batch = TokenBatch::from_sequences(&seqs);
                let states = forward::image_states(&mut tape, &bound, cfg, &batch_images)?;
                let logits = forward::decoder_logits(&mut tape, &bound, cfg, &batch, states, &scene_of)?;
                let lm = objectives::lm_loss(&mut tape, logits, &batch)?;
                let v = scalar(&tape, lm);
                let mut m = StepMetrics::total_only(step, v);
                m.lm = v;
                (lm, m)
            }
            Stage::FinetuneNlvr => {
                let seqs: Vec<&TokenSequence> = idx.iter().map(|&k| &items[k].1).collect();
                let labels: Vec<bool> = idx.iter().map(|&k| items[k].2).collect();
                let batch = TokenBatch::from_sequences(&seqs);
                let states = forward::image_states(&mut tape, &bound, cfg, &batch_images)?;
                let fused = forward::grounded_states(&mut tape, &bound, cfg, &batch, states, &scene_of)?;
                let rows = forward::first_rows(&mut tape, fused, batch.batch(), batch.len)?;
                let loss = objectives::binary_head_loss(&mut tape, &bound, "statement_head", rows, &labels)?;
                let v = scalar(&tape, loss);
                let mut m = StepMetrics::total_only(step, v);
                m.nlvr = Some(v);
                (loss, m)
            }
            Stage::Distill => {
                let teacher = teacher.expect("checked above");
                let seqs: Vec<&TokenSequence> = idx.iter().map(|&k| &items[k].1).collect();
                let batch = TokenBatch::from_sequences(&seqs);
                let teacher_logits = teacher_logits(teacher, &batch_images, &batch, &scene_of)?;
                let states = forward::image_states(&mut tape, &bound, cfg, &batch_images)?;
                let logits = forward::decoder_logits(&mut tape, &bound, cfg, &batch, states, &scene_of)?;
                // Only rows that predict a real token carry signal.
                let live: Vec<usize> = (0..batch.batch())
                    .flat_map(|b| (0..batch.lens[b] - 1).map(move |t| b * batch.len + t))
                    .collect();
                let student = tape.gather_rows(logits, &live)?;
                let teacher_rows = Tensor::new(
                    vec![live.len(), teacher_logits.cols()],
                    live.iter().flat_map(|&r| teacher_logits.row(r).iter().copied()).collect(),
                )?;
                let teacher_node = tape.constant(teacher_rows);
                let kd = objectives::kd_loss(&mut tape, student, teacher_node, config.kd_temperature)?;
                let v = scalar(&tape, kd);
                let mut m = StepMetrics::total_only(step, v);
                m.kd = Some(v);
                (kd, m)
            }
        };
        check_finite(step, metrics.total)?;
        let mut grads = named_grads(&tape, &bound, loss)?;
        drop(tape);
        if let Some(c) = config.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        adamw_step_scaled(&mut ckpt.model.params, &grads, &mut ckpt.optimizer, &opt, &|n| config.lr_scale_for(n))?;
        clamp_temperature(&mut ckpt.model);
        metrics.temperature = (stage == Stage::Pretrain).then(|| ckpt.model.params.temperature());
        ckpt.step = step;
        log.push(metrics);
    }
    if stage == Stage::FinetuneNlvr {
        ckpt.statement_head_trained = true;
    }
    Ok((ckpt, log))
}

/// Decoder logits of a frozen teacher, `batch·len × vocab`.
fn teacher_logits(teacher: &Checkpoint, images: &[&Image], batch: &TokenBatch, scene_of: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let bound = Bound::constant(&mut tape, &teacher.model.params);
    let cfg = &teacher.model.config;
    let states = forward::image_states(&mut tape, &bound, cfg, images)?;
    let logits = forward::decoder_logits(&mut tape, &bound, cfg, batch, states, scene_of)?;
    Ok(tape.value(logits).clone())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_metrics_log(path: &Path, log: &[StepMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    for m in log {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

/// File-level entry point: loads the corpus and checkpoints named in
/// `config`, trains, and writes the output checkpoint and metric log.
pub fn train(config: &TrainConfig) -> Result<(Checkpoint, Vec<StepMetrics>)> {
    config.validate()?;
    let corpus = Corpus::load(&config.corpus)
        .map_err(|e| TrainError::MissingCorpus(format!("{}: {e}", config.corpus.display())))?;
    let init = match &config.init_checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let teacher = match (&config.teacher, config.stage) {
        (Some(p), _) => Some(load_checkpoint(p).map_err(|e| TrainError::MissingTeacher(format!("{}: {e}", p.display())))?),
        (None, Stage::Distill) => return Err(TrainError::MissingTeacher("no teacher path configured".into())),
        (None, _) => None,
    };
    let (ckpt, log) = train_with(config, &corpus, init, teacher.as_ref())?;
    save_checkpoint(&ckpt, &config.output_checkpoint)?;
    if let Some(p) = &config.metrics_log {
        write_metrics_log(p, &log)?;
    }
    Ok((ckpt, log))
}
