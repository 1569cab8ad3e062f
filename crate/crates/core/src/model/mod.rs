//! Multimodal mixture of encoder-decoder (MED).
//!
//! One parameter set drives four transformer stacks:
//!
//! * `image_encoder`: vision transformer over 8×8 patches plus a [CLS] row;
//! * `text_encoder`: bidirectional text encoder, [CLS]-led, no image input;
//! * `grounded_encoder`: text encoder with cross-attention to image states
//!   between self-attention and feed-forward, [ENC]-led;
//! * `decoder`: like the grounded encoder but with causal self-attention,
//!   [DEC]-led, followed by a language-model head.
//!
//! Blocks are pre-layer-norm residual blocks. The grounded encoder and the
//! decoder share no weights.

pub mod forward;
mod image;
mod tokens;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

pub use image::Image;
pub use tokens::{
    is_role_token, Role, TokenBatch, TokenSequence, CLS, DEC, ENC, EOS, PAD, SEP, SPECIAL_TOKENS, UNK,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected a {expected}x{expected}x3 image, got {width}x{height}")]
    BadImageShape {
        expected: usize,
        width: usize,
        height: usize,
    },
    #[error("sequence must start with {expected}, found {found:?}")]
    MissingRoleToken {
        expected: &'static str,
        found: Option<usize>,
    },
    #[error("role token at position {0}; only the first position may hold one")]
    MisplacedRoleToken(usize),
    #[error("sequence length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(usize),
    #[error("image states are required for grounded text stacks")]
    MissingImage,
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Square input side length in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub proj_dim: usize,
    pub temperature_init: f32,
    pub seed: u64,
}

impl Default for MedConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ffn_dim: 256,
            vocab_size: crate::scenegen::Vocabulary::standard().len(),
            max_len: 24,
            image_size: 32,
            patch_size: 8,
            proj_dim: 32,
            temperature_init: 0.07,
            seed: 0,
        }
    }
}

impl MedConfig {
    /// Tiny configuration used by gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ffn_dim: 16,
            vocab_size,
            max_len: 24,
            image_size: 32,
            patch_size: 8,
            proj_dim: 4,
            temperature_init: 0.07,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be a positive multiple of n_heads");
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail("image_size must be divisible by patch_size");
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.proj_dim == 0 {
            return fail("n_layers, ffn_dim and proj_dim must be positive");
        }
        if self.vocab_size <= SPECIAL_TOKENS.len() {
            return fail("vocab_size must exceed the special tokens");
        }
        if self.max_len < 3 {
            return fail("max_len must be at least 3");
        }
        if !(self.temperature_init > 0.0) {
            return fail("temperature_init must be positive");
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Image rows per example: patches plus the [CLS] row.
    pub fn image_rows(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Every parameter name with its shape, in canonical (sorted) order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let linear = |push: &mut dyn FnMut(String, Vec<usize>), p: &str, i: usize, o: usize| {
            push(format!("{p}.weight"), vec![i, o]);
            push(format!("{p}.bias"), vec![o]);
        };
        let norm = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.gamma"), vec![d]);
            push(format!("{p}.beta"), vec![d]);
        };

        linear(&mut push, "image.patch", self.patch_dim(), d);
        push("image.cls".into(), vec![1, d]);
        push("image.pos".into(), vec![self.image_rows(), d]);
        push("text.token_embedding".into(), vec![self.vocab_size, d]);
        push("text.pos".into(), vec![self.max_len, d]);
        for stack in Stack::ALL {
            for l in 0..self.n_layers {
                let p = format!("{}.layers.{l}", stack.name());
                norm(&mut push, &format!("{p}.ln_self"));
                for proj in ["q", "k", "v", "o"] {
                    linear(&mut push, &format!("{p}.self_attn.{proj}"), d, d);
                }
                if stack.has_cross_attention() {
                    norm(&mut push, &format!("{p}.ln_cross"));
                    for proj in ["q", "k", "v", "o"] {
                        linear(&mut push, &format!("{p}.cross_attn.{proj}"), d, d);
                    }
                }
                norm(&mut push, &format!("{p}.ln_ffn"));
                linear(&mut push, &format!("{p}.ffn.fc1"), d, self.ffn_dim);
                linear(&mut push, &format!("{p}.ffn.fc2"), self.ffn_dim, d);
            }
            norm(&mut push, &format!("{}.ln_final", stack.name()));
        }
        linear(&mut push, "decoder.lm_head", d, self.vocab_size);
        linear(&mut push, "itc.image_proj", d, self.proj_dim);
        linear(&mut push, "itc.text_proj", d, self.proj_dim);
        push("itc.temperature".into(), vec![1]);
        linear(&mut push, "itm_head", d, 1);
        linear(&mut push, "statement_head", d, 1);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// The four transformer stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stack {
    ImageEncoder,
    TextEncoder,
    GroundedEncoder,
    Decoder,
}

impl Stack {
    pub const ALL: [Stack; 4] = [
        Stack::ImageEncoder,
        Stack::TextEncoder,
        Stack::GroundedEncoder,
        Stack::Decoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stack::ImageEncoder => "image_encoder",
            Stack::TextEncoder => "text_encoder",
            Stack::GroundedEncoder => "grounded_encoder",
            Stack::Decoder => "decoder",
        }
    }

    pub fn has_cross_attention(self) -> bool {
        matches!(self, Stack::GroundedEncoder | Stack::Decoder)
    }

    pub fn is_causal(self) -> bool {
        matches!(self, Stack::Decoder)
    }
}

/// Named parameters of every MED functionality.
#[derive(Clone, Debug, PartialEq)]
pub struct MedParams {
    tensors: BTreeMap<String, Tensor>,
}

impl MedParams {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm
    /// gains; the temperature starts at `temperature_init`.
    pub fn init(config: &MedConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name == "itc.temperature" {
                vec![config.temperature_init]
            } else if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors })
    }

    /// Builds from explicit tensors, checking names and shapes against `config`.
    pub fn from_tensors(config: &MedConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let layout = config.param_layout();
        if layout.len() != tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &layout {
            let t = tensors.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn temperature(&self) -> f32 {
        self.tensors["itc.temperature"].data()[0]
    }
}

/// A configured model: hyperparameters plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Med {
    pub config: MedConfig,
    pub params: MedParams,
}

impl Med {
    pub fn new(config: MedConfig) -> Result<Self> {
        let params = MedParams::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: MedConfig, params: MedParams) -> Result<Self> {
        config.validate()?;
        let params = MedParams::from_tensors(&config, params.tensors)?;
        Ok(Self { config, params })
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.image_size;
        if image.width != s || image.height != s || image.data.len() != s * s * 3 {
            return Err(ModelError::BadImageShape {
                expected: s,
                width: image.width,
                height: image.height,
            });
        }
        Ok(())
    }

    /// Validates a sequence about to drive the stack selected by `role`.
    pub fn check_tokens(&self, tokens: &TokenSequence, role: Role) -> Result<()> {
        let expected = SPECIAL_TOKENS[role.token()];
        match tokens.ids.first() {
            Some(&t) if t == role.token() => {}
            found => {
                return Err(ModelError::MissingRoleToken {
                    expected,
                    found: found.copied(),
                })
            }
        }
        if tokens.len() > self.config.max_len {
            return Err(ModelError::TooLong {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        for (i, &t) in tokens.ids.iter().enumerate().skip(1) {
            if is_role_token(t) {
                return Err(ModelError::MisplacedRoleToken(i));
            }
            if t >= self.config.vocab_size {
                return Err(ModelError::UnknownToken(t));
            }
        }
        Ok(())
    }

    /// Image states, `(n_patches + 1) × d_model`; row 0 is the image [CLS].
    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        self.check_image(image)?;
        let mut tape = Tape::<f32>::new();
        let bound = forward::Bound::constant(&mut tape, &self.params);
        let states = forward::image_states(&mut tape, &bound, &self.config, &[image])?;
        Ok(tape.value(states).clone())
    }

    /// Unimodal text states, `len × d_model`; row 0 is the [CLS] summary.
    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<Tensor> {
        self.check_tokens(tokens, Role::Cls)?;
        let mut tape = Tape::<f32>::new();
        let bound = forward::Bound::constant(&mut tape, &self.params);
        let batch = TokenBatch::from_sequences(&[tokens]);
        let states = forward::text_states(&mut tape, &bound, &self.config, &batch)?;
        Ok(tape.value(states).clone())
    }

    /// Image-grounded text states, `len × d_model`; row 0 is the fused
    /// image-text representation.
    pub fn encode_multimodal(&self, tokens: &TokenSequence, image_states: Option<&Tensor>) -> Result<Tensor> {
        self.check_tokens(tokens, Role::Encode)?;
        let image_states = self.check_image_states(image_states)?;
        let mut tape = Tape::<f32>::new();
        let bound = forward::Bound::constant(&mut tape, &self.params);
        let img = tape.constant(image_states.clone());
        let batch = TokenBatch::from_sequences(&[tokens]);
        let states = forward::grounded_states(&mut tape, &bound, &self.config, &batch, img, &[0])?;
        Ok(tape.value(states).clone())
    }

    /// Decoder logits, `len × vocab_size`; row `t` scores token `t + 1`.
    pub fn decode_step(&self, prefix: &TokenSequence, image_states: Option<&Tensor>) -> Result<Tensor> {
        self.check_tokens(prefix, Role::Decode)?;
        let image_states = self.check_image_states(image_states)?;
        let mut tape = Tape::<f32>::new();
        let bound = forward::Bound::constant(&mut tape, &self.params);
        let img = tape.constant(image_states.clone());
        let batch = TokenBatch::from_sequences(&[prefix]);
        let logits = forward::decoder_logits(&mut tape, &bound, &self.config, &batch, img, &[0])?;
        Ok(tape.value(logits).clone())
    }

    fn check_image_states<'a>(&self, states: Option<&'a Tensor>) -> Result<&'a Tensor> {
        let states = states.ok_or(ModelError::MissingImage)?;
        let expected = [self.config.image_rows(), self.config.d_model];
        if states.shape() != expected {
            return Err(TensorError::ShapeMismatch {
                op: "image states",
                left: states.shape().to_vec(),
                right: expected.to_vec(),
            }
            .into());
        }
        Ok(states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_layout() {
        let cfg = MedConfig::default();
        let params = MedParams::init(&cfg).unwrap();
        assert_eq!(params.count(), cfg.param_count());
        assert_eq!(params.len(), cfg.param_layout().len());
        let mut names: Vec<_> = cfg.param_layout().into_iter().map(|(n, _)| n).collect();
        names.dedup();
        assert_eq!(names.len(), params.len());
        assert!((params.temperature() - 0.07).abs() < 1e-7);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = MedConfig::default();
        assert_eq!(MedParams::init(&cfg).unwrap(), MedParams::init(&cfg).unwrap());
        let other = MedConfig { seed: 1, ..cfg.clone() };
        assert_ne!(MedParams::init(&cfg).unwrap(), MedParams::init(&other).unwrap());
    }

    #[test]
    fn config_validation() {
        let bad = MedConfig {
            n_heads: 3,
            ..MedConfig::default()
        };
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
        let bad = MedConfig {
            patch_size: 5,
            ..MedConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
