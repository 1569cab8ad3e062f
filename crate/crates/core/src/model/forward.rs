//! Batched forward passes on a [`Tape`].
//!
//! Activations are matrices of `batch · len` rows. Text batches are right
//! padded; padded keys are masked out of every attention so each real row
//! only sees its own sequence.

use std::collections::BTreeMap;

use super::{Image, MedConfig, MedParams, ModelError, Result, Stack, TokenBatch, LAYER_NORM_EPS};
use crate::tensor::{AttentionShape, NodeId, Scalar, Tape};

/// Parameters registered on a tape, by name.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    /// Registers every parameter; those accepted by `trainable` track gradients.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &MedParams, trainable: impl Fn(&str) -> bool) -> Self {
        let ids = params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.cast::<T>(), trainable(name))))
            .collect();
        Self { ids }
    }

    /// Wraps leaves the caller registered itself, e.g. parameters held in a
    /// wider precision than [`MedParams`] stores.
    pub fn from_ids(ids: BTreeMap<String, NodeId>) -> Self {
        Self { ids }
    }

    pub fn constant<T: Scalar>(tape: &mut Tape<T>, params: &MedParams) -> Self {
        Self::bind(tape, params, |_| false)
    }

    pub fn get(&self, name: &str) -> NodeId {
        match self.ids.get(name) {
            Some(&id) => id,
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, NodeId)> {
        self.ids.iter().map(|(n, &id)| (n, id))
    }
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, b: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let y = tape.matmul(x, b.get(&format!("{prefix}.weight")))?;
    Ok(tape.add_row(y, b.get(&format!("{prefix}.bias")))?)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, b: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let g = b.get(&format!("{prefix}.gamma"));
    let beta = b.get(&format!("{prefix}.beta"));
    Ok(tape.layer_norm(x, g, beta, LAYER_NORM_EPS)?)
}

/// Keys and values for an attention layer. `gather` re-indexes the projected
/// rows (used to pair text items with their images after projecting each
/// image only once).
#[derive(Clone, Copy)]
pub struct KeySource<'a> {
    pub states: NodeId,
    pub gather: Option<&'a [usize]>,
}

/// Multi-head attention with input and output projections under `prefix`.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    prefix: &str,
    queries: NodeId,
    keys: KeySource<'_>,
    shape: AttentionShape,
    mask: &[bool],
) -> Result<NodeId> {
    let q = linear(tape, b, &format!("{prefix}.q"), queries)?;
    let mut k = linear(tape, b, &format!("{prefix}.k"), keys.states)?;
    let mut v = linear(tape, b, &format!("{prefix}.v"), keys.states)?;
    if let Some(idx) = keys.gather {
        k = tape.gather_rows(k, idx)?;
        v = tape.gather_rows(v, idx)?;
    }
    let a = tape.attention(q, k, v, shape, mask)?;
    linear(tape, b, &format!("{prefix}.o"), a)
}

/// Cross-attention input for grounded stacks.
struct Cross<'a> {
    keys: KeySource<'a>,
    len_k: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_stack<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &MedConfig,
    stack: Stack,
    mut x: NodeId,
    batch: usize,
    len: usize,
    self_mask: &[bool],
    cross: Option<Cross<'_>>,
) -> Result<NodeId> {
    let name = stack.name();
    let self_shape = AttentionShape {
        batch,
        heads: cfg.n_heads,
        len_q: len,
        len_k: len,
    };
    for l in 0..cfg.n_layers {
        let p = format!("{name}.layers.{l}");
        let h = norm(tape, b, &format!("{p}.ln_self"), x)?;
        let keys = KeySource { states: h, gather: None };
        let a = attention(tape, b, &format!("{p}.self_attn"), h, keys, self_shape, self_mask)?;
        x = tape.add(x, a)?;
        if let Some(cross) = &cross {
            let h = norm(tape, b, &format!("{p}.ln_cross"), x)?;
            let shape = AttentionShape {
                len_k: cross.len_k,
                ..self_shape
            };
            let all = vec![true; len * cross.len_k];
            let a = attention(tape, b, &format!("{p}.cross_attn"), h, cross.keys, shape, &all)?;
            x = tape.add(x, a)?;
        }
        let h = norm(tape, b, &format!("{p}.ln_ffn"), x)?;
        let h = linear(tape, b, &format!("{p}.ffn.fc1"), h)?;
        let h = tape.gelu(h)?;
        let h = linear(tape, b, &format!("{p}.ffn.fc2"), h)?;
        x = tape.add(x, h)?;
    }
    norm(tape, b, &format!("{name}.ln_final"), x)
}

/// Self-attention visibility: key inside the sequence, and not in the future
/// when `causal`.
pub fn text_mask(batch: &TokenBatch, causal: bool) -> Vec<bool> {
    let l = batch.len;
    let mut mask = Vec::with_capacity(batch.batch() * l * l);
    for &n in &batch.lens {
        for i in 0..l {
            for j in 0..l {
                mask.push(j < n && (!causal || j <= i));
            }
        }
    }
    mask
}

/// Image encoder over a batch; returns `batch · (n_patches + 1)` rows.
pub fn image_states<T: Scalar>(tape: &mut Tape<T>, b: &Bound, cfg: &MedConfig, images: &[&Image]) -> Result<NodeId> {
    let s = cfg.image_size;
    let np = cfg.n_patches();
    let rows = cfg.image_rows();
    let mut patches = Vec::with_capacity(images.len() * np * cfg.patch_dim());
    for img in images {
        if img.width != s || img.height != s || img.data.len() != s * s * 3 {
            return Err(ModelError::BadImageShape {
                expected: s,
                width: img.width,
                height: img.height,
            });
        }
        patches.extend(img.patches(cfg.patch_size).into_iter().map(|v| T::from_f64(v as f64)));
    }
    let n = images.len();
    let patches = tape.constant(crate::tensor::Tensor::new(vec![n * np, cfg.patch_dim()], patches)?);
    let emb = linear(tape, b, "image.patch", patches)?;
    let all = tape.concat_rows(b.get("image.cls"), emb)?;
    let mut order = Vec::with_capacity(n * rows);
    let mut pos = Vec::with_capacity(n * rows);
    for i in 0..n {
        order.push(0);
        order.extend((0..np).map(|p| 1 + i * np + p));
        pos.extend(0..rows);
    }
    let x = tape.gather_rows(all, &order)?;
    let pe = tape.gather_rows(b.get("image.pos"), &pos)?;
    let x = tape.add(x, pe)?;
    let mask = vec![true; rows * rows];
    run_stack(tape, b, cfg, Stack::ImageEncoder, x, n, rows, &mask, None)
}

fn embed_tokens<T: Scalar>(tape: &mut Tape<T>, b: &Bound, cfg: &MedConfig, batch: &TokenBatch) -> Result<NodeId> {
    if batch.len > cfg.max_len {
        return Err(ModelError::TooLong {
            len: batch.len,
            max: cfg.max_len,
        });
    }
    if let Some(&bad) = batch.ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::UnknownToken(bad));
    }
    let tok = tape.gather_rows(b.get("text.token_embedding"), &batch.ids)?;
    let positions: Vec<usize> = (0..batch.batch()).flat_map(|_| 0..batch.len).collect();
    let pe = tape.gather_rows(b.get("text.pos"), &positions)?;
    Ok(tape.add(tok, pe)?)
}

fn image_gather(cfg: &MedConfig, image_index: &[usize]) -> Vec<usize> {
    let rows = cfg.image_rows();
    image_index.iter().flat_map(|&i| i * rows..(i + 1) * rows).collect()
}

/// Unimodal text encoder over a [CLS]-led batch.
pub fn text_states<T: Scalar>(tape: &mut Tape<T>, b: &Bound, cfg: &MedConfig, batch: &TokenBatch) -> Result<NodeId> {
    let x = embed_tokens(tape, b, cfg, batch)?;
    let mask = text_mask(batch, false);
    run_stack(tape, b, cfg, Stack::TextEncoder, x, batch.batch(), batch.len, &mask, None)
}

/// Image-grounded text encoder. Item `i` of `batch` attends to image
/// `image_index[i]` of `image_states`.
pub fn grounded_states<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &MedConfig,
    batch: &TokenBatch,
    image_states: NodeId,
    image_index: &[usize],
) -> Result<NodeId> {
    grounded(tape, b, cfg, Stack::GroundedEncoder, batch, image_states, image_index)
}

/// Image-grounded causal decoder followed by the language-model head;
/// returns `batch · len × vocab_size` logits.
pub fn decoder_logits<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &MedConfig,
    batch: &TokenBatch,
    image_states: NodeId,
    image_index: &[usize],
) -> Result<NodeId> {
    let h = grounded(tape, b, cfg, Stack::Decoder, batch, image_states, image_index)?;
    linear(tape, b, "decoder.lm_head", h)
}

fn grounded<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &MedConfig,
    stack: Stack,
    batch: &TokenBatch,
    image_states: NodeId,
    image_index: &[usize],
) -> Result<NodeId> {
    if image_index.len() != batch.batch() {
        return Err(ModelError::Config(format!(
            "{} items but {} image indices",
            batch.batch(),
            image_index.len()
        )));
    }
    let available = tape.value(image_states).rows() / cfg.image_rows();
    if image_index.iter().any(|&i| i >= available) {
        return Err(ModelError::MissingImage);
    }
    let x = embed_tokens(tape, b, cfg, batch)?;
    let mask = text_mask(batch, stack.is_causal());
    let gather = image_gather(cfg, image_index);
    let cross = Cross {
        keys: KeySource {
            states: image_states,
            gather: Some(&gather),
        },
        len_k: cfg.image_rows(),
    };
    run_stack(tape, b, cfg, stack, x, batch.batch(), batch.len, &mask, Some(cross))
}

/// Row 0 of every item (the role-token position).
pub fn first_rows<T: Scalar>(tape: &mut Tape<T>, states: NodeId, batch: usize, len: usize) -> Result<NodeId> {
    let idx: Vec<usize> = (0..batch).map(|i| i * len).collect();
    Ok(tape.gather_rows(states, &idx)?)
}

/// L2-normalized ITC embeddings of the image [CLS] rows.
pub fn image_embeddings<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    cfg: &MedConfig,
    image_states: NodeId,
    n_images: usize,
) -> Result<NodeId> {
    let cls = first_rows(tape, image_states, n_images, cfg.image_rows())?;
    let p = linear(tape, b, "itc.image_proj", cls)?;
    Ok(tape.l2_normalize_rows(p)?)
}

/// L2-normalized ITC embeddings of the text [CLS] rows.
pub fn text_embeddings<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    text_states: NodeId,
    batch: &TokenBatch,
) -> Result<NodeId> {
    let cls = first_rows(tape, text_states, batch.batch(), batch.len)?;
    let p = linear(tape, b, "itc.text_proj", cls)?;
    Ok(tape.l2_normalize_rows(p)?)
}

/// One logit per item from a binary head (`itm_head` or `statement_head`)
/// applied to the fused [ENC] rows.
pub fn binary_head<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    head: &str,
    fused_states: NodeId,
    batch: &TokenBatch,
) -> Result<NodeId> {
    let rows = first_rows(tape, fused_states, batch.batch(), batch.len)?;
    linear(tape, b, head, rows)
}
