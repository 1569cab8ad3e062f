use newvision_core::model::forward::{self, Bound};
use newvision_core::model::{Image, Med, MedConfig, ModelError, Role, TokenBatch, TokenSequence, CLS, DEC, ENC};
use newvision_core::scenegen::{generate_scene, render_scene, Vocabulary};
use newvision_core::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> Med {
    Med::new(MedConfig::default()).unwrap()
}

fn words(v: &Vocabulary, text: &str) -> Vec<usize> {
    v.tokenize(text, 24).unwrap().ids
}

#[test]
fn encode_image_shape_and_sensitivity() {
    let m = model();
    let img = render_scene(&generate_scene(1));
    let states = m.encode_image(&img).unwrap();
    assert_eq!(states.shape(), &[17, 64]);

    // Change one patch only.
    let mut other = img.clone();
    for r in 0..8 {
        for c in 0..8 {
            other.set_pixel(r, c, [0.3, 0.6, 0.9]);
        }
    }
    let other_states = m.encode_image(&other).unwrap();
    assert_ne!(states.row(0), other_states.row(0));

    let bad = Image::filled(31, 32, [1.0; 3]);
    assert!(matches!(
        m.encode_image(&bad),
        Err(ModelError::BadImageShape { expected: 32, width: 31, height: 32 })
    ));
}

#[test]
fn encode_text_contract() {
    let m = model();
    let v = Vocabulary::standard();
    let cls = TokenSequence::new(vec![CLS]);
    assert_eq!(m.encode_text(&cls).unwrap().shape(), &[1, 64]);

    let a = TokenSequence::with_role(Role::Cls, &words(&v, "a red circle"));
    let b = TokenSequence::with_role(Role::Cls, &words(&v, "a circle red"));
    assert_ne!(m.encode_text(&a).unwrap().row(0), m.encode_text(&b).unwrap().row(0));

    let dec = TokenSequence::with_role(Role::Decode, &words(&v, "a red circle"));
    assert!(matches!(m.encode_text(&dec), Err(ModelError::MissingRoleToken { found: Some(DEC), .. })));
    let long = TokenSequence::with_role(Role::Cls, &vec![7; 30]);
    assert!(matches!(m.encode_text(&long), Err(ModelError::TooLong { len: 31, max: 24 })));
    let misplaced = TokenSequence::new(vec![CLS, 7, ENC]);
    assert!(matches!(m.encode_text(&misplaced), Err(ModelError::MisplacedRoleToken(2))));
}

#[test]
fn encode_multimodal_contract() {
    let m = model();
    let v = Vocabulary::standard();
    let text = TokenSequence::with_role(Role::Encode, &words(&v, "a large red circle"));
    let i1 = m.encode_image(&render_scene(&generate_scene(1))).unwrap();
    let i2 = m.encode_image(&render_scene(&generate_scene(2))).unwrap();
    let f1 = m.encode_multimodal(&text, Some(&i1)).unwrap();
    let f2 = m.encode_multimodal(&text, Some(&i2)).unwrap();
    assert_eq!(f1.shape(), &[5, 64]);
    assert_ne!(f1.row(0), f2.row(0));
    assert!(matches!(m.encode_multimodal(&text, None), Err(ModelError::MissingImage)));
    let cls = TokenSequence::with_role(Role::Cls, &[7]);
    assert!(matches!(m.encode_multimodal(&cls, Some(&i1)), Err(ModelError::MissingRoleToken { .. })));
}

#[test]
fn decode_step_contract() {
    let m = model();
    let v = Vocabulary::standard();
    let i1 = m.encode_image(&render_scene(&generate_scene(1))).unwrap();
    let i2 = m.encode_image(&render_scene(&generate_scene(2))).unwrap();
    let dec = TokenSequence::new(vec![DEC]);
    assert_eq!(m.decode_step(&dec, Some(&i1)).unwrap().shape(), &[1, v.len()]);

    let prefix = TokenSequence::with_role(Role::Decode, &words(&v, "a large"));
    let l1 = m.decode_step(&prefix, Some(&i1)).unwrap();
    let l2 = m.decode_step(&prefix, Some(&i2)).unwrap();
    assert_ne!(l1.row(2), l2.row(2));
    assert!(matches!(m.decode_step(&prefix, None), Err(ModelError::MissingImage)));
}

#[test]
fn decoder_is_causal_under_prefix_edits() {
    let m = model();
    let v = Vocabulary::standard();
    let states = m.encode_image(&render_scene(&generate_scene(3))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let word = |rng: &mut ChaCha8Rng| rng.random_range(5..v.len());
    for _ in 0..100 {
        let len = rng.random_range(2..=m.config.max_len);
        let mut ids: Vec<usize> = std::iter::once(DEC).chain((1..len).map(|_| word(&mut rng))).collect();
        let t = rng.random_range(0..len - 1);
        let before = m.decode_step(&TokenSequence::new(ids.clone()), Some(&states)).unwrap();
        for id in ids.iter_mut().skip(t + 1) {
            *id = word(&mut rng);
        }
        let after = m.decode_step(&TokenSequence::new(ids), Some(&states)).unwrap();
        for r in 0..=t {
            assert_eq!(before.row(r), after.row(r), "row {r} changed after editing past {t}");
        }
    }
}

#[test]
fn forward_passes_are_deterministic() {
    let v = Vocabulary::standard();
    let img = render_scene(&generate_scene(9));
    let text = TokenSequence::with_role(Role::Decode, &words(&v, "a small blue square"));
    let a = model();
    let b = model();
    let sa = a.encode_image(&img).unwrap();
    assert_eq!(sa, b.encode_image(&img).unwrap());
    assert_eq!(a.decode_step(&text, Some(&sa)).unwrap(), b.decode_step(&text, Some(&sa)).unwrap());
}

#[test]
fn batched_forward_matches_single_items() {
    let m = model();
    let v = Vocabulary::standard();
    let imgs: Vec<Image> = (0..3).map(|s| render_scene(&generate_scene(s))).collect();
    let seqs: Vec<TokenSequence> = ["a red circle", "a large blue square above a small red circle", "a"]
        .iter()
        .map(|t| TokenSequence::with_role(Role::Decode, &words(&v, t)))
        .collect();
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let batch = TokenBatch::from_sequences(&refs);
    let mut tape = Tape::<f32>::new();
    let b = Bound::constant(&mut tape, &m.params);
    let img_refs: Vec<&Image> = imgs.iter().collect();
    let states = forward::image_states(&mut tape, &b, &m.config, &img_refs).unwrap();
    let logits = forward::decoder_logits(&mut tape, &b, &m.config, &batch, states, &[2, 0, 1]).unwrap();
    let logits = tape.value(logits);
    let order = [2, 0, 1];
    for (i, seq) in seqs.iter().enumerate() {
        let single_states = m.encode_image(&imgs[order[i]]).unwrap();
        let single = m.decode_step(seq, Some(&single_states)).unwrap();
        for r in 0..seq.len() {
            let batched = logits.row(i * batch.len + r);
            let diff = batched.iter().zip(single.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff < 1e-4, "item {i} row {r}: {diff}");
        }
    }
}

#[test]
fn attention_weights_are_row_stochastic() {
    let m = model();
    let v = Vocabulary::standard();
    let seqs: Vec<TokenSequence> = ["a red circle", "a large blue square above a small red circle"]
        .iter()
        .map(|t| TokenSequence::with_role(Role::Encode, &words(&v, t)))
        .collect();
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let batch = TokenBatch::from_sequences(&refs);
    let imgs: Vec<Image> = (0..2).map(|s| render_scene(&generate_scene(s))).collect();
    let img_refs: Vec<&Image> = imgs.iter().collect();
    let mut tape = Tape::<f32>::new();
    let b = Bound::constant(&mut tape, &m.params);
    let states = forward::image_states(&mut tape, &b, &m.config, &img_refs).unwrap();
    forward::grounded_states(&mut tape, &b, &m.config, &batch, states, &[0, 1]).unwrap();
    let dec = forward::decoder_logits(&mut tape, &b, &m.config, &batch, states, &[1, 0]);
    dec.unwrap();
    let layers = tape.attention_layers();
    // image: 2 layers; grounded encoder and decoder: 2 self + 2 cross each
    assert_eq!(layers.len(), 2 + 4 + 4);
    for layer in layers {
        let s = layer.shape;
        for bi in 0..s.batch {
            for h in 0..s.heads {
                for i in 0..s.len_q {
                    let mrow = &layer.mask[(bi * s.len_q + i) * s.len_k..][..s.len_k];
                    let prow = &layer.probs[((bi * s.heads + h) * s.len_q + i) * s.len_k..][..s.len_k];
                    let total: f32 = prow.iter().sum();
                    assert!((total - 1.0).abs() < 1e-6, "row sums to {total}");
                    for (p, &visible) in prow.iter().zip(mrow) {
                        assert!(visible || *p == 0.0);
                    }
                }
            }
        }
    }
}
