use std::path::Path;

use newvision_core::inference::DecodeOptions;
use newvision_core::model::{Image, MedConfig};
use newvision_core::scenegen::{build_corpus, Corpus, CorpusExample, QaKind, QaRecord, SceneRecord, Split, StatementRecord};
use newvision_core::trainer::{
    decode_checkpoint, encode_checkpoint, evaluate, evaluate_checkpoint, load_checkpoint, train, train_with,
    CheckpointError, EvalError, Metric, Predictor, Stage, TrainConfig, TrainError, FORMAT_VERSION,
};

fn corpus(dir: &Path) -> Corpus {
    build_corpus(dir, 12, 4, 5).unwrap();
    Corpus::load(dir).unwrap()
}

fn tiny_config(stage: Stage, steps: usize, dir: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::new(stage, steps, dir, dir.join(format!("{stage}.ckpt")));
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.model = Some(MedConfig::tiny(0));
    cfg
}

#[test]
fn stages_chain_and_only_touch_their_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let (pre, log) = train_with(&tiny_config(Stage::Pretrain, 6, dir.path()), &corpus, None, None).unwrap();
    assert_eq!(log.len(), 6);
    assert!(log.iter().all(|m| m.total.is_finite() && m.temperature.is_some()));
    assert_eq!(pre.step, 6);
    assert!(!pre.statement_head_trained);
    assert_eq!(pre.corpus_fingerprint, corpus.fingerprint);

    let changed = |a: &newvision_core::trainer::Checkpoint, b: &newvision_core::trainer::Checkpoint| {
        a.model
            .params
            .iter()
            .filter(|(n, t)| b.model.params.get(n) != Some(t))
            .map(|(n, _)| n.clone())
            .collect::<Vec<_>>()
    };
    assert!(changed(&pre, &pre).is_empty());
    let fresh = newvision_core::trainer::Checkpoint::new(
        newvision_core::model::Med::new(MedConfig {
            vocab_size: corpus.vocab.len(),
            ..MedConfig::tiny(0)
        })
        .unwrap(),
        corpus.vocab.clone(),
    );
    assert!(changed(&pre, &fresh).iter().all(|n| !n.starts_with("statement_head")));

    for (stage, prefixes) in [
        (Stage::FinetuneCaption, &["decoder."][..]),
        (Stage::FinetuneVqa, &["decoder."][..]),
        (Stage::FinetuneNlvr, &["grounded_encoder.", "statement_head"][..]),
    ] {
        let (ft, log) = train_with(&tiny_config(stage, 3, dir.path()), &corpus, Some(pre.clone()), None).unwrap();
        assert_eq!(log.len(), 3);
        let diff = changed(&ft, &pre);
        assert!(!diff.is_empty(), "{stage} changed nothing");
        for n in &diff {
            assert!(prefixes.iter().any(|p| n.starts_with(p)), "{stage} changed {n}");
        }
        assert_eq!(ft.statement_head_trained, stage == Stage::FinetuneNlvr);
        if stage == Stage::FinetuneNlvr {
            assert!(log.iter().all(|m| m.nlvr.is_some()));
        }
    }
}

#[test]
fn metric_logs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let cfg = tiny_config(Stage::Pretrain, 4, dir.path());
    let (a, la) = train_with(&cfg, &corpus, None, None).unwrap();
    let (b, lb) = train_with(&cfg, &corpus, None, None).unwrap();
    assert_eq!(la, lb);
    assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
}

#[test]
fn file_level_training_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut cfg = tiny_config(Stage::Pretrain, 2, dir.path());
    cfg.metrics_log = Some(dir.path().join("log.jsonl"));
    let (ckpt, _) = train(&cfg).unwrap();
    assert_eq!(encode_checkpoint(&load_checkpoint(&cfg.output_checkpoint).unwrap()), encode_checkpoint(&ckpt));
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["step", "itc", "itm", "lm", "total"] {
        assert!(lines[0][key].is_number(), "{key}");
    }

    let mut ft = tiny_config(Stage::FinetuneCaption, 1, dir.path());
    ft.init_checkpoint = Some(dir.path().join("missing.ckpt"));
    assert!(matches!(train(&ft), Err(TrainError::Checkpoint(_))));
    let mut missing_corpus = tiny_config(Stage::Pretrain, 1, dir.path());
    missing_corpus.corpus = dir.path().join("nope");
    assert!(matches!(train(&missing_corpus), Err(TrainError::MissingCorpus(_))));
}

#[test]
fn finetune_and_distill_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let cfg = tiny_config(Stage::FinetuneVqa, 1, dir.path());
    assert!(matches!(
        train_with(&cfg, &corpus, None, None),
        Err(TrainError::MissingCheckpoint(Stage::FinetuneVqa))
    ));
    let distill = tiny_config(Stage::Distill, 2, dir.path());
    assert!(matches!(train_with(&distill, &corpus, None, None), Err(TrainError::MissingTeacher(_))));

    let mut teacher_cfg = tiny_config(Stage::Pretrain, 2, dir.path());
    teacher_cfg.model = Some(MedConfig {
        d_model: 16,
        ffn_dim: 32,
        ..MedConfig::tiny(0)
    });
    let (teacher, _) = train_with(&teacher_cfg, &corpus, None, None).unwrap();
    let (student, log) = train_with(&distill, &corpus, None, Some(&teacher)).unwrap();
    assert_eq!(student.config().d_model, 8);
    assert!(log.iter().all(|m| m.kd.is_some_and(f64::is_finite)));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let (ckpt, _) = train_with(&tiny_config(Stage::Pretrain, 2, dir.path()), &corpus, None, None).unwrap();
    let bytes = encode_checkpoint(&ckpt);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&back), bytes);
    assert_eq!(back.optimizer, ckpt.optimizer);
    assert!(!back.optimizer.m.is_empty());

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::BadMagic)));
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::UnsupportedVersion(99))));
    assert_ne!(FORMAT_VERSION, 99);
    for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        assert!(
            matches!(decode_checkpoint(&bytes[..cut]), Err(CheckpointError::TruncatedFile)),
            "cut at {cut}"
        );
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_checkpoint(&long), Err(CheckpointError::Malformed(_))));
}

/// Canned answers keyed by image brightness.
struct Fake;

fn key(image: &Image) -> usize {
    (image.data[0] * 10.0).round() as usize
}

impl Predictor for Fake {
    fn caption(&self, image: &Image) -> Result<String, EvalError> {
        Ok(["a red circle", "a blue square", "a small red circle"][key(image)].into())
    }
    fn answer(&self, image: &Image, _question: &str) -> Result<String, EvalError> {
        Ok(["red", "one", "two"][key(image)].into())
    }
    fn verify(&self, _image: &Image, _statement: &str) -> Result<Option<bool>, EvalError> {
        Ok(Some(true))
    }
    fn matches(&self, image: &Image, text: &str) -> Result<bool, EvalError> {
        Ok(key(image) == 0 || text.contains("square"))
    }
    fn retrieve(&self, _text: &str, _images: &[&Image]) -> Result<usize, EvalError> {
        Ok(0)
    }
    fn has_statement_head(&self) -> bool {
        true
    }
}

fn example(i: usize, caption: &str, answer: &str, truths: &[bool]) -> CorpusExample {
    CorpusExample {
        record: SceneRecord {
            id: i,
            split: Split::Eval,
            seed: i as u64,
            objects: vec![],
            caption: caption.into(),
            qa: vec![QaRecord {
                q: "what".into(),
                a: answer.into(),
                kind: QaKind::Color,
            }],
            statements: truths
                .iter()
                .map(|&t| StatementRecord {
                    text: "s".into(),
                    truth: t,
                })
                .collect(),
            image: String::new(),
        },
        image: Image::filled(2, 2, [i as f32 / 10.0; 3]),
    }
}

#[test]
fn evaluate_hand_computed_split() {
    let split = vec![
        example(0, "a red circle", "red", &[true, false]),
        example(1, "a blue square", "two", &[true]),
        example(2, "a large red circle", "two", &[false]),
    ];
    let m = evaluate(&Fake, &split, &Metric::ALL).unwrap();
    assert_eq!(m.caption_exact_match, Some(2.0 / 3.0));
    // predictions: 3 + 3 + 4 words; hits 3 + 3 + 3
    assert_eq!(m.caption_unigram_precision, Some(9.0 / 10.0));
    assert_eq!(m.vqa_answer_exact_match, Some(2.0 / 3.0));
    assert_eq!(m.nlvr_statement_accuracy, Some(2.0 / 4.0));
    // image 0 matches everything: pos hit, neg miss. image 1: pos hit
    // ("square"), neg "a large red circle" correctly rejected. image 2: pos
    // miss, neg "a red circle" rejected.
    assert_eq!(m.itm_accuracy, Some(4.0 / 6.0));
    // always retrieves image 0: only the first caption hits
    assert_eq!(m.retrieval_recall_at_1, Some(1.0 / 3.0));
    let only = evaluate(&Fake, &split, &[Metric::ItmAccuracy]).unwrap();
    assert!(only.caption_exact_match.is_none());
}

#[test]
fn evaluate_errors() {
    assert_eq!(evaluate(&Fake, &[], &Metric::ALL), Err(EvalError::EmptySplit));
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let (ckpt, _) = train_with(&tiny_config(Stage::Pretrain, 1, dir.path()), &corpus, None, None).unwrap();
    let err = evaluate_checkpoint(&ckpt, &corpus.eval, &[Metric::NlvrStatementAccuracy], DecodeOptions::default());
    assert_eq!(err, Err(EvalError::MissingHead));
    let m = evaluate_checkpoint(&ckpt, &corpus.eval, &[Metric::ItmAccuracy, Metric::RetrievalRecallAt1], DecodeOptions::default())
        .unwrap();
    assert!((0.0..=1.0).contains(&m.itm_accuracy.unwrap()));
}
