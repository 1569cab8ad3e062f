//! On-disk corpus: `vocab.txt`, `manifest.json` and, per split,
//! `scenes.jsonl` plus `img/<id>.ppm`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::language::{answer_for, evaluate_statement};
use super::{
    caption_of, generate_scene, qa_pairs_of, render_scene, statement_of, Color, QaKind, Result, SceneError,
    SceneObject, SceneSpec, Shape, Vocabulary, IMAGE_SIZE,
};
use crate::model::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub q: String,
    pub a: String,
    pub kind: QaKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementRecord {
    pub text: String,
    pub truth: bool,
}

/// One line of `scenes.jsonl`. `image` is relative to the split directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    pub split: Split,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub caption: String,
    pub qa: Vec<QaRecord>,
    pub statements: Vec<StatementRecord>,
    pub image: String,
}

impl SceneRecord {
    /// Labels for a scene: one caption, all applicable QA pairs, one true
    /// and one false statement.
    pub fn from_scene(id: usize, split: Split, scene: &SceneSpec) -> Result<Self> {
        let statements = [true, false]
            .into_iter()
            .map(|want| statement_of(scene, want, scene.seed).map(|s| StatementRecord { text: s.text, truth: s.truth }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id,
            split,
            seed: scene.seed,
            objects: scene.objects.clone(),
            caption: caption_of(scene, scene.seed),
            qa: qa_pairs_of(scene)
                .into_iter()
                .map(|p| QaRecord { q: p.question, a: p.answer, kind: p.kind })
                .collect(),
            statements,
            image: format!("img/{id}.ppm"),
        })
    }

    pub fn spec(&self) -> SceneSpec {
        SceneSpec {
            objects: self.objects.clone(),
            seed: self.seed,
        }
    }

    /// Checks every label against the predicate evaluator.
    pub fn verify(&self) -> bool {
        let spec = self.spec();
        spec.is_valid()
            && evaluate_statement(&spec, &self.caption) == Some(true)
            && !self.qa.is_empty()
            && self.qa.iter().all(|p| answer_for(&spec, &p.q).as_deref() == Some(p.a.as_str()))
            && self.statements.iter().any(|s| s.truth)
            && self.statements.iter().any(|s| !s.truth)
            && self.statements.iter().all(|s| evaluate_statement(&spec, &s.text) == Some(s.truth))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    /// (shape, color) combinations that only eval scenes contain.
    pub holdout: Vec<(Shape, Color)>,
}

#[derive(Clone, Debug)]
pub struct CorpusExample {
    pub record: SceneRecord,
    pub image: Image,
}

/// A corpus loaded into memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub vocab: Vocabulary,
    pub summary: CorpusSummary,
    pub train: Vec<CorpusExample>,
    pub eval: Vec<CorpusExample>,
    pub fingerprint: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_bytes());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Option<Image> {
    // header: magic, width, height, maxval, each followed by whitespace
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    pos += 1;
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    if fields[0] != "P6" || fields[3] != "255" || bytes.len() != pos + w * h * 3 {
        return None;
    }
    Image::from_bytes(w, h, &bytes[pos..])
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    write_file(path, &encode_ppm(image))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes).ok_or_else(|| SceneError::Malformed(format!("{} is not a binary PPM", path.display())))
}

/// Writes a corpus of `n_train` + `n_eval` scenes under `out`.
///
/// Two (shape, color) combinations, chosen by `seed`, are reserved: no train
/// scene contains them and every eval scene contains at least one.
pub fn build_corpus(out: &Path, n_train: usize, n_eval: usize, seed: u64) -> Result<CorpusSummary> {
    if n_train == 0 || n_eval == 0 {
        return Err(SceneError::EmptySplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<(Shape, Color)> = Shape::ALL
        .iter()
        .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
        .collect();
    combos.shuffle(&mut rng);
    let mut holdout = combos[..2].to_vec();
    holdout.sort();
    let summary = CorpusSummary {
        seed,
        n_train,
        n_eval,
        holdout: holdout.clone(),
    };

    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("vocab.txt"), Vocabulary::standard().to_file_contents().as_bytes())?;
    let manifest = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out.join("manifest.json"), manifest.as_bytes())?;

    for (split, n) in [(Split::Train, n_train), (Split::Eval, n_eval)] {
        let dir = out.join(split.as_str());
        let img_dir = dir.join("img");
        fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        let mut lines = Vec::new();
        while lines.len() < n {
            let scene = generate_scene(rng.random());
            let novel = scene.combos().any(|c| holdout.contains(&c));
            if novel != (split == Split::Eval) {
                continue;
            }
            let id = lines.len();
            let record = match SceneRecord::from_scene(id, split, &scene) {
                Ok(r) => r,
                Err(SceneError::CannotFalsify) => continue,
                Err(e) => return Err(e),
            };
            write_ppm(&dir.join(&record.image), &render_scene(&scene))?;
            lines.push(serde_json::to_string(&record).expect("record serializes"));
        }
        let path = dir.join("scenes.jsonl");
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        for line in &lines {
            writeln!(f, "{line}").map_err(io_err(&path))?;
        }
    }
    Ok(summary)
}

/// SHA-256 over every corpus file in a fixed order.
pub fn fingerprint(root: &Path) -> Result<String> {
    let mut files = vec![root.join("vocab.txt"), root.join("manifest.json")];
    for split in [Split::Train, Split::Eval] {
        let dir = root.join(split.as_str());
        files.push(dir.join("scenes.jsonl"));
        let img_dir = dir.join("img");
        let mut imgs: Vec<PathBuf> = fs::read_dir(&img_dir)
            .map_err(io_err(&img_dir))?
            .map(|e| e.map(|e| e.path()).map_err(io_err(&img_dir)))
            .collect::<Result<_>>()?;
        imgs.sort();
        files.extend(imgs);
    }
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().into_owned();
        h.update(rel.as_bytes());
        h.update([0]);
        let bytes = fs::read(&f).map_err(io_err(&f))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let vocab = Vocabulary::load(&root.join("vocab.txt"))?;
        let manifest_path = root.join("manifest.json");
        let manifest = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let summary: CorpusSummary =
            serde_json::from_str(&manifest).map_err(|e| SceneError::Malformed(format!("manifest.json: {e}")))?;
        let mut splits = Vec::new();
        for split in [Split::Train, Split::Eval] {
            let dir = root.join(split.as_str());
            let path = dir.join("scenes.jsonl");
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let mut examples = Vec::new();
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let record: SceneRecord = serde_json::from_str(line)
                    .map_err(|e| SceneError::Malformed(format!("{}:{}: {e}", path.display(), n + 1)))?;
                let image = read_ppm(&dir.join(&record.image))?;
                if image.width != IMAGE_SIZE || image.height != IMAGE_SIZE {
                    return Err(SceneError::Malformed(format!("{} has the wrong size", record.image)));
                }
                examples.push(CorpusExample { record, image });
            }
            splits.push(examples);
        }
        let eval = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Self {
            root: root.to_path_buf(),
            vocab,
            summary,
            train,
            eval,
            fingerprint: fingerprint(root)?,
        })
    }

    pub fn split(&self, split: Split) -> &[CorpusExample] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = render_scene(&generate_scene(3));
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_none());
        assert!(decode_ppm(b"P3\n1 1\n255\n000").is_none());
    }

    #[test]
    fn corpus_layout_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let summary = build_corpus(dir.path(), 12, 5, 7).unwrap();
        assert_eq!(summary.holdout.len(), 2);
        let corpus = Corpus::load(dir.path()).unwrap();
        assert_eq!(corpus.train.len(), 12);
        assert_eq!(corpus.eval.len(), 5);
        assert_eq!(corpus.summary, summary);
        for ex in corpus.train.iter().chain(&corpus.eval) {
            assert!(ex.record.verify());
            assert_eq!(render_scene(&ex.record.spec()), ex.image);
        }
        assert!(corpus
            .eval
            .iter()
            .all(|e| e.record.spec().combos().any(|c| summary.holdout.contains(&c))));
    }

    #[test]
    fn empty_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(build_corpus(dir.path(), 0, 3, 1), Err(SceneError::EmptySplit)));
    }

    #[test]
    fn tampered_record_fails_verification() {
        let mut r = SceneRecord::from_scene(0, Split::Train, &generate_scene(5)).unwrap();
        assert!(r.verify());
        r.statements[0].truth = !r.statements[0].truth;
        assert!(!r.verify());
    }
}
