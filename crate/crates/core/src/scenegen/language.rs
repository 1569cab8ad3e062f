//! Templated language over scenes and the predicate evaluator that checks it.
//!
//! Grammar shared by captions and statements:
//!
//! ```text
//! description := "a" [size] color shape [relation "a" [size] color shape]
//! relation    := "above" | "below" | "left of" | "right of"
//! ```
//!
//! Relations are a function of grid cells: different rows give above/below,
//! the same row gives left of/right of.

use serde::{Deserialize, Serialize};

use super::{Color, Result, SceneError, SceneObject, SceneSpec, Shape, Size, GRID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    Above,
    Below,
    LeftOf,
    RightOf,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Above, Relation::Below, Relation::LeftOf, Relation::RightOf];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
        }
    }
}

/// Relation of `a` to `b`.
pub fn relation(a: &SceneObject, b: &SceneObject) -> Relation {
    use std::cmp::Ordering::*;
    match (a.row.cmp(&b.row), a.col.cmp(&b.col)) {
        (Less, _) => Relation::Above,
        (Greater, _) => Relation::Below,
        (Equal, Less) => Relation::LeftOf,
        _ => Relation::RightOf,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectPattern {
    pub size: Option<Size>,
    pub color: Color,
    pub shape: Shape,
}

impl ObjectPattern {
    fn of(o: &SceneObject) -> Self {
        Self {
            size: Some(o.size),
            color: o.color,
            shape: o.shape,
        }
    }

    pub fn matches(&self, o: &SceneObject) -> bool {
        self.color == o.color && self.shape == o.shape && self.size.is_none_or(|s| s == o.size)
    }

    fn text(&self) -> String {
        match self.size {
            Some(s) => format!("a {} {} {}", s.word(), self.color.word(), self.shape.word()),
            None => format!("a {} {}", self.color.word(), self.shape.word()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Description {
    pub subject: ObjectPattern,
    pub relation: Option<(Relation, ObjectPattern)>,
}

impl Description {
    pub fn text(&self) -> String {
        match &self.relation {
            None => self.subject.text(),
            Some((r, o)) => format!("{} {} {}", self.subject.text(), r.phrase(), o.text()),
        }
    }
}

fn word_to<T: Copy>(all: &[T], word_of: fn(T) -> &'static str, w: &str) -> Option<T> {
    all.iter().copied().find(|&v| word_of(v) == w)
}

fn parse_pattern(words: &[&str]) -> Option<(ObjectPattern, usize)> {
    if words.first() != Some(&"a") {
        return None;
    }
    let mut i = 1;
    let size = words.get(i).and_then(|w| word_to(&Size::ALL, Size::word, w));
    if size.is_some() {
        i += 1;
    }
    let color = word_to(&Color::ALL, Color::word, words.get(i)?)?;
    let shape = word_to(&Shape::ALL, Shape::word, words.get(i + 1)?)?;
    Some((ObjectPattern { size, color, shape }, i + 2))
}

/// Parses the description grammar; `None` for anything outside it.
pub fn parse_description(text: &str) -> Option<Description> {
    let norm = normalize(text);
    let words: Vec<&str> = norm.split_whitespace().collect();
    let (subject, used) = parse_pattern(&words)?;
    let rest = &words[used..];
    if rest.is_empty() {
        return Some(Description {
            subject,
            relation: None,
        });
    }
    let (rel, skip) = match rest {
        ["above", ..] => (Relation::Above, 1),
        ["below", ..] => (Relation::Below, 1),
        ["left", "of", ..] => (Relation::LeftOf, 2),
        ["right", "of", ..] => (Relation::RightOf, 2),
        _ => return None,
    };
    let (object, used2) = parse_pattern(&rest[skip..])?;
    if skip + used2 != rest.len() {
        return None;
    }
    Some(Description {
        subject,
        relation: Some((rel, object)),
    })
}

/// Whether some object matches the subject (and, with a relation, some
/// other object matches the object in that relation).
pub fn holds(scene: &SceneSpec, d: &Description) -> bool {
    scene.objects.iter().enumerate().any(|(i, a)| {
        d.subject.matches(a)
            && match &d.relation {
                None => true,
                Some((rel, pat)) => scene
                    .objects
                    .iter()
                    .enumerate()
                    .any(|(j, b)| i != j && pat.matches(b) && relation(a, b) == *rel),
            }
    })
}

/// Truth of a statement, or `None` when it does not parse.
pub fn evaluate_statement(scene: &SceneSpec, text: &str) -> Option<bool> {
    parse_description(text).map(|d| holds(scene, &d))
}

/// Lowercases and strips punctuation.
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Objects sorted by (shape, color), which is unique within a scene and
/// unaffected by horizontal flips.
fn identity_order(scene: &SceneSpec) -> Vec<&SceneObject> {
    let mut objs: Vec<&SceneObject> = scene.objects.iter().collect();
    objs.sort_by_key(|o| (o.shape, o.color));
    objs
}

/// The description a seed selects: one ordered object pair (or the single
/// object) with full attributes.
fn describe(scene: &SceneSpec, seed: u64) -> Description {
    let objs = identity_order(scene);
    if objs.len() == 1 {
        return Description {
            subject: ObjectPattern::of(objs[0]),
            relation: None,
        };
    }
    let pairs: Vec<(usize, usize)> = (0..objs.len())
        .flat_map(|i| (0..objs.len()).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let (i, j) = pairs[(seed % pairs.len() as u64) as usize];
    Description {
        subject: ObjectPattern::of(objs[i]),
        relation: Some((relation(objs[i], objs[j]), ObjectPattern::of(objs[j]))),
    }
}

/// Templated caption; deterministic in `(scene, seed)`.
pub fn caption_of(scene: &SceneSpec, seed: u64) -> String {
    describe(scene, seed).text()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaKind {
    Count,
    Color,
    Shape,
    Position,
    Compare,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub kind: QaKind,
}

pub const NUMBER_WORDS: [&str; 4] = ["zero", "one", "two", "three"];

fn position_words(o: &SceneObject) -> String {
    let v = if o.row < GRID / 2 { "top" } else { "bottom" };
    let h = if o.col < GRID / 2 { "left" } else { "right" };
    format!("{v} {h}")
}

/// One QA pair per applicable kind, answers read off the spec.
pub fn qa_pairs_of(scene: &SceneSpec) -> Vec<QaPair> {
    let objs = &scene.objects;
    let mut out = Vec::new();

    // count: the most frequent color (earliest color on ties)
    let (color, n) = Color::ALL
        .iter()
        .map(|&c| (c, objs.iter().filter(|o| o.color == c).count()))
        .fold((Color::Red, 0), |best, cur| if cur.1 > best.1 { cur } else { best });
    out.push(QaPair {
        question: format!("how many {} shapes", color.word()),
        answer: NUMBER_WORDS[n].to_string(),
        kind: QaKind::Count,
    });

    let shape_unique = |s: Shape| objs.iter().filter(|o| o.shape == s).count() == 1;
    if let Some(o) = objs.iter().find(|o| shape_unique(o.shape)) {
        out.push(QaPair {
            question: format!("what color is the {}", o.shape.word()),
            answer: o.color.word().to_string(),
            kind: QaKind::Color,
        });
    }

    let color_unique = |c: Color| objs.iter().filter(|o| o.color == c).count() == 1;
    if let Some(o) = objs.iter().find(|o| color_unique(o.color)) {
        out.push(QaPair {
            question: format!("what shape is the {} object", o.color.word()),
            answer: o.shape.word().to_string(),
            kind: QaKind::Shape,
        });
    }

    let o = &objs[0];
    out.push(QaPair {
        question: format!("where is the {} {}", o.color.word(), o.shape.word()),
        answer: position_words(o),
        kind: QaKind::Position,
    });

    if objs.len() >= 2 {
        let (a, b) = (&objs[0], &objs[1]);
        let yes = a.size == Size::Large && b.size == Size::Small;
        out.push(QaPair {
            question: format!(
                "is the {} {} larger than the {} {}",
                a.color.word(),
                a.shape.word(),
                b.color.word(),
                b.shape.word()
            ),
            answer: if yes { "yes" } else { "no" }.to_string(),
            kind: QaKind::Compare,
        });
    }
    out
}

fn find_one<'a>(scene: &'a SceneSpec, pred: impl Fn(&SceneObject) -> bool) -> Option<&'a SceneObject> {
    let mut it = scene.objects.iter().filter(|o| pred(o));
    let first = it.next()?;
    it.next().is_none().then_some(first)
}

/// Answers a question from the QA templates by parsing it and querying the
/// spec; `None` if the question is outside the templates or ambiguous.
pub fn answer_for(scene: &SceneSpec, question: &str) -> Option<String> {
    let norm = normalize(question);
    let w: Vec<&str> = norm.split_whitespace().collect();
    let color = |s: &str| word_to(&Color::ALL, Color::word, s);
    let shape = |s: &str| word_to(&Shape::ALL, Shape::word, s);
    match w.as_slice() {
        ["how", "many", c, "shapes"] => {
            let c = color(c)?;
            let n = scene.objects.iter().filter(|o| o.color == c).count();
            NUMBER_WORDS.get(n).map(|s| s.to_string())
        }
        ["what", "color", "is", "the", s] => {
            let s = shape(s)?;
            find_one(scene, |o| o.shape == s).map(|o| o.color.word().to_string())
        }
        ["what", "shape", "is", "the", c, "object"] => {
            let c = color(c)?;
            find_one(scene, |o| o.color == c).map(|o| o.shape.word().to_string())
        }
        ["where", "is", "the", c, s] => {
            let (c, s) = (color(c)?, shape(s)?);
            find_one(scene, |o| o.color == c && o.shape == s).map(position_words)
        }
        ["is", "the", c1, s1, "larger", "than", "the", c2, s2] => {
            let (c1, s1, c2, s2) = (color(c1)?, shape(s1)?, color(c2)?, shape(s2)?);
            let a = find_one(scene, |o| o.color == c1 && o.shape == s1)?;
            let b = find_one(scene, |o| o.color == c2 && o.shape == s2)?;
            Some(if a.size > b.size { "yes" } else { "no" }.to_string())
        }
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub text: String,
    pub truth: bool,
}

/// A true statement read off the spec, or a false one made by a single
/// color or relation change that the evaluator confirms is false.
pub fn statement_of(scene: &SceneSpec, want_truth: bool, seed: u64) -> Result<Statement> {
    let base = describe(scene, seed.wrapping_add(1));
    if want_truth {
        return Ok(Statement {
            text: base.text(),
            truth: true,
        });
    }
    let mut candidates = Vec::new();
    for c in Color::ALL.into_iter().filter(|&c| c != base.subject.color) {
        let mut d = base;
        d.subject.color = c;
        candidates.push(d);
    }
    if let Some((rel, obj)) = base.relation {
        for c in Color::ALL.into_iter().filter(|&c| c != obj.color) {
            let mut d = base;
            d.relation = Some((rel, ObjectPattern { color: c, ..obj }));
            candidates.push(d);
        }
        for r in Relation::ALL.into_iter().filter(|&r| r != rel) {
            let mut d = base;
            d.relation = Some((r, obj));
            candidates.push(d);
        }
    }
    candidates.retain(|d| !holds(scene, d));
    if candidates.is_empty() {
        return Err(SceneError::CannotFalsify);
    }
    let pick = candidates[(seed % candidates.len() as u64) as usize];
    Ok(Statement {
        text: pick.text(),
        truth: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::generate_scene;

    fn obj(shape: Shape, color: Color, row: usize, col: usize, size: Size) -> SceneObject {
        SceneObject {
            shape,
            color,
            row,
            col,
            size,
        }
    }

    fn scene(objects: Vec<SceneObject>) -> SceneSpec {
        let mut s = SceneSpec { objects, seed: 0 };
        s.normalize();
        s
    }

    #[test]
    fn single_object_caption() {
        let s = scene(vec![obj(Shape::Circle, Color::Red, 2, 1, Size::Large)]);
        for seed in 0..5 {
            assert_eq!(caption_of(&s, seed), "a large red circle");
        }
    }

    #[test]
    fn stacked_objects_use_vertical_relations() {
        let s = scene(vec![
            obj(Shape::Square, Color::Blue, 0, 2, Size::Small),
            obj(Shape::Circle, Color::Green, 3, 2, Size::Large),
        ]);
        for seed in 0..4 {
            let cap = caption_of(&s, seed);
            let d = parse_description(&cap).unwrap();
            let (rel, _) = d.relation.unwrap();
            if d.subject.shape == Shape::Square {
                assert_eq!(rel, Relation::Above, "{cap}");
            } else {
                assert_eq!(rel, Relation::Below, "{cap}");
            }
            assert!(holds(&s, &d));
        }
    }

    #[test]
    fn captions_reparse_and_hold() {
        for seed in 0..2000 {
            let s = generate_scene(seed);
            let cap = caption_of(&s, seed);
            let d = parse_description(&cap).unwrap_or_else(|| panic!("unparsable {cap}"));
            assert_eq!(d.text(), cap);
            assert!(holds(&s, &d), "{cap} false for {s:?}");
        }
    }

    #[test]
    fn parser_rejects_off_grammar() {
        for bad in [
            "",
            "large red circle",
            "a red",
            "a large red circle beside a blue square",
            "a red circle above",
            "a red circle above a blue square extra",
            "a huge red circle",
        ] {
            assert!(parse_description(bad).is_none(), "{bad}");
        }
        assert!(parse_description("A red circle, left of a blue square.").is_some());
    }

    #[test]
    fn counting_and_attribute_questions() {
        let s = scene(vec![
            obj(Shape::Circle, Color::Red, 0, 0, Size::Large),
            obj(Shape::Square, Color::Red, 1, 3, Size::Small),
            obj(Shape::Triangle, Color::Blue, 3, 0, Size::Small),
        ]);
        let qa = qa_pairs_of(&s);
        let count = qa.iter().find(|q| q.kind == QaKind::Count).unwrap();
        assert_eq!(count.question, "how many red shapes");
        assert_eq!(count.answer, "two");
        let color = qa.iter().find(|q| q.kind == QaKind::Color).unwrap();
        assert_eq!(color.question, "what color is the circle");
        assert_eq!(color.answer, "red");
        for pair in &qa {
            assert_eq!(answer_for(&s, &pair.question).as_deref(), Some(pair.answer.as_str()));
        }
        assert_eq!(answer_for(&s, "how many green shapes").as_deref(), Some("zero"));
        assert_eq!(answer_for(&s, "where is the red circle").as_deref(), Some("top left"));
    }

    #[test]
    fn single_object_has_no_compare_question() {
        let s = scene(vec![obj(Shape::Triangle, Color::Yellow, 3, 3, Size::Small)]);
        let qa = qa_pairs_of(&s);
        assert!(qa.iter().all(|q| q.kind != QaKind::Compare));
        assert!(qa.iter().any(|q| q.kind == QaKind::Position && q.answer == "bottom right"));
    }

    #[test]
    fn statements_have_the_requested_truth() {
        let s = scene(vec![obj(Shape::Circle, Color::Red, 1, 1, Size::Large)]);
        let f = statement_of(&s, false, 3).unwrap();
        assert!(!f.truth);
        assert_eq!(evaluate_statement(&s, &f.text), Some(false));
        let d = parse_description(&f.text).unwrap();
        assert_ne!(d.subject.color, Color::Red);
        assert_eq!(d.subject.shape, Shape::Circle);

        for seed in 0..2000 {
            let s = generate_scene(seed);
            for want in [true, false] {
                let st = statement_of(&s, want, seed).unwrap();
                assert_eq!(st.truth, want);
                assert_eq!(evaluate_statement(&s, &st.text), Some(want), "{}", st.text);
                assert_eq!(st, statement_of(&s, want, seed).unwrap());
            }
        }
    }

    #[test]
    fn unparsable_statement_has_no_truth() {
        let s = generate_scene(1);
        assert_eq!(evaluate_statement(&s, "zebra"), None);
    }
}
