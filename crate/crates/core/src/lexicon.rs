//! Term normalization and lexicon-driven object mention extraction.
//!
//! Text is split on Unicode whitespace and ASCII punctuation (so hyphenated
//! compounds such as `fire-hydrant` behave like `fire hydrant`), every token
//! is case-folded and singularized, and the resulting token stream is matched
//! against the lexicon left to right, preferring the longest surface form at
//! each position.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest surface form, in tokens, that the matcher will consider.
pub const MAX_COMPOUND_TOKENS: usize = 3;

/// Irregular plurals. Every value must be a fixed point of [`normalize_term`].
const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("people", "person"),
    ("persons", "person"),
    ("children", "child"),
    ("men", "man"),
    ("women", "woman"),
    ("mice", "mouse"),
    ("geese", "goose"),
    ("teeth", "tooth"),
    ("feet", "foot"),
    ("knives", "knife"),
    ("wolves", "wolf"),
    ("leaves", "leaf"),
    ("shelves", "shelf"),
    ("loaves", "loaf"),
    ("calves", "calf"),
    ("halves", "half"),
    ("oxen", "ox"),
    ("cacti", "cactus"),
];

fn irregular(word: &str) -> Option<&'static str> {
    IRREGULAR_PLURALS
        .iter()
        .find(|(plural, _)| *plural == word)
        .map(|(_, singular)| *singular)
}

/// Suffix rules. The output is always a fixed point of this function.
fn singularize(word: &str) -> String {
    let len = word.chars().count();
    if len <= 3 || word.ends_with("ss") || word.ends_with("us") || word.ends_with("is") {
        return word.to_string();
    }
    if len > 4 {
        if let Some(stem) = word.strip_suffix("ies") {
            return format!("{stem}y");
        }
    }
    if let Some(stem) = word.strip_suffix("es") {
        if ["x", "z", "ch", "sh", "ss", "us"].iter().any(|end| stem.ends_with(end)) {
            return stem.to_string();
        }
    }
    word.strip_suffix('s').unwrap_or(word).to_string()
}

fn normalize_word(word: &str) -> String {
    let lower = word.to_lowercase();
    if let Some(singular) = irregular(&lower) {
        return singular.to_string();
    }
    let stripped = singularize(&lower);
    match irregular(&stripped) {
        Some(singular) => singular.to_string(),
        None => stripped,
    }
}

fn is_separator(c: char) -> bool {
    c.is_whitespace() || c.is_ascii_punctuation()
}

/// Case-folds and singularizes a word or phrase.
///
/// Multi-word input is split with the same rules as [`extract_mentions`] and
/// rejoined with single spaces. Total and idempotent.
pub fn normalize_term(raw: &str) -> String {
    raw.split(is_separator)
        .filter(|w| !w.is_empty())
        .map(normalize_word)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Half-open span of character (not byte) offsets into the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Token {
    norm: String,
    span: Span,
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut pos = 0;
    for c in text.chars() {
        if is_separator(c) {
            if !current.is_empty() {
                tokens.push(Token {
                    norm: normalize_word(&current),
                    span: Span { start, end: pos },
                });
                current.clear();
            }
        } else {
            if current.is_empty() {
                start = pos;
            }
            current.push(c);
        }
        pos += 1;
    }
    if !current.is_empty() {
        tokens.push(Token {
            norm: normalize_word(&current),
            span: Span { start, end: pos },
        });
    }
    tokens
}

/// One canonical object class and its normalized surface forms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconClass {
    pub name: String,
    pub synonyms: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct LexiconFile {
    classes: Vec<LexiconClass>,
    #[serde(default)]
    hallucinatory_targets: Vec<String>,
}

/// Immutable map from normalized surface forms to canonical object classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynonymLexicon {
    classes: Vec<LexiconClass>,
    index: BTreeMap<String, usize>,
    form_to_class: BTreeMap<String, usize>,
    targets: BTreeSet<String>,
    max_form_tokens: usize,
}

impl SynonymLexicon {
    /// Builds a lexicon, normalizing every name and synonym.
    ///
    /// The canonical name is added to its own synonym list when missing.
    pub fn new(
        classes: impl IntoIterator<Item = (String, Vec<String>)>,
        hallucinatory_targets: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let mut out = Vec::new();
        let mut index = BTreeMap::new();
        let mut form_to_class: BTreeMap<String, usize> = BTreeMap::new();
        let mut max_form_tokens = 1;

        for (raw_name, raw_synonyms) in classes {
            let name = normalize_term(&raw_name);
            if name.is_empty() {
                return Err(Error::InvalidLexicon(format!(
                    "class name {raw_name:?} is empty after normalization"
                )));
            }
            let id = out.len();
            if index.insert(name.clone(), id).is_some() {
                return Err(Error::InvalidLexicon(format!("class {name:?} is declared twice")));
            }
            let mut synonyms: Vec<String> = Vec::new();
            for raw in std::iter::once(&raw_name).chain(raw_synonyms.iter()) {
                let form = normalize_term(raw);
                if form.is_empty() {
                    return Err(Error::InvalidLexicon(format!(
                        "synonym {raw:?} of {name:?} is empty after normalization"
                    )));
                }
                let len = form.split(' ').count();
                if len > MAX_COMPOUND_TOKENS {
                    return Err(Error::InvalidLexicon(format!(
                        "synonym {form:?} has {len} tokens, more than {MAX_COMPOUND_TOKENS}"
                    )));
                }
                match form_to_class.get(&form) {
                    Some(&other) if other != id => {
                        return Err(Error::AmbiguousSynonym {
                            form,
                            first: out_name(&out, other),
                            second: name,
                        });
                    }
                    Some(_) => continue,
                    None => {}
                }
                max_form_tokens = max_form_tokens.max(len);
                form_to_class.insert(form.clone(), id);
                synonyms.push(form);
            }
            out.push(LexiconClass { name, synonyms });
        }
        if out.is_empty() {
            return Err(Error::EmptyLexicon);
        }

        let mut targets = BTreeSet::new();
        for raw in hallucinatory_targets {
            let t = normalize_term(&raw);
            if !index.contains_key(&t) {
                return Err(Error::InvalidLexicon(format!(
                    "hallucinatory target {raw:?} is not a class"
                )));
            }
            targets.insert(t);
        }

        Ok(SynonymLexicon {
            classes: out,
            index,
            form_to_class,
            targets,
            max_form_tokens,
        })
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let file: LexiconFile = serde_json::from_str(json).map_err(|e| Error::InvalidLexicon(e.to_string()))?;
        Self::new(
            file.classes.into_iter().map(|c| (c.name, c.synonyms)),
            file.hallucinatory_targets,
        )
    }

    /// Loads a lexicon from a JSON file with `classes` and optional
    /// `hallucinatory_targets` keys.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::InvalidLexicon(msg) => Error::InvalidLexicon(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn classes(&self) -> &[LexiconClass] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Number of distinct surface forms across all classes.
    pub fn num_forms(&self) -> usize {
        self.form_to_class.len()
    }

    pub fn hallucinatory_targets(&self) -> &BTreeSet<String> {
        &self.targets
    }

    pub fn is_target(&self, class: &str) -> bool {
        self.targets.contains(class)
    }

    pub fn contains_class(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Resolves any surface form (normalized on the way in) to its class.
    pub fn canonical(&self, form: &str) -> Option<&str> {
        self.form_to_class
            .get(&normalize_term(form))
            .map(|&id| self.classes[id].name.as_str())
    }

    pub fn max_form_tokens(&self) -> usize {
        self.max_form_tokens
    }

    fn lookup_normalized(&self, form: &str) -> Option<usize> {
        self.form_to_class.get(form).copied()
    }
}

fn out_name(classes: &[LexiconClass], id: usize) -> String {
    classes[id].name.clone()
}

/// One matched object mention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub class: String,
    pub span: Span,
}

/// Mentions in left-to-right order. Repeated classes are kept.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MentionList(pub Vec<Mention>);

impl MentionList {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Mention> {
        self.0.iter()
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|m| m.class.as_str())
    }
}

impl<'a> IntoIterator for &'a MentionList {
    type Item = &'a Mention;
    type IntoIter = std::slice::Iter<'a, Mention>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Extracts object mentions with longest-match-first resolution.
pub fn extract_mentions(text: &str, lexicon: &SynonymLexicon) -> MentionList {
    let tokens = tokenize(text);
    let mut mentions = Vec::new();
    let mut key = String::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = lexicon.max_form_tokens().min(tokens.len() - i);
        let mut matched = None;
        for n in (1..=longest).rev() {
            key.clear();
            for (j, tok) in tokens[i..i + n].iter().enumerate() {
                if j > 0 {
                    key.push(' ');
                }
                key.push_str(&tok.norm);
            }
            if let Some(id) = lexicon.lookup_normalized(&key) {
                matched = Some((id, n));
                break;
            }
        }
        match matched {
            Some((id, n)) => {
                mentions.push(Mention {
                    class: lexicon.classes[id].name.clone(),
                    span: Span {
                        start: tokens[i].span.start,
                        end: tokens[i + n - 1].span.end,
                    },
                });
                i += n;
            }
            None => i += 1,
        }
    }
    MentionList(mentions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex(classes: &[(&str, &[&str])]) -> SynonymLexicon {
        SynonymLexicon::new(
            classes
                .iter()
                .map(|(n, s)| (n.to_string(), s.iter().map(|x| x.to_string()).collect())),
            Vec::<String>::new(),
        )
        .unwrap()
    }

    fn classes_of(list: &MentionList) -> Vec<&str> {
        list.classes().collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_term("Dogs"), "dog");
        assert_eq!(normalize_term("people"), "person");
        assert_eq!(normalize_term("children"), "child");
        assert_eq!(normalize_term("dog"), "dog");
        assert_eq!(normalize_term("benches"), "bench");
        assert_eq!(normalize_term("ponies"), "pony");
        assert_eq!(normalize_term("glasses"), "glass");
        assert_eq!(normalize_term("buses"), "bus");
        assert_eq!(normalize_term("bus"), "bus");
        assert_eq!(normalize_term("Fire-Hydrants"), "fire hydrant");
        assert_eq!(normalize_term("  "), "");
    }

    #[test]
    fn lexicon_construction() {
        let l = lex(&[("dog", &["dog", "puppy"]), ("cat", &["cat"])]);
        assert_eq!(l.num_classes(), 2);
        assert_eq!(l.num_forms(), 3);
        assert_eq!(l.canonical("Puppies"), Some("dog"));
    }

    #[test]
    fn canonical_name_is_added_to_synonyms() {
        let l = lex(&[("dog", &["puppy"])]);
        assert_eq!(l.classes()[0].synonyms, vec!["dog", "puppy"]);
    }

    #[test]
    fn ambiguous_synonym_names_both_classes() {
        let err = SynonymLexicon::from_json_str(
            r#"{"classes":[{"name":"dog","synonyms":["dog","puppy"]},{"name":"cat","synonyms":["cat","puppy"]}]}"#,
        )
        .unwrap_err();
        match err {
            Error::AmbiguousSynonym { form, first, second } => {
                assert_eq!(form, "puppy");
                assert_eq!(first, "dog");
                assert_eq!(second, "cat");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ambiguity_detected_after_normalization() {
        let err = SynonymLexicon::from_json_str(
            r#"{"classes":[{"name":"dog","synonyms":["Puppies"]},{"name":"cat","synonyms":["puppy"]}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::AmbiguousSynonym { .. }));
    }

    #[test]
    fn empty_lexicon_rejected() {
        let err = SynonymLexicon::from_json_str(r#"{"classes":[]}"#).unwrap_err();
        assert!(matches!(err, Error::EmptyLexicon));
    }

    #[test]
    fn unknown_target_rejected() {
        let err = SynonymLexicon::from_json_str(
            r#"{"classes":[{"name":"dog","synonyms":[]}],"hallucinatory_targets":["cat"]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidLexicon(_)));
    }

    #[test]
    fn too_long_synonym_rejected() {
        let err =
            SynonymLexicon::from_json_str(r#"{"classes":[{"name":"dog","synonyms":["a very big dog"]}]}"#).unwrap_err();
        assert!(matches!(err, Error::InvalidLexicon(_)));
    }

    #[test]
    fn direct_match() {
        let l = lex(&[("dog", &[]), ("cat", &[])]);
        assert_eq!(classes_of(&extract_mentions("a dog and a cat", &l)), ["dog", "cat"]);
    }

    #[test]
    fn compound_beats_constituent() {
        let l = lex(&[("dog", &[]), ("fire hydrant", &[]), ("hydrant", &[])]);
        let m = extract_mentions("two dogs near a fire hydrant", &l);
        assert_eq!(classes_of(&m), ["dog", "fire hydrant"]);
        assert_eq!(m.0[0].span, Span { start: 4, end: 8 });
        assert_eq!(m.0[1].span, Span { start: 16, end: 28 });
        let m = extract_mentions("a fire-hydrant", &l);
        assert_eq!(classes_of(&m), ["fire hydrant"]);
        let m = extract_mentions("a hydrant", &l);
        assert_eq!(classes_of(&m), ["hydrant"]);
    }

    #[test]
    fn duplicates_preserved() {
        let l = lex(&[("dog", &["puppy"])]);
        assert_eq!(
            classes_of(&extract_mentions("Dog, puppies, and another DOG.", &l)),
            ["dog", "dog", "dog"]
        );
    }

    #[test]
    fn empty_text() {
        let l = lex(&[("dog", &[])]);
        assert!(extract_mentions("", &l).is_empty());
    }

    #[test]
    fn spans_count_characters_not_bytes() {
        let l = lex(&[("dog", &[])]);
        let m = extract_mentions("café dog", &l);
        assert_eq!(m.0[0].span, Span { start: 5, end: 8 });
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[a-zA-Z ésß-]{0,16}") {
            let once = normalize_term(&s);
            prop_assert_eq!(normalize_term(&once), once);
        }

        #[test]
        fn normalize_is_idempotent_on_suffixy_words(
            stem in "[a-z]{0,6}",
            suffix in prop::sample::select(vec!["s", "es", "ies", "ss", "us", "is", "sses", "ches", "xes", "ieses", "y", ""]),
        ) {
            let w = format!("{stem}{suffix}");
            let once = normalize_term(&w);
            prop_assert_eq!(normalize_term(&once), once);
        }

        #[test]
        fn irregular_forms_are_fixed_points(i in 0..IRREGULAR_PLURALS.len()) {
            let singular = IRREGULAR_PLURALS[i].1;
            prop_assert_eq!(normalize_term(singular), singular);
        }
    }
}
