//! Mention extraction against a brute-force n-gram matcher.

use std::collections::BTreeMap;

use chairdpo::{extract_mentions, SynonymLexicon};
use proptest::prelude::*;

const CLASSES: &[(&str, &[&str])] = &[
    ("dog", &["puppy"]),
    ("hot dog", &["frankfurter"]),
    ("fire hydrant", &["hydrant"]),
    ("dining table", &["table"]),
    ("traffic light", &["stop light", "traffic signal"]),
    ("cell phone", &["mobile phone", "phone"]),
    ("teddy bear", &[]),
    ("bear", &[]),
    ("car", &["automobile"]),
    ("tv", &["television", "tv monitor"]),
];

const FILLERS: &[&str] = &[
    "a", "the", "with", "near", "big", "red", "light", "hot", "fire", "teddy",
];

fn lexicon() -> SynonymLexicon {
    SynonymLexicon::new(
        CLASSES
            .iter()
            .map(|(n, s)| (n.to_string(), s.iter().map(|x| x.to_string()).collect())),
        Vec::<String>::new(),
    )
    .unwrap()
}

/// Every surface form, already lowercase and singular, mapped to its class.
fn forms() -> BTreeMap<Vec<String>, &'static str> {
    let mut m = BTreeMap::new();
    for (name, syns) in CLASSES {
        for f in std::iter::once(name).chain(syns.iter()) {
            m.insert(f.split(' ').map(str::to_string).collect(), *name);
        }
    }
    m
}

/// Scans left to right; at each word tries every n-gram length from the
/// longest form down and takes the first hit.
fn oracle(words: &[(String, usize, usize)]) -> Vec<(String, usize, usize)> {
    let forms = forms();
    let max = forms.keys().map(Vec::len).max().unwrap();
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let mut hit = None;
        for n in (1..=max).rev() {
            if i + n > words.len() {
                continue;
            }
            let key: Vec<String> = words[i..i + n].iter().map(|w| w.0.to_lowercase()).collect();
            if let Some(class) = forms.get(&key) {
                hit = Some((class.to_string(), n));
                break;
            }
        }
        match hit {
            Some((class, n)) => {
                out.push((class, words[i].1, words[i + n - 1].2));
                i += n;
            }
            None => i += 1,
        }
    }
    out
}

fn word_pool() -> Vec<String> {
    let mut pool: Vec<String> = FILLERS.iter().map(|s| s.to_string()).collect();
    for (name, syns) in CLASSES {
        for f in std::iter::once(name).chain(syns.iter()) {
            pool.extend(f.split(' ').map(str::to_string));
        }
    }
    pool.sort();
    pool.dedup();
    pool
}

fn arb_text() -> impl Strategy<Value = (String, Vec<(String, usize, usize)>)> {
    let pool = word_pool();
    let word = (0..pool.len(), any::<bool>()).prop_map(move |(i, upper)| {
        let w = pool[i].clone();
        if upper {
            w.to_uppercase()
        } else {
            w
        }
    });
    let sep = prop::sample::select(vec![" ", "  ", ", ", ". ", "\t", "; ", "!\n", "-"]);
    prop::collection::vec((word, sep), 0..25).prop_map(|parts| {
        let mut text = String::new();
        let mut words = Vec::new();
        for (w, s) in parts {
            let start = text.chars().count();
            text.push_str(&w);
            let end = text.chars().count();
            words.push((w, start, end));
            text.push_str(s);
        }
        (text, words)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn extraction_matches_ngram_oracle((text, words) in arb_text()) {
        let lex = lexicon();
        let got: Vec<(String, usize, usize)> = extract_mentions(&text, &lex)
            .iter()
            .map(|m| (m.class.clone(), m.span.start, m.span.end))
            .collect();
        prop_assert_eq!(got, oracle(&words));
    }
}

#[test]
fn longest_match_wins() {
    let lex = lexicon();
    let classes = |t: &str| -> Vec<String> { extract_mentions(t, &lex).iter().map(|m| m.class.clone()).collect() };
    assert_eq!(classes("a teddy bear and a bear"), ["teddy bear", "bear"]);
    assert_eq!(classes("hot dog, dog"), ["hot dog", "dog"]);
    assert_eq!(classes("the tv monitor"), ["tv"]);
    assert_eq!(classes("fire. hydrant"), ["fire hydrant"]);
    assert_eq!(
        classes("TRAFFIC SIGNALS and cell phones"),
        ["traffic light", "cell phone"]
    );
}

#[test]
fn spans_are_character_offsets() {
    let lex = lexicon();
    let text = "café — dog";
    let m = extract_mentions(text, &lex);
    assert_eq!(m.len(), 1);
    let chars: Vec<char> = text.chars().collect();
    let s: String = chars[m.0[0].span.start..m.0[0].span.end].iter().collect();
    assert_eq!(s, "dog");
}
