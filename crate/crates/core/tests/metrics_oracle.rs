//! Scoring and aggregation against a brute-force scorer that knows which
//! classes each caption mentions.

mod common;

use std::collections::BTreeSet;

use chairdpo::{aggregate, extract_mentions, score_sample, Aggregation, GroundTruth, SampleScore, SynonymLexicon};
use proptest::prelude::*;

const CLASSES: &[&str] = &[
    "dog",
    "cat",
    "car",
    "bus",
    "dining table",
    "fire hydrant",
    "cup",
    "kite",
];
const TARGETS: &[&str] = &["dog", "dining table", "cup"];
const FILLERS: &[&str] = &["a", "the", "and", "near", "big"];

fn lexicon() -> SynonymLexicon {
    SynonymLexicon::new(
        CLASSES.iter().map(|c| (c.to_string(), vec![])),
        TARGETS.iter().map(|c| c.to_string()),
    )
    .unwrap()
}

struct Oracle {
    mentioned: u64,
    hallucinated: u64,
    distinct_hallucinated: u64,
    covered: u64,
    truth: u64,
    cognition: u64,
}

#[allow(clippy::needless_range_loop)]
fn brute(mentions: &[usize], truth: &BTreeSet<usize>) -> Oracle {
    let mut o = Oracle {
        mentioned: mentions.len() as u64,
        hallucinated: 0,
        distinct_hallucinated: 0,
        covered: 0,
        truth: truth.len() as u64,
        cognition: 0,
    };
    for &m in mentions {
        if !truth.contains(&m) {
            o.hallucinated += 1;
        }
    }
    for c in 0..CLASSES.len() {
        let said = mentions.contains(&c);
        if said && truth.contains(&c) {
            o.covered += 1;
        }
        if said && !truth.contains(&c) {
            o.distinct_hallucinated += 1;
            if TARGETS.contains(&CLASSES[c]) {
                o.cognition += 1;
            }
        }
    }
    o
}

fn arb_sample() -> impl Strategy<Value = (Vec<usize>, BTreeSet<usize>)> {
    (
        prop::collection::vec(0..CLASSES.len(), 0..10),
        prop::collection::btree_set(0..CLASSES.len(), 0..5),
    )
}

fn caption(mentions: &[usize], filler_seed: usize) -> String {
    let mut words = Vec::new();
    for (i, &m) in mentions.iter().enumerate() {
        words.push(FILLERS[(i + filler_seed) % FILLERS.len()]);
        words.push(CLASSES[m]);
    }
    words.join(" ")
}

fn score(id: &str, mentions: &[usize], truth: &BTreeSet<usize>, lex: &SynonymLexicon) -> SampleScore {
    let gt = GroundTruth::new("img", truth.iter().map(|&c| CLASSES[c].to_string()));
    score_sample(id, &extract_mentions(&caption(mentions, id.len()), lex), &gt, lex).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn per_sample_counts_match(s in arb_sample()) {
        let lex = lexicon();
        let got = score("s", &s.0, &s.1, &lex);
        let want = brute(&s.0, &s.1);
        prop_assert_eq!(got.mentioned_count, want.mentioned);
        prop_assert_eq!(got.hallucinated_count, want.hallucinated);
        prop_assert_eq!(got.hallucinated_classes.len() as u64, want.distinct_hallucinated);
        prop_assert_eq!(got.covered_count, want.covered);
        prop_assert_eq!(got.truth_count, want.truth);
        prop_assert_eq!(got.cognition_hits, want.cognition);
    }

    #[test]
    fn aggregates_match(samples in prop::collection::vec(arb_sample(), 1..30)) {
        let lex = lexicon();
        let scores: Vec<SampleScore> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| score(&format!("s{i:03}"), &s.0, &s.1, &lex))
            .collect();
        let oracles: Vec<Oracle> = samples.iter().map(|s| brute(&s.0, &s.1)).collect();
        let n = oracles.len() as f64;

        let m: u64 = oracles.iter().map(|o| o.mentioned).sum();
        let h: u64 = oracles.iter().map(|o| o.hallucinated).sum();
        let chair_s = oracles.iter().filter(|o| o.hallucinated > 0).count() as f64 / n;
        let macro_i = oracles
            .iter()
            .map(|o| if o.mentioned == 0 { 0.0 } else { o.hallucinated as f64 / o.mentioned as f64 })
            .sum::<f64>() / n;

        let macro_rep = aggregate(&scores, Aggregation::Macro);
        let micro_rep = aggregate(&scores, Aggregation::Micro);
        let t: u64 = oracles.iter().map(|o| o.truth).sum();
        if t == 0 {
            prop_assert!(macro_rep.is_err());
            return Ok(());
        }
        let macro_rep = macro_rep.unwrap();
        prop_assert!((macro_rep.chair_i - macro_i).abs() < 1e-12);
        prop_assert!((macro_rep.chair_s - chair_s).abs() < 1e-12);
        if m == 0 {
            prop_assert!(micro_rep.is_err());
        } else {
            let micro_rep = micro_rep.unwrap();
            prop_assert!((micro_rep.chair_i - h as f64 / m as f64).abs() < 1e-12);
            let c: u64 = oracles.iter().map(|o| o.covered).sum();
            prop_assert!((micro_rep.coverage - c as f64 / t as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn worked_two_sample_case() {
    let s = |id: &str, h, m| SampleScore {
        sample_id: id.into(),
        mentioned_count: m,
        hallucinated_count: h,
        hallucinated_classes: if h > 0 { vec!["x".into()] } else { vec![] },
        covered_count: 1,
        truth_count: 1,
        cognition_hits: 0,
    };
    let samples = [s("a", 1, 2), s("b", 0, 3)];
    assert_eq!(aggregate(&samples, Aggregation::Macro).unwrap().chair_i, 0.25);
    assert_eq!(aggregate(&samples, Aggregation::Micro).unwrap().chair_i, 0.2);
}

#[test]
fn shipped_lexicon_loads() {
    let lex = common::full_lexicon();
    assert_eq!(lex.num_classes(), 80);
    for t in lex.hallucinatory_targets() {
        assert!(lex.contains_class(t));
    }
    let classes: Vec<String> = extract_mentions("Two people sitting at a dining table with wine glasses", &lex)
        .iter()
        .map(|m| m.class.clone())
        .collect();
    assert_eq!(classes, ["person", "dining table", "wine glass"]);
}
