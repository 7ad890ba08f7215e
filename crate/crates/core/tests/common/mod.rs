#![allow(dead_code)]

use std::path::PathBuf;

use chairdpo::pipeline::PipelineConfig;
use chairdpo::toy_world::Vocabulary;
use chairdpo::{SynonymLexicon, ToyPolicy};
use rand::Rng;

pub fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn full_lexicon() -> SynonymLexicon {
    SynonymLexicon::load(repo_path("data/lexicon.json")).unwrap()
}

pub fn toy_config() -> PipelineConfig {
    PipelineConfig::load(repo_path("configs/toy.toml")).unwrap()
}

pub fn small_vocab(objects: usize, connectives: usize) -> Vocabulary {
    let names = ["dog", "cat", "car", "bus", "kite", "cup", "fork", "boat"];
    let conns = ["and", "with", "near"];
    Vocabulary::new(
        names[..objects].iter().map(|s| s.to_string()).collect(),
        conns[..connectives].iter().map(|s| s.to_string()).collect(),
    )
    .unwrap()
}

pub fn random_policy<R: Rng>(vocab: Vocabulary, scale: f64, rng: &mut R) -> ToyPolicy {
    let mut p = ToyPolicy::zeros(vocab);
    for x in p.params_mut() {
        *x = rng.gen_range(-scale..scale);
    }
    p
}
