//! Synthetic scenes and the hallucination-prone pretraining corpus.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::policy::{SceneFeatures, TokenId, ToyPolicy, Vocabulary};
use crate::dpo::{Adam, AdamConfig, Schedule};
use crate::error::{Error, Result};
use crate::lexicon::{extract_mentions, normalize_term, SynonymLexicon};
use crate::metrics::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSize {
    pub min: usize,
    pub max: usize,
}

impl SceneSize {
    pub fn fixed(n: usize) -> Self {
        SceneSize { min: n, max: n }
    }
}

impl Default for SceneSize {
    fn default() -> Self {
        SceneSize { min: 2, max: 6 }
    }
}

/// Classes, co-occurrence groups and scene statistics of the toy world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub classes: Vec<String>,
    #[serde(default)]
    pub groups: Vec<Vec<String>>,
    #[serde(default)]
    pub scene_size: SceneSize,
    /// Probability that each object slot is drawn from the scene's group.
    #[serde(default)]
    pub group_correlation: f64,
    #[serde(default = "default_connectives")]
    pub connectives: Vec<String>,
}

pub fn default_connectives() -> Vec<String> {
    ["and", "with", "near", "beside", "behind"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl WorldConfig {
    /// Checks internal consistency. Class and group names must already be
    /// canonical (normalized) names.
    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        let SceneSize { min, max } = self.scene_size;
        if min == 0 || min > max {
            return Err(Error::Config(format!(
                "scene size range {min}..={max} is empty or starts at zero"
            )));
        }
        if k < max {
            return Err(Error::TooFewClasses {
                classes: k,
                min_size: max,
            });
        }
        if !(0.0..=1.0).contains(&self.group_correlation) {
            return Err(Error::Config(format!(
                "group_correlation {} is outside [0, 1]",
                self.group_correlation
            )));
        }
        let classes: BTreeSet<&String> = self.classes.iter().collect();
        if classes.len() != k {
            return Err(Error::Config("world classes contain duplicates".into()));
        }
        for group in &self.groups {
            if group.is_empty() {
                return Err(Error::Config("empty co-occurrence group".into()));
            }
            if let Some(missing) = group.iter().find(|c| !classes.contains(c)) {
                return Err(Error::Config(format!("group member {missing:?} is not a world class")));
            }
        }
        Ok(())
    }

    fn class_index(&self, name: &str) -> usize {
        self.classes.iter().position(|c| c == name).expect("validated")
    }
}

/// One synthetic image: the objects a detector would report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: String,
    pub objects: BTreeSet<String>,
    pub co_occurrence_group: usize,
}

impl Scene {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            image_id: self.image_id.clone(),
            objects: self.objects.clone(),
        }
    }
}

/// Samples a scene of `scene_size` objects; each slot comes from the scene's
/// co-occurrence group with probability `group_correlation`.
pub fn gen_scene<R: Rng + ?Sized>(rng: &mut R, config: &WorldConfig, image_id: impl Into<String>) -> Result<Scene> {
    config.validate()?;
    let k = config.classes.len();
    let n = rng.gen_range(config.scene_size.min..=config.scene_size.max);
    let group = if config.groups.is_empty() {
        0
    } else {
        rng.gen_range(0..config.groups.len())
    };
    let members: Vec<usize> = config
        .groups
        .get(group)
        .map(|g| g.iter().map(|c| config.class_index(c)).collect())
        .unwrap_or_default();

    let mut chosen = vec![false; k];
    let mut count = 0;
    while count < n {
        let from_group =
            config.group_correlation > 0.0 && !members.is_empty() && rng.gen_bool(config.group_correlation);
        let pool: Vec<usize> = if from_group {
            members.iter().copied().filter(|&c| !chosen[c]).collect()
        } else {
            Vec::new()
        };
        let pick = if pool.is_empty() {
            let free: Vec<usize> = (0..k).filter(|&c| !chosen[c]).collect();
            free[rng.gen_range(0..free.len())]
        } else {
            pool[rng.gen_range(0..pool.len())]
        };
        chosen[pick] = true;
        count += 1;
    }
    Ok(Scene {
        image_id: image_id.into(),
        objects: (0..k)
            .filter(|&c| chosen[c])
            .map(|c| config.classes[c].clone())
            .collect(),
        co_occurrence_group: group,
    })
}

/// Lexicon, world configuration and the captioner vocabulary derived from
/// them.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    lexicon: SynonymLexicon,
    vocab: Vocabulary,
}

impl World {
    /// Resolves world class names through the lexicon and checks that
    /// connective tokens never read as object mentions.
    pub fn new(mut config: WorldConfig, lexicon: SynonymLexicon) -> Result<Self> {
        let resolve = |name: &String| -> Result<String> {
            lexicon
                .canonical(name)
                .filter(|c| *c == normalize_term(name))
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("world class {name:?} is not a lexicon class")))
        };
        config.classes = config.classes.iter().map(resolve).collect::<Result<_>>()?;
        for group in &mut config.groups {
            *group = group.iter().map(resolve).collect::<Result<_>>()?;
        }
        config.validate()?;
        for c in &config.connectives {
            if c.split_whitespace().count() != 1 || !extract_mentions(c, &lexicon).is_empty() {
                return Err(Error::Config(format!(
                    "connective {c:?} must be a single non-object word"
                )));
            }
        }
        let vocab = Vocabulary::new(config.classes.clone(), config.connectives.clone())?;
        Ok(World { config, lexicon, vocab })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn lexicon(&self) -> &SynonymLexicon {
        &self.lexicon
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn gen_scene<R: Rng + ?Sized>(&self, rng: &mut R, image_id: impl Into<String>) -> Scene {
        gen_scene(rng, &self.config, image_id).expect("validated at construction")
    }

    /// Group members absent from the scene: the candidates for an injected
    /// hallucination.
    pub fn absent_group_mates(&self, scene: &Scene) -> Vec<String> {
        self.config
            .groups
            .get(scene.co_occurrence_group)
            .map(|g| g.iter().filter(|c| !scene.objects.contains(*c)).cloned().collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Per-caption probability of mentioning one absent group mate.
    pub hallucination_prob: f64,
    pub captions: usize,
    /// L2 penalty on the logit table during the fit.
    pub l2: f64,
    pub fit_steps: usize,
    pub fit_lr: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            hallucination_prob: 0.3,
            captions: 3000,
            l2: 1e-4,
            fit_steps: 300,
            fit_lr: 0.1,
        }
    }
}

/// A reference caption for `scene`: the objects in random order joined by
/// random connectives, ending in EOS. With probability `hallucination_prob`
/// one absent group mate is spliced in at a random position.
pub fn synth_caption<R: Rng + ?Sized>(
    world: &World,
    scene: &Scene,
    hallucination_prob: f64,
    rng: &mut R,
) -> Vec<TokenId> {
    let vocab = world.vocab();
    let mut objects: Vec<&String> = scene.objects.iter().collect();
    objects.shuffle(rng);
    let mates = world.absent_group_mates(scene);
    if hallucination_prob > 0.0 && !mates.is_empty() && rng.gen_bool(hallucination_prob) {
        let mate = &mates[rng.gen_range(0..mates.len())];
        let at = rng.gen_range(0..=objects.len());
        objects.insert(at, mate);
    }
    let conn = vocab.num_objects();
    let n_conn = vocab.connectives().len();
    let mut tokens = Vec::with_capacity(2 * objects.len());
    for (i, o) in objects.iter().enumerate() {
        if i > 0 && n_conn > 0 {
            tokens.push(conn + rng.gen_range(0..n_conn));
        }
        tokens.push(vocab.object_id(o).expect("world class"));
    }
    tokens.push(vocab.eos());
    tokens
}

const GRAD_CHUNK: usize = 128;

/// Maximum-likelihood (lightly L2-regularized) fit of the logit table on a
/// synthetic caption corpus. Full-batch Adam with a cosine schedule.
pub fn pretrain_reference<R: Rng + ?Sized>(world: &World, corpus: &CorpusConfig, rng: &mut R) -> Result<ToyPolicy> {
    if corpus.captions == 0 {
        return Err(Error::EmptyCorpus);
    }
    if !(0.0..=1.0).contains(&corpus.hallucination_prob) {
        return Err(Error::Config(format!(
            "hallucination_prob {} is outside [0, 1]",
            corpus.hallucination_prob
        )));
    }
    let mut policy = ToyPolicy::zeros(world.vocab().clone());
    let data: Vec<(SceneFeatures, Vec<TokenId>)> = (0..corpus.captions)
        .map(|i| {
            let scene = world.gen_scene(rng, format!("corpus-{i:06}"));
            let caption = synth_caption(world, &scene, corpus.hallucination_prob, rng);
            let feats = policy.scene_features(&scene.objects).expect("world classes");
            (feats, caption)
        })
        .collect();

    let schedule = Schedule {
        peak_lr: corpus.fit_lr,
        warmup_steps: 0,
        total_steps: corpus.fit_steps,
    };
    let mut adam = Adam::new(policy.num_params(), AdamConfig::default());
    let scale = -1.0 / data.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    for step in 1..=corpus.fit_steps {
        // Fixed-size chunks summed in order keep the result independent of
        // the thread count.
        let partials: Vec<Vec<f64>> = data
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; policy.num_params()];
                for (feats, caption) in chunk {
                    policy.logprob_unchecked(feats, caption, Some((scale, &mut g)));
                }
                g
            })
            .collect();
        grad.fill(0.0);
        for part in &partials {
            for (g, p) in grad.iter_mut().zip(part) {
                *g += p;
            }
        }
        for (g, p) in grad.iter_mut().zip(policy.params()) {
            *g += corpus.l2 * p;
        }
        let lr = schedule.lr_at(step)?;
        adam.step(&mut policy, &grad, lr)?;
    }
    Ok(policy)
}

/// Mean negative log-likelihood per caption.
pub fn corpus_nll(policy: &ToyPolicy, data: &[(SceneFeatures, Vec<TokenId>)]) -> f64 {
    let total: f64 = data.iter().map(|(f, c)| policy.logprob_unchecked(f, c, None)).sum();
    -total / data.len() as f64
}
