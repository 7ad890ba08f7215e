//! CHAIR-ranked preference pairs.
//!
//! For each source dialogue: truncate it at a random human turn, draw two
//! completions from the policy, score both with `CHAIR_i`, and keep the pair
//! with the lower-scoring completion as the winner. Pairs whose scores are
//! exactly equal are dropped unless tie filtering is disabled.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_json, write_jsonl, GroundTruthIndex};
use crate::lexicon::{extract_mentions, SynonymLexicon};
use crate::metrics::{score_sample, ChairRatio, GroundTruth};
use crate::seed::{derive_seed, rng_from_seed};
use crate::toy_world::{SamplingConfig, ToyPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Human,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn human(text: impl Into<String>) -> Self {
        Turn {
            role: Role::Human,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Turn {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

/// A full multi-turn conversation about one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub sample_id: String,
    pub image_id: String,
    pub turns: Vec<Turn>,
}

/// Prior turns plus the question the completions answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub sample_id: String,
    pub image_id: String,
    pub prior_turns: Vec<Turn>,
    pub question: String,
}

/// Cuts the dialogue before a uniformly chosen human turn, which becomes the
/// question.
pub fn truncate_dialogue<R: Rng + ?Sized>(dialogue: &Dialogue, rng: &mut R) -> Result<PromptContext> {
    for (i, turn) in dialogue.turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::Human } else { Role::Assistant };
        if turn.role != expected {
            return Err(Error::MalformedDialogue {
                id: dialogue.sample_id.clone(),
                reason: format!("turn {i} should be {expected:?}"),
            });
        }
    }
    let human: Vec<usize> = (0..dialogue.turns.len()).step_by(2).collect();
    if human.is_empty() {
        return Err(Error::EmptyDialogue(dialogue.sample_id.clone()));
    }
    let at = human[rng.gen_range(0..human.len())];
    let question = dialogue.turns[at].text.clone();
    if question.trim().is_empty() {
        return Err(Error::MalformedDialogue {
            id: dialogue.sample_id.clone(),
            reason: format!("human turn {at} is empty"),
        });
    }
    Ok(PromptContext {
        sample_id: dialogue.sample_id.clone(),
        image_id: dialogue.image_id.clone(),
        prior_turns: dialogue.turns[..at].to_vec(),
        question,
    })
}

/// Two independent temperature samples from the policy, rendered as text.
///
/// The toy captioner conditions on the image only, so the prompt text does
/// not enter here.
pub fn sample_pair<R: Rng + ?Sized>(
    policy: &ToyPolicy,
    scene: &GroundTruth,
    sampling: &SamplingConfig,
    rng: &mut R,
) -> Result<(String, String)> {
    sampling.validate()?;
    let feats = policy.scene_features(&scene.objects)?;
    let y1 = policy.sample(&feats, sampling, rng);
    let y2 = policy.sample(&feats, sampling, rng);
    Ok((policy.vocab().render(&y1), policy.vocab().render(&y2)))
}

/// What to do with a pair whose completions score the same.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Drop the pair.
    #[default]
    Filter,
    /// Keep it, labeling the first completion the winner.
    PreferFirst,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ranked {
    Pair {
        winner: String,
        loser: String,
        chair_winner: ChairRatio,
        chair_loser: ChairRatio,
        tie: bool,
    },
    Filtered,
}

/// Orders two completions by `CHAIR_i`, compared as exact fractions.
pub fn rank_pair(y1: &str, y2: &str, truth: &GroundTruth, lexicon: &SynonymLexicon, ties: TiePolicy) -> Result<Ranked> {
    let c1 = score_sample("y1", &extract_mentions(y1, lexicon), truth, lexicon)?.chair_ratio();
    let c2 = score_sample("y2", &extract_mentions(y2, lexicon), truth, lexicon)?.chair_ratio();
    let pair = |w: &str, l: &str, cw, cl, tie| Ranked::Pair {
        winner: w.to_string(),
        loser: l.to_string(),
        chair_winner: cw,
        chair_loser: cl,
        tie,
    };
    Ok(match c1.cmp(&c2) {
        std::cmp::Ordering::Less => pair(y1, y2, c1, c2, false),
        std::cmp::Ordering::Greater => pair(y2, y1, c2, c1, false),
        std::cmp::Ordering::Equal => match ties {
            TiePolicy::Filter => Ranked::Filtered,
            TiePolicy::PreferFirst => pair(y1, y2, c1, c2, true),
        },
    })
}

/// Prompt plus winner and loser completions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub context: PromptContext,
    pub winner: String,
    pub loser: String,
    pub chair_winner: ChairRatio,
    pub chair_loser: ChairRatio,
}

impl PreferencePair {
    pub fn sample_id(&self) -> &str {
        &self.context.sample_id
    }

    pub fn image_id(&self) -> &str {
        &self.context.image_id
    }

    pub fn is_tie(&self) -> bool {
        self.chair_winner == self.chair_loser
    }
}

/// One line of a preference JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub sample_id: String,
    pub image_id: String,
    pub context: Vec<Turn>,
    pub question: String,
    pub winner: String,
    pub loser: String,
    pub chair_winner_num: u64,
    pub chair_winner_den: u64,
    pub chair_loser_num: u64,
    pub chair_loser_den: u64,
}

impl From<&PreferencePair> for PreferenceRecord {
    fn from(p: &PreferencePair) -> Self {
        PreferenceRecord {
            sample_id: p.context.sample_id.clone(),
            image_id: p.context.image_id.clone(),
            context: p.context.prior_turns.clone(),
            question: p.context.question.clone(),
            winner: p.winner.clone(),
            loser: p.loser.clone(),
            chair_winner_num: p.chair_winner.hallucinated,
            chair_winner_den: p.chair_winner.mentioned,
            chair_loser_num: p.chair_loser.hallucinated,
            chair_loser_den: p.chair_loser.mentioned,
        }
    }
}

impl From<PreferenceRecord> for PreferencePair {
    fn from(r: PreferenceRecord) -> Self {
        PreferencePair {
            context: PromptContext {
                sample_id: r.sample_id,
                image_id: r.image_id,
                prior_turns: r.context,
                question: r.question,
            },
            winner: r.winner,
            loser: r.loser,
            chair_winner: ChairRatio::new(r.chair_winner_num, r.chair_winner_den),
            chair_loser: ChairRatio::new(r.chair_loser_num, r.chair_loser_den),
        }
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub temperature: f64,
    pub max_length: usize,
    pub seed: u64,
    pub round: usize,
    pub ties: TiePolicy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub source_items: usize,
    pub kept: usize,
    pub filtered: usize,
    /// Tied pairs kept under [`TiePolicy::PreferFirst`].
    pub ties_kept: usize,
}

impl DatasetStats {
    pub fn filter_rate(&self) -> f64 {
        if self.source_items == 0 {
            0.0
        } else {
            self.filtered as f64 / self.source_items as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub provenance: Provenance,
    pub stats: DatasetStats,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    provenance: Provenance,
    stats: DatasetStats,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes the pairs as JSONL and provenance/statistics to `<path>.meta.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let records: Vec<PreferenceRecord> = self.pairs.iter().map(Into::into).collect();
        write_jsonl(path, &records)?;
        write_json(
            meta_path(path),
            &DatasetMeta {
                provenance: self.provenance.clone(),
                stats: self.stats,
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let pairs = read_preferences(path)?;
        let meta_path = meta_path(path);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: meta_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(PreferenceDataset {
            pairs,
            provenance: meta.provenance,
            stats: meta.stats,
        })
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

pub fn read_preferences(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    let records: Vec<PreferenceRecord> = read_jsonl(path)?;
    Ok(records.into_iter().map(Into::into).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub sampling: SamplingConfig,
    pub ties: TiePolicy,
    pub round: usize,
}

/// Truncates, samples, ranks and filters every source item.
///
/// Each item draws from its own generator derived from the seed and its
/// `sample_id`, so the output does not depend on scheduling. Output is
/// ordered by `sample_id`.
pub fn build_dataset(
    source: &[(Dialogue, GroundTruth)],
    policy: &ToyPolicy,
    lexicon: &SynonymLexicon,
    config: &BuildConfig,
) -> Result<PreferenceDataset> {
    config.sampling.validate()?;
    let mut ids = BTreeSet::new();
    for (d, _) in source {
        if !ids.insert(d.sample_id.as_str()) {
            return Err(Error::MalformedDialogue {
                id: d.sample_id.clone(),
                reason: "duplicate sample_id".into(),
            });
        }
    }
    let seed = config.sampling.seed;
    let ranked: Vec<Option<(PreferencePair, bool)>> = source
        .par_iter()
        .map(|(dialogue, truth)| {
            let mut rng = rng_from_seed(derive_seed(seed, &format!("pair/{}", dialogue.sample_id)));
            let context = truncate_dialogue(dialogue, &mut rng)?;
            let (y1, y2) = sample_pair(policy, truth, &config.sampling, &mut rng)?;
            Ok(match rank_pair(&y1, &y2, truth, lexicon, config.ties)? {
                Ranked::Filtered => None,
                Ranked::Pair {
                    winner,
                    loser,
                    chair_winner,
                    chair_loser,
                    tie,
                } => Some((
                    PreferencePair {
                        context,
                        winner,
                        loser,
                        chair_winner,
                        chair_loser,
                    },
                    tie,
                )),
            })
        })
        .collect::<Result<_>>()?;

    let mut stats = DatasetStats {
        source_items: source.len(),
        ..DatasetStats::default()
    };
    let mut pairs = Vec::new();
    for item in ranked {
        match item {
            None => stats.filtered += 1,
            Some((pair, tie)) => {
                if tie {
                    stats.ties_kept += 1;
                }
                pairs.push(pair);
            }
        }
    }
    stats.kept = pairs.len();
    pairs.sort_by(|a, b| a.context.sample_id.cmp(&b.context.sample_id));
    if stats.ties_kept > 0 {
        log::info!(
            "kept {} tied pairs with the first completion as winner",
            stats.ties_kept
        );
    }
    Ok(PreferenceDataset {
        pairs,
        provenance: Provenance {
            checkpoint_id: policy.checksum(),
            temperature: config.sampling.temperature,
            max_length: config.sampling.max_length,
            seed,
            round: config.round,
            ties: config.ties,
        },
        stats,
    })
}

/// One line of an externally sampled completions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub sample_id: String,
    pub image_id: String,
    #[serde(default)]
    pub context: Vec<Turn>,
    pub question: String,
    pub completions: [String; 2],
}

/// Ranks externally sampled completion pairs.
pub fn rank_completions(
    records: &[CompletionRecord],
    truths: &GroundTruthIndex,
    lexicon: &SynonymLexicon,
    ties: TiePolicy,
) -> Result<(Vec<PreferencePair>, DatasetStats)> {
    let mut stats = DatasetStats {
        source_items: records.len(),
        ..DatasetStats::default()
    };
    let mut pairs = Vec::new();
    for r in records {
        let truth = truths.get(&r.image_id)?;
        let [y1, y2] = &r.completions;
        match rank_pair(y1, y2, truth, lexicon, ties)? {
            Ranked::Filtered => stats.filtered += 1,
            Ranked::Pair {
                winner,
                loser,
                chair_winner,
                chair_loser,
                tie,
            } => {
                stats.ties_kept += tie as usize;
                pairs.push(PreferencePair {
                    context: PromptContext {
                        sample_id: r.sample_id.clone(),
                        image_id: r.image_id.clone(),
                        prior_turns: r.context.clone(),
                        question: r.question.clone(),
                    },
                    winner,
                    loser,
                    chair_winner,
                    chair_loser,
                });
            }
        }
    }
    stats.kept = pairs.len();
    pairs.sort_by(|a, b| a.context.sample_id.cmp(&b.context.sample_id));
    Ok((pairs, stats))
}

/// Seeded split into `(train, validation)` with `holdout` validation pairs.
/// Both halves keep `sample_id` order.
pub fn split_validation(
    pairs: &[PreferencePair],
    holdout: usize,
    seed: u64,
) -> Result<(Vec<PreferencePair>, Vec<PreferencePair>)> {
    if holdout >= pairs.len() {
        return Err(Error::HoldoutTooLarge {
            holdout,
            size: pairs.len(),
        });
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng_from_seed(seed));
    let mut is_val = vec![false; pairs.len()];
    for &i in &order[..holdout] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (pair, v) in pairs.iter().zip(is_val) {
        if v {
            val.push(pair.clone());
        } else {
            train.push(pair.clone());
        }
    }
    Ok((train, val))
}

/// Default holdout shrunk for small datasets: at most a fifth of the data.
pub fn auto_holdout(requested: usize, size: usize) -> usize {
    requested.min(size / 5)
}
