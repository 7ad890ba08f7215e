//! CHAIR-family hallucination metrics with micro or macro aggregation.
//!
//! `CHAIR_i` treats mentions as a list: a hallucinated class mentioned twice
//! counts twice. Coverage and Cognition work on distinct classes.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{MentionList, SynonymLexicon};

/// Ground-truth object classes for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub objects: BTreeSet<String>,
}

impl GroundTruth {
    pub fn new(image_id: impl Into<String>, objects: impl IntoIterator<Item = String>) -> Self {
        GroundTruth {
            image_id: image_id.into(),
            objects: objects.into_iter().collect(),
        }
    }

    /// Maps every object name (any surface form) to its canonical class.
    pub fn resolve(self, lexicon: &SynonymLexicon) -> Result<Self> {
        let objects = self
            .objects
            .iter()
            .map(|o| {
                lexicon
                    .canonical(o)
                    .map(str::to_string)
                    .ok_or_else(|| Error::UnknownClass(o.clone()))
            })
            .collect::<Result<_>>()?;
        Ok(GroundTruth {
            image_id: self.image_id,
            objects,
        })
    }
}

/// Exact `CHAIR_i` value as a pair of integer counts.
///
/// A zero denominator denotes the zero-mention case, whose value is 0.
/// Comparisons cross-multiply, so equality is exact.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChairRatio {
    pub hallucinated: u64,
    pub mentioned: u64,
}

impl ChairRatio {
    pub fn new(hallucinated: u64, mentioned: u64) -> Self {
        ChairRatio {
            hallucinated,
            mentioned,
        }
    }

    pub fn value(&self) -> f64 {
        if self.mentioned == 0 {
            0.0
        } else {
            self.hallucinated as f64 / self.mentioned as f64
        }
    }

    fn as_fraction(&self) -> (u128, u128) {
        if self.mentioned == 0 {
            (0, 1)
        } else {
            (self.hallucinated as u128, self.mentioned as u128)
        }
    }
}

impl PartialEq for ChairRatio {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for ChairRatio {}

impl PartialOrd for ChairRatio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ChairRatio {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = self.as_fraction();
        let (c, d) = other.as_fraction();
        (a * d).cmp(&(c * b))
    }
}

impl fmt::Display for ChairRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.hallucinated, self.mentioned)
    }
}

/// Per-sample numerators and denominators for every metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub mentioned_count: u64,
    pub hallucinated_count: u64,
    /// Distinct hallucinated classes, sorted.
    pub hallucinated_classes: Vec<String>,
    pub covered_count: u64,
    pub truth_count: u64,
    pub cognition_hits: u64,
}

impl SampleScore {
    pub fn chair_ratio(&self) -> ChairRatio {
        ChairRatio::new(self.hallucinated_count, self.mentioned_count)
    }

    /// Per-sample `CHAIR_i`; 0 when nothing was mentioned.
    pub fn chair_i(&self) -> f64 {
        self.chair_ratio().value()
    }

    pub fn is_hallucinated(&self) -> bool {
        self.hallucinated_count > 0
    }
}

/// Scores one response's mentions against the image's ground truth.
pub fn score_sample(
    sample_id: impl Into<String>,
    mentions: &MentionList,
    truth: &GroundTruth,
    lexicon: &SynonymLexicon,
) -> Result<SampleScore> {
    let mut hallucinated_count = 0u64;
    let mut hallucinated = BTreeSet::new();
    let mut mentioned = BTreeSet::new();
    for class in mentions.classes() {
        if !lexicon.contains_class(class) {
            return Err(Error::UnknownClass(class.to_string()));
        }
        mentioned.insert(class);
        if !truth.objects.contains(class) {
            hallucinated_count += 1;
            hallucinated.insert(class);
        }
    }
    let covered_count = truth.objects.iter().filter(|o| mentioned.contains(o.as_str())).count() as u64;
    let cognition_hits = hallucinated.iter().filter(|c| lexicon.is_target(c)).count() as u64;
    Ok(SampleScore {
        sample_id: sample_id.into(),
        mentioned_count: mentions.len() as u64,
        hallucinated_count,
        hallucinated_classes: hallucinated.into_iter().map(str::to_string).collect(),
        covered_count,
        truth_count: truth.objects.len() as u64,
        cognition_hits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Sum numerators and denominators over the corpus, then divide.
    #[default]
    Micro,
    /// Compute per sample, then average.
    Macro,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Micro => "micro",
            Aggregation::Macro => "macro",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Aggregation::Micro),
            "macro" => Ok(Aggregation::Macro),
            other => Err(Error::Config(format!(
                "aggregation must be micro or macro, got {other:?}"
            ))),
        }
    }
}

/// Why a Cognition value is not informative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CognitionFlag {
    NoHallucinations,
    NoTargets,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cognition {
    pub value: f64,
    pub flag: Option<CognitionFlag>,
}

/// Corpus-level metrics plus the per-sample breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregation: Aggregation,
    pub chair_i: f64,
    pub chair_s: f64,
    pub coverage: f64,
    pub cognition: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cognition_flag: Option<CognitionFlag>,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_sample: Vec<SampleScore>,
}

impl EvalReport {
    /// Hallucination rate; the same quantity as `chair_s`.
    pub fn hal_rate(&self) -> f64 {
        self.chair_s
    }

    /// Marks Cognition as uninformative when the lexicon has no targets.
    pub fn with_lexicon(mut self, lexicon: &SynonymLexicon) -> Self {
        if lexicon.hallucinatory_targets().is_empty() {
            self.cognition = 0.0;
            self.cognition_flag = Some(CognitionFlag::NoTargets);
        }
        self
    }

    /// Drops the per-sample breakdown for compact output.
    pub fn summary(&self) -> Self {
        EvalReport {
            per_sample: Vec::new(),
            ..self.clone()
        }
    }
}

/// Fraction of samples with at least one hallucinated mention (`CHAIR_s`).
pub fn chair_s(per_sample: &[SampleScore]) -> Result<f64> {
    if per_sample.is_empty() {
        return Err(Error::EmptySamples);
    }
    let hits = per_sample.iter().filter(|s| s.is_hallucinated()).count();
    Ok(hits as f64 / per_sample.len() as f64)
}

/// Micro or macro `CHAIR_i`.
pub fn chair_i(per_sample: &[SampleScore], mode: Aggregation) -> Result<f64> {
    if per_sample.is_empty() {
        return Err(Error::EmptySamples);
    }
    match mode {
        Aggregation::Micro => {
            let hallucinated: u64 = per_sample.iter().map(|s| s.hallucinated_count).sum();
            let mentioned: u64 = per_sample.iter().map(|s| s.mentioned_count).sum();
            if mentioned == 0 {
                return Err(Error::NoMentions);
            }
            Ok(hallucinated as f64 / mentioned as f64)
        }
        Aggregation::Macro => {
            let total: f64 = per_sample.iter().map(SampleScore::chair_i).sum();
            Ok(total / per_sample.len() as f64)
        }
    }
}

/// Recall of ground-truth classes among mentioned classes.
///
/// Samples with an empty ground-truth set are skipped in macro mode.
pub fn coverage(per_sample: &[SampleScore], mode: Aggregation) -> Result<f64> {
    match mode {
        Aggregation::Micro => {
            let covered: u64 = per_sample.iter().map(|s| s.covered_count).sum();
            let truth: u64 = per_sample.iter().map(|s| s.truth_count).sum();
            if truth == 0 {
                return Err(Error::NoGroundTruth);
            }
            Ok(covered as f64 / truth as f64)
        }
        Aggregation::Macro => {
            let (sum, n) = per_sample
                .iter()
                .filter(|s| s.truth_count > 0)
                .fold((0.0, 0usize), |(sum, n), s| {
                    (sum + s.covered_count as f64 / s.truth_count as f64, n + 1)
                });
            if n == 0 {
                return Err(Error::NoGroundTruth);
            }
            Ok(sum / n as f64)
        }
    }
}

/// Share of distinct hallucinated classes that are hallucinatory targets.
///
/// Returns 0 with [`CognitionFlag::NoHallucinations`] when nothing was
/// hallucinated.
pub fn cognition(per_sample: &[SampleScore], mode: Aggregation) -> Cognition {
    let vacuous = Cognition {
        value: 0.0,
        flag: Some(CognitionFlag::NoHallucinations),
    };
    match mode {
        Aggregation::Micro => {
            let hits: u64 = per_sample.iter().map(|s| s.cognition_hits).sum();
            let distinct: usize = per_sample.iter().map(|s| s.hallucinated_classes.len()).sum();
            if distinct == 0 {
                return vacuous;
            }
            Cognition {
                value: hits as f64 / distinct as f64,
                flag: None,
            }
        }
        Aggregation::Macro => {
            let (sum, n) =
                per_sample
                    .iter()
                    .filter(|s| !s.hallucinated_classes.is_empty())
                    .fold((0.0, 0usize), |(sum, n), s| {
                        (
                            sum + s.cognition_hits as f64 / s.hallucinated_classes.len() as f64,
                            n + 1,
                        )
                    });
            if n == 0 {
                return vacuous;
            }
            Cognition {
                value: sum / n as f64,
                flag: None,
            }
        }
    }
}

/// Aggregates per-sample scores into a report.
///
/// Samples are folded in ascending `sample_id` order so the result does not
/// depend on how they were produced.
pub fn aggregate(per_sample: &[SampleScore], mode: Aggregation) -> Result<EvalReport> {
    if per_sample.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut sorted = per_sample.to_vec();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let cog = cognition(&sorted, mode);
    Ok(EvalReport {
        aggregation: mode,
        chair_i: chair_i(&sorted, mode)?,
        chair_s: chair_s(&sorted)?,
        coverage: coverage(&sorted, mode)?,
        cognition: cog.value,
        cognition_flag: cog.flag,
        n_samples: sorted.len(),
        per_sample: sorted,
    })
}
