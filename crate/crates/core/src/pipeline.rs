//! End-to-end synthetic runs: pretrain a reference captioner, build
//! CHAIR-ranked preference data, train with DPO, evaluate, and repeat for
//! the requested number of rounds.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dpo::{evaluate_policy, train, DpoConfig, TrainLogEntry, ValidationSet};
use crate::error::{Error, Result};
use crate::io::{write_json, write_jsonl, GroundTruthIndex};
use crate::lexicon::SynonymLexicon;
use crate::metrics::{Aggregation, EvalReport, GroundTruth};
use crate::preference::{
    auto_holdout, build_dataset, split_validation, BuildConfig, DatasetStats, Dialogue, PreferenceDataset, TiePolicy,
    Turn,
};
use crate::seed::{checksum, derive_seed, stage_rng};
use crate::toy_world::{pretrain_reference, CorpusConfig, SamplingConfig, Scene, ToyPolicy, World, WorldConfig};

/// Preference-data settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Synthetic dialogues to sample pairs for.
    pub source_items: usize,
    /// Held-out scenes for the before/after evaluation.
    pub eval_scenes: usize,
    /// Human turns per dialogue are drawn from `1..=max_turns`.
    pub max_turns: usize,
    pub holdout: usize,
    pub temperature: f64,
    pub max_length: usize,
    pub ties: TiePolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_items: 8000,
            eval_scenes: 500,
            max_turns: 3,
            holdout: 500,
            temperature: 0.7,
            max_length: 24,
            ties: TiePolicy::Filter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub world: WorldConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub dpo: DpoConfig,
    #[serde(default = "one")]
    pub rounds: usize,
}

fn one() -> usize {
    1
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.data.eval_scenes == 0 {
            return Err(Error::Config("eval_scenes must be at least 1".into()));
        }
        if self.data.max_turns == 0 {
            return Err(Error::Config("max_turns must be at least 1".into()));
        }
        self.sampling(1).validate()?;
        self.dpo.validate()?;
        self.world.validate()
    }

    pub fn sampling(&self, round: usize) -> SamplingConfig {
        SamplingConfig {
            temperature: self.data.temperature,
            max_length: self.data.max_length,
            seed: derive_seed(self.seed, &format!("prefs/round-{round}")),
        }
    }

    pub fn dpo_for_round(&self, round: usize) -> DpoConfig {
        DpoConfig {
            seed: derive_seed(self.seed, &format!("dpo/round-{round}")),
            ..self.dpo.clone()
        }
    }
}

const QUESTIONS: [&str; 6] = [
    "Describe this image.",
    "What objects can you see?",
    "What else is in the picture?",
    "Can you list everything in the scene?",
    "Is there anything else worth mentioning?",
    "Give a short caption for the photo.",
];

/// A conversation about `scene` with `1..=max_turns` question/answer rounds.
/// Answers name the scene's objects.
pub fn synth_dialogue<R: Rng + ?Sized>(scene: &Scene, sample_id: String, max_turns: usize, rng: &mut R) -> Dialogue {
    let n = rng.gen_range(1..=max_turns.max(1));
    let answer = scene.objects.iter().cloned().collect::<Vec<_>>().join(" and ");
    let mut turns = Vec::with_capacity(2 * n);
    for _ in 0..n {
        turns.push(Turn::human(QUESTIONS[rng.gen_range(0..QUESTIONS.len())]));
        turns.push(Turn::assistant(format!("I can see {answer}.")));
    }
    Dialogue {
        sample_id,
        image_id: scene.image_id.clone(),
        turns,
    }
}

/// Reference vs tuned metrics on one prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: EvalReport,
    pub tuned: EvalReport,
}

impl Comparison {
    /// Relative change in HalRate, negative when tuning helped.
    pub fn hal_rate_change(&self) -> f64 {
        relative_change(self.reference.hal_rate(), self.tuned.hal_rate())
    }
}

fn relative_change(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        (after - before) / before
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Checksum of the policy that sampled the pairs and anchored training.
    pub reference_checkpoint: String,
    pub best_checkpoint: String,
    pub final_checkpoint: String,
    pub dataset: DatasetStats,
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub holdout: usize,
    pub best_step: usize,
    pub best_validation_chair_i: Option<f64>,
    /// Held-out validation prompts.
    pub validation: Option<Comparison>,
    /// Independent evaluation scenes.
    pub eval: Comparison,
    pub final_kl_estimate: Option<f64>,
    pub files: Vec<FileDigest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub rounds: usize,
    pub lexicon_sha256: String,
    pub config_sha256: String,
    pub reference_checkpoint: String,
    pub final_checkpoint: String,
    /// Initial reference vs last round's selected checkpoint on the
    /// evaluation scenes.
    pub eval: Comparison,
    pub eval_hal_rate_change: f64,
    pub eval_chair_i_change: f64,
    pub per_round: Vec<RoundSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub kept_pairs: usize,
    pub filter_rate: f64,
    pub validation_hal_rate_reference: Option<f64>,
    pub validation_hal_rate_tuned: Option<f64>,
    pub eval_hal_rate: f64,
    pub eval_chair_i: f64,
}

/// In-memory results of a run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub reference: ToyPolicy,
    pub rounds: Vec<RoundArtifacts>,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
pub struct RoundArtifacts {
    pub dataset: PreferenceDataset,
    pub log: Vec<TrainLogEntry>,
    pub best: ToyPolicy,
    pub final_policy: ToyPolicy,
    pub report: RoundReport,
}

/// Shared inputs of every round.
pub struct Setup {
    pub world: World,
    pub reference: ToyPolicy,
    pub scenes: Vec<Scene>,
    pub eval_scenes: Vec<Scene>,
    pub dialogues: Vec<Dialogue>,
    pub truths: GroundTruthIndex,
}

impl Setup {
    pub fn new(config: &PipelineConfig, lexicon: &SynonymLexicon) -> Result<Self> {
        config.validate()?;
        let world = World::new(config.world.clone(), lexicon.clone())?;
        let reference = pretrain_reference(&world, &config.corpus, &mut stage_rng(config.seed, "pretrain"))?;
        let mut rng = stage_rng(config.seed, "scenes");
        let scenes: Vec<Scene> = (0..config.data.source_items)
            .map(|i| world.gen_scene(&mut rng, format!("img-{i:05}")))
            .collect();
        let mut rng = stage_rng(config.seed, "eval-scenes");
        let eval_scenes: Vec<Scene> = (0..config.data.eval_scenes)
            .map(|i| world.gen_scene(&mut rng, format!("eval-{i:05}")))
            .collect();
        let mut rng = stage_rng(config.seed, "dialogues");
        let dialogues = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| synth_dialogue(s, format!("s{i:05}"), config.data.max_turns, &mut rng))
            .collect();
        let truths = scenes.iter().chain(&eval_scenes).map(Scene::ground_truth).collect();
        Ok(Setup {
            world,
            reference,
            scenes,
            eval_scenes,
            dialogues,
            truths,
        })
    }

    fn source(&self) -> Result<Vec<(Dialogue, GroundTruth)>> {
        self.dialogues
            .iter()
            .map(|d| Ok((d.clone(), self.truths.get(&d.image_id)?.clone())))
            .collect()
    }

    fn eval_prompts(&self) -> Vec<(String, GroundTruth)> {
        self.eval_scenes
            .iter()
            .map(|s| (s.image_id.clone(), s.ground_truth()))
            .collect()
    }
}

/// Runs the full pipeline. With `out` set, every artifact is written below
/// it; otherwise nothing touches the disk.
pub fn run_pipeline(config: &PipelineConfig, lexicon: &SynonymLexicon, out: Option<&Path>) -> Result<PipelineRun> {
    let setup = Setup::new(config, lexicon)?;
    let sink = out.map(ArtifactSink::new).transpose()?;
    let lexicon_sha256 = checksum(&serde_json::to_vec(lexicon.classes()).expect("lexicon serializes"));
    let config_json = serde_json::to_string_pretty(config).expect("config serializes") + "\n";
    let config_sha256 = checksum(config_json.as_bytes());
    if let Some(sink) = &sink {
        sink.text("config.resolved.json", &config_json)?;
        let truths: Vec<GroundTruth> = setup.scenes.iter().map(Scene::ground_truth).collect();
        sink.jsonl("scenes.jsonl", &truths)?;
        let eval: Vec<GroundTruth> = setup.eval_scenes.iter().map(Scene::ground_truth).collect();
        sink.jsonl("eval_scenes.jsonl", &eval)?;
        sink.jsonl("dialogues.jsonl", &setup.dialogues)?;
        setup.reference.save(sink.path("reference.policy.json"))?;
    }

    let rounds = iterate_rounds(config, &setup, lexicon, sink.as_ref())?;

    let last = rounds.last().expect("at least one round");
    let eval = Comparison {
        reference: rounds[0].report.eval.reference.clone(),
        tuned: last.report.eval.tuned.clone(),
    };
    let summary = Summary {
        seed: config.seed,
        rounds: config.rounds,
        lexicon_sha256,
        config_sha256,
        reference_checkpoint: setup.reference.checksum(),
        final_checkpoint: last.best.checksum(),
        eval_hal_rate_change: eval.hal_rate_change(),
        eval_chair_i_change: relative_change(eval.reference.chair_i, eval.tuned.chair_i),
        eval,
        per_round: rounds
            .iter()
            .map(|r| RoundSummary {
                round: r.report.round,
                kept_pairs: r.dataset.stats.kept,
                filter_rate: r.dataset.stats.filter_rate(),
                validation_hal_rate_reference: r.report.validation.as_ref().map(|c| c.reference.hal_rate()),
                validation_hal_rate_tuned: r.report.validation.as_ref().map(|c| c.tuned.hal_rate()),
                eval_hal_rate: r.report.eval.tuned.hal_rate(),
                eval_chair_i: r.report.eval.tuned.chair_i,
            })
            .collect(),
    };
    if let Some(sink) = &sink {
        sink.json("summary.json", &summary)?;
    }
    Ok(PipelineRun {
        reference: setup.reference,
        rounds,
        summary,
    })
}

/// Builds data and trains for `config.rounds` rounds. The selected
/// checkpoint of each round samples the next round's pairs and becomes its
/// frozen reference.
pub fn iterate_rounds(
    config: &PipelineConfig,
    setup: &Setup,
    lexicon: &SynonymLexicon,
    sink: Option<&ArtifactSink>,
) -> Result<Vec<RoundArtifacts>> {
    let source = setup.source()?;
    let eval_prompts = setup.eval_prompts();
    let eval_seed = derive_seed(config.seed, "eval");
    let mut current = setup.reference.clone();
    let mut out = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let dpo = config.dpo_for_round(round);
        let dataset = build_dataset(
            &source,
            &current,
            lexicon,
            &BuildConfig {
                sampling: config.sampling(round),
                ties: config.data.ties,
                round,
            },
        )?;
        log::info!(
            "round {round}: kept {} of {} pairs ({:.1}% filtered)",
            dataset.stats.kept,
            dataset.stats.source_items,
            100.0 * dataset.stats.filter_rate()
        );
        let split_seed = derive_seed(config.seed, &format!("split/round-{round}"));
        let holdout = auto_holdout(config.data.holdout, dataset.len());
        if holdout != config.data.holdout {
            log::warn!(
                "round {round}: holdout reduced to {holdout} for {} pairs",
                dataset.len()
            );
        }
        let (train_pairs, val_pairs) = split_validation(&dataset.pairs, holdout, split_seed)?;
        let outcome = train(&current, &train_pairs, &val_pairs, &setup.truths, lexicon, &dpo)?;

        let evaluate = |policy: &ToyPolicy, prompts: &[(String, GroundTruth)], seed: u64| {
            evaluate_policy(
                policy,
                prompts,
                lexicon,
                dpo.validation,
                dpo.max_length,
                seed,
                Aggregation::Micro,
            )
            .map(|r| r.summary())
        };
        let validation = if val_pairs.is_empty() {
            None
        } else {
            let val = ValidationSet::from_pairs(&val_pairs, &setup.truths)?;
            let seed = derive_seed(dpo.seed, "validation");
            Some(Comparison {
                reference: evaluate(&current, &val.prompts, seed)?,
                tuned: evaluate(&outcome.best_policy, &val.prompts, seed)?,
            })
        };
        let eval = Comparison {
            reference: evaluate(&current, &eval_prompts, eval_seed)?,
            tuned: evaluate(&outcome.best_policy, &eval_prompts, eval_seed)?,
        };

        let mut report = RoundReport {
            round,
            reference_checkpoint: current.checksum(),
            best_checkpoint: outcome.best_policy.checksum(),
            final_checkpoint: outcome.final_policy.checksum(),
            dataset: dataset.stats,
            train_pairs: train_pairs.len(),
            validation_pairs: val_pairs.len(),
            holdout,
            best_step: outcome.best_step,
            best_validation_chair_i: outcome.best_validation_chair_i,
            validation,
            eval,
            final_kl_estimate: outcome.log.last().and_then(|e| e.kl_estimate),
            files: Vec::new(),
        };
        if let Some(sink) = sink {
            let dir = format!("round-{round}");
            sink.dir(&dir)?;
            let prefs = format!("{dir}/prefs.jsonl");
            dataset.save(sink.path(&prefs))?;
            let log_path = format!("{dir}/train_log.jsonl");
            sink.jsonl(&log_path, &outcome.log)?;
            let best_path = format!("{dir}/best.policy.json");
            outcome.best_policy.save(sink.path(&best_path))?;
            let final_path = format!("{dir}/final.policy.json");
            outcome.final_policy.save(sink.path(&final_path))?;
            for rel in [
                prefs.clone(),
                format!("{prefs}.meta.json"),
                log_path,
                best_path,
                final_path,
            ] {
                report.files.push(sink.digest(&rel)?);
            }
            sink.json(&format!("{dir}/report.json"), &report)?;
        }
        current = outcome.best_policy.clone();
        out.push(RoundArtifacts {
            dataset,
            log: outcome.log,
            best: outcome.best_policy,
            final_policy: outcome.final_policy,
            report,
        });
    }
    Ok(out)
}

/// Output directory writer.
pub struct ArtifactSink {
    root: PathBuf,
}

impl ArtifactSink {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(ArtifactSink {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn dir(&self, rel: &str) -> Result<()> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))
    }

    fn text(&self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        write_json(self.path(rel), value)
    }

    fn jsonl<T: Serialize>(&self, rel: &str, items: &[T]) -> Result<()> {
        write_jsonl(self.path(rel), items)
    }

    fn digest(&self, rel: &str) -> Result<FileDigest> {
        let p = self.path(rel);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(FileDigest {
            path: rel.to_string(),
            sha256: checksum(&bytes),
        })
    }
}
