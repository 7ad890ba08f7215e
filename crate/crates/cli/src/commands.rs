use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use chairdpo::dpo::{self, evaluate_policy, DpoConfig, ValidationDecoding};
use chairdpo::io::{load_ground_truth, read_jsonl, write_json, write_jsonl};
use chairdpo::pipeline::{run_pipeline, PipelineConfig, RoundReport, Summary};
use chairdpo::preference::{
    auto_holdout, build_dataset, rank_completions, read_preferences, split_validation, BuildConfig, CompletionRecord,
    Dialogue, PreferenceDataset, Provenance,
};
use chairdpo::seed::{checksum, derive_seed};
use chairdpo::{
    aggregate, extract_mentions, score_sample, Error, MentionList, SamplingConfig, SynonymLexicon, TiePolicy, ToyPolicy,
};

use crate::{
    BuildPrefsArgs, Cli, Command, Decoding, EvalArgs, ExtractArgs, Global, InputFormat, PipelineArgs, ReportArgs,
    ScoreArgs, TrainArgs,
};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_config() => EXIT_USAGE,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.global.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Extract(a) => extract(g, a),
        Command::Score(a) => score(g, a),
        Command::BuildPrefs(a) => build_prefs(g, a),
        Command::Train(a) => train(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Pipeline(a) => pipeline(g, a),
        Command::Report(a) => report(g, a),
    }
}

/// Snapshot of a command's effective settings, written next to its outputs.
#[derive(Debug, Serialize)]
struct RunConfig<'a> {
    command: &'a str,
    seed: u64,
    lexicon: Option<FileDigest>,
    inputs: Vec<FileDigest>,
    settings: serde_json::Value,
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: checksum(&bytes),
    })
}

fn seed(g: &Global) -> u64 {
    g.seed.unwrap_or(0)
}

fn lexicon(g: &Global) -> Result<SynonymLexicon> {
    Ok(SynonymLexicon::load(&g.lexicon)?)
}

fn require_out<'a>(g: &'a Global, command: &str) -> Result<&'a Path> {
    let out = g
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("{command} needs --out <DIR>")))?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(out)
}

fn write_run_config(
    out: &Path,
    command: &str,
    g: &Global,
    uses_lexicon: bool,
    inputs: &[&Path],
    settings: serde_json::Value,
) -> Result<()> {
    let cfg = RunConfig {
        command,
        seed: seed(g),
        lexicon: if uses_lexicon { Some(digest(&g.lexicon)?) } else { None },
        inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        settings,
    };
    Ok(write_json(out.join("run_config.json"), &cfg)?)
}

/// Writes `value` as pretty JSON to `out/name`, or to stdout without `--out`.
fn emit_json<T: Serialize>(g: &Global, name: &str, value: &T) -> Result<()> {
    match &g.out {
        Some(out) => {
            fs::create_dir_all(out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            Ok(write_json(out.join(name), value)?)
        }
        None => {
            let text = serde_json::to_string_pretty(value).expect("serializable");
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Deserialize)]
struct TextRecord {
    sample_id: String,
    text: String,
}

#[derive(Debug, Serialize)]
struct MentionRecord<'a> {
    sample_id: &'a str,
    mentions: MentionList,
}

fn extract(g: &Global, a: &ExtractArgs) -> Result<()> {
    let lex = lexicon(g)?;
    let format = a
        .format
        .unwrap_or_else(|| match a.input.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "json") => InputFormat::Jsonl,
            _ => InputFormat::Text,
        });
    let records: Vec<TextRecord> = match format {
        InputFormat::Jsonl => read_jsonl(&a.input)?,
        InputFormat::Text => {
            let file = fs::File::open(&a.input).map_err(|e| Error::Io {
                path: a.input.clone(),
                source: e,
            })?;
            BufReader::new(file)
                .lines()
                .enumerate()
                .map(|(i, line)| {
                    line.map(|text| TextRecord {
                        sample_id: (i + 1).to_string(),
                        text,
                    })
                    .map_err(|e| {
                        CliError::Core(Error::Io {
                            path: a.input.clone(),
                            source: e,
                        })
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    let out: Vec<MentionRecord> = records
        .iter()
        .map(|r| MentionRecord {
            sample_id: &r.sample_id,
            mentions: extract_mentions(&r.text, &lex),
        })
        .collect();
    match &g.out {
        Some(_) => {
            let dir = require_out(g, "extract")?;
            write_jsonl(dir.join("mentions.jsonl"), &out)?;
            write_run_config(
                dir,
                "extract",
                g,
                true,
                &[&a.input],
                json!({ "format": format!("{format:?}").to_lowercase() }),
            )
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            for r in &out {
                let line = serde_json::to_string(r).expect("serializable");
                writeln!(w, "{line}").map_err(|e| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                })?;
            }
            Ok(())
        }
    }
}

#[derive(Debug, Deserialize)]
struct ResponseRecord {
    sample_id: String,
    image_id: String,
    text: String,
}

fn score(g: &Global, a: &ScoreArgs) -> Result<()> {
    let lex = lexicon(g)?;
    let truths = load_ground_truth(&a.detections, &lex)?;
    let responses: Vec<ResponseRecord> = read_jsonl(&a.responses)?;
    let scores = responses
        .iter()
        .map(|r| {
            let truth = truths.get(&r.image_id)?;
            score_sample(r.sample_id.clone(), &extract_mentions(&r.text, &lex), truth, &lex)
        })
        .collect::<chairdpo::Result<Vec<_>>>()?;
    let mut report = aggregate(&scores, a.aggregation)?.with_lexicon(&lex);
    if !a.per_sample {
        report = report.summary();
    }
    emit_json(g, "report.json", &report)?;
    if let Some(out) = &g.out {
        write_run_config(
            out,
            "score",
            g,
            true,
            &[&a.responses, &a.detections],
            json!({ "aggregation": a.aggregation, "per_sample": a.per_sample }),
        )?;
    }
    Ok(())
}

fn build_prefs(g: &Global, a: &BuildPrefsArgs) -> Result<()> {
    let out = require_out(g, "build-prefs")?;
    let lex = lexicon(g)?;
    let truths = load_ground_truth(&a.detections, &lex)?;
    let ties = if a.no_filter {
        TiePolicy::PreferFirst
    } else {
        TiePolicy::Filter
    };
    let sampling = SamplingConfig {
        temperature: a.temperature,
        max_length: a.max_length,
        seed: seed(g),
    };
    let mut inputs: Vec<&Path> = vec![&a.detections];
    let dataset = match (&a.policy, &a.dialogues, &a.completions) {
        (Some(policy_path), Some(dialogues_path), None) => {
            let policy = ToyPolicy::load(policy_path)?;
            let dialogues: Vec<Dialogue> = read_jsonl(dialogues_path)?;
            let source = dialogues
                .into_iter()
                .map(|d| {
                    let t = truths.get(&d.image_id)?.clone();
                    Ok((d, t))
                })
                .collect::<chairdpo::Result<Vec<_>>>()?;
            inputs.extend([policy_path.as_path(), dialogues_path.as_path()]);
            build_dataset(
                &source,
                &policy,
                &lex,
                &BuildConfig {
                    sampling,
                    ties,
                    round: a.round,
                },
            )?
        }
        (None, _, Some(completions_path)) => {
            sampling.validate()?;
            let records: Vec<CompletionRecord> = read_jsonl(completions_path)?;
            let (pairs, stats) = rank_completions(&records, &truths, &lex, ties)?;
            inputs.push(completions_path);
            PreferenceDataset {
                pairs,
                provenance: Provenance {
                    checkpoint_id: format!("external:{}", digest(completions_path)?.sha256),
                    temperature: a.temperature,
                    max_length: a.max_length,
                    seed: seed(g),
                    round: a.round,
                    ties,
                },
                stats,
            }
        }
        _ => {
            return Err(CliError::Usage(
                "build-prefs needs either --policy with --dialogues, or --completions".into(),
            ))
        }
    };
    dataset.save(out.join("prefs.jsonl"))?;
    write_run_config(
        out,
        "build-prefs",
        g,
        true,
        &inputs,
        json!({
            "temperature": a.temperature,
            "max_length": a.max_length,
            "ties": ties,
            "round": a.round,
        }),
    )?;
    eprintln!(
        "kept {} of {} pairs ({} filtered)",
        dataset.stats.kept, dataset.stats.source_items, dataset.stats.filtered
    );
    Ok(())
}

fn load_dpo_config(path: &Path) -> Result<DpoConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct TrainReport {
    reference_checkpoint: String,
    best_checkpoint: String,
    final_checkpoint: String,
    train_pairs: usize,
    validation_pairs: usize,
    best_step: usize,
    best_validation_chair_i: Option<f64>,
    last: Option<dpo::TrainLogEntry>,
}

fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let out = require_out(g, "train")?;
    let mut cfg = match &a.config {
        Some(p) => load_dpo_config(p)?,
        None => DpoConfig::toy(),
    };
    if let Some(beta) = a.beta {
        cfg.beta = beta;
    }
    if let Some(steps) = a.steps {
        cfg.total_steps = steps;
        cfg.warmup_steps = cfg.warmup_steps.min(steps);
    }
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    cfg.validate()?;

    let lex = lexicon(g)?;
    let truths = load_ground_truth(&a.detections, &lex)?;
    let reference = ToyPolicy::load(&a.policy)?;
    let pairs = read_preferences(&a.prefs)?;
    let holdout = auto_holdout(a.holdout, pairs.len());
    let (train_pairs, val_pairs) = split_validation(&pairs, holdout, derive_seed(cfg.seed, "split"))?;
    let outcome = dpo::train(&reference, &train_pairs, &val_pairs, &truths, &lex, &cfg)?;

    outcome.best_policy.save(out.join("best.policy.json"))?;
    outcome.final_policy.save(out.join("final.policy.json"))?;
    write_jsonl(out.join("train_log.jsonl"), &outcome.log)?;
    let report = TrainReport {
        reference_checkpoint: outcome.reference_checksum.clone(),
        best_checkpoint: outcome.best_policy.checksum(),
        final_checkpoint: outcome.final_policy.checksum(),
        train_pairs: train_pairs.len(),
        validation_pairs: val_pairs.len(),
        best_step: outcome.best_step,
        best_validation_chair_i: outcome.best_validation_chair_i,
        last: outcome.log.last().cloned(),
    };
    write_json(out.join("report.json"), &report)?;
    write_run_config(
        out,
        "train",
        g,
        true,
        &[&a.prefs, &a.policy, &a.detections],
        json!({ "dpo": cfg, "holdout": holdout }),
    )
}

fn eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let lex = lexicon(g)?;
    let truths = load_ground_truth(&a.detections, &lex)?;
    let policy = ToyPolicy::load(&a.policy)?;
    let prompts: Vec<_> = truths.iter().map(|t| (t.image_id.clone(), t.clone())).collect();
    if prompts.is_empty() {
        return Err(CliError::Core(Error::EmptySamples));
    }
    let decoding = match a.decoding {
        Decoding::Greedy => ValidationDecoding::Greedy,
        Decoding::Sampled => ValidationDecoding::Sampled {
            temperature: a.temperature,
            samples_per_prompt: a.samples,
        },
    };
    if a.max_length == 0 {
        return Err(CliError::Usage("--max-length must be at least 1".into()));
    }
    if let ValidationDecoding::Sampled {
        temperature,
        samples_per_prompt,
    } = decoding
    {
        if !(temperature > 0.0 && temperature.is_finite()) || samples_per_prompt == 0 {
            return Err(CliError::Usage(
                "sampled decoding needs --temperature > 0 and --samples >= 1".into(),
            ));
        }
    }
    let mut report = evaluate_policy(&policy, &prompts, &lex, decoding, a.max_length, seed(g), a.aggregation)?;
    if !a.per_sample {
        report = report.summary();
    }
    emit_json(g, "report.json", &report)?;
    if let Some(out) = &g.out {
        write_run_config(
            out,
            "eval",
            g,
            true,
            &[&a.policy, &a.detections],
            json!({ "decoding": decoding, "max_length": a.max_length, "aggregation": a.aggregation }),
        )?;
    }
    Ok(())
}

fn pipeline(g: &Global, a: &PipelineArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", a.config.display())))?;
    let mut cfg =
        PipelineConfig::from_toml_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.config.display())))?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.rounds {
        cfg.rounds = r;
    }
    if let Some(b) = a.beta {
        cfg.dpo.beta = b;
    }
    if let Some(t) = a.temperature {
        cfg.data.temperature = t;
    }
    if let Some(h) = a.holdout {
        cfg.data.holdout = h;
    }
    if a.no_filter {
        cfg.data.ties = TiePolicy::PreferFirst;
    }
    cfg.validate()?;
    let out = require_out(g, "pipeline")?;
    let lex = lexicon(g)?;
    let run = run_pipeline(&cfg, &lex, Some(out))?;
    write_run_config(
        out,
        "pipeline",
        g,
        true,
        &[&a.config],
        serde_json::to_value(&cfg).expect("serializable"),
    )?;
    let s = &run.summary;
    println!(
        "HalRate {:.4} -> {:.4}, CHAIR_i {:.4} -> {:.4} ({} round(s)); artifacts in {}",
        s.eval.reference.hal_rate(),
        s.eval.tuned.hal_rate(),
        s.eval.reference.chair_i,
        s.eval.tuned.chair_i,
        s.rounds,
        out.display()
    );
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    })
}

fn report(g: &Global, a: &ReportArgs) -> Result<()> {
    let summary: Summary = read_json(&a.run.join("summary.json"))?;
    let mut csv = String::from(
        "round,kept_pairs,filter_rate,best_step,best_val_chair_i,\
         val_hal_rate_ref,val_hal_rate_tuned,eval_hal_rate_ref,eval_hal_rate_tuned,\
         eval_chair_i_ref,eval_chair_i_tuned,eval_coverage_ref,eval_coverage_tuned,kl_estimate\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for round in 1..=summary.rounds {
        let r: RoundReport = read_json(&a.run.join(format!("round-{round}/report.json")))?;
        let val = r.validation.as_ref();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.round,
            r.dataset.kept,
            r.dataset.filter_rate(),
            r.best_step,
            opt(r.best_validation_chair_i),
            opt(val.map(|c| c.reference.hal_rate())),
            opt(val.map(|c| c.tuned.hal_rate())),
            r.eval.reference.hal_rate(),
            r.eval.tuned.hal_rate(),
            r.eval.reference.chair_i,
            r.eval.tuned.chair_i,
            r.eval.reference.coverage,
            r.eval.tuned.coverage,
            opt(r.final_kl_estimate),
        ));
    }
    match &g.out {
        Some(out) => {
            fs::create_dir_all(out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let path = out.join("report.csv");
            fs::write(&path, csv).map_err(|e| CliError::Core(Error::Io { path, source: e }))
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
