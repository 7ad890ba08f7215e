//! Minibatch DPO training with validation-based checkpoint selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{dpo_grad, dpo_loss, encode_pairs, EncodedPair};
use super::optim::{Adam, AdamConfig, Schedule};
use crate::error::{Error, Result};
use crate::io::GroundTruthIndex;
use crate::lexicon::{extract_mentions, SynonymLexicon};
use crate::metrics::{aggregate, score_sample, Aggregation, EvalReport, GroundTruth, SampleScore};
use crate::preference::PreferencePair;
use crate::seed::{derive_seed, rng_from_seed, stage_rng};
use crate::toy_world::{SamplingConfig, ToyPolicy};

/// How validation completions are generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ValidationDecoding {
    Greedy,
    /// Seeded temperature sampling. Every evaluation reuses the same
    /// per-prompt generators.
    Sampled {
        temperature: f64,
        samples_per_prompt: usize,
    },
}

impl Default for ValidationDecoding {
    fn default() -> Self {
        ValidationDecoding::Sampled {
            temperature: 0.7,
            samples_per_prompt: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_every: usize,
    /// Completions drawn from the policy per KL estimate.
    pub kl_samples: usize,
    pub validation: ValidationDecoding,
    pub max_length: usize,
    pub adam: AdamConfig,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl DpoConfig {
    /// Defaults sized for the toy captioner.
    pub fn toy() -> Self {
        DpoConfig {
            beta: 0.2,
            peak_lr: 1e-2,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 32,
            seed: 0,
            validation_every: 100,
            kl_samples: 256,
            validation: ValidationDecoding::default(),
            max_length: 24,
            adam: AdamConfig::default(),
        }
    }

    /// Published LLaVA-1.5-7B settings. Far too small a learning rate for
    /// the toy model; kept for reference.
    pub fn llava_scale() -> Self {
        DpoConfig {
            peak_lr: 2e-6,
            warmup_steps: 33,
            batch_size: 64,
            ..Self::toy()
        }
    }

    /// Published Llama-3-LLaVA-NeXT-8B settings.
    pub fn llava_next_scale() -> Self {
        DpoConfig {
            peak_lr: 2e-6,
            warmup_steps: 145,
            batch_size: 16,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.validation_every == 0 {
            return bad("validation_every must be positive".into());
        }
        if self.max_length == 0 {
            return bad("max_length must be at least 1".into());
        }
        if let ValidationDecoding::Sampled {
            temperature,
            samples_per_prompt,
        } = self.validation
        {
            if !(temperature > 0.0 && temperature.is_finite()) || samples_per_prompt == 0 {
                return bad("sampled validation needs a positive temperature and sample count".into());
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }
}

pub fn lr_at(step: usize, config: &DpoConfig) -> Result<f64> {
    config.schedule().lr_at(step)
}

/// Validation prompts: one image per held-out pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    pub prompts: Vec<(String, GroundTruth)>,
}

impl ValidationSet {
    pub fn from_pairs(pairs: &[PreferencePair], truths: &GroundTruthIndex) -> Result<Self> {
        let mut prompts = pairs
            .iter()
            .map(|p| Ok((p.sample_id().to_string(), truths.get(p.image_id())?.clone())))
            .collect::<Result<Vec<_>>>()?;
        prompts.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(ValidationSet { prompts })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Decodes completions for every prompt and scores them. With sampled
/// decoding each prompt contributes `samples_per_prompt` scored samples.
pub fn evaluate_policy(
    policy: &ToyPolicy,
    prompts: &[(String, GroundTruth)],
    lexicon: &SynonymLexicon,
    decoding: ValidationDecoding,
    max_length: usize,
    seed: u64,
    mode: Aggregation,
) -> Result<EvalReport> {
    let mut scores = Vec::new();
    for (id, truth) in prompts {
        let feats = policy.scene_features(&truth.objects)?;
        let mut push = |sample_id: String, tokens: &[usize]| -> Result<()> {
            let text = policy.vocab().render(tokens);
            scores.push(score_sample(
                sample_id,
                &extract_mentions(&text, lexicon),
                truth,
                lexicon,
            )?);
            Ok(())
        };
        match decoding {
            ValidationDecoding::Greedy => push(id.clone(), &policy.greedy(&feats, max_length))?,
            ValidationDecoding::Sampled {
                temperature,
                samples_per_prompt,
            } => {
                let cfg = SamplingConfig {
                    temperature,
                    max_length,
                    seed,
                };
                let mut rng = rng_from_seed(derive_seed(seed, &format!("validation/{id}")));
                for j in 0..samples_per_prompt {
                    push(format!("{id}#{j}"), &policy.sample(&feats, &cfg, &mut rng))?;
                }
            }
        }
    }
    Ok(report_or_zero(&scores, mode)?.with_lexicon(lexicon))
}

/// Aggregates, treating a set with no mentions at all as hallucination-free.
fn report_or_zero(scores: &[SampleScore], mode: Aggregation) -> Result<EvalReport> {
    match aggregate(scores, mode) {
        Err(Error::NoMentions) => {
            // With no mentions anywhere every per-sample metric is 0, so the
            // macro fold gives the same numbers micro would.
            let mut rep = aggregate(scores, Aggregation::Macro)?;
            rep.aggregation = mode;
            Ok(rep)
        }
        other => other,
    }
}

/// Monte Carlo estimate of KL(policy || reference) on the validation prompts.
pub fn estimate_kl(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    prompts: &[(String, GroundTruth)],
    samples: usize,
    max_length: usize,
    seed: u64,
) -> Result<Option<f64>> {
    if prompts.is_empty() || samples == 0 {
        return Ok(None);
    }
    let cfg = SamplingConfig {
        temperature: 1.0,
        max_length,
        seed,
    };
    let mut rng = stage_rng(seed, "kl");
    let mut total = 0.0;
    for i in 0..samples {
        let (_, truth) = &prompts[i % prompts.len()];
        let feats = policy.scene_features(&truth.objects)?;
        let y = policy.sample(&feats, &cfg, &mut rng);
        total += policy.logprob_unchecked(&feats, &y, None) - reference.logprob_unchecked(&feats, &y, None);
    }
    Ok(Some(total / samples as f64))
}

/// One evaluation point of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    /// Mean training loss since the previous entry; at step 0 over the
    /// whole training split.
    pub loss: f64,
    pub margin_acc: f64,
    pub val_chair_i_micro: Option<f64>,
    pub val_chair_s: Option<f64>,
    pub kl_estimate: Option<f64>,
    pub lr: f64,
}

/// Mutable state of one round.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub policy: ToyPolicy,
    pub reference: ToyPolicy,
    pub optimizer: Adam,
    pub step: usize,
    pub best_validation_chair_i: Option<f64>,
    pub best_step: usize,
    pub best_checkpoint: ToyPolicy,
}

impl TrainState {
    /// Policy initialized from the reference.
    pub fn new(reference: ToyPolicy, adam: AdamConfig) -> Self {
        TrainState {
            policy: reference.clone(),
            optimizer: Adam::new(reference.num_params(), adam),
            step: 0,
            best_validation_chair_i: None,
            best_step: 0,
            best_checkpoint: reference.clone(),
            reference,
        }
    }

    /// Records a validation score; returns true if it is a new best.
    fn offer(&mut self, chair_i: f64) -> bool {
        if self.best_validation_chair_i.is_none_or(|b| chair_i < b) {
            self.best_validation_chair_i = Some(chair_i);
            self.best_step = self.step;
            self.best_checkpoint = self.policy.clone();
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_policy: ToyPolicy,
    pub best_policy: ToyPolicy,
    pub best_step: usize,
    pub best_validation_chair_i: Option<f64>,
    pub log: Vec<TrainLogEntry>,
    pub reference_checksum: String,
}

/// Trains a copy of `reference` on `train` and selects the checkpoint with
/// the lowest validation `CHAIR_i` (micro). Without validation pairs the
/// final policy is also the best.
pub fn train(
    reference: &ToyPolicy,
    train: &[PreferencePair],
    validation: &[PreferencePair],
    truths: &GroundTruthIndex,
    lexicon: &SynonymLexicon,
    config: &DpoConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let reference_checksum = reference.checksum();
    let encoded = encode_pairs(train, truths, reference)?;
    let val = ValidationSet::from_pairs(validation, truths)?;
    let val_seed = derive_seed(config.seed, "validation");
    let kl_seed = derive_seed(config.seed, "kl");

    let mut state = TrainState::new(reference.clone(), config.adam);
    let schedule = config.schedule();
    let mut log = Vec::new();

    let evaluate = |state: &mut TrainState, loss: f64, margin_acc: f64| -> Result<TrainLogEntry> {
        let (chair_i, chair_s) = if val.is_empty() {
            (None, None)
        } else {
            let rep = evaluate_policy(
                &state.policy,
                &val.prompts,
                lexicon,
                config.validation,
                config.max_length,
                val_seed,
                Aggregation::Micro,
            )?;
            if state.offer(rep.chair_i) {
                log::debug!("step {}: new best validation CHAIR_i {}", state.step, rep.chair_i);
            }
            (Some(rep.chair_i), Some(rep.chair_s))
        };
        let kl = estimate_kl(
            &state.policy,
            &state.reference,
            &val.prompts,
            config.kl_samples,
            config.max_length,
            kl_seed,
        )?;
        Ok(TrainLogEntry {
            step: state.step,
            loss,
            margin_acc,
            val_chair_i_micro: chair_i,
            val_chair_s: chair_s,
            kl_estimate: kl,
            lr: schedule.lr_at(state.step)?,
        })
    };

    let (loss0, acc0) = full_loss(&state.policy, &encoded, config.beta);
    log.push(evaluate(&mut state, loss0, acc0)?);

    let mut rng = stage_rng(config.seed, "dpo/shuffle");
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let (mut loss_sum, mut acc_sum, mut batches) = (0.0, 0.0, 0usize);
    for step in 1..=config.total_steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<&EncodedPair> = order[cursor..end].iter().map(|&i| &encoded[i]).collect();
        cursor = end;

        let g = dpo_grad(&state.policy, &batch, config.beta)?;
        loss_sum += g.mean_loss;
        acc_sum += g.margin_acc;
        batches += 1;
        let lr = schedule.lr_at(step)?;
        state.optimizer.step(&mut state.policy, &g.grad, lr)?;
        state.step = step;

        if step % config.validation_every == 0 || step == config.total_steps {
            let n = batches as f64;
            log.push(evaluate(&mut state, loss_sum / n, acc_sum / n)?);
            (loss_sum, acc_sum, batches) = (0.0, 0.0, 0);
        }
    }

    if state.reference.checksum() != reference_checksum {
        return Err(Error::Checkpoint("reference policy changed during training".into()));
    }
    let (best_policy, best_step) = if val.is_empty() {
        (state.policy.clone(), state.step)
    } else {
        (state.best_checkpoint, state.best_step)
    };
    Ok(TrainOutcome {
        final_policy: state.policy,
        best_policy,
        best_step,
        best_validation_chair_i: state.best_validation_chair_i,
        log,
        reference_checksum,
    })
}

/// Mean loss and margin accuracy over all pairs.
pub fn full_loss(policy: &ToyPolicy, pairs: &[EncodedPair], beta: f64) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for p in pairs {
        let t = dpo_loss(policy, p, beta);
        loss += t.loss;
        correct += (t.margin > 0.0) as usize;
    }
    let n = pairs.len().max(1) as f64;
    (loss / n, correct as f64 / n)
}
