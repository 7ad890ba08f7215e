//! The DPO objective and its analytic gradient.

use crate::error::{Error, Result};
use crate::io::GroundTruthIndex;
use crate::preference::PreferencePair;
use crate::toy_world::{SceneFeatures, TokenId, ToyPolicy};

/// A preference pair in token space, with the frozen reference
/// log-probabilities cached.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub sample_id: String,
    pub scene: SceneFeatures,
    pub winner: Vec<TokenId>,
    pub loser: Vec<TokenId>,
    pub ref_winner: f64,
    pub ref_loser: f64,
}

impl EncodedPair {
    pub fn encode(pair: &PreferencePair, truths: &GroundTruthIndex, reference: &ToyPolicy) -> Result<Self> {
        let truth = truths.get(pair.image_id())?;
        let scene = reference.scene_features(&truth.objects)?;
        let winner = reference.vocab().encode(&pair.winner)?;
        let loser = reference.vocab().encode(&pair.loser)?;
        let ref_winner = reference.logprob(&scene, &winner)?;
        let ref_loser = reference.logprob(&scene, &loser)?;
        Ok(EncodedPair {
            sample_id: pair.sample_id().to_string(),
            scene,
            winner,
            loser,
            ref_winner,
            ref_loser,
        })
    }

    /// Swaps winner and loser.
    pub fn flipped(&self) -> Self {
        EncodedPair {
            winner: self.loser.clone(),
            loser: self.winner.clone(),
            ref_winner: self.ref_loser,
            ref_loser: self.ref_winner,
            ..self.clone()
        }
    }
}

/// Encodes every pair against `reference`, in input order.
pub fn encode_pairs(
    pairs: &[PreferencePair],
    truths: &GroundTruthIndex,
    reference: &ToyPolicy,
) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .map(|p| EncodedPair::encode(p, truths, reference))
        .collect()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    /// Implicit reward margin `beta * (delta_w - delta_l)`.
    pub margin: f64,
    pub delta_w: f64,
    pub delta_l: f64,
}

/// Loss from the policy/reference log-ratio of winner and loser.
pub fn dpo_loss_from_deltas(delta_w: f64, delta_l: f64, beta: f64) -> PairLoss {
    let margin = beta * (delta_w - delta_l);
    PairLoss {
        loss: softplus(-margin),
        margin,
        delta_w,
        delta_l,
    }
}

pub fn dpo_loss(policy: &ToyPolicy, pair: &EncodedPair, beta: f64) -> PairLoss {
    let lw = policy.logprob_unchecked(&pair.scene, &pair.winner, None);
    let ll = policy.logprob_unchecked(&pair.scene, &pair.loser, None);
    dpo_loss_from_deltas(lw - pair.ref_winner, ll - pair.ref_loser, beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub grad: Vec<f64>,
    pub mean_loss: f64,
    /// Fraction of pairs with a positive margin.
    pub margin_acc: f64,
}

/// Mean loss gradient over `batch`. Pairs are reduced in slice order.
pub fn dpo_grad(policy: &ToyPolicy, batch: &[&EncodedPair], beta: f64) -> Result<BatchGrad> {
    if batch.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for pair in batch {
        let terms = dpo_loss(policy, pair, beta);
        loss_sum += terms.loss;
        correct += (terms.margin > 0.0) as usize;
        // d loss / d margin = -sigmoid(-margin)
        let coef = -beta * sigmoid(-terms.margin) / n;
        policy.logprob_unchecked(&pair.scene, &pair.winner, Some((coef, &mut grad)));
        policy.logprob_unchecked(&pair.scene, &pair.loser, Some((-coef, &mut grad)));
    }
    Ok(BatchGrad {
        grad,
        mean_loss: loss_sum / n,
        margin_acc: correct as f64 / n,
    })
}
