//! Log-linear next-token captioner.
//!
//! The logit of token `v` at each step is a sum of table rows selected by the
//! context: one row for the previous token (or the start state), one row per
//! object present in the scene, and one row per object class already
//! mentioned in the caption. The table has `V + 2K` rows of `V` logits, where
//! `V` is the vocabulary size and `K` the number of object classes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub type TokenId = usize;

pub const EOS_TOKEN: &str = "<eos>";
const START_STATE: &str = "<start>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Object(usize),
    Connective,
    Eos,
}

/// Object tokens, then connective tokens, then end-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyManifest", into = "VocabularyManifest")]
pub struct Vocabulary {
    objects: Vec<String>,
    connectives: Vec<String>,
    index: BTreeMap<String, TokenId>,
    max_words: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabularyManifest {
    objects: Vec<String>,
    connectives: Vec<String>,
    eos: String,
}

impl TryFrom<VocabularyManifest> for Vocabulary {
    type Error = Error;

    fn try_from(m: VocabularyManifest) -> Result<Self> {
        if m.eos != EOS_TOKEN {
            return Err(Error::Checkpoint(format!("unexpected eos token {:?}", m.eos)));
        }
        Vocabulary::new(m.objects, m.connectives)
    }
}

impl From<Vocabulary> for VocabularyManifest {
    fn from(v: Vocabulary) -> Self {
        VocabularyManifest {
            objects: v.objects,
            connectives: v.connectives,
            eos: EOS_TOKEN.to_string(),
        }
    }
}

impl Vocabulary {
    pub fn new(objects: Vec<String>, connectives: Vec<String>) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::Config("vocabulary needs at least one object".into()));
        }
        let mut index = BTreeMap::new();
        let mut max_words = 1;
        for (id, word) in objects.iter().chain(connectives.iter()).enumerate() {
            if word.is_empty() || word.trim() != word || word == EOS_TOKEN {
                return Err(Error::Config(format!("invalid vocabulary entry {word:?}")));
            }
            if index.insert(word.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {word:?}")));
            }
            max_words = max_words.max(word.split(' ').count());
        }
        Ok(Vocabulary {
            objects,
            connectives,
            index,
            max_words,
        })
    }

    pub fn len(&self) -> usize {
        self.objects.len() + self.connectives.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn connectives(&self) -> &[String] {
        &self.connectives
    }

    pub fn eos(&self) -> TokenId {
        self.len() - 1
    }

    /// The previous-token row used before anything has been emitted. It
    /// shares its slot with EOS, which never precedes another token.
    pub fn start_state(&self) -> TokenId {
        self.eos()
    }

    pub fn kind(&self, id: TokenId) -> TokenKind {
        let k = self.objects.len();
        if id < k {
            TokenKind::Object(id)
        } else if id == self.eos() {
            TokenKind::Eos
        } else {
            TokenKind::Connective
        }
    }

    pub fn token(&self, id: TokenId) -> &str {
        let k = self.objects.len();
        if id < k {
            &self.objects[id]
        } else if id < self.eos() {
            &self.connectives[id - k]
        } else {
            EOS_TOKEN
        }
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        if token == EOS_TOKEN {
            Some(self.eos())
        } else {
            self.index.get(token).copied()
        }
    }

    pub fn object_id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied().filter(|&id| id < self.objects.len())
    }

    /// Renders tokens as space-separated text, dropping EOS.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != self.eos())
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Encodes rendered text back into tokens and appends EOS.
    ///
    /// Multi-word entries are matched longest first.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut out = Vec::with_capacity(words.len() + 1);
        let mut i = 0;
        while i < words.len() {
            let longest = self.max_words.min(words.len() - i);
            let hit = (1..=longest)
                .rev()
                .find_map(|n| self.index.get(&words[i..i + n].join(" ")).map(|&id| (id, n)));
            match hit {
                Some((id, n)) => {
                    out.push(id);
                    i += n;
                }
                None => return Err(Error::OutOfVocabulary(words[i].to_string())),
            }
        }
        out.push(self.eos());
        Ok(out)
    }
}

/// Sorted indices of the object classes present in a scene.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct SceneFeatures(Vec<usize>);

impl SceneFeatures {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// The same scene with one object's presence indicator switched off.
    pub fn without(&self, object: usize) -> Self {
        SceneFeatures(self.0.iter().copied().filter(|&o| o != object).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub max_length: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 0.7,
            max_length: 24,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_length == 0 {
            return Err(Error::Config("max_length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Running context of one caption: previous token and mentioned classes.
struct Decoder {
    state: TokenId,
    mentioned: Vec<bool>,
    mentioned_rows: Vec<usize>,
}

impl Decoder {
    fn new(vocab: &Vocabulary) -> Self {
        Decoder {
            state: vocab.start_state(),
            mentioned: vec![false; vocab.num_objects()],
            mentioned_rows: Vec::new(),
        }
    }

    fn advance(&mut self, vocab: &Vocabulary, token: TokenId) {
        if let TokenKind::Object(o) = vocab.kind(token) {
            if !self.mentioned[o] {
                self.mentioned[o] = true;
                self.mentioned_rows.push(o);
            }
        }
        self.state = token;
    }
}

/// Numerically stable log-softmax, in place.
pub(crate) fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let norm = max + sum.ln();
    for l in logits.iter_mut() {
        *l -= norm;
    }
}

/// Parameter table of the toy captioner.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: Vocabulary,
    params: Vec<f64>,
}

impl ToyPolicy {
    /// All-zero logits, i.e. the uniform next-token distribution.
    pub fn zeros(vocab: Vocabulary) -> Self {
        let n = (vocab.len() + 2 * vocab.num_objects()) * vocab.len();
        ToyPolicy {
            vocab,
            params: vec![0.0; n],
        }
    }

    pub fn from_params(vocab: Vocabulary, params: Vec<f64>) -> Result<Self> {
        let policy = Self::zeros(vocab);
        if params.len() != policy.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                policy.params.len(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Checkpoint(format!("parameter {i} is not finite")));
        }
        Ok(ToyPolicy { params, ..policy })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn scene_row(&self, object: usize) -> usize {
        self.vocab.len() + object
    }

    fn mentioned_row(&self, object: usize) -> usize {
        self.vocab.len() + self.vocab.num_objects() + object
    }

    /// Human-readable `(feature, token)` for a flat parameter index.
    pub fn describe_param(&self, index: usize) -> (String, String) {
        let v = self.vocab.len();
        let (row, col) = (index / v, index % v);
        (self.feature_name(row), self.vocab.token(col).to_string())
    }

    fn feature_name(&self, row: usize) -> String {
        let v = self.vocab.len();
        let k = self.vocab.num_objects();
        if row < v {
            if row == self.vocab.start_state() {
                format!("prev:{START_STATE}")
            } else {
                format!("prev:{}", self.vocab.token(row))
            }
        } else if row < v + k {
            format!("scene:{}", self.vocab.objects[row - v])
        } else {
            format!("mentioned:{}", self.vocab.objects[row - v - k])
        }
    }

    fn feature_row(&self, name: &str) -> Option<usize> {
        let (kind, value) = name.split_once(':')?;
        match kind {
            "prev" if value == START_STATE => Some(self.vocab.start_state()),
            "prev" => self.vocab.id(value).filter(|&id| id != self.vocab.eos()),
            "scene" => self.vocab.object_id(value).map(|o| self.scene_row(o)),
            "mentioned" => self.vocab.object_id(value).map(|o| self.mentioned_row(o)),
            _ => None,
        }
    }

    /// Maps scene object names to presence features.
    pub fn scene_features<'a>(&self, objects: impl IntoIterator<Item = &'a String>) -> Result<SceneFeatures> {
        let set: BTreeSet<usize> = objects
            .into_iter()
            .map(|o| self.vocab.object_id(o).ok_or_else(|| Error::UnknownClass(o.clone())))
            .collect::<Result<_>>()?;
        Ok(SceneFeatures(set.into_iter().collect()))
    }

    fn active_rows(&self, scene: &SceneFeatures, dec: &Decoder, rows: &mut Vec<usize>) {
        rows.clear();
        rows.push(dec.state);
        rows.extend(scene.0.iter().map(|&o| self.scene_row(o)));
        rows.extend(dec.mentioned_rows.iter().map(|&o| self.mentioned_row(o)));
    }

    fn logits_into(&self, rows: &[usize], out: &mut [f64]) {
        let v = self.vocab.len();
        out.fill(0.0);
        for &r in rows {
            let row = &self.params[r * v..(r + 1) * v];
            for (o, &p) in out.iter_mut().zip(row) {
                *o += p;
            }
        }
    }

    fn check_sequence(&self, tokens: &[TokenId]) -> Result<()> {
        let eos = self.vocab.eos();
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.vocab.len() {
                return Err(Error::OutOfVocabulary(format!("#{t}")));
            }
            if t == eos && i + 1 != tokens.len() {
                return Err(Error::InvalidSequence(format!(
                    "end-of-sequence at position {i} is not last"
                )));
            }
        }
        Ok(())
    }

    /// Next-token log-probabilities after emitting `prefix`.
    pub fn next_token_log_probs(&self, scene: &SceneFeatures, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_sequence(prefix)?;
        let mut dec = Decoder::new(&self.vocab);
        for &t in prefix {
            dec.advance(&self.vocab, t);
        }
        let mut rows = Vec::new();
        self.active_rows(scene, &dec, &mut rows);
        let mut logits = vec![0.0; self.vocab.len()];
        self.logits_into(&rows, &mut logits);
        log_softmax(&mut logits);
        Ok(logits)
    }

    /// Log-probability of the exact token sequence (EOS included if present).
    pub fn logprob(&self, scene: &SceneFeatures, tokens: &[TokenId]) -> Result<f64> {
        self.check_sequence(tokens)?;
        Ok(self.logprob_unchecked(scene, tokens, None))
    }

    /// Adds `scale * d logprob / d params` into `grad` and returns the
    /// log-probability.
    pub fn accumulate_logprob_grad(
        &self,
        scene: &SceneFeatures,
        tokens: &[TokenId],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_sequence(tokens)?;
        if grad.len() != self.params.len() {
            return Err(Error::Config(format!(
                "gradient has {} entries, policy has {}",
                grad.len(),
                self.params.len()
            )));
        }
        Ok(self.logprob_unchecked(scene, tokens, Some((scale, grad))))
    }

    pub(crate) fn logprob_unchecked(
        &self,
        scene: &SceneFeatures,
        tokens: &[TokenId],
        mut grad: Option<(f64, &mut [f64])>,
    ) -> f64 {
        let v = self.vocab.len();
        let mut dec = Decoder::new(&self.vocab);
        let mut rows = Vec::with_capacity(1 + 2 * scene.0.len());
        let mut logp = vec![0.0; v];
        let mut delta = vec![0.0; if grad.is_some() { v } else { 0 }];
        let mut total = 0.0;
        for &t in tokens {
            self.active_rows(scene, &dec, &mut rows);
            self.logits_into(&rows, &mut logp);
            log_softmax(&mut logp);
            total += logp[t];
            if let Some((scale, g)) = grad.as_mut() {
                // d log p(t) / d logit_j = [j == t] - p_j, shared by every active row.
                for (j, d) in delta.iter_mut().enumerate() {
                    let indicator = if j == t { 1.0 } else { 0.0 };
                    *d = *scale * (indicator - logp[j].exp());
                }
                for &r in &rows {
                    for (gj, d) in g[r * v..(r + 1) * v].iter_mut().zip(&delta) {
                        *gj += d;
                    }
                }
            }
            dec.advance(&self.vocab, t);
        }
        total
    }

    /// Ancestral sampling from the temperature-scaled softmax.
    ///
    /// Stops after EOS or at `max_length` tokens.
    pub fn sample<R: Rng + ?Sized>(&self, scene: &SceneFeatures, config: &SamplingConfig, rng: &mut R) -> Vec<TokenId> {
        self.decode(scene, config.max_length, |logits| {
            for l in logits.iter_mut() {
                *l /= config.temperature;
            }
            log_softmax(logits);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, &lp) in logits.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    return i;
                }
            }
            // Rounding left u above the cumulative mass; take the last
            // token with nonzero probability.
            logits.iter().rposition(|lp| lp.exp() > 0.0).unwrap_or(logits.len() - 1)
        })
    }

    /// Argmax decoding; ties go to the lowest token id.
    pub fn greedy(&self, scene: &SceneFeatures, max_length: usize) -> Vec<TokenId> {
        self.decode(scene, max_length, |logits| {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        })
    }

    fn decode(
        &self,
        scene: &SceneFeatures,
        max_length: usize,
        mut pick: impl FnMut(&mut [f64]) -> TokenId,
    ) -> Vec<TokenId> {
        let eos = self.vocab.eos();
        let mut dec = Decoder::new(&self.vocab);
        let mut rows = Vec::new();
        let mut logits = vec![0.0; self.vocab.len()];
        let mut out = Vec::new();
        while out.len() < max_length {
            self.active_rows(scene, &dec, &mut rows);
            self.logits_into(&rows, &mut logits);
            let t = pick(&mut logits);
            out.push(t);
            if t == eos {
                break;
            }
            dec.advance(&self.vocab, t);
        }
        out
    }

    /// SHA-256 over the vocabulary manifest and the parameter bits.
    pub fn checksum(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.vocab).expect("vocabulary serializes");
        for p in &self.params {
            bytes.extend_from_slice(&p.to_bits().to_le_bytes());
        }
        seed::checksum(&bytes)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let v = self.vocab.len();
        let entries = self
            .params
            .iter()
            .enumerate()
            .map(|(i, &logit)| (self.feature_name(i / v), self.vocab.token(i % v).to_string(), logit))
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            vocabulary: self.vocab.clone(),
            entries,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut policy = ToyPolicy::zeros(ckpt.vocabulary);
        let v = policy.vocab.len();
        for (feature, token, logit) in ckpt.entries {
            let row = policy
                .feature_row(&feature)
                .ok_or_else(|| Error::Checkpoint(format!("unknown feature {feature:?}")))?;
            let col = policy
                .vocab
                .id(&token)
                .ok_or_else(|| Error::Checkpoint(format!("unknown token {token:?}")))?;
            if !logit.is_finite() {
                return Err(Error::Checkpoint(format!("non-finite logit for {feature} -> {token}")));
            }
            policy.params[row * v + col] = logit;
        }
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string(&self.to_checkpoint()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(ckpt)
    }
}

pub const CHECKPOINT_FORMAT: &str = "chairdpo-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk policy: vocabulary manifest plus `(feature, token, logit)` triples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub vocabulary: Vocabulary,
    pub entries: Vec<(String, String, f64)>,
}
