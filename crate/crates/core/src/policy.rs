//! A tabular autoregressive sequence policy with exact log-probabilities
//! and closed-form gradients.
//!
//! Each conditional distribution is the softmax of a logit vector stored
//! per context, where a context is the last `k` symbols of the prefix
//! (condition included). Unseen contexts default to zero logits, i.e. a
//! uniform distribution. Gradients of `log π(sequence)` are exact
//! softmax-cross-entropy gradients, which makes finite-difference
//! verification and plain gradient descent on the negative
//! log-likelihood possible without any autodiff machinery.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type SymbolId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("oov: symbol {0}")]
    OovSymbol(String),
    #[error("oov: id {0}")]
    OovId(SymbolId),
    #[error("empty-batch")]
    EmptyBatch,
    #[error("eos-not-in-vocab: {0}")]
    EosNotInVocab(String),
    #[error("duplicate-symbol: {0}")]
    DuplicateSymbol(String),
}

/// Sparse gradient with the same shape as the parameter table: a logit
/// vector per visited context, zero elsewhere.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradTable {
    entries: BTreeMap<Vec<SymbolId>, Vec<f64>>,
}

impl GradTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, context: &[SymbolId]) -> Option<&[f64]> {
        self.entries.get(context).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<SymbolId>, &Vec<f64>)> {
        self.entries.iter()
    }

    /// self += scale * other, in the other table's (deterministic) key
    /// order.
    pub fn add_scaled(&mut self, other: &GradTable, scale: f64) {
        for (context, grad) in &other.entries {
            let entry = self
                .entries
                .entry(context.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for (slot, g) in entry.iter_mut().zip(grad) {
                *slot += scale * g;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for grad in self.entries.values_mut() {
            for g in grad.iter_mut() {
                *g *= factor;
            }
        }
    }

    fn accumulate(&mut self, context: &[SymbolId], vocab_size: usize, observed: SymbolId, probs: &[f64]) {
        let entry = self
            .entries
            .entry(context.to_vec())
            .or_insert_with(|| vec![0.0; vocab_size]);
        for (slot, p) in entry.iter_mut().zip(probs) {
            *slot -= p;
        }
        entry[observed] += 1.0;
    }

    /// Largest absolute entry; 0 for an empty table.
    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|v| v.iter())
            .fold(0.0, |acc, g| acc.max(g.abs()))
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - log_z).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|l| l.exp()).collect()
}

/// Serialized form: symbols as strings so policy files are portable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    vocab: Vec<String>,
    eos: String,
    context_order: usize,
    table: Vec<(Vec<String>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyFile", into = "PolicyFile")]
pub struct ToyPolicy {
    vocab: Vec<String>,
    eos: SymbolId,
    context_order: usize,
    table: BTreeMap<Vec<SymbolId>, Vec<f64>>,
}

impl ToyPolicy {
    /// Uniform policy: every context distribution starts uniform.
    pub fn uniform<S: Into<String>>(
        vocab: impl IntoIterator<Item = S>,
        eos: &str,
        context_order: usize,
    ) -> Result<Self, PolicyError> {
        let vocab: Vec<String> = vocab.into_iter().map(Into::into).collect();
        for (i, symbol) in vocab.iter().enumerate() {
            if vocab[..i].contains(symbol) {
                return Err(PolicyError::DuplicateSymbol(symbol.clone()));
            }
        }
        let eos = vocab
            .iter()
            .position(|s| s == eos)
            .ok_or_else(|| PolicyError::EosNotInVocab(eos.to_string()))?;
        Ok(Self {
            vocab,
            eos,
            context_order,
            table: BTreeMap::new(),
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn eos(&self) -> SymbolId {
        self.eos
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn symbol_id(&self, symbol: &str) -> Option<SymbolId> {
        self.vocab.iter().position(|s| s == symbol)
    }

    pub fn encode(&self, symbols: &[&str]) -> Result<Vec<SymbolId>, PolicyError> {
        symbols
            .iter()
            .map(|s| {
                self.symbol_id(s)
                    .ok_or_else(|| PolicyError::OovSymbol(s.to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[SymbolId]) -> Result<Vec<&str>, PolicyError> {
        ids.iter()
            .map(|&id| {
                self.vocab
                    .get(id)
                    .map(String::as_str)
                    .ok_or(PolicyError::OovId(id))
            })
            .collect()
    }

    /// Overwrite the logits of one context. For constructing test
    /// policies.
    pub fn set_logits(&mut self, context: &[SymbolId], logits: Vec<f64>) {
        assert_eq!(logits.len(), self.vocab.len());
        self.table.insert(self.context_key_of(context), logits);
    }

    pub fn logits(&self, context: &[SymbolId]) -> Vec<f64> {
        self.table
            .get(context)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab.len()])
    }

    fn context_key_of(&self, prefix: &[SymbolId]) -> Vec<SymbolId> {
        let start = prefix.len().saturating_sub(self.context_order);
        prefix[start..].to_vec()
    }

    fn check_ids(&self, ids: &[SymbolId]) -> Result<(), PolicyError> {
        match ids.iter().find(|&&id| id >= self.vocab.len()) {
            Some(&id) => Err(PolicyError::OovId(id)),
            None => Ok(()),
        }
    }

    /// Σ_t log π(y_t | condition, y_<t), contexts truncated to the last
    /// `context_order` symbols of the prefix.
    pub fn log_prob(&self, condition: &[SymbolId], sequence: &[SymbolId]) -> Result<f64, PolicyError> {
        self.check_ids(condition)?;
        self.check_ids(sequence)?;
        let mut prefix = condition.to_vec();
        let mut total = 0.0;
        for &symbol in sequence {
            let context = self.context_key_of(&prefix);
            total += log_softmax(&self.logits(&context))[symbol];
            prefix.push(symbol);
        }
        Ok(total)
    }

    /// Exact gradient of `log_prob` with respect to the logit table:
    /// one-hot(observed) − softmax(logits) per visited context, zero
    /// elsewhere. Repeated visits accumulate.
    pub fn log_prob_grad(
        &self,
        condition: &[SymbolId],
        sequence: &[SymbolId],
    ) -> Result<GradTable, PolicyError> {
        self.check_ids(condition)?;
        self.check_ids(sequence)?;
        let mut prefix = condition.to_vec();
        let mut grad = GradTable::new();
        for &symbol in sequence {
            let context = self.context_key_of(&prefix);
            let probs = softmax(&self.logits(&context));
            grad.accumulate(&context, self.vocab.len(), symbol, &probs);
            prefix.push(symbol);
        }
        Ok(grad)
    }

    /// Ancestral sampling from softmax(logits / temperature) until
    /// end-of-sequence or `max_len` symbols. The terminating EOS symbol,
    /// when drawn, is included in the returned sequence, so `log_prob`
    /// of the result is exactly its sampling probability.
    pub fn sample_sequence<R: Rng + ?Sized>(
        &self,
        condition: &[SymbolId],
        temperature: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Vec<SymbolId> {
        assert!(temperature > 0.0, "temperature must be positive");
        let mut prefix = condition.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_len {
            let context = self.context_key_of(&prefix);
            let scaled: Vec<f64> = self.logits(&context).iter().map(|l| l / temperature).collect();
            let probs = softmax(&scaled);
            let symbol = draw(&probs, rng);
            out.push(symbol);
            prefix.push(symbol);
            if symbol == self.eos {
                break;
            }
        }
        out
    }

    /// params += step * grad. Ascent for positive step. Contexts with an
    /// all-zero gradient are left untouched.
    pub fn apply_step(&mut self, grad: &GradTable, step: f64) {
        for (context, g) in grad.iter() {
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let entry = self
                .table
                .entry(context.clone())
                .or_insert_with(|| vec![0.0; self.vocab.len()]);
            for (slot, value) in entry.iter_mut().zip(g) {
                *slot += step * value;
            }
        }
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> SymbolId {
    let mut u: f64 = rng.gen();
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.len() - 1
}

impl TryFrom<PolicyFile> for ToyPolicy {
    type Error = PolicyError;

    fn try_from(file: PolicyFile) -> Result<Self, Self::Error> {
        let mut policy = ToyPolicy::uniform(file.vocab, &file.eos, file.context_order)?;
        for (context, logits) in file.table {
            let ids = policy.encode(&context.iter().map(String::as_str).collect::<Vec<_>>())?;
            policy.table.insert(ids, logits);
        }
        Ok(policy)
    }
}

impl From<ToyPolicy> for PolicyFile {
    fn from(policy: ToyPolicy) -> Self {
        let table = policy
            .table
            .iter()
            .map(|(context, logits)| {
                let symbols = context.iter().map(|&id| policy.vocab[id].clone()).collect();
                (symbols, logits.clone())
            })
            .collect();
        Self {
            vocab: policy.vocab.clone(),
            eos: policy.vocab[policy.eos].clone(),
            context_order: policy.context_order,
            table,
        }
    }
}

/// One supervised example: an encoded query and its target sequence
/// (ending in EOS).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub condition: Vec<SymbolId>,
    pub target: Vec<SymbolId>,
}

/// Batch-mean negative log-likelihood and its gradient.
pub fn sft_loss_and_grad(
    policy: &ToyPolicy,
    batch: &[SftExample],
) -> Result<(f64, GradTable), PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = GradTable::new();
    for example in batch {
        loss -= scale * policy.log_prob(&example.condition, &example.target)?;
        let g = policy.log_prob_grad(&example.condition, &example.target)?;
        grad.add_scaled(&g, -scale);
    }
    Ok((loss, grad))
}

/// Full-batch gradient descent on the SFT loss. Returns the trained
/// policy and the loss before each step.
pub fn sft_train(
    policy: &ToyPolicy,
    dataset: &[SftExample],
    learning_rate: f64,
    steps: usize,
) -> Result<(ToyPolicy, Vec<f64>), PolicyError> {
    let mut policy = policy.clone();
    if dataset.is_empty() {
        return Ok((policy, Vec::new()));
    }
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grad) = sft_loss_and_grad(&policy, dataset)?;
        losses.push(loss);
        policy.apply_step(&grad, -learning_rate);
    }
    Ok((policy, losses))
}
