//! Three-step CoT dataset construction — re-annotation, validation,
//! consistency scoring with threshold gating — plus the self-distillation
//! filter that keeps predicted reasoning only where the prediction is
//! verifiably correct.
//!
//! Records flow monotonically: raw ⊇ validated ⊇ gated. Every discard
//! carries a machine-readable reason, and re-running any stage on
//! already-processed records is a no-op.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError, Transport};
use crate::types::{
    parse_model_output, schema_violations, serialize_target, EntityMention, EntitySchema, NerSample,
};

/// Default consistency gate: keep records scored 9 or higher.
pub const DEFAULT_GATE_THRESHOLD: f64 = 9.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("transport failure for sample {id}: {source}")]
    Transport {
        id: String,
        #[source]
        source: GatewayError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RecordStatus {
    Raw,
    Validated,
    Discarded { reason: String },
    Gated,
}

impl RecordStatus {
    pub fn is_discarded(&self) -> bool {
        matches!(self, RecordStatus::Discarded { .. })
    }
}

/// One pipeline record: the source sample, the raw or validated
/// reasoning trace and entity list, the stage status, and the judge
/// score once assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRecord {
    #[serde(flatten)]
    pub sample: NerSample,
    pub cot: String,
    pub entities: Vec<EntityMention>,
    #[serde(flatten)]
    pub status: RecordStatus,
    #[serde(rename = "score", skip_serializing_if = "Option::is_none")]
    pub consistency_score: Option<f64>,
}

/// Editable prompt templates with named placeholders:
/// `{sentence}`, `{labels}`, `{cot}`, `{entities}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub generation: String,
    pub scoring: String,
}

pub const DEFAULT_GENERATION_TEMPLATE: &str = "\
You are an expert named entity annotator.
Allowed entity types: {labels}
Sentence: {sentence}
Reason step by step about every candidate span, justifying each entity \
you keep by quoting its exact text. Put the reasoning inside \
<think>...</think>, then output a JSON array of objects with keys \
\"text\" and \"type\", using only the allowed entity types. Output the \
array even when no entities are present.";

pub const DEFAULT_SCORING_TEMPLATE: &str = "\
You are judging the quality of a reasoning trace for named entity \
recognition.
Sentence: {sentence}
Reasoning: {cot}
Extracted entities: {entities}
Assess the internal coherence, logical soundness, and factual accuracy \
of the reasoning with respect to the sentence and the extracted \
entities. Reply with a single line of the form:
Score: <integer from 0 to 10>";

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            generation: DEFAULT_GENERATION_TEMPLATE.to_string(),
            scoring: DEFAULT_SCORING_TEMPLATE.to_string(),
        }
    }
}

/// Deterministic template instantiation for the re-annotation request.
pub fn build_reannotation_prompt(sample: &NerSample, templates: &PromptTemplates) -> String {
    templates
        .generation
        .replace("{labels}", &sample.schema.labels().join(", "))
        .replace("{sentence}", &sample.text)
}

/// Deterministic template instantiation for the consistency-scoring
/// request.
pub fn build_scoring_prompt(record: &CotRecord, templates: &PromptTemplates) -> String {
    let entities = serde_json::to_string(&record.entities).expect("entity list serializes");
    templates
        .scoring
        .replace("{sentence}", &record.sample.text)
        .replace("{cot}", &record.cot)
        .replace("{entities}", &entities)
}

/// Ask the annotator model for a reasoning trace plus entity list.
/// Unparseable replies become `discarded("unparseable")`; transport
/// failures surface as pipeline errors carrying the sample id.
pub fn reannotate<T: Transport>(
    sample: &NerSample,
    gateway: &Gateway<T>,
    templates: &PromptTemplates,
) -> Result<CotRecord, PipelineError> {
    let prompt = build_reannotation_prompt(sample, templates);
    let request = ChatRequest::user(&gateway.config().model, prompt, format!("cot-gen:{}", sample.id));
    let reply = gateway
        .chat_complete(&request)
        .map_err(|source| PipelineError::Transport {
            id: sample.id.clone(),
            source,
        })?;
    Ok(match parse_model_output(&reply) {
        Ok(output) => CotRecord {
            sample: sample.clone(),
            cot: output.cot,
            entities: output.entities,
            status: RecordStatus::Raw,
            consistency_score: None,
        },
        Err(_) => CotRecord {
            sample: sample.clone(),
            cot: String::new(),
            entities: Vec::new(),
            status: RecordStatus::Discarded {
                reason: "unparseable".to_string(),
            },
            consistency_score: None,
        },
    })
}

/// Structural validation: every entity must be justified by literal
/// (case-sensitive) occurrence of its text in the reasoning trace, and
/// the entity list must be well-formed and schema-compliant. Idempotent
/// on non-raw records.
pub fn validate_record(mut record: CotRecord) -> CotRecord {
    if record.status != RecordStatus::Raw {
        return record;
    }
    if !schema_violations(&record.entities, &record.sample.schema).is_empty() {
        record.status = RecordStatus::Discarded {
            reason: "schema-violation".to_string(),
        };
        return record;
    }
    if let Some(missing) = record.entities.iter().find(|e| !record.cot.contains(&e.text)) {
        record.status = RecordStatus::Discarded {
            reason: format!("unjustified-entity:{}", missing.text),
        };
        return record;
    }
    record.status = RecordStatus::Validated;
    record
}

/// Extract the first number following a `Score:` marker.
fn parse_score(reply: &str) -> Option<f64> {
    let idx = reply.find("Score:")?;
    let rest = reply[idx + "Score:".len()..].trim_start();
    let end = rest
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
        .unwrap_or(rest.len());
    rest[..end].parse().ok()
}

/// Ask the judge model for a 0–10 consistency score. Unparseable or
/// out-of-range replies become `discarded("unscoreable")`. Idempotent on
/// non-validated records.
pub fn score_consistency<T: Transport>(
    mut record: CotRecord,
    gateway: &Gateway<T>,
    templates: &PromptTemplates,
) -> Result<CotRecord, PipelineError> {
    if record.status != RecordStatus::Validated || record.consistency_score.is_some() {
        return Ok(record);
    }
    let prompt = build_scoring_prompt(&record, templates);
    let request = ChatRequest::user(
        &gateway.config().model,
        prompt,
        format!("cot-score:{}", record.sample.id),
    );
    let reply = gateway
        .chat_complete(&request)
        .map_err(|source| PipelineError::Transport {
            id: record.sample.id.clone(),
            source,
        })?;
    match parse_score(&reply) {
        Some(score) if (0.0..=10.0).contains(&score) => {
            record.consistency_score = Some(score);
        }
        _ => {
            record.status = RecordStatus::Discarded {
                reason: "unscoreable".to_string(),
            };
        }
    }
    Ok(record)
}

/// Keep scored records at or above the threshold, in input order.
/// Already-gated records pass through unchanged.
pub fn gate_by_threshold(records: Vec<CotRecord>, threshold: f64) -> Vec<CotRecord> {
    records
        .into_iter()
        .filter_map(|mut record| match record.status {
            RecordStatus::Gated => Some(record),
            RecordStatus::Validated if record.consistency_score? >= threshold => {
                record.status = RecordStatus::Gated;
                Some(record)
            }
            _ => None,
        })
        .collect()
}

/// One record of the hybrid corpus: reasoning is attached only where the
/// prediction was verifiably correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridRecord {
    pub id: String,
    pub text: String,
    pub schema: EntitySchema,
    pub entities: Vec<EntityMention>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cot: Option<String>,
}

/// Self-distillation filter: samples whose predicted entity set equals
/// gold exactly keep the predicted reasoning; all others become plain
/// (text, schema, gold) records.
pub fn distill_self_cot(
    predictions: &[(NerSample, crate::types::ReasoningOutput)],
) -> Vec<HybridRecord> {
    predictions
        .iter()
        .map(|(sample, output)| {
            let predicted: BTreeSet<&EntityMention> = output.entities.iter().collect();
            let gold: BTreeSet<&EntityMention> = sample.gold.iter().collect();
            let cot = (predicted == gold).then(|| output.cot.clone());
            HybridRecord {
                id: sample.id.clone(),
                text: sample.text.clone(),
                schema: sample.schema.clone(),
                entities: sample.gold.iter().cloned().collect(),
                cot,
            }
        })
        .collect()
}

/// Map `items` through `f` with at most `workers` concurrent calls,
/// preserving input order in the output.
pub fn bounded_map<I, O, F>(items: &[I], workers: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
{
    let workers = workers.max(1);
    let slots: Vec<std::sync::Mutex<Option<O>>> =
        (0..items.len()).map(|_| std::sync::Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let value = f(&items[i]);
                *slots[i].lock().unwrap() = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().unwrap())
        .collect()
}

/// Re-annotate a batch with a bounded pool of concurrent gateway
/// requests; outputs are ordered by input index.
pub fn reannotate_batch<T: Transport>(
    samples: &[NerSample],
    gateway: &Gateway<T>,
    templates: &PromptTemplates,
    workers: usize,
) -> Result<Vec<CotRecord>, PipelineError> {
    bounded_map(samples, workers, |sample| reannotate(sample, gateway, templates))
        .into_iter()
        .collect()
}

/// Score a batch of validated records concurrently, preserving order.
pub fn score_batch<T: Transport>(
    records: Vec<CotRecord>,
    gateway: &Gateway<T>,
    templates: &PromptTemplates,
    workers: usize,
) -> Result<Vec<CotRecord>, PipelineError> {
    bounded_map(&records, workers, |record| {
        score_consistency(record.clone(), gateway, templates)
    })
    .into_iter()
    .collect()
}

/// Reference target text for SFT dataset construction: the canonical
/// serialization of (cot, entities).
pub fn record_target(record: &CotRecord) -> Result<String, crate::types::SerializeError> {
    serialize_target(&record.cot, &record.entities)
}
