//! Domain types for sentences, schemas, entities, and the structured
//! (reasoning, entities) output format.
//!
//! A model output is a reasoning trace wrapped in `<think>…</think>`
//! followed by a JSON array of `{"text": …, "type": …}` objects. The
//! serialization is canonical (fixed key order, no insignificant
//! whitespace) so that `parse_model_output ∘ serialize_target` is the
//! identity on valid inputs.

use std::collections::BTreeSet;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// Opening delimiter of the reasoning block.
pub const THINK_OPEN: &str = "<think>";
/// Closing delimiter of the reasoning block.
pub const THINK_CLOSE: &str = "</think>";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("empty-schema")]
    Empty,
    #[error("duplicate-label: {0}")]
    DuplicateLabel(String),
    #[error("blank-label")]
    BlankLabel,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SampleError {
    #[error("label-not-in-schema: {label} (sample {id})")]
    LabelNotInSchema { id: String, label: String },
    #[error("span-not-in-text: {span:?} (sample {id})")]
    SpanNotInText { id: String, span: String },
}

/// Parse failures for model output text.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    /// Missing or unbalanced `<think>…</think>` delimiters.
    #[error("no-reasoning-block")]
    NoReasoningBlock,
    /// The entity payload is not a well-formed list of {text, type} objects.
    #[error("malformed-entities")]
    MalformedEntities,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SerializeError {
    /// The reasoning text contains a delimiter token.
    #[error("delimiter-collision")]
    DelimiterCollision,
}

/// The closed, ordered set of permitted entity type labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct EntitySchema {
    labels: Vec<String>,
}

impl EntitySchema {
    pub fn new<I, S>(labels: I) -> Result<Self, SchemaError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(SchemaError::Empty);
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(SchemaError::BlankLabel);
            }
            if !seen.insert(label.as_str()) {
                return Err(SchemaError::DuplicateLabel(label.clone()));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }
}

impl TryFrom<Vec<String>> for EntitySchema {
    type Error = SchemaError;

    fn try_from(labels: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(labels)
    }
}

impl From<EntitySchema> for Vec<String> {
    fn from(schema: EntitySchema) -> Self {
        schema.labels
    }
}

fn trimmed<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    let s = String::deserialize(d)?;
    Ok(s.trim().to_owned())
}

/// One (span text, type) pair. Identity is the pair itself; there is no
/// positional component. Text is trimmed on construction and matching is
/// case-sensitive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityMention {
    #[serde(deserialize_with = "trimmed")]
    pub text: String,
    #[serde(rename = "type")]
    pub label: String,
}

impl EntityMention {
    pub fn new(text: impl AsRef<str>, label: impl Into<String>) -> Self {
        Self {
            text: text.as_ref().trim().to_owned(),
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct RawNerSample {
    id: String,
    text: String,
    schema: EntitySchema,
    gold: BTreeSet<EntityMention>,
}

/// A gold-annotated sentence: input text, entity schema, and the gold
/// entity set. Every gold label must belong to the schema and every gold
/// span must occur as a contiguous substring of the text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawNerSample")]
pub struct NerSample {
    pub id: String,
    pub text: String,
    pub schema: EntitySchema,
    pub gold: BTreeSet<EntityMention>,
}

impl NerSample {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        schema: EntitySchema,
        gold: impl IntoIterator<Item = EntityMention>,
    ) -> Result<Self, SampleError> {
        let sample = Self {
            id: id.into(),
            text: text.into(),
            schema,
            gold: gold.into_iter().collect(),
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        for mention in &self.gold {
            if !self.schema.contains(&mention.label) {
                return Err(SampleError::LabelNotInSchema {
                    id: self.id.clone(),
                    label: mention.label.clone(),
                });
            }
            if !self.text.contains(&mention.text) {
                return Err(SampleError::SpanNotInText {
                    id: self.id.clone(),
                    span: mention.text.clone(),
                });
            }
        }
        Ok(())
    }
}

impl TryFrom<RawNerSample> for NerSample {
    type Error = SampleError;

    fn try_from(raw: RawNerSample) -> Result<Self, Self::Error> {
        Self::new(raw.id, raw.text, raw.schema, raw.gold)
    }
}

/// A parsed model output: the reasoning trace, the predicted entity list
/// in generation order, and the verbatim model text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningOutput {
    pub cot: String,
    pub entities: Vec<EntityMention>,
    pub raw: String,
}

/// Extract the reasoning trace and the entity list from raw model text.
///
/// Schema membership is intentionally not enforced here; that is the
/// schema reward's job.
pub fn parse_model_output(raw: &str) -> Result<ReasoningOutput, ParseError> {
    let open = raw.find(THINK_OPEN).ok_or(ParseError::NoReasoningBlock)?;
    let body = &raw[open + THINK_OPEN.len()..];
    let close = body.find(THINK_CLOSE).ok_or(ParseError::NoReasoningBlock)?;
    let cot = &body[..close];
    let tail = body[close + THINK_CLOSE.len()..].trim();
    let entities: Vec<EntityMention> =
        serde_json::from_str(tail).map_err(|_| ParseError::MalformedEntities)?;
    Ok(ReasoningOutput {
        cot: cot.to_owned(),
        entities,
        raw: raw.to_owned(),
    })
}

/// Render a (reasoning, entities) pair as canonical model-output text.
/// Deterministic: equal inputs produce byte-identical outputs.
pub fn serialize_target(cot: &str, entities: &[EntityMention]) -> Result<String, SerializeError> {
    if cot.contains(THINK_OPEN) || cot.contains(THINK_CLOSE) {
        return Err(SerializeError::DelimiterCollision);
    }
    let payload = serde_json::to_string(entities).expect("entity list serializes");
    Ok(format!("{THINK_OPEN}{cot}{THINK_CLOSE}{payload}"))
}

/// One schema compliance defect for a single entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemaViolation {
    EmptyText,
    UnpermittedType(String),
}

/// One descriptor per entity whose label is outside the schema or whose
/// text is empty. Empty result iff the list is fully compliant.
pub fn schema_violations(entities: &[EntityMention], schema: &EntitySchema) -> Vec<SchemaViolation> {
    entities
        .iter()
        .filter_map(|mention| {
            if mention.text.trim().is_empty() {
                Some(SchemaViolation::EmptyText)
            } else if !schema.contains(&mention.label) {
                Some(SchemaViolation::UnpermittedType(mention.label.clone()))
            } else {
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(labels: &[&str]) -> EntitySchema {
        EntitySchema::new(labels.iter().copied()).unwrap()
    }

    #[test]
    fn schema_rejects_degenerate_inputs() {
        assert_eq!(EntitySchema::new(Vec::<String>::new()), Err(SchemaError::Empty));
        assert_eq!(
            EntitySchema::new(["a", "a"]),
            Err(SchemaError::DuplicateLabel("a".into()))
        );
        assert_eq!(EntitySchema::new(["a", "  "]), Err(SchemaError::BlankLabel));
    }

    #[test]
    fn sample_validation() {
        let s = schema(&["location"]);
        assert!(NerSample::new("1", "Paris is nice", s.clone(), [EntityMention::new("Paris", "location")]).is_ok());
        let err = NerSample::new("2", "Paris is nice", s.clone(), [EntityMention::new("Paris", "city")]);
        assert!(matches!(err, Err(SampleError::LabelNotInSchema { .. })));
        let err = NerSample::new("3", "Paris is nice", s, [EntityMention::new("Rome", "location")]);
        assert!(matches!(err, Err(SampleError::SpanNotInText { .. })));
    }

    #[test]
    fn parse_basic() {
        let out = parse_model_output(
            "<think>Paris is a city.</think>[{\"text\":\"Paris\",\"type\":\"location\"}]",
        )
        .unwrap();
        assert_eq!(out.cot, "Paris is a city.");
        assert_eq!(out.entities, vec![EntityMention::new("Paris", "location")]);
    }

    #[test]
    fn parse_empty_entity_list() {
        let out = parse_model_output("<think>no entities here</think>[]").unwrap();
        assert_eq!(out.cot, "no entities here");
        assert!(out.entities.is_empty());
    }

    #[test]
    fn parse_unclosed_block() {
        assert_eq!(
            parse_model_output("<think>unclosed …"),
            Err(ParseError::NoReasoningBlock)
        );
    }

    #[test]
    fn parse_malformed_payload() {
        assert_eq!(
            parse_model_output("<think>x</think>not json"),
            Err(ParseError::MalformedEntities)
        );
        assert_eq!(
            parse_model_output("<think>x</think>[{\"name\":\"Paris\"}]"),
            Err(ParseError::MalformedEntities)
        );
        assert_eq!(
            parse_model_output("<think>x</think>"),
            Err(ParseError::MalformedEntities)
        );
    }

    #[test]
    fn serialize_canonical_form() {
        assert_eq!(serialize_target("x", &[]).unwrap(), "<think>x</think>[]");
        assert_eq!(
            serialize_target("r", &[EntityMention::new("Paris", "location")]).unwrap(),
            "<think>r</think>[{\"text\":\"Paris\",\"type\":\"location\"}]"
        );
    }

    #[test]
    fn serialize_rejects_delimiter_collision() {
        assert_eq!(
            serialize_target("a <think> b", &[]),
            Err(SerializeError::DelimiterCollision)
        );
        assert_eq!(
            serialize_target("a </think> b", &[]),
            Err(SerializeError::DelimiterCollision)
        );
    }

    #[test]
    fn violations() {
        let s = schema(&["location"]);
        assert!(schema_violations(&[EntityMention::new("Paris", "location")], &s).is_empty());
        assert_eq!(
            schema_violations(&[EntityMention::new("Paris", "city")], &s),
            vec![SchemaViolation::UnpermittedType("city".into())]
        );
        assert_eq!(
            schema_violations(&[EntityMention::new("", "location")], &s),
            vec![SchemaViolation::EmptyText]
        );
    }
}
