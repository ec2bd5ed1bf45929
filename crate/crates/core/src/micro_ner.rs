//! A synthetic micro-NER environment: sentences over a 12-symbol
//! alphabet with a deterministic gold rule, an output grammar over
//! "copy" symbols plus type tags, and a corpus generator whose targets
//! are consistent under a bigram (k = 1) policy so the SFT objective is
//! exactly learnable at desk scale.
//!
//! Gold rule: any maximal run of capital-class symbols is one entity of
//! type T1; any maximal run of digit-class symbols is one entity of type
//! T2. An output is a `|`-separated list of mentions, each mention being
//! one or more copy symbols (`P'` copies `P`) followed by exactly one
//! type tag, terminated by `</s>`. Malformed outputs decode to a parse
//! error, which zeroes both reward components.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grpo::Environment;
use crate::policy::{PolicyError, SftExample, SymbolId, ToyPolicy};
use crate::scoring::{composite_reward, RewardWeights};
use crate::types::{EntityMention, EntitySchema, ParseError, ReasoningOutput};

/// Filler symbols (never entities).
pub const FILLERS: [&str; 5] = ["a", "b", "c", "d", "e"];
/// Capital-class symbols: runs form T1 entities.
pub const CAPITALS: [&str; 4] = ["P", "Q", "R", "S"];
/// Digit-class symbols: runs form T2 entities.
pub const DIGITS: [&str; 3] = ["3", "7", "9"];
/// Copy symbols, one per entity-class symbol, in CAPITALS ++ DIGITS order.
pub const COPIES: [&str; 7] = ["P'", "Q'", "R'", "S'", "3'", "7'", "9'"];
pub const TAG_T1: &str = "T1";
pub const TAG_T2: &str = "T2";
pub const SEP: &str = "|";
pub const EOS: &str = "</s>";

/// The full policy vocabulary: 12 sentence symbols, 7 copy symbols, two
/// tags, the mention separator, and EOS.
pub fn vocab() -> Vec<String> {
    FILLERS
        .iter()
        .chain(CAPITALS.iter())
        .chain(DIGITS.iter())
        .chain(COPIES.iter())
        .chain([TAG_T1, TAG_T2, SEP, EOS].iter())
        .map(|s| s.to_string())
        .collect()
}

pub fn schema() -> EntitySchema {
    EntitySchema::new([TAG_T1, TAG_T2]).expect("fixed schema is valid")
}

fn class_of(symbol: &str) -> Option<&'static str> {
    if CAPITALS.contains(&symbol) {
        Some(TAG_T1)
    } else if DIGITS.contains(&symbol) {
        Some(TAG_T2)
    } else {
        None
    }
}

fn base_of_copy(symbol: &str) -> Option<&str> {
    symbol.strip_suffix('\'').filter(|base| class_of(base).is_some())
}

/// Apply the gold rule to a sentence: maximal same-class runs become
/// entities.
pub fn gold_entities(sentence: &[&str]) -> Vec<EntityMention> {
    let mut entities = Vec::new();
    let mut run = String::new();
    let mut run_class: Option<&str> = None;
    for &symbol in sentence.iter().chain([""].iter()) {
        let class = class_of(symbol);
        if class == run_class && class.is_some() {
            run.push_str(symbol);
            continue;
        }
        if let Some(label) = run_class {
            entities.push(EntityMention::new(&run, label));
        }
        run.clear();
        run_class = class;
        if class.is_some() {
            run.push_str(symbol);
        }
    }
    entities
}

/// Decode an output sequence into an entity list. The sequence must be
/// EOS-terminated; mentions are copy-symbol runs followed by one tag,
/// separated by `|`. Anything else is a malformed-entities parse error.
pub fn decode_output(policy: &ToyPolicy, output: &[SymbolId]) -> Result<ReasoningOutput, ParseError> {
    let symbols = policy.decode(output).map_err(|_| ParseError::MalformedEntities)?;
    let Some((&last, body)) = symbols.split_last() else {
        return Err(ParseError::MalformedEntities);
    };
    if last != EOS {
        return Err(ParseError::MalformedEntities);
    }
    let mut entities = Vec::new();
    if !body.is_empty() {
        for segment in body.split(|&s| s == SEP) {
            let Some((&tag, text_symbols)) = segment.split_last() else {
                return Err(ParseError::MalformedEntities);
            };
            if (tag != TAG_T1 && tag != TAG_T2) || text_symbols.is_empty() {
                return Err(ParseError::MalformedEntities);
            }
            let mut text = String::new();
            for &symbol in text_symbols {
                let base = base_of_copy(symbol).ok_or(ParseError::MalformedEntities)?;
                text.push_str(base);
            }
            entities.push(EntityMention::new(text, tag));
        }
    }
    Ok(ReasoningOutput {
        cot: String::new(),
        entities,
        raw: symbols.join(" "),
    })
}

/// The reference output for a sentence: copy each entity run, tag it,
/// separate mentions with `|`, terminate with EOS.
pub fn target_output(sentence: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    let entities = gold_entities(sentence);
    for (i, entity) in entities.iter().enumerate() {
        if i > 0 {
            out.push(SEP.to_string());
        }
        // entity text is a concatenation of single-character symbols
        for ch in entity.text.chars() {
            out.push(format!("{ch}'"));
        }
        out.push(entity.label.clone());
    }
    out.push(EOS.to_string());
    out
}

/// A fixed query set with gold derived from the sentences themselves.
#[derive(Debug, Clone)]
pub struct MicroNerEnv {
    policy_vocab: ToyPolicy,
    queries: Vec<Vec<SymbolId>>,
    schema: EntitySchema,
    weights: RewardWeights,
}

impl MicroNerEnv {
    pub fn new(
        template_policy: &ToyPolicy,
        sentences: &[Vec<String>],
        weights: RewardWeights,
    ) -> Result<Self, PolicyError> {
        let queries = sentences
            .iter()
            .map(|s| template_policy.encode(&s.iter().map(String::as_str).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            policy_vocab: template_policy.clone(),
            queries,
            schema: schema(),
            weights,
        })
    }

    /// Mean composite reward of `policy` over all queries, `samples`
    /// rollouts each.
    pub fn mean_reward<R: Rng + ?Sized>(
        &self,
        policy: &ToyPolicy,
        temperature: f64,
        max_len: usize,
        samples: usize,
        rng: &mut R,
    ) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for query in &self.queries {
            for _ in 0..samples {
                let output = policy.sample_sequence(query, temperature, max_len, rng);
                total += self.reward(query, &output).expect("micro env reward is total");
                n += 1;
            }
        }
        total / n as f64
    }
}

impl Environment for MicroNerEnv {
    fn queries(&self) -> Vec<Vec<SymbolId>> {
        self.queries.clone()
    }

    fn reward(&self, query: &[SymbolId], output: &[SymbolId]) -> Result<f64, String> {
        let sentence = self
            .policy_vocab
            .decode(query)
            .map_err(|e| format!("query decode failed: {e}"))?;
        let gold = gold_entities(&sentence);
        let decoded = decode_output(&self.policy_vocab, output);
        Ok(composite_reward(&decoded, &gold, &self.schema, &self.weights))
    }
}

/// Generation parameters for the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub sentences: usize,
    /// Fraction of entity-free sentences.
    pub negative_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sentences: 200,
            negative_fraction: 0.25,
        }
    }
}

/// Generate sentences whose target outputs are consistent under a bigram
/// policy: positives are filler runs ending in a single entity symbol
/// from {P, Q, 3}; negatives are filler runs ending in the fixed filler
/// "a". The gold rule stays the general run rule; the generator simply
/// never emits sentences a bigram policy cannot fit.
pub fn generate_sentences<R: Rng + ?Sized>(config: &CorpusConfig, rng: &mut R) -> Vec<Vec<String>> {
    let enders = ["P", "Q", "3"];
    let mut sentences = Vec::with_capacity(config.sentences);
    for i in 0..config.sentences {
        let negative = (i as f64) < config.negative_fraction * config.sentences as f64;
        let interior_len = rng.gen_range(1..=4);
        let mut sentence: Vec<String> = (0..interior_len)
            .map(|_| FILLERS[rng.gen_range(0..FILLERS.len())].to_string())
            .collect();
        if negative {
            sentence.push("a".to_string());
        } else {
            sentence.push(enders[rng.gen_range(0..enders.len())].to_string());
        }
        sentences.push(sentence);
    }
    sentences
}

/// Build the SFT dataset: (sentence, reference output) pairs encoded for
/// `policy`.
pub fn sft_dataset(policy: &ToyPolicy, sentences: &[Vec<String>]) -> Result<Vec<SftExample>, PolicyError> {
    sentences
        .iter()
        .map(|sentence| {
            let symbols: Vec<&str> = sentence.iter().map(String::as_str).collect();
            let target = target_output(&symbols);
            Ok(SftExample {
                condition: policy.encode(&symbols)?,
                target: policy.encode(&target.iter().map(String::as_str).collect::<Vec<_>>())?,
            })
        })
        .collect()
}

/// Fresh uniform bigram policy over the micro-NER vocabulary.
pub fn fresh_policy() -> ToyPolicy {
    ToyPolicy::uniform(vocab(), EOS, 1).expect("fixed vocab is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gold_rule_maximal_runs() {
        assert_eq!(
            gold_entities(&["a", "P", "Q", "b", "3", "7"]),
            vec![EntityMention::new("PQ", TAG_T1), EntityMention::new("37", TAG_T2)]
        );
        assert!(gold_entities(&["a", "b"]).is_empty());
        assert_eq!(
            gold_entities(&["P", "3"]),
            vec![EntityMention::new("P", TAG_T1), EntityMention::new("3", TAG_T2)]
        );
    }

    #[test]
    fn target_round_trips_through_decoder() {
        let policy = fresh_policy();
        for sentence in [
            vec!["a", "b", "P"],
            vec!["c", "a"],
            vec!["a", "P", "Q", "b", "3"],
        ] {
            let target = target_output(&sentence);
            let ids = policy
                .encode(&target.iter().map(String::as_str).collect::<Vec<_>>())
                .unwrap();
            let decoded = decode_output(&policy, &ids).unwrap();
            assert_eq!(decoded.entities, gold_entities(&sentence));
        }
    }

    #[test]
    fn decoder_rejects_malformed_outputs() {
        let policy = fresh_policy();
        let ids = |symbols: &[&str]| policy.encode(symbols).unwrap();
        // not EOS-terminated
        assert!(decode_output(&policy, &ids(&["P'", TAG_T1])).is_err());
        // tag without text
        assert!(decode_output(&policy, &ids(&[TAG_T1, EOS])).is_err());
        // text without tag
        assert!(decode_output(&policy, &ids(&["P'", EOS])).is_err());
        // raw sentence symbol in the mention
        assert!(decode_output(&policy, &ids(&["P", TAG_T1, EOS])).is_err());
        // empty segment from a doubled separator
        assert!(decode_output(&policy, &ids(&["P'", TAG_T1, SEP, SEP, "Q'", TAG_T1, EOS])).is_err());
        // empty output is a valid abstention
        assert!(decode_output(&policy, &ids(&[EOS])).unwrap().entities.is_empty());
    }

    #[test]
    fn reward_of_reference_output_is_maximal() {
        let policy = fresh_policy();
        let sentences = vec![
            vec!["a".to_string(), "P".to_string()],
            vec!["b".to_string(), "a".to_string()],
        ];
        let env = MicroNerEnv::new(&policy, &sentences, RewardWeights::default()).unwrap();
        for sentence in &sentences {
            let symbols: Vec<&str> = sentence.iter().map(String::as_str).collect();
            let query = policy.encode(&symbols).unwrap();
            let target = target_output(&symbols);
            let output = policy
                .encode(&target.iter().map(String::as_str).collect::<Vec<_>>())
                .unwrap();
            assert_eq!(env.reward(&query, &output).unwrap(), 11.0);
        }
    }

    #[test]
    fn generator_counts_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let config = CorpusConfig::default();
        let sentences = generate_sentences(&config, &mut rng);
        assert_eq!(sentences.len(), 200);
        let negatives = sentences
            .iter()
            .filter(|s| gold_entities(&s.iter().map(String::as_str).collect::<Vec<_>>()).is_empty())
            .count();
        assert_eq!(negatives, 50);
        for s in &sentences {
            // entity symbol only ever in final position
            for symbol in &s[..s.len() - 1] {
                assert!(FILLERS.contains(&symbol.as_str()));
            }
        }
    }
}
