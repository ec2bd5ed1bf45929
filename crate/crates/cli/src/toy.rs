//! The toy SFT + GRPO experiment: corpus generation, supervised
//! training, reinforcement training on the micro-NER environment, and
//! the before/after reward summary.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rner_core::grpo::{grpo_train, GrpoConfig, IterationLog};
use rner_core::micro_ner::{fresh_policy, generate_sentences, sft_dataset, CorpusConfig, MicroNerEnv};
use rner_core::policy::{sft_train, ToyPolicy};

use crate::io::write_json;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            steps: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: Option<u64>,
    pub corpus: CorpusConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    /// Rollouts per query when estimating a policy's mean reward.
    pub eval_samples: usize,
}

impl ToyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&content).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn eval_samples(&self) -> usize {
        if self.eval_samples == 0 {
            4
        } else {
            self.eval_samples
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SftArtifacts {
    pub final_loss: f64,
    pub steps: usize,
}

/// Train the initial policy on the synthetic corpus and write the policy
/// plus its loss curve.
pub fn run_sft(config: &ToyConfig, seed: u64, out_dir: &Path) -> Result<(ToyPolicy, SftArtifacts)> {
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences = generate_sentences(&config.corpus, &mut rng);
    let policy = fresh_policy();
    let dataset = sft_dataset(&policy, &sentences)?;
    let (trained, losses) = sft_train(&policy, &dataset, config.sft.learning_rate, config.sft.steps)?;
    let final_loss = rner_core::policy::sft_loss_and_grad(&trained, &dataset)?.0;

    write_json(&out_dir.join("sft_policy.json"), &trained)?;
    write_json(&out_dir.join("sft_losses.json"), &losses)?;
    Ok((
        trained,
        SftArtifacts {
            final_loss,
            steps: losses.len(),
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ToySummary {
    pub seed: u64,
    pub sft_mean_reward: f64,
    pub grpo_mean_reward: f64,
    pub iterations: usize,
}

/// Run GRPO from an SFT policy and write the trained policy, the
/// per-iteration log, and the before/after reward summary.
pub fn run_grpo(
    config: &ToyConfig,
    seed: u64,
    sft_policy: &ToyPolicy,
    out_dir: &Path,
) -> Result<(ToyPolicy, Vec<IterationLog>, ToySummary)> {
    fs::create_dir_all(out_dir)?;
    // Same corpus stream as run_sft, so both stages see identical queries.
    let mut corpus_rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences = generate_sentences(&config.corpus, &mut corpus_rng);
    let env = MicroNerEnv::new(sft_policy, &sentences, config.grpo.weights)?;

    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    let (trained, log) = grpo_train(sft_policy, &env, &config.grpo, &mut train_rng)
        .map_err(|e| anyhow::anyhow!("grpo training failed: {e}"))?;

    let samples = config.eval_samples();
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0e7a);
    let sft_mean_reward = env.mean_reward(
        sft_policy,
        config.grpo.temperature,
        config.grpo.max_len,
        samples,
        &mut eval_rng,
    );
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0e7a);
    let grpo_mean_reward = env.mean_reward(
        &trained,
        config.grpo.temperature,
        config.grpo.max_len,
        samples,
        &mut eval_rng,
    );

    let summary = ToySummary {
        seed,
        sft_mean_reward,
        grpo_mean_reward,
        iterations: log.len(),
    };
    write_json(&out_dir.join("grpo_policy.json"), &trained)?;
    crate::io::write_jsonl(&out_dir.join("grpo_log.jsonl"), &log)?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok((trained, log, summary))
}
