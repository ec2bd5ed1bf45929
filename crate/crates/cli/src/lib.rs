//! Command-line surface tying the pipeline together: dataset I/O, the
//! CoT pipeline stages, capped stratified sampling, evaluation reports,
//! and the toy SFT/GRPO experiments.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 transport
//! error.

pub mod io;
pub mod toy;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rner_core::cot::{
    distill_self_cot, gate_by_threshold, reannotate_batch, score_batch, validate_record, CotRecord,
    PipelineError, PromptTemplates, DEFAULT_GATE_THRESHOLD,
};
use rner_core::gateway::{Gateway, GatewayConfig, HttpTransport, MockTransport, Transport};
use rner_core::sampling::{
    capped_stratified_sample, DatasetSpec, StratumSample, DEFAULT_BUDGET, DEFAULT_CAP, DEFAULT_SEED,
};
use rner_core::scoring::{corpus_report, Report};
use rner_core::types::{parse_model_output, EntityMention, NerSample};

use io::{ensure_unique_ids, read_json, read_jsonl, write_json, write_jsonl};
use toy::ToyConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Transport(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Transport(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) => write!(f, "usage error: {e:#}"),
            CliError::Data(e) => write!(f, "data error: {e:#}"),
            CliError::Transport(e) => write!(f, "transport error: {e:#}"),
        }
    }
}

fn usage<T>(result: Result<T>) -> std::result::Result<T, CliError> {
    result.map_err(CliError::Usage)
}

fn data<T>(result: Result<T>) -> std::result::Result<T, CliError> {
    result.map_err(CliError::Data)
}

#[derive(Debug, Parser)]
#[command(name = "rner", about = "Reasoning-oriented NER pipeline tools", version)]
pub struct Cli {
    /// Seed for all randomized subcommands.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GatewayArgs {
    /// Scripted mock transport rules (JSON list of {match, reply}).
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Gateway TOML config for a live chat-completions endpoint.
    #[arg(long)]
    pub gateway: Option<PathBuf>,
    /// Concurrent gateway requests.
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Override the CoT generation prompt template (text file).
    #[arg(long)]
    pub generation_template: Option<PathBuf>,
    /// Override the CoT scoring prompt template (text file).
    #[arg(long)]
    pub scoring_template: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Re-annotate samples with reasoning traces via the gateway.
    CotGen {
        /// Input NER samples (JSONL).
        #[arg(long)]
        samples: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Structural validation of raw CoT records.
    CotValidate {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consistency-score validated records via the judge gateway.
    CotScore {
        #[arg(long)]
        records: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gate scored records by consistency threshold.
    CotGate {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GATE_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the hybrid corpus: keep predicted reasoning only where the
    /// prediction exactly matches gold.
    Distill {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Capped stratified sampling over a dataset manifest.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: usize,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Span-level micro P/R/F1 report over gold/prediction files.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a saved evaluation report as a console table.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
    /// Train the initial policy on the synthetic micro-NER corpus.
    ToySft {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run GRPO from the SFT policy and summarize the reward change.
    ToyGrpo {
        #[arg(long)]
        config: Option<PathBuf>,
        /// SFT policy file; trained in place when absent.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Prediction record consumed by `distill`: a gold sample plus the raw
/// model output text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionLine {
    #[serde(flatten)]
    pub sample: NerSample,
    pub raw: String,
}

/// One line of an evaluation file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalLine {
    pub id: String,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub entities: Vec<EntityMention>,
}

fn default_dataset() -> String {
    "default".to_string()
}

/// Manifest entry for `sample`: explicit size, or a path whose line
/// count is the size. Excluded entries are skipped entirely.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub exclude: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleOutput {
    pub cap: usize,
    pub budget: usize,
    pub seed: u64,
    pub datasets: Vec<SampleOutputEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleOutputEntry {
    pub name: String,
    pub count: usize,
    pub indices: Vec<usize>,
}

fn load_templates(args: &GatewayArgs) -> Result<PromptTemplates> {
    let mut templates = PromptTemplates::default();
    if let Some(path) = &args.generation_template {
        templates.generation =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    }
    if let Some(path) = &args.scoring_template {
        templates.scoring =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    }
    Ok(templates)
}

fn build_gateway(args: &GatewayArgs) -> Result<Gateway<Box<dyn Transport>>> {
    match (&args.rules, &args.gateway) {
        (Some(rules), None) => {
            let json = fs::read_to_string(rules).with_context(|| format!("reading {}", rules.display()))?;
            let transport = MockTransport::from_json(&json).context("parsing mock rules")?;
            let config = GatewayConfig {
                max_in_flight: args.workers.max(1),
                backoff_base_ms: 0,
                ..GatewayConfig::default()
            };
            Ok(Gateway::new(Box::new(transport) as Box<dyn Transport>, config))
        }
        (None, Some(gateway)) => {
            let content =
                fs::read_to_string(gateway).with_context(|| format!("reading {}", gateway.display()))?;
            let config: GatewayConfig = toml::from_str(&content).context("parsing gateway config")?;
            let transport = HttpTransport::new(&config)
                .map_err(|e| anyhow::anyhow!("building http transport: {e}"))?;
            Ok(Gateway::new(Box::new(transport) as Box<dyn Transport>, config))
        }
        _ => anyhow::bail!("exactly one of --rules or --gateway is required"),
    }
}

fn pipeline_to_cli(err: PipelineError) -> CliError {
    CliError::Transport(anyhow::anyhow!(err.to_string()))
}

pub fn run(cli: Cli) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::CotGen { samples, gateway, out } => {
            let templates = usage(load_templates(&gateway))?;
            let gw = usage(build_gateway(&gateway))?;
            let samples: Vec<NerSample> = data(read_jsonl(&samples))?;
            data(ensure_unique_ids(samples.iter().map(|s| s.id.as_str())))?;
            let records = reannotate_batch(&samples, &gw, &templates, gateway.workers)
                .map_err(pipeline_to_cli)?;
            data(write_jsonl(&out, &records))?;
            println!("cot-gen: {} samples -> {}", records.len(), out.display());
            Ok(())
        }
        Command::CotValidate { records, out } => {
            let records: Vec<CotRecord> = data(read_jsonl(&records))?;
            let validated: Vec<CotRecord> = records.into_iter().map(validate_record).collect();
            let kept = validated.iter().filter(|r| !r.status.is_discarded()).count();
            data(write_jsonl(&out, &validated))?;
            println!(
                "cot-validate: {kept} validated, {} discarded -> {}",
                validated.len() - kept,
                out.display()
            );
            Ok(())
        }
        Command::CotScore { records, gateway, out } => {
            let templates = usage(load_templates(&gateway))?;
            let gw = usage(build_gateway(&gateway))?;
            let records: Vec<CotRecord> = data(read_jsonl(&records))?;
            let scored =
                score_batch(records, &gw, &templates, gateway.workers).map_err(pipeline_to_cli)?;
            data(write_jsonl(&out, &scored))?;
            println!("cot-score: {} records -> {}", scored.len(), out.display());
            Ok(())
        }
        Command::CotGate { records, threshold, out } => {
            let records: Vec<CotRecord> = data(read_jsonl(&records))?;
            let total = records.len();
            let gated = gate_by_threshold(records, threshold);
            data(write_jsonl(&out, &gated))?;
            println!(
                "cot-gate: {} of {total} records at threshold {threshold} -> {}",
                gated.len(),
                out.display()
            );
            Ok(())
        }
        Command::Distill { predictions, out } => {
            let lines: Vec<PredictionLine> = data(read_jsonl(&predictions))?;
            data(ensure_unique_ids(lines.iter().map(|l| l.sample.id.as_str())))?;
            let mut parsed = Vec::new();
            let mut unparsed = Vec::new();
            for line in lines {
                match parse_model_output(&line.raw) {
                    Ok(output) => parsed.push((line.sample, output)),
                    Err(_) => unparsed.push(line.sample),
                }
            }
            let mut hybrid = distill_self_cot(&parsed);
            // Unparseable predictions cannot be verifiably correct; they
            // contribute plain records.
            for sample in unparsed {
                hybrid.push(rner_core::cot::HybridRecord {
                    id: sample.id.clone(),
                    text: sample.text.clone(),
                    schema: sample.schema.clone(),
                    entities: sample.gold.iter().cloned().collect(),
                    cot: None,
                });
            }
            let with_cot = hybrid.iter().filter(|r| r.cot.is_some()).count();
            data(write_jsonl(&out, &hybrid))?;
            println!(
                "distill: {with_cot} with reasoning, {} plain -> {}",
                hybrid.len() - with_cot,
                out.display()
            );
            Ok(())
        }
        Command::Sample { manifest, cap, budget, out } => {
            let entries: Vec<ManifestEntry> = data(read_json(&manifest))?;
            let mut specs = Vec::new();
            for entry in entries.into_iter().filter(|e| !e.exclude) {
                let size = match (entry.size, &entry.path) {
                    (Some(size), _) => size,
                    (None, Some(path)) => {
                        let content = data(
                            fs::read_to_string(path)
                                .with_context(|| format!("reading {}", path.display())),
                        )?;
                        content.lines().filter(|l| !l.trim().is_empty()).count()
                    }
                    (None, None) => {
                        return Err(CliError::Data(anyhow::anyhow!(
                            "manifest entry {} has neither size nor path",
                            entry.name
                        )))
                    }
                };
                specs.push(DatasetSpec { name: entry.name, size });
            }
            let result = capped_stratified_sample(&specs, cap, budget, cli.seed)
                .map_err(|e| CliError::Data(anyhow::anyhow!(e.to_string())))?;
            let output = SampleOutput {
                cap,
                budget,
                seed: cli.seed,
                datasets: result
                    .into_iter()
                    .map(|(name, StratumSample { count, indices })| SampleOutputEntry {
                        name,
                        count,
                        indices,
                    })
                    .collect(),
            };
            data(write_json(&out, &output))?;
            let total: usize = output.datasets.iter().map(|d| d.count).sum();
            println!("sample: {total} of budget {budget} -> {}", out.display());
            Ok(())
        }
        Command::Eval { gold, pred, out } => {
            let gold_lines: Vec<EvalLine> = data(read_jsonl(&gold))?;
            let pred_lines: Vec<EvalLine> = data(read_jsonl(&pred))?;
            data(ensure_unique_ids(gold_lines.iter().map(|l| l.id.as_str())))?;
            data(ensure_unique_ids(pred_lines.iter().map(|l| l.id.as_str())))?;
            let preds: BTreeMap<&str, &EvalLine> =
                pred_lines.iter().map(|l| (l.id.as_str(), l)).collect();
            let gold_ids: std::collections::BTreeSet<&str> =
                gold_lines.iter().map(|l| l.id.as_str()).collect();
            let missing: Vec<&str> = gold_ids
                .iter()
                .filter(|id| !preds.contains_key(**id))
                .copied()
                .collect();
            let extra: Vec<&str> = preds
                .keys()
                .filter(|id| !gold_ids.contains(**id))
                .copied()
                .collect();
            if !missing.is_empty() || !extra.is_empty() {
                return Err(CliError::Data(anyhow::anyhow!(
                    "id mismatch: missing predictions for {missing:?}, extra predictions {extra:?}"
                )));
            }
            let mut per_dataset: BTreeMap<String, Vec<(Vec<EntityMention>, Vec<EntityMention>)>> =
                BTreeMap::new();
            for line in &gold_lines {
                let pred = preds[line.id.as_str()];
                per_dataset
                    .entry(line.dataset.clone())
                    .or_default()
                    .push((pred.entities.clone(), line.entities.clone()));
            }
            let report = corpus_report(&per_dataset)
                .map_err(|e| CliError::Data(anyhow::anyhow!(e.to_string())))?;
            print!("{}", report.render_table());
            if let Some(out) = out {
                data(write_json(&out, &report))?;
            }
            Ok(())
        }
        Command::Report { report } => {
            let report: Report = data(read_json(&report))?;
            print!("{}", report.render_table());
            Ok(())
        }
        Command::ToySft { config, out } => {
            let config = usage(load_toy_config(config.as_deref()))?;
            let seed = config.seed.unwrap_or(cli.seed);
            let (_, artifacts) = data(toy::run_sft(&config, seed, &out))?;
            println!(
                "toy-sft: final loss {:.6} after {} steps -> {}",
                artifacts.final_loss,
                artifacts.steps,
                out.display()
            );
            Ok(())
        }
        Command::ToyGrpo { config, policy, out } => {
            let config = usage(load_toy_config(config.as_deref()))?;
            let seed = config.seed.unwrap_or(cli.seed);
            let sft_policy = match policy {
                Some(path) => data(read_json(&path))?,
                None => data(toy::run_sft(&config, seed, &out))?.0,
            };
            let (_, _, summary) = data(toy::run_grpo(&config, seed, &sft_policy, &out))?;
            println!(
                "toy-grpo: mean reward {:.4} (SFT) -> {:.4} (GRPO) over {} iterations -> {}",
                summary.sft_mean_reward,
                summary.grpo_mean_reward,
                summary.iterations,
                out.display()
            );
            Ok(())
        }
    }
}

fn load_toy_config(path: Option<&Path>) -> Result<ToyConfig> {
    match path {
        Some(path) => ToyConfig::load(path),
        None => Ok(ToyConfig::default()),
    }
}
