//! Group rollouts with group-normalized advantages, exported as JSONL for an
//! external policy-gradient trainer. No parameters are updated here.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{Adversary, AdversaryError, CurriculumDecision};
use crate::corpus::{Corpus, CorpusError};
use crate::gateway::{Gateway, GatewayError, RequestContext};
use crate::grouping::par_by_key;
use crate::protocol::{parse_completion, TemplateId, TemplateSet};
use crate::reward::{Judge, RewardBreakdown, RewardConfig};

pub const ADVANTAGE_EPS: f64 = 1e-8;
pub const DEFAULT_GROUP_SIZE: usize = 6;
pub const DEFAULT_BATCH_SIZE: usize = 128;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("a group needs at least 2 samples, got {0}")]
    GroupTooSmall(usize),
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `(r - mean) / (std + 1e-8)` with the population standard deviation;
/// a group whose rewards are all equal gets all-zero advantages.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>, RolloutError> {
    if rewards.len() < 2 {
        return Err(RolloutError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + ADVANTAGE_EPS;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCompletion {
    pub text: String,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub instance_id: String,
    pub prompt_digest: String,
    pub step: u64,
    pub completions: Vec<ScoredCompletion>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub step: u64,
    pub instance_id: String,
    pub prompt_digest: String,
    pub completion_text: String,
    pub reward_total: f64,
    pub reward_components: BTreeMap<String, f64>,
    pub advantage: f64,
    pub group_index: usize,
    pub sample_index: usize,
}

/// Records ordered by `(step, instance_id, sample_index)`.
pub fn export_records(groups: &[RolloutGroup]) -> Vec<ExportRecord> {
    let mut order: Vec<&RolloutGroup> = groups.iter().collect();
    order.sort_by(|a, b| (a.step, &a.instance_id).cmp(&(b.step, &b.instance_id)));
    order
        .into_iter()
        .enumerate()
        .flat_map(|(group_index, g)| {
            g.completions
                .iter()
                .zip(&g.advantages)
                .enumerate()
                .map(move |(sample_index, (c, adv))| ExportRecord {
                    step: g.step,
                    instance_id: g.instance_id.clone(),
                    prompt_digest: g.prompt_digest.clone(),
                    completion_text: c.text.clone(),
                    reward_total: c.reward.total,
                    reward_components: c.reward.components(),
                    advantage: *adv,
                    group_index,
                    sample_index,
                })
        })
        .collect()
}

pub fn export_jsonl(groups: &[RolloutGroup]) -> String {
    export_records(groups)
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

pub fn export_batch(groups: &[RolloutGroup], path: &Path) -> Result<(), RolloutError> {
    std::fs::write(path, export_jsonl(groups)).map_err(|source| RolloutError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutSettings {
    pub group_size: usize,
    pub batch_size: usize,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        Self {
            group_size: DEFAULT_GROUP_SIZE,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

/// Everything needed to sample and score test-generation groups.
pub struct Collector<'a> {
    pub judge: Judge<'a>,
    pub test_gen: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub reward: RewardConfig,
    pub seed: Option<u64>,
}

impl Collector<'_> {
    pub fn collect_group(
        &self,
        corpus: &Corpus,
        instance_id: &str,
        group_size: usize,
        step: u64,
    ) -> Result<RolloutGroup, RolloutError> {
        if group_size < 2 {
            return Err(RolloutError::GroupTooSmall(group_size));
        }
        let instance = corpus
            .instance(instance_id)
            .ok_or_else(|| CorpusError::UnknownInstance(instance_id.to_string()))?;
        let problem = corpus.problem_of(instance);
        let prompt = self.templates.test_gen(problem, &instance.buggy.source);
        let ctx = RequestContext::new(TemplateId::TestGen, problem).with_seed(self.seed);
        let texts = self.test_gen.complete(&prompt, &ctx, group_size)?;
        let completions: Vec<ScoredCompletion> = texts
            .into_par_iter()
            .map(|c| {
                let parsed = parse_completion(&c.text);
                let reward = self.judge.compute_test_reward(
                    &parsed,
                    problem,
                    &instance.buggy.source,
                    &self.reward,
                );
                ScoredCompletion {
                    text: c.text,
                    reward,
                }
            })
            .collect();
        let rewards: Vec<f64> = completions.iter().map(|c| c.reward.total).collect();
        Ok(RolloutGroup {
            instance_id: instance_id.to_string(),
            prompt_digest: prompt.digest(),
            step,
            advantages: compute_advantages(&rewards)?,
            completions,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepResult {
    pub decisions: Vec<CurriculumDecision>,
    pub groups: Vec<RolloutGroup>,
    /// Instances skipped this step because a generator call failed.
    pub flagged: Vec<(String, String)>,
}

/// Instance ids of the batch for `step`, cycling through the corpus.
pub fn batch_for_step(corpus: &Corpus, step: u64, batch_size: usize) -> Vec<String> {
    let n = corpus.instances().len();
    if n == 0 {
        return Vec::new();
    }
    let take = batch_size.min(n);
    let start = (step as usize).wrapping_mul(batch_size) % n;
    (0..take)
        .map(|j| corpus.instances()[(start + j) % n].instance_id.clone())
        .collect()
}

/// One training step: for every instance in the batch, probe the current
/// policy for a test, let the adversary update the curriculum, then collect a
/// scored group on the (possibly replaced) buggy code.
pub fn run_step(
    corpus: &mut Corpus,
    collector: &Collector<'_>,
    adversary: Option<&Adversary<'_>>,
    settings: &RolloutSettings,
    step: u64,
) -> Result<StepResult, RolloutError> {
    if settings.batch_size == 0 {
        return Err(RolloutError::EmptyBatch);
    }
    let batch = batch_for_step(corpus, step, settings.batch_size);
    let mut result = StepResult::default();

    if let Some(adversary) = adversary {
        for id in &batch {
            let t_gen = match probe_test(corpus, collector, id) {
                Ok(t) => t,
                Err(e) => {
                    result.flagged.push((id.clone(), e.to_string()));
                    None
                }
            };
            let decision = adversary.curriculum_step(corpus, id, t_gen.as_ref(), step)?;
            result.decisions.push(decision);
        }
    }

    let corpus_ro: &Corpus = corpus;
    let digests: Vec<String> = batch
        .iter()
        .map(|id| {
            let inst = corpus_ro.instance(id).expect("batch ids exist");
            collector
                .templates
                .test_gen(corpus_ro.problem_of(inst), &inst.buggy.source)
                .digest()
        })
        .collect();
    let slots = par_by_key(&digests, |i| {
        collector.collect_group(corpus_ro, &batch[i], settings.group_size, step)
    });
    for (i, slot) in slots.into_iter().enumerate() {
        match slot {
            Ok(g) => result.groups.push(g),
            Err(RolloutError::Gateway(e)) => {
                log::warn!("group for {} aborted: {e}", batch[i]);
                result.flagged.push((batch[i].clone(), e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(result)
}

fn probe_test(
    corpus: &Corpus,
    collector: &Collector<'_>,
    instance_id: &str,
) -> Result<Option<crate::corpus::TestCase>, GatewayError> {
    let inst = corpus.instance(instance_id).expect("batch ids exist");
    let problem = corpus.problem_of(inst);
    let prompt = collector.templates.test_gen(problem, &inst.buggy.source);
    let ctx = RequestContext::new(TemplateId::TestGen, problem).with_seed(collector.seed);
    let completion = collector
        .test_gen
        .complete(&prompt, &ctx, 1)?
        .pop()
        .expect("one completion");
    Ok(parse_completion(&completion.text).test_case)
}
