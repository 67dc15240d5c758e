//! Adversarial code search and curriculum replacement.
//!
//! A program is adversarial for a generated test `t_gen` when it passes
//! `t_gen` yet fails at least one gold test: a real bug the current test
//! generator cannot see. Candidates come from the code generator either by
//! plain sampling (problem-only prompt, keep what happens to qualify) or by
//! instructing it to plant a flaw that survives `t_gen`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeArtifact, Corpus, CorpusError, Problem, Provenance, TestCase};
use crate::gateway::{Gateway, GatewayError, RequestContext};
use crate::protocol::{parse_code_completion, TemplateId, TemplateSet};
use crate::reward::Judge;
use crate::sandbox::outputs_match;

pub const DEFAULT_MAX_RETRIES: u32 = 10;

#[derive(Debug, Error)]
pub enum AdversaryError {
    #[error("generated test is not consistent with the gold solution")]
    NotGoldConsistent,
    #[error("max_retries must be at least 1")]
    InvalidRetries,
    #[error("adversarial ratio of an empty decision list")]
    NoDecisions,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Unconditional,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMethod {
    Sampling,
    Instructed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarySearchConfig {
    pub mode: SearchMode,
    pub method: SearchMethod,
    pub max_retries: u32,
}

impl Default for AdversarySearchConfig {
    fn default() -> Self {
        Self {
            mode: SearchMode::Adaptive,
            method: SearchMethod::Sampling,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

impl AdversarySearchConfig {
    pub fn validate(&self) -> Result<(), AdversaryError> {
        if self.max_retries == 0 {
            return Err(AdversaryError::InvalidRetries);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurriculumAction {
    KeptOriginal,
    Replaced,
    TriggerSkipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumDecision {
    pub instance_id: String,
    pub step: u64,
    pub action: CurriculumAction,
    pub attempts_used: u32,
    /// The installed artifact, present exactly when `action` is `Replaced`.
    pub adver: Option<CodeArtifact>,
    /// Whether a search was run at all.
    pub searched: bool,
}

/// Line of the decisions log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub step: u64,
    pub instance_id: String,
    pub action: CurriculumAction,
    pub attempts_used: u32,
}

impl From<&CurriculumDecision> for DecisionRecord {
    fn from(d: &CurriculumDecision) -> Self {
        Self {
            step: d.step,
            instance_id: d.instance_id.clone(),
            action: d.action,
            attempts_used: d.attempts_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Not yet installed: `lineage` and `id` are set on replacement.
    pub artifact: Option<CodeArtifact>,
    pub attempts_used: u32,
}

/// Fraction of decisions that replaced the buggy code.
pub fn adversarial_ratio(decisions: &[CurriculumDecision]) -> Result<f64, AdversaryError> {
    if decisions.is_empty() {
        return Err(AdversaryError::NoDecisions);
    }
    let replaced = decisions
        .iter()
        .filter(|d| d.action == CurriculumAction::Replaced)
        .count();
    Ok(replaced as f64 / decisions.len() as f64)
}

/// Passes `t_gen` and fails the gold suite. Assumes `t_gen` is gold-consistent.
fn evades_and_fails_gold(judge: &Judge<'_>, problem: &Problem, candidate: &str, t_gen: &TestCase) -> bool {
    let on_t_gen = judge
        .sandbox
        .execute(candidate, &problem.language_tag, &t_gen.input, &judge.limits);
    if !(on_t_gen.is_ok() && outputs_match(&on_t_gen.stdout, &t_gen.output)) {
        return false;
    }
    let suite = judge
        .sandbox
        .run_suite(candidate, &problem.language_tag, &problem.gold_tests, &judge.limits);
    suite.pass_count < problem.gold_tests.len()
}

pub fn is_valid_adversarial(
    judge: &Judge<'_>,
    problem: &Problem,
    candidate: &str,
    t_gen: &TestCase,
) -> Result<bool, AdversaryError> {
    if !judge.check_io_accuracy(problem, t_gen).correct {
        return Err(AdversaryError::NotGoldConsistent);
    }
    Ok(evades_and_fails_gold(judge, problem, candidate, t_gen))
}

pub struct Adversary<'a> {
    pub judge: Judge<'a>,
    pub code_gen: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub config: AdversarySearchConfig,
    pub seed: Option<u64>,
}

impl<'a> Adversary<'a> {
    pub fn new(
        judge: Judge<'a>,
        code_gen: &'a Gateway,
        templates: &'a TemplateSet,
        config: AdversarySearchConfig,
    ) -> Result<Self, AdversaryError> {
        config.validate()?;
        Ok(Self {
            judge,
            code_gen,
            templates,
            config,
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    fn search(
        &self,
        problem: &Problem,
        t_gen: &TestCase,
        step: u64,
        method: SearchMethod,
    ) -> Result<SearchOutcome, AdversaryError> {
        if !self.judge.check_io_accuracy(problem, t_gen).correct {
            return Err(AdversaryError::NotGoldConsistent);
        }
        let (prompt, template, provenance) = match method {
            SearchMethod::Sampling => (
                self.templates.adversary_sample(problem),
                TemplateId::AdversarySample,
                Provenance::AdversarialSampled,
            ),
            SearchMethod::Instructed => (
                self.templates.adversary_instruct(problem, t_gen),
                TemplateId::AdversaryInstruct,
                Provenance::AdversarialInstructed,
            ),
        };
        let ctx = RequestContext::new(template, problem)
            .with_t_gen(t_gen)
            .with_seed(self.seed);
        for attempt in 1..=self.config.max_retries {
            let completion = self
                .code_gen
                .complete(&prompt, &ctx, 1)?
                .pop()
                .expect("gateway returns n completions");
            let Some(code) = parse_code_completion(&completion.text) else {
                continue;
            };
            if evades_and_fails_gold(&self.judge, problem, &code, t_gen) {
                return Ok(SearchOutcome {
                    artifact: Some(CodeArtifact::adversarial(code, provenance, step)),
                    attempts_used: attempt,
                });
            }
        }
        Ok(SearchOutcome {
            artifact: None,
            attempts_used: self.config.max_retries,
        })
    }

    pub fn find_adversarial_sampling(
        &self,
        problem: &Problem,
        t_gen: &TestCase,
        step: u64,
    ) -> Result<SearchOutcome, AdversaryError> {
        self.search(problem, t_gen, step, SearchMethod::Sampling)
    }

    pub fn find_adversarial_instructed(
        &self,
        problem: &Problem,
        t_gen: &TestCase,
        step: u64,
    ) -> Result<SearchOutcome, AdversaryError> {
        self.search(problem, t_gen, step, SearchMethod::Instructed)
    }

    /// Decides whether to search for (and install) adversarial code for one
    /// instance given the test the current policy produced for it.
    ///
    /// Adaptive mode only searches when `t_gen` already attacks the current
    /// buggy code. A `t_gen` that is missing or not gold-consistent cannot
    /// drive the validity filter, so no search runs in either mode.
    pub fn curriculum_step(
        &self,
        corpus: &mut Corpus,
        instance_id: &str,
        t_gen: Option<&TestCase>,
        step: u64,
    ) -> Result<CurriculumDecision, AdversaryError> {
        let instance = corpus
            .instance(instance_id)
            .ok_or_else(|| CorpusError::UnknownInstance(instance_id.to_string()))?;
        let problem = corpus.problem_of(instance);
        let decision = |action, attempts_used, adver, searched| CurriculumDecision {
            instance_id: instance_id.to_string(),
            step,
            action,
            attempts_used,
            adver,
            searched,
        };

        let attack = t_gen.map(|t| self.judge.check_attack(problem, &instance.buggy.source, t));
        let consistent = attack.as_ref().is_some_and(|a| a.io_correct);
        let skip_action = match self.config.mode {
            SearchMode::Adaptive => CurriculumAction::TriggerSkipped,
            SearchMode::Unconditional => CurriculumAction::KeptOriginal,
        };
        let (Some(t_gen), true) = (t_gen, consistent) else {
            return Ok(decision(skip_action, 0, None, false));
        };
        if self.config.mode == SearchMode::Adaptive && !attack.as_ref().is_some_and(|a| a.attacked) {
            return Ok(decision(CurriculumAction::TriggerSkipped, 0, None, false));
        }

        let outcome = self.search(problem, t_gen, step, self.config.method)?;
        match outcome.artifact {
            Some(adver) => {
                corpus.replace_with_adversarial(instance_id, adver, Some(t_gen.clone()))?;
                let installed = corpus
                    .instance(instance_id)
                    .expect("instance exists")
                    .buggy
                    .clone();
                Ok(decision(
                    CurriculumAction::Replaced,
                    outcome.attempts_used,
                    Some(installed),
                    true,
                ))
            }
            None => Ok(decision(
                CurriculumAction::KeptOriginal,
                outcome.attempts_used,
                None,
                true,
            )),
        }
    }
}
