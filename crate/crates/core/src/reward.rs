//! Rewards for generated tests and generated code.
//!
//! A test-generation completion earns a weighted sum of binary components:
//! IO accuracy (the gold program agrees with the predicted output), attack
//! (the test is correct *and* the buggy program crashes or disagrees), format,
//! and optionally input attack (the generated input paired with the gold
//! output breaks the buggy program). Code completions earn the mean of format,
//! tag count and suite pass rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Problem, TestCase};
use crate::protocol::{format_score, parse_code_answer, tag_count_score, ParsedCompletion};
use crate::sandbox::{outputs_match, ExecutionLimits, ExecutionOutcome, Sandbox};

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("unknown reward preset {0:?}")]
    UnknownPreset(String),
    #[error("reward weights must be finite and non-negative")]
    NegativeWeight,
    #[error("reward weights sum to {0}, expected 1")]
    WeightSum(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub preset_name: String,
    pub w_acc: f64,
    pub w_attack: f64,
    pub w_format: f64,
    pub w_input_attack: f64,
}

impl RewardConfig {
    pub const PRESETS: [&'static str; 3] = ["three_combined", "attack_only", "acc_plus_input_attack"];

    pub fn three_combined() -> Self {
        let third = 1.0 / 3.0;
        Self {
            preset_name: "three_combined".into(),
            w_acc: third,
            w_attack: third,
            w_format: third,
            w_input_attack: 0.0,
        }
    }

    /// Attack reward plus format, so completions stay parseable.
    pub fn attack_only() -> Self {
        Self {
            preset_name: "attack_only".into(),
            w_acc: 0.0,
            w_attack: 0.5,
            w_format: 0.5,
            w_input_attack: 0.0,
        }
    }

    pub fn acc_plus_input_attack() -> Self {
        let third = 1.0 / 3.0;
        Self {
            preset_name: "acc_plus_input_attack".into(),
            w_acc: third,
            w_attack: 0.0,
            w_format: third,
            w_input_attack: third,
        }
    }

    pub fn preset(name: &str) -> Result<Self, RewardError> {
        match name {
            "three_combined" => Ok(Self::three_combined()),
            "attack_only" => Ok(Self::attack_only()),
            "acc_plus_input_attack" => Ok(Self::acc_plus_input_attack()),
            other => Err(RewardError::UnknownPreset(other.to_string())),
        }
    }

    /// Custom weights, rescaled to sum to one.
    pub fn from_weights(
        name: impl Into<String>,
        acc: f64,
        attack: f64,
        format: f64,
        input_attack: f64,
    ) -> Result<Self, RewardError> {
        let ws = [acc, attack, format, input_attack];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RewardError::NegativeWeight);
        }
        let sum: f64 = ws.iter().sum();
        let scale = if sum > 0.0 { 1.0 / sum } else { 0.0 };
        let cfg = Self {
            preset_name: name.into(),
            w_acc: acc * scale,
            w_attack: attack * scale,
            w_format: format * scale,
            w_input_attack: input_attack * scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let ws = [self.w_acc, self.w_attack, self.w_format, self.w_input_attack];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RewardError::NegativeWeight);
        }
        let sum: f64 = ws.iter().sum();
        if sum != 0.0 && (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(RewardError::WeightSum(sum));
        }
        Ok(())
    }

    pub fn uses_input_attack(&self) -> bool {
        self.w_input_attack > 0.0
    }
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self::three_combined()
    }
}

/// The `reward` section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSettings {
    pub preset: String,
    pub weights: Option<WeightOverrides>,
}

impl Default for RewardSettings {
    fn default() -> Self {
        Self {
            preset: "three_combined".into(),
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightOverrides {
    pub acc: Option<f64>,
    pub attack: Option<f64>,
    pub format: Option<f64>,
    pub input_attack: Option<f64>,
}

impl RewardSettings {
    pub fn resolve(&self) -> Result<RewardConfig, RewardError> {
        let base = RewardConfig::preset(&self.preset)?;
        match &self.weights {
            None => Ok(base),
            Some(w) => RewardConfig::from_weights(
                format!("{}+custom", base.preset_name),
                w.acc.unwrap_or(base.w_acc),
                w.attack.unwrap_or(base.w_attack),
                w.format.unwrap_or(base.w_format),
                w.input_attack.unwrap_or(base.w_input_attack),
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackDetail {
    NotEvaluated,
    BuggyCrashed,
    BuggyWrongOutput,
    BuggyPassed,
}

fn classify(buggy: &ExecutionOutcome, expected: &str) -> AttackDetail {
    if !buggy.is_ok() {
        AttackDetail::BuggyCrashed
    } else if outputs_match(&buggy.stdout, expected) {
        AttackDetail::BuggyPassed
    } else {
        AttackDetail::BuggyWrongOutput
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoCheck {
    pub correct: bool,
    /// Gold crashed or timed out on the input.
    pub gold_anomaly: bool,
    pub gold_outcome: ExecutionOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub io_correct: bool,
    pub attacked: bool,
    pub detail: AttackDetail,
    pub gold_outcome: ExecutionOutcome,
    pub buggy_outcome: Option<ExecutionOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputAttack {
    pub valid: bool,
    pub attacked: bool,
}

/// Every signal one generated test yields against one buggy program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestScore {
    pub io_correct: bool,
    pub attacked: bool,
    pub input_valid: bool,
    pub input_attacked: bool,
    pub detail: AttackDetail,
    pub gold_anomaly: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: u8,
    pub r_attack: u8,
    pub r_input_attack: Option<u8>,
    pub r_format: u8,
    pub total: f64,
    pub attack_detail: AttackDetail,
    pub gold_anomaly: bool,
}

impl RewardBreakdown {
    fn zero(r_format: u8, config: &RewardConfig) -> Self {
        let mut b = Self {
            r_acc: 0,
            r_attack: 0,
            r_input_attack: config.uses_input_attack().then_some(0),
            r_format,
            total: 0.0,
            attack_detail: AttackDetail::NotEvaluated,
            gold_anomaly: false,
        };
        b.total = b.weighted_total(config);
        b
    }

    pub fn weighted_total(&self, config: &RewardConfig) -> f64 {
        config.w_acc * f64::from(self.r_acc)
            + config.w_attack * f64::from(self.r_attack)
            + config.w_format * f64::from(self.r_format)
            + config.w_input_attack * f64::from(self.r_input_attack.unwrap_or(0))
    }

    /// Component values keyed by name, as exported for trainers.
    pub fn components(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::from([
            ("acc".to_string(), f64::from(self.r_acc)),
            ("attack".to_string(), f64::from(self.r_attack)),
            ("format".to_string(), f64::from(self.r_format)),
        ]);
        if let Some(v) = self.r_input_attack {
            m.insert("input_attack".to_string(), f64::from(v));
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeRewardBreakdown {
    pub format: u8,
    pub tag_count: u8,
    pub pass_rate: f64,
    pub total: f64,
}

/// Runs gold and buggy programs through a sandbox to score tests and code.
#[derive(Debug, Clone, Copy)]
pub struct Judge<'a> {
    pub sandbox: &'a Sandbox,
    pub limits: ExecutionLimits,
}

impl<'a> Judge<'a> {
    pub fn new(sandbox: &'a Sandbox, limits: ExecutionLimits) -> Self {
        Self { sandbox, limits }
    }

    fn run(&self, problem: &Problem, source: &str, input: &str) -> ExecutionOutcome {
        self.sandbox
            .execute(source, &problem.language_tag, input, &self.limits)
    }

    pub fn check_io_accuracy(&self, problem: &Problem, test: &TestCase) -> IoCheck {
        let gold = self.run(problem, &problem.gold_source, &test.input);
        IoCheck {
            correct: gold.is_ok() && outputs_match(&gold.stdout, &test.output),
            gold_anomaly: !gold.is_ok(),
            gold_outcome: gold,
        }
    }

    pub fn check_attack(&self, problem: &Problem, buggy_source: &str, test: &TestCase) -> AttackResult {
        let io = self.check_io_accuracy(problem, test);
        if !io.correct {
            return AttackResult {
                io_correct: false,
                attacked: false,
                detail: AttackDetail::NotEvaluated,
                gold_outcome: io.gold_outcome,
                buggy_outcome: None,
            };
        }
        let buggy = self.run(problem, buggy_source, &test.input);
        let detail = classify(&buggy, &test.output);
        AttackResult {
            io_correct: true,
            attacked: detail != AttackDetail::BuggyPassed,
            detail,
            gold_outcome: io.gold_outcome,
            buggy_outcome: Some(buggy),
        }
    }

    /// Pairs `input` with the gold output and checks whether the buggy program fails it.
    pub fn input_attack(&self, problem: &Problem, buggy_source: &str, input: &str) -> InputAttack {
        let gold = self.run(problem, &problem.gold_source, input);
        if !gold.is_ok() {
            return InputAttack {
                valid: false,
                attacked: false,
            };
        }
        let buggy = self.run(problem, buggy_source, input);
        InputAttack {
            valid: true,
            attacked: classify(&buggy, &gold.stdout) != AttackDetail::BuggyPassed,
        }
    }

    /// All test signals from one gold run and one buggy run.
    pub fn score_test(&self, problem: &Problem, buggy_source: &str, test: &TestCase) -> TestScore {
        let gold = self.run(problem, &problem.gold_source, &test.input);
        let io_correct = gold.is_ok() && outputs_match(&gold.stdout, &test.output);
        if !gold.is_ok() {
            return TestScore {
                io_correct: false,
                attacked: false,
                input_valid: false,
                input_attacked: false,
                detail: AttackDetail::NotEvaluated,
                gold_anomaly: true,
            };
        }
        let buggy = self.run(problem, buggy_source, &test.input);
        let input_attacked = classify(&buggy, &gold.stdout) != AttackDetail::BuggyPassed;
        let detail = if io_correct {
            classify(&buggy, &test.output)
        } else {
            AttackDetail::NotEvaluated
        };
        TestScore {
            io_correct,
            attacked: io_correct && detail != AttackDetail::BuggyPassed,
            input_valid: true,
            input_attacked,
            detail,
            gold_anomaly: false,
        }
    }

    pub fn compute_test_reward(
        &self,
        parsed: &ParsedCompletion,
        problem: &Problem,
        buggy_source: &str,
        config: &RewardConfig,
    ) -> RewardBreakdown {
        let r_format = format_score(parsed);
        let Some(test) = parsed.test_case.as_ref() else {
            return RewardBreakdown::zero(r_format, config);
        };
        let score = self.score_test(problem, buggy_source, test);
        breakdown_from_score(&score, r_format, config)
    }

    pub fn compute_code_reward(
        &self,
        code: Option<&str>,
        parsed: &ParsedCompletion,
        suite: &[TestCase],
        language_tag: &str,
    ) -> CodeRewardBreakdown {
        let format = format_score(parsed);
        let tag_count = tag_count_score(parsed);
        let pass_rate = match code {
            Some(src) if !suite.is_empty() => {
                self.sandbox
                    .run_suite(src, language_tag, suite, &self.limits)
                    .pass_rate
            }
            _ => 0.0,
        };
        CodeRewardBreakdown {
            format,
            tag_count,
            pass_rate,
            total: (f64::from(format) + f64::from(tag_count) + pass_rate) / 3.0,
        }
    }

    /// Parses a tagged code completion and scores it against `suite`.
    pub fn score_code_completion(
        &self,
        text: &str,
        suite: &[TestCase],
        language_tag: &str,
    ) -> CodeRewardBreakdown {
        let parsed = parse_code_answer(text);
        self.compute_code_reward(parsed.code.as_deref(), &parsed, suite, language_tag)
    }
}

pub fn breakdown_from_score(score: &TestScore, r_format: u8, config: &RewardConfig) -> RewardBreakdown {
    let mut b = RewardBreakdown {
        r_acc: u8::from(score.io_correct),
        r_attack: u8::from(score.attacked),
        r_input_attack: config
            .uses_input_attack()
            .then_some(u8::from(score.input_attacked)),
        r_format,
        total: 0.0,
        attack_detail: score.detail,
        gold_anomaly: score.gold_anomaly,
    };
    b.total = b.weighted_total(config);
    b
}
