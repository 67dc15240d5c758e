//! Intrinsic metrics (IO accuracy, attack rate, input attack rate), difficulty
//! tiering, and the Best-of-N selection harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CodeArtifact, Corpus, CorpusError, Instance, Problem, TestCase, Tier};
use crate::gateway::{Gateway, GatewayError, RequestContext};
use crate::grouping::par_by_key;
use crate::protocol::{parse_code_completion, parse_completion, TemplateId, TemplateSet};
use crate::reward::{Judge, RewardConfig};

pub const DEFAULT_TIER_ATTEMPTS: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("attempts must be at least 1")]
    ZeroAttempts,
    #[error("k_test must be at least 1")]
    ZeroTests,
    #[error("tiering needs at least 3 instances, corpus has {0}")]
    TooFewInstances(usize),
    #[error("unknown problem {0}")]
    UnknownProblem(String),
    #[error("problem {0} has no candidates")]
    NoCandidates(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub attempts: usize,
    pub io_correct: usize,
    pub attacked: usize,
    pub input_attacked: usize,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.attempts += o.attempts;
        self.io_correct += o.io_correct;
        self.attacked += o.attacked;
        self.input_attacked += o.input_attacked;
    }

    fn frac(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub tier: Option<Tier>,
    pub attempts: usize,
    pub io_acc_rate: f64,
    pub attack_rate: f64,
    pub input_attack_rate: f64,
    pub counts: Counts,
    /// Set when the generator failed; the instance is left out of aggregates.
    pub excluded: Option<String>,
}

/// Rates in percent over all attempts pooled across the slice's instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub instances: usize,
    pub counts: Counts,
    pub io_acc: f64,
    pub attack_rate: f64,
    pub input_attack_rate: f64,
}

impl Aggregate {
    fn from_counts(instances: usize, counts: Counts) -> Self {
        Self {
            instances,
            counts,
            io_acc: 100.0 * Counts::frac(counts.io_correct, counts.attempts),
            attack_rate: 100.0 * Counts::frac(counts.attacked, counts.attempts),
            input_attack_rate: 100.0 * Counts::frac(counts.input_attacked, counts.attempts),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierAggregates {
    pub easy: Aggregate,
    pub medium: Aggregate,
    pub hard: Aggregate,
    pub untiered: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub generator: String,
    pub config_digest: String,
    pub attempts: usize,
    pub reward_preset: String,
    pub overall: Aggregate,
    pub tiers: TierAggregates,
    pub instances: Vec<InstanceRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Total / Easy / Medium / Hard columns, each with IO Acc and Attack Rate.
    pub fn table(&self) -> String {
        let cols = [
            ("Total", &self.overall),
            ("Easy", &self.tiers.easy),
            ("Medium", &self.tiers.medium),
            ("Hard", &self.tiers.hard),
        ];
        let mut out = String::new();
        let _ = write!(out, "{:<24}", "");
        for (name, _) in cols {
            let _ = write!(out, "| {name:^19} ");
        }
        out.push('\n');
        let _ = write!(out, "{:<24}", "Generator");
        for _ in cols {
            let _ = write!(out, "| {:>8} {:>10} ", "IO Acc", "Attack");
        }
        out.push('\n');
        let _ = write!(out, "{:<24}", truncate(&self.generator, 23));
        for (_, a) in cols {
            let _ = write!(out, "| {:>8.2} {:>10.2} ", a.io_acc, a.attack_rate);
        }
        out.push('\n');
        out
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Scores test-generation completions from one gateway.
pub struct Evaluator<'a> {
    pub judge: Judge<'a>,
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub seed: Option<u64>,
}

impl Evaluator<'_> {
    fn draw(&self, problem: &Problem, instance: &Instance, n: usize) -> Result<Vec<String>, GatewayError> {
        let prompt = self.templates.test_gen(problem, &instance.buggy.source);
        let ctx = RequestContext::new(TemplateId::TestGen, problem).with_seed(self.seed);
        let mut out = Vec::with_capacity(n);
        let chunk = self.gateway.max_n().max(1);
        while out.len() < n {
            let k = chunk.min(n - out.len());
            out.extend(self.gateway.complete(&prompt, &ctx, k)?.into_iter().map(|c| c.text));
        }
        Ok(out)
    }

    fn score_instance(&self, corpus: &Corpus, instance: &Instance, attempts: usize) -> Result<Counts, GatewayError> {
        let problem = corpus.problem_of(instance);
        let texts = self.draw(problem, instance, attempts)?;
        let mut c = Counts {
            attempts,
            ..Counts::default()
        };
        for text in texts {
            let Some(test) = parse_completion(&text).test_case else {
                continue;
            };
            let s = self.judge.score_test(problem, &instance.buggy.source, &test);
            c.io_correct += usize::from(s.io_correct);
            c.attacked += usize::from(s.attacked);
            c.input_attacked += usize::from(s.input_attacked);
        }
        Ok(c)
    }

    fn digests(&self, corpus: &Corpus, ids: &[&Instance]) -> Vec<String> {
        ids.iter()
            .map(|i| {
                self.templates
                    .test_gen(corpus.problem_of(i), &i.buggy.source)
                    .digest()
            })
            .collect()
    }

    pub fn evaluate(&self, corpus: &Corpus, attempts: usize, reward: &RewardConfig) -> Result<EvalReport, EvalError> {
        if attempts == 0 {
            return Err(EvalError::ZeroAttempts);
        }
        let instances: Vec<&Instance> = corpus.instances().iter().collect();
        let keys = self.digests(corpus, &instances);
        let results = par_by_key(&keys, |i| self.score_instance(corpus, instances[i], attempts));

        let mut records: Vec<InstanceRecord> = instances
            .iter()
            .zip(results)
            .map(|(inst, r)| match r {
                Ok(c) => InstanceRecord {
                    instance_id: inst.instance_id.clone(),
                    tier: inst.tier,
                    attempts,
                    io_acc_rate: Counts::frac(c.io_correct, c.attempts),
                    attack_rate: Counts::frac(c.attacked, c.attempts),
                    input_attack_rate: Counts::frac(c.input_attacked, c.attempts),
                    counts: c,
                    excluded: None,
                },
                Err(e) => {
                    log::warn!("instance {} excluded: {e}", inst.instance_id);
                    InstanceRecord {
                        instance_id: inst.instance_id.clone(),
                        tier: inst.tier,
                        attempts,
                        io_acc_rate: 0.0,
                        attack_rate: 0.0,
                        input_attack_rate: 0.0,
                        counts: Counts::default(),
                        excluded: Some(e.to_string()),
                    }
                }
            })
            .collect();
        records.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));

        let slice = |pred: &dyn Fn(&InstanceRecord) -> bool| {
            let mut c = Counts::default();
            let mut n = 0;
            for r in records.iter().filter(|r| r.excluded.is_none() && pred(r)) {
                c.add(&r.counts);
                n += 1;
            }
            Aggregate::from_counts(n, c)
        };
        let overall = slice(&|_| true);
        let tiers = TierAggregates {
            easy: slice(&|r| r.tier == Some(Tier::Easy)),
            medium: slice(&|r| r.tier == Some(Tier::Medium)),
            hard: slice(&|r| r.tier == Some(Tier::Hard)),
            untiered: slice(&|r| r.tier.is_none()),
        };
        Ok(EvalReport {
            generator: self.gateway.identity().to_string(),
            config_digest: config_digest(self.gateway.identity(), attempts, reward, self.seed),
            attempts,
            reward_preset: reward.preset_name.clone(),
            overall,
            tiers,
            instances: records,
        })
    }

    /// Ranks instances by estimated attack rate (descending, ties by id) and
    /// labels the thirds easy, medium, hard. Earlier parts take the remainder.
    pub fn tier_partition(&self, corpus: &mut Corpus, attempts: usize) -> Result<Vec<TierAssignment>, EvalError> {
        if attempts == 0 {
            return Err(EvalError::ZeroAttempts);
        }
        let n = corpus.instances().len();
        if n < 3 {
            return Err(EvalError::TooFewInstances(n));
        }
        let instances: Vec<&Instance> = corpus.instances().iter().collect();
        let keys = self.digests(corpus, &instances);
        let rates = par_by_key(&keys, |i| self.score_instance(corpus, instances[i], attempts));
        let mut ranked: Vec<(String, f64)> = Vec::with_capacity(n);
        for (inst, r) in instances.iter().zip(rates) {
            let c = r?;
            ranked.push((inst.instance_id.clone(), Counts::frac(c.attacked, c.attempts)));
        }
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let sizes = third_sizes(n);
        let mut out = Vec::with_capacity(n);
        let mut it = ranked.into_iter();
        for (tier, size) in Tier::ALL.into_iter().zip(sizes) {
            for (instance_id, attack_rate) in it.by_ref().take(size) {
                corpus.set_tier(&instance_id, Some(tier))?;
                out.push(TierAssignment {
                    instance_id,
                    attack_rate,
                    tier,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierAssignment {
    pub instance_id: String,
    pub attack_rate: f64,
    pub tier: Tier,
}

/// Sizes of three contiguous parts of `n` items, differing by at most one.
pub fn third_sizes(n: usize) -> [usize; 3] {
    let (base, rem) = (n / 3, n % 3);
    [0, 1, 2].map(|i| base + usize::from(i < rem))
}

pub fn config_digest(generator: &str, attempts: usize, reward: &RewardConfig, seed: Option<u64>) -> String {
    let payload = serde_json::json!({
        "generator": generator,
        "attempts": attempts,
        "reward": reward,
        "seed": seed,
    });
    hex::encode(Sha256::digest(payload.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonSelection {
    pub selected_index: usize,
    pub suite_used: Vec<TestCase>,
    pub pass_rates: Vec<f64>,
    /// No generated test parsed; index 0 was selected by default.
    pub no_tests: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonProblemResult {
    pub problem_id: String,
    pub selected_index: usize,
    pub suite_size: usize,
    pub no_tests: bool,
    pub passes_gold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonReport {
    pub generator: String,
    pub k_test: usize,
    pub pass_at_1: f64,
    pub problems: Vec<BonProblemResult>,
}

/// Best-of-N: rank candidates by pass rate on a generated suite. Gold tests
/// never filter the suite; they only judge the final choice.
pub struct BestOfN<'a> {
    pub judge: Judge<'a>,
    pub test_gen: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub seed: Option<u64>,
}

impl BestOfN<'_> {
    /// Test `i` is requested against candidate `i mod N` as the program under test.
    pub fn bon_select(
        &self,
        problem: &Problem,
        candidates: &[CodeArtifact],
        k_test: usize,
    ) -> Result<BonSelection, EvalError> {
        if candidates.is_empty() {
            return Err(EvalError::NoCandidates(problem.id.clone()));
        }
        if k_test == 0 {
            return Err(EvalError::ZeroTests);
        }
        let ctx = RequestContext::new(TemplateId::TestGen, problem).with_seed(self.seed);
        let mut suite = Vec::new();
        for i in 0..k_test {
            let target = &candidates[i % candidates.len()];
            let prompt = self.templates.test_gen(problem, &target.source);
            let c = self.test_gen.complete(&prompt, &ctx, 1)?;
            if let Some(t) = c.first().and_then(|c| parse_completion(&c.text).test_case) {
                suite.push(t);
            }
        }
        if suite.is_empty() {
            return Ok(BonSelection {
                selected_index: 0,
                suite_used: suite,
                pass_rates: vec![0.0; candidates.len()],
                no_tests: true,
            });
        }
        let pass_rates: Vec<f64> = candidates
            .iter()
            .map(|c| {
                self.judge
                    .sandbox
                    .run_suite(&c.source, &problem.language_tag, &suite, &self.judge.limits)
                    .pass_rate
            })
            .collect();
        let mut best = 0;
        for (i, r) in pass_rates.iter().enumerate() {
            if *r > pass_rates[best] {
                best = i;
            }
        }
        Ok(BonSelection {
            selected_index: best,
            suite_used: suite,
            pass_rates,
            no_tests: false,
        })
    }

    /// pass@1 (%) over the problems in `candidate_sets`, keyed by problem id.
    pub fn bon_evaluate(
        &self,
        corpus: &Corpus,
        candidate_sets: &BTreeMap<String, Vec<CodeArtifact>>,
        k_test: usize,
    ) -> Result<BonReport, EvalError> {
        if k_test == 0 {
            return Err(EvalError::ZeroTests);
        }
        let mut problems = Vec::with_capacity(candidate_sets.len());
        for id in candidate_sets.keys() {
            let p = corpus
                .problem(id)
                .ok_or_else(|| EvalError::UnknownProblem(id.clone()))?;
            problems.push(p);
        }
        // Prompts depend on the statement, so equal statements share streams.
        let keys: Vec<String> = problems.iter().map(|p| p.statement.clone()).collect();
        let results = par_by_key(&keys, |i| {
            let p = problems[i];
            let cands = &candidate_sets[&p.id];
            let sel = self.bon_select(p, cands, k_test)?;
            let chosen = &cands[sel.selected_index];
            let gold = self
                .judge
                .sandbox
                .run_suite(&chosen.source, &p.language_tag, &p.gold_tests, &self.judge.limits);
            Ok::<_, EvalError>(BonProblemResult {
                problem_id: p.id.clone(),
                selected_index: sel.selected_index,
                suite_size: sel.suite_used.len(),
                no_tests: sel.no_tests,
                passes_gold: gold.pass_count == p.gold_tests.len(),
            })
        });
        let problems: Vec<BonProblemResult> = results.into_iter().collect::<Result<_, _>>()?;
        let passed = problems.iter().filter(|r| r.passes_gold).count();
        Ok(BonReport {
            generator: self.test_gen.identity().to_string(),
            k_test,
            pass_at_1: 100.0 * Counts::frac(passed, problems.len()),
            problems,
        })
    }
}

/// Draws `n` candidate programs for `problem` from a code generator.
/// Unparseable completions become empty programs, which fail every test.
pub fn draw_candidates(
    gateway: &Gateway,
    templates: &TemplateSet,
    problem: &Problem,
    n: usize,
    seed: Option<u64>,
) -> Result<Vec<CodeArtifact>, GatewayError> {
    let prompt = templates.code_gen(problem);
    let ctx = RequestContext::new(TemplateId::CodeGen, problem).with_seed(seed);
    Ok(gateway
        .complete(&prompt, &ctx, n)?
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let src = parse_code_completion(&c.text).unwrap_or_default();
            CodeArtifact::candidate(format!("{}#c{i}", problem.id), src)
        })
        .collect())
}
