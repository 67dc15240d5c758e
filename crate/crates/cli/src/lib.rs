//! `atgen` command implementations. Each `cmd_*` returns `Ok(())` or a
//! [`CliError`] whose [`exit_code`](CliError::exit_code) follows the
//! convention 1 = pipeline failure, 2 = usage or configuration error.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use atgen_core::adversary::{adversarial_ratio, Adversary, AdversarySearchConfig, DecisionRecord};
use atgen_core::eval::{draw_candidates, BestOfN, EvalError, Evaluator, DEFAULT_TIER_ATTEMPTS};
use atgen_core::gateway::{BackendKind, GatewaySettings, Recording};
use atgen_core::protocol::TemplateId;
use atgen_core::reward::{Judge, RewardSettings};
use atgen_core::rollout::{export_batch, run_step, Collector, RolloutSettings};
use atgen_core::{
    load_corpus, parse_code_completion, parse_completion, Corpus, ExecutionLimits, Gateway, RequestContext, Sandbox,
    SandboxConfig, TemplateSet, TestCase,
};

#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Pipeline(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Pipeline(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

fn config_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Config(e.into())
}

fn pipeline_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Pipeline(e.into())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    /// When set, generator traffic is saved here as replay fixtures
    /// (`test_gen.replay.jsonl`, `code_gen.replay.jsonl`).
    pub record_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarySettings {
    /// Off reproduces training without the adversarial curriculum.
    pub enabled: bool,
    #[serde(flatten)]
    pub search: AdversarySearchConfig,
}

impl Default for AdversarySettings {
    fn default() -> Self {
        Self {
            enabled: true,
            search: AdversarySearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutRunSettings {
    pub group_size: usize,
    pub batch_size: usize,
    pub steps: u64,
}

impl Default for RolloutRunSettings {
    fn default() -> Self {
        let d = RolloutSettings::default();
        Self {
            group_size: d.group_size,
            batch_size: d.batch_size,
            steps: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteSource {
    Gold,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub attempts: usize,
    pub tier_attempts: usize,
    pub bon_n: usize,
    pub k_test: usize,
    /// Suite for `code-reward`: the gold tests or `k_test` generated tests.
    pub code_reward_suite: SuiteSource,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            attempts: 5,
            tier_attempts: DEFAULT_TIER_ATTEMPTS,
            bon_n: 4,
            k_test: 10,
            code_reward_suite: SuiteSource::Gold,
        }
    }
}

/// One JSON file describing a run. Relative paths resolve against the
/// directory holding the file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub sandbox: SandboxConfig,
    pub gateway: GatewaySettings,
    pub reward: RewardSettings,
    pub adversary: AdversarySettings,
    pub rollout: RolloutRunSettings,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(config_err)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(config_err)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.paths.corpus);
        fix(&mut self.paths.out_dir);
        fix(&mut self.paths.templates_dir);
        fix(&mut self.paths.record_dir);
        fix(&mut self.gateway.test_gen.fixture);
        fix(&mut self.gateway.code_gen.fixture);
    }

    /// Flags win over the file. The run seed also seeds every generator whose
    /// sampling seed is unset.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.paths.out_dir = Some(o);
        }
        for spec in [&mut self.gateway.test_gen, &mut self.gateway.code_gen] {
            if spec.sampling.seed.is_none() {
                spec.sampling.seed = Some(self.seed);
            }
        }
    }

    /// Every referenced input path must exist before any work starts.
    pub fn check_paths(&self) -> Result<(), CliError> {
        let mut required: Vec<(&str, &Path)> = Vec::new();
        if let Some(p) = &self.paths.corpus {
            required.push(("paths.corpus", p));
        }
        if let Some(p) = &self.paths.templates_dir {
            required.push(("paths.templates_dir", p));
        }
        for (name, spec) in [("gateway.test_gen", &self.gateway.test_gen), ("gateway.code_gen", &self.gateway.code_gen)] {
            if spec.backend == BackendKind::Replay {
                if let Some(p) = &spec.fixture {
                    required.push((name, p));
                }
            }
        }
        for (name, p) in required {
            if !p.exists() {
                return Err(config_err(anyhow!("{name}: {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("atgen-out"));
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(pipeline_err)?;
        Ok(dir)
    }
}

#[derive(Clone, Copy)]
enum Role {
    TestGen,
    CodeGen,
}

/// Shared state built once per command.
struct Env {
    cfg: RunConfig,
    sandbox: Arc<Sandbox>,
    limits: ExecutionLimits,
    templates: TemplateSet,
    recordings: Vec<(&'static str, Arc<Recording>)>,
}

impl Env {
    fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        cfg.check_paths()?;
        let limits = cfg.sandbox.limits().map_err(config_err)?;
        let templates = match &cfg.paths.templates_dir {
            Some(dir) => TemplateSet::from_dir(dir).map_err(config_err)?,
            None => TemplateSet::builtin(),
        };
        Ok(Self {
            cfg: cfg.clone(),
            sandbox: Arc::new(Sandbox::new(cfg.sandbox.clone())),
            limits,
            templates,
            recordings: Vec::new(),
        })
    }

    fn corpus(&self) -> Result<Corpus, CliError> {
        let path = self
            .cfg
            .paths
            .corpus
            .as_ref()
            .ok_or_else(|| config_err(anyhow!("paths.corpus is required")))?;
        load_corpus(path, &self.sandbox, &self.limits).map_err(config_err)
    }

    fn gateway(&mut self, role: Role) -> Result<Gateway, CliError> {
        let (name, spec) = match role {
            Role::TestGen => ("test_gen", &self.cfg.gateway.test_gen),
            Role::CodeGen => ("code_gen", &self.cfg.gateway.code_gen),
        };
        spec.validate().map_err(config_err)?;
        let limits = &self.cfg.gateway.limits;
        let gw = if self.cfg.paths.record_dir.is_some() {
            let rec = Recording::new();
            self.recordings.push((name, rec.clone()));
            Gateway::recording_from_spec(spec, limits, self.sandbox.clone(), self.limits.clone(), rec)
        } else {
            Gateway::from_spec(spec, limits, self.sandbox.clone(), self.limits.clone())
        };
        gw.map_err(config_err)
    }

    fn save_recordings(&self) -> Result<(), CliError> {
        let Some(dir) = &self.cfg.paths.record_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(pipeline_err)?;
        for (name, rec) in &self.recordings {
            write(&dir.join(format!("{name}.replay.jsonl")), &rec.to_jsonl())?;
        }
        Ok(())
    }

    fn judge(&self) -> Judge<'_> {
        Judge::new(&self.sandbox, self.limits.clone())
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(pipeline_err)
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("serializable") + "\n")
        .collect()
}

fn eval_err(e: EvalError) -> CliError {
    match e {
        EvalError::ZeroAttempts | EvalError::ZeroTests | EvalError::TooFewInstances(_) => config_err(e),
        other => pipeline_err(other),
    }
}

/// Writes `eval_report.json` and prints the metrics table.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let mut env = Env::new(cfg)?;
    let corpus = env.corpus()?;
    let reward = cfg.reward.resolve().map_err(config_err)?;
    let gw = env.gateway(Role::TestGen)?;
    let ev = Evaluator {
        judge: env.judge(),
        gateway: &gw,
        templates: &env.templates,
        seed: None,
    };
    let report = ev.evaluate(&corpus, cfg.eval.attempts, &reward).map_err(eval_err)?;
    let out = cfg.out_dir()?;
    write(&out.join("eval_report.json"), &report.to_json())?;
    for r in report.instances.iter().filter(|r| r.excluded.is_some()) {
        eprintln!("excluded {}: {}", r.instance_id, r.excluded.as_deref().unwrap_or(""));
    }
    print!("{}", report.table());
    env.save_recordings()
}

/// Writes `tiered.jsonl` (with its curriculum log) and `tiers.json`.
pub fn cmd_tier(cfg: &RunConfig) -> Result<(), CliError> {
    let mut env = Env::new(cfg)?;
    let mut corpus = env.corpus()?;
    let gw = env.gateway(Role::TestGen)?;
    let ev = Evaluator {
        judge: env.judge(),
        gateway: &gw,
        templates: &env.templates,
        seed: None,
    };
    let assignments = ev
        .tier_partition(&mut corpus, cfg.eval.tier_attempts)
        .map_err(eval_err)?;
    let out = cfg.out_dir()?;
    corpus.snapshot(&out.join("tiered.jsonl")).map_err(pipeline_err)?;
    let json = serde_json::to_string_pretty(&assignments).expect("serializable") + "\n";
    write(&out.join("tiers.json"), &json)?;
    for a in &assignments {
        println!("{:<24} {:>7.3} {}", a.instance_id, a.attack_rate, a.tier.as_str());
    }
    env.save_recordings()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub steps: u64,
    pub groups: usize,
    pub decisions: usize,
    pub adversarial_ratio: Option<f64>,
    pub flagged: Vec<(u64, String, String)>,
}

/// Runs `steps` training steps and writes `rollouts.jsonl`,
/// `curriculum.jsonl`, `decisions.jsonl`, `summary.json` and a corpus
/// snapshot `corpus.jsonl`.
pub fn cmd_train_rollouts(cfg: &RunConfig, steps: u64) -> Result<RolloutSummary, CliError> {
    let mut env = Env::new(cfg)?;
    let mut corpus = env.corpus()?;
    let reward = cfg.reward.resolve().map_err(config_err)?;
    let settings = RolloutSettings {
        group_size: cfg.rollout.group_size,
        batch_size: cfg.rollout.batch_size,
    };
    if settings.group_size < 2 || settings.batch_size == 0 {
        return Err(config_err(anyhow!("rollout needs group_size >= 2 and batch_size >= 1")));
    }
    let test_gw = env.gateway(Role::TestGen)?;
    let code_gw = if cfg.adversary.enabled {
        Some(env.gateway(Role::CodeGen)?)
    } else {
        None
    };
    let collector = Collector {
        judge: env.judge(),
        test_gen: &test_gw,
        templates: &env.templates,
        reward,
        seed: None,
    };
    let adversary = match &code_gw {
        Some(gw) => Some(
            Adversary::new(env.judge(), gw, &env.templates, cfg.adversary.search.clone())
                .map_err(config_err)?,
        ),
        None => None,
    };

    let mut groups = Vec::new();
    let mut decisions = Vec::new();
    let mut flagged = Vec::new();
    for step in 0..steps {
        let r = run_step(&mut corpus, &collector, adversary.as_ref(), &settings, step)
            .map_err(pipeline_err)?;
        log::info!(
            "step {step}: {} groups, {} curriculum decisions, {} flagged",
            r.groups.len(),
            r.decisions.len(),
            r.flagged.len()
        );
        flagged.extend(r.flagged.into_iter().map(|(id, why)| (step, id, why)));
        groups.extend(r.groups);
        decisions.extend(r.decisions);
    }

    let out = cfg.out_dir()?;
    export_batch(&groups, &out.join("rollouts.jsonl")).map_err(pipeline_err)?;
    write(&out.join("curriculum.jsonl"), &corpus.log_to_jsonl())?;
    let records: Vec<DecisionRecord> = decisions.iter().map(DecisionRecord::from).collect();
    write(&out.join("decisions.jsonl"), &to_jsonl(&records))?;
    corpus.snapshot(&out.join("corpus.jsonl")).map_err(pipeline_err)?;
    let summary = RolloutSummary {
        steps,
        groups: groups.len(),
        decisions: decisions.len(),
        adversarial_ratio: adversarial_ratio(&decisions).ok(),
        flagged,
    };
    write(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary).expect("serializable") + "\n"),
    )?;
    match summary.adversarial_ratio {
        Some(r) => println!(
            "{} groups over {steps} step(s); adversarial code ratio {:.2}%",
            summary.groups,
            100.0 * r
        ),
        None => println!("{} groups over {steps} step(s); curriculum disabled", summary.groups),
    }
    env.save_recordings()?;
    Ok(summary)
}

/// Draws `n` candidates per problem from the code generator, selects one with
/// `k_test` generated tests, and writes `bon_report.json`.
pub fn cmd_bon(cfg: &RunConfig, n: usize, k_test: usize) -> Result<f64, CliError> {
    if n == 0 || k_test == 0 {
        return Err(config_err(anyhow!("bon needs n >= 1 and k_test >= 1")));
    }
    let mut env = Env::new(cfg)?;
    let corpus = env.corpus()?;
    let code_gw = env.gateway(Role::CodeGen)?;
    let test_gw = env.gateway(Role::TestGen)?;
    let mut sets = BTreeMap::new();
    for p in corpus.problems() {
        let cands = draw_candidates(&code_gw, &env.templates, p, n, None).map_err(pipeline_err)?;
        sets.insert(p.id.clone(), cands);
    }
    let bon = BestOfN {
        judge: env.judge(),
        test_gen: &test_gw,
        templates: &env.templates,
        seed: None,
    };
    let report = bon.bon_evaluate(&corpus, &sets, k_test).map_err(eval_err)?;
    let out = cfg.out_dir()?;
    write(
        &out.join("bon_report.json"),
        &(serde_json::to_string_pretty(&report).expect("serializable") + "\n"),
    )?;
    println!("pass@1 {:.2}% over {} problems (k_test={k_test}, n={n})", report.pass_at_1, report.problems.len());
    env.save_recordings()?;
    Ok(report.pass_at_1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeCompletionLine {
    pub problem_id: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeRewardLine {
    pub problem_id: String,
    pub format: u8,
    pub tag_count: u8,
    pub pass_rate: f64,
    pub total: f64,
    pub suite_size: usize,
}

/// Scores each `{"problem_id","completion"}` line of `completions` and writes
/// `code_rewards.jsonl`.
pub fn cmd_code_reward(cfg: &RunConfig, completions: &Path) -> Result<Vec<CodeRewardLine>, CliError> {
    let mut env = Env::new(cfg)?;
    let corpus = env.corpus()?;
    let text = std::fs::read_to_string(completions)
        .with_context(|| format!("reading {}", completions.display()))
        .map_err(config_err)?;
    let test_gw = match cfg.eval.code_reward_suite {
        SuiteSource::Generated => Some(env.gateway(Role::TestGen)?),
        SuiteSource::Gold => None,
    };
    let judge = env.judge();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: CodeCompletionLine = serde_json::from_str(line)
            .with_context(|| format!("{} line {}", completions.display(), i + 1))
            .map_err(config_err)?;
        let problem = corpus
            .problem(&rec.problem_id)
            .ok_or_else(|| config_err(anyhow!("line {}: unknown problem {}", i + 1, rec.problem_id)))?;
        let suite = match &test_gw {
            None => problem.gold_tests.clone(),
            Some(gw) => {
                let code = parse_code_completion(&rec.completion).unwrap_or_default();
                generated_suite(&env, gw, problem, &code, cfg.eval.k_test)?
            }
        };
        let b = judge.score_code_completion(&rec.completion, &suite, &problem.language_tag);
        out.push(CodeRewardLine {
            problem_id: rec.problem_id,
            format: b.format,
            tag_count: b.tag_count,
            pass_rate: b.pass_rate,
            total: b.total,
            suite_size: suite.len(),
        });
    }
    let dir = cfg.out_dir()?;
    write(&dir.join("code_rewards.jsonl"), &to_jsonl(&out))?;
    for l in &out {
        println!("{:<16} total {:.4} (format {}, tags {}, pass {:.4})", l.problem_id, l.total, l.format, l.tag_count, l.pass_rate);
    }
    env.save_recordings()?;
    Ok(out)
}

/// `k` tests requested against the completion's own program. Like Best-of-N,
/// the suite is not filtered by the gold solution.
fn generated_suite(
    env: &Env,
    gw: &Gateway,
    problem: &atgen_core::Problem,
    code: &str,
    k: usize,
) -> Result<Vec<TestCase>, CliError> {
    let prompt = env.templates.test_gen(problem, code);
    let ctx = RequestContext::new(TemplateId::TestGen, problem);
    Ok(gw
        .complete(&prompt, &ctx, k)
        .map_err(pipeline_err)?
        .into_iter()
        .filter_map(|c| parse_completion(&c.text).test_case)
        .collect())
}

/// Runs one program once and prints the outcome as JSON. Non-ok outcomes
/// exit 1.
pub fn cmd_exec(cfg: &RunConfig, program: &Path, input: Option<&Path>, language: &str) -> Result<(), CliError> {
    let limits = cfg.sandbox.limits().map_err(config_err)?;
    let source = std::fs::read_to_string(program)
        .with_context(|| format!("reading {}", program.display()))
        .map_err(config_err)?;
    let stdin = match input {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(config_err)?,
        None => String::new(),
    };
    let sandbox = Sandbox::new(cfg.sandbox.clone());
    let outcome = sandbox.execute(&source, language, &stdin, &limits);
    println!("{}", serde_json::to_string_pretty(&outcome).expect("serializable"));
    if outcome.is_ok() {
        Ok(())
    } else {
        Err(pipeline_err(anyhow!("execution ended with status {}", outcome.status.as_str())))
    }
}
