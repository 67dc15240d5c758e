//! Problems, buggy-code instances, and the curriculum log.
//!
//! The on-disk corpus is JSON Lines with one `problem` or `instance` record
//! per line. Curriculum replacements are written to a sibling file
//! (`<stem>.curriculum.jsonl`) so that a snapshot can be reloaded with its
//! full mutation history.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sandbox::{ExecutionLimits, Sandbox};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: instance {instance_id:?} references unknown problem {problem_id:?}")]
    UnknownProblem {
        line: usize,
        instance_id: String,
        problem_id: String,
    },
    #[error("problem {0:?} has no gold tests")]
    EmptyGoldTests(String),
    #[error("problem {problem_id:?}: no sandbox profile for language tag {language_tag:?}")]
    UnknownLanguage {
        problem_id: String,
        language_tag: String,
    },
    #[error("problem {problem_id:?}: gold solution fails gold test index {test_index} ({detail})")]
    GoldFailure {
        problem_id: String,
        test_index: usize,
        detail: String,
    },
    #[error("artifact {id:?}: {message}")]
    InvalidArtifact { id: String, message: String },
    #[error("unknown instance {0:?}")]
    UnknownInstance(String),
    #[error("provenance {0} is not adversarial")]
    NotAdversarial(Provenance),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestCase {
    pub input: String,
    pub output: String,
}

impl TestCase {
    pub fn new(input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            output: output.into(),
        }
    }
}

/// How the oracle test generator draws inputs for a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputSampler {
    /// `count` integers drawn uniformly from `[min, max]`, space separated.
    Ints { count: usize, min: i64, max: i64 },
    /// One of the listed inputs, uniformly.
    Choice { values: Vec<String> },
}

impl InputSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        match self {
            InputSampler::Ints { count, min, max } => (0..*count)
                .map(|_| rng.random_range(*min..=*max).to_string())
                .collect::<Vec<_>>()
                .join(" "),
            InputSampler::Choice { values } if values.is_empty() => String::new(),
            InputSampler::Choice { values } => values[rng.random_range(0..values.len())].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    pub gold_source: String,
    pub language_tag: String,
    pub gold_tests: Vec<TestCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_sampler: Option<InputSampler>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    OriginalBuggy,
    AdversarialSampled,
    AdversarialInstructed,
    Candidate,
}

impl Provenance {
    pub fn is_adversarial(self) -> bool {
        matches!(
            self,
            Provenance::AdversarialSampled | Provenance::AdversarialInstructed
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::OriginalBuggy => "original-buggy",
            Provenance::AdversarialSampled => "adversarial-sampled",
            Provenance::AdversarialInstructed => "adversarial-instructed",
            Provenance::Candidate => "candidate",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        }
    }
}

/// A program under test together with where it came from.
///
/// `lineage` names the artifact this one replaced. It is filled in by
/// [`Corpus::replace_with_adversarial`]; an adversarial artifact that has not
/// been installed yet carries `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeArtifact {
    pub id: String,
    pub source: String,
    pub provenance: Provenance,
    pub lineage: Option<String>,
    pub created_at_step: u64,
}

impl CodeArtifact {
    pub fn original(id: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
            provenance: Provenance::OriginalBuggy,
            lineage: None,
            created_at_step: 0,
        }
    }

    pub fn candidate(id: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            provenance: Provenance::Candidate,
            ..Self::original(id, source)
        }
    }

    /// An adversarial artifact awaiting installation.
    pub fn adversarial(source: impl Into<String>, provenance: Provenance, step: u64) -> Self {
        Self {
            id: String::new(),
            source: source.into(),
            provenance,
            lineage: None,
            created_at_step: step,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub instance_id: String,
    pub problem_id: String,
    pub buggy: CodeArtifact,
    pub tier: Option<Tier>,
}

/// One successful curriculum replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumEntry {
    pub step: u64,
    pub instance_id: String,
    pub new_provenance: Provenance,
    pub replaced_lineage: String,
    pub artifact_id: String,
    pub source: String,
    /// The generated test the adversarial code was selected against.
    pub t_gen: Option<TestCase>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Problem(Problem),
    Instance(InstanceRecord),
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    instance_id: String,
    problem_id: String,
    buggy_source: String,
    provenance: Provenance,
    #[serde(default)]
    tier: Option<Tier>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    artifact_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lineage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    created_at_step: Option<u64>,
}

impl InstanceRecord {
    fn from_instance(inst: &Instance) -> Self {
        let adversarial = inst.buggy.provenance.is_adversarial();
        Self {
            instance_id: inst.instance_id.clone(),
            problem_id: inst.problem_id.clone(),
            buggy_source: inst.buggy.source.clone(),
            provenance: inst.buggy.provenance,
            tier: inst.tier,
            artifact_id: adversarial.then(|| inst.buggy.id.clone()),
            lineage: inst.buggy.lineage.clone(),
            created_at_step: adversarial.then_some(inst.buggy.created_at_step),
        }
    }

    fn into_instance(self) -> Instance {
        let id = self.artifact_id.unwrap_or_else(|| self.instance_id.clone());
        Instance {
            buggy: CodeArtifact {
                id,
                source: self.buggy_source,
                provenance: self.provenance,
                lineage: self.lineage,
                created_at_step: self.created_at_step.unwrap_or(0),
            },
            instance_id: self.instance_id,
            problem_id: self.problem_id,
            tier: self.tier,
        }
    }
}

fn check_artifact(artifact: &CodeArtifact) -> Result<(), CorpusError> {
    if artifact.provenance.is_adversarial() != artifact.lineage.is_some() {
        return Err(CorpusError::InvalidArtifact {
            id: artifact.id.clone(),
            message: "lineage must be present exactly for adversarial provenance".into(),
        });
    }
    Ok(())
}

/// Path of the curriculum log that accompanies a corpus file.
pub fn curriculum_log_path(corpus_path: &Path) -> PathBuf {
    let stem = corpus_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    corpus_path.with_file_name(format!("{stem}.curriculum.jsonl"))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    problems: Vec<Problem>,
    problem_index: HashMap<String, usize>,
    instances: Vec<Instance>,
    instance_index: HashMap<String, usize>,
    log: Vec<CurriculumEntry>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses corpus records without executing anything.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::new();
        let mut pending = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
                line,
                message: e.to_string(),
            })?;
            match record {
                Record::Problem(p) => corpus.push_problem(p).map_err(|e| at_line(e, line))?,
                Record::Instance(r) => pending.push((line, r.into_instance())),
            }
        }
        for (line, inst) in pending {
            corpus.push_instance(inst).map_err(|e| at_line(e, line))?;
        }
        Ok(corpus)
    }

    pub fn add_problem(&mut self, problem: Problem) -> Result<(), CorpusError> {
        self.push_problem(problem)
    }

    pub fn add_instance(&mut self, instance: Instance) -> Result<(), CorpusError> {
        self.push_instance(instance)
    }

    fn push_problem(&mut self, problem: Problem) -> Result<(), CorpusError> {
        if self.problem_index.contains_key(&problem.id) {
            return Err(CorpusError::DuplicateId {
                line: 0,
                id: problem.id,
            });
        }
        if problem.gold_tests.is_empty() {
            return Err(CorpusError::EmptyGoldTests(problem.id));
        }
        self.problem_index
            .insert(problem.id.clone(), self.problems.len());
        self.problems.push(problem);
        Ok(())
    }

    fn push_instance(&mut self, instance: Instance) -> Result<(), CorpusError> {
        if self.instance_index.contains_key(&instance.instance_id) {
            return Err(CorpusError::DuplicateId {
                line: 0,
                id: instance.instance_id,
            });
        }
        if !self.problem_index.contains_key(&instance.problem_id) {
            return Err(CorpusError::UnknownProblem {
                line: 0,
                instance_id: instance.instance_id,
                problem_id: instance.problem_id,
            });
        }
        check_artifact(&instance.buggy)?;
        self.instance_index
            .insert(instance.instance_id.clone(), self.instances.len());
        self.instances.push(instance);
        Ok(())
    }

    /// Runs every gold solution against its gold tests.
    pub fn verify_gold(&self, sandbox: &Sandbox, limits: &ExecutionLimits) -> Result<(), CorpusError> {
        for p in &self.problems {
            if !sandbox.has_profile(&p.language_tag) {
                return Err(CorpusError::UnknownLanguage {
                    problem_id: p.id.clone(),
                    language_tag: p.language_tag.clone(),
                });
            }
        }
        let failures: Vec<CorpusError> = self
            .problems
            .par_iter()
            .filter_map(|p| {
                let res = sandbox.run_suite(&p.gold_source, &p.language_tag, &p.gold_tests, limits);
                res.first_failure().map(|idx| {
                    let run = &res.per_test[idx];
                    CorpusError::GoldFailure {
                        problem_id: p.id.clone(),
                        test_index: idx,
                        detail: format!(
                            "status {}, stdout {:?}, expected {:?}",
                            run.outcome.status.as_str(),
                            run.outcome.stdout,
                            p.gold_tests[idx].output
                        ),
                    }
                })
            })
            .collect();
        match failures.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn problems(&self) -> &[Problem] {
        &self.problems
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn curriculum_log(&self) -> &[CurriculumEntry] {
        &self.log
    }

    pub fn problem(&self, id: &str) -> Option<&Problem> {
        self.problem_index.get(id).map(|&i| &self.problems[i])
    }

    pub fn instance(&self, id: &str) -> Option<&Instance> {
        self.instance_index.get(id).map(|&i| &self.instances[i])
    }

    /// The problem an instance belongs to.
    pub fn problem_of(&self, instance: &Instance) -> &Problem {
        self.problem(&instance.problem_id)
            .expect("instances always reference a loaded problem")
    }

    pub fn set_tier(&mut self, instance_id: &str, tier: Option<Tier>) -> Result<(), CorpusError> {
        let idx = *self
            .instance_index
            .get(instance_id)
            .ok_or_else(|| CorpusError::UnknownInstance(instance_id.to_string()))?;
        self.instances[idx].tier = tier;
        Ok(())
    }

    /// Installs `adver` as the instance's buggy code and appends a log entry.
    pub fn replace_with_adversarial(
        &mut self,
        instance_id: &str,
        mut adver: CodeArtifact,
        t_gen: Option<TestCase>,
    ) -> Result<&CurriculumEntry, CorpusError> {
        let idx = *self
            .instance_index
            .get(instance_id)
            .ok_or_else(|| CorpusError::UnknownInstance(instance_id.to_string()))?;
        if !adver.provenance.is_adversarial() {
            return Err(CorpusError::NotAdversarial(adver.provenance));
        }
        let generation = self
            .log
            .iter()
            .filter(|e| e.instance_id == instance_id)
            .count()
            + 1;
        let replaced = self.instances[idx].buggy.id.clone();
        adver.id = format!("{instance_id}~adv{generation}");
        adver.lineage = Some(replaced.clone());
        self.log.push(CurriculumEntry {
            step: adver.created_at_step,
            instance_id: instance_id.to_string(),
            new_provenance: adver.provenance,
            replaced_lineage: replaced,
            artifact_id: adver.id.clone(),
            source: adver.source.clone(),
            t_gen,
        });
        self.instances[idx].buggy = adver;
        Ok(self.log.last().expect("just pushed"))
    }

    /// Artifact ids an instance has carried, oldest first, ending with the current one.
    pub fn lineage_chain(&self, instance_id: &str) -> Vec<String> {
        let mut chain: Vec<String> = self
            .log
            .iter()
            .filter(|e| e.instance_id == instance_id)
            .map(|e| e.replaced_lineage.clone())
            .collect();
        if let Some(inst) = self.instance(instance_id) {
            chain.push(inst.buggy.id.clone());
        }
        chain
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let records = self
            .problems
            .iter()
            .map(|p| Record::Problem(p.clone()))
            .chain(
                self.instances
                    .iter()
                    .map(|i| Record::Instance(InstanceRecord::from_instance(i))),
            );
        for r in records {
            out.push_str(&serde_json::to_string(&r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn log_to_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entries serialize") + "\n")
            .collect()
    }

    fn parse_log(&mut self, text: &str) -> Result<(), CorpusError> {
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let entry: CurriculumEntry =
                serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
                    line: i + 1,
                    message: format!("curriculum log: {e}"),
                })?;
            if !self.instance_index.contains_key(&entry.instance_id) {
                return Err(CorpusError::UnknownInstance(entry.instance_id));
            }
            self.log.push(entry);
        }
        Ok(())
    }

    /// Writes the corpus and its curriculum log next to it.
    pub fn snapshot(&self, path: &Path) -> Result<(), CorpusError> {
        write_file(path, &self.to_jsonl())?;
        write_file(&curriculum_log_path(path), &self.log_to_jsonl())
    }
}

fn at_line(err: CorpusError, line: usize) -> CorpusError {
    match err {
        CorpusError::DuplicateId { id, .. } => CorpusError::DuplicateId { line, id },
        CorpusError::UnknownProblem {
            instance_id,
            problem_id,
            ..
        } => CorpusError::UnknownProblem {
            line,
            instance_id,
            problem_id,
        },
        other => other,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(contents.as_bytes()).map_err(io)?;
    Ok(())
}

/// Reads a corpus file (and its curriculum log, if present) and verifies
/// every gold solution against its gold tests.
pub fn load_corpus(
    path: &Path,
    sandbox: &Sandbox,
    limits: &ExecutionLimits,
) -> Result<Corpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut corpus = Corpus::parse(&text)?;
    let log_path = curriculum_log_path(path);
    if log_path.exists() {
        let log_text = fs::read_to_string(&log_path).map_err(|source| CorpusError::Io {
            path: log_path.clone(),
            source,
        })?;
        corpus.parse_log(&log_text)?;
    }
    corpus.verify_gold(sandbox, limits)?;
    log::info!(
        "loaded corpus {}: {} problems, {} instances",
        path.display(),
        corpus.problems().len(),
        corpus.instances().len()
    );
    Ok(corpus)
}
