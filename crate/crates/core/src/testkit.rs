//! Desk-scale fixture pack shared by unit, integration and acceptance tests.
//!
//! P1 "echo": gold prints its input line; B1 uppercases it.
//! P2 "sum": gold prints a+b; B2 prints a-b; B3 prints a+b+1 when a > 100.

use std::path::Path;
use std::sync::Arc;

use crate::corpus::{CodeArtifact, Corpus, InputSampler, Instance, Problem, TestCase};
use crate::gateway::{Gateway, GatewayLimits, OracleBackend, OracleOptions, ReplayBackend};
use crate::protocol::RenderedPrompt;
use crate::sandbox::{ExecutionLimits, Sandbox, SandboxConfig};

pub const P1_GOLD: &str = "print(input())\n";
pub const B1: &str = "print(input().upper())\n";
pub const P2_GOLD: &str = "a, b = map(int, input().split())\nprint(a + b)\n";
pub const B2: &str = "a, b = map(int, input().split())\nprint(a - b)\n";
pub const B3: &str =
    "a, b = map(int, input().split())\nif a > 100:\n    print(a + b + 1)\nelse:\n    print(a + b)\n";
pub const CRASHER: &str = "print(1 // 0)\n";
pub const SPINNER: &str = "while True:\n    pass\n";

pub fn p1() -> Problem {
    Problem {
        id: "P1".into(),
        statement: "Read one line of text and print it unchanged.".into(),
        gold_source: P1_GOLD.into(),
        language_tag: "python".into(),
        gold_tests: vec![TestCase::new("hello", "hello"), TestCase::new("Mixed Case", "Mixed Case")],
        input_sampler: Some(InputSampler::Choice {
            values: vec!["hello".into(), "abc xyz".into(), "Mixed Case".into()],
        }),
    }
}

pub fn p2() -> Problem {
    p2_with_sampler(InputSampler::Ints {
        count: 2,
        min: -3,
        max: 3,
    })
}

pub fn p2_with_sampler(sampler: InputSampler) -> Problem {
    Problem {
        id: "P2".into(),
        statement: "Read two integers a and b separated by a space and print a + b.".into(),
        gold_source: P2_GOLD.into(),
        language_tag: "python".into(),
        gold_tests: vec![TestCase::new("1 2", "3"), TestCase::new("101 5", "106")],
        input_sampler: Some(sampler),
    }
}

/// A sum problem with its own statement, so its prompts have distinct digests.
pub fn sum_variant(id: &str) -> Problem {
    Problem {
        id: id.into(),
        statement: format!("[{id}] Read two integers a and b separated by a space and print a + b."),
        ..p2()
    }
}

pub fn instance(id: &str, problem_id: &str, source: &str) -> Instance {
    Instance {
        instance_id: id.into(),
        problem_id: problem_id.into(),
        buggy: CodeArtifact::original(id, source),
        tier: None,
    }
}

/// P1 and P2 with instances B1 (P1), B2 and B3 (P2).
pub fn fixture_corpus() -> Corpus {
    let mut c = Corpus::new();
    c.add_problem(p1()).unwrap();
    c.add_problem(p2()).unwrap();
    c.add_instance(instance("B1", "P1", B1)).unwrap();
    c.add_instance(instance("B2", "P2", B2)).unwrap();
    c.add_instance(instance("B3", "P2", B3)).unwrap();
    c
}

/// Builds replay fixture files keyed by prompt digest.
#[derive(Debug, Default, Clone)]
pub struct ReplayFixture {
    lines: Vec<String>,
}

impl ReplayFixture {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, prompt: &RenderedPrompt, completions: &[&str]) -> &mut Self {
        self.add_owned(prompt, completions.iter().map(|s| s.to_string()).collect())
    }

    pub fn add_owned(&mut self, prompt: &RenderedPrompt, completions: Vec<String>) -> &mut Self {
        let line = serde_json::json!({
            "prompt_digest": prompt.digest(),
            "completions": completions,
        });
        self.lines.push(line.to_string());
        self
    }

    pub fn to_jsonl(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn write(&self, path: &Path) {
        std::fs::write(path, self.to_jsonl()).expect("write replay fixture");
    }
}

pub fn sandbox() -> Sandbox {
    Sandbox::new(SandboxConfig::default())
}

pub fn limits() -> ExecutionLimits {
    SandboxConfig::default().limits().expect("default limits are valid")
}

/// Gateway serving the given fixture from memory.
pub fn replay_gateway(fixture: &ReplayFixture) -> Gateway {
    let backend = ReplayBackend::parse(&fixture.to_jsonl()).expect("fixture parses");
    Gateway::new(Box::new(backend), "replay:testkit", &GatewayLimits::default())
}

pub fn oracle_gateway(seed: u64, options: OracleOptions) -> Gateway {
    let backend = OracleBackend::new(Arc::new(sandbox()), limits(), seed, options);
    Gateway::new(Box::new(backend), "oracle", &GatewayLimits::default())
}
