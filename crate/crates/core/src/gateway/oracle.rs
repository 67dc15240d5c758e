use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, Completion, GatewayError, MutantTable, RequestContext};
use crate::corpus::{Problem, TestCase};
use crate::protocol::{canonical_code_completion, canonical_test_completion, RenderedPrompt, TemplateId};
use crate::sandbox::{normalize_output, ExecutionLimits, Sandbox};

const MAX_RESAMPLES: usize = 16;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleOptions {
    /// Code-generation pool per problem id, served in rotation after the gold
    /// source (when `exclude_gold` is false).
    pub mutants: MutantTable,
    pub exclude_gold: bool,
}

/// Scripted generator.
///
/// Test generation samples an input from the problem's input sampler and asks
/// the gold program for the output, so every test it emits is correct. Code
/// generation rotates through the gold source and configured mutants.
pub struct OracleBackend {
    sandbox: Arc<Sandbox>,
    limits: ExecutionLimits,
    seed: u64,
    options: OracleOptions,
    counters: Mutex<HashMap<String, u64>>,
}

impl OracleBackend {
    pub fn new(sandbox: Arc<Sandbox>, limits: ExecutionLimits, seed: u64, options: OracleOptions) -> Self {
        Self {
            sandbox,
            limits,
            seed,
            options,
            counters: Mutex::new(HashMap::new()),
        }
    }

    /// Reserves `n` consecutive sample indices for a prompt digest.
    fn reserve(&self, digest: &str, n: usize) -> u64 {
        let mut counters = self.counters.lock();
        let c = counters.entry(digest.to_string()).or_insert(0);
        let start = *c;
        *c += n as u64;
        start
    }

    pub fn sample_rng(seed: u64, digest: &str, index: u64) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(digest.as_bytes());
        h.update(index.to_le_bytes());
        let bytes: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(bytes)
    }

    fn gold_test(&self, problem: &Problem, rng: &mut ChaCha8Rng) -> TestCase {
        if let Some(sampler) = &problem.input_sampler {
            for _ in 0..MAX_RESAMPLES {
                let input = sampler.sample(rng);
                let out = self
                    .sandbox
                    .execute(&problem.gold_source, &problem.language_tag, &input, &self.limits);
                if out.is_ok() {
                    return TestCase::new(input, normalize_output(&out.stdout));
                }
            }
        }
        problem.gold_tests[rng.random_range(0..problem.gold_tests.len())].clone()
    }

    fn code_pool<'p>(&'p self, problem: &'p Problem) -> Vec<&'p str> {
        let mut pool = Vec::new();
        if !self.options.exclude_gold {
            pool.push(problem.gold_source.as_str());
        }
        if let Some(m) = self.options.mutants.get(&problem.id) {
            pool.extend(m.iter().map(String::as_str));
        }
        pool
    }
}

impl Backend for OracleBackend {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        ctx: &RequestContext<'_>,
        n: usize,
    ) -> Result<Vec<Completion>, GatewayError> {
        let digest = prompt.digest();
        let start = self.reserve(&digest, n);
        let seed = ctx.seed.unwrap_or(self.seed);
        let problem = ctx.problem;
        match ctx.template {
            TemplateId::TestGen => Ok((start..start + n as u64)
                .map(|i| {
                    let mut rng = Self::sample_rng(seed, &digest, i);
                    let t = self.gold_test(problem, &mut rng);
                    Completion::text(canonical_test_completion(
                        "Input drawn from the problem's sampler; output from the reference solution.",
                        &t,
                    ))
                })
                .collect()),
            template => {
                let pool = self.code_pool(problem);
                if pool.is_empty() {
                    return Err(GatewayError::Oracle(format!(
                        "no code pool for problem {}",
                        problem.id
                    )));
                }
                Ok((start..start + n as u64)
                    .map(|i| {
                        let src = pool[(i % pool.len() as u64) as usize];
                        let text = match template {
                            TemplateId::AdversarySample => src.to_string(),
                            _ => canonical_code_completion("Candidate program.", src),
                        };
                        Completion::text(text)
                    })
                    .collect())
            }
        }
    }
}
