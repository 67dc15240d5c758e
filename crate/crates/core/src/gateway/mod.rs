//! Text generators behind one interface.
//!
//! Three backends are interchangeable: a chat-completions HTTP endpoint, a
//! replay fixture keyed by prompt digest, and a scripted oracle that uses
//! gold programs to synthesize completions. Every call goes through
//! [`Gateway`], which enforces the per-call sample cap and the in-flight bound.

mod oracle;
mod record;
mod remote;
mod replay;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use oracle::{OracleBackend, OracleOptions};
pub use record::{Recording, RecordingBackend};
pub use remote::{RemoteBackend, RetryPolicy, API_KEY_ENV};
pub use replay::ReplayBackend;

use crate::corpus::{Problem, TestCase};
use crate::limiter::Limiter;
use crate::protocol::{RenderedPrompt, TemplateId};
use crate::sandbox::{ExecutionLimits, Sandbox};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("requested {requested} completions, cap is {cap}")]
    CapExceeded { requested: usize, cap: usize },
    #[error("replay miss for prompt digest {digest}: {reason}")]
    ReplayMiss { digest: String, reason: String },
    #[error("request failed after {attempts} attempts: {message}")]
    Network { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("replay fixture {path}: {message}")]
    Fixture { path: PathBuf, message: String },
    #[error("oracle cannot serve request: {0}")]
    Oracle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Replay,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_tokens: 2048,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub backend: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub oracle: OracleOptions,
}

impl GeneratorSpec {
    pub fn replay(fixture: impl Into<PathBuf>) -> Self {
        Self {
            backend: BackendKind::Replay,
            fixture: Some(fixture.into()),
            ..Self::oracle()
        }
    }

    pub fn oracle() -> Self {
        Self {
            backend: BackendKind::Oracle,
            endpoint: None,
            model_name: None,
            fixture: None,
            sampling: Sampling::default(),
            retry: RetryPolicy::default(),
            oracle: OracleOptions::default(),
        }
    }

    pub fn remote(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            backend: BackendKind::Remote,
            endpoint: Some(endpoint.into()),
            model_name: Some(model_name.into()),
            ..Self::oracle()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.sampling.temperature >= 0.0) {
            return Err(GatewayError::InvalidSpec("temperature must be >= 0".into()));
        }
        if self.sampling.max_tokens == 0 {
            return Err(GatewayError::InvalidSpec("max_tokens must be > 0".into()));
        }
        match self.backend {
            BackendKind::Remote if self.endpoint.is_none() || self.model_name.is_none() => Err(
                GatewayError::InvalidSpec("remote backend requires endpoint and model_name".into()),
            ),
            BackendKind::Replay if self.fixture.is_none() => Err(GatewayError::InvalidSpec(
                "replay backend requires a fixture path".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn identity(&self) -> String {
        match self.backend {
            BackendKind::Remote => format!(
                "remote:{}@{}",
                self.model_name.as_deref().unwrap_or("?"),
                self.endpoint.as_deref().unwrap_or("?")
            ),
            BackendKind::Replay => format!(
                "replay:{}",
                self.fixture
                    .as_ref()
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default()
            ),
            BackendKind::Oracle => "oracle".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
    /// Seconds.
    pub latency: f64,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
            latency: 0.0,
        }
    }
}

/// What a request is for. Remote and replay backends only look at the
/// prompt; the oracle needs the problem (and the test, for instructed code).
#[derive(Debug, Clone, Copy)]
pub struct RequestContext<'a> {
    pub template: TemplateId,
    pub problem: &'a Problem,
    pub t_gen: Option<&'a TestCase>,
    pub seed: Option<u64>,
}

impl<'a> RequestContext<'a> {
    pub fn new(template: TemplateId, problem: &'a Problem) -> Self {
        Self {
            template,
            problem,
            t_gen: None,
            seed: None,
        }
    }

    pub fn with_t_gen(mut self, t_gen: &'a TestCase) -> Self {
        self.t_gen = Some(t_gen);
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }
}

pub trait Backend: Send + Sync {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        ctx: &RequestContext<'_>,
        n: usize,
    ) -> Result<Vec<Completion>, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayLimits {
    pub max_in_flight: usize,
    pub max_n: usize,
}

impl Default for GatewayLimits {
    fn default() -> Self {
        Self {
            max_in_flight: 8,
            max_n: 64,
        }
    }
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    in_flight: Limiter,
    max_n: usize,
    identity: String,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("identity", &self.identity)
            .field("max_n", &self.max_n)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>, identity: impl Into<String>, limits: &GatewayLimits) -> Self {
        Self {
            backend,
            in_flight: Limiter::new(limits.max_in_flight),
            max_n: limits.max_n,
            identity: identity.into(),
        }
    }

    pub fn from_spec(
        spec: &GeneratorSpec,
        limits: &GatewayLimits,
        sandbox: Arc<Sandbox>,
        exec_limits: ExecutionLimits,
    ) -> Result<Self, GatewayError> {
        spec.validate()?;
        let backend: Box<dyn Backend> = match spec.backend {
            BackendKind::Remote => Box::new(RemoteBackend::new(spec)?),
            BackendKind::Replay => Box::new(ReplayBackend::load(
                spec.fixture.as_ref().expect("validated"),
            )?),
            BackendKind::Oracle => Box::new(OracleBackend::new(
                sandbox,
                exec_limits,
                spec.sampling.seed.unwrap_or(0),
                spec.oracle.clone(),
            )),
        };
        Ok(Self::new(backend, spec.identity(), limits))
    }

    /// Like [`Gateway::from_spec`], also recording every served completion.
    pub fn recording_from_spec(
        spec: &GeneratorSpec,
        limits: &GatewayLimits,
        sandbox: Arc<Sandbox>,
        exec_limits: ExecutionLimits,
        recording: Arc<Recording>,
    ) -> Result<Self, GatewayError> {
        let inner = Self::from_spec(spec, limits, sandbox, exec_limits)?;
        let backend = RecordingBackend::new(inner.backend, recording);
        Ok(Self::new(Box::new(backend), inner.identity, limits))
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn max_n(&self) -> usize {
        self.max_n
    }

    pub fn max_in_flight(&self) -> usize {
        self.in_flight.capacity()
    }

    /// Returns exactly `n` completions, in sample order.
    pub fn complete(
        &self,
        prompt: &RenderedPrompt,
        ctx: &RequestContext<'_>,
        n: usize,
    ) -> Result<Vec<Completion>, GatewayError> {
        if n > self.max_n {
            return Err(GatewayError::CapExceeded {
                requested: n,
                cap: self.max_n,
            });
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let _permit = self.in_flight.acquire();
        let out = self.backend.complete(prompt, ctx, n)?;
        debug_assert_eq!(out.len(), n);
        Ok(out)
    }
}

/// Per-role generator configuration (`gateway.test_gen`, `gateway.code_gen`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySettings {
    pub test_gen: GeneratorSpec,
    pub code_gen: GeneratorSpec,
    #[serde(flatten)]
    pub limits: GatewayLimits,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            test_gen: GeneratorSpec::oracle(),
            code_gen: GeneratorSpec::oracle(),
            limits: GatewayLimits::default(),
        }
    }
}

/// Mutant sources keyed by problem id, for the oracle code generator.
pub type MutantTable = BTreeMap<String, Vec<String>>;
