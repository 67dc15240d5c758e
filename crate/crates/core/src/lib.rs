//! Environment side of adversarial test-generation training.
//!
//! A test generator proposes `(input, output)` pairs for a problem and a buggy
//! program. This crate executes programs in a sandbox, scores completions,
//! searches for adversarial code that slips past the current generator,
//! collects grouped rollouts with normalized advantages for an external
//! trainer, and evaluates generators (intrinsic metrics, tiering, Best-of-N).

pub mod adversary;
pub mod corpus;
pub mod eval;
pub mod gateway;
mod grouping;
pub mod limiter;
pub mod protocol;
pub mod reward;
pub mod rollout;
pub mod sandbox;
#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use corpus::{
    load_corpus, CodeArtifact, Corpus, CorpusError, CurriculumEntry, InputSampler, Instance,
    Problem, Provenance, TestCase, Tier,
};
pub use gateway::{Gateway, GatewayError, GeneratorSpec, RequestContext};
pub use protocol::{parse_code_completion, parse_completion, ParsedCompletion, TemplateId, TemplateSet};
pub use reward::{Judge, RewardBreakdown, RewardConfig};
pub use sandbox::{outputs_match, ExecStatus, ExecutionLimits, ExecutionOutcome, Sandbox, SandboxConfig};
