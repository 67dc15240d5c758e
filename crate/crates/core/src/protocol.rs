//! Prompt templates and completion parsing.
//!
//! Completions follow a `<think>...</think><answer>...</answer>` layout. For
//! test generation the answer carries a fenced ```json block with `input` and
//! `output` string fields; for code generation it carries the program.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Problem, TestCase};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error("template {template}: missing binding for placeholder {placeholder:?}")]
    MissingBinding {
        template: TemplateId,
        placeholder: String,
    },
    #[error("template {template}: placeholders {found:?} do not match expected {expected:?}")]
    PlaceholderMismatch {
        template: TemplateId,
        found: Vec<String>,
        expected: Vec<String>,
    },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateId {
    TestGen,
    AdversarySample,
    AdversaryInstruct,
    CodeGen,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::TestGen,
        TemplateId::AdversarySample,
        TemplateId::AdversaryInstruct,
        TemplateId::CodeGen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::TestGen => "test-gen",
            TemplateId::AdversarySample => "adversary-sample",
            TemplateId::AdversaryInstruct => "adversary-instruct",
            TemplateId::CodeGen => "code-gen",
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::TestGen => &["buggy_code", "question"],
            TemplateId::AdversarySample => &["question"],
            TemplateId::AdversaryInstruct => &["question", "test_case_pair"],
            TemplateId::CodeGen => &["question"],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ProtocolError::UnknownTemplate(s.to_string()))
    }
}

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"));

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub system_text: String,
    pub user_text: String,
}

impl PromptTemplate {
    pub fn new(
        template_id: TemplateId,
        system_text: impl Into<String>,
        user_text: impl Into<String>,
    ) -> Result<Self, ProtocolError> {
        let t = Self {
            template_id,
            system_text: system_text.into(),
            user_text: user_text.into(),
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), ProtocolError> {
        let mut found: Vec<String> = PLACEHOLDER
            .captures_iter(&self.user_text)
            .chain(PLACEHOLDER.captures_iter(&self.system_text))
            .map(|c| c[1].to_string())
            .collect();
        found.sort();
        found.dedup();
        let expected: Vec<String> = self
            .template_id
            .placeholders()
            .iter()
            .map(|s| s.to_string())
            .collect();
        if found != expected || PLACEHOLDER.is_match(&self.system_text) {
            return Err(ProtocolError::PlaceholderMismatch {
                template: self.template_id,
                found,
                expected,
            });
        }
        Ok(())
    }

    /// Substitutes placeholders in a single pass; bound values are never rescanned.
    pub fn render(&self, bindings: &BTreeMap<&str, &str>) -> Result<RenderedPrompt, ProtocolError> {
        for name in self.template_id.placeholders() {
            if !bindings.contains_key(name) {
                return Err(ProtocolError::MissingBinding {
                    template: self.template_id,
                    placeholder: name.to_string(),
                });
            }
        }
        let user_text = PLACEHOLDER
            .replace_all(&self.user_text, |caps: &regex::Captures<'_>| {
                bindings
                    .get(&caps[1])
                    .map_or_else(|| caps[0].to_string(), |v| v.to_string())
            })
            .into_owned();
        Ok(RenderedPrompt {
            system_text: self.system_text.clone(),
            user_text,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system_text: String,
    pub user_text: String,
}

impl RenderedPrompt {
    /// Lowercase hex SHA-256 of `system_text`, a NUL byte, then `user_text`.
    pub fn digest(&self) -> String {
        prompt_digest(&self.system_text, &self.user_text)
    }
}

pub fn prompt_digest(system_text: &str, user_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(system_text.as_bytes());
    h.update([0u8]);
    h.update(user_text.as_bytes());
    hex::encode(h.finalize())
}

const BUILTIN: [(TemplateId, &str, &str); 4] = [
    (
        TemplateId::TestGen,
        include_str!("../templates/test-gen.system.txt"),
        include_str!("../templates/test-gen.user.txt"),
    ),
    (
        TemplateId::AdversarySample,
        include_str!("../templates/adversary-sample.system.txt"),
        include_str!("../templates/adversary-sample.user.txt"),
    ),
    (
        TemplateId::AdversaryInstruct,
        include_str!("../templates/adversary-instruct.system.txt"),
        include_str!("../templates/adversary-instruct.user.txt"),
    ),
    (
        TemplateId::CodeGen,
        include_str!("../templates/code-gen.system.txt"),
        include_str!("../templates/code-gen.user.txt"),
    ),
];

/// Template files end with one newline that is not part of the prompt.
fn strip_file_newline(text: &str) -> &str {
    text.strip_suffix('\n').unwrap_or(text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, sys, user)| {
                let t = PromptTemplate::new(*id, strip_file_newline(sys), strip_file_newline(user))
                    .expect("builtin templates are valid");
                (*id, t)
            })
            .collect();
        Self { templates }
    }

    /// Loads `<id>.system.txt` / `<id>.user.txt` overrides from `dir`;
    /// templates without files keep their builtin text.
    pub fn from_dir(dir: &Path) -> Result<Self, ProtocolError> {
        let mut set = Self::builtin();
        for id in TemplateId::ALL {
            let read = |part: &str| -> Result<Option<String>, ProtocolError> {
                let path = dir.join(format!("{id}.{part}.txt"));
                match std::fs::read_to_string(&path) {
                    Ok(s) => Ok(Some(strip_file_newline(&s).to_string())),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                    Err(source) => Err(ProtocolError::Io {
                        path: path.display().to_string(),
                        source,
                    }),
                }
            };
            let system = read("system")?;
            let user = read("user")?;
            if system.is_none() && user.is_none() {
                continue;
            }
            let current = &set.templates[&id];
            let t = PromptTemplate::new(
                id,
                system.unwrap_or_else(|| current.system_text.clone()),
                user.unwrap_or_else(|| current.user_text.clone()),
            )?;
            set.templates.insert(id, t);
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render(
        &self,
        id: TemplateId,
        bindings: &BTreeMap<&str, &str>,
    ) -> Result<RenderedPrompt, ProtocolError> {
        self.get(id).render(bindings)
    }

    pub fn test_gen(&self, problem: &Problem, buggy_code: &str) -> RenderedPrompt {
        self.render(
            TemplateId::TestGen,
            &BTreeMap::from([("question", problem.statement.as_str()), ("buggy_code", buggy_code)]),
        )
        .expect("all placeholders bound")
    }

    pub fn adversary_sample(&self, problem: &Problem) -> RenderedPrompt {
        self.render(
            TemplateId::AdversarySample,
            &BTreeMap::from([("question", problem.statement.as_str())]),
        )
        .expect("all placeholders bound")
    }

    pub fn adversary_instruct(&self, problem: &Problem, t_gen: &TestCase) -> RenderedPrompt {
        let pair = format_test_case_pair(t_gen);
        self.render(
            TemplateId::AdversaryInstruct,
            &BTreeMap::from([
                ("question", problem.statement.as_str()),
                ("test_case_pair", pair.as_str()),
            ]),
        )
        .expect("all placeholders bound")
    }

    pub fn code_gen(&self, problem: &Problem) -> RenderedPrompt {
        self.render(
            TemplateId::CodeGen,
            &BTreeMap::from([("question", problem.statement.as_str())]),
        )
        .expect("all placeholders bound")
    }
}

/// `{"input":"...","output":"..."}`, the form bound to `test_case_pair`.
pub fn format_test_case_pair(t: &TestCase) -> String {
    serde_json::to_string(t).expect("test cases serialize")
}

pub const TAGS: [(&str, &str); 4] = [
    ("think", "<think>"),
    ("/think", "</think>"),
    ("answer", "<answer>"),
    ("/answer", "</answer>"),
];

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedCompletion {
    pub think: Option<String>,
    pub answer: Option<String>,
    pub test_case: Option<TestCase>,
    pub code: Option<String>,
    pub tag_counts: BTreeMap<String, usize>,
    pub well_formed: bool,
}

impl ParsedCompletion {
    /// Each tag exactly once, in think-then-answer order.
    pub fn tags_well_formed(&self) -> bool {
        self.tags_once() && self.think.is_some() && self.answer.is_some()
    }

    fn tags_once(&self) -> bool {
        TAGS.iter()
            .all(|(name, _)| self.tag_counts.get(*name).copied() == Some(1))
    }
}

fn span<'a>(text: &'a str, open: &str, close: &str) -> Option<(usize, usize, &'a str)> {
    let start = text.find(open)? + open.len();
    let end = start + text[start..].find(close)?;
    Some((start - open.len(), end + close.len(), &text[start..end]))
}

fn parse_tags(text: &str) -> ParsedCompletion {
    let tag_counts = TAGS
        .iter()
        .map(|(name, tag)| (name.to_string(), text.matches(tag).count()))
        .collect();
    let think = span(text, "<think>", "</think>");
    let answer = span(text, "<answer>", "</answer>");
    // The answer only counts when it follows the closed think block.
    let ordered = match (think, answer) {
        (Some((_, think_end, _)), Some((answer_start, _, _))) => think_end <= answer_start,
        _ => false,
    };
    ParsedCompletion {
        think: think.map(|(_, _, s)| s.to_string()),
        answer: answer.map(|(_, _, s)| s.to_string()),
        tag_counts,
        well_formed: ordered,
        ..Default::default()
    }
}

/// First ```json fenced object inside `answer` with string `input`/`output`.
pub fn extract_json_test_case(answer: &str) -> Option<TestCase> {
    const FENCE: &str = "```json";
    let start = answer.find(FENCE)? + FENCE.len();
    let end = start + answer[start..].find("```")?;
    let value: serde_json::Value = serde_json::from_str(&answer[start..end]).ok()?;
    let obj = value.as_object()?;
    Some(TestCase::new(
        obj.get("input")?.as_str()?,
        obj.get("output")?.as_str()?,
    ))
}

/// Parses a test-generation completion. Never fails; problems show up as
/// absent fields and `well_formed == false`.
pub fn parse_completion(text: &str) -> ParsedCompletion {
    let mut parsed = parse_tags(text);
    parsed.test_case = parsed.answer.as_deref().and_then(extract_json_test_case);
    parsed.well_formed =
        parsed.well_formed && parsed.tags_once() && parsed.test_case.is_some();
    parsed
}

/// Parses a code-generation completion: tags plus the program in the answer.
pub fn parse_code_answer(text: &str) -> ParsedCompletion {
    let mut parsed = parse_tags(text);
    parsed.code = parse_code_completion(text);
    parsed.well_formed = parsed.well_formed && parsed.tags_once() && parsed.code.is_some();
    parsed
}

/// Extracts a program from a completion: the answer span when tagged, with a
/// single surrounding triple-backtick fence removed.
pub fn parse_code_completion(text: &str) -> Option<String> {
    let body = match span(text, "<answer>", "</answer>") {
        Some((_, _, inner)) => inner,
        None => text,
    };
    let trimmed = body.trim();
    let code = if trimmed.len() >= 6 && trimmed.starts_with("```") && trimmed.ends_with("```") {
        let inner = &trimmed[3..trimmed.len() - 3];
        // Drop the opening fence line, including any language word.
        match inner.find('\n') {
            Some(nl) => inner[nl + 1..].to_string(),
            None => String::new(),
        }
    } else {
        trimmed.to_string()
    };
    (!code.trim().is_empty()).then_some(code)
}

pub fn format_score(parsed: &ParsedCompletion) -> u8 {
    u8::from(parsed.well_formed)
}

pub fn tag_count_score(parsed: &ParsedCompletion) -> u8 {
    u8::from(parsed.tags_once())
}

/// Builds a completion in the canonical test-generation format.
pub fn canonical_test_completion(think: &str, test: &TestCase) -> String {
    let json = serde_json::to_string(&serde_json::json!({
        "input": test.input,
        "output": test.output,
    }))
    .expect("json");
    format!("<think>\n{think}\n</think>\n<answer>\n```json\n{json}\n```\n</answer>")
}

/// Builds a tagged code completion with a fenced python block.
pub fn canonical_code_completion(think: &str, code: &str) -> String {
    let code = if code.ends_with('\n') {
        code.to_string()
    } else {
        format!("{code}\n")
    };
    format!("<think>\n{think}\n</think>\n<answer>\n```python\n{code}```\n</answer>")
}
