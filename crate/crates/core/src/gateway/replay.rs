use std::collections::HashMap;
use std::path::Path;

use parking_lot::Mutex;
use serde::Deserialize;

use super::{Backend, Completion, GatewayError, RequestContext};
use crate::protocol::RenderedPrompt;

#[derive(Deserialize)]
struct FixtureLine {
    prompt_digest: String,
    completions: Vec<String>,
}

#[derive(Debug, Default)]
struct Stream {
    completions: Vec<String>,
    cursor: usize,
}

/// Serves recorded completions in order, per prompt digest. Lines sharing a
/// digest are concatenated in file order.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    streams: Mutex<HashMap<String, Stream>>,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Fixture {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text).map_err(|message| GatewayError::Fixture {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut streams: HashMap<String, Stream> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureLine =
                serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            streams
                .entry(rec.prompt_digest)
                .or_default()
                .completions
                .extend(rec.completions);
        }
        Ok(Self {
            streams: Mutex::new(streams),
        })
    }

    /// Completions not yet served for `digest`.
    pub fn remaining(&self, digest: &str) -> usize {
        self.streams
            .lock()
            .get(digest)
            .map_or(0, |s| s.completions.len() - s.cursor)
    }
}

impl Backend for ReplayBackend {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        _ctx: &RequestContext<'_>,
        n: usize,
    ) -> Result<Vec<Completion>, GatewayError> {
        let digest = prompt.digest();
        let mut streams = self.streams.lock();
        let Some(stream) = streams.get_mut(&digest) else {
            return Err(GatewayError::ReplayMiss {
                digest,
                reason: "no fixture for prompt".into(),
            });
        };
        let remaining = stream.completions.len() - stream.cursor;
        if remaining < n {
            return Err(GatewayError::ReplayMiss {
                digest,
                reason: format!("fixture exhausted: requested {n}, {remaining} left"),
            });
        }
        let out = stream.completions[stream.cursor..stream.cursor + n]
            .iter()
            .map(|t| Completion::text(t.clone()))
            .collect();
        stream.cursor += n;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Problem, TestCase};
    use crate::protocol::TemplateId;

    fn prompt(user: &str) -> RenderedPrompt {
        RenderedPrompt {
            system_text: "sys".into(),
            user_text: user.into(),
        }
    }

    fn problem() -> Problem {
        Problem {
            id: "P".into(),
            statement: String::new(),
            gold_source: String::new(),
            language_tag: "python".into(),
            gold_tests: vec![TestCase::new("", "")],
            input_sampler: None,
        }
    }

    #[test]
    fn serves_in_order_then_misses() {
        let p = prompt("a");
        let text = format!(
            "{{\"prompt_digest\":\"{d}\",\"completions\":[\"one\",\"two\"]}}\n{{\"prompt_digest\":\"{d}\",\"completions\":[\"three\"]}}\n",
            d = p.digest()
        );
        let r = ReplayBackend::parse(&text).unwrap();
        let pr = problem();
        let ctx = RequestContext::new(TemplateId::TestGen, &pr);
        let got: Vec<String> = r.complete(&p, &ctx, 2).unwrap().into_iter().map(|c| c.text).collect();
        assert_eq!(got, vec!["one", "two"]);
        assert_eq!(r.remaining(&p.digest()), 1);
        assert!(matches!(r.complete(&p, &ctx, 2), Err(GatewayError::ReplayMiss { .. })));
        assert_eq!(r.complete(&p, &ctx, 1).unwrap()[0].text, "three");
        assert!(matches!(
            r.complete(&prompt("b"), &ctx, 1),
            Err(GatewayError::ReplayMiss { .. })
        ));
    }

    #[test]
    fn malformed_fixture_line_reported() {
        let err = ReplayBackend::parse("{}\n").unwrap_err();
        assert!(err.starts_with("line 1"));
    }
}
