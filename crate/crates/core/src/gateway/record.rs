use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;

use super::{Backend, Completion, GatewayError, RequestContext};
use crate::protocol::RenderedPrompt;

/// Collected `(prompt_digest, completions)` calls, in call order.
#[derive(Debug, Default)]
pub struct Recording {
    calls: Mutex<Vec<(String, Vec<String>)>>,
}

impl Recording {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn len(&self) -> usize {
        self.calls.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replay fixture that serves the recorded completions again.
    pub fn to_jsonl(&self) -> String {
        self.calls
            .lock()
            .iter()
            .map(|(digest, completions)| {
                let line = serde_json::json!({
                    "prompt_digest": digest,
                    "completions": completions,
                });
                format!("{line}\n")
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }
}

/// Passes calls through to another backend and records what it served.
pub struct RecordingBackend {
    inner: Box<dyn Backend>,
    recording: Arc<Recording>,
}

impl RecordingBackend {
    pub fn new(inner: Box<dyn Backend>, recording: Arc<Recording>) -> Self {
        Self { inner, recording }
    }
}

impl Backend for RecordingBackend {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        ctx: &RequestContext<'_>,
        n: usize,
    ) -> Result<Vec<Completion>, GatewayError> {
        let out = self.inner.complete(prompt, ctx, n)?;
        self.recording
            .calls
            .lock()
            .push((prompt.digest(), out.iter().map(|c| c.text.clone()).collect()));
        Ok(out)
    }
}
