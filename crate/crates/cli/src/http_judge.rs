//! Remote judge backend: JSON over HTTP.
//!
//! POSTs `{fused_png_b64, seg_png_b64, label, question}` and expects
//! `{"answer": true|false}`. Requests are idempotent per (sample,
//! question); each ask retries up to three attempts and then surfaces the
//! failure instead of inventing a verdict.

use std::time::Duration;

use base64::Engine;
use ditfuse_core::imaging::ImageBuf;
use ditfuse_core::judge::{JudgeBackend, JudgeError, JudgeReply, JudgeRequest, Question};

pub const JUDGE_TIMEOUT: Duration = Duration::from_secs(30);
pub const JUDGE_ATTEMPTS: usize = 3;

pub struct HttpBackend {
    pub endpoint: String,
    /// Forwarded as a bearer token when set (DITFUSE_JUDGE_TOKEN).
    pub token: Option<String>,
    pub agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: &str, token: Option<String>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(JUDGE_TIMEOUT)
            .build();
        HttpBackend {
            endpoint: endpoint.to_string(),
            token,
            agent,
        }
    }

    fn ask_once(&self, body: &JudgeRequest) -> Result<bool, JudgeError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let payload =
            serde_json::to_string(body).map_err(|e| JudgeError::Backend(e.to_string()))?;
        let response = req
            .set("Content-Type", "application/json")
            .send_string(&payload)
            .map_err(|e| match e {
                ureq::Error::Transport(t) => JudgeError::BackendTimeout(t.to_string()),
                other => JudgeError::Backend(other.to_string()),
            })?;
        let text = response
            .into_string()
            .map_err(|e| JudgeError::Backend(e.to_string()))?;
        let reply: JudgeReply = serde_json::from_str(&text)
            .map_err(|_| JudgeError::BackendMalformedReply(truncate(&text)))?;
        Ok(reply.answer)
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(120).collect()
}

impl JudgeBackend for HttpBackend {
    fn ask(
        &self,
        fused: &ImageBuf,
        segmented: &ImageBuf,
        label: &str,
        question: Question,
    ) -> Result<bool, JudgeError> {
        let engine = base64::engine::general_purpose::STANDARD;
        let body = JudgeRequest {
            fused_png_b64: engine.encode(
                fused
                    .to_png_bytes()
                    .map_err(|e| JudgeError::Backend(e.to_string()))?,
            ),
            seg_png_b64: engine.encode(
                segmented
                    .to_png_bytes()
                    .map_err(|e| JudgeError::Backend(e.to_string()))?,
            ),
            label: label.to_string(),
            question: question.id().to_string(),
        };
        let mut last = None;
        for _ in 0..JUDGE_ATTEMPTS {
            match self.ask_once(&body) {
                Ok(answer) => return Ok(answer),
                Err(e @ JudgeError::BackendMalformedReply(_)) => return Err(e),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| JudgeError::Backend("no attempts made".into())))
    }
}
