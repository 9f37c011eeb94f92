//! Chat-completion clients for hosted models.
//!
//! All three families take a JSON body over HTTPS; only the request shape,
//! auth header and usage field names differ, so each family is a pair of pure
//! functions (`build_request`, `parse_response`) around one transport.
//!
//! Credentials come from the environment, one pair per backend id:
//! `ANNOFLOW_<ID>_API_KEY` and optionally `ANNOFLOW_<ID>_ENDPOINT`, where
//! `<ID>` is the backend id upper-cased with non-alphanumerics mapped to `_`.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendError, BackendSpec, Family, RawCompletion, UsageRecord};
use crate::scheme::RenderedPrompt;

pub fn env_prefix(backend_id: &str) -> String {
    let id: String = backend_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("ANNOFLOW_{id}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpRequest {
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Value,
}

pub fn build_request(
    spec: &BackendSpec,
    endpoint: &str,
    api_key: &str,
    prompt: &RenderedPrompt,
) -> HttpRequest {
    let model = spec.model_name();
    let (headers, body) = match spec.family {
        Family::Gpt | Family::Synthetic => (
            vec![("authorization".to_string(), format!("Bearer {api_key}"))],
            json!({
                "model": model,
                "messages": [{"role": "user", "content": prompt.text}],
            }),
        ),
        Family::Claude => (
            vec![
                ("x-api-key".to_string(), api_key.to_string()),
                ("anthropic-version".to_string(), "2023-06-01".to_string()),
            ],
            json!({
                "model": model,
                "max_tokens": spec.max_output_tokens,
                "messages": [{"role": "user", "content": prompt.text}],
            }),
        ),
        Family::Gemini => (
            vec![("x-goog-api-key".to_string(), api_key.to_string())],
            json!({
                "contents": [{"role": "user", "parts": [{"text": prompt.text}]}],
            }),
        ),
    };
    HttpRequest {
        url: endpoint.to_string(),
        headers,
        body,
    }
}

fn malformed(what: &str) -> BackendError {
    BackendError::MalformedProviderResponse(what.to_string())
}

fn count(v: &Value, key: &str) -> Option<u64> {
    v.get(key).and_then(Value::as_u64)
}

pub fn parse_response(family: Family, body: &Value) -> Result<RawCompletion, BackendError> {
    match family {
        Family::Gpt | Family::Synthetic => {
            let text = body
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed("missing choices[0].message.content"))?;
            let usage = body.get("usage").and_then(|u| {
                Some(UsageRecord::new(
                    count(u, "prompt_tokens")?,
                    count(u, "completion_tokens")?,
                ))
            });
            Ok(RawCompletion {
                text: text.to_string(),
                usage,
            })
        }
        Family::Claude => {
            let parts = body
                .get("content")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("missing content array"))?;
            let text: String = parts
                .iter()
                .filter(|p| p.get("type").and_then(Value::as_str) == Some("text"))
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join("\n");
            if text.is_empty() {
                return Err(malformed("no text content block"));
            }
            let usage = body.get("usage").and_then(|u| {
                Some(UsageRecord::new(
                    count(u, "input_tokens")?,
                    count(u, "output_tokens")?,
                ))
            });
            Ok(RawCompletion { text, usage })
        }
        Family::Gemini => {
            let parts = body
                .pointer("/candidates/0/content/parts")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("missing candidates[0].content.parts"))?;
            let text: String = parts
                .iter()
                .filter(|p| p.get("thought").and_then(Value::as_bool) != Some(true))
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join("\n");
            if text.is_empty() {
                return Err(malformed("no text part"));
            }
            // thinking tokens are billed as output
            let usage = body.get("usageMetadata").and_then(|u| {
                let completion = count(u, "candidatesTokenCount").unwrap_or(0)
                    + count(u, "thoughtsTokenCount").unwrap_or(0);
                Some(UsageRecord::new(count(u, "promptTokenCount")?, completion))
            });
            Ok(RawCompletion { text, usage })
        }
    }
}

/// Maps a non-success HTTP status to the retry taxonomy.
pub fn classify_status(status: u16, body: &str) -> BackendError {
    let snippet: String = body.chars().take(200).collect();
    match status {
        429 => BackendError::RateLimited,
        408 | 500..=599 => BackendError::Transient(format!("HTTP {status}: {snippet}")),
        401 | 403 => BackendError::AuthFailure(format!("HTTP {status}: {snippet}")),
        _ => BackendError::Rejected(format!("HTTP {status}: {snippet}")),
    }
}

pub struct HttpBackend {
    spec: BackendSpec,
    endpoint: String,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(spec: BackendSpec, endpoint: String, api_key: String, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            spec,
            endpoint,
            api_key,
            agent,
        }
    }

    /// Resolves endpoint and key from the backend entry and the environment.
    pub fn from_env(spec: BackendSpec, timeout: Duration) -> Result<Self, BackendError> {
        let prefix = env_prefix(&spec.backend_id);
        let key_var = format!("{prefix}_API_KEY");
        let api_key = std::env::var(&key_var).map_err(|_| {
            BackendError::Config(format!(
                "{key_var} is not set for backend {}",
                spec.backend_id
            ))
        })?;
        let endpoint =
            std::env::var(format!("{prefix}_ENDPOINT")).unwrap_or_else(|_| spec.endpoint.clone());
        if endpoint.is_empty() || endpoint == "synthetic" {
            return Err(BackendError::Config(format!(
                "backend {} has no endpoint",
                spec.backend_id
            )));
        }
        Ok(Self::new(spec, endpoint, api_key, timeout))
    }
}

impl Backend for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.spec.backend_id
    }

    fn complete_once(&self, prompt: &RenderedPrompt) -> Result<RawCompletion, BackendError> {
        let req = build_request(&self.spec, &self.endpoint, &self.api_key, prompt);
        let mut builder = self
            .agent
            .post(&req.url)
            .header("content-type", "application/json");
        for (k, v) in &req.headers {
            builder = builder.header(k.as_str(), v.as_str());
        }
        let payload =
            serde_json::to_vec(&req.body).map_err(|e| BackendError::Rejected(e.to_string()))?;
        let mut resp = builder.send(&payload[..]).map_err(|e| match e {
            ureq::Error::StatusCode(code) => classify_status(code, ""),
            other => BackendError::Transient(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(format!("reading body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        let body: Value =
            serde_json::from_str(&text).map_err(|e| malformed(&format!("invalid JSON: {e}")))?;
        parse_response(self.spec.family, &body)
    }
}
