// SPDX-License-Identifier: MIT OR Apache-2.0

//! Judge services: an OpenAI-compatible chat-completions client, a
//! rule-based mock, the response cache and a token-bucket rate limiter.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::json;

use super::prompt::{parse_real_task, JudgePrompt, MAX_SCALE};
use super::VerdictSource;
use crate::container::write_file_atomic;
use crate::error::{Error, Result};
use crate::store::Attribute;

/// Something that turns a prompt into a response text.
pub trait JudgeBackend: Send + Sync {
    /// Transport failures are reported as `Err(message)`.
    fn complete(&self, prompt: &JudgePrompt) -> std::result::Result<String, String>;

    fn source(&self) -> VerdictSource;

    /// Whether responses should go through the on-disk cache.
    fn cacheable(&self) -> bool {
        true
    }
}

/// Client for any chat-completions endpoint speaking the OpenAI wire format.
pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            endpoint: endpoint.to_owned(),
            model: model.to_owned(),
            api_key,
            client,
        })
    }
}

impl JudgeBackend for HttpBackend {
    fn complete(&self, prompt: &JudgePrompt) -> std::result::Result<String, String> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
        });
        let mut request = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| format!("request to {} failed: {e}", self.endpoint))?;
        let status = response.status();
        let value: serde_json::Value = response
            .json()
            .map_err(|e| format!("unreadable response ({status}): {e}"))?;
        if !status.is_success() {
            return Err(format!("judge service returned {status}: {value}"));
        }
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| format!("response has no choices[0].message.content: {value}"))
    }

    fn source(&self) -> VerdictSource {
        VerdictSource::Live
    }
}

/// Rule-based stand-in for a judge service.
///
/// A concept scores the maximum when one of its keywords is highlighted
/// (activation > 0) in a context, 1 when a keyword is only the first
/// promoted token, and 0 otherwise. Later promoted tokens are ignored: in a
/// low-dimensional token projection they are mostly incidental. An
/// attribute name's keywords are its class names; any other concept is its
/// own keyword.
#[derive(Debug, Clone, Default)]
pub struct MockJudge {
    keywords: BTreeMap<String, BTreeSet<String>>,
}

impl MockJudge {
    pub fn new(attributes: &[Attribute]) -> Self {
        let keywords = attributes
            .iter()
            .map(|a| (a.name.clone(), a.classes.iter().cloned().collect()))
            .collect();
        Self { keywords }
    }

    fn keywords<'a>(&'a self, concept: &'a str) -> Box<dyn Iterator<Item = &'a str> + 'a> {
        match self.keywords.get(concept) {
            Some(set) => Box::new(set.iter().map(String::as_str)),
            None => Box::new(std::iter::once(concept)),
        }
    }
}

impl JudgeBackend for MockJudge {
    fn complete(&self, prompt: &JudgePrompt) -> std::result::Result<String, String> {
        let task = parse_real_task(prompt);
        let seen: BTreeSet<&str> = task.highlighted.iter().map(String::as_str).collect();
        let top_promoted = task.promoted.first().map(String::as_str);
        let mut scores = serde_json::Map::new();
        let mut related = Vec::new();
        for concept in &task.concepts {
            let score = if self.keywords(concept).any(|k| seen.contains(k)) {
                MAX_SCALE
            } else if self.keywords(concept).any(|k| Some(k) == top_promoted) {
                1
            } else {
                0
            };
            if score > 0 {
                related.push(concept.as_str());
            }
            scores.insert(concept.clone(), json!(score));
        }
        let tokens: Vec<&str> = seen.into_iter().collect();
        Ok(format!(
            "Step 1: The highlighted tokens are: {}.\nStep 2: {} promoted tokens.\nStep 3: Related concepts: {}.\n\n{}",
            if tokens.is_empty() {
                "none".to_owned()
            } else {
                tokens.join(", ")
            },
            task.promoted.len(),
            if related.is_empty() {
                "none".to_owned()
            } else {
                related.join(", ")
            },
            serde_json::Value::Object(scores)
        ))
    }

    fn source(&self) -> VerdictSource {
        VerdictSource::Mock
    }

    fn cacheable(&self) -> bool {
        false
    }
}

/// Content-addressed response cache: `<dir>/<sha256 of prompt>.txt`.
///
/// Writes go through a temporary file and a rename, so concurrent readers
/// never observe partial entries.
#[derive(Debug, Clone)]
pub struct JudgeCache {
    dir: PathBuf,
}

impl JudgeCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        std::fs::read_to_string(self.path(key)).ok()
    }

    pub fn put(&self, key: &str, response: &str) -> Result<()> {
        write_file_atomic(&self.path(key), response.as_bytes())
    }
}

/// Token bucket: `rate` tokens per second, holding at most `burst`.
pub struct RateLimiter {
    rate: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    /// A non-positive or infinite `rate` disables limiting.
    pub fn new(rate: f64, burst: usize) -> Self {
        let burst = burst.max(1) as f64;
        Self {
            rate,
            burst,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    /// Block until one token is available and take it.
    pub fn acquire(&self) {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return;
        }
        loop {
            let wait = {
                let mut guard = self.state.lock().unwrap_or_else(|p| p.into_inner());
                let (tokens, last) = &mut *guard;
                let now = Instant::now();
                *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * self.rate).min(self.burst);
                *last = now;
                if *tokens >= 1.0 {
                    *tokens -= 1.0;
                    return;
                }
                (1.0 - *tokens) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::evidence::{EvidenceContext, LatentEvidence};
    use crate::judge::prompt::{build_judge_prompt, parse_judge_response};

    fn prompt(tokens: &[&str], acts: &[f64], promoted: &[&str], concepts: &[&str]) -> JudgePrompt {
        let ev = LatentEvidence {
            latent: 0,
            top_contexts: vec![EvidenceContext::from_activations(
                tokens.iter().map(|t| (*t).to_owned()).collect(),
                acts,
            )],
            promoted_tokens: promoted.iter().map(|t| (*t).to_owned()).collect(),
        };
        let concepts: Vec<String> = concepts.iter().map(|c| (*c).to_owned()).collect();
        build_judge_prompt(&ev, &concepts)
    }

    fn mock() -> MockJudge {
        MockJudge::new(&[
            Attribute::new("gender", &["male", "female"]),
            Attribute::new("profession", &["professor", "nurse"]),
        ])
    }

    #[test]
    fn mock_scores_highlights_and_top_promoted_token() {
        let concepts = ["gender", "professor", "nurse"].map(String::from);
        let p = prompt(
            &["female", "nurse", "topic1"],
            &[1.0, 0.0, 0.3],
            &[],
            &["gender", "professor", "nurse"],
        );
        let s = parse_judge_response(&mock().complete(&p).unwrap(), &concepts).unwrap();
        assert_eq!((s["gender"], s["professor"], s["nurse"]), (4, 0, 0));
        let p = prompt(
            &["topic1"],
            &[1.0],
            &["nurse", "male"],
            &["gender", "professor", "nurse"],
        );
        let s = parse_judge_response(&mock().complete(&p).unwrap(), &concepts).unwrap();
        assert_eq!((s["gender"], s["professor"], s["nurse"]), (0, 0, 1));
    }

    #[test]
    fn mock_is_deterministic() {
        let p = prompt(&["male", "professor"], &[0.5, 1.0], &["male"], &["gender", "professor"]);
        assert_eq!(mock().complete(&p), mock().complete(&p));
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = JudgeCache::new(dir.path().join("c")).unwrap();
        assert_eq!(cache.get("abc"), None);
        cache.put("abc", "resp").unwrap();
        assert_eq!(cache.get("abc").as_deref(), Some("resp"));
    }

    #[test]
    fn rate_limiter_paces_requests() {
        let limiter = RateLimiter::new(50.0, 1);
        let start = Instant::now();
        for _ in 0..6 {
            limiter.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(90));
        let free = RateLimiter::new(0.0, 1);
        let start = Instant::now();
        for _ in 0..1000 {
            free.acquire();
        }
        assert!(start.elapsed() < Duration::from_millis(50));
    }
}
