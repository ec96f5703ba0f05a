// SPDX-License-Identifier: MIT OR Apache-2.0

//! LLM-judge interpretability filter.
//!
//! Each selected latent is shown to a judge as its top activating contexts
//! (and promoted tokens when the store has a token projection); the judge
//! scores its relatedness to every concept on an integer scale 0 to 4.
//! SCR keeps latents scored 0 for the desired concept; TPP optionally keeps
//! latents scored at least 1 for the targeted class.

mod backend;
mod evidence;
mod prompt;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::attribution::LatentSet;
use crate::error::{Error, Result};
use crate::store::Attribute;

pub use backend::{HttpBackend, JudgeBackend, JudgeCache, MockJudge, RateLimiter};
pub use evidence::{EvidenceContext, EvidenceProvider, LatentEvidence, StoreEvidence, MAX_CONTEXTS, MAX_PROMOTED};
pub use prompt::{
    build_judge_prompt, parse_judge_response, parse_real_task, JudgePrompt, RealTask, MAX_SCALE, MIN_SCALE,
};

/// Environment variable holding the judge service API key (default name).
pub const API_KEY_ENV: &str = "SAEVAL_JUDGE_API_KEY";
/// Environment variable naming the response cache directory.
pub const CACHE_DIR_ENV: &str = "SAEVAL_JUDGE_CACHE";

/// Where a verdict came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictSource {
    Live,
    Cache,
    Mock,
}

/// Relatedness scores (0 to 4) of one latent to each requested concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub latent: usize,
    pub scores: BTreeMap<String, u8>,
    pub raw_response: String,
    pub source: VerdictSource,
    /// Set when no valid response could be obtained; `scores` is then empty.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum JudgeMode {
    #[default]
    Mock,
    Http,
}

/// Judge service settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub mode: JudgeMode,
    /// Chat-completions URL (HTTP mode).
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    /// Response cache; falls back to the `SAEVAL_JUDGE_CACHE` variable.
    pub cache_dir: Option<PathBuf>,
    pub max_in_flight: usize,
    pub requests_per_second: f64,
    /// Extra attempts after a malformed response or transport failure.
    pub max_retries: usize,
    pub timeout_secs: u64,
    /// SCR: additionally require a spurious-concept score of at least 1.
    pub require_spurious_related: bool,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            mode: JudgeMode::Mock,
            endpoint: String::new(),
            model: String::new(),
            api_key_env: API_KEY_ENV.into(),
            cache_dir: None,
            max_in_flight: 4,
            requests_per_second: 2.0,
            max_retries: 2,
            timeout_secs: 60,
            require_spurious_related: false,
        }
    }
}

/// A configured judge: backend, optional cache, concurrency and retry policy.
pub struct Judge {
    backend: Box<dyn JudgeBackend>,
    cache: Option<JudgeCache>,
    max_in_flight: usize,
    max_retries: usize,
    limiter: RateLimiter,
    requests: AtomicUsize,
}

impl Judge {
    pub fn new(
        backend: Box<dyn JudgeBackend>,
        cache: Option<JudgeCache>,
        max_in_flight: usize,
        requests_per_second: f64,
        max_retries: usize,
    ) -> Self {
        let max_in_flight = max_in_flight.max(1);
        Self {
            backend,
            cache,
            max_in_flight,
            max_retries,
            limiter: RateLimiter::new(requests_per_second, max_in_flight),
            requests: AtomicUsize::new(0),
        }
    }

    /// Rule-based judge over the given attributes; no cache, no rate limit.
    pub fn mock(attributes: &[Attribute]) -> Self {
        Self::new(Box::new(MockJudge::new(attributes)), None, 1, 0.0, 0)
    }

    /// Build from configuration. `attributes` feed the mock's keyword table.
    pub fn from_config(config: &JudgeConfig, attributes: &[Attribute]) -> Result<Self> {
        let backend: Box<dyn JudgeBackend> = match config.mode {
            JudgeMode::Mock => Box::new(MockJudge::new(attributes)),
            JudgeMode::Http => {
                if config.endpoint.is_empty() || config.model.is_empty() {
                    return Err(Error::config("HTTP judge needs an endpoint and a model"));
                }
                let key = std::env::var(&config.api_key_env).ok();
                Box::new(HttpBackend::new(
                    &config.endpoint,
                    &config.model,
                    key,
                    Duration::from_secs(config.timeout_secs),
                )?)
            }
        };
        let cache_dir = config
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from));
        let cache = cache_dir.map(JudgeCache::new).transpose()?;
        // Pacing protects a remote service; the mock answers locally.
        let rate = match config.mode {
            JudgeMode::Mock => 0.0,
            JudgeMode::Http => config.requests_per_second,
        };
        Ok(Self::new(
            backend,
            cache,
            config.max_in_flight,
            rate,
            config.max_retries,
        ))
    }

    /// Number of backend requests issued so far (cache hits excluded).
    pub fn requests_made(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Verdict for one prompt; `Err` means the service was unreachable.
    fn judge_one(
        &self,
        latent: usize,
        prompt: &JudgePrompt,
        concepts: &[String],
    ) -> std::result::Result<JudgeVerdict, String> {
        let cache = self.cache.as_ref().filter(|_| self.backend.cacheable());
        let key = prompt.cache_key();
        if let Some(text) = cache.and_then(|c| c.get(&key)) {
            if let Ok(scores) = parse_judge_response(&text, concepts) {
                return Ok(JudgeVerdict {
                    latent,
                    scores,
                    raw_response: text,
                    source: VerdictSource::Cache,
                    error: None,
                });
            }
        }
        let mut last_response = String::new();
        let mut last_error = String::new();
        for attempt in 0..=self.max_retries {
            self.limiter.acquire();
            self.requests.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(prompt) {
                Err(e) if attempt == self.max_retries => return Err(e),
                Err(e) => last_error = e,
                Ok(text) => match parse_judge_response(&text, concepts) {
                    Ok(scores) => {
                        if let Some(c) = cache {
                            // A failed cache write only costs a future request.
                            let _ = c.put(&key, &text);
                        }
                        return Ok(JudgeVerdict {
                            latent,
                            scores,
                            raw_response: text,
                            source: self.backend.source(),
                            error: None,
                        });
                    }
                    Err(e) => {
                        last_error = e.to_string();
                        last_response = text;
                    }
                },
            }
        }
        Ok(JudgeVerdict {
            latent,
            scores: BTreeMap::new(),
            raw_response: last_response,
            source: self.backend.source(),
            error: Some(format!(
                "{} attempts failed; last error: {last_error}",
                self.max_retries + 1
            )),
        })
    }
}

/// Judge every latent of `latents`, in input order.
///
/// Up to `max_in_flight` requests run concurrently. A latent whose responses
/// stay malformed after all retries gets an error verdict; a transport
/// failure after all retries aborts with [`Error::JudgeUnavailable`]
/// carrying the verdicts completed so far.
pub fn judge_latents(
    latents: &LatentSet,
    provider: &dyn EvidenceProvider,
    concepts: &[String],
    judge: &Judge,
) -> Result<Vec<JudgeVerdict>> {
    if concepts.is_empty() {
        return Err(Error::contract("judge_latents: no concepts given"));
    }
    let prompts = latents
        .indices
        .iter()
        .map(|&a| Ok(build_judge_prompt(&provider.evidence(a)?, concepts)))
        .collect::<Result<Vec<_>>>()?;
    let n = prompts.len();
    let results: Mutex<Vec<Option<JudgeVerdict>>> = Mutex::new(vec![None; n]);
    let failure: Mutex<Option<String>> = Mutex::new(None);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    std::thread::scope(|scope| {
        for _ in 0..judge.max_in_flight.min(n) {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                match judge.judge_one(latents.indices[i], &prompts[i], concepts) {
                    Ok(v) => results.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(v),
                    Err(e) => {
                        stop.store(true, Ordering::SeqCst);
                        failure.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
                    }
                }
            });
        }
    });
    let results = results.into_inner().unwrap_or_else(|p| p.into_inner());
    if let Some(message) = failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(Error::JudgeUnavailable {
            message,
            partial: results.into_iter().flatten().collect(),
        });
    }
    Ok(results.into_iter().flatten().collect())
}

/// Result of filtering a latent set by verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: LatentSet,
    /// Latents dropped because their verdict carried an error.
    pub errored: Vec<usize>,
}

fn verdict_map<'a>(latents: &LatentSet, verdicts: &'a [JudgeVerdict]) -> Result<BTreeMap<usize, &'a JudgeVerdict>> {
    let map: BTreeMap<usize, &JudgeVerdict> = verdicts.iter().map(|v| (v.latent, v)).collect();
    if let Some(missing) = latents.indices.iter().find(|a| !map.contains_key(a)) {
        return Err(Error::contract(format!("no verdict for latent {missing}")));
    }
    Ok(map)
}

fn filter_by(
    latents: &LatentSet,
    verdicts: &[JudgeVerdict],
    keep: impl Fn(&JudgeVerdict) -> bool,
) -> Result<FilterOutcome> {
    let map = verdict_map(latents, verdicts)?;
    let errored: Vec<usize> = latents
        .indices
        .iter()
        .copied()
        .filter(|a| map[a].error.is_some())
        .collect();
    let kept = latents.retain(|a| map[&a].error.is_none() && keep(map[&a]));
    Ok(FilterOutcome { kept, errored })
}

/// SCR filter: keep latents scored 0 for every desired concept. With
/// `spurious` given, also require a score of at least 1 for one of them.
pub fn filter_latents_scr(
    latents: &LatentSet,
    verdicts: &[JudgeVerdict],
    desired: &[String],
    spurious: Option<&[String]>,
) -> Result<FilterOutcome> {
    let score = |v: &JudgeVerdict, c: &String| v.scores.get(c).copied().unwrap_or(0);
    filter_by(latents, verdicts, |v| {
        desired.iter().all(|c| score(v, c) == 0) && spurious.is_none_or(|s| s.iter().any(|c| score(v, c) >= 1))
    })
}

/// TPP filter: keep latents scored at least 1 for the targeted concept.
pub fn filter_latents_tpp(latents: &LatentSet, verdicts: &[JudgeVerdict], target: &str) -> Result<FilterOutcome> {
    filter_by(latents, verdicts, |v| v.scores.get(target).is_some_and(|&s| s >= 1))
}
