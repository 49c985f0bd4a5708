use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{whitespace_tokens, Backend, BackendError, Completion, GenerationRequest, Usage};

/// One line of a scripted-backend fixture file.
///
/// Exactly one of `fingerprint` or `prompt_regex` selects the requests the
/// completion answers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedFixture {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_regex: Option<String>,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone)]
struct Reply {
    text: String,
    usage: Option<Usage>,
}

/// Deterministic backend that replays registered completions.
///
/// Lookups try the exact request fingerprint first, then the prompt regexes
/// in registration order. Every call is logged, and the peak number of
/// concurrent calls is tracked so callers can assert on their concurrency
/// bound.
pub struct ScriptedBackend {
    id: String,
    by_fingerprint: HashMap<String, Reply>,
    patterns: Vec<(Regex, Reply)>,
    delay: Option<Duration>,
    log: Mutex<Vec<(String, String)>>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>) -> Self {
        ScriptedBackend {
            id: id.into(),
            by_fingerprint: HashMap::new(),
            patterns: Vec::new(),
            delay: None,
            log: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>, completion: impl Into<String>) -> Self {
        self.by_fingerprint
            .insert(fingerprint.into(), Reply { text: completion.into(), usage: None });
        self
    }

    /// Registers `completion` for every prompt matching `pattern`.
    pub fn with_pattern(mut self, pattern: &str, completion: impl Into<String>) -> Result<Self, regex::Error> {
        let regex = Regex::new(pattern)?;
        self.patterns.push((regex, Reply { text: completion.into(), usage: None }));
        Ok(self)
    }

    /// Sleeps for `delay` inside every call, which makes overlapping calls
    /// observable in tests.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn add_fixture(&mut self, fixture: ScriptedFixture) -> Result<(), BackendError> {
        let reply = Reply { text: fixture.completion, usage: fixture.usage };
        match (fixture.fingerprint, fixture.prompt_regex) {
            (Some(fp), None) => {
                self.by_fingerprint.insert(fp, reply);
            }
            (None, Some(pattern)) => {
                let regex = Regex::new(&pattern)
                    .map_err(|e| BackendError::InvalidRequest(format!("fixture regex {pattern:?}: {e}")))?;
                self.patterns.push((regex, reply));
            }
            _ => {
                return Err(BackendError::InvalidRequest(
                    "fixture needs exactly one of `fingerprint` or `prompt_regex`".into(),
                ))
            }
        }
        Ok(())
    }

    /// Loads a JSONL fixture file. Blank lines are skipped.
    pub fn from_jsonl(id: impl Into<String>, path: &Path) -> Result<Self, BackendError> {
        let file = File::open(path)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        let mut backend = ScriptedBackend::new(id);
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fixture: ScriptedFixture = serde_json::from_str(&line).map_err(|e| {
                BackendError::InvalidRequest(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            backend.add_fixture(fixture)?;
        }
        Ok(backend)
    }

    pub fn calls(&self) -> usize {
        self.log.lock().expect("call log poisoned").len()
    }

    /// Fingerprints of every call, in arrival order.
    pub fn call_log(&self) -> Vec<String> {
        self.log.lock().expect("call log poisoned").iter().map(|(fp, _)| fp.clone()).collect()
    }

    /// Prompts of every call, in arrival order.
    pub fn prompts(&self) -> Vec<String> {
        self.log.lock().expect("call log poisoned").iter().map(|(_, p)| p.clone()).collect()
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    fn lookup(&self, fingerprint: &str, prompt: &str) -> Option<&Reply> {
        self.by_fingerprint.get(fingerprint).or_else(|| {
            self.patterns
                .iter()
                .find(|(regex, _)| regex.is_match(prompt))
                .map(|(_, reply)| reply)
        })
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &GenerationRequest) -> Result<Completion, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let fingerprint = request.fingerprint();
        self.log
            .lock()
            .expect("call log poisoned")
            .push((fingerprint.0.clone(), request.prompt.clone()));
        if let Some(delay) = self.delay {
            std::thread::sleep(delay);
        }
        let result = match self.lookup(fingerprint.as_str(), &request.prompt) {
            Some(reply) => Ok(Completion {
                text: reply.text.clone(),
                finish_reason: "stop".into(),
                usage: reply.usage.unwrap_or(Usage {
                    prompt_tokens: whitespace_tokens(&request.prompt) as u64,
                    output_tokens: whitespace_tokens(&reply.text) as u64,
                }),
                latency_ms: 0,
            }),
            None => Err(BackendError::FixtureMiss { fingerprint: fingerprint.0 }),
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}
