//! Triple classifiers over (persona, query, response).
//!
//! Label 2: the response agrees with the persona and follows the query.
//! Label 1: it agrees with the persona only. Label 0: anything else.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NliError {
    /// No usable backend: missing endpoint, unreadable weights, bad settings.
    #[error("NLI backend not configured: {0}")]
    Config(String),
    /// The backend exists but failed to produce a label.
    #[error("NLI inference failed: {0}")]
    Inference(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum NliLabel {
    Inconsistent = 0,
    Consistent = 1,
    ConsistentCoherent = 2,
}

impl NliLabel {
    pub fn value(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for NliLabel {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(NliLabel::Inconsistent),
            1 => Ok(NliLabel::Consistent),
            2 => Ok(NliLabel::ConsistentCoherent),
            _ => Err(format!("NLI label must be 0, 1 or 2, got {v}")),
        }
    }
}

impl From<NliLabel> for u8 {
    fn from(l: NliLabel) -> u8 {
        l.value()
    }
}

/// Share of labels in {1, 2}.
pub fn con_score(labels: &[NliLabel]) -> f64 {
    mean_indicator(labels, |l| l != NliLabel::Inconsistent)
}

/// Share of labels equal to 2; label 1 counts as 0.
pub fn coh_con_score(labels: &[NliLabel]) -> f64 {
    mean_indicator(labels, |l| l == NliLabel::ConsistentCoherent)
}

fn mean_indicator(labels: &[NliLabel], f: impl Fn(NliLabel) -> bool) -> f64 {
    assert!(!labels.is_empty(), "score of an empty label list");
    labels.iter().filter(|&&l| f(l)).count() as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple<'a> {
    pub persona: &'a str,
    pub query: &'a str,
    pub response: &'a str,
}

pub trait NliClassifier: Send + Sync {
    fn classify(&self, persona: &str, query: &str, response: &str) -> Result<NliLabel, NliError>;

    fn classify_all(&self, triples: &[Triple<'_>]) -> Result<Vec<NliLabel>, NliError> {
        triples
            .iter()
            .map(|t| self.classify(t.persona, t.query, t.response))
            .collect()
    }
}

fn words(s: &str) -> impl Iterator<Item = &str> {
    s.split_whitespace()
}

/// Fixture backend: the persona declares `likes:X` markers; the response is
/// consistent if it mentions some `X`, and coherent if it repeats any query
/// word.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBasedNli;

impl RuleBasedNli {
    pub const MARKER: &'static str = "likes:";
}

impl NliClassifier for RuleBasedNli {
    fn classify(&self, persona: &str, query: &str, response: &str) -> Result<NliLabel, NliError> {
        let likes: HashSet<&str> = words(persona)
            .filter_map(|w| w.strip_prefix(Self::MARKER))
            .filter(|w| !w.is_empty())
            .collect();
        let resp: HashSet<&str> = words(response).collect();
        if !likes.iter().any(|x| resp.contains(x)) {
            return Ok(NliLabel::Inconsistent);
        }
        if words(query).any(|w| resp.contains(w)) {
            Ok(NliLabel::ConsistentCoherent)
        } else {
            Ok(NliLabel::Consistent)
        }
    }
}

/// One labelled triple for training [`BowNli`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledTriple {
    pub persona: String,
    pub query: String,
    pub response: String,
    pub label: NliLabel,
}

/// Multinomial logistic regression over sparse overlap features: response
/// words shared with the persona and with the query (prefixed so the two
/// sets stay apart), their counts, and the response words themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowNli {
    weights: HashMap<String, [f64; 3]>,
    bias: [f64; 3],
}

impl BowNli {
    fn features(persona: &str, query: &str, response: &str) -> Vec<(String, f64)> {
        let p: HashSet<&str> = words(persona)
            .map(|w| w.strip_prefix(RuleBasedNli::MARKER).unwrap_or(w))
            .collect();
        let q: HashSet<&str> = words(query).collect();
        let r: Vec<&str> = {
            let mut seen = HashSet::new();
            words(response).filter(|w| seen.insert(*w)).collect()
        };
        let mut f = Vec::new();
        let (mut np, mut nq) = (0.0, 0.0);
        for w in &r {
            if p.contains(w) {
                f.push((format!("p:{w}"), 1.0));
                np += 1.0;
            }
            if q.contains(w) {
                f.push((format!("q:{w}"), 1.0));
                nq += 1.0;
            }
            f.push((format!("r:{w}"), 1.0));
        }
        f.push(("#p_overlap".into(), np));
        f.push(("#q_overlap".into(), nq));
        f.push(("#p_any".into(), f64::from(np > 0.0)));
        f.push(("#q_any".into(), f64::from(nq > 0.0)));
        f
    }

    fn logits(&self, feats: &[(String, f64)]) -> [f64; 3] {
        let mut z = self.bias;
        for (name, v) in feats {
            if let Some(w) = self.weights.get(name) {
                for c in 0..3 {
                    z[c] += w[c] * v;
                }
            }
        }
        z
    }

    /// Full-batch gradient descent on the cross-entropy, deterministic.
    pub fn train(data: &[LabelledTriple], epochs: usize, learning_rate: f64, l2: f64) -> Result<Self, NliError> {
        if data.is_empty() {
            return Err(NliError::Config("no training triples".into()));
        }
        let feats: Vec<Vec<(String, f64)>> = data
            .iter()
            .map(|t| Self::features(&t.persona, &t.query, &t.response))
            .collect();
        let mut model = BowNli {
            weights: HashMap::new(),
            bias: [0.0; 3],
        };
        for f in &feats {
            for (name, _) in f {
                model.weights.entry(name.clone()).or_insert([0.0; 3]);
            }
        }
        let n = data.len() as f64;
        for _ in 0..epochs {
            let mut grad: HashMap<&str, [f64; 3]> = HashMap::new();
            let mut grad_b = [0.0; 3];
            for (f, t) in feats.iter().zip(data) {
                let z = model.logits(f);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e = z.map(|v| (v - max).exp());
                let s: f64 = e.iter().sum();
                let mut delta = e.map(|v| v / s);
                delta[t.label.value() as usize] -= 1.0;
                for c in 0..3 {
                    grad_b[c] += delta[c] / n;
                }
                for (name, v) in f {
                    let g = grad.entry(name.as_str()).or_insert([0.0; 3]);
                    for c in 0..3 {
                        g[c] += delta[c] * v / n;
                    }
                }
            }
            for c in 0..3 {
                model.bias[c] -= learning_rate * grad_b[c];
            }
            for (name, w) in model.weights.iter_mut() {
                let g = grad.get(name.as_str()).copied().unwrap_or([0.0; 3]);
                for c in 0..3 {
                    w[c] -= learning_rate * (g[c] + l2 * w[c]);
                }
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NliError> {
        let json = serde_json::to_string(self).map_err(|e| NliError::Inference(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| NliError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| NliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| NliError::Config(format!("{}: {e}", path.display())))
    }
}

impl NliClassifier for BowNli {
    fn classify(&self, persona: &str, query: &str, response: &str) -> Result<NliLabel, NliError> {
        let z = self.logits(&Self::features(persona, query, response));
        let mut best = 0;
        for c in 1..3 {
            if z[c] > z[best] {
                best = c;
            }
        }
        Ok(NliLabel::try_from(best as u8).unwrap())
    }
}

pub const ENDPOINT_ENV: &str = "CLV_NLI_ENDPOINT";

#[derive(Serialize)]
struct RemoteRequest<'a> {
    persona: &'a str,
    query: &'a str,
    response: &'a str,
}

#[derive(Deserialize)]
struct RemoteResponse {
    label: NliLabel,
}

/// Client for a classifier served over HTTP: `POST {persona, query,
/// response}` answered by `{label}`. Transient failures are retried; batches
/// keep a bounded number of requests in flight.
#[derive(Debug, Clone)]
pub struct RemoteNli {
    endpoint: String,
    client: reqwest::blocking::Client,
    pub max_in_flight: usize,
    pub retries: usize,
}

impl RemoteNli {
    pub fn new(endpoint: impl Into<String>) -> Result<Self, NliError> {
        let endpoint = endpoint.into();
        if !endpoint.starts_with("http://") {
            return Err(NliError::Config(format!("unsupported endpoint `{endpoint}` (plain http only)")));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| NliError::Config(e.to_string()))?;
        Ok(RemoteNli {
            endpoint,
            client,
            max_in_flight: 4,
            retries: 2,
        })
    }

    pub fn from_env() -> Result<Self, NliError> {
        match std::env::var(ENDPOINT_ENV) {
            Ok(url) if !url.trim().is_empty() => Self::new(url.trim()),
            _ => Err(NliError::Config(format!("{ENDPOINT_ENV} is not set"))),
        }
    }

    fn attempt(&self, body: &RemoteRequest<'_>) -> Result<NliLabel, (bool, String)> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(body)
            .send()
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err((true, format!("server answered {status}")));
        }
        if !status.is_success() {
            return Err((false, format!("server answered {status}")));
        }
        resp.json::<RemoteResponse>()
            .map(|r| r.label)
            .map_err(|e| (false, format!("malformed reply: {e}")))
    }
}

impl NliClassifier for RemoteNli {
    fn classify(&self, persona: &str, query: &str, response: &str) -> Result<NliLabel, NliError> {
        let body = RemoteRequest {
            persona,
            query,
            response,
        };
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.attempt(&body) {
                Ok(l) => return Ok(l),
                Err((transient, msg)) => {
                    log::debug!("NLI request attempt {attempt} failed: {msg}");
                    last = msg;
                    if !transient {
                        break;
                    }
                }
            }
        }
        Err(NliError::Inference(last))
    }

    fn classify_all(&self, triples: &[Triple<'_>]) -> Result<Vec<NliLabel>, NliError> {
        let workers = self.max_in_flight.max(1);
        let mut out = Vec::with_capacity(triples.len());
        for chunk in triples.chunks(workers) {
            let labels: Vec<Result<NliLabel, NliError>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|t| s.spawn(move || self.classify(t.persona, t.query, t.response)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("NLI worker panicked")).collect()
            });
            for l in labels {
                out.push(l?);
            }
        }
        Ok(out)
    }
}
