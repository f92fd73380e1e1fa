//! Bridge to an external reward scorer.
//!
//! The wire protocol is line-delimited JSON over the scorer process's
//! stdin/stdout. Each request is
//! `{"id", "instruction", "response", "image_path"?}` and each reply is
//! `{"id", "reward"}`. Replies may arrive in any order and are matched by id.
//! Images are passed by path and never decoded here.
//!
//! A [`Transcript`] records every scored request so a run can be replayed
//! without the scorer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ScorerError {
    #[error("failed to launch scorer `{command}`: {source}")]
    Launch {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scorer I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("scorer exited with {0}")]
    ExitStatus(String),
    #[error("scorer reply is not valid JSON ({line:?}): {msg}")]
    BadReply { line: String, msg: String },
    #[error("scorer returned no reward for id {0}")]
    MissingId(String),
    #[error("scorer returned a duplicate reward for id {0}")]
    DuplicateId(String),
    #[error("scorer returned a reward for unknown id {0}")]
    UnknownId(String),
    #[error("scorer timed out after {0:?} waiting for a reply")]
    Timeout(Duration),
    #[error("transcript has no entry for model {model} id {id}")]
    NotInTranscript { model: String, id: String },
    #[error("transcript {path}: {msg}")]
    Transcript { path: String, msg: String },
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: String,
    pub instruction: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReply {
    pub id: String,
    pub reward: f64,
}

/// The model being scored: an optional checkpoint path handed to external
/// scorers, and a content fingerprint identifying it in transcripts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelRef {
    pub path: Option<PathBuf>,
    pub fingerprint: String,
}

impl ModelRef {
    pub fn new(path: Option<PathBuf>, fingerprint: impl Into<String>) -> Self {
        ModelRef {
            path,
            fingerprint: fingerprint.into(),
        }
    }

    /// No model; rewards depend on the text alone.
    pub fn none() -> Self {
        ModelRef::new(None, "")
    }
}

pub type Rewards = HashMap<String, f32>;

pub trait Scorer {
    /// Score every request for `model`, returning rewards by request id.
    fn score(&mut self, model: &ModelRef, requests: &[ScoreRequest]) -> Result<Rewards, ScorerError>;
}

/// Check that replies cover the requests exactly once each.
pub fn match_replies(requests: &[ScoreRequest], replies: Vec<ScoreReply>) -> Result<Rewards, ScorerError> {
    let wanted: HashSet<&str> = requests.iter().map(|r| r.id.as_str()).collect();
    let mut out = Rewards::with_capacity(requests.len());
    for reply in replies {
        if !wanted.contains(reply.id.as_str()) {
            return Err(ScorerError::UnknownId(reply.id));
        }
        if out.insert(reply.id.clone(), reply.reward as f32).is_some() {
            return Err(ScorerError::DuplicateId(reply.id));
        }
    }
    for r in requests {
        if !out.contains_key(&r.id) {
            return Err(ScorerError::MissingId(r.id.clone()));
        }
    }
    Ok(out)
}

/// Deterministic scorer: the reward is a hash of the model fingerprint and
/// the request text, mapped to `[-4, 4)`.
#[derive(Debug, Clone, Default)]
pub struct StubScorer;

impl StubScorer {
    pub fn reward(model: &ModelRef, req: &ScoreRequest) -> f32 {
        let mut h = Sha256::new();
        for part in [
            model.fingerprint.as_str(),
            req.instruction.as_str(),
            req.response.as_str(),
            req.image_path.as_deref().unwrap_or(""),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        let digest = h.finalize();
        let x = u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]);
        // Multiples of 2^-13 in [-4, 4), exactly representable in F32.
        (x >> 16) as f32 / 8192.0 - 4.0
    }
}

impl Scorer for StubScorer {
    fn score(&mut self, model: &ModelRef, requests: &[ScoreRequest]) -> Result<Rewards, ScorerError> {
        let replies = requests
            .iter()
            .map(|r| ScoreReply {
                id: r.id.clone(),
                reward: Self::reward(model, r) as f64,
            })
            .collect();
        match_replies(requests, replies)
    }
}

/// Runs a shell command per scoring call and speaks the line protocol with
/// it. The model path is exported as `VLRM_MODEL_PATH` and its fingerprint
/// as `VLRM_MODEL_FINGERPRINT`.
#[derive(Debug, Clone)]
pub struct ProcessScorer {
    pub command: String,
    pub timeout: Duration,
}

impl ProcessScorer {
    pub fn new(command: impl Into<String>, timeout: Duration) -> Self {
        ProcessScorer {
            command: command.into(),
            timeout,
        }
    }
}

impl Scorer for ProcessScorer {
    fn score(&mut self, model: &ModelRef, requests: &[ScoreRequest]) -> Result<Rewards, ScorerError> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(&self.command)
            .env("VLRM_MODEL_FINGERPRINT", &model.fingerprint)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        if let Some(p) = &model.path {
            cmd.env("VLRM_MODEL_PATH", p);
        }
        let mut child = cmd.spawn().map_err(|source| ScorerError::Launch {
            command: self.command.clone(),
            source,
        })?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let lines: Vec<String> = requests
            .iter()
            .map(|r| serde_json::to_string(r).expect("request serializes"))
            .collect();
        // Write on a separate thread so a scorer that replies while still
        // reading cannot deadlock against a full pipe.
        let writer = thread::spawn(move || -> std::io::Result<()> {
            for l in lines {
                writeln!(stdin, "{l}")?;
            }
            stdin.flush()
        });

        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let mut replies = Vec::with_capacity(requests.len());
        let mut failure = None;
        // Read to end of output so extra or duplicate replies are caught.
        loop {
            match rx.recv_timeout(self.timeout) {
                Ok(Ok(line)) => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    match serde_json::from_str::<ScoreReply>(&line) {
                        Ok(r) => replies.push(r),
                        Err(e) => {
                            failure = Some(ScorerError::BadReply {
                                line,
                                msg: e.to_string(),
                            });
                            break;
                        }
                    }
                }
                Ok(Err(e)) => {
                    failure = Some(ScorerError::Io(e));
                    break;
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    failure = Some(ScorerError::Timeout(self.timeout));
                    break;
                }
            }
        }
        if failure.is_some() {
            let _ = child.kill();
        }
        let status = child.wait()?;
        // A scorer that exits before reading all input breaks the pipe; the
        // exit status or missing replies describe that better.
        let _ = writer.join();
        if let Some(e) = failure {
            return Err(e);
        }
        if !status.success() {
            return Err(ScorerError::ExitStatus(status.to_string()));
        }
        match_replies(requests, replies)
    }
}

/// One scored request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub model: String,
    #[serde(flatten)]
    pub request: ScoreRequest,
    pub reward: f32,
}

/// Ordered log of scored requests, stored as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?);
        }
        Ok(Transcript { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ScorerError> {
        let path = path.as_ref();
        let err = |msg: String| ScorerError::Transcript {
            path: path.display().to_string(),
            msg,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Transcript::parse(&text).map_err(err)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_jsonl())
    }
}

/// Wraps a scorer and logs everything it scores.
pub struct RecordingScorer<S> {
    pub inner: S,
    pub transcript: Transcript,
}

impl<S: Scorer> RecordingScorer<S> {
    pub fn new(inner: S) -> Self {
        RecordingScorer {
            inner,
            transcript: Transcript::default(),
        }
    }
}

impl<S: Scorer> Scorer for RecordingScorer<S> {
    fn score(&mut self, model: &ModelRef, requests: &[ScoreRequest]) -> Result<Rewards, ScorerError> {
        let rewards = self.inner.score(model, requests)?;
        for r in requests {
            self.transcript.entries.push(TranscriptEntry {
                model: model.fingerprint.clone(),
                request: r.clone(),
                reward: rewards[&r.id],
            });
        }
        Ok(rewards)
    }
}

/// Answers from a recorded transcript, keyed by model fingerprint and id.
#[derive(Debug, Clone, Default)]
pub struct ReplayScorer {
    rewards: BTreeMap<(String, String), f32>,
}

impl ReplayScorer {
    pub fn new(transcript: &Transcript) -> Self {
        ReplayScorer {
            rewards: transcript
                .entries
                .iter()
                .map(|e| ((e.model.clone(), e.request.id.clone()), e.reward))
                .collect(),
        }
    }
}

impl Scorer for ReplayScorer {
    fn score(&mut self, model: &ModelRef, requests: &[ScoreRequest]) -> Result<Rewards, ScorerError> {
        requests
            .iter()
            .map(|r| {
                self.rewards
                    .get(&(model.fingerprint.clone(), r.id.clone()))
                    .map(|w| (r.id.clone(), *w))
                    .ok_or_else(|| ScorerError::NotInTranscript {
                        model: model.fingerprint.clone(),
                        id: r.id.clone(),
                    })
            })
            .collect()
    }
}

impl Scorer for Box<dyn Scorer> {
    fn score(&mut self, model: &ModelRef, requests: &[ScoreRequest]) -> Result<Rewards, ScorerError> {
        (**self).score(model, requests)
    }
}
