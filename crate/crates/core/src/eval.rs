//! Reward-model evaluation from externally supplied rewards.
//!
//! Pairwise preference accuracy counts a pair as correct only when the
//! chosen response gets a strictly higher reward. Reports carry per-domain
//! accuracy, the instance-weighted overall accuracy and the unweighted
//! macro average over domains. Best-of-N accuracy checks whether the
//! highest-reward candidate (lowest index on ties) is marked correct.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scorer::{ModelRef, ScoreRequest, Scorer, ScorerError};

/// Candidates per Best-of-N instance.
pub const DEFAULT_N: usize = 8;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("reading {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("no instances to evaluate")]
    Empty,
    #[error("{id}: non-finite reward")]
    NonFinite { id: String },
    #[error("{id}: empty candidate list")]
    NoCandidates { id: String },
    #[error("{id}: {rewards} rewards for {flags} correctness flags")]
    LengthMismatch { id: String, rewards: usize, flags: usize },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub domain: String,
    pub chosen_reward: f32,
    pub rejected_reward: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoNInstance {
    pub id: String,
    pub candidate_rewards: Vec<f32>,
    pub candidate_correct: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub per_domain_accuracy: BTreeMap<String, f32>,
    pub overall_accuracy: f32,
    pub macro_average: f32,
    pub counts: BTreeMap<String, usize>,
    pub correct: BTreeMap<String, usize>,
}

/// True iff the chosen response is strictly preferred.
pub fn judge_pair(p: &PreferencePair) -> Result<bool> {
    if !p.chosen_reward.is_finite() || !p.rejected_reward.is_finite() {
        return Err(EvalError::NonFinite { id: p.id.clone() });
    }
    Ok(p.chosen_reward > p.rejected_reward)
}

pub fn score_pairwise_bench(pairs: &[PreferencePair]) -> Result<BenchReport> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts = BTreeMap::new();
    let mut correct = BTreeMap::new();
    for p in pairs {
        let ok = judge_pair(p)?;
        *counts.entry(p.domain.clone()).or_insert(0usize) += 1;
        *correct.entry(p.domain.clone()).or_insert(0usize) += ok as usize;
    }
    let per_domain: BTreeMap<String, f64> = counts
        .iter()
        .map(|(d, n)| (d.clone(), correct[d] as f64 / *n as f64))
        .collect();
    let total_correct: usize = correct.values().sum();
    let overall = total_correct as f64 / pairs.len() as f64;
    let macro_average = per_domain.values().sum::<f64>() / per_domain.len() as f64;
    Ok(BenchReport {
        per_domain_accuracy: per_domain.into_iter().map(|(d, a)| (d, a as f32)).collect(),
        overall_accuracy: overall as f32,
        macro_average: macro_average as f32,
        counts,
        correct,
    })
}

/// Index of the highest reward; the first one wins ties.
pub fn argmax_first(rewards: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rewards.iter().enumerate() {
        match best {
            Some(b) if rewards[b] >= *r => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn score_best_of_n(instances: &[BoNInstance]) -> Result<f32> {
    if instances.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut hits = 0usize;
    for inst in instances {
        if inst.candidate_rewards.len() != inst.candidate_correct.len() {
            return Err(EvalError::LengthMismatch {
                id: inst.id.clone(),
                rewards: inst.candidate_rewards.len(),
                flags: inst.candidate_correct.len(),
            });
        }
        if inst.candidate_rewards.iter().any(|r| !r.is_finite()) {
            return Err(EvalError::NonFinite { id: inst.id.clone() });
        }
        let best = argmax_first(&inst.candidate_rewards).ok_or_else(|| EvalError::NoCandidates { id: inst.id.clone() })?;
        hits += inst.candidate_correct[best] as usize;
    }
    Ok((hits as f64 / instances.len() as f64) as f32)
}

// ---------------------------------------------------------------------------
// Input files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub domain: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub chosen_text: String,
    pub rejected_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub text: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BonRecord {
    pub id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Pairwise,
    Bon,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalDataset {
    Pairwise(Vec<PairRecord>),
    BestOfN(Vec<BonRecord>),
}

trait HasId {
    fn id(&self) -> &str;
}

impl HasId for PairRecord {
    fn id(&self) -> &str {
        &self.id
    }
}

impl HasId for BonRecord {
    fn id(&self) -> &str {
        &self.id
    }
}

fn parse_lines<T: for<'de> Deserialize<'de> + HasId>(text: &str) -> Result<Vec<T>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(rec.id().to_string()) {
            return Err(EvalError::Parse {
                line: i + 1,
                msg: format!("duplicate id {:?}", rec.id()),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_pairwise(text: &str) -> Result<Vec<PairRecord>> {
    parse_lines(text)
}

pub fn parse_bon(text: &str) -> Result<Vec<BonRecord>> {
    let recs: Vec<BonRecord> = parse_lines(text)?;
    if let Some(r) = recs.iter().find(|r| r.candidates.is_empty()) {
        return Err(EvalError::NoCandidates { id: r.id.clone() });
    }
    Ok(recs)
}

impl EvalDataset {
    pub fn parse(text: &str, mode: EvalMode) -> Result<Self> {
        Ok(match mode {
            EvalMode::Pairwise => EvalDataset::Pairwise(parse_pairwise(text)?),
            EvalMode::Bon => EvalDataset::BestOfN(parse_bon(text)?),
        })
    }

    pub fn read(path: impl AsRef<Path>, mode: EvalMode) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text, mode)
    }

    pub fn len(&self) -> usize {
        match self {
            EvalDataset::Pairwise(r) => r.len(),
            EvalDataset::BestOfN(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One request per response. Pair ids get `#chosen` / `#rejected`,
    /// candidate ids get `#<index>`.
    pub fn requests(&self) -> Vec<ScoreRequest> {
        let req = |id: String, instruction: &str, image: &Option<String>, response: &str| ScoreRequest {
            id,
            instruction: instruction.to_string(),
            response: response.to_string(),
            image_path: image.clone(),
        };
        match self {
            EvalDataset::Pairwise(recs) => recs
                .iter()
                .flat_map(|r| {
                    [
                        req(format!("{}#chosen", r.id), &r.instruction, &r.image_path, &r.chosen_text),
                        req(format!("{}#rejected", r.id), &r.instruction, &r.image_path, &r.rejected_text),
                    ]
                })
                .collect(),
            EvalDataset::BestOfN(recs) => recs
                .iter()
                .flat_map(|r| {
                    r.candidates
                        .iter()
                        .enumerate()
                        .map(move |(i, c)| req(format!("{}#{i}", r.id), &r.instruction, &r.image_path, &c.text))
                })
                .collect(),
        }
    }
}

/// Rewards per record, one per response in record order (`[chosen,
/// rejected]` for pairs).
pub fn run_scorer(dataset: &EvalDataset, scorer: &mut dyn Scorer, model: &ModelRef) -> Result<Vec<Vec<f32>>> {
    let requests = dataset.requests();
    let rewards = scorer.score(model, &requests)?;
    let mut it = requests.iter().map(|r| rewards[&r.id]);
    Ok(match dataset {
        EvalDataset::Pairwise(recs) => recs.iter().map(|_| it.by_ref().take(2).collect()).collect(),
        EvalDataset::BestOfN(recs) => recs
            .iter()
            .map(|r| it.by_ref().take(r.candidates.len()).collect())
            .collect(),
    })
}

pub fn pairs_from_rewards(records: &[PairRecord], rewards: &[Vec<f32>]) -> Vec<PreferencePair> {
    records
        .iter()
        .zip(rewards)
        .map(|(r, w)| PreferencePair {
            id: r.id.clone(),
            domain: r.domain.clone(),
            chosen_reward: w[0],
            rejected_reward: w[1],
        })
        .collect()
}

pub fn bon_from_rewards(records: &[BonRecord], rewards: &[Vec<f32>]) -> Vec<BoNInstance> {
    records
        .iter()
        .zip(rewards)
        .map(|(r, w)| BoNInstance {
            id: r.id.clone(),
            candidate_rewards: w.clone(),
            candidate_correct: r.candidates.iter().map(|c| c.correct).collect(),
        })
        .collect()
}

/// Score a pairwise dataset end to end.
pub fn evaluate_pairwise(records: &[PairRecord], scorer: &mut dyn Scorer, model: &ModelRef) -> Result<BenchReport> {
    let ds = EvalDataset::Pairwise(records.to_vec());
    let rewards = run_scorer(&ds, scorer, model)?;
    score_pairwise_bench(&pairs_from_rewards(records, &rewards))
}

/// Score a Best-of-N dataset end to end.
pub fn evaluate_bon(records: &[BonRecord], scorer: &mut dyn Scorer, model: &ModelRef) -> Result<f32> {
    let ds = EvalDataset::BestOfN(records.to_vec());
    let rewards = run_scorer(&ds, scorer, model)?;
    score_best_of_n(&bon_from_rewards(records, &rewards))
}

/// Percentage with one decimal, as in the result tables.
pub fn pct(fraction: f32) -> String {
    format!("{:.1}", fraction as f64 * 100.0)
}

fn title(domain: &str) -> String {
    let mut c = domain.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl BenchReport {
    /// Markdown table: one column per domain, then Overall and Macro Avg.
    pub fn render(&self) -> String {
        let mut header: Vec<String> = self.per_domain_accuracy.keys().map(|d| title(d)).collect();
        header.push("Overall".into());
        header.push("Macro Avg.".into());
        let mut acc: Vec<String> = self.per_domain_accuracy.values().map(|a| pct(*a)).collect();
        acc.push(pct(self.overall_accuracy));
        acc.push(pct(self.macro_average));
        let mut n: Vec<String> = self.counts.values().map(|c| c.to_string()).collect();
        n.push(self.counts.values().sum::<usize>().to_string());
        n.push(String::new());

        let widths: Vec<usize> = header.iter().zip(&acc).map(|(h, a)| h.len().max(a.len())).collect();
        let row = |label: &str, cells: &[String]| {
            let mut s = format!("| {label:<8} |");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(s, " {c:>w$} |");
            }
            s.push('\n');
            s
        };
        let mut out = row("", &header);
        out.push_str(&format!("|{}|", "-".repeat(10)));
        for w in &widths {
            out.push_str(&format!("{}|", "-".repeat(w + 2)));
        }
        out.push('\n');
        out.push_str(&row("Accuracy", &acc));
        out.push_str(&row("Count", &n));
        out
    }
}
