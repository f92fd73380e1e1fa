//! Hyperparameter grid search over merge recipes.
//!
//! Each recipe in the grid is assembled, scored on a fixed validation slice
//! and ranked by pairwise accuracy. When several recipes share the best
//! score, a second disjoint slice breaks the tie; anything still tied goes
//! to the earliest recipe in grid order (λ ascending, then d descending).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assemble::{assemble_vlrm, file_sha256, AssemblyPlan, TOOL_VERSION};
use crate::eval::{evaluate_pairwise, PairRecord};
use crate::manifest::ModelTriple;
use crate::merge::{MergeError, MergeMethod, MergeRecipe};
use crate::scorer::{ModelRef, Scorer};
use crate::tensor::write_checkpoint;

#[derive(Error, Debug)]
pub enum SweepError {
    #[error("empty {0} grid")]
    EmptyGrid(&'static str),
    #[error("{0} takes no density grid")]
    UnexpectedDensityGrid(MergeMethod),
    #[error("grid point {label}: {source}")]
    InvalidRecipe {
        label: String,
        #[source]
        source: MergeError,
    },
    #[error("no entries to select from")]
    NoEntries,
    #[error("accuracy for {0} is not finite")]
    NonFiniteAccuracy(String),
    #[error("validation set has {available} records, {wanted} needed ({primary} primary + {tiebreak} tiebreak)")]
    ValidationTooSmall {
        available: usize,
        wanted: usize,
        primary: usize,
        tiebreak: usize,
    },
    #[error("all {0} recipes failed")]
    AllFailed(usize),
    #[error("sweep config {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SweepError> = std::result::Result<T, E>;

pub fn default_lambda_grid(method: MergeMethod) -> Vec<f32> {
    if method.uses_density() {
        vec![0.5, 0.7, 1.0]
    } else {
        (0..=10).map(|i| i as f32 / 10.0).collect()
    }
}

pub fn default_density_grid(method: MergeMethod) -> Option<Vec<f32>> {
    method.uses_density().then(|| vec![0.2, 0.4, 0.6, 0.8])
}

pub const DEFAULT_PRIMARY_SIZE: usize = 400;
pub const DEFAULT_TIEBREAK_SIZE: usize = 100;

/// How primary accuracies are compared when looking for ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieRule {
    /// Exact equality of the stored fractions.
    #[default]
    Exact,
    /// Equality after rounding to one decimal of a percentage.
    RoundedPercent,
}

impl TieRule {
    fn key(self, accuracy: f32) -> f64 {
        match self {
            TieRule::Exact => accuracy as f64,
            TieRule::RoundedPercent => (accuracy as f64 * 1000.0).round(),
        }
    }
}

/// Fully resolved sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub method: MergeMethod,
    pub lambda_grid: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density_grid: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_set: Option<PathBuf>,
    pub primary_size: usize,
    pub tiebreak_size: usize,
    pub sampling_seed: u64,
    /// Seed carried by every DARE recipe of the grid.
    pub dare_seed: u64,
    pub tie_rule: TieRule,
}

/// Sweep config as written in a file; omitted fields take their defaults.
///
/// ```toml
/// method = "ties"
/// lambda_grid = [0.5, 0.7, 1.0]
/// density_grid = [0.2, 0.4, 0.6, 0.8]
/// validation_set = "validation.jsonl"
/// primary_size = 400
/// tiebreak_size = 100
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfigFile {
    pub method: Option<MergeMethod>,
    pub lambda_grid: Option<Vec<f32>>,
    pub density_grid: Option<Vec<f32>>,
    pub validation_set: Option<PathBuf>,
    pub primary_size: Option<usize>,
    pub tiebreak_size: Option<usize>,
    pub sampling_seed: Option<u64>,
    pub dare_seed: Option<u64>,
    pub tie_rule: Option<TieRule>,
}

impl SweepConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |msg: String| SweepError::Config {
            path: path.display().to_string(),
            msg,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut file = Self::parse(&text).map_err(err)?;
        // A relative validation path is relative to the config file.
        if let (Some(v), Some(dir)) = (&file.validation_set, path.parent()) {
            if v.is_relative() {
                file.validation_set = Some(dir.join(v));
            }
        }
        Ok(file)
    }

    /// Fill defaults. `method` overrides the file's method when given.
    pub fn resolve(self, method: Option<MergeMethod>) -> Result<SweepConfig> {
        let method = method.or(self.method).ok_or_else(|| SweepError::Config {
            path: "<config>".into(),
            msg: "no merge method given".into(),
        })?;
        let config = SweepConfig {
            method,
            lambda_grid: self.lambda_grid.unwrap_or_else(|| default_lambda_grid(method)),
            density_grid: self.density_grid.or_else(|| default_density_grid(method)),
            validation_set: self.validation_set,
            primary_size: self.primary_size.unwrap_or(DEFAULT_PRIMARY_SIZE),
            tiebreak_size: self.tiebreak_size.unwrap_or(DEFAULT_TIEBREAK_SIZE),
            sampling_seed: self.sampling_seed.unwrap_or(0),
            dare_seed: self.dare_seed.unwrap_or(0),
            tie_rule: self.tie_rule.unwrap_or_default(),
        };
        config.validate()?;
        Ok(config)
    }
}

impl SweepConfig {
    pub fn defaults(method: MergeMethod) -> Self {
        SweepConfigFile::default()
            .resolve(Some(method))
            .expect("default grids are valid")
    }

    pub fn validate(&self) -> Result<()> {
        generate_grid(self).map(|_| ())
    }
}

fn recipe_at(config: &SweepConfig, lambda: f32, density: Option<f32>) -> MergeRecipe {
    MergeRecipe {
        method: config.method,
        lambda,
        density,
        seed: config.method.is_dare().then_some(config.dare_seed),
    }
}

/// Grid order: λ ascending, then d descending.
pub fn grid_order(a: &MergeRecipe, b: &MergeRecipe) -> Ordering {
    a.lambda
        .total_cmp(&b.lambda)
        .then_with(|| match (a.density, b.density) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (x, y) => x.is_some().cmp(&y.is_some()),
        })
}

/// Every recipe of the grid in grid order, duplicates removed.
pub fn generate_grid(config: &SweepConfig) -> Result<Vec<MergeRecipe>> {
    if config.lambda_grid.is_empty() {
        return Err(SweepError::EmptyGrid("lambda"));
    }
    let densities: Vec<Option<f32>> = match (&config.density_grid, config.method.uses_density()) {
        (Some(g), true) if g.is_empty() => return Err(SweepError::EmptyGrid("density")),
        (Some(g), true) => g.iter().copied().map(Some).collect(),
        (None, true) => return Err(SweepError::EmptyGrid("density")),
        (Some(_), false) => return Err(SweepError::UnexpectedDensityGrid(config.method)),
        (None, false) => vec![None],
    };
    let mut grid = Vec::new();
    for &l in &config.lambda_grid {
        for &d in &densities {
            let r = recipe_at(config, l, d);
            r.validate().map_err(|source| SweepError::InvalidRecipe {
                label: r.label(),
                source,
            })?;
            grid.push(r);
        }
    }
    grid.sort_by(grid_order);
    grid.dedup_by(|a, b| grid_order(a, b) == Ordering::Equal);
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub recipe: MergeRecipe,
    pub primary_accuracy: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tiebreak_accuracy: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    pub winner: MergeRecipe,
}

impl SweepResult {
    pub fn winner_entry(&self) -> &SweepEntry {
        self.entries
            .iter()
            .find(|e| e.recipe == self.winner)
            .expect("winner is one of the entries")
    }
}

/// Pick the best recipe. `tiebreak` is consulted only when two or more
/// entries share the top primary accuracy, and only for those entries. A
/// recipe whose tiebreak score is unavailable (`None`) ranks below any
/// scored one.
pub fn select_best(
    entries: &[(MergeRecipe, f32)],
    mut tiebreak: impl FnMut(&MergeRecipe) -> Option<f32>,
    rule: TieRule,
) -> Result<SweepResult> {
    if entries.is_empty() {
        return Err(SweepError::NoEntries);
    }
    if let Some((r, _)) = entries.iter().find(|(_, a)| !a.is_finite()) {
        return Err(SweepError::NonFiniteAccuracy(r.label()));
    }
    let mut out: Vec<SweepEntry> = entries
        .iter()
        .map(|(recipe, acc)| SweepEntry {
            recipe: *recipe,
            primary_accuracy: *acc,
            tiebreak_accuracy: None,
        })
        .collect();
    let best = out
        .iter()
        .map(|e| rule.key(e.primary_accuracy))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut tied: Vec<usize> = (0..out.len())
        .filter(|&i| rule.key(out[i].primary_accuracy) == best)
        .collect();
    tied.sort_by(|&a, &b| grid_order(&out[a].recipe, &out[b].recipe));

    let winner = if tied.len() == 1 {
        tied[0]
    } else {
        for &i in &tied {
            out[i].tiebreak_accuracy = tiebreak(&out[i].recipe);
        }
        // First in grid order among the maximal tiebreak scores.
        let mut w = tied[0];
        for &i in &tied[1..] {
            let better = match (out[i].tiebreak_accuracy, out[w].tiebreak_accuracy) {
                (Some(x), Some(y)) => x > y,
                (Some(_), None) => true,
                _ => false,
            };
            if better {
                w = i;
            }
        }
        w
    };
    Ok(SweepResult {
        winner: out[winner].recipe,
        entries: out,
    })
}

/// Disjoint primary and tiebreak index sets drawn from `n` records. The
/// permutation depends only on `n` and `seed`, so the primary slice does not
/// change with the tiebreak size.
pub fn sample_validation(n: usize, seed: u64, primary: usize, tiebreak: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if primary + tiebreak > n {
        return Err(SweepError::ValidationTooSmall {
            available: n,
            wanted: primary + tiebreak,
            primary,
            tiebreak,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut p = idx[..primary].to_vec();
    let mut t = idx[primary..primary + tiebreak].to_vec();
    p.sort_unstable();
    t.sort_unstable();
    Ok((p, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryStatus {
    Ok,
    Failed,
}

/// One line of the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ManifestRecord {
    Entry {
        recipe: MergeRecipe,
        status: EntryStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        primary_accuracy: Option<f32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tiebreak_accuracy: Option<f32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        variant: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fingerprint: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Winner {
        recipe: MergeRecipe,
        primary_accuracy: f32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tiebreak_accuracy: Option<f32>,
        variant: String,
    },
}

pub fn manifest_to_jsonl(records: &[ManifestRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// Inputs shared by every recipe of a sweep.
pub struct SweepInputs<'a> {
    pub triple: &'a ModelTriple,
    /// Input file hashes; they key the variant cache and are copied into
    /// every variant's metadata.
    pub provenance: BTreeMap<String, String>,
    pub validation: &'a [PairRecord],
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub result: SweepResult,
    pub records: Vec<ManifestRecord>,
    pub manifest_path: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Cache key of a variant: hash of the tool version, input hashes and recipe.
pub fn variant_key(provenance: &BTreeMap<String, String>, recipe: &MergeRecipe) -> String {
    let mut h = Sha256::new();
    h.update(TOOL_VERSION.as_bytes());
    for (k, v) in provenance {
        h.update([0]);
        h.update(k.as_bytes());
        h.update([1]);
        h.update(v.as_bytes());
    }
    h.update([2]);
    h.update(serde_json::to_vec(recipe).expect("recipe serializes"));
    hex::encode(h.finalize())
}

struct Variant {
    rel: String,
    model: ModelRef,
}

fn build_variant(recipe: &MergeRecipe, inputs: &SweepInputs, workdir: &Path) -> Result<Variant, String> {
    let key = variant_key(&inputs.provenance, recipe);
    let rel = format!("variants/{}-{}.safetensors", recipe.label(), &key[..12]);
    let path = workdir.join(&rel);
    if path.exists() {
        info!("{}: reusing cached variant {}", recipe.label(), rel);
    } else {
        info!("{}: assembling", recipe.label());
        let mut plan = AssemblyPlan::new(*recipe, inputs.triple);
        plan.provenance = inputs.provenance.clone();
        let merged = assemble_vlrm(&plan).map_err(|e| e.to_string())?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        }
        // Write under a temporary name so an interrupted run never leaves a
        // partial file that a later run would take for a cached variant.
        let tmp = path.with_extension("partial");
        write_checkpoint(&merged, &tmp).map_err(|e| e.to_string())?;
        fs::rename(&tmp, &path).map_err(|e| e.to_string())?;
        let tmp_vocab = crate::tensor::vocab_sidecar_path(&tmp);
        if tmp_vocab.exists() {
            fs::rename(&tmp_vocab, crate::tensor::vocab_sidecar_path(&path)).map_err(|e| e.to_string())?;
        }
    }
    let fingerprint = file_sha256(&path).map_err(|e| e.to_string())?;
    Ok(Variant {
        rel,
        model: ModelRef::new(Some(path), fingerprint),
    })
}

fn accuracy_on(
    records: &[PairRecord],
    idx: &[usize],
    scorer: &mut dyn Scorer,
    model: &ModelRef,
) -> Result<f32, String> {
    let subset: Vec<PairRecord> = idx.iter().map(|&i| records[i].clone()).collect();
    evaluate_pairwise(&subset, scorer, model)
        .map(|r| r.overall_accuracy)
        .map_err(|e| e.to_string())
}

/// Assemble, score and rank every recipe of the grid. Variants are written
/// under `workdir/variants/` and the run manifest to
/// `workdir/manifest.jsonl`. Failed recipes are recorded and excluded from
/// selection; the sweep fails only when every recipe fails.
pub fn run_sweep(
    config: &SweepConfig,
    inputs: &SweepInputs,
    scorer: &mut dyn Scorer,
    workdir: &Path,
) -> Result<SweepOutcome> {
    let grid = generate_grid(config)?;
    let (primary, tiebreak) = sample_validation(
        inputs.validation.len(),
        config.sampling_seed,
        config.primary_size,
        config.tiebreak_size,
    )?;
    fs::create_dir_all(workdir)?;

    let mut variants: Vec<Option<Variant>> = Vec::with_capacity(grid.len());
    let mut records = Vec::with_capacity(grid.len() + 1);
    let mut scored = Vec::new();
    for recipe in &grid {
        let outcome = build_variant(recipe, inputs, workdir).and_then(|v| {
            let acc = accuracy_on(inputs.validation, &primary, scorer, &v.model)?;
            Ok((v, acc))
        });
        match outcome {
            Ok((v, acc)) => {
                info!("{}: primary accuracy {:.4}", recipe.label(), acc);
                scored.push((*recipe, acc));
                records.push(ManifestRecord::Entry {
                    recipe: *recipe,
                    status: EntryStatus::Ok,
                    primary_accuracy: Some(acc),
                    tiebreak_accuracy: None,
                    variant: Some(v.rel.clone()),
                    fingerprint: Some(v.model.fingerprint.clone()),
                    error: None,
                });
                variants.push(Some(v));
            }
            Err(e) => {
                warn!("{}: failed: {e}", recipe.label());
                records.push(ManifestRecord::Entry {
                    recipe: *recipe,
                    status: EntryStatus::Failed,
                    primary_accuracy: None,
                    tiebreak_accuracy: None,
                    variant: None,
                    fingerprint: None,
                    error: Some(e),
                });
                variants.push(None);
            }
        }
    }

    let manifest_path = workdir.join(MANIFEST_FILE);
    if scored.is_empty() {
        fs::write(&manifest_path, manifest_to_jsonl(&records))?;
        return Err(SweepError::AllFailed(grid.len()));
    }

    let variant_of = |r: &MergeRecipe| {
        grid.iter()
            .position(|g| g == r)
            .and_then(|i| variants[i].as_ref())
            .expect("scored recipes have variants")
    };
    let result = select_best(
        &scored,
        |r| {
            if tiebreak.is_empty() {
                return None;
            }
            match accuracy_on(inputs.validation, &tiebreak, scorer, &variant_of(r).model) {
                Ok(a) => Some(a),
                Err(e) => {
                    warn!("{}: tiebreak scoring failed: {e}", r.label());
                    None
                }
            }
        },
        config.tie_rule,
    )?;

    for rec in &mut records {
        if let ManifestRecord::Entry {
            recipe,
            tiebreak_accuracy,
            ..
        } = rec
        {
            if let Some(e) = result.entries.iter().find(|e| e.recipe == *recipe) {
                *tiebreak_accuracy = e.tiebreak_accuracy;
            }
        }
    }
    let w = result.winner_entry();
    records.push(ManifestRecord::Winner {
        recipe: w.recipe,
        primary_accuracy: w.primary_accuracy,
        tiebreak_accuracy: w.tiebreak_accuracy,
        variant: variant_of(&w.recipe).rel.clone(),
    });
    fs::write(&manifest_path, manifest_to_jsonl(&records))?;
    Ok(SweepOutcome {
        result,
        records,
        manifest_path,
    })
}
