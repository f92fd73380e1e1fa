//! Transformer merge strategies over task vectors.
//!
//! All arithmetic is done in F32. The five methods are:
//!
//! * **Linear**: `λ·θ_lvlm + (1−λ)·θ_rm`
//! * **Task arithmetic**: `θ_pre + λ·(τ_lvlm + τ_rm)` with `τ = θ − θ_pre`
//! * **TIES**: trim each τ to its top `ceil(d·n)` magnitudes, elect a sign per
//!   element by total magnitude, average the sign-matching survivors, then
//!   `θ_pre + λ·merged`
//! * **DARE + task arithmetic**: drop each delta with probability `1−d`,
//!   rescale survivors by `1/d`, then task arithmetic
//! * **DARE + TIES**: DARE sparsification in place of magnitude trimming,
//!   followed by sign election and disjoint mean
//!
//! Every map-level operation is a thin wrapper over a per-tensor slice
//! kernel, so tensors can be merged one at a time and in parallel.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MergeError {
    #[error("lambda {lambda} out of range for {method} (allowed {min}..={max})")]
    LambdaOutOfRange { method: MergeMethod, lambda: f32, min: f32, max: f32 },
    #[error("density {0} out of range (0, 1]")]
    DensityOutOfRange(f32),
    #[error("{0} requires a density")]
    MissingDensity(MergeMethod),
    #[error("{0} does not take a density")]
    UnexpectedDensity(MergeMethod),
    #[error("{0} requires a seed")]
    MissingSeed(MergeMethod),
    #[error("tensor {0} missing from one of the inputs")]
    NameMismatch(String),
    #[error("tensor {name}: shape {left:?} vs {right:?}")]
    ShapeMismatch { name: String, left: Vec<usize>, right: Vec<usize> },
    #[error("sign election needs at least one task vector")]
    NoTaskVectors,
}

pub type Result<T, E = MergeError> = std::result::Result<T, E>;

/// A tensor decoded to F32 for merging.
#[derive(Debug, Clone, PartialEq)]
pub struct F32Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl F32Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        F32Tensor { shape, values }
    }

    pub fn vector(values: Vec<f32>) -> Self {
        F32Tensor {
            shape: vec![values.len()],
            values,
        }
    }
}

pub type TensorMap = BTreeMap<String, F32Tensor>;

/// Which fine-tuned model a task vector came from. Also keys the DARE
/// random stream, so the two task vectors never share drop masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Lvlm,
    Rm,
}

impl Origin {
    fn tag(self) -> u8 {
        match self {
            Origin::Lvlm => 1,
            Origin::Rm => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub origin: Origin,
    pub deltas: TensorMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMethod {
    Linear,
    TaskArithmetic,
    Ties,
    DareTaskArithmetic,
    DareTies,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 5] = [
        MergeMethod::Linear,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::DareTaskArithmetic,
        MergeMethod::DareTies,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Linear => "linear",
            MergeMethod::TaskArithmetic => "task-arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::DareTaskArithmetic => "dare-task-arithmetic",
            MergeMethod::DareTies => "dare-ties",
        }
    }

    pub fn uses_density(self) -> bool {
        matches!(self, MergeMethod::Ties | MergeMethod::DareTaskArithmetic | MergeMethod::DareTies)
    }

    pub fn is_dare(self) -> bool {
        matches!(self, MergeMethod::DareTaskArithmetic | MergeMethod::DareTies)
    }

    /// Whether the pre-trained model participates in the transformer merge.
    pub fn uses_pretrained(self) -> bool {
        self != MergeMethod::Linear
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(MergeMethod::Linear),
            "task-arithmetic" | "ta" => Ok(MergeMethod::TaskArithmetic),
            "ties" => Ok(MergeMethod::Ties),
            "dare-task-arithmetic" | "dare-ta" => Ok(MergeMethod::DareTaskArithmetic),
            "dare-ties" => Ok(MergeMethod::DareTies),
            other => Err(format!(
                "unknown merge method {other:?} (expected linear, task-arithmetic, ties, dare-task-arithmetic, dare-ties)"
            )),
        }
    }
}

/// DARE combined with which downstream merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DareMode {
    TaskArithmetic,
    Ties,
}

/// One point of a hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub lambda: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Largest λ accepted for the task-vector methods.
pub const MAX_LAMBDA: f32 = 1.5;

impl MergeRecipe {
    pub fn linear(lambda: f32) -> Self {
        MergeRecipe {
            method: MergeMethod::Linear,
            lambda,
            density: None,
            seed: None,
        }
    }

    pub fn task_arithmetic(lambda: f32) -> Self {
        MergeRecipe {
            method: MergeMethod::TaskArithmetic,
            lambda,
            density: None,
            seed: None,
        }
    }

    pub fn ties(lambda: f32, density: f32) -> Self {
        MergeRecipe {
            method: MergeMethod::Ties,
            lambda,
            density: Some(density),
            seed: None,
        }
    }

    pub fn dare(mode: DareMode, lambda: f32, density: f32, seed: u64) -> Self {
        MergeRecipe {
            method: match mode {
                DareMode::TaskArithmetic => MergeMethod::DareTaskArithmetic,
                DareMode::Ties => MergeMethod::DareTies,
            },
            lambda,
            density: Some(density),
            seed: Some(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (min, max) = match self.method {
            MergeMethod::Linear => (0.0, 1.0),
            _ => (0.0, MAX_LAMBDA),
        };
        if !(self.lambda >= min && self.lambda <= max) {
            return Err(MergeError::LambdaOutOfRange {
                method: self.method,
                lambda: self.lambda,
                min,
                max,
            });
        }
        match (self.method.uses_density(), self.density) {
            (true, None) => return Err(MergeError::MissingDensity(self.method)),
            (false, Some(_)) => return Err(MergeError::UnexpectedDensity(self.method)),
            (true, Some(d)) => check_density(d)?,
            (false, None) => {}
        }
        if self.method.is_dare() && self.seed.is_none() {
            return Err(MergeError::MissingSeed(self.method));
        }
        Ok(())
    }

    /// Short stable label, e.g. `ties-l0.7-d0.4` or `dare-ties-l1-d0.2-s7`.
    pub fn label(&self) -> String {
        let mut s = format!("{}-l{}", self.method, self.lambda);
        if let Some(d) = self.density {
            s.push_str(&format!("-d{d}"));
        }
        if let (true, Some(seed)) = (self.method.is_dare(), self.seed) {
            s.push_str(&format!("-s{seed}"));
        }
        s
    }
}

fn check_density(d: f32) -> Result<()> {
    if d > 0.0 && d <= 1.0 {
        Ok(())
    } else {
        Err(MergeError::DensityOutOfRange(d))
    }
}

/// Number of entries kept by magnitude trimming: `ceil(d·n)`, at least one
/// for non-empty tensors.
///
/// The density is read as the shortest decimal that round-trips its F32
/// value, so `0.6` keeps exactly 3 of 5 rather than the 4 a binary
/// `0.6000000238 × 5` would round up to.
pub fn keep_count(density: f32, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    if density >= 1.0 {
        return n;
    }
    let k = match decimal_fraction(density) {
        Some((num, den)) => match num.checked_mul(n as u128) {
            Some(p) => p.div_ceil(den) as usize,
            None => (density as f64 * n as f64).ceil() as usize,
        },
        None => (density as f64 * n as f64).ceil() as usize,
    };
    k.clamp(1, n)
}

/// `d` as `num/den` with `den` a power of ten, from its shortest decimal form.
fn decimal_fraction(d: f32) -> Option<(u128, u128)> {
    let s = format!("{d}");
    let (int, frac) = s.split_once('.').unwrap_or((&s, ""));
    if frac.len() > 20 || !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let den = 10u128.pow(frac.len() as u32);
    let num = int.parse::<u128>().ok()? * den + if frac.is_empty() { 0 } else { frac.parse::<u128>().ok()? };
    Some((num, den))
}

// ---------------------------------------------------------------------------
// Slice kernels
// ---------------------------------------------------------------------------

fn same_len(name: &str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MergeError::ShapeMismatch {
            name: name.to_string(),
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(())
}

fn sub(model: &[f32], pre: &[f32]) -> Vec<f32> {
    model.iter().zip(pre).map(|(m, p)| m - p).collect()
}

// The λ = 0 and λ = 1 endpoints return the operand itself so signed zeros
// and non-finite values survive bit for bit.

fn linear_slice(lvlm: &[f32], rm: &[f32], lambda: f32) -> Vec<f32> {
    if lambda == 1.0 {
        return lvlm.to_vec();
    }
    if lambda == 0.0 {
        return rm.to_vec();
    }
    let rest = 1.0 - lambda;
    lvlm.iter().zip(rm).map(|(a, b)| lambda * a + rest * b).collect()
}

fn apply_delta(pre: &[f32], delta: &[f32], lambda: f32) -> Vec<f32> {
    if lambda == 0.0 {
        return pre.to_vec();
    }
    pre.iter().zip(delta).map(|(p, d)| p + lambda * d).collect()
}

fn add_deltas(pre: &[f32], a: &[f32], b: &[f32], lambda: f32) -> Vec<f32> {
    if lambda == 0.0 {
        return pre.to_vec();
    }
    pre.iter()
        .zip(a.iter().zip(b))
        .map(|(p, (x, y))| p + lambda * (x + y))
        .collect()
}

/// Keep the `keep_count(d, n)` largest magnitudes, zero the rest. Ties at
/// the cut keep the lower index.
pub fn trim_slice(values: &[f32], density: f32) -> Vec<f32> {
    let n = values.len();
    let k = keep_count(density, n);
    if k >= n {
        return values.to_vec();
    }
    let mut order: Vec<usize> = (0..n).collect();
    let by_magnitude = |a: &usize, b: &usize| {
        values[*b]
            .abs()
            .total_cmp(&values[*a].abs())
            .then_with(|| a.cmp(b))
    };
    order.select_nth_unstable_by(k - 1, by_magnitude);
    let mut out = vec![0.0; n];
    for &i in &order[..k] {
        out[i] = values[i];
    }
    out
}

/// Per element: +1 when the positive mass is at least the negative mass.
pub fn elect_sign_slices(tasks: &[&[f32]]) -> Vec<i8> {
    let n = tasks.first().map_or(0, |t| t.len());
    (0..n)
        .map(|i| {
            let (mut pos, mut neg) = (0.0f64, 0.0f64);
            for t in tasks {
                let v = t[i] as f64;
                if v > 0.0 {
                    pos += v;
                } else {
                    neg -= v;
                }
            }
            if pos >= neg {
                1
            } else {
                -1
            }
        })
        .collect()
}

/// Per element: mean of the nonzero values agreeing with the elected sign,
/// zero if there are none.
pub fn disjoint_mean_slices(tasks: &[&[f32]], signs: &[i8]) -> Vec<f32> {
    signs
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let (mut sum, mut count) = (0.0f64, 0u32);
            for t in tasks {
                let v = t[i];
                if (s > 0 && v > 0.0) || (s < 0 && v < 0.0) {
                    sum += v as f64;
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                (sum / count as f64) as f32
            }
        })
        .collect()
}

fn ties_delta(a: &[f32], b: &[f32]) -> Vec<f32> {
    let tasks = [a, b];
    let signs = elect_sign_slices(&tasks);
    disjoint_mean_slices(&tasks, &signs)
}

const DARE_CHUNK: usize = 4096;

/// Counter-based keep/drop stream for one tensor of one task vector.
///
/// Element `i` draws the 64-bit word at position `i` of a ChaCha8 stream
/// keyed by `(seed, origin, tensor name)`, so any element can be drawn
/// independently of iteration order or thread partitioning.
#[derive(Debug, Clone)]
pub struct DareStream {
    key: [u8; 32],
}

impl DareStream {
    pub fn new(seed: u64, origin: Origin, tensor_name: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"vlrm-merge/dare/v1");
        h.update(seed.to_le_bytes());
        h.update([origin.tag()]);
        h.update(tensor_name.as_bytes());
        DareStream { key: h.finalize().into() }
    }

    fn rng_at(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_word_pos(2 * index as u128);
        rng
    }

    /// Uniform draw in `[0, 1)` for element `index`.
    pub fn uniform(&self, index: usize) -> f64 {
        to_unit(self.rng_at(index).next_u64())
    }

    /// Keep mask for the first `n` elements at the given density.
    pub fn keep_mask(&self, n: usize, density: f32) -> Vec<bool> {
        let d = density as f64;
        let mut mask = vec![false; n];
        mask.par_chunks_mut(DARE_CHUNK).enumerate().for_each(|(c, chunk)| {
            let mut rng = self.rng_at(c * DARE_CHUNK);
            for m in chunk.iter_mut() {
                *m = to_unit(rng.next_u64()) < d;
            }
        });
        mask
    }
}

fn to_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Drop each value with probability `1 − d`; survivors are divided by `d`.
pub fn dare_slice(values: &[f32], density: f32, stream: &DareStream) -> Vec<f32> {
    if density >= 1.0 {
        return values.to_vec();
    }
    let mask = stream.keep_mask(values.len(), density);
    values
        .iter()
        .zip(mask)
        .map(|(v, keep)| if keep { v / density } else { 0.0 })
        .collect()
}

/// Merge one transformer tensor. `pre` may be omitted for Linear.
pub fn merge_tensor(
    recipe: &MergeRecipe,
    name: &str,
    pre: Option<&[f32]>,
    lvlm: &[f32],
    rm: &[f32],
) -> Result<Vec<f32>> {
    recipe.validate()?;
    same_len(name, lvlm, rm)?;
    let lambda = recipe.lambda;
    if recipe.method == MergeMethod::Linear {
        return Ok(linear_slice(lvlm, rm, lambda));
    }
    let pre = pre.ok_or_else(|| MergeError::NameMismatch(name.to_string()))?;
    same_len(name, pre, lvlm)?;
    let tau_lvlm = sub(lvlm, pre);
    let tau_rm = sub(rm, pre);
    let density = recipe.density.unwrap_or(1.0);
    let streams = || {
        let seed = recipe.seed.unwrap_or_default();
        (DareStream::new(seed, Origin::Lvlm, name), DareStream::new(seed, Origin::Rm, name))
    };
    Ok(match recipe.method {
        MergeMethod::Linear => unreachable!(),
        MergeMethod::TaskArithmetic => add_deltas(pre, &tau_lvlm, &tau_rm, lambda),
        MergeMethod::Ties => {
            let merged = ties_delta(&trim_slice(&tau_lvlm, density), &trim_slice(&tau_rm, density));
            apply_delta(pre, &merged, lambda)
        }
        MergeMethod::DareTaskArithmetic => {
            let (sl, sr) = streams();
            let a = dare_slice(&tau_lvlm, density, &sl);
            let b = dare_slice(&tau_rm, density, &sr);
            add_deltas(pre, &a, &b, lambda)
        }
        MergeMethod::DareTies => {
            let (sl, sr) = streams();
            let a = dare_slice(&tau_lvlm, density, &sl);
            let b = dare_slice(&tau_rm, density, &sr);
            apply_delta(pre, &ties_delta(&a, &b), lambda)
        }
    })
}

// ---------------------------------------------------------------------------
// Map-level operations
// ---------------------------------------------------------------------------

fn paired<'a>(a: &'a TensorMap, b: &'a TensorMap) -> Result<Vec<(&'a String, &'a F32Tensor, &'a F32Tensor)>> {
    if a.len() != b.len() {
        let missing = a
            .keys()
            .find(|k| !b.contains_key(*k))
            .or_else(|| b.keys().find(|k| !a.contains_key(*k)))
            .expect("maps of different size differ in some key");
        return Err(MergeError::NameMismatch(missing.clone()));
    }
    a.iter()
        .map(|(name, x)| {
            let y = b.get(name).ok_or_else(|| MergeError::NameMismatch(name.clone()))?;
            if x.shape != y.shape {
                return Err(MergeError::ShapeMismatch {
                    name: name.clone(),
                    left: x.shape.clone(),
                    right: y.shape.clone(),
                });
            }
            Ok((name, x, y))
        })
        .collect()
}

fn map_pairs<F>(a: &TensorMap, b: &TensorMap, f: F) -> Result<TensorMap>
where
    F: Fn(&str, &[f32], &[f32]) -> Vec<f32> + Sync,
{
    let pairs = paired(a, b)?;
    Ok(pairs
        .into_par_iter()
        .map(|(name, x, y)| (name.clone(), F32Tensor::new(x.shape.clone(), f(name, &x.values, &y.values))))
        .collect::<Vec<_>>()
        .into_iter()
        .collect())
}

fn map_each<F>(a: &TensorMap, f: F) -> TensorMap
where
    F: Fn(&str, &[f32]) -> Vec<f32> + Sync,
{
    a.par_iter()
        .map(|(name, x)| (name.clone(), F32Tensor::new(x.shape.clone(), f(name, &x.values))))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// `τ = θ_model − θ_pre`, tensor by tensor.
pub fn compute_task_vector(model: &TensorMap, pre: &TensorMap, origin: Origin) -> Result<TaskVector> {
    Ok(TaskVector {
        origin,
        deltas: map_pairs(model, pre, |_, m, p| sub(m, p))?,
    })
}

/// `λ·θ_lvlm + (1−λ)·θ_rm`, with `λ ∈ [0, 1]`.
pub fn merge_linear(lvlm: &TensorMap, rm: &TensorMap, lambda: f32) -> Result<TensorMap> {
    MergeRecipe::linear(lambda).validate()?;
    map_pairs(lvlm, rm, |_, a, b| linear_slice(a, b, lambda))
}

fn with_pre<F>(pre: &TensorMap, a: &TensorMap, b: &TensorMap, f: F) -> Result<TensorMap>
where
    F: Fn(&str, &[f32], &[f32], &[f32]) -> Vec<f32> + Sync,
{
    paired(pre, a)?;
    let pairs = paired(a, b)?;
    Ok(pairs
        .into_par_iter()
        .map(|(name, x, y)| {
            let p = &pre[name];
            (name.clone(), F32Tensor::new(p.shape.clone(), f(name, &p.values, &x.values, &y.values)))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect())
}

/// `θ_pre + λ·(τ_lvlm + τ_rm)`.
pub fn merge_task_arithmetic(
    pre: &TensorMap,
    tau_lvlm: &TaskVector,
    tau_rm: &TaskVector,
    lambda: f32,
) -> Result<TensorMap> {
    MergeRecipe::task_arithmetic(lambda).validate()?;
    with_pre(pre, &tau_lvlm.deltas, &tau_rm.deltas, |_, p, a, b| add_deltas(p, a, b, lambda))
}

/// Per-tensor magnitude trimming to density `d`.
pub fn trim_by_magnitude(tau: &TaskVector, density: f32) -> Result<TaskVector> {
    check_density(density)?;
    Ok(TaskVector {
        origin: tau.origin,
        deltas: map_each(&tau.deltas, |_, v| trim_slice(v, density)),
    })
}

/// Elected sign (+1 or −1) per tensor element.
pub type SignMap = BTreeMap<String, Vec<i8>>;

pub fn elect_sign(taus: &[TaskVector]) -> Result<SignMap> {
    let first = taus.first().ok_or(MergeError::NoTaskVectors)?;
    for t in &taus[1..] {
        paired(&first.deltas, &t.deltas)?;
    }
    Ok(first
        .deltas
        .keys()
        .map(|name| {
            let slices: Vec<&[f32]> = taus.iter().map(|t| t.deltas[name].values.as_slice()).collect();
            (name.clone(), elect_sign_slices(&slices))
        })
        .collect())
}

/// Mean of the sign-matching nonzero values per element.
pub fn disjoint_merge(taus: &[TaskVector], signs: &SignMap) -> Result<TensorMap> {
    let first = taus.first().ok_or(MergeError::NoTaskVectors)?;
    let mut out = TensorMap::new();
    for (name, t) in &first.deltas {
        let s = signs.get(name).ok_or_else(|| MergeError::NameMismatch(name.clone()))?;
        let mut slices = Vec::with_capacity(taus.len());
        for tau in taus {
            let v = tau.deltas.get(name).ok_or_else(|| MergeError::NameMismatch(name.clone()))?;
            same_len(name, &t.values, &v.values)?;
            slices.push(v.values.as_slice());
        }
        if s.len() != t.values.len() {
            return Err(MergeError::ShapeMismatch {
                name: name.clone(),
                left: t.shape.clone(),
                right: vec![s.len()],
            });
        }
        out.insert(name.clone(), F32Tensor::new(t.shape.clone(), disjoint_mean_slices(&slices, s)));
    }
    Ok(out)
}

/// TIES: trim both task vectors, elect signs jointly, take the disjoint
/// mean, add `λ` times the result to the pre-trained weights.
pub fn merge_ties(
    pre: &TensorMap,
    tau_lvlm: &TaskVector,
    tau_rm: &TaskVector,
    lambda: f32,
    density: f32,
) -> Result<TensorMap> {
    MergeRecipe::ties(lambda, density).validate()?;
    with_pre(pre, &tau_lvlm.deltas, &tau_rm.deltas, |_, p, a, b| {
        apply_delta(p, &ties_delta(&trim_slice(a, density), &trim_slice(b, density)), lambda)
    })
}

/// Random drop-and-rescale with a stream keyed by `(seed, origin, name)`.
pub fn dare_sparsify(tau: &TaskVector, density: f32, seed: u64) -> Result<TaskVector> {
    check_density(density)?;
    Ok(TaskVector {
        origin: tau.origin,
        deltas: map_each(&tau.deltas, |name, v| {
            dare_slice(v, density, &DareStream::new(seed, tau.origin, name))
        }),
    })
}

pub fn merge_dare(
    pre: &TensorMap,
    tau_lvlm: &TaskVector,
    tau_rm: &TaskVector,
    lambda: f32,
    density: f32,
    seed: u64,
    mode: DareMode,
) -> Result<TensorMap> {
    MergeRecipe::dare(mode, lambda, density, seed).validate()?;
    let a = dare_sparsify(tau_lvlm, density, seed)?;
    let b = dare_sparsify(tau_rm, density, seed)?;
    match mode {
        DareMode::TaskArithmetic => merge_task_arithmetic(pre, &a, &b, lambda),
        DareMode::Ties => with_pre(pre, &a.deltas, &b.deltas, |_, p, x, y| apply_delta(p, &ties_delta(x, y), lambda)),
    }
}

/// Merge whole transformer maps per recipe. `pre` is ignored for Linear.
pub fn merge_transformer(recipe: &MergeRecipe, pre: &TensorMap, lvlm: &TensorMap, rm: &TensorMap) -> Result<TensorMap> {
    recipe.validate()?;
    if recipe.method.uses_pretrained() {
        paired(pre, lvlm)?;
    }
    let pairs = paired(lvlm, rm)?;
    pairs
        .into_par_iter()
        .map(|(name, a, b)| {
            let p = pre.get(name).map(|t| t.values.as_slice());
            Ok((name.clone(), F32Tensor::new(a.shape.clone(), merge_tensor(recipe, name, p, &a.values, &b.values)?)))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}
