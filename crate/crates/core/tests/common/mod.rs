//! Shared test support: scalar reference merges, appendix grid tables and
//! random fixtures.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlrm_merge::merge::{DareStream, MergeMethod, MergeRecipe, Origin};
use vlrm_merge::tensor::{DType, Tensor};

/// Scalar-loop reference merges. Task vectors are formed in F32, as the
/// library defines them; everything after that runs in f64 over plain
/// index loops.
pub mod oracle {
    use super::*;

    /// `ceil(p·n / 100)` for a density of `p` percent, at least 1.
    pub fn keep(percent: u32, n: usize) -> usize {
        let k = (percent as usize * n).div_ceil(100);
        k.max(1).min(n)
    }

    /// Indices of the `k` largest magnitudes, earlier index first on ties.
    pub fn top_k(values: &[f32], k: usize) -> Vec<bool> {
        let n = values.len();
        let mut kept = vec![false; n];
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..n {
                if kept[i] {
                    continue;
                }
                match best {
                    None => best = Some(i),
                    Some(b) if values[i].abs() > values[b].abs() => best = Some(i),
                    _ => {}
                }
            }
            kept[best.unwrap()] = true;
        }
        kept
    }

    pub fn trim(values: &[f32], percent: u32) -> Vec<f64> {
        let mask = top_k(values, keep(percent, values.len()));
        (0..values.len())
            .map(|i| if mask[i] { values[i] as f64 } else { 0.0 })
            .collect()
    }

    pub fn dare(values: &[f32], percent: u32, stream: &DareStream) -> Vec<f64> {
        let d = percent as f32 / 100.0;
        if percent == 100 {
            return values.iter().map(|v| *v as f64).collect();
        }
        (0..values.len())
            .map(|i| {
                if stream.uniform(i) < d as f64 {
                    values[i] as f64 / d as f64
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn sign(a: f64, b: f64) -> f64 {
        let pos = a.max(0.0) + b.max(0.0);
        let neg = (-a).max(0.0) + (-b).max(0.0);
        if pos >= neg {
            1.0
        } else {
            -1.0
        }
    }

    pub fn disjoint(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..a.len() {
            let s = sign(a[i], b[i]);
            let mut sum = 0.0;
            let mut count = 0;
            for v in [a[i], b[i]] {
                if v != 0.0 && v.signum() == s {
                    sum += v;
                    count += 1;
                }
            }
            out.push(if count == 0 { 0.0 } else { sum / count as f64 });
        }
        out
    }

    pub fn tau(model: &[f32], pre: &[f32]) -> Vec<f32> {
        (0..model.len()).map(|i| model[i] - pre[i]).collect()
    }

    /// Reference result for `method` with density given in percent, paired
    /// with the largest operand magnitude at each element: the inputs and
    /// the λ-scaled sparsified deltas.
    pub fn merge(
        method: MergeMethod,
        lambda: f32,
        percent: Option<u32>,
        seed: u64,
        name: &str,
        pre: &[f32],
        lvlm: &[f32],
        rm: &[f32],
    ) -> Vec<(f64, f64)> {
        let l = lambda as f64;
        let n = lvlm.len();
        let input_scale = |i: usize| (pre[i].abs() as f64).max(lvlm[i].abs() as f64).max(rm[i].abs() as f64);
        if method == MergeMethod::Linear {
            return (0..n)
                .map(|i| (l * lvlm[i] as f64 + (1.0 - l) * rm[i] as f64, input_scale(i)))
                .collect();
        }
        let tl = tau(lvlm, pre);
        let tr = tau(rm, pre);
        let p = percent.unwrap_or(100);
        let (a, b): (Vec<f64>, Vec<f64>) = match method {
            MergeMethod::TaskArithmetic => (
                tl.iter().map(|v| *v as f64).collect(),
                tr.iter().map(|v| *v as f64).collect(),
            ),
            MergeMethod::Ties => (trim(&tl, p), trim(&tr, p)),
            MergeMethod::DareTaskArithmetic | MergeMethod::DareTies => (
                dare(&tl, p, &DareStream::new(seed, Origin::Lvlm, name)),
                dare(&tr, p, &DareStream::new(seed, Origin::Rm, name)),
            ),
            MergeMethod::Linear => unreachable!(),
        };
        let delta: Vec<f64> = match method {
            MergeMethod::Ties | MergeMethod::DareTies => disjoint(&a, &b),
            _ => (0..n).map(|i| a[i] + b[i]).collect(),
        };
        (0..n)
            .map(|i| {
                let scale = input_scale(i).max(l * (a[i].abs() + b[i].abs()));
                (pre[i] as f64 + l * delta[i], scale)
            })
            .collect()
    }

    /// Error relative to the larger of the expected value and the largest
    /// operand magnitude at that element.
    pub fn rel_err(got: f32, want: f64, scale: f64) -> f64 {
        let denom = want.abs().max(scale);
        if denom == 0.0 {
            (got as f64).abs()
        } else {
            (got as f64 - want).abs() / denom
        }
    }
}

/// Values drawn from a small lattice so exact ties, zeros and sign
/// cancellations are common.
pub fn lattice_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.3) {
                rng.gen_range(-8i32..=8) as f32 * 0.125
            } else {
                rng.gen_range(-2.0f32..2.0)
            }
        })
        .collect()
}

pub fn random_dtype(rng: &mut ChaCha8Rng) -> DType {
    DType::ALL[rng.gen_range(0..DType::ALL.len())]
}

/// Round values through `dtype`.
pub fn through(dtype: DType, values: &[f32]) -> Vec<f32> {
    Tensor::from_f32("t", dtype, vec![values.len()], values).unwrap().to_f32()
}

pub struct RandomCase {
    pub recipe: MergeRecipe,
    pub percent: Option<u32>,
    pub dtype: DType,
    pub pre: Vec<f32>,
    pub lvlm: Vec<f32>,
    pub rm: Vec<f32>,
}

/// A random triple of up to 256 elements in a random dtype, with a random
/// recipe for `method`.
pub fn random_case(rng: &mut ChaCha8Rng, method: MergeMethod) -> RandomCase {
    let n = rng.gen_range(1..=256);
    let dtype = random_dtype(rng);
    let pre = through(dtype, &lattice_values(rng, n));
    let model = |rng: &mut ChaCha8Rng| {
        let d = lattice_values(rng, n);
        through(dtype, &(0..n).map(|i| pre[i] + d[i] * 0.5).collect::<Vec<_>>())
    };
    let lvlm = model(rng);
    let rm = model(rng);
    let max_lambda = if method == MergeMethod::Linear { 1.0 } else { 1.5 };
    let lambda = rng.gen_range(0..=(max_lambda * 20.0) as u32) as f32 / 20.0;
    let percent = method.uses_density().then(|| {
        if rng.gen_bool(0.5) {
            [20, 40, 60, 80][rng.gen_range(0..4)]
        } else {
            rng.gen_range(1..=100)
        }
    });
    let recipe = MergeRecipe {
        method,
        lambda,
        density: percent.map(|p| p as f32 / 100.0),
        seed: method.is_dare().then(|| rng.gen()),
    };
    RandomCase { recipe, percent, dtype, pre, lvlm, rm }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One appendix grid table: accuracies in percent in grid order, the
/// starred or bold winner, and whether a tie had to be broken.
pub struct GridTable {
    pub name: &'static str,
    pub method: MergeMethod,
    pub entries: Vec<(MergeRecipe, f32)>,
    pub winner: MergeRecipe,
    pub tied: Vec<MergeRecipe>,
}

fn lambda_table(name: &'static str, method: MergeMethod, acc: [f32; 11], winner: f32, tied: &[f32]) -> GridTable {
    let recipe = |l: f32| MergeRecipe {
        method,
        lambda: l,
        density: None,
        seed: None,
    };
    GridTable {
        name,
        method,
        entries: (0..11).map(|i| (recipe(i as f32 / 10.0), acc[i])).collect(),
        winner: recipe(winner),
        tied: tied.iter().map(|l| recipe(*l)).collect(),
    }
}

/// Columns in the appendix order: λ = 1.0, 0.7, 0.5, each with d = 0.8,
/// 0.6, 0.4, 0.2.
fn density_table(
    name: &'static str,
    method: MergeMethod,
    acc: [f32; 12],
    winner: (f32, f32),
    tied: &[(f32, f32)],
) -> GridTable {
    let recipe = |l: f32, d: f32| MergeRecipe {
        method,
        lambda: l,
        density: Some(d),
        seed: method.is_dare().then_some(0),
    };
    let mut entries = Vec::new();
    for (li, l) in [1.0, 0.7, 0.5].into_iter().enumerate() {
        for (di, d) in [0.8, 0.6, 0.4, 0.2].into_iter().enumerate() {
            entries.push((recipe(l, d), acc[li * 4 + di]));
        }
    }
    GridTable {
        name,
        method,
        entries,
        winner: recipe(winner.0, winner.1),
        tied: tied.iter().map(|(l, d)| recipe(*l, *d)).collect(),
    }
}

/// All ten hyperparameter-selection tables (RLAIF-V validation sample).
pub fn grid_tables() -> Vec<GridTable> {
    use MergeMethod::*;
    vec![
        lambda_table(
            "linear/tulu-2.5",
            Linear,
            [49.8, 52.3, 50.3, 52.5, 52.0, 49.0, 47.3, 46.5, 46.5, 50.3, 47.0],
            0.3,
            &[],
        ),
        lambda_table(
            "task-vec/tulu-2.5",
            TaskArithmetic,
            [55.3, 50.0, 53.3, 54.5, 53.5, 49.3, 52.8, 54.0, 53.8, 54.8, 55.3],
            1.0,
            &[0.0, 1.0],
        ),
        density_table(
            "ties/tulu-2.5",
            Ties,
            [53.5, 53.8, 52.3, 50.0, 53.5, 53.8, 52.3, 50.3, 53.5, 53.8, 52.3, 50.0],
            (1.0, 0.6),
            &[(1.0, 0.6), (0.7, 0.6), (0.5, 0.6)],
        ),
        density_table(
            "dare-task-vec/tulu-2.5",
            DareTaskArithmetic,
            [55.3, 56.5, 54.5, 55.3, 54.5, 54.0, 53.5, 55.8, 49.0, 49.3, 51.8, 54.8],
            (1.0, 0.6),
            &[],
        ),
        density_table(
            "dare-ties/tulu-2.5",
            DareTies,
            [55.5, 56.0, 56.0, 55.5, 53.3, 54.3, 53.8, 52.3, 51.5, 49.8, 51.5, 51.8],
            (1.0, 0.6),
            &[(1.0, 0.6), (1.0, 0.4)],
        ),
        lambda_table(
            "linear/tulu-3",
            Linear,
            [51.5, 46.8, 50.3, 49.3, 52.0, 50.8, 49.3, 47.3, 49.5, 49.3, 51.3],
            0.4,
            &[],
        ),
        lambda_table(
            "task-vec/tulu-3",
            TaskArithmetic,
            [49.3, 53.5, 49.8, 49.8, 51.0, 51.0, 53.8, 53.0, 53.0, 50.3, 55.3],
            1.0,
            &[],
        ),
        density_table(
            "ties/tulu-3",
            Ties,
            [53.5, 53.3, 54.0, 51.0, 53.8, 54.3, 54.3, 51.5, 53.5, 53.3, 54.0, 51.0],
            (0.7, 0.4),
            &[(0.7, 0.6), (0.7, 0.4)],
        ),
        density_table(
            "dare-task-vec/tulu-3",
            DareTaskArithmetic,
            [54.8, 55.8, 55.3, 58.0, 53.8, 53.8, 52.3, 50.3, 50.0, 50.3, 51.0, 51.5],
            (1.0, 0.2),
            &[],
        ),
        density_table(
            "dare-ties/tulu-3",
            DareTies,
            [55.8, 55.8, 56.0, 56.8, 52.8, 52.5, 52.5, 52.3, 55.3, 53.8, 48.0, 54.5],
            (1.0, 0.2),
            &[],
        ),
    ]
}

impl GridTable {
    /// Entries with accuracies as fractions.
    pub fn fractions(&self) -> Vec<(MergeRecipe, f32)> {
        self.entries
            .iter()
            .map(|(r, a)| (*r, (*a as f64 / 100.0) as f32))
            .collect()
    }
}
